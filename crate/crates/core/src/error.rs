use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("panel has no records")]
    EmptyPanel,
    #[error("unit {unit} has more than one record for period {period}")]
    DuplicateCell { unit: String, period: u32 },
    #[error("unit {unit} is missing period {period} (panel must be balanced over 1..={periods})")]
    UnbalancedPanel { unit: String, period: u32, periods: u32 },
    #[error("unit {unit} has conflicting adoption times {first} and {second}")]
    InconsistentAdoption { unit: String, first: String, second: String },
    #[error("unit {unit} has conflicting {field} values across periods")]
    InconsistentUnitAttribute { unit: String, field: &'static str },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("group {group} mixes adoption times {first} and {second}")]
    GroupAdoptionMismatch { group: String, first: String, second: String },
    #[error("shift by {shift} leaves adoption {adoption} without a pre-period")]
    ShiftOutOfRange { shift: u32, adoption: String },
    #[error("placebo shift must be at least 1")]
    InvalidShift,

    #[error("non-finite value in solver input")]
    NonFiniteInput,
    #[error("linear system is singular: {0}")]
    SingularSystem(String),
    #[error("balance constraints are infeasible (residual {residual:.3e})")]
    InfeasibleConstraints { residual: f64 },
    #[error("malformed balancing problem: {0}")]
    MalformedProblem(String),

    #[error("no control series with adoption later than {adoption}")]
    NoControls { adoption: u32 },
    #[error("a_max + K = {a_max} + {k_max} exceeds the number of periods {periods}")]
    HorizonOverflow { a_max: u32, k_max: u32, periods: u32 },
    #[error("no cohort with adoption in [{a_min}, {a_max}]")]
    EmptyCohortRange { a_min: u32, a_max: u32 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("horizon weights sum to {sum} instead of 1")]
    WeightSumViolation { sum: f64 },
    #[error("panel has no untreated cells to fit a two-way model on")]
    NoUntreatedCells,

    #[error("affine hull condition fails (loading rank {loadings_rank}, factor rank {factors_rank}, r = {rank})")]
    AffineHull {
        loadings_ok: bool,
        factors_ok: bool,
        loadings_rank: usize,
        factors_rank: usize,
        rank: usize,
    },
    #[error("factor structure does not match panel: {0}")]
    FactorMismatch(String),

    #[error("bootstrap replicate {replicate} kept drawing a degenerate cohort weight")]
    DegenerateCohort { replicate: usize },
    #[error("standard error is zero")]
    ZeroSe,
    #[error("invalid bootstrap configuration: {0}")]
    InvalidBootstrap(String),

    #[error("infeasible simulation design: {0}")]
    InfeasibleSpec(String),
    #[error("failed to parse {what}: {message}")]
    Parse { what: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable code, `module.reason`.
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyPanel => "panel.empty",
            Error::DuplicateCell { .. } => "panel.duplicate_cell",
            Error::UnbalancedPanel { .. } => "panel.unbalanced",
            Error::InconsistentAdoption { .. } => "panel.inconsistent_adoption",
            Error::InconsistentUnitAttribute { .. } => "panel.inconsistent_attribute",
            Error::InvalidRecord(_) => "panel.invalid_record",
            Error::GroupAdoptionMismatch { .. } => "panel.group_adoption_mismatch",
            Error::ShiftOutOfRange { .. } => "panel.shift_out_of_range",
            Error::InvalidShift => "panel.invalid_shift",
            Error::NonFiniteInput => "balancing.non_finite_input",
            Error::SingularSystem(_) => "balancing.singular_system",
            Error::InfeasibleConstraints { .. } => "balancing.infeasible_constraints",
            Error::MalformedProblem(_) => "balancing.malformed_problem",
            Error::NoControls { .. } => "ssdid.no_controls",
            Error::HorizonOverflow { .. } => "ssdid.horizon_overflow",
            Error::EmptyCohortRange { .. } => "ssdid.empty_cohort_range",
            Error::InvalidConfig(_) => "ssdid.invalid_config",
            Error::WeightSumViolation { .. } => "ssdid.weight_sum_violation",
            Error::NoUntreatedCells => "ssdid.no_untreated_cells",
            Error::AffineHull { loadings_ok, .. } => {
                if !loadings_ok {
                    "affine_hull.loadings_rank"
                } else {
                    "affine_hull.factors_rank"
                }
            }
            Error::FactorMismatch(_) => "oracle.factor_mismatch",
            Error::DegenerateCohort { .. } => "inference.degenerate_cohort",
            Error::ZeroSe => "inference.zero_se",
            Error::InvalidBootstrap(_) => "inference.invalid_config",
            Error::InfeasibleSpec(_) => "dgp.infeasible_spec",
            Error::Parse { .. } => "io.parse",
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => "io.not_found",
            Error::Io(_) => "io.error",
            Error::Csv(e) => match e.kind() {
                csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                    "io.not_found"
                }
                _ => "io.csv",
            },
        }
    }
}
