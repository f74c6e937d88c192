use thiserror::Error;

pub type Result<T> = std::result::Result<T, SharingError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SharingError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("prosumer {id}: invalid curves: {reason}")]
    InvalidCurve { id: usize, reason: String },

    #[error("prosumer {id}: invalid capacity bounds: {reason}")]
    InvalidBounds { id: usize, reason: String },

    /// A1: the centralized balance problem has no feasible point.
    #[error(
        "A1 violated: market infeasible (sum p_min = {sum_p_min}, sum d_max = {sum_d_max}, \
         sum d_min = {sum_d_min}, sum p_max = {sum_p_max})"
    )]
    MarketInfeasible {
        sum_p_min: f64,
        sum_p_max: f64,
        sum_d_min: f64,
        sum_d_max: f64,
    },

    /// A2: production and demand boxes of one prosumer do not intersect.
    #[error("A2 violated: prosumer {id} has an empty self-sufficiency box [{lower}, {upper}]")]
    SelfSufficiencyInfeasible { id: usize, lower: f64, upper: f64 },

    /// A3: some prosumers do not gain from self-sufficiency.
    #[error("A3 violated: non-negative self-sufficiency net cost for prosumers {ids:?}")]
    NonNegativeSelfCost { ids: Vec<usize> },

    #[error(
        "price bracket [{lower}, {upper}] does not contain a root \
         (excess {excess_lower} .. {excess_upper})"
    )]
    Bracket {
        lower: f64,
        upper: f64,
        excess_lower: f64,
        excess_upper: f64,
    },

    #[error("inconsistent input: {0}")]
    Inconsistent(String),

    #[error("solution has no {0}")]
    MissingField(&'static str),

    #[error("price of anarchy undefined: social optimum has zero total cost")]
    UndefinedPriceOfAnarchy,

    #[error("grid too large: {points} points per axis exceeds limit {limit}")]
    GridTooLarge { points: usize, limit: usize },
}

impl SharingError {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        SharingError::InvalidParameter(msg.into())
    }
}
