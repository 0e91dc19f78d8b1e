use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("space mismatch: {0}")]
    SpaceMismatch(String),
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("noise exceeds level: |t| = {norm} > eps = {eps}")]
    NoiseExceedsLevel { norm: f64, eps: f64 },
    #[error("degenerate noise: eps must be positive")]
    DegenerateNoise,
    #[error("invalid noise level {0}: need 0 <= eps < {max}", max = crate::noise::EPS_MAX)]
    InvalidNoiseLevel(f64),
    #[error(
        "partition too coarse for noise level: cell width {width} exceeds eps/{min_cells_per_eps} \
         (eps = {eps})"
    )]
    PartitionTooCoarse {
        width: f64,
        eps: f64,
        min_cells_per_eps: f64,
    },
    #[error("partition mismatch: {0}")]
    PartitionMismatch(String),
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),
    #[error("empty support")]
    EmptySupport,
    #[error("class is not recurrent: {0}")]
    NotRecurrent(String),
    #[error("power iteration did not converge: residual {residual:e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("singular absorption system: {0}")]
    SingularAbsorption(String),
    #[error("weight mismatch: {0}")]
    WeightMismatch(String),
    #[error("carrier split: attractor `{attractor}` meets recurrent classes {classes:?}")]
    CarrierSplit { attractor: String, classes: Vec<usize> },
    #[error("parameter out of range: {0}")]
    Parameter(String),
    #[error("unexpected phase portrait: {0}")]
    PhasePortrait(String),
    #[error("requested {requested} sinks but only {cap} are resolvable in double precision")]
    SinkCap { requested: usize, cap: usize },
    #[error("newton iteration failed: {0}")]
    Newton(String),
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
    #[error("at eps = {eps}: {source}")]
    AtEpsilon {
        eps: f64,
        #[source]
        source: Box<LabError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub(crate) fn at_eps(self, eps: f64) -> Self {
        match self {
            e @ LabError::AtEpsilon { .. } => e,
            e => LabError::AtEpsilon {
                eps,
                source: Box::new(e),
            },
        }
    }
}
