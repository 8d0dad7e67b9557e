use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing measurement `{field}` for area {area_id}")]
    MissingMeasurement { area_id: String, field: &'static str },

    #[error("no survey rows for area")]
    EmptyArea,

    #[error("area {0} has a single cluster; design variance undefined")]
    SingleCluster(String),

    #[error("rows from several areas passed to a per-area estimator ({0} and {1})")]
    MixedAreas(String, String),

    #[error("invalid sampling weight {weight} in area {area_id}")]
    InvalidWeight { area_id: String, weight: f64 },

    #[error("k = {k} is out of range for {areas} areas")]
    KTooLarge { k: usize, areas: usize },

    #[error("area {0} has no boundary polygon")]
    MissingBoundary(String),

    #[error("values have zero variance")]
    ZeroVariance,

    #[error("design matrix is singular or rank deficient")]
    SingularDesign,

    #[error("total variance sigma_u^2 + sigma_i^2 is zero for area index {0}")]
    ZeroTotalVariance(usize),

    #[error("{0} zero sampling variances exceed the allowed count {1}")]
    ZeroSamplingVariance(usize, usize),

    #[error("optimizer did not converge after {0} iterations")]
    NoConvergence(usize),

    #[error("I - rho W is singular at rho = {0}")]
    SingularAtRho(f64),

    #[error("covariate columns do not match: expected {expected}, found {found}")]
    ColumnMismatch { expected: usize, found: usize },

    #[error("only {ok} of {requested} bootstrap replicates converged")]
    TooFewSuccessfulReplicates { ok: usize, requested: usize },

    #[error("poverty percentage missing for area {0}")]
    MissingPoverty(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("unknown area id {0}")]
    UnknownArea(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    GeoJson(#[from] Box<geojson::Error>),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

impl From<geojson::Error> for Error {
    fn from(e: geojson::Error) -> Self {
        Error::GeoJson(Box::new(e))
    }
}
