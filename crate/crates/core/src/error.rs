use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KinematicsError {
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("invalid gait program: {0}")]
    InvalidGait(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PhysicsError {
    #[error("unstable configuration at t={time:.6} s: penetration {penetration:.6} m exceeds {limit:.6} m")]
    Unstable {
        time: f64,
        penetration: f64,
        limit: f64,
    },
    #[error("step {index} failed: {source}")]
    AtStep {
        index: u64,
        #[source]
        source: Box<PhysicsError>,
    },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("invalid physics parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("trajectory sampling is not uniform near t={0} s")]
    NonUniformSampling(f64),
    #[error("MSD curve has a negative value at lag {0} s")]
    NegativeMsd(f64),
    #[error("net displacement {0:.3e} m is too small to define a direction")]
    UndefinedAngle(f64),
    #[error("no summaries to aggregate")]
    Empty,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("placement failed: {0}")]
    PlacementFailure(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid script: {0}")]
    Script(String),
    #[error("at t={time:.3} s: {source}")]
    Trial {
        time: f64,
        #[source]
        source: PhysicsError,
    },
    #[error("malformed input: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
