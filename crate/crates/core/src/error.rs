use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("design/observed mismatch: {0}")]
    DesignMismatch(String),
    #[error("plan incompatible with design: {0}")]
    PlanIncompatible(String),
    #[error("stratum {stratum} has fewer than 2 units in arm {arm}")]
    DegenerateStratum { stratum: usize, arm: u8 },
    #[error("support too large: {count} elements exceeds cap {cap}")]
    SupportTooLarge { count: f64, cap: u64 },
    #[error("arm {arm} has no training units")]
    EmptyArm { arm: u8 },
    #[error("singular design (condition estimate {condition:e})")]
    SingularDesign { condition: f64 },
    #[error("stratum {stratum} was not seen during fitting")]
    MissingStratum { stratum: usize },
    #[error("no convergence after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("separation detected: {0}")]
    Separation(String),
    #[error("insufficient replication: {0}")]
    InsufficientReplication(String),
    #[error("fold {fold} has no units in arm {arm}")]
    DegenerateFold { fold: u8, arm: u8 },
}
