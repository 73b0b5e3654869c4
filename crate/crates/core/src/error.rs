use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("capacity error: sequence length {len} exceeds max_seq_len {max}")]
    Capacity { len: usize, max: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("solver produced a non-finite state at step {step}")]
    SolverNaN { step: usize },
    #[error("step size underflow at t={t}: h={h:e}")]
    Stiffness { t: f64, h: f64 },
    #[error("loss diverged at step {step} (lr {lr:e})")]
    Diverged { step: usize, lr: f64 },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
}

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(alloc::format!($($arg)*))
    };
}
pub(crate) use dim_err;
