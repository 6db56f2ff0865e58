use thiserror::Error;

use crate::persistence::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("adapters were already merged into this encoder")]
    AlreadyMerged,

    #[error(
        "non-finite loss at step {step}: t = {timesteps:?}, recon = {recon}, kp = {kp}"
    )]
    NonFinite {
        step: usize,
        timesteps: Vec<usize>,
        recon: f64,
        kp: f64,
    },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Self::Argument(msg.into())
    }
}
