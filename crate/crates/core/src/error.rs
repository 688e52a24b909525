use thiserror::Error;

use crate::slices::ServerId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid slice adjustment: {0}")]
    InvalidAdjustment(String),
    #[error("server {0} is not registered")]
    UnknownServer(ServerId),
    #[error("server {0} is already registered")]
    DuplicateServer(ServerId),
    #[error("no live servers")]
    NoLiveServers,
    #[error("unknown service {0:?}")]
    UnknownService(String),
    #[error("server {0} is unavailable")]
    Unavailable(ServerId),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn adjustment(msg: impl Into<String>) -> Self {
        Error::InvalidAdjustment(msg.into())
    }
}
