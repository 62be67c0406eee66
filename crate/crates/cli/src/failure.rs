//! Exit-code classification.

use interleave_eval::evaluator::EvalError;
use interleave_eval::provider::ProviderError;
use interleave_eval::reward::RewardError;

/// Bad or missing input data.
pub const EXIT_DATA: u8 = 1;
/// Provider, network or output failure.
pub const EXIT_IO: u8 = 2;

#[derive(Debug)]
pub enum Failure {
    Data(anyhow::Error),
    Io(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Data(_) => EXIT_DATA,
            Failure::Io(_) => EXIT_IO,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Data(e) | Failure::Io(e) => e,
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Scoring { .. } | EvalError::Pool(_) => Failure::Io(e.into()),
            EvalError::UnknownAnswerId(_)
            | EvalError::DuplicateAnswerId(_)
            | EvalError::EmptyCorpus => Failure::Data(e.into()),
        }
    }
}

impl From<RewardError> for Failure {
    fn from(e: RewardError) -> Self {
        match e {
            RewardError::Eval(inner) => inner.into(),
            other => Failure::Data(other.into()),
        }
    }
}

impl From<ProviderError> for Failure {
    fn from(e: ProviderError) -> Self {
        match e {
            ProviderError::Fixture(_) => Failure::Data(e.into()),
            ProviderError::Unavailable(_) | ProviderError::Contract(_) => Failure::Io(e.into()),
        }
    }
}

pub trait Classify<T> {
    fn data(self) -> Result<T, Failure>;
    fn io(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn data(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Data(e.into()))
    }

    fn io(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Io(e.into()))
    }
}
