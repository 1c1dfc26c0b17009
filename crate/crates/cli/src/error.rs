use thiserror::Error;

/// Exit status 1: the invocation itself is wrong. Exit status 2: the inputs are.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),* $(,)?) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        })*
    };
}

data_errors!(
    std::io::Error,
    serde_json::Error,
    csv::Error,
    pht::events::EventError,
    pht::tokenizer::TokenizeError,
    pht::model::ModelError,
    pht::simulator::SimError,
    pht::risk::RiskError,
    pht::eval::EvalError,
    pht::synth::SynthError,
);

pub type Result<T> = std::result::Result<T, CliError>;
