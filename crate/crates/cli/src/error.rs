use std::fmt;
use std::process::ExitCode;

use sentinel_core::decision::DecisionError;
use sentinel_core::ingest::IngestError;
use sentinel_core::model::ModelError;
use sentinel_core::synthgen::SynthError;
use sentinel_core::tokenizer::TokenizerError;
use sentinel_core::trainer::TrainError;

/// Failure category; the discriminant is the process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage = 2,
    Data = 3,
    Numerical = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub source: anyhow::Error,
}

impl CliError {
    pub fn new(kind: Kind, source: impl Into<anyhow::Error>) -> Self {
        Self { kind, source: source.into() }
    }

    pub fn usage(msg: impl fmt::Display) -> Self {
        Self::new(Kind::Usage, anyhow::anyhow!("{msg}"))
    }

    pub fn data(msg: impl fmt::Display) -> Self {
        Self::new(Kind::Data, anyhow::anyhow!("{msg}"))
    }

    pub fn context(self, msg: impl fmt::Display + Send + Sync + 'static) -> Self {
        Self { kind: self.kind, source: self.source.context(msg) }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.kind as u8)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.source)
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn model_kind(e: &ModelError) -> Kind {
    match e {
        ModelError::InvalidPattern(_) | ModelError::InvalidConfig(_) => Kind::Usage,
        ModelError::NumericalFault(_) => Kind::Numerical,
        ModelError::BadWindow(_)
        | ModelError::BadCheckpoint(_)
        | ModelError::VocabMismatch
        | ModelError::ConfigMismatch
        | ModelError::Io(_) => Kind::Data,
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::new(model_kind(&e), e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let kind = match &e {
            TrainError::InvalidConfig(_) => Kind::Usage,
            TrainError::NumericalFault(_) => Kind::Numerical,
            TrainError::ClassMissing(_) | TrainError::Unlabeled(_) => Kind::Data,
            TrainError::Model(m) => model_kind(m),
        };
        Self::new(kind, e)
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        Self::new(Kind::Data, e)
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        Self::new(Kind::Data, e)
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        let kind = match e {
            SynthError::InvalidSpec(_) => Kind::Usage,
            SynthError::Io { .. } => Kind::Data,
        };
        Self::new(kind, e)
    }
}

impl From<DecisionError> for CliError {
    fn from(e: DecisionError) -> Self {
        let kind = match e {
            DecisionError::EmptyInput | DecisionError::ClassMissing(_) => Kind::Data,
            DecisionError::WeightMismatch { .. } | DecisionError::InvalidPolicy(_) => Kind::Usage,
        };
        Self::new(kind, e)
    }
}
