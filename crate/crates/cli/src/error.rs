//! Error-to-exit-code mapping: 2 usage, 3 missing dependency (e.g. weights
//! files), 4 on-disk format problems, 5 numeric failures, 1 anything else.

use histaug_core::evalkit::EvalError;
use histaug_core::histaug::GeneratorError;
use histaug_core::io::FormatError;
use histaug_core::milbench::MilError;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Dependency(String),
    Format(FormatError),
    Numeric(String),
    Io(std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Dependency(_) => 3,
            CliError::Format(_) => 4,
            CliError::Numeric(_) => 5,
            CliError::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Dependency(m) => write!(f, "missing dependency: {m}"),
            CliError::Format(e) => write!(f, "format error: {e}"),
            CliError::Numeric(m) => write!(f, "numeric error: {m}"),
            CliError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Format(e)
    }
}

impl From<GeneratorError> for CliError {
    fn from(e: GeneratorError) -> Self {
        match e {
            GeneratorError::BadChunking { .. }
            | GeneratorError::BadHeads { .. }
            | GeneratorError::TooManySteps { .. }
            | GeneratorError::DimMismatch { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<MilError> for CliError {
    fn from(e: MilError) -> Self {
        match e {
            MilError::MissingGenerator(_) => CliError::Dependency(e.to_string()),
            MilError::UniverseTooSmall(_) | MilError::EmptyFold | MilError::EmptyBag => {
                CliError::Usage(e.to_string())
            }
            MilError::Generator(g) => g.into(),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::TooFew { .. } => CliError::Usage(e.to_string()),
            EvalError::Table(_) => CliError::Format(histaug_core::io::FormatError::Malformed {
                offset: 0,
                msg: e.to_string(),
            }),
            EvalError::Generator(g) => g.into(),
            EvalError::OverBudget { .. } => CliError::Numeric(e.to_string()),
        }
    }
}
