use thiserror::Error;

/// Errors raised across the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value or size bound is unsatisfiable.
    #[error("configuration error: {0}")]
    Config(String),
    /// A dataset or instance could not be built from the requested world.
    #[error("generation error: {0}")]
    Generation(String),
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A line in a JSONL input could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// An input file is well formed but semantically invalid.
    #[error("load error: {0}")]
    Load(String),
    /// Exact enumeration would exceed its size guard.
    #[error("enumeration guard exceeded: {estimate} outputs (limit {limit})")]
    Guard { estimate: u128, limit: u128 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable category, used by the CLI's one-line failure output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Generation(_) => "generation",
            Error::Contract(_) => "contract",
            Error::Parse { .. } => "parse",
            Error::Load(_) => "load",
            Error::Guard { .. } => "guard",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

fn with_path(path: &std::path::Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// `fs::read_to_string` with the path in the error message.
pub(crate) fn read_text(path: impl AsRef<std::path::Path>) -> Result<String> {
    let path = path.as_ref();
    std::fs::read_to_string(path).map_err(|e| with_path(path, e))
}

/// `File::open` with the path in the error message.
pub(crate) fn open_file(path: impl AsRef<std::path::Path>) -> Result<std::fs::File> {
    let path = path.as_ref();
    std::fs::File::open(path).map_err(|e| with_path(path, e))
}
