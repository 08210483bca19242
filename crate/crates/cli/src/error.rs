use sensorseq::pipeline::PipelineError;
use sensorseq::rnn::RnnError;

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Data(String),
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) | CliError::Data(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }

    pub fn class(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Data(_) => "data",
            CliError::Divergence(_) => "divergence",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Data(m) | CliError::Divergence(m) => m,
        }
    }

    /// One diagnostic line.
    pub fn line(&self) -> String {
        let one_line = self.message().split_whitespace().collect::<Vec<_>>().join(" ");
        format!("sensorseq: {} error: {one_line}", self.class())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(m) => CliError::Config(m),
            PipelineError::Rnn(r @ RnnError::DivergenceDetected { .. }) => CliError::Divergence(r.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}
