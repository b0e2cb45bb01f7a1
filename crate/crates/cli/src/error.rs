use std::path::PathBuf;

use blcast_core::{Error as CoreError, ErrorKind};
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config field `{field}`: {reason}")]
    ConfigInvalid { field: String, reason: String },
    #[error("missing {stage} artifact {}; run the `{stage}` stage first", path.display())]
    MissingArtifact { stage: &'static str, path: PathBuf },
    #[error("stage {stage} failed{}: {source}", context.as_deref().map(|c| format!(" for {c}")).unwrap_or_default())]
    StageFailed {
        stage: &'static str,
        context: Option<String>,
        #[source]
        source: CoreError,
    },
}

impl CliError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::ConfigInvalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn stage(stage: &'static str, context: impl Into<String>, source: CoreError) -> Self {
        CliError::StageFailed {
            stage,
            context: Some(context.into()),
            source,
        }
    }

    /// Process exit status: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigInvalid { .. } => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::StageFailed { source, .. } => match source.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
            },
        }
    }
}

/// Tags core results with a stage and subject.
pub(crate) trait InStage<T> {
    fn in_stage(self, stage: &'static str, context: &str) -> CliResult<T>;
}

impl<T> InStage<T> for blcast_core::Result<T> {
    fn in_stage(self, stage: &'static str, context: &str) -> CliResult<T> {
        self.map_err(|e| CliError::stage(stage, context, e))
    }
}
