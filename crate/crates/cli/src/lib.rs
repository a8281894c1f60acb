//! Batch driver for the orthofuse pipeline: configuration, scene
//! directories and the stage commands behind the `orthofuse` binary.

pub mod config;
pub mod layout;
pub mod stages;

use std::path::Path;

use orthofuse::ErrorKind;
use thiserror::Error;

pub use config::PipelineConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Core(#[from] orthofuse::Error),
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        source: Box<CliError>,
    },
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }

    /// 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
            },
            CliError::Stage { source, .. } => source.exit_code(),
        }
    }
}

macro_rules! via_core {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Core(e.into())
            }
        }
    )*};
}

via_core!(
    orthofuse::geometry::GeometryError,
    orthofuse::fusion::FusionError,
    orthofuse::terrain::TerrainError,
    orthofuse::matching::MatchError,
    orthofuse::ortho::OrthoError,
    orthofuse::eval::EvalError,
    orthofuse::synth::SynthError,
    orthofuse::io::IoError
);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Data("x".into()).exit_code(), 3);
        assert_eq!(CliError::from(orthofuse::matching::MatchError::Singular).exit_code(), 4);
        assert_eq!(CliError::from(orthofuse::terrain::TerrainError::EmptyCloud).exit_code(), 3);
        let nested = CliError::Stage {
            stage: "fuse",
            source: Box::new(CliError::Config("x".into())),
        };
        assert_eq!(nested.exit_code(), 2);
        assert!(nested.to_string().contains("stage 'fuse'"));
    }
}
