//! Multi-sensor UAV orthoimage pipeline.
//!
//! GPS/IMU fusion produces prior poses, radar returns become a simplified
//! terrain grid, the prior poses and terrain depth restrict feature matching
//! to small image blocks, and orthoimages are rendered by backward
//! projection with a per-cell viewpoint score.

pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod kdtree;
pub mod matching;
pub mod ortho;
pub mod raster;
pub mod synth;
pub mod terrain;

pub use geometry::{CameraIntrinsics, Frame, RigidTransform};
pub use matching::{FeatureSet, MatchPair, Metric};
pub use terrain::{PointCloud, TerrainGrid};

use thiserror::Error;

/// Any failure from the pipeline stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Fusion(#[from] fusion::FusionError),
    #[error(transparent)]
    Terrain(#[from] terrain::TerrainError),
    #[error(transparent)]
    Match(#[from] matching::MatchError),
    #[error(transparent)]
    Ortho(#[from] ortho::OrthoError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error(transparent)]
    Io(#[from] io::IoError),
}

/// Coarse failure class, used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    /// Invalid parameters or specification.
    Config,
    /// Missing, malformed or insufficient input data.
    Data,
    /// A numerical procedure failed.
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use ErrorKind::*;
        match self {
            Error::Geometry(e) => geometry_kind(e),
            Error::Fusion(e) => match e {
                fusion::FusionError::SingularInnovation(_) => Numerical,
                fusion::FusionError::NonPositiveDt(_) | fusion::FusionError::OutOfOrder { .. } | fusion::FusionError::EmptyImu => Data,
                fusion::FusionError::Geometry(g) => geometry_kind(g),
            },
            Error::Terrain(e) => terrain_kind(e),
            Error::Match(e) => match_kind(e),
            Error::Ortho(e) => match e {
                ortho::OrthoError::NonPositiveGsd(_) => Config,
                ortho::OrthoError::Coincident => Numerical,
                ortho::OrthoError::Terrain(t) => terrain_kind(t),
                ortho::OrthoError::Geometry(g) => geometry_kind(g),
                _ => Data,
            },
            Error::Eval(e) => match e {
                eval::EvalError::NonPositiveDt => Config,
                eval::EvalError::Degenerate => Numerical,
                eval::EvalError::Match(m) => match_kind(m),
                _ => Data,
            },
            Error::Synth(e) => match e {
                synth::SynthError::BelowTerrain { .. } => Data,
                _ => Config,
            },
            Error::Io(_) => Data,
        }
    }
}

fn geometry_kind(e: &geometry::GeometryError) -> ErrorKind {
    match e {
        geometry::GeometryError::InvalidIntrinsics(_) => ErrorKind::Config,
        _ => ErrorKind::Numerical,
    }
}

fn terrain_kind(e: &terrain::TerrainError) -> ErrorKind {
    match e {
        terrain::TerrainError::NonPositiveVoxel(_) | terrain::TerrainError::InvalidParameter(_) => ErrorKind::Config,
        terrain::TerrainError::Geometry(g) => geometry_kind(g),
        _ => ErrorKind::Data,
    }
}

fn match_kind(e: &matching::MatchError) -> ErrorKind {
    use matching::MatchError as M;
    match e {
        M::InvalidParameter(_) | M::MetricMismatch(_) => ErrorKind::Config,
        M::Divergence(_) | M::Singular => ErrorKind::Numerical,
        M::Geometry(g) => geometry_kind(g),
        M::Terrain(t) => terrain_kind(t),
        _ => ErrorKind::Data,
    }
}
