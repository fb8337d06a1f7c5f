use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("mesh has no triangles")]
    EmptyMesh,

    #[error("closest-point iteration did not converge (best estimate {best})")]
    NonConvergence { best: f64 },

    #[error("voxel {voxel} has no surface samples")]
    NoSurfaceInVoxel { voxel: u32 },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("loss became non-finite at iteration {iteration}")]
    NonFiniteLoss { iteration: u64 },

    #[error("normal equations are rank deficient")]
    RankDeficient,

    #[error("point set is empty")]
    EmptySet,

    #[error("cannot normalize a zero quaternion")]
    ZeroQuaternion,

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
