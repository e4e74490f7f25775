use thiserror::Error;

/// Errors produced by the volume, I/O, generation and evaluation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("volume has fewer than 2 voxels along axis {axis} (dims {dims:?})")]
    DegenerateGrid { axis: usize, dims: [usize; 3] },

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("bad NIfTI magic {found:?} in field `magic` (expected \"n+1\\0\")")]
    BadMagic { found: [u8; 4] },

    #[error("bad NIfTI field `sizeof_hdr`: {0} (expected 348)")]
    BadHeaderSize(i32),

    #[error("unsupported NIfTI `datatype` code {0}")]
    UnsupportedDatatype(i16),

    #[error("NIfTI field `{field}` has unsupported value {value}")]
    UnsupportedLayout { field: &'static str, value: i64 },

    #[error("truncated NIfTI data: `{field}` needs {needed} bytes, stream has {available}")]
    TruncatedData {
        field: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("NIfTI field `pixdim[{index}]` is not positive: {value}")]
    NonPositivePixdim { index: usize, value: f32 },

    #[error("deformation field contains non-finite values")]
    NonFiniteField,

    #[error("fixed-point inversion did not converge (residual {residual:.3} voxel)")]
    NotInvertible { residual: f64 },

    #[error("no contrast parameters for label {0}")]
    MissingLabelParams(u32),

    #[error("label map has no foreground labels")]
    EmptyLabelSet,

    #[error("lambda must be positive, got {0}")]
    NonPositiveLambda(f64),

    #[error("mask selects no voxels")]
    EmptyMask,

    #[error("dims {dims:?} too small for window {window} at {scales} scale(s)")]
    TooSmallForScales {
        dims: [usize; 3],
        window: usize,
        scales: usize,
    },

    #[error("bias estimate is zero over the mask")]
    ZeroEstimate,

    #[error("reference bias field is zero over the mask")]
    ZeroReference,

    #[error("channel mismatch: expected {expected}, got {found}")]
    ChannelMismatch { expected: usize, found: usize },

    #[error("normal equations are singular (rank-deficient features with zero ridge)")]
    SingularSystem,

    #[error("probabilities are not a simplex at voxel {voxel} (sum {sum})")]
    NotASimplex { voxel: usize, sum: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
