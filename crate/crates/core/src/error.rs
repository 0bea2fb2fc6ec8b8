use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{context}: expected shape {expected:?}, found {found:?}")]
    Shape { context: &'static str, expected: [usize; 2], found: [usize; 2] },

    #[error("{context}: label {label} out of range for {classes} classes")]
    LabelOutOfRange { context: &'static str, label: usize, classes: usize },

    #[error("class {class} has no samples")]
    EmptyClass { class: u32 },

    #[error("unknown class id {0}")]
    UnknownClass(u32),

    #[error("backward requires a scalar output, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("batch size {batch} is smaller than the class count {classes}")]
    BatchTooSmall { batch: usize, classes: usize },

    #[error("matrix is rank deficient (condition number {condition:e})")]
    RankDeficient { condition: f64 },

    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("missing loss component: {0}")]
    MissingComponent(&'static str),

    #[error("zero-norm prototype for class index {0}")]
    ZeroNorm(usize),
}
