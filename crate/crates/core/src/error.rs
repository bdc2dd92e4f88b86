use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty gradient vector")]
    EmptyGradient,

    #[error(
        "residue/gradient shape mismatch: residue has {residue} elements, gradient has {gradient}"
    )]
    ShapeMismatch { residue: usize, gradient: usize },

    #[error("corrupt pack: {0}")]
    CorruptPack(String),

    #[error("bin overflow: bin {bin} holds {count} entries, at most 255 fit")]
    BinOverflow { bin: usize, count: usize },

    #[error("index width exceeded: L_T={0} is larger than 16384")]
    IndexWidthExceeded(usize),

    #[error("corrupt entry at byte {offset}: code bits {bits:#04b}")]
    CorruptEntry { offset: usize, bits: u8 },

    #[error("unexpected end of input at byte {0}")]
    UnexpectedEnd(usize),

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),

    #[error("bad magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("tensor shape mismatch: {0}")]
    TensorShape(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("weights diverged across ranks after step {step}: rank {rank} differs from rank 0 in layer {layer}")]
    RankMismatch {
        step: u64,
        rank: usize,
        layer: usize,
    },

    #[error("training diverged at step {step}: loss {loss} on rank {rank}")]
    Diverged { step: u64, rank: usize, loss: f32 },

    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, err: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            message: err.to_string(),
        }
    }
}
