use alloc::string::String;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("out-of-vocabulary word `{0}`")]
    OutOfVocabulary(String),
    #[error("code {code} out of range at layer {layer}, position {position} (codebook size {size})")]
    CodeRange {
        layer: usize,
        position: usize,
        code: usize,
        size: usize,
    },
    #[error("quantizer is disabled; use the pass-through path during warmup")]
    QuantizerDisabled,
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
