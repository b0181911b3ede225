use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, channel counts or settings that cannot be combined.
    #[error("configuration error: {0}")]
    Config(String),
    /// NaN or infinity produced during a forward or backward pass.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Config(format!($($arg)*))
    };
}
pub(crate) use config_err;
