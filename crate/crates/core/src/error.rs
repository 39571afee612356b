use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },

    #[error("invalid depth {0}: must be positive")]
    InvalidDepth(f64),

    #[error("object ray is degenerate: center coincides with the ray origin")]
    DegenerateRay,

    #[error("lambda {lambda} is not a valid negative sample position (valid: (0, 0.8) u (1.2, {upper}))")]
    InvalidNegativeLambda { lambda: f64, upper: f64 },

    #[error("position ({x}, {y}) lies outside the BEV extent {extent}")]
    OutOfBev { x: f64, y: f64, extent: f64 },

    #[error("camera point (u={u}, v={v}, d={d}) is outside the frustum")]
    OutOfFrustum { u: f64, v: f64, d: f64 },

    #[error("bad encoding dimension {0}: must be even and at least 6")]
    BadDimension(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("loss diverged at step {step}: {value}")]
    DivergedLoss { step: usize, value: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_check(ok: bool, what: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(what()))
    }
}
