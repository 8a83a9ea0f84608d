//! The promptable segmenter interface and its implementations.
//!
//! A backend receives one slice image plus the full list of accumulated
//! prompts and returns exactly three candidate masks with a confidence
//! (predicted IoU) for each.

mod external;
mod oracle;
mod reference;
pub mod wire;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{BinaryMask2D, MaskError, Pixel};
use crate::volume::SliceImage;

pub use external::ExternalBackend;
pub use oracle::OracleTestBackend;
pub use reference::ReferenceBackend;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("expected 3 masks, got {0}")]
    MaskCount(usize),
    #[error("expected 3 predicted IoUs, got {0}")]
    IouCount(usize),
    #[error("predicted IoU {0} is outside [0, 1]")]
    IouOutOfRange(f64),
    #[error("mask {index} is {got:?}, image is {expected:?}")]
    DimensionMismatch {
        index: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("invalid image payload: {0}")]
    Image(String),
    #[error(transparent)]
    Rle(#[from] MaskError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend timed out after {0:?}")]
    Timeout(Duration),
    #[error("backend returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed JSON from backend: {0}")]
    MalformedJson(String),
    #[error("protocol violation: {0}")]
    Protocol(#[from] ProtocolError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PointLabel {
    #[serde(rename = "fg", alias = "foreground")]
    Foreground,
    #[serde(rename = "bg", alias = "background")]
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PointPrompt {
    pub x: usize,
    pub y: usize,
    pub label: PointLabel,
}

impl PointPrompt {
    pub fn foreground(p: Pixel) -> Self {
        PointPrompt {
            x: p.x,
            y: p.y,
            label: PointLabel::Foreground,
        }
    }

    pub fn background(p: Pixel) -> Self {
        PointPrompt {
            x: p.x,
            y: p.y,
            label: PointLabel::Background,
        }
    }

    pub fn pixel(&self) -> Pixel {
        Pixel::new(self.x, self.y)
    }

    pub fn is_foreground(&self) -> bool {
        self.label == PointLabel::Foreground
    }
}

/// Inclusive pixel box, `[x, y]` corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub min: [usize; 2],
    pub max: [usize; 2],
}

impl BoxPrompt {
    pub fn contains(&self, p: Pixel) -> bool {
        self.min[0] <= p.x && p.x <= self.max[0] && self.min[1] <= p.y && p.y <= self.max[1]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SegmentationRequest<'a> {
    pub image: &'a SliceImage,
    pub points: &'a [PointPrompt],
    pub bbox: Option<BoxPrompt>,
}

impl<'a> SegmentationRequest<'a> {
    pub fn new(image: &'a SliceImage, points: &'a [PointPrompt], bbox: Option<BoxPrompt>) -> Self {
        SegmentationRequest {
            image,
            points,
            bbox,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let (w, h) = (self.image.width(), self.image.height());
        if self.points.is_empty() && self.bbox.is_none() {
            return Err(BackendError::InvalidRequest(
                "request needs at least one point or a box".into(),
            ));
        }
        if let Some(p) = self.points.iter().find(|p| p.x >= w || p.y >= h) {
            return Err(BackendError::InvalidRequest(format!(
                "point ({}, {}) outside {w}x{h} image",
                p.x, p.y
            )));
        }
        if let Some(b) = self.bbox {
            if b.min[0] > b.max[0] || b.min[1] > b.max[1] || b.max[0] >= w || b.max[1] >= h {
                return Err(BackendError::InvalidRequest(format!(
                    "box {:?}-{:?} invalid for {w}x{h} image",
                    b.min, b.max
                )));
            }
        }
        Ok(())
    }
}

/// Three candidate masks and their model-predicted IoUs.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTriple {
    pub masks: [BinaryMask2D; 3],
    pub predicted_iou: [f64; 3],
}

impl PredictionTriple {
    pub fn validate(&self, width: usize, height: usize) -> Result<(), ProtocolError> {
        for (index, m) in self.masks.iter().enumerate() {
            if m.dims() != (width, height) {
                return Err(ProtocolError::DimensionMismatch {
                    index,
                    expected: (width, height),
                    got: m.dims(),
                });
            }
        }
        if let Some(&v) = self
            .predicted_iou
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(ProtocolError::IouOutOfRange(v));
        }
        Ok(())
    }
}

pub trait Segmenter: Send + Sync {
    /// Identifier recorded in run manifests.
    fn id(&self) -> String;

    fn predict(&self, req: &SegmentationRequest<'_>) -> Result<PredictionTriple, BackendError>;

    /// Hands ground truth to backends that need it (test backends only).
    fn prime(&self, _image: &SliceImage, _truth: &BinaryMask2D) {}

    /// Startup check; returns the model identifier.
    fn health(&self) -> Result<String, BackendError> {
        Ok(self.id())
    }
}

/// Validates the request, calls the backend, and validates its answer.
pub fn predict(
    backend: &dyn Segmenter,
    req: &SegmentationRequest<'_>,
) -> Result<PredictionTriple, BackendError> {
    req.validate()?;
    let triple = backend.predict(req)?;
    triple.validate(req.image.width(), req.image.height())?;
    Ok(triple)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Reference,
    OracleTest,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub timeout_s: f64,
    pub tolerances: [f64; 3],
    pub pool_size: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Reference,
            endpoint: None,
            timeout_s: 60.0,
            tolerances: reference::DEFAULT_TOLERANCES,
            pool_size: 4,
        }
    }
}

pub fn build_backend(config: &BackendConfig) -> Result<Arc<dyn Segmenter>, BackendError> {
    Ok(match config.kind {
        BackendKind::Reference => Arc::new(ReferenceBackend::new(config.tolerances)?),
        BackendKind::OracleTest => Arc::new(OracleTestBackend::new()),
        BackendKind::External => {
            let endpoint = config.endpoint.as_deref().ok_or_else(|| {
                BackendError::InvalidRequest("external backend needs an endpoint".into())
            })?;
            if !(config.timeout_s > 0.0) || config.pool_size == 0 {
                return Err(BackendError::InvalidRequest(
                    "timeout_s and pool_size must be positive".into(),
                ));
            }
            Arc::new(ExternalBackend::new(
                endpoint,
                Duration::from_secs_f64(config.timeout_s),
                config.pool_size,
            )?)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_validation() {
        let img = SliceImage::from_gray(4, 3, vec![0; 12]);
        assert!(SegmentationRequest::new(&img, &[], None)
            .validate()
            .is_err());
        let outside = [PointPrompt::foreground(Pixel::new(4, 0))];
        assert!(SegmentationRequest::new(&img, &outside, None)
            .validate()
            .is_err());
        let bad_box = BoxPrompt {
            min: [2, 0],
            max: [1, 2],
        };
        assert!(SegmentationRequest::new(&img, &[], Some(bad_box))
            .validate()
            .is_err());
        let ok = BoxPrompt {
            min: [0, 0],
            max: [3, 2],
        };
        SegmentationRequest::new(&img, &[], Some(ok))
            .validate()
            .unwrap();
    }

    #[test]
    fn prompt_json_shape() {
        let p = PointPrompt::background(Pixel::new(3, 4));
        assert_eq!(
            serde_json::to_string(&p).unwrap(),
            r#"{"x":3,"y":4,"label":"bg"}"#
        );
        let b: BoxPrompt = serde_json::from_str(r#"{"min":[1,2],"max":[3,4]}"#).unwrap();
        assert_eq!(b.max, [3, 4]);
    }

    #[test]
    fn config_defaults() {
        let c: BackendConfig = serde_json::from_str(r#"{"kind":"oracle_test"}"#).unwrap();
        assert_eq!(c.kind, BackendKind::OracleTest);
        assert_eq!(c.timeout_s, 60.0);
        assert_eq!(c.tolerances, [8.0, 16.0, 32.0]);
        assert_eq!(c.pool_size, 4);
        assert!(build_backend(&BackendConfig {
            kind: BackendKind::External,
            ..Default::default()
        })
        .is_err());
    }
}
