//! JSON bodies of the external backend protocol.
//!
//! ```text
//! POST /v1/predict
//!   {"image":{"width":W,"height":H,"pixels_b64":"..."},
//!    "points":[{"x":..,"y":..,"label":"fg"|"bg"}],
//!    "box":{"min":[x,y],"max":[x,y]} | null}
//!   -> {"masks":[RleMask,RleMask,RleMask],"predicted_iou":[f,f,f]}
//! GET /v1/health -> {"status":"ok","model":"<id>"}
//! ```
//! Pixels travel as a single channel, row-major, one byte per pixel.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{BoxPrompt, PointPrompt, PredictionTriple, ProtocolError, SegmentationRequest};
use crate::mask::RleMask;
use crate::volume::SliceImage;

pub const PREDICT_PATH: &str = "/v1/predict";
pub const HEALTH_PATH: &str = "/v1/health";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireImage {
    pub width: usize,
    pub height: usize,
    pub pixels_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub image: WireImage,
    pub points: Vec<PointPrompt>,
    #[serde(rename = "box")]
    pub bbox: Option<BoxPrompt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub masks: Vec<RleMask>,
    pub predicted_iou: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model: String,
}

impl PredictRequest {
    pub fn from_request(req: &SegmentationRequest<'_>) -> Self {
        PredictRequest {
            image: WireImage {
                width: req.image.width(),
                height: req.image.height(),
                pixels_b64: STANDARD.encode(req.image.pixels()),
            },
            points: req.points.to_vec(),
            bbox: req.bbox,
        }
    }

    /// Decodes the image payload. Orientation and spacing are not carried on
    /// the wire; the result uses unit spacing.
    pub fn decode_image(&self) -> Result<SliceImage, ProtocolError> {
        let pixels = STANDARD
            .decode(&self.image.pixels_b64)
            .map_err(|e| ProtocolError::Image(format!("base64: {e}")))?;
        let expected = self.image.width * self.image.height;
        if pixels.len() != expected {
            return Err(ProtocolError::Image(format!(
                "{} pixel bytes for a {}x{} image",
                pixels.len(),
                self.image.width,
                self.image.height
            )));
        }
        Ok(SliceImage::from_gray(
            self.image.width,
            self.image.height,
            pixels,
        ))
    }
}

impl PredictResponse {
    pub fn from_triple(t: &PredictionTriple) -> Self {
        PredictResponse {
            masks: t.masks.iter().map(RleMask::encode).collect(),
            predicted_iou: t.predicted_iou.to_vec(),
        }
    }

    /// Decodes and validates a response against the request image size.
    pub fn into_triple(
        self,
        width: usize,
        height: usize,
    ) -> Result<PredictionTriple, ProtocolError> {
        if self.masks.len() != 3 {
            return Err(ProtocolError::MaskCount(self.masks.len()));
        }
        if self.predicted_iou.len() != 3 {
            return Err(ProtocolError::IouCount(self.predicted_iou.len()));
        }
        let mut masks = Vec::with_capacity(3);
        for (index, rle) in self.masks.iter().enumerate() {
            if (rle.width, rle.height) != (width, height) {
                return Err(ProtocolError::DimensionMismatch {
                    index,
                    expected: (width, height),
                    got: (rle.width, rle.height),
                });
            }
            masks.push(rle.decode()?);
        }
        let masks: [_; 3] = masks.try_into().expect("three masks");
        let predicted_iou = [
            self.predicted_iou[0],
            self.predicted_iou[1],
            self.predicted_iou[2],
        ];
        let triple = PredictionTriple {
            masks,
            predicted_iou,
        };
        triple.validate(width, height)?;
        Ok(triple)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{BinaryMask2D, Pixel};

    #[test]
    fn request_json_shape() {
        let img = SliceImage::from_gray(2, 1, vec![0, 255]);
        let pts = [PointPrompt::foreground(Pixel::new(1, 0))];
        let j = serde_json::to_value(PredictRequest::from_request(&SegmentationRequest::new(
            &img, &pts, None,
        )))
        .unwrap();
        assert_eq!(
            j,
            serde_json::json!({
                "image": {"width": 2, "height": 1, "pixels_b64": "AP8="},
                "points": [{"x": 1, "y": 0, "label": "fg"}],
                "box": null
            })
        );
    }

    #[test]
    fn response_validation() {
        let m = RleMask::encode(&BinaryMask2D::new(3, 3));
        let two = PredictResponse {
            masks: vec![m.clone(), m.clone()],
            predicted_iou: vec![0.1, 0.2],
        };
        assert_eq!(two.into_triple(3, 3), Err(ProtocolError::MaskCount(2)));
        let wrong_dims = PredictResponse {
            masks: vec![m.clone(), m.clone(), m.clone()],
            predicted_iou: vec![0.1, 0.2, 0.3],
        };
        assert!(matches!(
            wrong_dims.into_triple(4, 3),
            Err(ProtocolError::DimensionMismatch { .. })
        ));
        let bad_iou = PredictResponse {
            masks: vec![m.clone(), m.clone(), m.clone()],
            predicted_iou: vec![0.1, 1.2, 0.3],
        };
        assert_eq!(
            bad_iou.into_triple(3, 3),
            Err(ProtocolError::IouOutOfRange(1.2))
        );
        let bad_rle = PredictResponse {
            masks: vec![
                m.clone(),
                m.clone(),
                RleMask {
                    width: 3,
                    height: 3,
                    counts: vec![4],
                },
            ],
            predicted_iou: vec![0.1, 0.2, 0.3],
        };
        assert!(matches!(
            bad_rle.into_triple(3, 3),
            Err(ProtocolError::Rle(_))
        ));
    }

    #[test]
    fn image_payload_length_checked() {
        let req = PredictRequest {
            image: WireImage {
                width: 2,
                height: 2,
                pixels_b64: STANDARD.encode([1u8, 2, 3]),
            },
            points: vec![],
            bbox: None,
        };
        assert!(matches!(req.decode_image(), Err(ProtocolError::Image(_))));
    }
}
