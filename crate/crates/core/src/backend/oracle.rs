use std::collections::HashMap;
use std::sync::RwLock;

use sha2::{Digest, Sha256};

use super::{BackendError, PredictionTriple, SegmentationRequest, Segmenter};
use crate::mask::BinaryMask2D;
use crate::volume::SliceImage;

/// Test backend that answers with the registered ground truth.
///
/// Candidate 0 is the ground truth when a foreground point hits it (or when
/// only a box is given), candidate 1 is the whole image (clipped to the box)
/// and candidate 2 is empty. The confidence scores rank candidate 1 highest so
/// that confidence-driven selection is observably worse than GT-driven selection.
#[derive(Debug, Default)]
pub struct OracleTestBackend {
    truths: RwLock<HashMap<[u8; 32], BinaryMask2D>>,
}

pub(super) const ORACLE_PREDICTED_IOU: [f64; 3] = [0.5, 0.9, 0.1];

fn image_key(image: &SliceImage) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((image.width() as u64).to_le_bytes());
    h.update((image.height() as u64).to_le_bytes());
    h.update(image.pixels());
    h.finalize().into()
}

impl OracleTestBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers the truth for `image`. Images are keyed by content, so two
    /// identical images share one truth (the latest registered).
    pub fn register(&self, image: &SliceImage, truth: &BinaryMask2D) {
        self.truths
            .write()
            .expect("truth table poisoned")
            .insert(image_key(image), truth.clone());
    }
}

impl Segmenter for OracleTestBackend {
    fn id(&self) -> String {
        "oracle-test".into()
    }

    fn predict(&self, req: &SegmentationRequest<'_>) -> Result<PredictionTriple, BackendError> {
        req.validate()?;
        let (w, h) = (req.image.width(), req.image.height());
        let gt = self
            .truths
            .read()
            .expect("truth table poisoned")
            .get(&image_key(req.image))
            .cloned()
            .ok_or_else(|| {
                BackendError::Unavailable("no ground truth registered for this image".into())
            })?;
        let mut fg = req.points.iter().filter(|p| p.is_foreground()).peekable();
        let hit = if fg.peek().is_none() {
            req.bbox.is_some()
        } else {
            fg.any(|p| gt.get(p.x, p.y))
        };
        let first = if hit { gt } else { BinaryMask2D::new(w, h) };
        let whole = BinaryMask2D::from_fn(w, h, |x, y| {
            req.bbox
                .is_none_or(|b| b.contains(crate::mask::Pixel::new(x, y)))
        });
        Ok(PredictionTriple {
            masks: [first, whole, BinaryMask2D::new(w, h)],
            predicted_iou: ORACLE_PREDICTED_IOU,
        })
    }

    fn prime(&self, image: &SliceImage, truth: &BinaryMask2D) {
        self.register(image, truth);
    }
}
