use serde::{Deserialize, Serialize};

use super::{BinaryMask2D, MaskError};

/// Run lengths of alternating values in row-major order, starting with the
/// run of false pixels (which may be zero-length).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RleMask {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<u64>,
}

impl RleMask {
    pub fn encode(mask: &BinaryMask2D) -> Self {
        rle_encode(mask)
    }

    pub fn decode(&self) -> Result<BinaryMask2D, MaskError> {
        rle_decode(self)
    }
}

pub fn rle_encode(mask: &BinaryMask2D) -> RleMask {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for &b in mask.bits() {
        if b != current {
            counts.push(run);
            current = b;
            run = 0;
        }
        run += 1;
    }
    counts.push(run);
    RleMask {
        width: mask.width(),
        height: mask.height(),
        counts,
    }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask2D, MaskError> {
    let total = rle.width as u64 * rle.height as u64;
    let sum: u64 = rle
        .counts
        .iter()
        .try_fold(0u64, |acc, &c| acc.checked_add(c))
        .ok_or_else(|| MaskError::MalformedRle("run lengths overflow".into()))?;
    if sum != total {
        return Err(MaskError::MalformedRle(format!(
            "run lengths sum to {sum}, expected {total}"
        )));
    }
    if let Some(i) = rle.counts.iter().skip(1).position(|&c| c == 0) {
        if total > 0 {
            return Err(MaskError::MalformedRle(format!(
                "zero-length run at position {}",
                i + 1
            )));
        }
    }
    let mut bits = Vec::with_capacity(total as usize);
    let mut value = false;
    for &c in &rle.counts {
        bits.extend(std::iter::repeat_n(value, c as usize));
        value = !value;
    }
    BinaryMask2D::from_bits(rle.width, rle.height, bits)
}
