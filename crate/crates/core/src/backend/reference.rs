//! Classical seeded region-growing backend. Offline stand-in for a learned
//! promptable model; deterministic and bitwise reproducible.

use std::collections::VecDeque;

use super::{BackendError, BoxPrompt, PredictionTriple, SegmentationRequest, Segmenter};
use crate::mask::{connected_components, iou, BinaryMask2D, Connectivity, Pixel};
use crate::volume::SliceImage;

pub(super) const DEFAULT_TOLERANCES: [f64; 3] = [8.0, 16.0, 32.0];

const NEIGHBORS: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

/// Region growing at three gray-level tolerances (low, mid, high).
#[derive(Debug, Clone)]
pub struct ReferenceBackend {
    tolerances: [f64; 3],
}

impl Default for ReferenceBackend {
    fn default() -> Self {
        ReferenceBackend {
            tolerances: DEFAULT_TOLERANCES,
        }
    }
}

impl ReferenceBackend {
    pub fn new(tolerances: [f64; 3]) -> Result<Self, BackendError> {
        if tolerances.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(BackendError::InvalidRequest(format!(
                "tolerances must be finite and non-negative: {tolerances:?}"
            )));
        }
        Ok(ReferenceBackend { tolerances })
    }

    pub fn tolerances(&self) -> [f64; 3] {
        self.tolerances
    }

    fn mask_at(&self, req: &SegmentationRequest<'_>, tol: f64, tol_mid: f64) -> BinaryMask2D {
        let img = req.image;
        let (w, h) = (img.width(), img.height());
        let in_box = |i: usize| {
            req.bbox
                .is_none_or(|b| b.contains(Pixel::new(i % w, i / w)))
        };
        let fg: Vec<Pixel> = req
            .points
            .iter()
            .filter(|p| p.is_foreground())
            .map(|p| p.pixel())
            .collect();
        let bg: Vec<Pixel> = req
            .points
            .iter()
            .filter(|p| !p.is_foreground())
            .map(|p| p.pixel())
            .collect();

        if fg.is_empty() {
            // Box only: threshold the box interior around its mean intensity.
            let Some(b) = req.bbox else {
                return BinaryMask2D::new(w, h);
            };
            let mask = box_threshold(img, &b, tol_mid - tol);
            return remove_bg_components(mask, &bg);
        }

        let grown = grow_each(img, &fg, tol, &in_box);
        let bg_inside: Vec<Pixel> = bg.iter().copied().filter(|p| grown[idx(w, *p)]).collect();
        if bg_inside.is_empty() {
            return to_mask(w, h, grown);
        }
        let excluded = claim_background(img, &grown, &fg, &bg_inside, tol);
        let regrown = grow_each(img, &fg, tol, &|i| in_box(i) && !excluded[i]);
        to_mask(w, h, regrown)
    }
}

impl Segmenter for ReferenceBackend {
    fn id(&self) -> String {
        let [a, b, c] = self.tolerances;
        format!("reference-region-growing/{a}-{b}-{c}")
    }

    fn predict(&self, req: &SegmentationRequest<'_>) -> Result<PredictionTriple, BackendError> {
        req.validate()?;
        let mid = self.tolerances[1];
        let masks = self.tolerances.map(|t| self.mask_at(req, t, mid));
        let predicted_iou = [0, 1, 2].map(|i| iou(&masks[i], &masks[1]).expect("same dims"));
        Ok(PredictionTriple {
            masks,
            predicted_iou,
        })
    }
}

#[inline]
fn idx(w: usize, p: Pixel) -> usize {
    p.y * w + p.x
}

fn to_mask(w: usize, h: usize, bits: Vec<bool>) -> BinaryMask2D {
    BinaryMask2D::from_bits(w, h, bits).expect("region grid matches image")
}

fn neighbors(w: usize, h: usize, i: usize) -> impl Iterator<Item = usize> {
    let (x, y) = ((i % w) as isize, (i / w) as isize);
    NEIGHBORS.iter().filter_map(move |&(dx, dy)| {
        let (nx, ny) = (x + dx, y + dy);
        (nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h)
            .then(|| ny as usize * w + nx as usize)
    })
}

/// Union of the regions grown from each seed separately, so seeds placed on
/// different tissues keep their own running means.
fn grow_each(
    img: &SliceImage,
    seeds: &[Pixel],
    tol: f64,
    allowed: &dyn Fn(usize) -> bool,
) -> Vec<bool> {
    let mut union = vec![false; img.width() * img.height()];
    for &s in seeds {
        for (u, g) in union.iter_mut().zip(grow(img, s, tol, allowed)) {
            *u |= g;
        }
    }
    union
}

/// Breadth-first growth from one seed; a pixel joins when its intensity is
/// within `tol` of the current region mean.
fn grow(img: &SliceImage, seed: Pixel, tol: f64, allowed: &dyn Fn(usize) -> bool) -> Vec<bool> {
    let (w, h) = (img.width(), img.height());
    let px = img.pixels();
    let mut region = vec![false; w * h];
    let mut queue = VecDeque::new();
    let mut sum = 0.0f64;
    let mut count = 0.0f64;
    let i = idx(w, seed);
    if allowed(i) {
        region[i] = true;
        sum += f64::from(px[i]);
        count += 1.0;
        queue.push_back(i);
    }
    while let Some(i) = queue.pop_front() {
        for n in neighbors(w, h, i) {
            if region[n] || !allowed(n) {
                continue;
            }
            let v = f64::from(px[n]);
            if (v - sum / count).abs() <= tol {
                region[n] = true;
                sum += v;
                count += 1.0;
                queue.push_back(n);
            }
        }
    }
    region
}

/// Splits `region` between foreground and background seeds by simultaneous
/// breadth-first growth; background fronts only advance over pixels within
/// `tol` of their own running mean. Returns the background-claimed pixels.
fn claim_background(
    img: &SliceImage,
    region: &[bool],
    fg: &[Pixel],
    bg: &[Pixel],
    tol: f64,
) -> Vec<bool> {
    const FREE: usize = usize::MAX;
    const FG: usize = usize::MAX - 1;
    let (w, h) = (img.width(), img.height());
    let px = img.pixels();
    let mut owner = vec![FREE; w * h];
    let mut stats = vec![(0.0f64, 0.0f64); bg.len()];
    let mut queue = VecDeque::new();

    for &s in fg {
        let i = idx(w, s);
        if region[i] && owner[i] == FREE {
            owner[i] = FG;
            queue.push_back(i);
        }
    }
    for (k, &s) in bg.iter().enumerate() {
        let i = idx(w, s);
        // a background click overrides a foreground seed on the same pixel
        if owner[i] == FREE || owner[i] == FG {
            owner[i] = k;
            stats[k] = (f64::from(px[i]), 1.0);
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let who = owner[i];
        for n in neighbors(w, h, i) {
            if !region[n] || owner[n] != FREE {
                continue;
            }
            if who == FG {
                owner[n] = FG;
                queue.push_back(n);
            } else {
                let (sum, count) = stats[who];
                let v = f64::from(px[n]);
                if (v - sum / count).abs() <= tol {
                    owner[n] = who;
                    stats[who] = (sum + v, count + 1.0);
                    queue.push_back(n);
                }
            }
        }
    }
    owner.into_iter().map(|o| o < FG).collect()
}

fn box_threshold(img: &SliceImage, b: &BoxPrompt, offset: f64) -> BinaryMask2D {
    let (w, h) = (img.width(), img.height());
    let mut sum = 0.0f64;
    let mut n = 0.0f64;
    for y in b.min[1]..=b.max[1] {
        for x in b.min[0]..=b.max[0] {
            sum += f64::from(img.get(x, y));
            n += 1.0;
        }
    }
    let cut = sum / n + offset;
    BinaryMask2D::from_fn(w, h, |x, y| {
        b.contains(Pixel::new(x, y)) && f64::from(img.get(x, y)) >= cut
    })
}

fn remove_bg_components(mut mask: BinaryMask2D, bg: &[Pixel]) -> BinaryMask2D {
    if bg.is_empty() {
        return mask;
    }
    let cc = connected_components(&mask, Connectivity::Eight);
    let hit: Vec<u32> = bg
        .iter()
        .map(|p| cc.label(p.x, p.y))
        .filter(|&l| l != 0)
        .collect();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if hit.contains(&cc.label(x, y)) {
                mask.set(x, y, false);
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::PointPrompt;

    fn image(w: usize, h: usize, f: impl Fn(usize, usize) -> u8) -> SliceImage {
        let mut px = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                px.push(f(x, y));
            }
        }
        SliceImage::from_gray(w, h, px)
    }

    fn disk(c: (f64, f64), r: f64) -> impl Fn(usize, usize) -> bool {
        move |x, y| {
            let (dx, dy) = (x as f64 - c.0, y as f64 - c.1);
            dx * dx + dy * dy <= r * r
        }
    }

    #[test]
    fn flat_disk_gives_three_equal_masks() {
        let inside = disk((20.0, 20.0), 9.0);
        let img = image(41, 41, |x, y| if inside(x, y) { 200 } else { 40 });
        let want = BinaryMask2D::from_fn(41, 41, &inside);
        let pts = [PointPrompt::foreground(Pixel::new(20, 20))];
        let t = ReferenceBackend::default()
            .predict(&SegmentationRequest::new(&img, &pts, None))
            .unwrap();
        for m in &t.masks {
            assert_eq!(m, &want);
        }
        assert_eq!(t.predicted_iou, [1.0; 3]);
    }

    #[test]
    fn deterministic() {
        let img = image(32, 32, |x, y| ((x * 7 + y * 13) % 50) as u8 + 100);
        let pts = [
            PointPrompt::foreground(Pixel::new(10, 10)),
            PointPrompt::background(Pixel::new(20, 12)),
        ];
        let b = ReferenceBackend::default();
        let req = SegmentationRequest::new(&img, &pts, None);
        assert_eq!(b.predict(&req).unwrap(), b.predict(&req).unwrap());
    }

    #[test]
    fn box_clips_growth() {
        let img = image(30, 30, |_, _| 100);
        let bx = BoxPrompt {
            min: [5, 5],
            max: [14, 19],
        };
        let pts = [PointPrompt::foreground(Pixel::new(10, 10))];
        let t = ReferenceBackend::default()
            .predict(&SegmentationRequest::new(&img, &pts, Some(bx)))
            .unwrap();
        for m in &t.masks {
            assert_eq!(m.count(), 10 * 15);
            assert!(m.pixels().all(|p| bx.contains(p)));
        }
    }

    #[test]
    fn fg_point_outside_box_contributes_nothing() {
        let img = image(20, 20, |_, _| 100);
        let bx = BoxPrompt {
            min: [0, 0],
            max: [4, 4],
        };
        let pts = [PointPrompt::foreground(Pixel::new(10, 10))];
        let t = ReferenceBackend::default()
            .predict(&SegmentationRequest::new(&img, &pts, Some(bx)))
            .unwrap();
        assert!(t.masks.iter().all(|m| m.is_empty()));
    }

    #[test]
    fn box_only_thresholds_box_interior() {
        let bright = disk((10.0, 10.0), 4.0);
        let img = image(21, 21, |x, y| if bright(x, y) { 220 } else { 60 });
        let bx = BoxPrompt {
            min: [3, 3],
            max: [17, 17],
        };
        let t = ReferenceBackend::default()
            .predict(&SegmentationRequest::new(&img, &[], Some(bx)))
            .unwrap();
        assert_eq!(t.masks[1], BinaryMask2D::from_fn(21, 21, &bright));
    }

    #[test]
    fn bg_point_on_excluded_pixel_yields_empty_mask() {
        let img = image(10, 10, |_, _| 100);
        let p = Pixel::new(5, 5);
        let pts = [PointPrompt::foreground(p), PointPrompt::background(p)];
        let t = ReferenceBackend::default()
            .predict(&SegmentationRequest::new(&img, &pts, None))
            .unwrap();
        assert!(t.masks.iter().all(|m| m.is_empty()));
    }

    #[test]
    fn bg_point_removes_its_lobe() {
        // two 9x9 lobes joined by a one-pixel bridge, all at the same intensity
        let lobe_a = |x: usize, y: usize| (2..11).contains(&x) && (6..15).contains(&y);
        let lobe_b = |x: usize, y: usize| (19..28).contains(&x) && (6..15).contains(&y);
        let bridge = |x: usize, y: usize| (11..19).contains(&x) && y == 10;
        let img = image(30, 21, |x, y| {
            if lobe_a(x, y) || lobe_b(x, y) || bridge(x, y) {
                180
            } else {
                30
            }
        });
        let fg_only = [PointPrompt::foreground(Pixel::new(6, 10))];
        let b = ReferenceBackend::default();
        let t = b
            .predict(&SegmentationRequest::new(&img, &fg_only, None))
            .unwrap();
        assert!(t.masks[1].get(23, 10), "without BG both lobes are grown");

        let pts = [fg_only[0], PointPrompt::background(Pixel::new(23, 10))];
        let t = b
            .predict(&SegmentationRequest::new(&img, &pts, None))
            .unwrap();
        for m in &t.masks {
            for y in 0..21 {
                for x in 0..30 {
                    if lobe_a(x, y) {
                        assert!(m.get(x, y), "lobe A pixel ({x}, {y}) lost");
                    }
                    if lobe_b(x, y) {
                        assert!(!m.get(x, y), "lobe B pixel ({x}, {y}) kept");
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_negative_tolerance() {
        assert!(ReferenceBackend::new([-1.0, 2.0, 3.0]).is_err());
    }
}
