//! Exact Euclidean distance transform (Meijster et al. two-pass separable
//! scheme) in integer arithmetic.
//!
//! Pixels outside the image count as background, so the image is processed
//! with a one-pixel false border.

use super::{BinaryMask2D, MaskError, Pixel};

/// Squared distance from every pixel to the nearest false pixel (0 on false pixels).
pub fn squared_distance_transform(mask: &BinaryMask2D) -> Vec<u64> {
    let (w, h) = mask.dims();
    if w == 0 || h == 0 {
        return Vec::new();
    }
    let pw = w + 2;
    let ph = h + 2;
    let fg = |px: usize, py: usize| -> bool {
        px >= 1 && px <= w && py >= 1 && py <= h && mask.get(px - 1, py - 1)
    };

    // Column pass: vertical distance to the nearest background pixel.
    // The padded border guarantees every column has one.
    let mut g = vec![0i64; pw * ph];
    for x in 0..pw {
        for y in 1..ph {
            if fg(x, y) {
                g[y * pw + x] = g[(y - 1) * pw + x] + 1;
            }
        }
        for y in (0..ph - 1).rev() {
            let below = g[(y + 1) * pw + x];
            if below < g[y * pw + x] {
                g[y * pw + x] = below + 1;
            }
        }
    }

    // Row pass: lower envelope of parabolas (x - i)^2 + g(i)^2.
    let mut out = vec![0u64; w * h];
    let mut s = vec![0i64; pw];
    let mut t = vec![0i64; pw];
    for y in 1..=h {
        let row = &g[y * pw..(y + 1) * pw];
        let f = |x: i64, i: i64| (x - i) * (x - i) + row[i as usize] * row[i as usize];
        let sep = |i: i64, u: i64| {
            let gi = row[i as usize];
            let gu = row[u as usize];
            (u * u - i * i + gu * gu - gi * gi).div_euclid(2 * (u - i))
        };
        let mut q: isize = 0;
        s[0] = 0;
        t[0] = 0;
        for u in 1..pw as i64 {
            while q >= 0 && f(t[q as usize], s[q as usize]) > f(t[q as usize], u) {
                q -= 1;
            }
            if q < 0 {
                q = 0;
                s[0] = u;
            } else {
                let wpos = 1 + sep(s[q as usize], u);
                if wpos < pw as i64 {
                    q += 1;
                    s[q as usize] = u;
                    t[q as usize] = wpos;
                }
            }
        }
        for u in (0..pw as i64).rev() {
            if u >= 1 && u <= w as i64 {
                out[(y - 1) * w + (u as usize - 1)] = f(u, s[q as usize]) as u64;
            }
            if u == t[q as usize] {
                q -= 1;
            }
        }
    }
    out
}

/// Euclidean distance to the nearest false pixel, in pixel units.
pub fn distance_transform(mask: &BinaryMask2D) -> Vec<f64> {
    squared_distance_transform(mask)
        .into_iter()
        .map(|d| (d as f64).sqrt())
        .collect()
}

/// Deepest interior pixel: argmax of the distance transform, ties broken by
/// the smallest row, then the smallest column.
pub fn interior_center(mask: &BinaryMask2D) -> Result<Pixel, MaskError> {
    let d = squared_distance_transform(mask);
    let mut best: Option<(u64, usize)> = None;
    for (i, &v) in d.iter().enumerate() {
        if v > 0 && best.is_none_or(|(b, _)| v > b) {
            best = Some((v, i));
        }
    }
    let (_, i) = best.ok_or(MaskError::EmptyMask)?;
    Ok(Pixel::new(i % mask.width(), i / mask.width()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_has_unit_distance() {
        let mut m = BinaryMask2D::new(9, 6);
        m.set(7, 3, true);
        let d = distance_transform(&m);
        assert_eq!(d[3 * 9 + 7], 1.0);
        assert_eq!(d.iter().filter(|&&v| v > 0.0).count(), 1);
        assert_eq!(interior_center(&m).unwrap(), Pixel::new(7, 3));
    }

    #[test]
    fn full_square_peaks_at_center() {
        let m = BinaryMask2D::full(5, 5);
        let d = squared_distance_transform(&m);
        assert_eq!(d[2 * 5 + 2], 9);
        assert_eq!(*d.iter().max().unwrap(), 9);
        assert_eq!(interior_center(&m).unwrap(), Pixel::new(2, 2));
    }

    #[test]
    fn rectangle_tie_break() {
        let m = BinaryMask2D::full(7, 3);
        assert_eq!(interior_center(&m).unwrap(), Pixel::new(1, 1));
        let m = BinaryMask2D::full(3, 7);
        assert_eq!(interior_center(&m).unwrap(), Pixel::new(1, 1));
    }

    #[test]
    fn checkerboard_is_all_ones() {
        let m = BinaryMask2D::from_fn(8, 8, |c, r| (c + r) % 2 == 0);
        let d = squared_distance_transform(&m);
        for (i, &b) in m.bits().iter().enumerate() {
            assert_eq!(d[i], u64::from(b));
        }
    }

    #[test]
    fn empty_mask_has_no_center() {
        assert_eq!(
            interior_center(&BinaryMask2D::new(4, 4)),
            Err(MaskError::EmptyMask)
        );
    }
}
