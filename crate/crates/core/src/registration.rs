//! Integer-translation registration by exhaustive overlap correlation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Registration {
    pub dy: i32,
    pub dx: i32,
    /// Pearson correlation over the overlap, in `[-1, 1]`.
    pub score: f64,
}

/// Default search radius `ceil(h / 8)`.
pub fn default_radius(h: usize) -> usize {
    h.div_ceil(8)
}

/// `C×H×W` view of one image given as a tensor of rank 2, 3 or 4 (with a
/// leading batch of 1).
fn dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        [1, c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::invalid("register_translation", format!("expected a single image, got shape {s:?}"))),
    }
}

/// Correlation of `moving(p)` with `fixed(p - d)` over the pixels where both
/// are defined. Zero when either side is constant on the overlap.
fn overlap_ncc(moving: &[f64], fixed: &[f64], (c, h, w): (usize, usize, usize), dy: i32, dx: i32) -> f64 {
    let (h, w) = (h as i32, w as i32);
    let ys = dy.max(0)..(h + dy.min(0));
    let xs = dx.max(0)..(w + dx.min(0));
    let (mut n, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for ch in 0..c as i32 {
        for y in ys.clone() {
            for x in xs.clone() {
                let a = moving[((ch * h + y) * w + x) as usize];
                let b = fixed[((ch * h + y - dy) * w + x - dx) as usize];
                n += 1.0;
                sa += a;
                sb += b;
                saa += a * a;
                sbb += b * b;
                sab += a * b;
            }
        }
    }
    let va = saa - sa * sa / n;
    let vb = sbb - sb * sb / n;
    let scale = (saa.abs() + sbb.abs()).max(f64::MIN_POSITIVE);
    if va <= 1e-12 * scale || vb <= 1e-12 * scale {
        return 0.0;
    }
    ((sab - sa * sb / n) / (va * vb).sqrt()).clamp(-1.0, 1.0)
}

/// Finds the displacement `d` with `|dy|, |dx| <= radius` such that
/// `moving(p) ≈ fixed(p - d)`. Ties go to the smaller `|dy| + |dx|`, then to
/// the lexicographically smaller `(dy, dx)`.
pub fn register_translation(moving: &Tensor, fixed: &Tensor, radius: usize) -> Result<Registration> {
    let d = dims(moving)?;
    if dims(fixed)? != d {
        return Err(Error::shape("register_translation", moving.shape(), fixed.shape()));
    }
    let r = radius as i32;
    if 2 * radius >= d.1.min(d.2) {
        return Err(Error::invalid("register_translation", format!("radius {radius} too large for {}×{}", d.1, d.2)));
    }
    let mut best = Registration {
        dy: 0,
        dx: 0,
        score: overlap_ncc(moving.data(), fixed.data(), d, 0, 0),
    };
    for dy in -r..=r {
        for dx in -r..=r {
            let score = overlap_ncc(moving.data(), fixed.data(), d, dy, dx);
            let key = (dy.abs() + dx.abs(), dy, dx);
            let best_key = (best.dy.abs() + best.dx.abs(), best.dy, best.dx);
            let better = if (score - best.score).abs() <= 1e-12 {
                key < best_key
            } else {
                score > best.score
            };
            if better {
                best = Registration { dy, dx, score };
            }
        }
    }
    Ok(best)
}

/// Translates every `H×W` plane of `t` by `(dy, dx)`: `out(p) = t(p - d)`,
/// zero where `p - d` falls outside. Also returns the coverage mask.
pub fn shift(t: &Tensor, dy: i32, dx: i32) -> (Tensor, Tensor) {
    let shape = t.shape();
    let (h, w) = (shape[shape.len() - 2] as i32, shape[shape.len() - 1] as i32);
    let mut out = Tensor::zeros(shape);
    let mut mask = Tensor::zeros(shape);
    let plane = (h * w) as usize;
    for (src, (dst, m)) in t
        .data()
        .chunks(plane)
        .zip(out.data_mut().chunks_mut(plane).zip(mask.data_mut().chunks_mut(plane)))
    {
        for y in 0..h {
            let sy = y - dy;
            if sy < 0 || sy >= h {
                continue;
            }
            for x in 0..w {
                let sx = x - dx;
                if sx < 0 || sx >= w {
                    continue;
                }
                dst[(y * w + x) as usize] = src[(sy * w + sx) as usize];
                m[(y * w + x) as usize] = 1.0;
            }
        }
    }
    (out, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Tensor {
        Tensor::from_fn(&[1, 12, 12], |i| {
            let (y, x) = ((i / 12) as f64, (i % 12) as f64);
            (0.3 * y).sin() + (0.5 * x + 0.2 * y * y).cos() + if (3..6).contains(&(i % 12)) { 0.7 } else { 0.0 }
        })
    }

    #[test]
    fn self_registration() {
        let img = fixture();
        let r = register_translation(&img, &img, 2).unwrap();
        assert_eq!((r.dy, r.dx), (0, 0));
        assert!((r.score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recovers_a_known_shift() {
        let img = fixture();
        let (moved, _) = shift(&img, 2, -1);
        let r = register_translation(&moved, &img, 2).unwrap();
        assert_eq!((r.dy, r.dx), (2, -1));
    }

    #[test]
    fn constant_pair_scores_zero() {
        let c = Tensor::full(&[1, 8, 8], 0.4);
        let r = register_translation(&c, &c, 1).unwrap();
        assert_eq!((r.dy, r.dx, r.score), (0, 0, 0.0));
    }

    #[test]
    fn radius_must_leave_an_overlap() {
        let img = fixture();
        assert!(register_translation(&img, &img, 6).is_err());
        assert_eq!(default_radius(16), 2);
        assert_eq!(default_radius(17), 3);
    }

    #[test]
    fn shift_mask_marks_covered_pixels() {
        let t = Tensor::full(&[1, 1, 3, 3], 2.0);
        let (s, m) = shift(&t, 1, 0);
        assert_eq!(m.sum(), 6.0);
        assert_eq!(s.data()[..3], [0.0, 0.0, 0.0]);
        assert_eq!(s.data()[3..], [2.0; 6]);
    }
}
