//! The group target that every seed's candidate is pulled toward.

use crate::error::{Error, Result};
use crate::registration::{register_translation, shift};
use crate::tensor::Tensor;

use super::ConsensusMode;

/// Pixel-wise mean, accumulated incrementally so that identical inputs
/// reproduce themselves exactly.
fn mean(candidates: &[Tensor]) -> Tensor {
    let mut m = candidates[0].clone();
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let n = (i + 1) as f64;
        for (a, &b) in m.data_mut().iter_mut().zip(c.data()) {
            *a += (b - *a) / n;
        }
    }
    m
}

/// Consensus of `K×C×H×W` candidates. In registered mode every batch slot
/// of every candidate is aligned by integer translation to the pixel-wise
/// mean, and the aligned copies are averaged over the pixels they cover.
/// Pixels no aligned copy covers keep the plain mean.
pub fn consensus_image(candidates: &[Tensor], mode: ConsensusMode, radius: usize) -> Result<Tensor> {
    let Some(first) = candidates.first() else {
        return Err(Error::invalid("consensus_image", "empty seed group"));
    };
    if let Some(bad) = candidates.iter().find(|c| c.shape() != first.shape()) {
        return Err(Error::shape("consensus_image", first.shape(), bad.shape()));
    }
    if first.shape().len() != 4 {
        return Err(Error::invalid("consensus_image", format!("expected K×C×H×W, got {:?}", first.shape())));
    }
    let coarse = mean(candidates);
    if mode == ConsensusMode::Lazy {
        return Ok(coarse);
    }
    let k = first.shape()[0];
    let mut slots = Vec::with_capacity(k);
    for s in 0..k {
        let target = coarse.index_outer(s);
        let mut acc = target.clone();
        let mut count = vec![0.0; acc.len()];
        for c in candidates {
            let moving = c.index_outer(s);
            let r = register_translation(&moving, &target, radius)?;
            let (aligned, mask) = shift(&moving, -r.dy, -r.dx);
            for ((a, n), (&v, &m)) in acc
                .data_mut()
                .iter_mut()
                .zip(count.iter_mut())
                .zip(aligned.data().iter().zip(mask.data()))
            {
                if m > 0.0 {
                    *n += 1.0;
                    *a = if *n == 1.0 { v } else { *a + (v - *a) / *n };
                }
            }
        }
        slots.push(acc);
    }
    Ok(Tensor::stack(&slots)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> Tensor {
        Tensor::from_fn(&[1, 1, 12, 12], |i| {
            let (y, x) = ((i / 12) as f64, (i % 12) as f64);
            (0.4 * x).sin() * (0.3 * y + 0.5).cos() + 0.1 * ((i * 7 % 5) as f64)
        })
    }

    #[test]
    fn identical_candidates_are_a_fixed_point() {
        let img = image();
        let group = vec![img.clone(), img.clone(), img.clone()];
        for mode in [ConsensusMode::Lazy, ConsensusMode::Registered] {
            let c = consensus_image(&group, mode, 2).unwrap();
            assert_eq!(c, img);
            assert_eq!(consensus_image(&[c.clone(), c.clone(), c.clone()], mode, 2).unwrap(), c);
        }
        assert_eq!(consensus_image(&[img.clone()], ConsensusMode::Registered, 2).unwrap(), img);
    }

    #[test]
    fn empty_group_is_an_error() {
        assert!(consensus_image(&[], ConsensusMode::Lazy, 1).is_err());
    }
}
