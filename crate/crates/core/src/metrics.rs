//! Reconstruction quality scores.

use std::fmt::Write as _;

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::fft::fft2d;
use crate::graph::Graph;
use crate::nn::{cross_entropy, BnMode, Model};
use crate::registration::{register_translation, shift};
use crate::tensor::Tensor;
use crate::victim::{compute_bundle, GradientBundle};

/// Reported PSNR for a perfect match.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Clamps pixels into `[0, 1]`, the range all image metrics assume.
pub fn to_unit_range(x: &Tensor) -> Tensor {
    x.map(|v| v.clamp(0.0, 1.0))
}

/// Registers `reconstruction` onto `original` (single images) and returns
/// `10 log10(1 / MSE)` over the overlap, capped at [`PSNR_CAP_DB`].
pub fn psnr_post_registration(reconstruction: &Tensor, original: &Tensor, radius: usize) -> Result<f64> {
    let r = register_translation(reconstruction, original, radius)?;
    let (aligned, mask) = shift(reconstruction, -r.dy, -r.dx);
    let (mut se, mut n) = (0.0, 0.0);
    for ((a, b), m) in aligned.data().iter().zip(original.data()).zip(mask.data()) {
        if *m > 0.0 {
            se += (a - b) * (a - b);
            n += 1.0;
        }
    }
    Ok(psnr_from_mse(se / n))
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

/// For each ground-truth slot, the reconstruction slot carrying the same
/// label. Reconstructions whose label is not in the truth fill the remaining
/// slots in order.
pub fn pair_by_label(reconstructed: &[usize], truth: &[usize]) -> Result<Vec<usize>> {
    if reconstructed.len() != truth.len() {
        return Err(Error::invalid(
            "pair_by_label",
            format!("{} reconstructed labels for {} originals", reconstructed.len(), truth.len()),
        ));
    }
    let mut used = vec![false; reconstructed.len()];
    let mut pairing: Vec<Option<usize>> = truth
        .iter()
        .map(|t| {
            let j = (0..reconstructed.len()).find(|&j| !used[j] && reconstructed[j] == *t)?;
            used[j] = true;
            Some(j)
        })
        .collect();
    let mut spare = (0..reconstructed.len()).filter(|&j| !used[j]);
    for p in pairing.iter_mut().filter(|p| p.is_none()) {
        *p = spare.next();
    }
    Ok(pairing.into_iter().map(|p| p.expect("as many spares as holes")).collect())
}

/// Reorders the slots of a `K×…` reconstruction to line up with the truth.
pub fn align_to_truth(reconstruction: &Tensor, reconstructed: &[usize], truth: &[usize]) -> Result<Tensor> {
    let order = pair_by_label(reconstructed, truth)?;
    Tensor::stack(&order.iter().map(|&j| reconstruction.index_outer(j)).collect::<Vec<_>>())
}

/// Per-image post-registration PSNR of two `K×C×H×W` batches.
pub fn batch_psnr(reconstruction: &Tensor, original: &Tensor, radius: usize) -> Result<Vec<f64>> {
    if reconstruction.shape() != original.shape() || reconstruction.shape().len() != 4 {
        return Err(Error::shape("psnr", reconstruction.shape(), original.shape()));
    }
    (0..original.shape()[0])
        .map(|k| psnr_post_registration(&reconstruction.index_outer(k), &original.index_outer(k), radius))
        .collect()
}

/// One minus the cosine similarity of the 2-D magnitude spectra, averaged
/// over images and channels. Zero for identical spectra, at most 2.
pub fn fft2d_distance(reconstruction: &Tensor, original: &Tensor) -> Result<f64> {
    let shape = original.shape();
    if reconstruction.shape() != shape || shape.len() < 2 {
        return Err(Error::shape("fft2d_distance", reconstruction.shape(), shape));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0;
    for (a, b) in reconstruction.data().chunks(plane).zip(original.data().chunks(plane)) {
        let fa = fft2d(a, h, w);
        let fb = fft2d(b, h, w);
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for (u, v) in fa.iter().zip(&fb) {
            let (ma, mb) = (u.norm(), v.norm());
            dot += ma * mb;
            na += ma * ma;
            nb += mb * mb;
        }
        let cos = if na == 0.0 && nb == 0.0 {
            1.0
        } else if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
        };
        total += 1.0 - cos;
        count += 1;
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradDiagnostics {
    pub l2: f64,
    /// Percentage of coordinates whose signs agree; zero matches only zero.
    pub sign_match_pct: f64,
    pub cos_dist: f64,
}

/// Compares two flattened gradient lists.
pub fn compare_gradients(a: &[Tensor], b: &[Tensor]) -> GradDiagnostics {
    let (mut sq, mut dot, mut na, mut nb, mut same, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize, 0usize);
    for (ta, tb) in a.iter().zip(b) {
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            sq += (x - y) * (x - y);
            dot += x * y;
            na += x * x;
            nb += y * y;
            if x.signum() == y.signum() && (x == 0.0) == (y == 0.0) {
                same += 1;
            }
            n += 1;
        }
    }
    let denom = na.sqrt() * nb.sqrt();
    GradDiagnostics {
        l2: sq.sqrt(),
        sign_match_pct: 100.0 * same as f64 / n.max(1) as f64,
        cos_dist: if denom > 0.0 { 1.0 - dot / denom } else { 1.0 },
    }
}

/// Gradient of the task loss at `(x, labels)` compared with the bundle.
pub fn gradient_diagnostics(x: &Tensor, labels: &[usize], model: &Model, bundle: &GradientBundle) -> Result<GradDiagnostics> {
    let graph = Graph::new();
    let params = model.bind(&graph);
    let trace = model.forward_graph(graph.constant(x.clone()), &params, BnMode::Batch)?;
    let loss = cross_entropy(trace.logits, labels)?;
    let grads = graph.grad(loss, &params)?;
    Ok(compare_gradients(&grads, &bundle.grads))
}

/// Penultimate features of each image. Batch norm uses running statistics,
/// so an embedding depends only on its own image.
pub fn embed(model: &Model, images: &Tensor) -> Result<Vec<Vec<f64>>> {
    let f = model.forward(images, BnMode::Running)?.features;
    let m = f.shape()[1];
    Ok(f.data().chunks(m).map(<[f64]>::to_vec).collect())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Fraction of reconstructions whose nearest gallery image (cosine
/// similarity of penultimate features) is their own original. A retrieved
/// gallery entry counts as a match when it is pixel-identical to the
/// original, so duplicated originals match through either copy.
pub fn iip_score(reconstructions: &Tensor, originals: &Tensor, gallery: &Tensor, model: &Model) -> Result<f64> {
    let k = originals.shape()[0];
    if reconstructions.shape() != originals.shape() {
        return Err(Error::shape("iip_score", reconstructions.shape(), originals.shape()));
    }
    if gallery.shape()[0] < k {
        return Err(Error::invalid("iip_score", format!("gallery of {} is smaller than the batch of {k}", gallery.shape()[0])));
    }
    let queries = embed(model, reconstructions)?;
    let keys = embed(model, gallery)?;
    let mut hits = 0;
    for (i, q) in queries.iter().enumerate() {
        let best = keys
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (j, key)| {
                let s = cosine(q, key);
                if s > best.1 {
                    (j, s)
                } else {
                    best
                }
            })
            .0;
        if gallery.index_outer(best) == originals.index_outer(i) {
            hits += 1;
        }
    }
    Ok(hits as f64 / k as f64)
}

/// Euclidean norm of the flattened single-sample gradient of every dataset
/// image.
pub fn gradient_norms(model: &Model, dataset: &Dataset) -> Result<Vec<f64>> {
    (0..dataset.len())
        .map(|i| {
            let image = dataset.image(i);
            let shape = image.shape().to_vec();
            let batch = Batch::new(image.reshape(&[1, shape[0], shape[1], shape[2]])?, vec![dataset.labels[i]])?;
            let b = compute_bundle(model, &batch, false)?;
            Ok(b.grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt())
        })
        .collect()
}

/// Dataset indices sorted by descending gradient norm, ties by index. With
/// `per_class`, only the top sample of each class, ordered by class.
pub fn rank_by_norm(norms: &[f64], labels: &[usize], per_class: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    if !per_class {
        return order;
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut best: Vec<Option<usize>> = vec![None; classes];
    for i in order {
        best[labels[i]].get_or_insert(i);
    }
    best.into_iter().flatten().collect()
}

pub fn vulnerability_rank(model: &Model, dataset: &Dataset, per_class: bool) -> Result<Vec<usize>> {
    Ok(rank_by_norm(&gradient_norms(model, dataset)?, &dataset.labels, per_class))
}

/// Scores written to a report directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub psnr_db: Vec<f64>,
    pub fft2d: Vec<f64>,
    pub iip: Option<f64>,
    pub diagnostics: Option<GradDiagnostics>,
    /// Reserved; no perceptual metric is computed.
    pub lpips: Option<f64>,
}

impl MetricsReport {
    /// PSNR and FFT distance of `reconstruction` against `original`, after
    /// clamping the reconstruction to `[0, 1]`.
    pub fn compare(reconstruction: &Tensor, original: &Tensor, radius: usize) -> Result<Self> {
        let rec = to_unit_range(reconstruction);
        let k = original.shape()[0];
        let fft2d = (0..k)
            .map(|i| fft2d_distance(&rec.index_outer(i), &original.index_outer(i)))
            .collect::<Result<_>>()?;
        Ok(MetricsReport {
            psnr_db: batch_psnr(&rec, original, radius)?,
            fft2d,
            ..Default::default()
        })
    }

    pub fn psnr_mean_db(&self) -> f64 {
        mean(&self.psnr_db)
    }

    pub fn fft2d_mean(&self) -> f64 {
        mean(&self.fft2d)
    }

    /// `key = value` lines; absent optional values are written as `nan`.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v}"));
        let mut s = String::new();
        let _ = writeln!(s, "psnr_mean_db = {}", self.psnr_mean_db());
        let _ = writeln!(s, "fft2d_mean = {}", self.fft2d_mean());
        let _ = writeln!(s, "iip = {}", opt(self.iip));
        let _ = writeln!(s, "sign_match_pct = {}", opt(self.diagnostics.map(|d| d.sign_match_pct)));
        let _ = writeln!(s, "grad_l2 = {}", opt(self.diagnostics.map(|d| d.l2)));
        let _ = writeln!(s, "grad_cos = {}", opt(self.diagnostics.map(|d| d.cos_dist)));
        let _ = writeln!(s, "lpips = {}", opt(self.lpips));
        for (i, (p, f)) in self.psnr_db.iter().zip(&self.fft2d).enumerate() {
            let _ = writeln!(s, "psnr_db.{i} = {p}");
            let _ = writeln!(s, "fft2d.{i} = {f}");
        }
        s
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> Tensor {
        Tensor::from_fn(&[1, 16, 16], |i| 0.5 + 0.4 * ((i % 16) as f64 * 0.7).sin() * ((i / 16) as f64 * 0.4).cos())
    }

    #[test]
    fn psnr_cap_and_shift() {
        let img = image();
        assert_eq!(psnr_post_registration(&img, &img, 2).unwrap(), PSNR_CAP_DB);
        let (moved, _) = shift(&img, 1, 0);
        assert_eq!(psnr_post_registration(&moved, &img, 2).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn fft_distance_identities() {
        let img = image();
        assert!(fft2d_distance(&img, &img).unwrap().abs() < 1e-9);
        // circular translation keeps the magnitude spectrum
        let rolled = Tensor::from_fn(&[1, 16, 16], |i| img.data()[(i / 16) * 16 + (i % 16 + 3) % 16]);
        assert!(fft2d_distance(&rolled, &img).unwrap().abs() < 1e-6);
        let other = Tensor::from_fn(&[1, 16, 16], |i| ((i * 13 % 7) as f64) / 7.0);
        let d1 = fft2d_distance(&other, &img).unwrap();
        let d2 = fft2d_distance(&img, &other).unwrap();
        assert!((d1 - d2).abs() < 1e-12 && d1 > 0.0);
    }

    #[test]
    fn pairing_follows_labels() {
        assert_eq!(pair_by_label(&[4, 3, 8], &[8, 4, 3]).unwrap(), vec![2, 0, 1]);
        // label 5 was not restored; its original gets the leftover slot
        assert_eq!(pair_by_label(&[4, 9, 8], &[8, 5, 4]).unwrap(), vec![2, 1, 0]);
    }

    #[test]
    fn opposite_gradients() {
        let g = vec![Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
        let neg = vec![g[0].map(|v| -v)];
        let d = compare_gradients(&g, &neg);
        assert_eq!(d.sign_match_pct, 0.0);
        assert!((d.cos_dist - 2.0).abs() < 1e-12);
        let same = compare_gradients(&g, &g);
        assert_eq!((same.l2, same.sign_match_pct), (0.0, 100.0));
        assert!(same.cos_dist.abs() < 1e-12);
    }

    #[test]
    fn rank_is_stable_and_scale_invariant() {
        let norms = [1.0, 3.0, 3.0, 0.5];
        let labels = [0, 1, 0, 1];
        assert_eq!(rank_by_norm(&norms, &labels, false), vec![1, 2, 0, 3]);
        let scaled: Vec<f64> = norms.iter().map(|n| n * 7.5).collect();
        assert_eq!(rank_by_norm(&scaled, &labels, false), vec![1, 2, 0, 3]);
        assert_eq!(rank_by_norm(&norms, &labels, true), vec![2, 1]);
    }

    #[test]
    fn report_has_fixed_keys() {
        let img = Tensor::stack(&[image()]).unwrap();
        let text = MetricsReport::compare(&img, &img, 2).unwrap().to_text();
        for key in ["psnr_mean_db = 99", "fft2d_mean = ", "iip = nan", "sign_match_pct", "grad_l2", "grad_cos"] {
            assert!(text.contains(key), "{text}");
        }
    }
}
