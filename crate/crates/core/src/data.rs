//! Ground-truth batches: a procedural shape dataset and IDX ingestion.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

/// Images `K×C×H×W` with pixels in `[0, 1]` and their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[0] != labels.len() || labels.is_empty() {
            return Err(Error::shape("batch", shape, &[labels.len()]));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("batch", "pixels must lie in [0, 1]"));
        }
        Ok(Batch { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A labelled image collection, `N×C×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> Tensor {
        self.images.index_outer(i)
    }
}

/// Class-conditioned procedural shapes: each class owns a template that is
/// randomly translated, scaled in intensity and perturbed with noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Synthetic {
    /// `C×H×W` of each image.
    pub input: [usize; 3],
    pub classes: usize,
    /// Largest translation in pixels along each axis.
    pub max_shift: i32,
    pub noise_std: f64,
}

impl Default for Synthetic {
    fn default() -> Self {
        Synthetic {
            input: [1, 16, 16],
            classes: 10,
            max_shift: 2,
            noise_std: 0.05,
        }
    }
}

impl Synthetic {
    /// Foreground coverage in `[0, 1]` of class `class` at template
    /// coordinates `(u, v)`, both in `[-1, 1]` around the image centre.
    fn template(class: usize, u: f64, v: f64) -> f64 {
        let r = (u * u + v * v).sqrt();
        let on = |b: bool| if b { 1.0 } else { 0.0 };
        match class % 10 {
            0 => on(u.abs() < 0.5 && v.abs() < 0.5),
            1 => on((r - 0.55).abs() < 0.15),
            2 => on((u.abs() < 0.15 && v.abs() < 0.7) || (v.abs() < 0.15 && u.abs() < 0.7)),
            3 => on(u.abs() < 0.2 && v.abs() < 0.75),
            4 => on(v.abs() < 0.2 && u.abs() < 0.75),
            5 => on((u - v).abs() < 0.25 && r < 0.8),
            6 => on(((u - v).abs() < 0.2 || (u + v).abs() < 0.2) && r < 0.8),
            7 => on(r < 0.45),
            8 => on(u > -0.6 && u < 0.6 && v.abs() < (u + 0.6) * 0.6),
            _ => on(u.abs() < 0.7 && v.abs() < 0.7 && ((u > 0.0) ^ (v > 0.0))),
        }
    }

    /// One image of `class`, `C×H×W`.
    pub fn sample(&self, class: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let [c, h, w] = self.input;
        let dy = rng.random_range(-self.max_shift..=self.max_shift) as f64;
        let dx = rng.random_range(-self.max_shift..=self.max_shift) as f64;
        let intensity = rng.random_range(0.75..1.0);
        // colour images tint the shape by class
        let tint: Vec<f64> = (0..c)
            .map(|ch| if c == 1 { 1.0 } else { 0.35 + 0.65 * ((class + ch) % c == 0) as u8 as f64 })
            .collect();
        let noise = Normal::new(0.0, self.noise_std.max(1e-12)).expect("valid std");
        Tensor::from_fn(&[c, h, w], |i| {
            let ch = i / (h * w);
            let y = (i / w) % h;
            let x = i % w;
            let u = ((y as f64 - dy) + 0.5) / h as f64 * 2.0 - 1.0;
            let v = ((x as f64 - dx) + 0.5) / w as f64 * 2.0 - 1.0;
            let base = Self::template(class, u, v) * intensity * tint[ch];
            (base + noise.sample(rng)).clamp(0.0, 1.0)
        })
    }

    /// `n` images with uniformly random labels.
    pub fn dataset(&self, n: usize, seed: u64) -> Dataset {
        let mut rng = rng::stream(seed, Purpose::Batch, u32::MAX);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.classes)).collect();
        let images: Vec<Tensor> = labels.iter().map(|&l| self.sample(l, &mut rng)).collect();
        Dataset {
            images: Tensor::stack(&images).expect("equal shapes"),
            labels,
            classes: self.classes,
        }
    }
}

/// Where a ground-truth batch comes from.
#[derive(Clone, Copy, Debug)]
pub enum Source<'a> {
    Synthetic(Synthetic),
    Dataset(&'a Dataset),
}

impl Source<'_> {
    pub fn classes(&self) -> usize {
        match self {
            Source::Synthetic(s) => s.classes,
            Source::Dataset(d) => d.classes,
        }
    }
}

/// Draws a batch of `k` images. With `distinct`, labels never repeat.
pub fn make_batch(source: Source<'_>, k: usize, distinct: bool, seed: u64) -> Result<Batch> {
    let classes = source.classes();
    if k == 0 {
        return Err(Error::invalid("make_batch", "batch size must be at least 1"));
    }
    if distinct && k > classes {
        return Err(Error::TooManyLabels { requested: k, classes });
    }
    let mut rng = rng::stream(seed, Purpose::Batch, 0);
    let labels: Vec<usize> = if distinct {
        sample(&mut rng, classes, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..classes)).collect()
    };
    let images = match source {
        Source::Synthetic(s) => labels.iter().map(|&l| s.sample(l, &mut rng)).collect::<Vec<_>>(),
        Source::Dataset(d) => {
            let mut picked = Vec::with_capacity(k);
            for &label in &labels {
                let pool: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == label).collect();
                if pool.is_empty() {
                    return Err(Error::invalid("make_batch", format!("dataset has no image of class {label}")));
                }
                picked.push(d.image(pool[rng.random_range(0..pool.len())]));
            }
            picked
        }
    };
    Batch::new(Tensor::stack(&images)?, labels)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("IDX header truncated at offset {offset}")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::BadMagic {
            offset: 0,
            expected: expected.to_be_bytes().to_vec(),
            found: found.to_be_bytes().to_vec(),
        });
    }
    Ok(())
}

/// Parses an IDX image file and its label file. Pixels are scaled from
/// `u8` to `[0, 1]`; the class count is one more than the largest label.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    check_magic(images, IDX_IMAGES)?;
    check_magic(labels, IDX_LABELS)?;
    let n = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let n_labels = be_u32(labels, 4)? as usize;
    if n != n_labels {
        return Err(Error::Format(format!("{n} images but {n_labels} labels")));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format("empty IDX dataset".into()));
    }
    let pixels = images
        .get(16..16 + n * rows * cols)
        .ok_or_else(|| Error::Format("IDX image payload truncated".into()))?;
    let label_bytes = labels
        .get(8..8 + n)
        .ok_or_else(|| Error::Format("IDX label payload truncated".into()))?;
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    Ok(Dataset {
        images: Tensor::new(&[n, 1, rows, cols], pixels.iter().map(|&p| p as f64 / 255.0).collect())?,
        labels,
        classes,
    })
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    parse_idx(&img, &lab)
}

/// Encodes `u8` images (`rows×cols` each) and labels as IDX byte streams.
pub fn encode_idx(images: &[Vec<u8>], rows: usize, cols: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::new();
    img.extend_from_slice(&IDX_IMAGES.to_be_bytes());
    img.extend_from_slice(&(images.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for im in images {
        img.extend_from_slice(im);
    }
    let mut lab = Vec::new();
    lab.extend_from_slice(&IDX_LABELS.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let images: Vec<Vec<u8>> = (0..4u8).map(|i| (0..12).map(|p| if p == 0 { 255 } else { p * i }).collect()).collect();
        encode_idx(&images, 3, 4, &[0, 1, 2, 1])
    }

    #[test]
    fn idx_fixture_shapes_and_scaling() {
        let (img, lab) = fixture();
        let d = parse_idx(&img, &lab).unwrap();
        assert_eq!(d.images.shape(), &[4, 1, 3, 4]);
        assert_eq!(d.images.data()[0], 1.0);
        assert_eq!(d.labels, vec![0, 1, 2, 1]);
        assert_eq!(d.classes, 3);
    }

    #[test]
    fn idx_bad_magic_names_offset() {
        let (mut img, lab) = fixture();
        img[3] = 0x02;
        let err = parse_idx(&img, &lab).unwrap_err();
        assert!(matches!(err, Error::BadMagic { offset: 0, .. }));
        assert!(err.to_string().contains("offset 0"));
    }

    #[test]
    fn idx_count_mismatch() {
        let (img, _) = fixture();
        let (_, lab) = encode_idx(&[], 3, 4, &[0, 1, 2]);
        assert!(matches!(parse_idx(&img, &lab), Err(Error::Format(_))));
    }

    #[test]
    fn distinct_batches_are_permutations() {
        let src = Source::Synthetic(Synthetic::default());
        let b = make_batch(src, 10, true, 4).unwrap();
        let mut sorted = b.labels.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(b.images.shape(), &[10, 1, 16, 16]);
        assert!(b.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn batches_are_seed_deterministic() {
        let src = Source::Synthetic(Synthetic::default());
        assert_eq!(make_batch(src, 3, true, 11).unwrap(), make_batch(src, 3, true, 11).unwrap());
        assert_ne!(make_batch(src, 3, true, 11).unwrap(), make_batch(src, 3, true, 12).unwrap());
    }

    #[test]
    fn too_many_distinct_labels() {
        let src = Source::Synthetic(Synthetic::default());
        assert!(matches!(
            make_batch(src, 11, true, 0),
            Err(Error::TooManyLabels { requested: 11, classes: 10 })
        ));
        assert_eq!(make_batch(src, 11, false, 0).unwrap().len(), 11);
    }

    #[test]
    fn dataset_source_respects_labels() {
        let (img, lab) = fixture();
        let d = parse_idx(&img, &lab).unwrap();
        let b = make_batch(Source::Dataset(&d), 3, true, 5).unwrap();
        for (k, &label) in b.labels.iter().enumerate() {
            let img = b.images.index_outer(k);
            assert!((0..d.len()).any(|i| d.labels[i] == label && d.image(i) == img));
        }
    }
}
