//! The simulated federated client: batch-averaged gradients and the files
//! handed to the attacker.

use std::fs;
use std::path::Path;

use crate::container::Archive;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{cross_entropy, BnMode, BnStats, Model, ModelSpec};
use crate::tensor::Tensor;

pub const BUNDLE_MAGIC: [u8; 4] = *b"GINV";
pub const TRUTH_MAGIC: [u8; 4] = *b"GTRU";

const FLAG_BN_STATS: u32 = 1;

/// Everything an attacker observes: the model, the gradient of the mean
/// batch loss for every parameter, and optionally the batch-norm statistics
/// of the batch. It has no field for the images or labels themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub model: Model,
    /// Same order and shapes as `model.params`.
    pub grads: Vec<Tensor>,
    /// Per batch-norm layer mean and population variance of the batch.
    pub bn_batch_stats: Option<Vec<BnStats>>,
    pub batch_size: usize,
}

impl GradientBundle {
    /// Gradient of the final fully connected layer, `M×N`.
    pub fn classifier_grad(&self) -> &Tensor {
        &self.grads[self.model.spec.classifier_weight_index()]
    }

    pub fn to_archive(&self) -> Archive {
        let mut tensors = Vec::new();
        let names = self.model.param_names();
        for (name, p) in names.iter().zip(&self.model.params) {
            tensors.push((format!("param/{name}"), p.clone()));
        }
        for (i, r) in self.model.bn_running.iter().enumerate() {
            tensors.push((format!("running_mean/{i}"), r.mean.clone()));
            tensors.push((format!("running_var/{i}"), r.var.clone()));
        }
        for (name, g) in names.iter().zip(&self.grads) {
            tensors.push((format!("grad/{name}"), g.clone()));
        }
        if let Some(stats) = &self.bn_batch_stats {
            for (i, s) in stats.iter().enumerate() {
                tensors.push((format!("batch_mean/{i}"), s.mean.clone()));
                tensors.push((format!("batch_var/{i}"), s.var.clone()));
            }
        }
        Archive {
            magic: BUNDLE_MAGIC,
            spec: self.model.spec.to_text(),
            batch_size: self.batch_size as u32,
            flags: if self.bn_batch_stats.is_some() { FLAG_BN_STATS } else { 0 },
            tensors,
        }
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let spec = ModelSpec::from_text(&a.spec)?;
        let fetch = |name: String, shape: &[usize]| -> Result<Tensor> {
            let t = a
                .get(&name)
                .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::Format(format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t.clone())
        };
        let layout = spec.param_layout();
        let mut params = Vec::with_capacity(layout.len());
        let mut grads = Vec::with_capacity(layout.len());
        for (name, _, shape) in &layout {
            params.push(fetch(format!("param/{name}"), shape)?);
            grads.push(fetch(format!("grad/{name}"), shape)?);
        }
        let channels = spec.bn_channels();
        let stats = |prefix: &str| -> Result<Vec<BnStats>> {
            channels
                .iter()
                .enumerate()
                .map(|(i, &ch)| {
                    Ok(BnStats {
                        mean: fetch(format!("{prefix}_mean/{i}"), &[ch])?,
                        var: fetch(format!("{prefix}_var/{i}"), &[ch])?,
                    })
                })
                .collect()
        };
        let bn_running = stats("running")?;
        let bn_batch_stats = if a.flags & FLAG_BN_STATS != 0 {
            Some(stats("batch")?)
        } else {
            None
        };
        let expected = 2 * layout.len() + 2 * channels.len() * if bn_batch_stats.is_some() { 2 } else { 1 };
        if a.tensors.len() != expected {
            return Err(Error::Format(format!("{} tensors present, expected {expected}", a.tensors.len())));
        }
        if a.batch_size == 0 {
            return Err(Error::Format("batch size is zero".into()));
        }
        Ok(GradientBundle {
            model: Model {
                spec,
                params,
                bn_running,
            },
            grads,
            bn_batch_stats,
            batch_size: a.batch_size as usize,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_archive().encode()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_archive(&Archive::decode(bytes, BUNDLE_MAGIC)?)
    }
}

/// Gradient of the batch-mean cross-entropy with respect to every parameter,
/// with batch-norm in batch mode so the batch statistics depend on the
/// images.
pub fn compute_bundle(model: &Model, batch: &Batch, include_bn_stats: bool) -> Result<GradientBundle> {
    let graph = Graph::new();
    let params = model.bind(&graph);
    let x = graph.constant(batch.images.clone());
    let trace = model.forward_graph(x, &params, BnMode::Batch)?;
    let loss = cross_entropy(trace.logits, &batch.labels)?;
    let grads = graph.grad(loss, &params)?;
    let bn_batch_stats = include_bn_stats.then(|| {
        trace
            .bn_stats
            .iter()
            .map(|(m, v)| BnStats {
                mean: m.tensor(),
                var: v.tensor(),
            })
            .collect()
    });
    Ok(GradientBundle {
        model: model.clone(),
        grads,
        bn_batch_stats,
        batch_size: batch.len(),
    })
}

pub fn save_bundle(bundle: &GradientBundle, path: &Path) -> Result<()> {
    fs::write(path, bundle.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_bundle(path: &Path) -> Result<GradientBundle> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    GradientBundle::from_bytes(&bytes)
}

/// Ground truth lives in its own file so that nothing reading bundles can
/// see it.
pub fn truth_to_bytes(batch: &Batch) -> Vec<u8> {
    let labels = Tensor::new(&[batch.len()], batch.labels.iter().map(|&l| l as f64).collect())
        .expect("non-empty batch");
    Archive {
        magic: TRUTH_MAGIC,
        spec: String::new(),
        batch_size: batch.len() as u32,
        flags: 0,
        tensors: vec![("images".into(), batch.images.clone()), ("labels".into(), labels)],
    }
    .encode()
}

pub fn truth_from_bytes(bytes: &[u8]) -> Result<Batch> {
    let a = Archive::decode(bytes, TRUTH_MAGIC)?;
    let images = a
        .get("images")
        .ok_or_else(|| Error::Format("missing `images`".into()))?
        .clone();
    let labels = a
        .get("labels")
        .ok_or_else(|| Error::Format("missing `labels`".into()))?
        .data()
        .iter()
        .map(|&v| v as usize)
        .collect();
    Batch::new(images, labels)
}

pub fn save_truth(batch: &Batch, path: &Path) -> Result<()> {
    fs::write(path, truth_to_bytes(batch)).map_err(|e| Error::io(path, e))
}

pub fn load_truth(path: &Path) -> Result<Batch> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    truth_from_bytes(&bytes)
}
