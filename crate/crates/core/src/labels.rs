//! One-shot batch label restoration from the classifier's weight gradient.
//!
//! For a final layer `z = o W + b` with non-negative inputs `o`, the
//! per-sample weight gradient is `o ⊗ (p − y)`, whose column for the true
//! class is the only non-positive one. Taking the minimum of each column of
//! the averaged gradient keeps that negative signature visible even when other
//! samples contribute positive mass to the same column.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{cross_entropy, BnMode, Model};
use crate::tensor::Tensor;
use crate::victim::GradientBundle;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    /// Column-wise minimum over features.
    Min,
    /// Column-wise sum over features.
    Sum,
}

impl std::str::FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(Rule::Min),
            "sum" => Ok(Rule::Sum),
            _ => Err(Error::invalid("label rule", format!("expected `min` or `sum`, got `{s}`"))),
        }
    }
}

/// Per-class score `v_n` reduced over the feature axis of an `M×N` gradient.
pub fn class_scores(fc_grad: &Tensor, rule: Rule) -> Result<Vec<f64>> {
    let shape = fc_grad.shape();
    if shape.len() != 2 {
        return Err(Error::invalid("restore_labels", format!("classifier gradient must be M×N, got {shape:?}")));
    }
    let n = shape[1];
    let init = match rule {
        Rule::Min => f64::INFINITY,
        Rule::Sum => 0.0,
    };
    let mut v = vec![init; n];
    for row in fc_grad.data().chunks(n) {
        for (acc, &g) in v.iter_mut().zip(row) {
            *acc = match rule {
                Rule::Min => acc.min(g),
                Rule::Sum => *acc + g,
            };
        }
    }
    Ok(v)
}

/// The `k` classes with the smallest scores, ascending by score, ties broken
/// toward the lower class index.
pub fn restore_from_grad(fc_grad: &Tensor, k: usize, rule: Rule) -> Result<Vec<usize>> {
    let v = class_scores(fc_grad, rule)?;
    if k > v.len() {
        return Err(Error::TooManyLabels {
            requested: k,
            classes: v.len(),
        });
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

pub fn restore_labels_min(bundle: &GradientBundle, k: usize) -> Result<Vec<usize>> {
    restore_from_grad(bundle.classifier_grad(), k, Rule::Min)
}

pub fn restore_labels_sum(bundle: &GradientBundle, k: usize) -> Result<Vec<usize>> {
    restore_from_grad(bundle.classifier_grad(), k, Rule::Sum)
}

/// Order-insensitive accuracy: the fraction of true labels present in the
/// restored multiset.
pub fn label_accuracy(restored: &[usize], truth: &[usize]) -> f64 {
    let mut pool = restored.to_vec();
    let mut hits = 0;
    for t in truth {
        if let Some(pos) = pool.iter().position(|r| r == t) {
            pool.swap_remove(pos);
            hits += 1;
        }
    }
    hits as f64 / truth.len().max(1) as f64
}

/// Per-sample column sums of the classifier weight gradient, `N×K`.
#[derive(Clone, Debug, PartialEq)]
pub struct SMatrix {
    pub values: Tensor,
    /// Samples whose penultimate features are all zero; their columns carry
    /// no label information.
    pub dead: Vec<bool>,
}

/// Builds `S` from per-sample losses on the joint batch-norm graph. Needs the
/// ground truth, so it is a test oracle only.
pub fn s_matrix_oracle(model: &Model, batch: &Batch) -> Result<SMatrix> {
    let graph = Graph::new();
    let params = model.bind(&graph);
    let trace = model.forward_graph(graph.constant(batch.images.clone()), &params, BnMode::Batch)?;
    let fc = params[model.spec.classifier_weight_index()];
    let k = batch.len();
    let n = model.spec.classes;
    let mut values = Tensor::zeros(&[n, k]);
    for (s, &label) in batch.labels.iter().enumerate() {
        let loss = cross_entropy(trace.logits.slice(0, s, 1)?, &[label])?;
        let g = graph.grad(loss, &[fc])?.remove(0);
        let column = class_scores(&g, Rule::Sum)?;
        for (c, v) in column.into_iter().enumerate() {
            values.data_mut()[c * k + s] = v;
        }
    }
    let features = trace.features.value();
    let m = features.shape()[1];
    let dead = features.data().chunks(m).map(|row| row.iter().all(|&v| v == 0.0)).collect();
    Ok(SMatrix { values, dead })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        // o = (1, 2), p = (0.2, 0.5, 0.3), y = 1: gradient rows o_m (p - y)
        let g = Tensor::new(&[2, 3], vec![0.2, -0.5, 0.3, 0.4, -1.0, 0.6]).unwrap();
        assert_eq!(class_scores(&g, Rule::Min).unwrap(), vec![0.2, -1.0, 0.3]);
        assert_eq!(restore_from_grad(&g, 1, Rule::Min).unwrap(), vec![1]);
        assert_eq!(restore_from_grad(&g, 1, Rule::Sum).unwrap(), vec![1]);
    }

    #[test]
    fn too_many_labels() {
        let g = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            restore_from_grad(&g, 4, Rule::Min),
            Err(Error::TooManyLabels { requested: 4, classes: 3 })
        ));
    }

    #[test]
    fn ties_prefer_lower_index() {
        let g = Tensor::new(&[1, 4], vec![0.0, -1.0, -1.0, 0.0]).unwrap();
        assert_eq!(restore_from_grad(&g, 3, Rule::Min).unwrap(), vec![1, 2, 0]);
    }

    #[test]
    fn all_classes_returned_when_k_equals_n() {
        let g = Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.7).sin());
        let mut got = restore_from_grad(&g, 5, Rule::Sum).unwrap();
        got.sort();
        assert_eq!(got, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn accuracy_is_a_multiset_overlap() {
        assert_eq!(label_accuracy(&[3, 1], &[1, 3]), 1.0);
        assert_eq!(label_accuracy(&[3, 3], &[1, 3]), 0.5);
    }
}
