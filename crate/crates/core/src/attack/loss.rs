//! Differentiable objective terms. Each function returns the unweighted term;
//! [`objective`] applies the configured weights.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{cross_entropy, BnMode, BnStats, GraphTrace, Model};
use crate::tensor::Tensor;

use super::{AttackConfig, GradLoss};

/// Gradient distance between the task-loss gradient at `(x, labels)` and
/// the observed gradients `target`. The inner gradient is taken in
/// differentiable mode, so the result can be differentiated again with
/// respect to `x`. `groups` lists parameter indices per layer for the
/// per-layer norms.
pub fn grad_matching_loss<'g>(
    x: Var<'g>,
    labels: &[usize],
    model: &Model,
    target: &[Tensor],
    groups: &[Vec<usize>],
    kind: GradLoss,
) -> Result<(Var<'g>, GraphTrace<'g>)> {
    let k = x.shape()[0];
    if labels.len() != k {
        return Err(Error::invalid(
            "grad_matching_loss",
            format!("{} labels for a batch of {k}", labels.len()),
        ));
    }
    let graph = x.graph();
    let params = model.bind(graph);
    let trace = model.forward_graph(x, &params, BnMode::Batch)?;
    let task = cross_entropy(trace.logits, labels)?;
    let grads = graph.backward(task, &params, true)?;
    let target: Vec<Var<'g>> = target.iter().map(|t| graph.constant(t.clone())).collect();
    let loss = match kind {
        GradLoss::L2 | GradLoss::L2Squared => {
            let mut total: Option<Var<'g>> = None;
            for group in groups {
                let mut sq: Option<Var<'g>> = None;
                for &i in group {
                    let s = grads[i].sub(target[i])?.square()?.sum()?;
                    sq = Some(match sq {
                        Some(acc) => acc.add(s)?,
                        None => s,
                    });
                }
                let Some(sq) = sq else { continue };
                let term = if kind == GradLoss::L2 {
                    sq.add_scalar(crate::graph::NORM_FLOOR)?.sqrt()?
                } else {
                    sq
                };
                total = Some(match total {
                    Some(acc) => acc.add(term)?,
                    None => term,
                });
            }
            total.unwrap_or_else(|| graph.scalar(0.0))
        }
        GradLoss::Cosine => {
            let mut dot = graph.scalar(0.0);
            let mut gg = graph.scalar(0.0);
            let mut tt = 0.0;
            for (g, t) in grads.iter().zip(&target) {
                dot = dot.add(g.mul(*t)?.sum()?)?;
                gg = gg.add(g.square()?.sum()?)?;
                tt += t.value().data().iter().map(|v| v * v).sum::<f64>();
            }
            let denom = gg.add_scalar(crate::graph::NORM_FLOOR)?.sqrt()?.mul_scalar(tt.sqrt())?;
            dot.div(denom)?.neg()?.add_scalar(1.0)?
        }
    };
    Ok((loss, trace))
}

/// Isotropic total variation with forward differences over the
/// `(H-1)×(W-1)` interior, smoothed by `eps`.
pub fn tv_prior(x: Var<'_>, eps: f64) -> Result<Var<'_>> {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    if h < 2 || w < 2 {
        return Err(Error::invalid("tv_prior", format!("needs H, W >= 2, got {h}×{w}")));
    }
    let base = x.slice(2, 0, h - 1)?.slice(3, 0, w - 1)?;
    let down = x.slice(2, 1, h - 1)?.slice(3, 0, w - 1)?;
    let right = x.slice(2, 0, h - 1)?.slice(3, 1, w - 1)?;
    let dh = down.sub(base)?.square()?;
    let dw = right.sub(base)?.square()?;
    dh.add(dw)?.add_scalar(eps * eps)?.sqrt()?.sum()
}

/// Euclidean norm of the whole batch.
pub fn l2_prior(x: Var<'_>) -> Result<Var<'_>> {
    x.norm()
}

/// `Σ_l ||μ_l − mean_l|| + ||σ²_l − var_l||` over the batch-norm layers.
pub fn bn_prior<'g>(trace: &GraphTrace<'g>, target: &[BnStats]) -> Result<Var<'g>> {
    if trace.bn_stats.len() != target.len() {
        return Err(Error::invalid(
            "bn_prior",
            format!("{} batch-norm layers but {} targets", trace.bn_stats.len(), target.len()),
        ));
    }
    let Some((first, _)) = trace.bn_stats.first() else {
        return Ok(trace.logits.graph().scalar(0.0));
    };
    let graph = first.graph();
    let mut total = graph.scalar(0.0);
    for ((mean, var), t) in trace.bn_stats.iter().zip(target) {
        let dm = mean.sub(graph.constant(t.mean.clone()))?.norm()?;
        let dv = var.sub(graph.constant(t.var.clone()))?.norm()?;
        total = total.add(dm)?.add(dv)?;
    }
    Ok(total)
}

/// `||x − consensus||` with the consensus held constant.
pub fn group_consistency_loss<'g>(x: Var<'g>, consensus: &Tensor) -> Result<Var<'g>> {
    x.sub(x.graph().constant(consensus.clone()))?.norm()
}

/// Weighted terms of one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Terms<'g> {
    pub grad: Var<'g>,
    pub tv: Var<'g>,
    pub l2: Var<'g>,
    pub bn: Var<'g>,
    pub group: Var<'g>,
    pub total: Var<'g>,
}

impl<'g> Terms<'g> {
    pub fn named(&self) -> [(&'static str, Var<'g>); 6] {
        [
            ("grad", self.grad),
            ("tv", self.tv),
            ("l2", self.l2),
            ("bn", self.bn),
            ("group", self.group),
            ("total", self.total),
        ]
    }
}

/// Everything fixed across iterations of one attack.
pub struct Problem<'a> {
    pub model: &'a Model,
    pub target: &'a [Tensor],
    pub labels: &'a [usize],
    /// Parameter indices grouped by layer.
    pub groups: Vec<Vec<usize>>,
    /// Per-layer batch-norm target for the prior.
    pub bn_target: Vec<BnStats>,
}

impl<'a> Problem<'a> {
    pub fn new(model: &'a Model, target: &'a [Tensor], labels: &'a [usize], bn_target: Vec<BnStats>) -> Self {
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        for (i, (_, layer, _)) in model.spec.param_layout().into_iter().enumerate() {
            match groups.last_mut() {
                Some((l, members)) if *l == layer => members.push(i),
                _ => groups.push((layer, vec![i])),
            }
        }
        Problem {
            model,
            target,
            labels,
            groups: groups.into_iter().map(|(_, m)| m).collect(),
            bn_target,
        }
    }
}

/// Full weighted objective at `x`. The group term is zero when `consensus`
/// is `None`. Terms with zero weight are skipped rather than evaluated.
pub fn objective<'g>(x: Var<'g>, problem: &Problem<'_>, config: &AttackConfig, consensus: Option<&Tensor>) -> Result<Terms<'g>> {
    let graph = x.graph();
    let zero = graph.scalar(0.0);
    let (grad, trace) = grad_matching_loss(x, problem.labels, problem.model, problem.target, &problem.groups, config.grad_loss)?;
    let grad = grad.mul_scalar(config.alpha_grad)?;
    let tv = if config.alpha_tv > 0.0 {
        tv_prior(x, config.tv_eps)?.mul_scalar(config.alpha_tv)?
    } else {
        zero
    };
    let l2 = if config.alpha_l2 > 0.0 {
        l2_prior(x)?.mul_scalar(config.alpha_l2)?
    } else {
        zero
    };
    let bn = if config.alpha_bn > 0.0 {
        bn_prior(&trace, &problem.bn_target)?.mul_scalar(config.alpha_bn)?
    } else {
        zero
    };
    let group = match consensus {
        Some(c) if config.alpha_group > 0.0 => group_consistency_loss(x, c)?.mul_scalar(config.alpha_group)?,
        _ => zero,
    };
    let total = grad.add(tv)?.add(l2)?.add(bn)?.add(group)?;
    Ok(Terms {
        grad,
        tv,
        l2,
        bn,
        group,
        total,
    })
}
