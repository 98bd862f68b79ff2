//! Multi-seed gradient inversion.
//!
//! Each seed optimizes its own batch of images with Adam under the weighted
//! objective in [`loss::objective`]. From `consensus_start` on, every
//! `consensus_interval` iterations the seeds meet at a barrier, the group
//! consensus is recomputed from their current images and each seed is pulled
//! toward it until the next barrier.

pub mod consensus;
pub mod loss;

use std::str::FromStr;
use std::time::{Duration, Instant};

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::labels::restore_labels_min;
use crate::nn::{BnStats, Model};
use crate::optim::{warmup_cosine, Adam};
use crate::registration::default_radius;
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;
use crate::victim::GradientBundle;

pub use consensus::consensus_image;
pub use loss::{bn_prior, grad_matching_loss, group_consistency_loss, l2_prior, objective, tv_prior, Problem, Terms};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradLoss {
    /// Sum over layers of the Euclidean norm of the gradient difference.
    L2,
    /// Sum over layers of the squared Euclidean norm.
    L2Squared,
    /// One minus the cosine similarity of the flattened gradients.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnRegime {
    /// Match the batch statistics shipped in the bundle.
    Exact,
    /// Match the model's running statistics.
    Approx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConsensusMode {
    /// Pixel-wise mean of the candidates.
    Lazy,
    /// Mean of the candidates after translating each onto the pixel-wise mean.
    Registered,
}

macro_rules! keyword_enum {
    ($ty:ident, $what:literal, $($kw:literal => $v:ident),+) => {
        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($kw => Ok($ty::$v),)+
                    _ => Err(Error::invalid($what, format!("unknown value `{s}`"))),
                }
            }
        }

        impl $ty {
            pub fn keyword(self) -> &'static str {
                match self {
                    $($ty::$v => $kw,)+
                }
            }
        }
    };
}

keyword_enum!(GradLoss, "grad_loss", "l2" => L2, "l2sq" => L2Squared, "cosine" => Cosine);
keyword_enum!(BnRegime, "bn_regime", "exact" => Exact, "approx" => Approx);
keyword_enum!(ConsensusMode, "consensus", "lazy" => Lazy, "registered" => Registered);

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub alpha_grad: f64,
    pub alpha_tv: f64,
    pub alpha_l2: f64,
    pub alpha_bn: f64,
    pub alpha_group: f64,
    /// Scale of the exploration noise added after each step, relative to the
    /// current learning rate.
    pub alpha_noise: f64,
    pub lr: f64,
    pub iterations: usize,
    pub warmup: usize,
    pub group_size: usize,
    /// First consensus iteration; `None` means a quarter of `iterations`.
    pub consensus_start: Option<usize>,
    pub consensus_interval: usize,
    pub consensus: ConsensusMode,
    /// Registration search radius; `None` means `ceil(H / 8)`.
    pub radius: Option<usize>,
    pub bn_regime: BnRegime,
    pub grad_loss: GradLoss,
    pub tv_eps: f64,
    pub seed: u64,
    /// Labels to use instead of restoring them from the bundle.
    pub labels: Option<Vec<usize>>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            alpha_grad: 1e-3,
            alpha_tv: 1e-4,
            alpha_l2: 1e-6,
            alpha_bn: 0.1,
            alpha_group: 0.01,
            alpha_noise: 0.2,
            lr: 0.1,
            iterations: 2000,
            warmup: 50,
            group_size: 4,
            consensus_start: None,
            consensus_interval: 100,
            consensus: ConsensusMode::Registered,
            radius: None,
            bn_regime: BnRegime::Exact,
            grad_loss: GradLoss::L2,
            tv_eps: 1e-8,
            seed: 0,
            labels: None,
        }
    }
}

impl AttackConfig {
    /// Weights calibrated for 16×16 inputs and the small presets: total
    /// variation, batch-norm and group terms scaled down relative to the
    /// gradient term, which is much smaller here than for a deep network.
    pub fn desk() -> Self {
        AttackConfig {
            alpha_tv: 1e-5,
            alpha_bn: 1e-3,
            alpha_group: 1e-5,
            ..AttackConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("alpha_grad", self.alpha_grad),
            ("alpha_tv", self.alpha_tv),
            ("alpha_l2", self.alpha_l2),
            ("alpha_bn", self.alpha_bn),
            ("alpha_group", self.alpha_group),
            ("alpha_noise", self.alpha_noise),
            ("lr", self.lr),
            ("tv_eps", self.tv_eps),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidSpec(format!("{name} must be finite and non-negative, got {w}")));
            }
        }
        if self.iterations == 0 {
            return Err(Error::InvalidSpec("iterations must be at least 1".into()));
        }
        if self.group_size == 0 {
            return Err(Error::InvalidSpec("group_size must be at least 1".into()));
        }
        if self.consensus_interval == 0 {
            return Err(Error::InvalidSpec("consensus_interval must be at least 1".into()));
        }
        Ok(())
    }

    pub fn consensus_start(&self) -> usize {
        self.consensus_start.unwrap_or(self.iterations / 4)
    }

    pub fn lr_at(&self, t: usize) -> f64 {
        lr_schedule(t, self)
    }

    /// Sets one field from its textual key, as used by run-config files.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::InvalidSpec(format!("`{key}`: cannot parse `{value}`")))
        }
        match key {
            "alpha_grad" => self.alpha_grad = num(key, value)?,
            "alpha_tv" => self.alpha_tv = num(key, value)?,
            "alpha_l2" => self.alpha_l2 = num(key, value)?,
            "alpha_bn" => self.alpha_bn = num(key, value)?,
            "alpha_group" => self.alpha_group = num(key, value)?,
            "alpha_noise" => self.alpha_noise = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "iterations" => self.iterations = num(key, value)?,
            "warmup" => self.warmup = num(key, value)?,
            "group_size" => self.group_size = num(key, value)?,
            "consensus_start" => self.consensus_start = Some(num(key, value)?),
            "consensus_interval" => self.consensus_interval = num(key, value)?,
            "consensus" => self.consensus = value.parse()?,
            "radius" => self.radius = Some(num(key, value)?),
            "bn_regime" => self.bn_regime = value.parse()?,
            "grad_loss" => self.grad_loss = value.parse()?,
            "tv_eps" => self.tv_eps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "labels" => {
                self.labels = Some(
                    value
                        .split(',')
                        .map(|s| num(key, s.trim()))
                        .collect::<Result<Vec<usize>>>()?,
                )
            }
            _ => return Err(Error::InvalidSpec(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// `key = value` lines that [`AttackConfig::set`] reads back.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "alpha_grad = {}\nalpha_tv = {}\nalpha_l2 = {}\nalpha_bn = {}\nalpha_group = {}\nalpha_noise = {}\n\
             lr = {}\niterations = {}\nwarmup = {}\ngroup_size = {}\nconsensus_start = {}\nconsensus_interval = {}\n\
             consensus = {}\nbn_regime = {}\ngrad_loss = {}\ntv_eps = {}\nseed = {}\n",
            self.alpha_grad,
            self.alpha_tv,
            self.alpha_l2,
            self.alpha_bn,
            self.alpha_group,
            self.alpha_noise,
            self.lr,
            self.iterations,
            self.warmup,
            self.group_size,
            self.consensus_start(),
            self.consensus_interval,
            self.consensus.keyword(),
            self.bn_regime.keyword(),
            self.grad_loss.keyword(),
            self.tv_eps,
            self.seed,
        );
        if let Some(r) = self.radius {
            s += &format!("radius = {r}\n");
        }
        if let Some(labels) = &self.labels {
            let l: Vec<String> = labels.iter().map(usize::to_string).collect();
            s += &format!("labels = {}\n", l.join(","));
        }
        s
    }
}

/// Linear warmup to the base rate, then cosine decay to zero at the final
/// iteration.
pub fn lr_schedule(t: usize, config: &AttackConfig) -> f64 {
    warmup_cosine(t, config.lr, config.warmup, config.iterations)
}

/// Weighted objective terms recorded before the update at iteration `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub lr: f64,
    pub grad: f64,
    pub tv: f64,
    pub l2: f64,
    pub bn: f64,
    pub group: f64,
    pub total: f64,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "t,lr,l_grad,tv,l2,bn,group,total";

    pub fn csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.t, self.lr, self.grad, self.tv, self.l2, self.bn, self.group, self.total
        )
    }
}

/// One seed's optimization state.
#[derive(Clone, Debug)]
pub struct CandidateState {
    pub x: Tensor,
    pub adam: Adam,
    pub trace: Vec<TraceRow>,
    noise: ChaCha8Rng,
}

impl CandidateState {
    pub fn new(shape: &[usize], seed: u64, index: u32) -> Self {
        let mut init = rng::stream(seed, Purpose::CandidateInit, index);
        let x = rng::gaussian(shape, &mut init);
        CandidateState {
            adam: Adam::new(x.len()),
            x,
            trace: Vec::new(),
            noise: rng::stream(seed, Purpose::ExplorationNoise, index),
        }
    }

    /// Evaluates the objective, takes one Adam step and adds exploration
    /// noise.
    pub fn step(&mut self, t: usize, problem: &Problem<'_>, config: &AttackConfig, consensus: Option<&Tensor>) -> Result<()> {
        let lr = lr_schedule(t, config);
        let graph = Graph::new();
        let x = graph.variable(self.x.clone());
        let terms = objective(x, problem, config, consensus)?;
        for (name, v) in terms.named() {
            if !v.item().is_finite() {
                return Err(Error::NonFinite { term: name, iteration: t });
            }
        }
        let grad = graph.grad(terms.total, &[x])?.remove(0);
        if !grad.all_finite() {
            return Err(Error::NonFinite {
                term: "gradient",
                iteration: t,
            });
        }
        self.trace.push(TraceRow {
            t,
            lr,
            grad: terms.grad.item(),
            tv: terms.tv.item(),
            l2: terms.l2.item(),
            bn: terms.bn.item(),
            group: terms.group.item(),
            total: terms.total.item(),
        });
        self.adam.step(self.x.data_mut(), grad.data(), lr);
        if config.alpha_noise > 0.0 {
            let eta = rng::gaussian(self.x.shape(), &mut self.noise);
            let scale = lr * config.alpha_noise;
            for (v, e) in self.x.data_mut().iter_mut().zip(eta.data()) {
                *v += scale * e;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AttackResult {
    /// Final images of each seed.
    pub candidates: Vec<Tensor>,
    /// Consensus of the final candidates.
    pub consensus: Tensor,
    pub labels: Vec<usize>,
    /// Loss trace of each seed.
    pub traces: Vec<Vec<TraceRow>>,
    /// `(t, mean ||x_g − E||)` at every consensus recompute and after the
    /// final iteration.
    pub deviation: Vec<(usize, f64)>,
    pub elapsed: Duration,
    pub config: AttackConfig,
}

impl AttackResult {
    /// Gradient-matching term (weighted) of seed `g` at its first and last
    /// recorded iteration.
    pub fn grad_loss_span(&self, g: usize) -> (f64, f64) {
        let tr = &self.traces[g];
        (tr.first().map_or(f64::NAN, |r| r.grad), tr.last().map_or(f64::NAN, |r| r.grad))
    }
}

/// Batch-norm statistics the prior pulls toward under `regime`.
pub fn bn_target(bundle: &GradientBundle, model: &Model, regime: BnRegime) -> Result<Vec<BnStats>> {
    match regime {
        BnRegime::Approx => Ok(model.bn_running.clone()),
        BnRegime::Exact => match &bundle.bn_batch_stats {
            Some(s) => Ok(s.clone()),
            None if model.spec.bn_channels().is_empty() => Ok(Vec::new()),
            None => Err(Error::InvalidSpec(
                "bn_regime = exact needs a bundle that carries batch statistics".into(),
            )),
        },
    }
}

/// Reconstructs the batch behind `bundle`. Labels come from the config when
/// given, otherwise from the min rule on the classifier gradient.
pub fn run_inversion(config: &AttackConfig, bundle: &GradientBundle, model: &Model) -> Result<AttackResult> {
    config.validate()?;
    let start = Instant::now();
    let k = bundle.batch_size;
    let labels = match &config.labels {
        Some(l) if l.len() != k => {
            return Err(Error::InvalidSpec(format!("{} labels given for a batch of {k}", l.len())));
        }
        Some(l) => l.clone(),
        None => restore_labels_min(bundle, k)?,
    };
    let bn = if config.alpha_bn > 0.0 {
        bn_target(bundle, model, config.bn_regime)?
    } else {
        Vec::new()
    };
    let problem = Problem::new(model, &bundle.grads, &labels, bn);
    let [c, h, w] = model.spec.input;
    let shape = [k, c, h, w];
    let radius = config.radius.unwrap_or_else(|| default_radius(h));
    let mut states: Vec<CandidateState> = (0..config.group_size)
        .map(|g| CandidateState::new(&shape, config.seed, g as u32))
        .collect();

    let t_total = config.iterations;
    let first = config.consensus_start();
    let mut barriers: Vec<usize> = (first..t_total).step_by(config.consensus_interval).collect();
    barriers.push(t_total);
    let mean_deviation = |xs: &[Tensor], e: &Tensor| -> Result<f64> {
        let mut total = 0.0;
        for x in xs {
            total += x.zip_map(e, "deviation", |a, b| a - b)?.norm();
        }
        Ok(total / xs.len() as f64)
    };
    let mut consensus: Option<Tensor> = None;
    let mut deviation = Vec::new();
    let mut t0 = 0;
    for &t1 in &barriers {
        if t0 >= first && t0 < t_total {
            let xs: Vec<Tensor> = states.iter().map(|s| s.x.clone()).collect();
            let e = consensus_image(&xs, config.consensus, radius)?;
            deviation.push((t0, mean_deviation(&xs, &e)?));
            consensus = Some(e);
        }
        let target = consensus.as_ref();
        let problem = &problem;
        states.par_iter_mut().try_for_each(|state| -> Result<()> {
            for t in t0..t1 {
                state.step(t, problem, config, target)?;
            }
            Ok(())
        })?;
        t0 = t1;
    }

    let candidates: Vec<Tensor> = states.iter().map(|s| s.x.clone()).collect();
    let consensus = consensus_image(&candidates, config.consensus, radius)?;
    deviation.push((t_total, mean_deviation(&candidates, &consensus)?));
    Ok(AttackResult {
        consensus,
        candidates,
        labels,
        traces: states.into_iter().map(|s| s.trace).collect(),
        deviation,
        elapsed: start.elapsed(),
        config: config.clone(),
    })
}
