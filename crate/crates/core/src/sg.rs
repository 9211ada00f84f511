//! Stochastic-gradient baselines: momentum SGD, SGLD and SGHMC.
//!
//! All three read the posterior through [`MinibatchTarget`]; the prior is
//! whatever the target was built with. None of them applies an accept step,
//! so their chains carry no [`MhTrace`](crate::sampler::MhTrace).

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{ParamVector, RngStream};
use crate::potential::MinibatchTarget;
use crate::sampler::Chain;

/// Step-size schedule, indexed by iteration `t` from zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `η_t = η (1 + t)^(−γ)` with `γ ∈ (0.5, 1]`.
    PolynomialDecay { gamma: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, t: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::PolynomialDecay { gamma } => base * (1.0 + t as f64).powf(-gamma),
        }
    }
}

/// Which iterates a sampling baseline keeps once burn-in is over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retention {
    #[default]
    EveryIteration,
    EpochEnd,
}

/// Units of `learning_rate` for the Langevin-type samplers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrScale {
    /// `η` enters the updates exactly as written on [`sgld_chain`] and
    /// [`sghmc_chain`].
    #[default]
    Posterior,
    /// `η` is a step on the per-datum mean loss, as in most deep-learning
    /// implementations: SGLD uses `2η/N` and SGHMC uses `η/N`.
    PerDatum,
}

fn default_init_std() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Heavy-ball coefficient for SGD.
    #[serde(default)]
    pub momentum: f64,
    /// L2 coefficient added to the SGD objective as `½λ‖ω‖²`.
    #[serde(default)]
    pub weight_decay: f64,
    /// SGHMC friction `α`.
    #[serde(default)]
    pub friction: f64,
    /// Leading epochs whose iterates are discarded.
    #[serde(default)]
    pub burn: usize,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub retention: Retention,
    /// Ignored by SGD, whose objective is already per datum.
    #[serde(default)]
    pub lr_scale: LrScale,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    pub seed: u64,
}

impl SgConfig {
    pub fn new(learning_rate: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        Self {
            learning_rate,
            batch_size,
            epochs,
            momentum: 0.0,
            weight_decay: 0.0,
            friction: 0.0,
            burn: 0,
            lr_schedule: LrSchedule::Constant,
            retention: Retention::EveryIteration,
            lr_scale: LrScale::Posterior,
            init_std: default_init_std(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.friction) {
            return bad(format!("friction must lie in [0, 1], got {}", self.friction));
        }
        if let LrSchedule::PolynomialDecay { gamma } = self.lr_schedule {
            if !(gamma > 0.5 && gamma <= 1.0) {
                return bad(format!("decay exponent must lie in (0.5, 1], got {gamma}"));
            }
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad("init_std must be non-negative".into());
        }
        Ok(())
    }

    fn check_burn(&self) -> Result<()> {
        if self.burn >= self.epochs {
            return Err(Error::InvalidConfig(format!(
                "burn ({}) must be smaller than epochs ({})",
                self.burn, self.epochs
            )));
        }
        Ok(())
    }
}

/// Epoch-wise shuffled minibatches. Every row appears exactly once per
/// epoch; the last batch of an epoch may be short.
#[derive(Debug, Clone)]
pub struct MiniBatchStream {
    order: Vec<usize>,
    batch_size: usize,
}

impl MiniBatchStream {
    pub fn new(num_data: usize, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(Self {
            order: (0..num_data).collect(),
            batch_size: batch_size.min(num_data.max(1)),
        })
    }

    /// Batches per epoch. A dataset with no rows still yields one empty
    /// batch, so prior-only targets take one step per epoch.
    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size).max(1)
    }

    /// Reshuffles and returns the batches of a fresh epoch.
    pub fn epoch(&mut self, rng: &mut RngStream) -> Vec<Vec<usize>> {
        self.order.shuffle(rng);
        if self.order.is_empty() {
            return vec![Vec::new()];
        }
        self.order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// Unbiased estimate of `∇ log p(ω | D)` from one batch: the prior gradient
/// plus the batch likelihood gradient scaled by `N/|B|`.
pub fn stochastic_log_posterior_grad(
    target: &dyn MinibatchTarget,
    omega: &ParamVector,
    rows: &[usize],
) -> Result<ParamVector> {
    let (_, mut g) = target.log_prior_grad(omega);
    if !rows.is_empty() {
        let (_, g_ll) = target.batch_log_likelihood_grad(omega, rows)?;
        g.scaled_add(target.num_data() as f64 / rows.len() as f64, &g_ll);
    }
    Ok(g)
}

fn initial_point(target: &dyn MinibatchTarget, config: &SgConfig, rng: &mut RngStream) -> ParamVector {
    ParamVector::from_shape_fn(target.dim(), |_| config.init_std * rng.normal())
}

fn check_finite(omega: &ParamVector, step: usize) -> Result<()> {
    if omega.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            reason: "iterate became non-finite".into(),
        })
    }
}

/// Momentum SGD on `−(1/N) log p(ω | D) + ½λ‖ω‖²`, returning the final
/// iterate. The velocity follows `v ← μv + g`, `ω ← ω − η_t v`.
pub fn sgd_train(target: &dyn MinibatchTarget, config: &SgConfig, chain_index: usize) -> Result<ParamVector> {
    config.validate()?;
    let mut rng = RngStream::new(config.seed, chain_index as u64);
    let mut omega = initial_point(target, config, &mut rng);
    let mut velocity = ParamVector::zeros(omega.len());
    let mut stream = MiniBatchStream::new(target.num_data(), config.batch_size)?;
    let n = target.num_data().max(1) as f64;
    let mut t = 0;
    for _ in 0..config.epochs {
        for rows in stream.epoch(&mut rng) {
            let mut g = stochastic_log_posterior_grad(target, &omega, &rows)? / -n;
            g.scaled_add(config.weight_decay, &omega);
            velocity *= config.momentum;
            velocity += &g;
            omega.scaled_add(-config.lr_schedule.rate(config.learning_rate, t), &velocity);
            check_finite(&omega, t)?;
            t += 1;
        }
    }
    Ok(omega)
}

/// Shared loop for the two Langevin-type samplers. `update` applies one
/// iteration given the step size and the stochastic gradient.
fn sample_loop(
    target: &dyn MinibatchTarget,
    config: &SgConfig,
    chain_index: usize,
    scheme: &str,
    per_datum_factor: f64,
    mut update: impl FnMut(&mut ParamVector, f64, ParamVector, &mut RngStream),
) -> Result<Chain> {
    config.validate()?;
    config.check_burn()?;
    let scale = match config.lr_scale {
        LrScale::Posterior => 1.0,
        LrScale::PerDatum if target.num_data() > 0 => per_datum_factor / target.num_data() as f64,
        LrScale::PerDatum => {
            return Err(Error::InvalidConfig("per-datum learning rate needs training data".into()))
        }
    };
    let mut rng = RngStream::new(config.seed, chain_index as u64);
    let mut omega = initial_point(target, config, &mut rng);
    let mut stream = MiniBatchStream::new(target.num_data(), config.batch_size)?;
    let per_epoch = stream.batches_per_epoch();
    let kept_epochs = config.epochs - config.burn;
    let keep = match config.retention {
        Retention::EveryIteration => kept_epochs * per_epoch,
        Retention::EpochEnd => kept_epochs,
    };
    let mut samples = Array2::zeros((keep, omega.len()));
    let mut log_posterior = Vec::with_capacity(keep);
    let mut row = 0;
    let mut t = 0;
    let mut record = |omega: &ParamVector, row: &mut usize| -> Result<()> {
        samples.row_mut(*row).assign(omega);
        log_posterior.push(target.log_posterior(omega)?);
        *row += 1;
        Ok(())
    };
    for epoch in 0..config.epochs {
        let kept = epoch >= config.burn;
        for rows in stream.epoch(&mut rng) {
            let g = stochastic_log_posterior_grad(target, &omega, &rows)?;
            let eta = scale * config.lr_schedule.rate(config.learning_rate, t);
            update(&mut omega, eta, g, &mut rng);
            check_finite(&omega, t)?;
            t += 1;
            if kept && config.retention == Retention::EveryIteration {
                record(&omega, &mut row)?;
            }
        }
        if kept && config.retention == Retention::EpochEnd {
            record(&omega, &mut row)?;
        }
    }
    debug_assert_eq!(row, keep);
    Ok(Chain {
        scheme: scheme.to_string(),
        chain_index,
        samples,
        log_posterior,
        mh: None,
        divergences: 0,
        gradient_evaluations: t,
    })
}

/// SGLD: `ω ← ω + (η_t/2) ĝ + N(0, η_t)` with `ĝ` the minibatch estimate of
/// `∇ log p(ω | D)`.
pub fn sgld_chain(target: &dyn MinibatchTarget, config: &SgConfig, chain_index: usize) -> Result<Chain> {
    sample_loop(target, config, chain_index, "sgld", 2.0, |omega, eta, g, rng| {
        let sd = eta.sqrt();
        omega.zip_mut_with(&g, |w, gi| *w += 0.5 * eta * gi + sd * rng.normal());
    })
}

/// SGHMC in velocity form: `v ← (1−α)v + η_t ĝ + N(0, 2αη_t)`, `ω ← ω + v`.
pub fn sghmc_chain(target: &dyn MinibatchTarget, config: &SgConfig, chain_index: usize) -> Result<Chain> {
    let alpha = config.friction;
    let mut velocity = ParamVector::zeros(target.dim());
    sample_loop(target, config, chain_index, "sghmc", 1.0, move |omega, eta, g, rng| {
        let sd = (2.0 * alpha * eta).sqrt();
        velocity.zip_mut_with(&g, |v, gi| *v = (1.0 - alpha) * *v + eta * gi + sd * rng.normal());
        *omega += &velocity;
    })
}

/// A named baseline selectable at run time.
pub trait Baseline: Send + Sync {
    fn name(&self) -> &'static str;

    /// Runs chain `chain_index`. Point estimators return a single-row chain.
    fn run(&self, target: &dyn MinibatchTarget, config: &SgConfig, chain_index: usize) -> Result<Chain>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Sgd;

impl Baseline for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn run(&self, target: &dyn MinibatchTarget, config: &SgConfig, chain_index: usize) -> Result<Chain> {
        let omega = sgd_train(target, config, chain_index)?;
        let log_posterior = vec![target.log_posterior(&omega)?];
        let iterations = config.epochs * MiniBatchStream::new(target.num_data(), config.batch_size)?.batches_per_epoch();
        Ok(Chain {
            scheme: self.name().to_string(),
            chain_index,
            samples: omega.insert_axis(ndarray::Axis(0)),
            log_posterior,
            mh: None,
            divergences: 0,
            gradient_evaluations: iterations,
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Sgld;

impl Baseline for Sgld {
    fn name(&self) -> &'static str {
        "sgld"
    }

    fn run(&self, target: &dyn MinibatchTarget, config: &SgConfig, chain_index: usize) -> Result<Chain> {
        sgld_chain(target, config, chain_index)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Sghmc;

impl Baseline for Sghmc {
    fn name(&self) -> &'static str {
        "sghmc"
    }

    fn run(&self, target: &dyn MinibatchTarget, config: &SgConfig, chain_index: usize) -> Result<Chain> {
        sghmc_chain(target, config, chain_index)
    }
}

/// Baselines keyed by name.
#[derive(Clone, Default)]
pub struct BaselineRegistry {
    entries: BTreeMap<&'static str, Arc<dyn Baseline>>,
}

impl BaselineRegistry {
    pub fn builtin() -> Self {
        let mut r = Self::default();
        r.register(Arc::new(Sgd));
        r.register(Arc::new(Sgld));
        r.register(Arc::new(Sghmc));
        r
    }

    pub fn register(&mut self, baseline: Arc<dyn Baseline>) {
        self.entries.insert(baseline.name(), baseline);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Baseline>> {
        self.entries.get(name).cloned().ok_or_else(|| {
            Error::InvalidConfig(format!(
                "unknown baseline {name:?}; expected one of {:?}",
                self.names()
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

impl std::fmt::Debug for BaselineRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_tuple("BaselineRegistry").field(&self.names()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_row_once() {
        let mut s = MiniBatchStream::new(10, 3).unwrap();
        let mut rng = RngStream::new(0, 0);
        for _ in 0..3 {
            let batches = s.epoch(&mut rng);
            assert_eq!(batches.len(), 4);
            assert_eq!(batches.last().unwrap().len(), 1);
            let mut all: Vec<usize> = batches.concat();
            all.sort_unstable();
            assert_eq!(all, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn empty_data_gives_one_empty_batch() {
        let mut s = MiniBatchStream::new(0, 8).unwrap();
        assert_eq!(s.batches_per_epoch(), 1);
        assert_eq!(s.epoch(&mut RngStream::new(0, 0)), vec![Vec::<usize>::new()]);
    }

    #[test]
    fn decay_schedule() {
        let s = LrSchedule::PolynomialDecay { gamma: 1.0 };
        assert_eq!(s.rate(0.5, 0), 0.5);
        assert!((s.rate(0.5, 3) - 0.125).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.rate(0.5, 99), 0.5);
    }

    #[test]
    fn config_validation() {
        let ok = SgConfig::new(0.01, 32, 10, 0);
        assert!(ok.validate().is_ok());
        let mut c = ok.clone();
        c.lr_schedule = LrSchedule::PolynomialDecay { gamma: 0.5 };
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.friction = 1.5;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.burn = 10;
        assert!(c.check_burn().is_err());
        let mut c = ok;
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn registry_lookup() {
        let r = BaselineRegistry::builtin();
        assert_eq!(r.names(), vec!["sgd", "sghmc", "sgld"]);
        assert!(r.get("sgld").is_ok());
        assert!(r.get("adam").is_err());
    }
}
