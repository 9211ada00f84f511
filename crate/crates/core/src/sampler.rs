//! HMC driver: momentum refreshment, trajectory proposal through any
//! registered integrator, and a Metropolis–Hastings correction that always
//! uses the full-data Hamiltonian.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::integrators::{
    run_trajectory, Integrator, IntegratorRegistry, PhaseState, TrajectoryConfig,
    DIVERGENCE_THRESHOLD,
};
use crate::numeric::{kinetic_energy, sample_momentum, DiagonalMass, ParamVector, RngStream};
use crate::potential::ShardedPotential;

/// Accept with probability `min(1, exp(H_old − H_new))`. A non-finite
/// `H_new` is always rejected. Exactly one uniform is drawn per call.
pub fn mh_accept(h_old: f64, h_new: f64, rng: &mut RngStream) -> bool {
    let u = rng.uniform();
    if !h_new.is_finite() || !h_old.is_finite() {
        return false;
    }
    u.ln() < h_old - h_new
}

/// Mass matrix as written in configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MassSpec {
    Scalar(f64),
    Diagonal(Vec<f64>),
}

impl Default for MassSpec {
    fn default() -> Self {
        MassSpec::Scalar(1.0)
    }
}

impl MassSpec {
    pub fn resolve(&self, dim: usize) -> Result<DiagonalMass> {
        match self {
            MassSpec::Scalar(s) => DiagonalMass::scalar(dim, *s),
            MassSpec::Diagonal(d) => {
                check_dim("mass diagonal", dim, d.len())?;
                DiagonalMass::new(d.clone().into())
            }
        }
    }
}

fn default_thin() -> usize {
    1
}

fn default_chains() -> usize {
    1
}

fn default_init_std() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Total proposals per chain, burn-in included.
    pub num_samples: usize,
    /// Leading proposals discarded.
    #[serde(default)]
    pub burn: usize,
    /// Keep every `thin`-th post-burn state.
    #[serde(default = "default_thin")]
    pub thin: usize,
    pub trajectory: TrajectoryConfig,
    #[serde(default)]
    pub mass: MassSpec,
    pub seed: u64,
    #[serde(default = "default_chains")]
    pub num_chains: usize,
    /// Standard deviation of the Gaussian chain initialisation.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl SamplerConfig {
    pub fn new(trajectory: TrajectoryConfig, num_samples: usize, seed: u64) -> Self {
        Self {
            num_samples,
            burn: 0,
            thin: 1,
            trajectory,
            mass: MassSpec::default(),
            seed,
            num_chains: 1,
            init_std: default_init_std(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.trajectory.validate()?;
        if self.num_samples == 0 {
            return Err(Error::InvalidConfig("num_samples must be positive".into()));
        }
        if self.burn >= self.num_samples {
            return Err(Error::InvalidConfig(format!(
                "burn ({}) must be smaller than num_samples ({})",
                self.burn, self.num_samples
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidConfig("thin must be positive".into()));
        }
        if self.num_chains == 0 {
            return Err(Error::InvalidConfig("num_chains must be positive".into()));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::InvalidConfig("init_std must be non-negative".into()));
        }
        Ok(())
    }

    /// Number of states a chain keeps.
    pub fn retained(&self) -> usize {
        (self.num_samples - self.burn).div_ceil(self.thin)
    }
}

/// Current position with its cached potential.
#[derive(Debug, Clone)]
pub struct HmcState {
    pub position: ParamVector,
    pub potential: f64,
}

impl HmcState {
    pub fn new(position: ParamVector, target: &dyn ShardedPotential) -> Result<Self> {
        let potential = target.full_potential(&position)?;
        if !potential.is_finite() {
            return Err(Error::InvalidData("initial potential is not finite".into()));
        }
        Ok(Self {
            position,
            potential,
        })
    }
}

/// One HMC transition.
#[derive(Debug, Clone)]
pub struct Transition {
    pub accepted: bool,
    /// `H_new − H_old`; `+∞` for divergent trajectories.
    pub delta_h: f64,
    pub diverged: bool,
    /// Shard orders drawn during the trajectory.
    pub orders: Vec<Vec<usize>>,
    pub gradient_evaluations: usize,
}

/// Refresh momentum, integrate, and accept or reject. On rejection `state`
/// is left unchanged; on acceptance it moves to the trajectory endpoint.
pub fn hmc_step(
    state: &mut HmcState,
    target: &dyn ShardedPotential,
    integrator: &dyn Integrator,
    trajectory: &TrajectoryConfig,
    mass: &DiagonalMass,
    rng: &mut RngStream,
) -> Result<Transition> {
    let momentum = sample_momentum(mass, rng);
    let h_old = state.potential + kinetic_energy(&momentum, mass)?;
    let start = PhaseState::new(state.position.clone(), momentum)?;
    let out = run_trajectory(start, trajectory, integrator, target, mass, rng)?;
    let gradient_evaluations = out.shard_evaluations + out.full_evaluations * target.num_shards();

    let (u_new, h_new) = if out.divergence.is_none() {
        let u = target.full_potential(&out.state.position)?;
        (u, u + kinetic_energy(&out.state.momentum, mass)?)
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    let mut delta_h = h_new - h_old;
    let diverged = !delta_h.is_finite() || delta_h.abs() > DIVERGENCE_THRESHOLD;
    if diverged {
        delta_h = f64::INFINITY;
    }
    let accepted = mh_accept(h_old, if diverged { f64::INFINITY } else { h_new }, rng);
    if accepted {
        state.position = out.state.position;
        state.potential = u_new;
    }
    Ok(Transition {
        accepted,
        delta_h,
        diverged,
        orders: out.orders,
        gradient_evaluations,
    })
}

/// Metropolis–Hastings record of an HMC chain, one entry per retained sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MhTrace {
    /// Accept flag of the proposal that produced each retained state.
    pub accept_flags: Vec<bool>,
    /// `ΔH` of the proposal that produced each retained state.
    pub delta_h: Vec<f64>,
    /// Shard orders of each retained proposal (randomised schemes only).
    pub orders: Vec<Vec<Vec<usize>>>,
    /// Post-burn proposal count, thinned-out ones included.
    pub proposals: usize,
    /// Accepted post-burn proposals.
    pub accepted: usize,
}

/// Retained samples of one chain from any sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub scheme: String,
    pub chain_index: usize,
    /// `retained × d`, one row per kept state.
    pub samples: Array2<f64>,
    /// Unnormalised `−U(ω)` of each retained state.
    pub log_posterior: Vec<f64>,
    /// Present for HMC chains only; stochastic-gradient chains have no
    /// accept step.
    pub mh: Option<MhTrace>,
    /// Divergent trajectories (HMC) or aborted updates, burn-in included.
    pub divergences: usize,
    /// Gradient evaluations over the whole run, in units of one shard or
    /// one minibatch.
    pub gradient_evaluations: usize,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    /// Accept flags of retained samples; empty without an MH step.
    pub fn accept_flags(&self) -> &[bool] {
        self.mh.as_ref().map_or(&[], |m| &m.accept_flags)
    }

    pub fn delta_h(&self) -> &[f64] {
        self.mh.as_ref().map_or(&[], |m| &m.delta_h)
    }
}

/// Runs chain `chain_index`; its randomness comes only from
/// `RngStream::new(config.seed, chain_index)`.
pub fn run_chain(
    target: &dyn ShardedPotential,
    integrator: &dyn Integrator,
    config: &SamplerConfig,
    chain_index: usize,
) -> Result<Chain> {
    config.validate()?;
    integrator.check_shards(target.num_shards())?;
    let d = target.dim();
    let mass = config.mass.resolve(d)?;
    let mut rng = RngStream::new(config.seed, chain_index as u64);
    let init = ParamVector::from_shape_fn(d, |_| config.init_std * rng.normal());
    let mut state = HmcState::new(init, target)?;

    let keep = config.retained();
    let mut samples = Array2::zeros((keep, d));
    let mut accept_flags = Vec::with_capacity(keep);
    let mut delta_h = Vec::with_capacity(keep);
    let mut log_posterior = Vec::with_capacity(keep);
    let mut orders = Vec::new();
    let (mut proposals, mut accepted, mut divergences, mut evals) = (0, 0, 0, 0);
    let mut row = 0;

    for i in 0..config.num_samples {
        let t = hmc_step(&mut state, target, integrator, &config.trajectory, &mass, &mut rng)?;
        divergences += usize::from(t.diverged);
        evals += t.gradient_evaluations;
        if i < config.burn {
            continue;
        }
        proposals += 1;
        accepted += usize::from(t.accepted);
        if (i - config.burn).is_multiple_of(config.thin) {
            samples.row_mut(row).assign(&state.position);
            row += 1;
            accept_flags.push(t.accepted);
            delta_h.push(t.delta_h);
            log_posterior.push(-state.potential);
            if integrator.uses_permutation() {
                orders.push(t.orders);
            }
        }
    }
    debug_assert_eq!(row, keep);

    Ok(Chain {
        scheme: integrator.name().to_string(),
        chain_index,
        samples,
        log_posterior,
        mh: Some(MhTrace {
            accept_flags,
            delta_h,
            orders,
            proposals,
            accepted,
        }),
        divergences,
        gradient_evaluations: evals,
    })
}

/// Runs `config.num_chains` chains on up to `jobs` worker threads. Output
/// order and contents do not depend on `jobs`.
pub fn run_chains(
    target: &dyn ShardedPotential,
    registry: &IntegratorRegistry,
    config: &SamplerConfig,
    jobs: usize,
) -> Result<Vec<Chain>> {
    config.validate()?;
    let integrator: Arc<dyn Integrator> = registry.get(&config.trajectory.scheme)?;
    integrator.check_shards(target.num_shards())?;
    let jobs = jobs.clamp(1, config.num_chains);
    let mut results: Vec<Option<Result<Chain>>> = (0..config.num_chains).map(|_| None).collect();
    std::thread::scope(|scope| {
        let slots: Vec<_> = results.chunks_mut(config.num_chains.div_ceil(jobs)).collect();
        let mut start = 0;
        for slot in slots {
            let first = start;
            start += slot.len();
            let integrator = integrator.clone();
            scope.spawn(move || {
                for (k, out) in slot.iter_mut().enumerate() {
                    *out = Some(run_chain(target, integrator.as_ref(), config, first + k));
                }
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("every chain slot is filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrators::{FullLeapfrog, NaiveSplit, SymmetricSplit};
    use crate::targets::QuadraticTarget;

    #[test]
    fn equal_energy_always_accepts() {
        let mut rng = RngStream::new(1, 0);
        assert!((0..10_000).all(|_| mh_accept(3.2, 3.2, &mut rng)));
    }

    #[test]
    fn ln2_energy_error_accepts_half() {
        let mut rng = RngStream::new(2, 0);
        let n = 100_000;
        let acc = (0..n).filter(|_| mh_accept(0.0, 2f64.ln(), &mut rng)).count();
        let rate = acc as f64 / n as f64;
        assert!((rate - 0.5).abs() < 0.01, "{rate}");
    }

    #[test]
    fn divergent_energy_rejects() {
        let mut rng = RngStream::new(3, 0);
        assert!(!mh_accept(0.0, f64::INFINITY, &mut rng));
        assert!(!mh_accept(0.0, f64::NAN, &mut rng));
    }

    #[test]
    fn burn_in_is_discarded() {
        let target = QuadraticTarget::standard(3, 2).unwrap();
        let mut cfg = SamplerConfig::new(TrajectoryConfig::new("full", 5, 0.2), 1000, 4);
        cfg.burn = 200;
        let chain = run_chain(&target, &FullLeapfrog, &cfg, 0).unwrap();
        assert_eq!(chain.len(), 800);
        assert_eq!(chain.accept_flags().len(), 800);
        assert_eq!(chain.delta_h().len(), 800);
        assert_eq!(chain.log_posterior.len(), 800);
        assert_eq!(chain.mh.as_ref().unwrap().proposals, 800);

        cfg.thin = 3;
        let chain = run_chain(&target, &FullLeapfrog, &cfg, 0).unwrap();
        assert_eq!(chain.len(), 267);
        assert_eq!(chain.mh.as_ref().unwrap().proposals, 800);
    }

    #[test]
    fn config_validation() {
        let mut cfg = SamplerConfig::new(TrajectoryConfig::new("full", 5, 0.2), 10, 0);
        cfg.burn = 10;
        assert!(cfg.validate().is_err());
        cfg.burn = 0;
        cfg.thin = 0;
        assert!(cfg.validate().is_err());
        let cfg = SamplerConfig::new(TrajectoryConfig::new("full", 5, -1.0), 10, 0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn chains_are_deterministic() {
        let target = QuadraticTarget::standard(4, 2).unwrap();
        let mut cfg = SamplerConfig::new(TrajectoryConfig::new("randomised", 8, 0.3), 50, 9);
        cfg.num_chains = 3;
        let reg = IntegratorRegistry::builtin();
        let a = run_chains(&target, &reg, &cfg, 1).unwrap();
        let b = run_chains(&target, &reg, &cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].samples, a[1].samples);
        assert!(a.iter().all(|c| c.mh.as_ref().unwrap().orders.len() == 50));
    }

    #[test]
    fn rejection_repeats_previous_sample() {
        let target = QuadraticTarget::standard(2, 2).unwrap();
        // a large step size forces frequent rejections
        let cfg = SamplerConfig::new(TrajectoryConfig::new("symmetric", 3, 2.5), 300, 5);
        let chain = run_chain(&target, &SymmetricSplit, &cfg, 0).unwrap();
        let rejections = chain.accept_flags().iter().filter(|a| !**a).count();
        assert!(rejections > 10);
        for i in 1..chain.len() {
            if !chain.accept_flags()[i] {
                assert_eq!(chain.samples.row(i), chain.samples.row(i - 1));
                assert_eq!(chain.log_posterior[i], chain.log_posterior[i - 1]);
            }
        }
    }

    #[test]
    fn vanishing_step_always_accepts() {
        let target = QuadraticTarget::standard(3, 2).unwrap();
        let mut state = HmcState::new(ndarray::array![0.5, -1.0, 2.0], &target).unwrap();
        let mass = DiagonalMass::identity(3);
        let mut rng = RngStream::new(0, 0);
        let traj = TrajectoryConfig::new("full", 1, 1e-12);
        for _ in 0..100 {
            let t = hmc_step(&mut state, &target, &FullLeapfrog, &traj, &mass, &mut rng).unwrap();
            assert!(t.delta_h.abs() < 1e-8);
            assert!(t.accepted);
        }
    }

    #[test]
    fn mh_decision_uses_full_hamiltonian() {
        // full and naive trajectories agree to rounding, so with the same
        // seed every accept decision must agree too
        let target = QuadraticTarget::new(
            ndarray::array![0.0, 1.0],
            vec![
                ndarray::array![[2.0, 0.3], [0.3, 1.0]],
                ndarray::array![[0.5, -0.1], [-0.1, 3.0]],
            ],
        )
        .unwrap();
        let cfg = SamplerConfig::new(TrajectoryConfig::new("full", 10, 0.35), 400, 12);
        let full = run_chain(&target, &FullLeapfrog, &cfg, 0).unwrap();
        let naive = run_chain(&target, &NaiveSplit, &cfg, 0).unwrap();
        assert_eq!(full.accept_flags(), naive.accept_flags());
        assert!(full.accept_flags().iter().any(|a| !a));
        for (a, b) in full.samples.iter().zip(naive.samples.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn divergence_is_rejected_and_counted() {
        let target = QuadraticTarget::standard(2, 2).unwrap();
        // ε far beyond the leapfrog stability limit of 2
        let cfg = SamplerConfig::new(TrajectoryConfig::new("full", 50, 3.0), 20, 1);
        let chain = run_chain(&target, &FullLeapfrog, &cfg, 0).unwrap();
        assert!(chain.divergences > 0);
        for (acc, dh) in chain.accept_flags().iter().zip(chain.delta_h()) {
            if dh.is_infinite() {
                assert!(!acc);
            }
        }
    }
}
