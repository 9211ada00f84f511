//! Discrete Hamiltonian flows.
//!
//! Every scheme is a composition of two primitive maps: a *kick*
//! `p ← p − c·∇U_m(ω)` and a *drift* `ω ← ω + h·M⁻¹p`. Schemes implement
//! [`Integrator`] and are looked up by name in an [`IntegratorRegistry`]:
//!
//! | name         | one macro step of size ε                                          |
//! |--------------|-------------------------------------------------------------------|
//! | `full`       | kick(U, ε/2) · drift(ε) · kick(U, ε/2)                            |
//! | `naive`      | kick(U_1..U_M, ε/2) · drift(ε) · kick(U_M..U_1, ε/2)              |
//! | `randomised` | for m in π: kick(U_m, ε/2) · drift(ε/M) · kick(U_m, ε/2)          |
//! | `symmetric`  | palindrome over shards with 2(M−1) drifts of ε/(2(M−1))           |

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numeric::{kinetic_energy, DiagonalMass, MomentumVector, ParamVector, RngStream};
use crate::potential::{Force, ShardedPotential};

/// Position–momentum pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub position: ParamVector,
    pub momentum: MomentumVector,
}

impl PhaseState {
    pub fn new(position: ParamVector, momentum: MomentumVector) -> Result<Self> {
        check_dim("phase state", position.len(), momentum.len())?;
        Ok(Self { position, momentum })
    }

    pub fn dim(&self) -> usize {
        self.position.len()
    }

    pub fn negate_momentum(&mut self) {
        self.momentum.mapv_inplace(|p| -p);
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().chain(self.momentum.iter()).all(|v| v.is_finite())
    }

    /// `U(ω) + K(p)`.
    pub fn hamiltonian(&self, target: &dyn ShardedPotential, mass: &DiagonalMass) -> Result<f64> {
        Ok(target.full_potential(&self.position)? + kinetic_energy(&self.momentum, mass)?)
    }
}

/// Evaluates kicks and drifts, caching gradients until the position moves.
pub struct ForceField<'a> {
    target: &'a dyn ShardedPotential,
    cache: Vec<Option<ParamVector>>,
    shard_evaluations: usize,
    full_evaluations: usize,
}

impl fmt::Debug for ForceField<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ForceField")
            .field("shards", &self.target.num_shards())
            .field("shard_evaluations", &self.shard_evaluations)
            .field("full_evaluations", &self.full_evaluations)
            .finish()
    }
}

impl<'a> ForceField<'a> {
    pub fn new(target: &'a dyn ShardedPotential) -> Self {
        Self {
            target,
            cache: vec![None; target.num_shards() + 1],
            shard_evaluations: 0,
            full_evaluations: 0,
        }
    }

    pub fn target(&self) -> &'a dyn ShardedPotential {
        self.target
    }

    pub fn num_shards(&self) -> usize {
        self.target.num_shards()
    }

    pub fn shard_evaluations(&self) -> usize {
        self.shard_evaluations
    }

    pub fn full_evaluations(&self) -> usize {
        self.full_evaluations
    }

    /// `p ← p − coef·∇U_force(ω)`.
    pub fn kick(&mut self, state: &mut PhaseState, force: Force, coef: f64) -> Result<()> {
        let slot = match force {
            Force::Full => 0,
            Force::Shard(m) => {
                if m >= self.num_shards() {
                    return Err(Error::IndexOutOfRange {
                        what: "shard",
                        index: m,
                        len: self.num_shards(),
                    });
                }
                m + 1
            }
        };
        if self.cache[slot].is_none() {
            let (_, g) = match force {
                Force::Full => {
                    self.full_evaluations += 1;
                    self.target.full_gradient(&state.position)?
                }
                Force::Shard(m) => {
                    self.shard_evaluations += 1;
                    self.target.shard_gradient(m, &state.position)?
                }
            };
            self.cache[slot] = Some(g);
        }
        let g = self.cache[slot].as_ref().expect("filled above");
        state.momentum.scaled_add(-coef, g);
        Ok(())
    }

    /// `ω ← ω + h·M⁻¹p`; invalidates every cached gradient.
    pub fn drift(&mut self, state: &mut PhaseState, mass: &DiagonalMass, h: f64) {
        ndarray::Zip::from(&mut state.position)
            .and(&state.momentum)
            .and(mass.inverse())
            .for_each(|w, &p, &inv| *w += h * p * inv);
        self.invalidate();
    }

    pub fn invalidate(&mut self) {
        self.cache.iter_mut().for_each(|c| *c = None);
    }
}

/// One interchangeable discretisation of the Hamiltonian flow.
pub trait Integrator: Send + Sync + fmt::Debug {
    /// Registry key.
    fn name(&self) -> &'static str;

    /// Rejects shard counts the scheme cannot use.
    fn check_shards(&self, num_shards: usize) -> Result<()> {
        if num_shards == 0 {
            return Err(Error::InvalidConfig("at least one shard required".into()));
        }
        Ok(())
    }

    /// Whether [`step`](Self::step) reads `order`.
    fn uses_permutation(&self) -> bool {
        false
    }

    /// Advances `state` by one macro step. `order` is a permutation of the
    /// shard indices; schemes that do not randomise ignore it.
    fn step(
        &self,
        state: &mut PhaseState,
        step_size: f64,
        forces: &mut ForceField<'_>,
        mass: &DiagonalMass,
        order: &[usize],
    ) -> Result<()>;
}

/// Standard leapfrog on the full potential.
#[derive(Debug, Clone, Copy, Default)]
pub struct FullLeapfrog;

impl Integrator for FullLeapfrog {
    fn name(&self) -> &'static str {
        "full"
    }

    fn step(
        &self,
        state: &mut PhaseState,
        eps: f64,
        forces: &mut ForceField<'_>,
        mass: &DiagonalMass,
        _order: &[usize],
    ) -> Result<()> {
        forces.kick(state, Force::Full, eps / 2.0)?;
        forces.drift(state, mass, eps);
        forces.kick(state, Force::Full, eps / 2.0)
    }
}

/// Leapfrog with the gradient accumulated shard by shard.
#[derive(Debug, Clone, Copy, Default)]
pub struct NaiveSplit;

impl Integrator for NaiveSplit {
    fn name(&self) -> &'static str {
        "naive"
    }

    fn step(
        &self,
        state: &mut PhaseState,
        eps: f64,
        forces: &mut ForceField<'_>,
        mass: &DiagonalMass,
        _order: &[usize],
    ) -> Result<()> {
        let m = forces.num_shards();
        for k in 0..m {
            forces.kick(state, Force::Shard(k), eps / 2.0)?;
        }
        forces.drift(state, mass, eps);
        for k in (0..m).rev() {
            forces.kick(state, Force::Shard(k), eps / 2.0)?;
        }
        Ok(())
    }
}

/// Per-shard kick–drift–kick blocks in a caller-supplied order.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomisedSplit;

impl Integrator for RandomisedSplit {
    fn name(&self) -> &'static str {
        "randomised"
    }

    fn uses_permutation(&self) -> bool {
        true
    }

    fn step(
        &self,
        state: &mut PhaseState,
        eps: f64,
        forces: &mut ForceField<'_>,
        mass: &DiagonalMass,
        order: &[usize],
    ) -> Result<()> {
        let m = forces.num_shards();
        check_permutation(order, m)?;
        let h = eps / m as f64;
        for &k in order {
            forces.kick(state, Force::Shard(k), eps / 2.0)?;
            forces.drift(state, mass, h);
            forces.kick(state, Force::Shard(k), eps / 2.0)?;
        }
        Ok(())
    }
}

/// Palindromic split: shards kicked in ascending then descending order with
/// `D = 2(M − 1)` drifts of `ε/D` between consecutive distinct kicks.
///
/// The two kicks of the last shard sit at the same position, so the second
/// reuses the cached gradient.
#[derive(Debug, Clone, Copy, Default)]
pub struct SymmetricSplit;

impl Integrator for SymmetricSplit {
    fn name(&self) -> &'static str {
        "symmetric"
    }

    fn check_shards(&self, num_shards: usize) -> Result<()> {
        if num_shards < 2 {
            return Err(Error::InvalidConfig(format!(
                "symmetric split needs at least 2 shards (got {num_shards}); \
                 use \"full\" or \"naive\" for unsplit data"
            )));
        }
        Ok(())
    }

    fn step(
        &self,
        state: &mut PhaseState,
        eps: f64,
        forces: &mut ForceField<'_>,
        mass: &DiagonalMass,
        _order: &[usize],
    ) -> Result<()> {
        let m = forces.num_shards();
        self.check_shards(m)?;
        let h = eps / (2 * (m - 1)) as f64;
        for k in 0..m {
            forces.kick(state, Force::Shard(k), eps / 2.0)?;
            if k + 1 < m {
                forces.drift(state, mass, h);
            }
        }
        for k in (0..m).rev() {
            forces.kick(state, Force::Shard(k), eps / 2.0)?;
            if k > 0 {
                forces.drift(state, mass, h);
            }
        }
        Ok(())
    }
}

fn check_permutation(order: &[usize], m: usize) -> Result<()> {
    let mut seen = vec![false; m];
    let valid = order.len() == m
        && order.iter().all(|&k| {
            let fresh = k < m && !seen[k];
            if fresh {
                seen[k] = true;
            }
            fresh
        });
    if valid {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "{order:?} is not a permutation of 0..{m}"
        )))
    }
}

/// Name → scheme lookup.
#[derive(Debug, Clone, Default)]
pub struct IntegratorRegistry {
    entries: BTreeMap<&'static str, Arc<dyn Integrator>>,
}

impl IntegratorRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The four built-in schemes.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(FullLeapfrog));
        r.register(Arc::new(NaiveSplit));
        r.register(Arc::new(RandomisedSplit));
        r.register(Arc::new(SymmetricSplit));
        r
    }

    /// Adds or replaces the scheme under its own name.
    pub fn register(&mut self, integrator: Arc<dyn Integrator>) {
        self.entries.insert(integrator.name(), integrator);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Integrator>> {
        self.entries.get(name).cloned().ok_or_else(|| {
            Error::InvalidConfig(format!(
                "unknown scheme {name:?}; expected one of {:?}",
                self.names()
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

/// When randomised schemes draw a fresh shard order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationPolicy {
    /// One order per proposal, reused for all L steps.
    #[default]
    PerTrajectory,
    /// A fresh order before every macro step.
    PerStep,
}

/// `|ΔH|` beyond which a trajectory is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    /// Number of macro steps L.
    pub steps: usize,
    /// Macro step size ε.
    pub step_size: f64,
    /// Registry name of the scheme.
    pub scheme: String,
    #[serde(default)]
    pub permutation_policy: PermutationPolicy,
    /// Record `H_t − H_0` after every step (costs one potential evaluation per step).
    #[serde(default)]
    pub record_energy: bool,
}

impl TrajectoryConfig {
    pub fn new(scheme: &str, steps: usize, step_size: f64) -> Self {
        Self {
            steps,
            step_size,
            scheme: scheme.to_string(),
            permutation_policy: PermutationPolicy::default(),
            record_energy: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

/// Result of integrating one trajectory.
#[derive(Debug, Clone)]
pub struct TrajectoryOutcome {
    pub state: PhaseState,
    /// Shard orders drawn: one per trajectory or one per step, per policy.
    /// Empty for schemes that do not randomise.
    pub orders: Vec<Vec<usize>>,
    pub policy: PermutationPolicy,
    pub steps_completed: usize,
    /// Set when the trajectory stopped early.
    pub divergence: Option<String>,
    /// `H_t − H_0` after each step, when requested.
    pub energy_errors: Option<Vec<f64>>,
    pub shard_evaluations: usize,
    pub full_evaluations: usize,
}

impl TrajectoryOutcome {
    /// Order used at every completed step.
    pub fn step_orders(&self) -> Vec<Vec<usize>> {
        match self.policy {
            _ if self.orders.is_empty() => Vec::new(),
            PermutationPolicy::PerTrajectory => vec![self.orders[0].clone(); self.steps_completed],
            PermutationPolicy::PerStep => self.orders.clone(),
        }
    }
}

/// Step orders that undo a trajectory once its momentum is negated: steps
/// replayed last-to-first, each with its shard order reversed.
pub fn reversed_orders(step_orders: &[Vec<usize>]) -> Vec<Vec<usize>> {
    step_orders
        .iter()
        .rev()
        .map(|o| o.iter().rev().copied().collect())
        .collect()
}

fn draw_order(m: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    order
}

enum Orders<'r> {
    Draw(&'r mut RngStream),
    Given(&'r [Vec<usize>]),
}

fn integrate(
    mut state: PhaseState,
    config: &TrajectoryConfig,
    integrator: &dyn Integrator,
    target: &dyn ShardedPotential,
    mass: &DiagonalMass,
    mut orders: Orders<'_>,
) -> Result<TrajectoryOutcome> {
    config.validate()?;
    let m = target.num_shards();
    integrator.check_shards(m)?;
    check_dim("phase state", target.dim(), state.dim())?;
    check_dim("mass", target.dim(), mass.dim())?;

    let mut forces = ForceField::new(target);
    let h0 = if config.record_energy {
        Some(state.hamiltonian(target, mass)?)
    } else {
        None
    };
    let mut energy = h0.map(|_| Vec::with_capacity(config.steps));
    let mut drawn = Vec::new();
    let mut current: Vec<usize> = (0..m).collect();
    let randomise = integrator.uses_permutation();
    if let (true, Orders::Given(given)) = (randomise, &orders) {
        if given.len() != config.steps {
            return Err(Error::InvalidConfig(format!(
                "{} shard orders supplied for {} steps",
                given.len(),
                config.steps
            )));
        }
    }
    if randomise && config.permutation_policy == PermutationPolicy::PerTrajectory {
        if let Orders::Draw(rng) = &mut orders {
            current = draw_order(m, rng);
            drawn.push(current.clone());
        }
    }

    let mut divergence = None;
    let mut completed = 0;
    for step in 0..config.steps {
        if randomise {
            match &mut orders {
                Orders::Draw(rng) if config.permutation_policy == PermutationPolicy::PerStep => {
                    current = draw_order(m, rng);
                    drawn.push(current.clone());
                }
                Orders::Given(given) => current = given[step].clone(),
                Orders::Draw(_) => {}
            }
        }
        integrator.step(&mut state, config.step_size, &mut forces, mass, &current)?;
        if !state.is_finite() {
            divergence = Some(format!("non-finite phase state after step {}", step + 1));
            break;
        }
        completed += 1;
        if let (Some(h0), Some(errs)) = (h0, energy.as_mut()) {
            let dh = state.hamiltonian(target, mass)? - h0;
            errs.push(dh);
            if !dh.is_finite() || dh.abs() > DIVERGENCE_THRESHOLD {
                divergence = Some(format!("|ΔH| = {} after step {}", dh.abs(), step + 1));
                break;
            }
        }
    }

    let replayed = matches!(orders, Orders::Given(_));
    let orders = match orders {
        Orders::Draw(_) => drawn,
        Orders::Given(given) if randomise => given[..completed].to_vec(),
        Orders::Given(_) => Vec::new(),
    };
    Ok(TrajectoryOutcome {
        state,
        orders,
        policy: if replayed {
            PermutationPolicy::PerStep
        } else {
            config.permutation_policy
        },
        steps_completed: completed,
        divergence,
        energy_errors: energy,
        shard_evaluations: forces.shard_evaluations(),
        full_evaluations: forces.full_evaluations(),
    })
}

/// Applies `config.steps` macro steps of the configured scheme. Randomised
/// schemes draw shard orders from `rng`; others leave it untouched.
pub fn run_trajectory(
    state: PhaseState,
    config: &TrajectoryConfig,
    integrator: &dyn Integrator,
    target: &dyn ShardedPotential,
    mass: &DiagonalMass,
    rng: &mut RngStream,
) -> Result<TrajectoryOutcome> {
    integrate(state, config, integrator, target, mass, Orders::Draw(rng))
}

/// Like [`run_trajectory`] but with an explicit shard order for each step,
/// e.g. from [`reversed_orders`].
pub fn replay_trajectory(
    state: PhaseState,
    config: &TrajectoryConfig,
    integrator: &dyn Integrator,
    target: &dyn ShardedPotential,
    mass: &DiagonalMass,
    step_orders: &[Vec<usize>],
) -> Result<TrajectoryOutcome> {
    integrate(state, config, integrator, target, mass, Orders::Given(step_orders))
}

fn single_step(
    integrator: &dyn Integrator,
    state: &PhaseState,
    step_size: f64,
    target: &dyn ShardedPotential,
    mass: &DiagonalMass,
    order: &[usize],
) -> Result<PhaseState> {
    if !(step_size.is_finite() && step_size > 0.0) {
        return Err(Error::InvalidConfig(format!("step size must be positive, got {step_size}")));
    }
    integrator.check_shards(target.num_shards())?;
    let mut next = state.clone();
    let mut forces = ForceField::new(target);
    integrator.step(&mut next, step_size, &mut forces, mass, order)?;
    if !next.is_finite() {
        return Err(Error::Divergence {
            step: 1,
            reason: "non-finite phase state".into(),
        });
    }
    Ok(next)
}

/// One full-gradient leapfrog step.
pub fn leapfrog_step(
    state: &PhaseState,
    step_size: f64,
    target: &dyn ShardedPotential,
    mass: &DiagonalMass,
) -> Result<PhaseState> {
    single_step(&FullLeapfrog, state, step_size, target, mass, &[])
}

/// One naive split step.
pub fn naive_split_step(
    state: &PhaseState,
    step_size: f64,
    target: &dyn ShardedPotential,
    mass: &DiagonalMass,
) -> Result<PhaseState> {
    single_step(&NaiveSplit, state, step_size, target, mass, &[])
}

/// One randomised split step with shard order `order`.
pub fn randomised_split_step(
    state: &PhaseState,
    step_size: f64,
    target: &dyn ShardedPotential,
    mass: &DiagonalMass,
    order: &[usize],
) -> Result<PhaseState> {
    single_step(&RandomisedSplit, state, step_size, target, mass, order)
}

/// One symmetric split step.
pub fn symmetric_split_step(
    state: &PhaseState,
    step_size: f64,
    target: &dyn ShardedPotential,
    mass: &DiagonalMass,
) -> Result<PhaseState> {
    single_step(&SymmetricSplit, state, step_size, target, mass, &[])
}
