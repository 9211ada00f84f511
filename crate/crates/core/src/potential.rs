//! Potential energies `U(ω) = −log p(Y|X,ω) − log p(ω)` and their
//! per-shard pieces `U_m(ω) = −log p(ω)/M − ℓ_m(ω)`.
//!
//! Gradients returned here are `∇U` (not `∇ log posterior`); integrators
//! kick with `p ← p − c·∇U`.

use ndarray::Array1;

use crate::datasets::{Dataset, ShardedDataset};
use crate::error::{check_dim, Error, Result};
use crate::model::BayesianMlp;
use crate::numeric::ParamVector;

/// Which part of the potential a kick uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Force {
    Full,
    /// Zero-based shard index.
    Shard(usize),
}

/// A potential that decomposes into `num_shards` additive pieces.
pub trait ShardedPotential: Send + Sync {
    fn dim(&self) -> usize;

    fn num_shards(&self) -> usize;

    fn shard_potential(&self, shard: usize, omega: &ParamVector) -> Result<f64>;

    /// `(U_m(ω), ∇U_m(ω))`.
    fn shard_gradient(&self, shard: usize, omega: &ParamVector) -> Result<(f64, ParamVector)>;

    /// Streams over shards so only one shard is resident at a time.
    fn full_potential(&self, omega: &ParamVector) -> Result<f64> {
        (0..self.num_shards()).try_fold(0.0, |acc, m| Ok(acc + self.shard_potential(m, omega)?))
    }

    fn full_gradient(&self, omega: &ParamVector) -> Result<(f64, ParamVector)> {
        let mut total = 0.0;
        let mut grad = Array1::zeros(self.dim());
        for m in 0..self.num_shards() {
            let (u, g) = self.shard_gradient(m, omega)?;
            total += u;
            grad += &g;
        }
        Ok((total, grad))
    }

    /// Unnormalised log posterior `−U(ω)`.
    fn log_posterior(&self, omega: &ParamVector) -> Result<f64> {
        Ok(-self.full_potential(omega)?)
    }
}

pub(crate) fn check_shard(target: &(impl ShardedPotential + ?Sized), m: usize) -> Result<()> {
    if m < target.num_shards() {
        Ok(())
    } else {
        Err(Error::IndexOutOfRange {
            what: "shard",
            index: m,
            len: target.num_shards(),
        })
    }
}

pub fn potential(target: &dyn ShardedPotential, force: Force, omega: &ParamVector) -> Result<f64> {
    match force {
        Force::Full => target.full_potential(omega),
        Force::Shard(m) => {
            check_shard(target, m)?;
            target.shard_potential(m, omega)
        }
    }
}

/// `∇U` of the selected piece.
pub fn potential_gradient(
    target: &dyn ShardedPotential,
    force: Force,
    omega: &ParamVector,
) -> Result<ParamVector> {
    check_dim("potential gradient", target.dim(), omega.len())?;
    Ok(match force {
        Force::Full => target.full_gradient(omega)?.1,
        Force::Shard(m) => {
            check_shard(target, m)?;
            target.shard_gradient(m, omega)?.1
        }
    })
}

/// Likelihood gradients over arbitrary row subsets, for minibatch methods.
pub trait MinibatchTarget: Send + Sync {
    fn dim(&self) -> usize;

    fn num_data(&self) -> usize;

    /// `(log p(ω), ∇ log p(ω))`.
    fn log_prior_grad(&self, omega: &ParamVector) -> (f64, ParamVector);

    /// `(Σ_i log p(y_i|x_i,ω), ∇ of the same)` over `rows`.
    fn batch_log_likelihood_grad(&self, omega: &ParamVector, rows: &[usize]) -> Result<(f64, ParamVector)>;

    fn log_posterior(&self, omega: &ParamVector) -> Result<f64>;
}

/// A Bayesian MLP conditioned on sharded training data.
#[derive(Debug, Clone)]
pub struct MlpPosterior {
    model: BayesianMlp,
    sharded: ShardedDataset,
    full: Dataset,
}

impl MlpPosterior {
    pub fn new(model: BayesianMlp, sharded: ShardedDataset) -> Result<Self> {
        let sizes: Vec<usize> = sharded.shards().iter().map(Dataset::len).collect();
        if sizes.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::InvalidData(format!(
                "shards must have equal sizes, got {sizes:?}"
            )));
        }
        for s in sharded.shards() {
            check_dim("shard features", model.arch.input_dim(), s.input_dim())?;
        }
        let full = sharded.union()?;
        Ok(Self {
            model,
            sharded,
            full,
        })
    }

    pub fn model(&self) -> &BayesianMlp {
        &self.model
    }

    pub fn sharded(&self) -> &ShardedDataset {
        &self.sharded
    }

    /// All training rows, shards stacked in order.
    pub fn data(&self) -> &Dataset {
        &self.full
    }

    pub fn dim(&self) -> usize {
        self.model.num_params()
    }

    fn m(&self) -> f64 {
        self.sharded.num_shards() as f64
    }
}

impl ShardedPotential for MlpPosterior {
    fn dim(&self) -> usize {
        self.dim()
    }

    fn num_shards(&self) -> usize {
        self.sharded.num_shards()
    }

    fn shard_potential(&self, shard: usize, omega: &ParamVector) -> Result<f64> {
        let data = self.sharded.shard(shard)?;
        let prior = -self.model.log_prior(omega) / self.m();
        if data.is_empty() {
            check_dim("parameter vector", self.dim(), omega.len())?;
            return Ok(prior);
        }
        Ok(prior - self.model.log_likelihood(omega, data)?)
    }

    fn shard_gradient(&self, shard: usize, omega: &ParamVector) -> Result<(f64, ParamVector)> {
        let data = self.sharded.shard(shard)?;
        check_dim("parameter vector", self.dim(), omega.len())?;
        let scale = 1.0 / self.m();
        let u_prior = -self.model.log_prior(omega) * scale;
        let g_prior = omega * (self.model.prior.precision() * scale);
        if data.is_empty() {
            return Ok((u_prior, g_prior));
        }
        let (ll, g_ll) = self.model.log_likelihood_grad(omega, data)?;
        Ok((u_prior - ll, g_prior - g_ll))
    }

    /// One batched pass over all rows.
    fn full_gradient(&self, omega: &ParamVector) -> Result<(f64, ParamVector)> {
        check_dim("parameter vector", self.dim(), omega.len())?;
        let u_prior = -self.model.log_prior(omega);
        let g_prior = omega * self.model.prior.precision();
        if self.full.is_empty() {
            return Ok((u_prior, g_prior));
        }
        let (ll, g_ll) = self.model.log_likelihood_grad(omega, &self.full)?;
        Ok((u_prior - ll, g_prior - g_ll))
    }
}

impl MinibatchTarget for MlpPosterior {
    fn dim(&self) -> usize {
        self.dim()
    }

    fn num_data(&self) -> usize {
        self.full.len()
    }

    fn log_prior_grad(&self, omega: &ParamVector) -> (f64, ParamVector) {
        (self.model.log_prior(omega), self.model.log_prior_grad(omega))
    }

    fn batch_log_likelihood_grad(&self, omega: &ParamVector, rows: &[usize]) -> Result<(f64, ParamVector)> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.full.len()) {
            return Err(Error::IndexOutOfRange {
                what: "data row",
                index: bad,
                len: self.full.len(),
            });
        }
        self.model.log_likelihood_grad(omega, &self.full.select(rows))
    }

    fn log_posterior(&self, omega: &ParamVector) -> Result<f64> {
        ShardedPotential::log_posterior(self, omega)
    }
}
