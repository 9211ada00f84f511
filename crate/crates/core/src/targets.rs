//! Analytic Gaussian targets with known moments, used to validate the
//! integrators and samplers against exact answers.

use ndarray::{Array1, Array2, Axis};

use crate::error::{check_dim, Error, Result};
use crate::numeric::{ParamVector, RngStream};
use crate::potential::{check_shard, MinibatchTarget, ShardedPotential};

/// `U(ω) = Σ_m ½ (ω − μ)ᵀ A_m (ω − μ)`.
#[derive(Debug, Clone)]
pub struct QuadraticTarget {
    mean: Array1<f64>,
    shard_precisions: Vec<Array2<f64>>,
}

impl QuadraticTarget {
    pub fn new(mean: Array1<f64>, shard_precisions: Vec<Array2<f64>>) -> Result<Self> {
        if shard_precisions.is_empty() {
            return Err(Error::Empty("shard precisions"));
        }
        let d = mean.len();
        for a in &shard_precisions {
            if a.dim() != (d, d) {
                return Err(Error::DimensionMismatch {
                    context: "shard precision",
                    expected: d,
                    found: a.nrows(),
                });
            }
            if (a - &a.t()).iter().any(|v| v.abs() > 1e-12) {
                return Err(Error::InvalidData("shard precisions must be symmetric".into()));
            }
        }
        Ok(Self {
            mean,
            shard_precisions,
        })
    }

    /// Standard normal in `d` dimensions with the identity split evenly
    /// across `shards` pieces.
    pub fn standard(d: usize, shards: usize) -> Result<Self> {
        if shards == 0 {
            return Err(Error::InvalidConfig("need at least one shard".into()));
        }
        let a = Array2::eye(d) / shards as f64;
        Self::new(Array1::zeros(d), vec![a; shards])
    }

    /// Total precision `Σ_m A_m`.
    pub fn precision(&self) -> Array2<f64> {
        self.shard_precisions
            .iter()
            .fold(Array2::zeros((self.mean.len(), self.mean.len())), |acc, a| acc + a)
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }
}

impl ShardedPotential for QuadraticTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn num_shards(&self) -> usize {
        self.shard_precisions.len()
    }

    fn shard_potential(&self, shard: usize, omega: &ParamVector) -> Result<f64> {
        check_shard(self, shard)?;
        check_dim("quadratic target", self.dim(), omega.len())?;
        let r = omega - &self.mean;
        Ok(0.5 * r.dot(&self.shard_precisions[shard].dot(&r)))
    }

    fn shard_gradient(&self, shard: usize, omega: &ParamVector) -> Result<(f64, ParamVector)> {
        check_shard(self, shard)?;
        check_dim("quadratic target", self.dim(), omega.len())?;
        let r = omega - &self.mean;
        let g = self.shard_precisions[shard].dot(&r);
        Ok((0.5 * r.dot(&g), g))
    }
}

/// Location model: observations `y_n ~ N(ω, τ⁻¹ I)` with prior `N(0, σ² I)`,
/// split into equal shards of observations. The posterior is Gaussian with
/// precision `1/σ² + Nτ` and mean `τ Σ y_n / (1/σ² + Nτ)`.
#[derive(Debug, Clone)]
pub struct GaussianLocationModel {
    prior_std: f64,
    precision: f64,
    shards: Vec<Array2<f64>>,
    all: Array2<f64>,
}

impl GaussianLocationModel {
    pub fn new(prior_std: f64, precision: f64, shards: Vec<Array2<f64>>) -> Result<Self> {
        if !(prior_std > 0.0 && precision > 0.0) {
            return Err(Error::InvalidConfig("prior std and precision must be positive".into()));
        }
        let first = shards.first().ok_or(Error::Empty("observation shards"))?;
        if shards.iter().any(|s| s.dim() != first.dim()) {
            return Err(Error::InvalidData("observation shards must share a shape".into()));
        }
        let views: Vec<_> = shards.iter().map(|s| s.view()).collect();
        let all = ndarray::concatenate(Axis(0), &views).expect("same shapes");
        Ok(Self {
            prior_std,
            precision,
            shards,
            all,
        })
    }

    /// Data whose posterior is exactly `N(0, I_d)`: antithetic observation
    /// pairs `±v` (so the data mean is zero) with per-shard offsets, prior
    /// variance 2 and total likelihood precision `Nτ = ½`.
    pub fn standard_normal_posterior(
        d: usize,
        shards: usize,
        per_shard: usize,
        seed: u64,
    ) -> Result<Self> {
        if per_shard == 0 || !per_shard.is_multiple_of(2) || shards == 0 {
            return Err(Error::InvalidConfig(
                "need a positive, even number of observations per shard".into(),
            ));
        }
        let mut rng = RngStream::new(seed, 0);
        let n = shards * per_shard;
        // shard m's pairs are centred at c_m with Σ_m c_m = 0
        let centres: Vec<Array1<f64>> = {
            let mut c: Vec<Array1<f64>> = (0..shards)
                .map(|_| Array1::from_shape_fn(d, |_| 3.0 * rng.normal()))
                .collect();
            let mean = c.iter().fold(Array1::zeros(d), |a, v| a + v) / shards as f64;
            for v in &mut c {
                *v -= &mean;
            }
            c
        };
        let data = centres
            .iter()
            .map(|c| {
                let mut s = Array2::zeros((per_shard, d));
                for k in 0..per_shard / 2 {
                    let v = Array1::from_shape_fn(d, |_| rng.normal());
                    s.row_mut(2 * k).assign(&(c + &v));
                    s.row_mut(2 * k + 1).assign(&(c - &v));
                }
                s
            })
            .collect();
        Self::new(2f64.sqrt(), 0.5 / n as f64, data)
    }

    pub fn dim(&self) -> usize {
        self.all.ncols()
    }

    pub fn posterior_precision(&self) -> f64 {
        1.0 / (self.prior_std * self.prior_std) + self.all.nrows() as f64 * self.precision
    }

    pub fn posterior_mean(&self) -> Array1<f64> {
        self.all.sum_axis(Axis(0)) * (self.precision / self.posterior_precision())
    }

    fn log_prior(&self, omega: &ParamVector) -> f64 {
        let var = self.prior_std * self.prior_std;
        -0.5 * omega.len() as f64 * (std::f64::consts::TAU * var).ln() - omega.dot(omega) / (2.0 * var)
    }

    fn loglik(&self, rows: ndarray::ArrayView2<f64>, omega: &ParamVector) -> (f64, ParamVector) {
        let d = omega.len() as f64;
        let norm = 0.5 * d * (self.precision / std::f64::consts::TAU).ln();
        let mut ll = 0.0;
        let mut g = Array1::zeros(omega.len());
        for y in rows.outer_iter() {
            let r = &y - omega;
            ll += norm - 0.5 * self.precision * r.dot(&r);
            g.scaled_add(self.precision, &r);
        }
        (ll, g)
    }
}

impl ShardedPotential for GaussianLocationModel {
    fn dim(&self) -> usize {
        self.dim()
    }

    fn num_shards(&self) -> usize {
        self.shards.len()
    }

    fn shard_potential(&self, shard: usize, omega: &ParamVector) -> Result<f64> {
        Ok(self.shard_gradient(shard, omega)?.0)
    }

    fn shard_gradient(&self, shard: usize, omega: &ParamVector) -> Result<(f64, ParamVector)> {
        check_shard(self, shard)?;
        check_dim("location model", self.dim(), omega.len())?;
        let m = self.shards.len() as f64;
        let (ll, g_ll) = self.loglik(self.shards[shard].view(), omega);
        let var = self.prior_std * self.prior_std;
        let u = -self.log_prior(omega) / m - ll;
        let g = omega / (var * m) - g_ll;
        Ok((u, g))
    }
}

impl MinibatchTarget for GaussianLocationModel {
    fn dim(&self) -> usize {
        self.dim()
    }

    fn num_data(&self) -> usize {
        self.all.nrows()
    }

    fn log_prior_grad(&self, omega: &ParamVector) -> (f64, ParamVector) {
        let var = self.prior_std * self.prior_std;
        (self.log_prior(omega), omega / -var)
    }

    fn batch_log_likelihood_grad(&self, omega: &ParamVector, rows: &[usize]) -> Result<(f64, ParamVector)> {
        check_dim("location model", self.dim(), omega.len())?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.all.nrows()) {
            return Err(Error::IndexOutOfRange {
                what: "data row",
                index: bad,
                len: self.all.nrows(),
            });
        }
        Ok(self.loglik(self.all.select(Axis(0), rows).view(), omega))
    }

    fn log_posterior(&self, omega: &ParamVector) -> Result<f64> {
        ShardedPotential::log_posterior(self, omega)
    }
}
