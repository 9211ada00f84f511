//! Vector arithmetic shared by every sampler: the diagonal mass matrix,
//! kinetic energy, and seeded per-chain random streams.

use ndarray::Array1;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};

/// Flat model-parameter coordinates.
pub type ParamVector = Array1<f64>;

/// Conjugate momenta, always the same length as the paired [`ParamVector`].
pub type MomentumVector = Array1<f64>;

/// Diagonal of the mass matrix. Every entry is strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalMass {
    diag: Array1<f64>,
    inv: Array1<f64>,
}

impl DiagonalMass {
    pub fn new(diag: Array1<f64>) -> Result<Self> {
        if diag.is_empty() {
            return Err(Error::Empty("mass diagonal"));
        }
        if let Some(bad) = diag.iter().find(|m| !(m.is_finite() && **m > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "mass entries must be finite and positive, found {bad}"
            )));
        }
        let inv = diag.mapv(f64::recip);
        Ok(Self { diag, inv })
    }

    /// `scale * I` in `dim` dimensions.
    pub fn scalar(dim: usize, scale: f64) -> Result<Self> {
        Self::new(Array1::from_elem(dim, scale))
    }

    pub fn identity(dim: usize) -> Self {
        Self::scalar(dim, 1.0).expect("unit mass is valid")
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn diag(&self) -> &Array1<f64> {
        &self.diag
    }

    pub fn inverse(&self) -> &Array1<f64> {
        &self.inv
    }
}

/// `½ Σ p_i² / m_i`.
pub fn kinetic_energy(p: &MomentumVector, mass: &DiagonalMass) -> Result<f64> {
    check_dim("kinetic_energy", mass.dim(), p.len())?;
    Ok(0.5
        * p.iter()
            .zip(mass.inverse())
            .map(|(pi, inv)| pi * pi * inv)
            .sum::<f64>())
}

/// Velocity `M⁻¹ p`, the time derivative of the position.
pub fn kinetic_gradient(p: &MomentumVector, mass: &DiagonalMass) -> Result<ParamVector> {
    check_dim("kinetic_gradient", mass.dim(), p.len())?;
    Ok(p * mass.inverse())
}

/// Draws `p_i ~ Normal(0, m_i)` independently.
pub fn sample_momentum(mass: &DiagonalMass, rng: &mut RngStream) -> MomentumVector {
    mass.diag().mapv(|m| {
        let z: f64 = StandardNormal.sample(rng);
        m.sqrt() * z
    })
}

/// Seeded random stream. The same `(seed, stream_id)` always replays the
/// same draws; distinct stream ids select disjoint ChaCha streams.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        rand::Rng::random::<f64>(self)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
