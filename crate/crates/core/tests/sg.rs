use ndarray::{array, Array1};
use split_hmc::autodiff::Activation;
use split_hmc::datasets::{gen_regression_1d, shard, RegressionSpec, ShardPolicy};
use split_hmc::model::{BayesianMlp, LikelihoodSpec, MlpArchitecture, PriorSpec};
use split_hmc::numeric::{ParamVector, RngStream};
use split_hmc::potential::{MinibatchTarget, MlpPosterior};
use split_hmc::sg::{
    sghmc_chain, sgd_train, sgld_chain, stochastic_log_posterior_grad, BaselineRegistry, MiniBatchStream,
    Retention, SgConfig,
};
use split_hmc::targets::GaussianLocationModel;
use split_hmc::Result;

/// `N` copies of a likelihood `−½(ω−c)²` with no prior, so that
/// `−(1/N) log p = ½(ω−c)²`.
struct Shifted {
    centre: f64,
    n: usize,
}

impl MinibatchTarget for Shifted {
    fn dim(&self) -> usize {
        1
    }

    fn num_data(&self) -> usize {
        self.n
    }

    fn log_prior_grad(&self, omega: &ParamVector) -> (f64, ParamVector) {
        (0.0, ParamVector::zeros(omega.len()))
    }

    fn batch_log_likelihood_grad(&self, omega: &ParamVector, rows: &[usize]) -> Result<(f64, ParamVector)> {
        let r = omega[0] - self.centre;
        let k = rows.len() as f64;
        Ok((-0.5 * k * r * r, array![-k * r]))
    }

    fn log_posterior(&self, omega: &ParamVector) -> Result<f64> {
        Ok(-0.5 * self.n as f64 * (omega[0] - self.centre).powi(2))
    }
}

/// Prior-only target with a flat, zero gradient.
struct Flat;

impl MinibatchTarget for Flat {
    fn dim(&self) -> usize {
        1
    }

    fn num_data(&self) -> usize {
        0
    }

    fn log_prior_grad(&self, omega: &ParamVector) -> (f64, ParamVector) {
        (0.0, ParamVector::zeros(omega.len()))
    }

    fn batch_log_likelihood_grad(&self, omega: &ParamVector, _rows: &[usize]) -> Result<(f64, ParamVector)> {
        Ok((0.0, ParamVector::zeros(omega.len())))
    }

    fn log_posterior(&self, _omega: &ParamVector) -> Result<f64> {
        Ok(0.0)
    }
}

fn mlp_target(n: usize) -> MlpPosterior {
    let spec = RegressionSpec {
        num_points: n,
        ..RegressionSpec::default()
    };
    let data = gen_regression_1d(&spec, 11).unwrap().to_dataset();
    let arch = MlpArchitecture::new(vec![1, 6, 1], Activation::Tanh).unwrap();
    let model = BayesianMlp::new(
        arch,
        PriorSpec::new(1.0).unwrap(),
        LikelihoodSpec::Gaussian { precision: 25.0 },
    )
    .unwrap();
    MlpPosterior::new(model, shard(&data, 1, ShardPolicy::Contiguous).unwrap()).unwrap()
}

fn full_grad(target: &dyn MinibatchTarget, omega: &ParamVector) -> ParamVector {
    let rows: Vec<usize> = (0..target.num_data()).collect();
    stochastic_log_posterior_grad(target, omega, &rows).unwrap()
}

#[test]
fn epoch_average_of_minibatch_gradients_is_exact() {
    let target = mlp_target(48);
    let mut rng = RngStream::new(4, 0);
    let omega = ParamVector::from_shape_fn(target.dim(), |_| rng.normal());
    let exact = full_grad(&target, &omega);
    let mut stream = MiniBatchStream::new(48, 12).unwrap();
    let batches = stream.epoch(&mut rng);
    assert_eq!(batches.len(), 4);
    let mut avg = ParamVector::zeros(target.dim());
    for b in &batches {
        avg += &stochastic_log_posterior_grad(&target, &omega, b).unwrap();
    }
    avg /= batches.len() as f64;
    let err = (&avg - &exact).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    assert!(err < 1e-10 * exact.mapv(f64::abs).sum().max(1.0), "{err}");
}

#[test]
fn ragged_epoch_is_exact_when_weighted_by_batch_size() {
    let target = mlp_target(50);
    let mut rng = RngStream::new(5, 0);
    let omega = ParamVector::from_shape_fn(target.dim(), |_| rng.normal());
    let exact = full_grad(&target, &omega);
    let batches = MiniBatchStream::new(50, 16).unwrap().epoch(&mut rng);
    assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![16, 16, 16, 2]);
    let mut avg = ParamVector::zeros(target.dim());
    for b in &batches {
        avg.scaled_add(b.len() as f64 / 50.0, &stochastic_log_posterior_grad(&target, &omega, b).unwrap());
    }
    let err = (&avg - &exact).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    assert!(err < 1e-10 * exact.mapv(f64::abs).sum().max(1.0), "{err}");
}

#[test]
fn sgd_single_step_on_quadratic() {
    // ω₀ = 0 and centre 1 is the loss ½u² started at u₀ = −1
    let target = Shifted { centre: 1.0, n: 4 };
    let mut cfg = SgConfig::new(0.1, 4, 1, 0);
    cfg.init_std = 0.0;
    let w = sgd_train(&target, &cfg, 0).unwrap();
    assert!((w[0] - 1.0 - (-(1.0 - 0.1))).abs() < 1e-15, "{}", w[0]);
}

#[test]
fn sgd_weight_decay_adds_l2_gradient() {
    let target = Flat;
    let mut cfg = SgConfig::new(0.1, 1, 1, 0);
    cfg.weight_decay = 0.5;
    cfg.init_std = 1.0;
    let w0 = RngStream::new(0, 0).normal();
    let w = sgd_train(&target, &cfg, 0).unwrap();
    assert!((w[0] - w0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
}

#[test]
fn sgd_reaches_gaussian_mode() {
    let target = GaussianLocationModel::new(
        2.0,
        1.5,
        vec![array![[0.3], [1.1], [-0.4]], array![[2.0], [0.7], [0.9]]],
    )
    .unwrap();
    // mode of N(0, σ²) prior times Gaussian likelihood with precision τ
    let (tau, var, sum, n) = (1.5, 4.0, 0.3 + 1.1 - 0.4 + 2.0 + 0.7 + 0.9, 6.0);
    let mode = tau * sum / (1.0 / var + n * tau);
    let mut cfg = SgConfig::new(0.05, 2, 400, 3);
    cfg.momentum = 0.9;
    cfg.lr_schedule = split_hmc::sg::LrSchedule::PolynomialDecay { gamma: 0.6 };
    let w = sgd_train(&target, &cfg, 0).unwrap();
    assert!((w[0] - mode).abs() < 1e-3, "{} vs {mode}", w[0]);
}

#[test]
fn runs_are_bitwise_reproducible() {
    let target = mlp_target(40);
    let reg = BaselineRegistry::builtin();
    let mut cfg = SgConfig::new(1e-3, 8, 5, 21);
    cfg.friction = 0.1;
    cfg.momentum = 0.5;
    for name in reg.names() {
        let b = reg.get(name).unwrap();
        let x = b.run(&target, &cfg, 2).unwrap();
        let y = b.run(&target, &cfg, 2).unwrap();
        assert_eq!(x, y, "{name}");
        assert!(x.mh.is_none(), "{name} must not carry accept metadata");
        let z = b.run(&target, &cfg, 3).unwrap();
        assert_ne!(x.samples, z.samples, "{name}");
    }
}

#[test]
fn retention_units() {
    let target = mlp_target(40);
    let mut cfg = SgConfig::new(1e-3, 16, 6, 1);
    cfg.burn = 2;
    let every = sgld_chain(&target, &cfg, 0).unwrap();
    assert_eq!(every.len(), 4 * 3);
    assert_eq!(every.gradient_evaluations, 6 * 3);
    cfg.retention = Retention::EpochEnd;
    cfg.friction = 0.01;
    let ends = sghmc_chain(&target, &cfg, 0).unwrap();
    assert_eq!(ends.len(), 4);
    assert_eq!(ends.log_posterior.len(), 4);
    cfg.burn = 6;
    assert!(sgld_chain(&target, &cfg, 0).is_err());
}

#[test]
fn sgd_is_a_single_point_chain() {
    let target = mlp_target(40);
    let cfg = SgConfig::new(1e-2, 16, 3, 1);
    let chain = BaselineRegistry::builtin().get("sgd").unwrap().run(&target, &cfg, 0).unwrap();
    assert_eq!(chain.len(), 1);
    assert_eq!(chain.samples.row(0), sgd_train(&target, &cfg, 0).unwrap());
}

#[test]
fn divergence_aborts() {
    let target = Shifted { centre: 0.0, n: 1 };
    let mut cfg = SgConfig::new(5.0, 1, 2000, 0);
    cfg.init_std = 1.0;
    let err = sgld_chain(&target, &cfg, 0).unwrap_err();
    assert!(matches!(err, split_hmc::Error::Divergence { .. }), "{err}");
}

/// Pooled mean and variance of the retained draws of `chains` chains.
fn pooled_moments(chains: usize, run: impl Fn(usize) -> Array1<f64>) -> (f64, f64) {
    let (mut s1, mut s2, mut n) = (0.0, 0.0, 0.0);
    for c in 0..chains {
        let x = run(c);
        s1 += x.sum();
        s2 += x.dot(&x);
        n += x.len() as f64;
    }
    let mean = s1 / n;
    (mean, s2 / n - mean * mean)
}

fn standard_gaussian() -> GaussianLocationModel {
    GaussianLocationModel::standard_normal_posterior(1, 1, 2, 0).unwrap()
}

const SGLD_CHAINS: usize = 400;

#[test]
fn sgld_recovers_standard_gaussian() {
    // one chain of 2e5 steps at η = 1e-3 has an effective size near 50, so
    // the moments are pooled over independent chains
    let target = standard_gaussian();
    let mut cfg = SgConfig::new(1e-3, 2, 200_000, 8);
    cfg.burn = 10_000;
    cfg.init_std = 1.0;
    let (mean, var) = pooled_moments(SGLD_CHAINS, |c| sgld_chain(&target, &cfg, c).unwrap().samples.column(0).to_owned());
    assert!(mean.abs() < 0.02, "mean {mean}");
    assert!((var - 1.0).abs() < 0.10, "var {var}");
}

#[test]
fn sghmc_recovers_standard_gaussian() {
    let target = standard_gaussian();
    let mut cfg = SgConfig::new(1e-4, 2, 500_000, 9);
    cfg.friction = 0.01;
    cfg.burn = 20_000;
    cfg.init_std = 1.0;
    let (_, var) = pooled_moments(4, |c| sghmc_chain(&target, &cfg, c).unwrap().samples.column(0).to_owned());
    assert!((var - 1.0).abs() < 0.15, "var {var}");
}

#[test]
fn prior_only_sgld_matches_prior() {
    // σ = √2 prior and no data
    let target = GaussianLocationModel::new(2f64.sqrt(), 1.0, vec![ndarray::Array2::zeros((0, 1))]).unwrap();
    let mut cfg = SgConfig::new(5e-3, 8, 100_000, 2);
    cfg.burn = 2000;
    let (mean, var) = pooled_moments(8, |c| sgld_chain(&target, &cfg, c).unwrap().samples.column(0).to_owned());
    // 8 chains with effective size about 350 each
    assert!(mean.abs() < 4.0 * (2.0f64 / 2800.0).sqrt(), "mean {mean}");
    assert!((var / 2.0 - 1.0).abs() < 0.12, "var {var}");
}

#[test]
fn full_friction_forgets_velocity() {
    let increments = |alpha: f64| {
        let mut cfg = SgConfig::new(1e-2, 1, 20_000, 6);
        cfg.friction = alpha;
        let x = sghmc_chain(&Flat, &cfg, 0).unwrap().samples.column(0).to_owned();
        let d: Vec<f64> = x.windows(2).into_iter().map(|w| w[1] - w[0]).collect();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d.len() as f64;
        let lag1 = d.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum::<f64>() / (d.len() - 1) as f64;
        (var, lag1 / var)
    };
    let (var, rho) = increments(1.0);
    assert!((var / 2e-2 - 1.0).abs() < 0.05, "{var}");
    assert!(rho.abs() < 0.03, "{rho}");
    let (_, rho) = increments(0.01);
    assert!(rho > 0.9, "{rho}");
}

#[test]
fn per_datum_rate_rescales_steps() {
    let target = mlp_target(40);
    let mut a = SgConfig::new(0.02, 8, 3, 5);
    a.lr_scale = split_hmc::sg::LrScale::PerDatum;
    let mut b = a.clone();
    b.lr_scale = split_hmc::sg::LrScale::Posterior;
    b.learning_rate = 2.0 * 0.02 / 40.0;
    assert_eq!(sgld_chain(&target, &a, 0).unwrap().samples, sgld_chain(&target, &b, 0).unwrap().samples);
    a.friction = 0.05;
    b.friction = 0.05;
    b.learning_rate = 0.02 / 40.0;
    assert_eq!(sghmc_chain(&target, &a, 0).unwrap().samples, sghmc_chain(&target, &b, 0).unwrap().samples);
}
