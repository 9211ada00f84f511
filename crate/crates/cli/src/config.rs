//! TOML experiment configs. Every field is validated before any compute and
//! the defaults-expanded form is written next to the outputs.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use split_hmc::autodiff::Activation;
use split_hmc::datasets::{
    gen_classification_toy, gen_regression_1d, read_csv, shard, ClassificationSpec, Dataset, RegressionSpec,
    ShardPolicy, TargetKind, Targets,
};
use split_hmc::integrators::{IntegratorRegistry, PermutationPolicy, TrajectoryConfig};
use split_hmc::model::{BayesianMlp, LikelihoodSpec, MlpArchitecture, PriorSpec};
use split_hmc::potential::MlpPosterior;
use split_hmc::sampler::{MassSpec, SamplerConfig};
use split_hmc::sg::{BaselineRegistry, LrScale, LrSchedule, Retention, SgConfig};

use crate::error::{CliError, Result};

/// Environment variable that replaces the config seed.
pub const SEED_ENV: &str = "SPLIT_HMC_SEED";

fn zero() -> u64 {
    0
}

fn one() -> usize {
    1
}

fn default_test_points() -> usize {
    200
}

fn default_init_std() -> f64 {
    0.1
}

fn default_shard_policy() -> ShardPolicy {
    ShardPolicy::Shuffled { seed: 0 }
}

fn default_sidecar_threshold() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Seed of every chain stream; chain `k` uses stream `k`.
    #[serde(default = "zero")]
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inference: Option<InferenceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineSpec>,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Synthetic 1D curve; the test set is a noise-free grid that extends one
    /// unit past the training range on both sides.
    Regression {
        #[serde(default = "zero")]
        seed: u64,
        #[serde(default = "default_test_points")]
        test_points: usize,
        #[serde(flatten)]
        spec: RegressionSpec,
    },
    /// Two-dimensional toy classes; train and test rows come from one draw.
    Classification {
        #[serde(default = "zero")]
        seed: u64,
        classes: usize,
        num_points: usize,
        test_points: usize,
        #[serde(flatten)]
        spec: ClassificationSpec,
    },
    Csv {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
        targets: CsvTargets,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CsvTargets {
    Real { columns: usize },
    Labels { classes: usize },
}

impl From<CsvTargets> for TargetKind {
    fn from(t: CsvTargets) -> Self {
        match t {
            CsvTargets::Real { columns } => TargetKind::Real(columns),
            CsvTargets::Labels { classes } => TargetKind::Labels(classes),
        }
    }
}

/// Network shape between the data-determined input and output widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub prior_std: f64,
    pub likelihood: LikelihoodSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSpec {
    /// Schemes to run, each with `chains` chains.
    pub schemes: Vec<String>,
    pub steps: usize,
    pub step_size: f64,
    pub shards: usize,
    #[serde(default = "default_shard_policy")]
    pub shard_policy: ShardPolicy,
    #[serde(default)]
    pub permutation_policy: PermutationPolicy,
    #[serde(default)]
    pub mass: MassSpec,
    /// Proposals per chain, burn-in included.
    pub num_samples: usize,
    #[serde(default)]
    pub burn: usize,
    #[serde(default = "one")]
    pub thin: usize,
    #[serde(default = "one")]
    pub chains: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    pub method: String,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Replaces `model.prior_std` for this baseline.
    #[serde(default)]
    pub prior_std: Option<f64>,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub friction: f64,
    /// Leading epochs discarded.
    #[serde(default)]
    pub burn: usize,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub retention: Retention,
    #[serde(default)]
    pub lr_scale: LrScale,
    #[serde(default = "one")]
    pub chains: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

/// Evaluation artefacts beyond the scalar metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Artifact {
    EntropyCdf,
    MiMatrix,
    CumulativeAccuracy,
    LogPosterior,
    Bands,
}

impl Artifact {
    pub const ALL: [Artifact; 5] = [
        Artifact::EntropyCdf,
        Artifact::MiMatrix,
        Artifact::CumulativeAccuracy,
        Artifact::LogPosterior,
        Artifact::Bands,
    ];
}

fn all_artifacts() -> Vec<Artifact> {
    Artifact::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    /// Used when no `-o` is given.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Chains with more parameters than this store samples in a binary
    /// sidecar instead of CSV columns.
    #[serde(default = "default_sidecar_threshold")]
    pub sidecar_threshold: usize,
    #[serde(default = "all_artifacts")]
    pub artifacts: Vec<Artifact>,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: None,
            sidecar_threshold: default_sidecar_threshold(),
            artifacts: all_artifacts(),
        }
    }
}

fn field_error(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(field_error(field, format!("must be positive, got {v}")))
    }
}

fn nonzero(field: &str, v: usize) -> Result<()> {
    if v > 0 {
        Ok(())
    } else {
        Err(field_error(field, "must be positive"))
    }
}

/// Training and test data plus the network they imply.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub model: BayesianMlp,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates `path`, then applies [`SEED_ENV`] if set.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|e| field_error(SEED_ENV, format!("{v:?} is not an unsigned integer ({e})")))?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(field_error("name", "must not be empty"));
        }
        match &self.dataset {
            DatasetSpec::Regression { test_points, spec, .. } => {
                nonzero("dataset.test_points", *test_points)?;
                nonzero("dataset.num_points", spec.num_points)?;
            }
            DatasetSpec::Classification {
                classes,
                num_points,
                test_points,
                ..
            } => {
                if *classes < 2 {
                    return Err(field_error("dataset.classes", "need at least two classes"));
                }
                nonzero("dataset.num_points", *num_points)?;
                nonzero("dataset.test_points", *test_points)?;
            }
            DatasetSpec::Csv { targets, .. } => match targets {
                CsvTargets::Real { columns } => nonzero("dataset.targets.columns", *columns)?,
                CsvTargets::Labels { classes } => nonzero("dataset.targets.classes", *classes)?,
            },
        }
        if self.model.hidden.contains(&0) {
            return Err(field_error("model.hidden", "layer widths must be positive"));
        }
        positive("model.prior_std", self.model.prior_std)?;
        match (self.is_classification(), self.model.likelihood) {
            (true, LikelihoodSpec::Gaussian { .. }) => {
                return Err(field_error("model.likelihood", "class labels need the categorical likelihood"))
            }
            (false, LikelihoodSpec::Categorical) => {
                return Err(field_error("model.likelihood", "real targets need the gaussian likelihood"))
            }
            (_, LikelihoodSpec::Gaussian { precision }) => positive("model.likelihood.precision", precision)?,
            _ => {}
        }
        if let Some(inf) = &self.inference {
            if inf.schemes.is_empty() {
                return Err(field_error("inference.schemes", "list at least one scheme"));
            }
            let reg = IntegratorRegistry::builtin();
            for s in &inf.schemes {
                reg.get(s).map_err(|e| field_error("inference.schemes", e))?;
            }
            let mut seen = inf.schemes.clone();
            seen.sort();
            seen.dedup();
            if seen.len() != inf.schemes.len() {
                return Err(field_error("inference.schemes", "duplicate scheme"));
            }
            nonzero("inference.steps", inf.steps)?;
            positive("inference.step_size", inf.step_size)?;
            nonzero("inference.shards", inf.shards)?;
            if let Some(n) = self.train_len().filter(|n| n % inf.shards != 0) {
                return Err(field_error(
                    "inference.shards",
                    format!("{n} training points do not split into {} equal shards", inf.shards),
                ));
            }
            nonzero("inference.chains", inf.chains)?;
            for s in &inf.schemes {
                reg.get(s)?
                    .check_shards(inf.shards)
                    .map_err(|e| field_error("inference.shards", e))?;
            }
            self.sampler_config(&inf.schemes[0])
                .and_then(|c| c.validate().map_err(Into::into))
                .map_err(|e| field_error("inference", e))?;
        }
        if let Some(b) = &self.baseline {
            BaselineRegistry::builtin()
                .get(&b.method)
                .map_err(|e| field_error("baseline.method", e))?;
            if let Some(p) = b.prior_std {
                positive("baseline.prior_std", p)?;
            }
            nonzero("baseline.chains", b.chains)?;
            let sg = self.sg_config()?;
            sg.validate().map_err(|e| field_error("baseline", e))?;
            if b.method != "sgd" && b.burn >= b.epochs {
                return Err(field_error("baseline.burn", "must be smaller than epochs"));
            }
        }
        Ok(())
    }

    /// Training set size when it is known without reading files.
    fn train_len(&self) -> Option<usize> {
        match &self.dataset {
            DatasetSpec::Regression { spec, .. } => Some(spec.num_points),
            DatasetSpec::Classification { num_points, .. } => Some(*num_points),
            DatasetSpec::Csv { .. } => None,
        }
    }

    pub fn is_classification(&self) -> bool {
        match &self.dataset {
            DatasetSpec::Regression { .. } => false,
            DatasetSpec::Classification { .. } => true,
            DatasetSpec::Csv { targets, .. } => matches!(targets, CsvTargets::Labels { .. }),
        }
    }

    /// Defaults-expanded TOML.
    pub fn resolved_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Format(e.to_string()))
    }

    /// SHA-256 of [`resolved_toml`](Self::resolved_toml), hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.resolved_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn inference(&self) -> Result<&InferenceSpec> {
        self.inference
            .as_ref()
            .ok_or_else(|| field_error("inference", "section missing"))
    }

    pub fn baseline(&self) -> Result<&BaselineSpec> {
        self.baseline
            .as_ref()
            .ok_or_else(|| field_error("baseline", "section missing"))
    }

    pub fn sampler_config(&self, scheme: &str) -> Result<SamplerConfig> {
        let inf = self.inference()?;
        let mut trajectory = TrajectoryConfig::new(scheme, inf.steps, inf.step_size);
        trajectory.permutation_policy = inf.permutation_policy;
        let mut cfg = SamplerConfig::new(trajectory, inf.num_samples, self.seed);
        cfg.burn = inf.burn;
        cfg.thin = inf.thin;
        cfg.mass = inf.mass.clone();
        cfg.num_chains = inf.chains;
        cfg.init_std = inf.init_std;
        Ok(cfg)
    }

    pub fn sg_config(&self) -> Result<SgConfig> {
        let b = self.baseline()?;
        let mut cfg = SgConfig::new(b.learning_rate, b.batch_size, b.epochs, self.seed);
        cfg.momentum = b.momentum;
        cfg.weight_decay = b.weight_decay;
        cfg.friction = b.friction;
        cfg.burn = b.burn;
        cfg.lr_schedule = b.lr_schedule;
        cfg.retention = b.retention;
        cfg.lr_scale = b.lr_scale;
        cfg.init_std = b.init_std;
        Ok(cfg)
    }

    /// Generates or reads the data and builds the network. `prior_std`
    /// replaces the model prior when given.
    pub fn prepare(&self, prior_std: Option<f64>) -> Result<Prepared> {
        let (train, test) = self.datasets()?;
        let (outputs, likelihood) = match (&train.targets, self.model.likelihood) {
            (Targets::Real(y), l) => (y.ncols(), l),
            (Targets::Labels { classes, .. }, l) => (*classes, l),
        };
        let mut layers = vec![train.input_dim()];
        layers.extend(&self.model.hidden);
        layers.push(outputs);
        let arch = MlpArchitecture::new(layers, self.model.activation)?;
        let prior = PriorSpec::new(prior_std.unwrap_or(self.model.prior_std))?;
        let model = BayesianMlp::new(arch, prior, likelihood)?;
        Ok(Prepared { train, test, model })
    }

    /// The sharded posterior used by the HMC schemes.
    pub fn posterior(&self, prepared: &Prepared) -> Result<MlpPosterior> {
        let inf = self.inference()?;
        let sharded = shard(&prepared.train, inf.shards, inf.shard_policy)?;
        Ok(MlpPosterior::new(prepared.model.clone(), sharded)?)
    }

    /// Posterior over all training rows as one shard, for the baselines.
    pub fn baseline_target(&self, prepared: &Prepared) -> Result<MlpPosterior> {
        let sharded = shard(&prepared.train, 1, ShardPolicy::Contiguous)?;
        Ok(MlpPosterior::new(prepared.model.clone(), sharded)?)
    }

    fn datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetSpec::Regression {
                seed,
                test_points,
                spec,
            } => {
                let train = gen_regression_1d(spec, *seed)?.to_dataset();
                let lo = spec.segments.iter().map(|s| s.0).fold(f64::INFINITY, f64::min) - 1.0;
                let hi = spec.segments.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max) + 1.0;
                let n = *test_points;
                let xs: Vec<f64> = (0..n)
                    .map(|i| if n == 1 { 0.5 * (lo + hi) } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
                    .collect();
                let ys: Vec<f64> = xs.iter().map(|&x| spec.trend(x)).collect();
                let test = Dataset::new(
                    Array2::from_shape_vec((n, 1), xs).expect("n x 1"),
                    Targets::Real(Array2::from_shape_vec((n, 1), ys).expect("n x 1")),
                )?;
                Ok((train, test))
            }
            DatasetSpec::Classification {
                seed,
                classes,
                num_points,
                test_points,
                spec,
            } => {
                let all = gen_classification_toy(*classes, num_points + test_points, spec, *seed)?.dataset;
                let train_idx: Vec<usize> = (0..*num_points).collect();
                let test_idx: Vec<usize> = (*num_points..num_points + test_points).collect();
                Ok((all.select(&train_idx), all.select(&test_idx)))
            }
            DatasetSpec::Csv { train, test, targets } => {
                let kind = TargetKind::from(*targets);
                let tr = read_csv(train, kind)?;
                let te = match test {
                    Some(p) => read_csv(p, kind)?,
                    None => tr.clone(),
                };
                Ok((tr, te))
            }
        }
    }

    /// Target layout for reading test CSVs produced for this config.
    pub fn target_kind(&self, prepared: &Prepared) -> TargetKind {
        match &prepared.train.targets {
            Targets::Real(y) => TargetKind::Real(y.ncols()),
            Targets::Labels { classes, .. } => TargetKind::Labels(*classes),
        }
    }
}
