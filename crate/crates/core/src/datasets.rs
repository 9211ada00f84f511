//! Synthetic data generators, sharding, and feature normalisation.

use std::path::Path;

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::RngStream;

/// Supervised targets: real-valued rows or integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Real(Array2<f64>),
    Labels { labels: Vec<usize>, classes: usize },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(y) => y.nrows(),
            Targets::Labels { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Real(y) => Targets::Real(y.select(Axis(0), idx)),
            Targets::Labels { labels, classes } => Targets::Labels {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
        }
    }
}

/// Input rows with their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub targets: Targets,
}

impl Dataset {
    pub fn new(x: Array2<f64>, targets: Targets) -> Result<Self> {
        if x.nrows() != targets.len() {
            return Err(Error::DimensionMismatch {
                context: "dataset rows",
                expected: x.nrows(),
                found: targets.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite feature".into()));
        }
        if let Targets::Labels { labels, classes } = &targets {
            if let Some(&label) = labels.iter().find(|&&l| l >= *classes) {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: *classes,
                });
            }
        }
        Ok(Self { x, targets })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), idx),
            targets: self.targets.select(idx),
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Labels { labels, .. } => Some(labels),
            Targets::Real(_) => None,
        }
    }

    /// Stacks datasets row-wise. All parts must share feature and target shapes.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or(Error::Empty("dataset parts"))?;
        let xs: Vec<_> = parts.iter().map(|d| d.x.view()).collect();
        let x = concatenate(Axis(0), &xs)
            .map_err(|e| Error::InvalidData(format!("feature shapes differ: {e}")))?;
        let targets = match &first.targets {
            Targets::Real(_) => {
                let mut ys = Vec::with_capacity(parts.len());
                for p in parts {
                    match &p.targets {
                        Targets::Real(y) => ys.push(y.view()),
                        _ => return Err(Error::InvalidData("mixed target kinds".into())),
                    }
                }
                Targets::Real(
                    concatenate(Axis(0), &ys)
                        .map_err(|e| Error::InvalidData(format!("target shapes differ: {e}")))?,
                )
            }
            Targets::Labels { classes, .. } => {
                let mut all = Vec::new();
                for p in parts {
                    match &p.targets {
                        Targets::Labels { labels, classes: c } if c == classes => {
                            all.extend_from_slice(labels)
                        }
                        _ => return Err(Error::InvalidData("mixed target kinds".into())),
                    }
                }
                Targets::Labels {
                    labels: all,
                    classes: *classes,
                }
            }
        };
        Dataset::new(x, targets)
    }

    /// Splits off the trailing `fraction` of a shuffled copy as validation.
    pub fn train_validation_split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::InvalidConfig(format!(
                "validation fraction {fraction} not in [0, 1)"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut RngStream::new(seed, streams::SPLIT));
        let n_val = (self.len() as f64 * fraction).round() as usize;
        let (train, val) = idx.split_at(self.len() - n_val);
        Ok((self.select(train), self.select(val)))
    }
}

/// Stream ids reserved for dataset randomness, disjoint from chain streams.
pub mod streams {
    pub const REGRESSION: u64 = 1 << 40;
    pub const CLASSIFICATION: u64 = (1 << 40) + 1;
    pub const SHARD: u64 = (1 << 40) + 2;
    pub const SPLIT: u64 = (1 << 40) + 3;
}

/// Equal-size disjoint partition of a dataset.
#[derive(Debug, Clone)]
pub struct ShardedDataset {
    shards: Vec<Dataset>,
    partition: Vec<Vec<usize>>,
}

impl ShardedDataset {
    pub fn num_shards(&self) -> usize {
        self.shards.len()
    }

    pub fn shard(&self, m: usize) -> Result<&Dataset> {
        self.shards.get(m).ok_or(Error::IndexOutOfRange {
            what: "shard",
            index: m,
            len: self.shards.len(),
        })
    }

    pub fn shards(&self) -> &[Dataset] {
        &self.shards
    }

    /// Original row indices that went into each shard.
    pub fn partition(&self) -> &[Vec<usize>] {
        &self.partition
    }

    pub fn total_len(&self) -> usize {
        self.shards.iter().map(Dataset::len).sum()
    }

    /// Builds shards from explicit parts; used by tests and fixtures that
    /// construct shard contents by hand.
    pub fn from_parts(shards: Vec<Dataset>) -> Result<Self> {
        if shards.is_empty() {
            return Err(Error::Empty("shards"));
        }
        let mut start = 0;
        let partition = shards
            .iter()
            .map(|s| {
                let p: Vec<usize> = (start..start + s.len()).collect();
                start += s.len();
                p
            })
            .collect();
        Ok(Self { shards, partition })
    }

    /// Rows of all shards stacked in shard order.
    pub fn union(&self) -> Result<Dataset> {
        Dataset::concat(&self.shards)
    }
}

/// How rows are assigned to shards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ShardPolicy {
    /// Consecutive blocks of rows in dataset order.
    Contiguous,
    /// Rows are permuted with the given seed before cutting.
    Shuffled { seed: u64 },
}

/// Cuts `dataset` into `m` equal shards. Remainders are rejected.
pub fn shard(dataset: &Dataset, m: usize, policy: ShardPolicy) -> Result<ShardedDataset> {
    if m == 0 {
        return Err(Error::InvalidConfig("shard count must be positive".into()));
    }
    let n = dataset.len();
    if n == 0 {
        return Err(Error::Empty("dataset"));
    }
    if !n.is_multiple_of(m) {
        return Err(Error::InvalidConfig(format!(
            "{n} rows cannot be split into {m} equal shards; trim or augment the data to a multiple of {m}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let ShardPolicy::Shuffled { seed } = policy {
        order.shuffle(&mut RngStream::new(seed, streams::SHARD));
    }
    let size = n / m;
    let partition: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    let shards = partition.iter().map(|idx| dataset.select(idx)).collect();
    Ok(ShardedDataset { shards, partition })
}

/// Per-feature standardisation fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Features with zero spread; passed through with `std = 1`.
    pub constant: Vec<bool>,
}

impl Normalizer {
    pub fn fit(x: &Array2<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::Empty("normalisation data"));
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let std = x.std_axis(Axis(0), 0.0);
        let constant: Vec<bool> = std.iter().map(|s| *s <= 1e-12 * (1.0 + s.abs())).collect();
        let std = std
            .iter()
            .zip(&constant)
            .map(|(s, c)| if *c { 1.0 } else { *s })
            .collect();
        let mean = mean
            .iter()
            .zip(&constant)
            .map(|(m, c)| if *c { 0.0 } else { *m })
            .collect();
        Ok(Self {
            mean,
            std,
            constant,
        })
    }

    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset> {
        let x = self.transform(&dataset.x)?;
        Ok(Dataset {
            x,
            targets: dataset.targets.clone(),
        })
    }

    pub fn transform(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(x)?;
        let mean = Array1::from(self.mean.clone());
        let std = Array1::from(self.std.clone());
        Ok((x - &mean) / &std)
    }

    pub fn inverse(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(x)?;
        let mean = Array1::from(self.mean.clone());
        let std = Array1::from(self.std.clone());
        Ok(x * &std + &mean)
    }

    fn check(&self, x: &Array2<f64>) -> Result<()> {
        crate::error::check_dim("normaliser features", self.mean.len(), x.ncols())
    }
}

/// Standardises features with statistics from `dataset` itself. Apply the
/// returned [`Normalizer`] unchanged to validation and test data.
pub fn normalize(dataset: &Dataset) -> Result<(Dataset, Normalizer)> {
    let norm = Normalizer::fit(&dataset.x)?;
    Ok((norm.apply(dataset)?, norm))
}

/// One-dimensional regression curve: `y = amplitude·sin(frequency·x) + slope·x + noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressionSpec {
    /// Disjoint `[lo, hi]` input intervals; points are spread evenly over them.
    pub segments: Vec<(f64, f64)>,
    pub num_points: usize,
    pub noise_std: f64,
    pub amplitude: f64,
    pub frequency: f64,
    pub slope: f64,
}

impl Default for RegressionSpec {
    fn default() -> Self {
        Self {
            segments: vec![(-3.0, -1.8), (-0.6, 0.6), (1.8, 3.0)],
            num_points: 400,
            noise_std: 0.1,
            amplitude: 1.0,
            frequency: 1.5,
            slope: 0.3,
        }
    }
}

impl RegressionSpec {
    pub fn trend(&self, x: f64) -> f64 {
        self.amplitude * (self.frequency * x).sin() + self.slope * x
    }

    fn validate(&self) -> Result<()> {
        if self.segments.is_empty() || self.num_points == 0 {
            return Err(Error::InvalidConfig("regression spec needs segments and points".into()));
        }
        let mut sorted = self.segments.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (lo, hi) in &sorted {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidConfig(format!("bad segment [{lo}, {hi}]")));
            }
        }
        if sorted.windows(2).any(|w| w[0].1 >= w[1].0) {
            return Err(Error::InvalidConfig("segments overlap".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidConfig("noise std must be non-negative".into()));
        }
        Ok(())
    }
}

/// A generated 1D regression set together with the spec that produced it.
#[derive(Debug, Clone)]
pub struct RegressionDataset1D {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub spec: RegressionSpec,
    pub seed: u64,
}

impl RegressionDataset1D {
    pub fn to_dataset(&self) -> Dataset {
        let n = self.x.len();
        Dataset {
            x: Array2::from_shape_vec((n, 1), self.x.clone()).expect("n x 1"),
            targets: Targets::Real(Array2::from_shape_vec((n, 1), self.y.clone()).expect("n x 1")),
        }
    }
}

/// Draws points segment by segment, so contiguous shards stay local in `x`.
pub fn gen_regression_1d(spec: &RegressionSpec, seed: u64) -> Result<RegressionDataset1D> {
    spec.validate()?;
    let mut rng = RngStream::new(seed, streams::REGRESSION);
    let k = spec.segments.len();
    let mut x = Vec::with_capacity(spec.num_points);
    let mut y = Vec::with_capacity(spec.num_points);
    for (s, (lo, hi)) in spec.segments.iter().enumerate() {
        let count = spec.num_points / k + usize::from(s < spec.num_points % k);
        for _ in 0..count {
            let xi = lo + (hi - lo) * rng.uniform();
            let noise = if spec.noise_std > 0.0 {
                spec.noise_std * rng.normal()
            } else {
                0.0
            };
            x.push(xi);
            y.push(spec.trend(xi) + noise);
        }
    }
    Ok(RegressionDataset1D {
        x,
        y,
        spec: spec.clone(),
        seed,
    })
}

/// Layout of the toy classification clusters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ClusterShape {
    /// Isotropic Gaussian blobs with centres evenly spaced on a circle.
    Blobs { radius: f64, spread: f64 },
    /// Concentric noisy rings, class `c` at radius `1 + c`.
    Rings { noise: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassificationSpec {
    pub shape: ClusterShape,
    /// Ratio between the largest and smallest class counts; `None` is balanced.
    pub imbalance: Option<f64>,
}

impl Default for ClassificationSpec {
    fn default() -> Self {
        Self {
            shape: ClusterShape::Blobs {
                radius: 3.0,
                spread: 1.0,
            },
            imbalance: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassificationDatasetToy {
    pub dataset: Dataset,
    pub class_counts: Vec<usize>,
}

fn class_counts(classes: usize, n: usize, imbalance: Option<f64>) -> Result<Vec<usize>> {
    let weights: Vec<f64> = match imbalance {
        None => vec![1.0; classes],
        Some(r) if r >= 1.0 && r.is_finite() => (0..classes)
            .map(|c| {
                if classes == 1 {
                    1.0
                } else {
                    r.powf(-(c as f64) / (classes - 1) as f64)
                }
            })
            .collect(),
        Some(r) => return Err(Error::InvalidConfig(format!("imbalance ratio {r} must be >= 1"))),
    };
    let total: f64 = weights.iter().sum();
    let mut counts: Vec<usize> = weights
        .iter()
        .map(|w| ((w / total) * n as f64).floor() as usize)
        .collect();
    // hand the rounding remainder to the largest classes first
    let mut rem = n - counts.iter().sum::<usize>();
    let mut c = 0;
    while rem > 0 {
        counts[c % classes] += 1;
        rem -= 1;
        c += 1;
    }
    if counts.contains(&0) {
        return Err(Error::InvalidConfig(format!(
            "{n} points too few for {classes} classes at this imbalance"
        )));
    }
    Ok(counts)
}

/// Two-dimensional toy classification data with `classes` labels.
pub fn gen_classification_toy(
    classes: usize,
    n: usize,
    spec: &ClassificationSpec,
    seed: u64,
) -> Result<ClassificationDatasetToy> {
    if classes == 0 || n < classes {
        return Err(Error::InvalidConfig(format!(
            "need at least one point per class ({n} points, {classes} classes)"
        )));
    }
    let counts = class_counts(classes, n, spec.imbalance)?;
    let mut rng = RngStream::new(seed, streams::CLASSIFICATION);
    let mut x = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (c, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let (a, b) = match spec.shape {
                ClusterShape::Blobs { radius, spread } => {
                    let theta = std::f64::consts::TAU * c as f64 / classes as f64;
                    (
                        radius * theta.cos() + spread * rng.normal(),
                        radius * theta.sin() + spread * rng.normal(),
                    )
                }
                ClusterShape::Rings { noise } => {
                    let theta = std::f64::consts::TAU * rng.uniform();
                    let r = 1.0 + c as f64 + noise * rng.normal();
                    (r * theta.cos(), r * theta.sin())
                }
            };
            x[[row, 0]] = a;
            x[[row, 1]] = b;
            labels.push(c);
            row += 1;
        }
    }
    // interleave classes so contiguous shards see every class
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let dataset = Dataset::new(x, Targets::Labels { labels, classes })?.select(&order);
    Ok(ClassificationDatasetToy {
        dataset,
        class_counts: counts,
    })
}

/// Writes a header row (`x0..`, then `y0..` or `label`) followed by one row per datum.
pub fn write_csv(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..dataset.input_dim()).map(|i| format!("x{i}")).collect();
    match &dataset.targets {
        Targets::Real(y) => header.extend((0..y.ncols()).map(|j| format!("y{j}"))),
        Targets::Labels { .. } => header.push("label".into()),
    }
    w.write_record(&header)?;
    for i in 0..dataset.len() {
        let mut rec: Vec<String> = dataset.x.row(i).iter().map(|v| format!("{v:e}")).collect();
        match &dataset.targets {
            Targets::Real(y) => rec.extend(y.row(i).iter().map(|v| format!("{v:e}"))),
            Targets::Labels { labels, .. } => rec.push(labels[i].to_string()),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Target layout expected when reading a CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    /// The last `n` columns are real targets.
    Real(usize),
    /// The last column is an integer label in `0..classes`.
    Labels(usize),
}

pub fn read_csv(path: impl AsRef<Path>, kind: TargetKind) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path)?;
    let width = r.headers()?.len();
    let n_targets = match kind {
        TargetKind::Real(k) => k,
        TargetKind::Labels(_) => 1,
    };
    if width <= n_targets {
        return Err(Error::InvalidData(format!(
            "{width} columns leave no features for {n_targets} targets"
        )));
    }
    let n_features = width - n_targets;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |j: usize| -> Result<f64> {
            rec[j].trim().parse::<f64>().map_err(|e| {
                Error::InvalidData(format!("row {}, column {}: {e}", line + 1, j + 1))
            })
        };
        for j in 0..n_features {
            xs.push(parse(j)?);
        }
        match kind {
            TargetKind::Real(k) => {
                for j in 0..k {
                    ys.push(parse(n_features + j)?);
                }
            }
            TargetKind::Labels(_) => {
                let l = rec[n_features].trim().parse::<usize>().map_err(|e| {
                    Error::InvalidData(format!("row {} label: {e}", line + 1))
                })?;
                labels.push(l);
            }
        }
    }
    let n = xs.len() / n_features;
    let x = Array2::from_shape_vec((n, n_features), xs).expect("row-major features");
    let targets = match kind {
        TargetKind::Real(k) => Targets::Real(Array2::from_shape_vec((n, k), ys).expect("targets")),
        TargetKind::Labels(classes) => Targets::Labels { labels, classes },
    };
    Dataset::new(x, targets)
}
