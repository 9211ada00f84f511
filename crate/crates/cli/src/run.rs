//! `sample` and `baseline`: run chains and persist them with a manifest.

use std::path::Path;
use std::time::Instant;

use split_hmc::datasets::write_csv;
use split_hmc::diagnostics::{diagnose_chain, summarize, DiagnosticsSummary};
use split_hmc::integrators::IntegratorRegistry;
use split_hmc::sampler::{run_chains, Chain};
use split_hmc::sg::BaselineRegistry;

use crate::artifacts::{
    write_chain, write_file, write_json, RunManifest, RunRecord, CONFIG_FILE, DIAGNOSTICS_FILE,
};
use crate::config::{ExperimentConfig, Prepared};
use crate::error::{CliError, Result};

pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";

/// Chains that never accepted a post-burn proposal because every trajectory
/// diverged. A run with such chains still writes all outputs but exits 3.
pub fn stuck_chains(manifest: &RunManifest) -> Vec<(String, usize)> {
    manifest
        .runs
        .iter()
        .flat_map(|r| {
            r.chains.iter().filter_map(move |c| match (c.accepted, c.proposals) {
                (Some(0), Some(p)) if p > 0 && c.divergences >= p => Some((r.scheme.clone(), c.chain_index)),
                _ => None,
            })
        })
        .collect()
}

fn write_inputs(cfg: &ExperimentConfig, prepared: &Prepared, out: &Path) -> Result<String> {
    std::fs::create_dir_all(out).map_err(CliError::io(out))?;
    write_file(&out.join(CONFIG_FILE), cfg.resolved_toml()?.as_bytes())?;
    write_csv(out.join(TRAIN_FILE), &prepared.train)?;
    write_csv(out.join(TEST_FILE), &prepared.test)?;
    cfg.hash()
}

fn diagnostics(scheme: &str, chains: &[Chain]) -> Result<Option<DiagnosticsSummary>> {
    if chains.iter().any(|c| c.len() < 4) {
        return Ok(None);
    }
    let per = chains.iter().map(diagnose_chain).collect::<split_hmc::Result<Vec<_>>>()?;
    Ok(Some(summarize(scheme, per)?))
}

fn manifest(
    cfg: &ExperimentConfig,
    command: &str,
    hash: String,
    dim: usize,
    runs: Vec<RunRecord>,
    has_diagnostics: bool,
    started: Instant,
) -> RunManifest {
    RunManifest {
        tool: "split-hmc".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        name: cfg.name.clone(),
        config: CONFIG_FILE.into(),
        config_hash: hash,
        seed: cfg.seed,
        dim,
        train: TRAIN_FILE.into(),
        test: TEST_FILE.into(),
        diagnostics: has_diagnostics.then(|| DIAGNOSTICS_FILE.into()),
        runs,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    }
}

/// Runs every configured HMC scheme and writes chains, diagnostics and the
/// manifest under `out`.
pub fn cmd_sample(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<RunManifest> {
    let started = Instant::now();
    cfg.validate()?;
    let inf = cfg.inference()?;
    let prepared = cfg.prepare(None)?;
    let posterior = cfg.posterior(&prepared)?;
    let hash = write_inputs(cfg, &prepared, out)?;
    let registry = IntegratorRegistry::builtin();

    let mut runs = Vec::new();
    let mut summaries = Vec::new();
    for scheme in &inf.schemes {
        let chains = run_chains(&posterior, &registry, &cfg.sampler_config(scheme)?, jobs)?;
        let records = chains
            .iter()
            .map(|c| write_chain(out, c, cfg.output.sidecar_threshold))
            .collect::<Result<Vec<_>>>()?;
        summaries.extend(diagnostics(scheme, &chains)?);
        runs.push(RunRecord {
            scheme: scheme.clone(),
            chains: records,
        });
    }
    let has_diag = !summaries.is_empty();
    if has_diag {
        write_json(&out.join(DIAGNOSTICS_FILE), &summaries)?;
    }
    let m = manifest(cfg, "sample", hash, prepared.model.num_params(), runs, has_diag, started);
    m.write(out)?;
    Ok(m)
}

/// Maps `f` over `0..n` on up to `jobs` threads, keeping index order.
fn parallel_map<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let jobs = jobs.clamp(1, n.max(1));
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut start = 0;
        for slot in out.chunks_mut(n.div_ceil(jobs).max(1)) {
            let first = start;
            start += slot.len();
            let f = &f;
            scope.spawn(move || {
                for (k, o) in slot.iter_mut().enumerate() {
                    *o = Some(f(first + k));
                }
            });
        }
    });
    out.into_iter().map(|o| o.expect("filled")).collect()
}

/// Runs the configured stochastic-gradient baseline.
pub fn cmd_baseline(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<RunManifest> {
    let started = Instant::now();
    cfg.validate()?;
    let b = cfg.baseline()?;
    let prepared = cfg.prepare(b.prior_std)?;
    if let Some(inf) = &cfg.inference {
        // same network as the HMC runs of this config
        let hmc_dim = cfg.prepare(None)?.model.num_params();
        if hmc_dim != prepared.model.num_params() {
            return Err(CliError::Config(format!(
                "baseline has {} parameters, inference {hmc_dim} ({} schemes)",
                prepared.model.num_params(),
                inf.schemes.len()
            )));
        }
    }
    let target = cfg.baseline_target(&prepared)?;
    let sg = cfg.sg_config()?;
    let method = BaselineRegistry::builtin().get(&b.method)?;
    let hash = write_inputs(cfg, &prepared, out)?;

    let chains = parallel_map(b.chains, jobs, |k| method.run(&target, &sg, k))
        .into_iter()
        .collect::<split_hmc::Result<Vec<_>>>()
        .map_err(|e| match e {
            split_hmc::Error::Divergence { step, reason } => {
                CliError::Divergence(format!("{} diverged at iteration {step}: {reason}", b.method))
            }
            other => other.into(),
        })?;
    let records = chains
        .iter()
        .map(|c| write_chain(out, c, cfg.output.sidecar_threshold))
        .collect::<Result<Vec<_>>>()?;
    let summary = diagnostics(&b.method, &chains)?;
    if let Some(s) = &summary {
        write_json(&out.join(DIAGNOSTICS_FILE), &[s])?;
    }
    let runs = vec![RunRecord {
        scheme: b.method.clone(),
        chains: records,
    }];
    let m = manifest(
        cfg,
        "baseline",
        hash,
        prepared.model.num_params(),
        runs,
        summary.is_some(),
        started,
    );
    m.write(out)?;
    Ok(m)
}
