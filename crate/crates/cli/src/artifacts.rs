//! On-disk chain files and the run manifest.
//!
//! A chain CSV has the columns `sample_index, accept, delta_H,
//! log_posterior` followed by one column per parameter. Above the sidecar
//! threshold the parameter columns are dropped and the samples go to a
//! `.f64` file of little-endian doubles, row-major `samples × d`. Samplers
//! without an accept step leave `accept` and `delta_H` empty.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use split_hmc::sampler::Chain;

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub chain_index: usize,
    /// Paths are relative to the run directory.
    pub csv: String,
    pub samples_bin: Option<String>,
    pub retained: usize,
    pub divergences: usize,
    pub gradient_evaluations: usize,
    /// Post-burn accepted and proposed counts; absent without an accept step.
    pub accepted: Option<usize>,
    pub proposals: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scheme: String,
    pub chains: Vec<ChainRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    /// `sample` or `baseline`.
    pub command: String,
    pub name: String,
    pub config: String,
    pub config_hash: String,
    pub seed: u64,
    pub dim: usize,
    pub train: String,
    pub test: String,
    pub diagnostics: Option<String>,
    pub runs: Vec<RunRecord>,
    /// The only field that differs between reruns of one config.
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    pub fn total_divergences(&self) -> usize {
        self.runs.iter().flat_map(|r| &r.chains).map(|c| c.divergences).sum()
    }

    /// Every file the manifest points to, relative to the run directory.
    pub fn files(&self) -> Vec<String> {
        let mut out = vec![self.config.clone(), self.train.clone(), self.test.clone()];
        out.extend(self.diagnostics.clone());
        for c in self.runs.iter().flat_map(|r| &r.chains) {
            out.push(c.csv.clone());
            out.extend(c.samples_bin.clone());
        }
        out
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    fs::write(path, bytes).map_err(CliError::io(path))
}

/// Shortest round-trip text form.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

fn parse_f64(s: &str, what: &str, path: &Path) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|e| CliError::Format(format!("{}: bad {what} {s:?}: {e}", path.display())))
}

/// Writes `chain` under `dir` as `chains/<scheme>_<k>.csv`, returning its
/// manifest entry.
pub fn write_chain(dir: &Path, chain: &Chain, sidecar_threshold: usize) -> Result<ChainRecord> {
    let stem = format!("chains/{}_{}", chain.scheme, chain.chain_index);
    let csv_rel = format!("{stem}.csv");
    let csv_path = dir.join(&csv_rel);
    if let Some(parent) = csv_path.parent() {
        fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    let inline = chain.dim() <= sidecar_threshold;
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::Io {
            path: csv_path.clone(),
            source: io,
        },
        other => CliError::Format(format!("{other:?}")),
    })?;
    let mut header: Vec<String> = ["sample_index", "accept", "delta_H", "log_posterior"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    if inline {
        header.extend((0..chain.dim()).map(|j| format!("w{j}")));
    }
    w.write_record(&header)?;
    let flags = chain.accept_flags();
    let dh = chain.delta_h();
    for (i, row) in chain.samples.outer_iter().enumerate() {
        let mut rec = vec![
            i.to_string(),
            flags.get(i).map_or(String::new(), |a| u8::from(*a).to_string()),
            dh.get(i).map_or(String::new(), |v| fmt_f64(*v)),
            fmt_f64(chain.log_posterior[i]),
        ];
        if inline {
            rec.extend(row.iter().map(|v| fmt_f64(*v)));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(CliError::io(&csv_path))?;

    let samples_bin = if inline {
        None
    } else {
        let rel = format!("{stem}.f64");
        let mut bytes = Vec::with_capacity(chain.samples.len() * 8);
        for v in chain.samples.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        write_file(&dir.join(&rel), &bytes)?;
        Some(rel)
    };
    Ok(ChainRecord {
        chain_index: chain.chain_index,
        csv: csv_rel,
        samples_bin,
        retained: chain.len(),
        divergences: chain.divergences,
        gradient_evaluations: chain.gradient_evaluations,
        accepted: chain.mh.as_ref().map(|m| m.accepted),
        proposals: chain.mh.as_ref().map(|m| m.proposals),
    })
}

/// A chain read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredChain {
    pub chain_index: usize,
    pub samples: Array2<f64>,
    pub accept: Option<Vec<bool>>,
    pub delta_h: Option<Vec<f64>>,
    pub log_posterior: Vec<f64>,
}

pub fn read_chain(dir: &Path, record: &ChainRecord, dim: usize) -> Result<StoredChain> {
    let path: PathBuf = dir.join(&record.csv);
    let mut r = csv::Reader::from_path(&path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::Io {
            path: path.clone(),
            source: io,
        },
        other => CliError::Format(format!("{other:?}")),
    })?;
    let width = r.headers()?.len();
    let inline = record.samples_bin.is_none();
    if inline && width != 4 + dim {
        return Err(CliError::Format(format!(
            "{}: expected {} columns for {dim} parameters, found {width}",
            path.display(),
            4 + dim
        )));
    }
    let mut accept = Vec::new();
    let mut delta_h = Vec::new();
    let mut log_posterior = Vec::new();
    let mut values = Vec::new();
    let mut has_mh = true;
    for rec in r.records() {
        let rec = rec?;
        match &rec[1] {
            "" => has_mh = false,
            "1" => accept.push(true),
            "0" => accept.push(false),
            other => return Err(CliError::Format(format!("{}: bad accept flag {other:?}", path.display()))),
        }
        if !rec[2].is_empty() {
            delta_h.push(parse_f64(&rec[2], "delta_H", &path)?);
        }
        log_posterior.push(parse_f64(&rec[3], "log_posterior", &path)?);
        if inline {
            for j in 0..dim {
                values.push(parse_f64(&rec[4 + j], "parameter", &path)?);
            }
        }
    }
    let n = log_posterior.len();
    if n != record.retained {
        return Err(CliError::Format(format!(
            "{}: manifest lists {} samples, file has {n}",
            path.display(),
            record.retained
        )));
    }
    if let Some(bin) = &record.samples_bin {
        let p = dir.join(bin);
        let bytes = fs::read(&p).map_err(CliError::io(&p))?;
        if bytes.len() != n * dim * 8 {
            return Err(CliError::Format(format!(
                "{}: expected {} bytes, found {}",
                p.display(),
                n * dim * 8,
                bytes.len()
            )));
        }
        values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
    }
    let samples = Array2::from_shape_vec((n, dim), values).map_err(|e| CliError::Format(e.to_string()))?;
    Ok(StoredChain {
        chain_index: record.chain_index,
        samples,
        accept: has_mh.then_some(accept),
        delta_h: has_mh.then_some(delta_h),
        log_posterior,
    })
}
