//! Throughput and peak-memory sweep over cores and sequence lengths.
//!
//! CSV columns: `core,n,iters_per_sec,peak_bytes,status`. Peak bytes are
//! read from [`crate::alloc`] and are zero when the counting allocator is
//! not installed.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::alloc::measure_peak;
use crate::baselines::{BenchCoreKind, PreparedCore};
use crate::error::{config_err, Result, TalkError};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub cores: Vec<BenchCoreKind>,
    pub ns: Vec<usize>,
    pub batch: usize,
    pub dim: usize,
    pub heads: usize,
    pub iters: usize,
    pub warmup: usize,
    pub workers: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            cores: vec![
                BenchCoreKind::TalkConv,
                BenchCoreKind::DynamicConv(31),
                BenchCoreKind::SelfAttention,
            ],
            ns: vec![10, 100, 1000, 10000],
            batch: 10,
            dim: 1024,
            heads: 16,
            iters: 10,
            warmup: 2,
            workers: 1,
            seed: 0,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return config_err("iterations must be at least 1");
        }
        if self.ns.is_empty() || self.ns.contains(&0) {
            return config_err("sequence lengths must be given and positive");
        }
        if self.cores.is_empty() {
            return config_err("no cores selected");
        }
        if self.batch == 0 || self.workers == 0 {
            return config_err("batch and workers must be positive");
        }
        for c in &self.cores {
            c.validate()?;
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return config_err(format!("heads ({}) must divide dim ({})", self.heads, self.dim));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchStatus {
    Ok,
    Oom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub core: String,
    pub n: usize,
    pub iters_per_sec: f64,
    pub peak_bytes: usize,
    pub status: BenchStatus,
    /// Peak bytes relative to the attention row at the same `n`, when that
    /// row ran. Not part of the CSV.
    #[serde(skip)]
    pub mem_vs_attention: Option<f64>,
}

/// Times one core at one length. Inputs are drawn before the clock starts.
pub fn bench_one<T: Scalar>(
    core: &PreparedCore<T>,
    name: &str,
    x: &Tensor<T>,
    iters: usize,
    warmup: usize,
    workers: usize,
) -> Result<BenchRow> {
    let n = x.shape()[1];
    let oom = |bytes| BenchRow {
        core: name.to_string(),
        n,
        iters_per_sec: 0.0,
        peak_bytes: bytes,
        status: BenchStatus::Oom,
        mem_vs_attention: None,
    };
    for _ in 0..warmup {
        match core.run(x, workers) {
            Err(TalkError::OutOfMemory { bytes }) => return Ok(oom(bytes as usize)),
            r => drop(r?),
        }
    }
    let (first, peak) = measure_peak(|| core.run(x, workers).map(drop));
    match first {
        Err(TalkError::OutOfMemory { bytes }) => return Ok(oom(bytes as usize)),
        r => r?,
    }
    let start = Instant::now();
    for _ in 0..iters {
        core.run(x, workers)?;
    }
    let secs = start.elapsed().as_secs_f64().max(1e-9);
    Ok(BenchRow {
        core: name.to_string(),
        n,
        iters_per_sec: iters as f64 / secs,
        peak_bytes: peak,
        status: BenchStatus::Ok,
        mem_vs_attention: None,
    })
}

/// Full sweep, rows ordered by `n` then by core in `spec.cores` order.
pub fn run_bench<T: Scalar>(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let mut rows = Vec::new();
    for &n in &spec.ns {
        let x = Tensor::<T>::rand_uniform(&[spec.batch, n, spec.dim], -1.0, 1.0, &mut rng)?;
        let first = rows.len();
        for &kind in &spec.cores {
            let core = PreparedCore::new(kind, spec.dim, spec.heads, &mut rng)?;
            rows.push(bench_one(&core, &kind.to_string(), &x, spec.iters, spec.warmup, spec.workers)?);
        }
        let attn = rows[first..]
            .iter()
            .find(|r| r.core == BenchCoreKind::SelfAttention.to_string() && r.status == BenchStatus::Ok)
            .map(|r| r.peak_bytes);
        if let Some(a) = attn.filter(|&a| a > 0) {
            for r in &mut rows[first..] {
                r.mem_vs_attention = Some(r.peak_bytes as f64 / a as f64);
            }
        }
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["core", "n", "iters_per_sec", "peak_bytes", "status"])?;
    for r in rows {
        let status = match r.status {
            BenchStatus::Ok => "ok",
            BenchStatus::Oom => "oom",
        };
        w.write_record([
            r.core.clone(),
            r.n.to_string(),
            format!("{:.3}", r.iters_per_sec),
            r.peak_bytes.to_string(),
            status.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(rows: &[BenchRow], path: impl AsRef<Path>) -> Result<()> {
    write_csv(rows, std::fs::File::create(path)?)
}
