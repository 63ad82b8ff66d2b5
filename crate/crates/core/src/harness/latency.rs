use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::defense::{choose_selector, NoiseSpec};
use crate::error::{Error, Result};
use crate::harness::bench::RunReport;
use crate::harness::config::ExperimentConfig;
use crate::harness::output::{unix_now, write_csv, write_metadata, Emitted};
use crate::harness::sweep::median;
use crate::nn::{build_model, split, widen_input};
use crate::rng;
use crate::tensor::Tensor;
use crate::transport::{client_infer, serve, BodyMode, Connection, LatencyBreakdown, DEFAULT_TIMEOUT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub name: String,
    pub n: usize,
    pub p: usize,
    pub batch: usize,
    pub repeats: usize,
    pub client_s: f64,
    pub server_s: f64,
    pub comm_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub standard: LatencyRow,
    pub ensemble: LatencyRow,
    /// `(total_ens − total_std) / total_std`.
    pub overhead: f64,
    #[serde(flatten)]
    pub run: RunReport,
}

/// Times `repeats` loopback requests and returns the one with the median
/// total, so its parts still add up.
pub fn measure_latency(cfg: &ExperimentConfig, n: usize, p: usize, batch: usize, repeats: usize, mode: BodyMode) -> Result<LatencyBreakdown> {
    if repeats == 0 || batch == 0 {
        return Err(Error::InvalidArgument("latency bench needs batch >= 1 and repeats >= 1".into()));
    }
    let spec = cfg.arch_spec();
    let seed = cfg.master_seed;
    let part = split(&build_model(&spec, rng::derive_seed(seed, "latency/client"))?, cfg.split)?;
    let bodies = (0..n)
        .map(|i| Ok(split(&build_model(&spec, rng::indexed_seed(seed, "latency/body", i))?, cfg.split)?.body))
        .collect::<Result<Vec<_>>>()?;
    let key = choose_selector(n, p, rng::derive_seed(seed, "latency/selector"))?;
    let tail = if p > 1 { widen_input(&part.tail, p, seed)? } else { part.tail.clone() };
    let noise = NoiseSpec::sample(cfg.defense.params.sigma, rng::derive_seed(seed, "latency/noise"), part.head.output_shape())?;
    let mut shape = vec![batch];
    shape.extend_from_slice(&spec.input_shape);
    let x = Tensor::randn(&shape, 1.0, &mut rng::stream(seed, "latency/input"));

    let server = serve(bodies, "127.0.0.1:0", mode)?;
    let mut conn = Connection::connect(server.addr(), DEFAULT_TIMEOUT)?;
    client_infer(&part.head, &tail, &key, &noise, &mut conn, &x)?;
    let mut runs = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        runs.push(client_infer(&part.head, &tail, &key, &noise, &mut conn, &x)?.1);
    }
    conn.close();
    server.shutdown();
    runs.sort_by(|a, b| a.total_s.total_cmp(&b.total_s));
    Ok(runs[runs.len() / 2])
}

fn row(name: &str, n: usize, p: usize, batch: usize, repeats: usize, b: LatencyBreakdown) -> LatencyRow {
    LatencyRow {
        name: name.into(),
        n,
        p,
        batch,
        repeats,
        client_s: b.client_s,
        server_s: b.server_s,
        comm_s: b.comm_s,
        total_s: b.total_s,
    }
}

/// Standard split inference (one body) against the ensemble with
/// `cfg.latency.n` bodies on loopback. Writes `latency.csv` and `metadata.json`.
pub fn run_latency_bench(cfg: &ExperimentConfig, out: &Path, batch: usize, repeats: usize) -> Result<LatencyReport> {
    let started = unix_now();
    let n = cfg.latency.n;
    let p = cfg.defense.params.p.min(n);
    let std = measure_latency(cfg, 1, 1, batch, repeats, BodyMode::Sequential)?;
    let ens = measure_latency(cfg, n, p, batch, repeats, BodyMode::Sequential)?;
    let standard = row("standard", 1, 1, batch, repeats, std);
    let ensemble = row("ensemble", n, p, batch, repeats, ens);
    let overhead = (ens.total_s - std.total_s) / std.total_s;
    log::info!(
        "standard {:.4}s, ensemble {:.4}s, overhead {:.1}% (median of {repeats})",
        std.total_s,
        ens.total_s,
        overhead * 100.0
    );
    let mut files = Emitted::default();
    write_csv(files.push(out.join("latency.csv")), &[standard.clone(), ensemble.clone()])?;
    write_metadata(files.push(out.join("metadata.json")), "bench-latency", started)?;
    Ok(LatencyReport {
        standard,
        ensemble,
        overhead,
        run: RunReport {
            files: files.0,
            ..RunReport::default()
        },
    })
}

/// Median server seconds for a sequential server of `n` bodies.
pub fn median_server_time(cfg: &ExperimentConfig, n: usize, batch: usize, repeats: usize) -> Result<f64> {
    let spec = cfg.arch_spec();
    let seed = cfg.master_seed;
    let part = split(&build_model(&spec, seed)?, cfg.split)?;
    let bodies = (0..n)
        .map(|i| Ok(split(&build_model(&spec, rng::indexed_seed(seed, "latency/body", i))?, cfg.split)?.body))
        .collect::<Result<Vec<_>>>()?;
    let mut shape = vec![batch];
    shape.extend_from_slice(&spec.input_shape);
    let z = part.head.forward(&Tensor::randn(&shape, 1.0, &mut rng::stream(seed, "latency/input")))?;
    let server = serve(bodies, "127.0.0.1:0", BodyMode::Sequential)?;
    let mut conn = Connection::connect(server.addr(), DEFAULT_TIMEOUT)?;
    conn.request(z.clone())?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        times.push(conn.request(z.clone())?.1);
    }
    conn.close();
    server.shutdown();
    Ok(median(times))
}
