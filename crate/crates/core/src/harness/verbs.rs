use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::attack::{run_attack, AttackTarget, EvalBatch};
use crate::defense::{baseline_defense, DefenseKind, DefenseStrategy};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::datasets::{load_partitions, Partitions};
use crate::harness::output::{unix_now, write_jsonl, write_metadata, write_mosaic, Emitted};
use crate::metrics::accuracy;
use crate::nn::save_checkpoint;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub kind: DefenseKind,
    pub accuracy: f64,
    pub bodies: usize,
    pub activated: Vec<usize>,
    pub files: Vec<PathBuf>,
}

fn train_configured(cfg: &ExperimentConfig) -> Result<(Partitions, DefenseStrategy)> {
    let parts = load_partitions(&cfg.dataset, cfg.master_seed)?;
    let d = baseline_defense(cfg.defense.kind, &cfg.defense.params, &cfg.arch_spec(), cfg.split, &parts.train, cfg.master_seed)?;
    Ok((parts, d))
}

/// Trains the configured defense and writes one checkpoint per graph plus
/// `train.json`.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainSummary> {
    let started = unix_now();
    let (parts, d) = train_configured(cfg)?;
    d.reset_calls();
    let acc = accuracy(&d, &parts.eval)?;
    let mut files = Emitted::default();
    fs::create_dir_all(out)?;
    save_checkpoint(&d.head).save(files.push(out.join("head.ckpt")))?;
    for (i, b) in d.bodies.iter().enumerate() {
        save_checkpoint(b).save(files.push(out.join(format!("body{i}.ckpt"))))?;
    }
    save_checkpoint(&d.tail).save(files.push(out.join("tail.ckpt")))?;
    let key = files.push(out.join("selector.json")).to_path_buf();
    fs::write(&key, serde_json::to_string_pretty(&d.key).map_err(|e| Error::Io(std::io::Error::other(e)))?)?;
    let mut summary = TrainSummary {
        kind: d.kind,
        accuracy: acc,
        bodies: d.n(),
        activated: d.key.activated.clone(),
        files: Vec::new(),
    };
    let path = files.push(out.join("train.json")).to_path_buf();
    summary.files = files.0.clone();
    fs::write(&path, serde_json::to_string_pretty(&summary).map_err(|e| Error::Io(std::io::Error::other(e)))?)?;
    write_metadata(&out.join("metadata.json"), "train", started)?;
    summary.files.push(out.join("metadata.json"));
    Ok(summary)
}

/// Trains the configured defense, runs the configured strategies against it
/// and writes `attacks.jsonl` and `mosaic.png`.
pub fn run_attack_verb(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<crate::attack::AttackRecord>> {
    let started = unix_now();
    let (parts, d) = train_configured(cfg)?;
    let spec = cfg.arch_spec();
    let target = AttackTarget::new(&d.bodies, &spec, cfg.split)?;
    d.reset_calls();
    let eval = EvalBatch::new(d.client_forward(parts.eval.inputs())?, parts.eval.images().clone())?;
    let strategies: Vec<_> = if d.n() == 1 {
        vec![crate::attack::StrategyKind::Single]
    } else {
        cfg.attack.strategies.clone()
    };
    let rep = run_attack(&target, &parts.aux, &eval, &strategies, &cfg.attack.config, cfg.master_seed)?;
    let records: Vec<_> = rep.all().map(|r| r.record()).collect();
    let k = cfg.output.mosaic_images.min(parts.eval.len());
    let mut rows = vec![parts.eval.images().slice_batch(0, k)];
    rows.extend(rep.all().map(|r| r.reconstructions.slice_batch(0, k)));
    let refs: Vec<_> = rows.iter().collect();
    write_jsonl(&out.join("attacks.jsonl"), &records)?;
    write_mosaic(&out.join("mosaic.png"), &refs, k)?;
    write_metadata(&out.join("metadata.json"), "attack", started)?;
    Ok(records)
}

fn markdown_table(path: &Path) -> Result<Option<String>> {
    if !path.exists() {
        return Ok(None);
    }
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut r = csv::Reader::from_path(path).map_err(io)?;
    let header: Vec<String> = r.headers().map_err(io)?.iter().map(String::from).collect();
    let mut s = String::new();
    writeln!(s, "| {} |", header.join(" | ")).expect("string write");
    writeln!(s, "|{}", "---|".repeat(header.len())).expect("string write");
    for rec in r.records() {
        let rec = rec.map_err(io)?;
        let cells: Vec<String> = rec
            .iter()
            .map(|c| match c.parse::<f64>() {
                Ok(v) if c.contains('.') => format!("{v:.4}"),
                _ => c.to_string(),
            })
            .collect();
        writeln!(s, "| {} |", cells.join(" | ")).expect("string write");
    }
    Ok(Some(s))
}

/// Collects the CSV tables found under `out` into one markdown document,
/// writes it to `out/report.md` and returns it.
pub fn build_report(out: &Path) -> Result<String> {
    let sections = [
        ("Defense bench", out.join("bench").join("bench.csv")),
        ("Split sweep (median over seeds)", out.join("sweep").join("sweep_grid.csv")),
        ("Latency", out.join("latency").join("latency.csv")),
    ];
    let mut doc = String::from("# Results\n");
    let mut found = false;
    for (title, path) in &sections {
        if let Some(t) = markdown_table(path)? {
            found = true;
            write!(doc, "\n## {title}\n\n{t}").expect("string write");
        }
    }
    if !found {
        return Err(Error::InvalidArgument(format!("no result tables under {}", out.display())));
    }
    fs::write(out.join("report.md"), &doc)?;
    Ok(doc)
}
