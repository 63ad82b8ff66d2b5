use std::path::Path;

use serde::Serialize;

use crate::attack::{run_attack, AttackTarget, EvalBatch, StrategyKind};
use crate::defense::{train_undefended, DefenseStrategy};
use crate::error::{Error, Result};
use crate::harness::bench::{RunReport, SweepCell};
use crate::harness::config::ExperimentConfig;
use crate::harness::datasets::load_partitions;
use crate::harness::output::{unix_now, write_csv, write_jsonl, write_metadata, write_mosaic, Emitted};
use crate::nn::{build_model, SplitPlan};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
struct SweepRun {
    h: usize,
    t: usize,
    seed: u64,
    ssim: f64,
    psnr: f64,
}

pub(crate) fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

fn write_grid(path: &Path, h_values: &[usize], t_values: &[usize], grid: &[SweepCell]) -> Result<()> {
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["h".to_string()];
    header.extend(t_values.iter().map(|t| format!("ssim_t{t}")));
    header.extend(t_values.iter().map(|t| format!("psnr_t{t}")));
    w.write_record(&header).map_err(io)?;
    for &h in h_values {
        let cells: Vec<&SweepCell> = t_values
            .iter()
            .map(|&t| grid.iter().find(|c| c.h == h && c.t == t).expect("grid is complete"))
            .collect();
        let mut rec = vec![h.to_string()];
        rec.extend(cells.iter().map(|c| c.ssim.to_string()));
        rec.extend(cells.iter().map(|c| c.psnr.to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains an undefended model per split plan and seed, attacks it with the
/// single-body strategy and reports the per-cell median over seeds.
///
/// Writes `sweep_runs.csv`, `sweep_grid.csv`, `sweep_attacks.jsonl`,
/// `sweep_mosaic.png` (originals on top, one row per `h`, one block per `t`)
/// and `metadata.json` under `out`.
pub fn run_split_sweep(cfg: &ExperimentConfig, out: &Path, h_values: &[usize], t_values: &[usize]) -> Result<RunReport> {
    let started = unix_now();
    let spec = cfg.sweep.arch.spec(&cfg.dataset);
    let units = build_model(&spec, 0)?.unit_count();
    let seeds = if cfg.sweep.seeds.is_empty() { vec![cfg.master_seed] } else { cfg.sweep.seeds.clone() };
    let k = cfg.output.mosaic_images;
    let mut runs = Vec::new();
    let mut records = Vec::new();
    let mut recon: Vec<Vec<Tensor>> = Vec::new();
    let mut originals = None;
    for (si, &seed) in seeds.iter().enumerate() {
        let parts = load_partitions(&cfg.dataset, seed)?;
        let n = parts.eval.len().min(k);
        let blank = Tensor::zeros(&[n, parts.eval.image_shape()[0], parts.eval.image_shape()[1], parts.eval.image_shape()[2]]);
        if si == 0 {
            originals = Some(parts.eval.images().slice_batch(0, n));
        }
        for &h in h_values {
            let mut row = Vec::new();
            for &t in t_values {
                let plan = SplitPlan::new(h, t);
                if let Err(e) = plan.validate(units) {
                    if si == 0 {
                        log::warn!("skipping h={h} t={t} for {}: {e}", spec.name);
                        row.push(blank.clone());
                    }
                    continue;
                }
                let d = DefenseStrategy::undefended(train_undefended(&spec, plan, &parts.train, &cfg.defense.params.train, seed)?);
                let target = AttackTarget::new(&d.bodies, &spec, plan)?;
                let eval = EvalBatch::new(d.client_forward(parts.eval.inputs())?, parts.eval.images().clone())?;
                let rep = run_attack(&target, &parts.aux, &eval, &[StrategyKind::Single], &cfg.attack.config, seed)?;
                let r = &rep.singles[0];
                log::info!("h={h} t={t} seed={seed}: ssim {:.4} psnr {:.2}", r.ssim, r.psnr);
                runs.push(SweepRun {
                    h,
                    t,
                    seed,
                    ssim: r.ssim,
                    psnr: r.psnr,
                });
                records.push(r.record());
                if si == 0 {
                    row.push(r.reconstructions.slice_batch(0, n));
                }
            }
            if si == 0 {
                recon.push(row);
            }
        }
    }
    let mut grid = Vec::new();
    for &h in h_values {
        for &t in t_values {
            let cell: Vec<&SweepRun> = runs.iter().filter(|r| r.h == h && r.t == t).collect();
            grid.push(SweepCell {
                h,
                t,
                ssim: median(cell.iter().map(|r| r.ssim).collect()),
                psnr: median(cell.iter().map(|r| r.psnr).collect()),
                seeds: cell.len(),
            });
        }
    }
    let mut files = Emitted::default();
    write_csv(files.push(out.join("sweep_runs.csv")), &runs)?;
    write_grid(files.push(out.join("sweep_grid.csv")), h_values, t_values, &grid)?;
    write_jsonl(files.push(out.join("sweep_attacks.jsonl")), &records)?;
    if let Some(orig) = originals {
        let top = Tensor::stack_batches(&vec![orig; t_values.len().max(1)])?;
        let mut rows = vec![top];
        for r in recon {
            if !r.is_empty() {
                rows.push(Tensor::stack_batches(&r)?);
            }
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        write_mosaic(files.push(out.join("sweep_mosaic.png")), &refs, k * t_values.len().max(1))?;
    }
    write_metadata(files.push(out.join("metadata.json")), "sweep-splits", started)?;
    Ok(RunReport {
        grid,
        files: files.0,
        ..RunReport::default()
    })
}
