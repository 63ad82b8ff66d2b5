use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackRecord, AttackReport, AttackResult, AttackTarget, EvalBatch, StrategyKind};
use crate::defense::{baseline_defense, train_ensembler, DefenseKind, DefenseStrategy, Perturbation};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::datasets::{load_partitions, Partitions};
use crate::harness::output::{unix_now, write_csv, write_jsonl, write_metadata, write_mosaic, Emitted};
use crate::metrics::accuracy;
use crate::nn::split;
use crate::tensor::Tensor;

/// One line of the defense table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub name: String,
    pub defense: String,
    pub delta_acc: f64,
    pub accuracy: f64,
    pub ssim: f64,
    pub psnr: f64,
    /// The attack whose result fills this row.
    pub strategy: String,
    pub seed: u64,
}

/// One cell of a split-point sweep, median over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub h: usize,
    pub t: usize,
    pub ssim: f64,
    pub psnr: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RunReport {
    pub rows: Vec<BenchRow>,
    pub grid: Vec<SweepCell>,
    pub files: Vec<PathBuf>,
}

impl RunReport {
    pub fn row(&self, name: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

#[derive(Debug, Serialize)]
struct BenchAttack<'a> {
    defense: &'a str,
    #[serde(flatten)]
    record: AttackRecord,
}

/// Row names in emission order. `Ours-Adaptive` appears only when the
/// adaptive strategy is requested.
pub const BENCH_ROWS: [&str; 8] = [
    "None",
    "Single",
    "TrainedNoise",
    "DR-single",
    "DR-ensemble",
    "Ours-Adaptive",
    "Ours-SSIM",
    "Ours-PSNR",
];

fn attack_defense(cfg: &ExperimentConfig, parts: &Partitions, d: &DefenseStrategy, strategies: &[StrategyKind], seed: u64) -> Result<AttackReport> {
    let spec = cfg.arch_spec();
    let target = AttackTarget::new(&d.bodies, &spec, cfg.split)?;
    d.reset_calls();
    let eval = EvalBatch::new(d.client_forward(parts.eval.inputs())?, parts.eval.images().clone())?;
    run_attack(&target, &parts.aux, &eval, strategies, &cfg.attack.config, seed)
}

/// Trains every defense, attacks each and writes `bench.csv`,
/// `attacks.jsonl`, `mosaic.png` and `metadata.json` under `out`.
pub fn run_defense_bench(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let started = unix_now();
    let seed = cfg.master_seed;
    let mut report = RunReport::default();
    let mut records = Vec::new();
    let mut mosaic = Vec::new();
    let result = bench_rows(cfg, seed, &mut report.rows, &mut records, &mut mosaic);
    let mut files = Emitted::default();
    write_csv(files.push(out.join("bench.csv")), &report.rows)?;
    write_jsonl(files.push(out.join("attacks.jsonl")), &records)?;
    result?;
    let refs: Vec<_> = mosaic.iter().collect();
    write_mosaic(files.push(out.join("mosaic.png")), &refs, cfg.output.mosaic_images)?;
    write_metadata(files.push(out.join("metadata.json")), "bench-defense", started)?;
    report.files = files.0;
    Ok(report)
}

struct Sink<'a> {
    rows: &'a mut Vec<BenchRow>,
    records: &'a mut Vec<BenchAttack<'static>>,
    mosaic: &'a mut Vec<Tensor>,
    baseline: f64,
    seed: u64,
    images: usize,
}

impl Sink<'_> {
    fn records(&mut self, defense: &'static str, rep: &AttackReport) {
        self.records.extend(rep.all().map(|r| BenchAttack { defense, record: r.record() }));
    }

    fn row(&mut self, name: &str, kind: DefenseKind, acc: f64, r: Option<&AttackResult>) -> Result<()> {
        let r = r.ok_or_else(|| Error::InvalidArgument(format!("row {name} has no attack result")))?;
        log::info!("{name}: accuracy {acc:.4} ssim {:.4} psnr {:.2}", r.ssim, r.psnr);
        self.rows.push(BenchRow {
            name: name.to_string(),
            defense: kind.to_string(),
            delta_acc: acc - self.baseline,
            accuracy: acc,
            ssim: r.ssim,
            psnr: r.psnr,
            strategy: r.strategy.to_string(),
            seed: self.seed,
        });
        let n = r.reconstructions.batch().min(self.images);
        self.mosaic.push(r.reconstructions.slice_batch(0, n));
        Ok(())
    }
}

fn bench_rows(
    cfg: &ExperimentConfig,
    seed: u64,
    rows: &mut Vec<BenchRow>,
    records: &mut Vec<BenchAttack<'static>>,
    mosaic: &mut Vec<Tensor>,
) -> Result<()> {
    let parts = load_partitions(&cfg.dataset, seed)?;
    let spec = cfg.arch_spec();
    let plan = cfg.split;
    let params = &cfg.defense.params;
    let strategies = &cfg.attack.strategies;
    let singles: Vec<StrategyKind> = strategies.iter().copied().filter(|s| *s == StrategyKind::Single).collect();
    let images = cfg.output.mosaic_images;
    mosaic.push(parts.eval.images().slice_batch(0, parts.eval.len().min(images)));

    let none = baseline_defense(DefenseKind::None, params, &spec, plan, &parts.train, seed)?;
    let baseline = accuracy(&none, &parts.eval)?;
    let mut sink = Sink {
        rows,
        records,
        mosaic,
        baseline,
        seed,
        images,
    };
    let rep = attack_defense(cfg, &parts, &none, &singles, seed)?;
    sink.records("None", &rep);
    sink.row("None", DefenseKind::None, baseline, rep.best_ssim())?;

    let (ens, run) = train_ensembler(params, &spec, plan, &parts.train, seed)?;
    let single = DefenseStrategy::single(
        DefenseKind::SingleNoise,
        split(&run.stage1[0], plan)?,
        Perturbation::Noise(run.stage1_noise[0].clone()),
    );
    let rep = attack_defense(cfg, &parts, &single, &singles, seed)?;
    sink.records("Single", &rep);
    sink.row("Single", DefenseKind::SingleNoise, accuracy(&single, &parts.eval)?, rep.best_ssim())?;

    for (name, kind) in [
        ("TrainedNoise", DefenseKind::TrainedNoise),
        ("DR-single", DefenseKind::DropoutSingle),
        ("DR-ensemble", DefenseKind::DropoutEnsemble),
    ] {
        let d = baseline_defense(kind, params, &spec, plan, &parts.train, seed)?;
        d.reset_calls();
        let acc = accuracy(&d, &parts.eval)?;
        let rep = attack_defense(cfg, &parts, &d, &singles, seed)?;
        sink.records(name, &rep);
        sink.row(name, kind, acc, rep.best_ssim())?;
    }

    let ours = DefenseStrategy::from_ensemble(ens);
    let acc = accuracy(&ours, &parts.eval)?;
    let rep = attack_defense(cfg, &parts, &ours, strategies, seed)?;
    sink.records("Ours", &rep);
    let k = DefenseKind::Ensembler;
    if rep.adaptive.is_some() {
        sink.row("Ours-Adaptive", k, acc, rep.adaptive.as_ref())?;
    }
    sink.row("Ours-SSIM", k, acc, rep.best_ssim())?;
    sink.row("Ours-PSNR", k, acc, rep.best_psnr())?;
    Ok(())
}
