use std::fs;
use std::path::Path;

use splitshield::defense::StageConfig;
use splitshield::harness::{
    build_report, load_dataset, load_partitions, measure_latency, run_attack_verb, run_defense_bench, run_latency_bench, run_split_sweep,
    run_train, DatasetSpec, ExperimentConfig, Scale, BENCH_ROWS,
};
use splitshield::transport::BodyMode;

fn quick() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::toy();
    cfg.dataset.samples = 160;
    cfg.defense.params.n = 3;
    cfg.defense.params.noise_epochs = 1;
    let stage = StageConfig {
        epochs: 1,
        ..cfg.defense.params.train
    };
    cfg.defense.params.train = stage;
    cfg.defense.params.stage3 = stage;
    cfg.attack.config.shadow.epochs = 1;
    cfg.attack.config.decoder.epochs = 1;
    cfg.sweep.seeds = vec![1, 2];
    cfg.output.mosaic_images = 4;
    cfg
}

fn workspace_file(rel: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

#[test]
fn datasets_are_seeded_and_balanced() {
    for name in ["synthetic-shapes", "synthetic-blobs"] {
        let spec = DatasetSpec {
            name: name.into(),
            samples: 200,
            ..DatasetSpec::default()
        };
        let a = load_dataset(&spec, 5).unwrap();
        assert_eq!(a, load_dataset(&spec, 5).unwrap());
        assert_ne!(a.images(), load_dataset(&spec, 6).unwrap().images());
        let mut counts = [0usize; 4];
        for &l in a.labels() {
            counts[l] += 1;
        }
        assert_eq!(counts, [50; 4], "{name}");
        assert!(a.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.image_shape(), &[1, 8, 8]);

        let p = load_partitions(&spec, 5).unwrap();
        assert_eq!((p.train.len(), p.aux.len(), p.eval.len()), (100, 60, 40));
    }
    let bad = DatasetSpec {
        name: "cifar10-subset".into(),
        ..DatasetSpec::default()
    };
    assert!(load_dataset(&bad, 0).is_err());
    assert!(load_dataset(&DatasetSpec { name: "nope".into(), ..DatasetSpec::default() }, 0).is_err());
}

#[test]
fn shipped_configs_equal_presets() {
    for (file, scale) in [("configs/toy.toml", Scale::Toy), ("configs/paper.toml", Scale::Paper)] {
        let cfg = ExperimentConfig::load(&workspace_file(file)).unwrap();
        assert_eq!(cfg, ExperimentConfig::preset(scale), "{file}");
    }
}

#[test]
fn config_round_trip_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    let cfg = quick();
    cfg.save(&path).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);

    let text = cfg.to_toml().unwrap();
    let bumped = text.replacen("schema_version = 1", "schema_version = 2", 1);
    assert!(ExperimentConfig::from_toml(&bumped).is_err());
    let unknown = format!("bogus = 3\n{text}");
    assert!(ExperimentConfig::from_toml(&unknown).is_err());
    assert!(ExperimentConfig::load(&dir.path().join("missing.toml")).is_err());
}

#[test]
fn defense_bench_is_deterministic_and_complete() {
    let cfg = quick();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let rep = run_defense_bench(&cfg, &a).unwrap();
    run_defense_bench(&cfg, &b).unwrap();
    assert_eq!(fs::read(a.join("bench.csv")).unwrap(), fs::read(b.join("bench.csv")).unwrap());
    assert_eq!(fs::read(a.join("attacks.jsonl")).unwrap(), fs::read(b.join("attacks.jsonl")).unwrap());

    let names: Vec<&str> = rep.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, BENCH_ROWS);
    let none = rep.row("None").unwrap();
    assert_eq!(none.delta_acc, 0.0);
    for r in &rep.rows {
        assert!((r.delta_acc - (r.accuracy - none.accuracy)).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&r.ssim));
    }
    let ssim = rep.row("Ours-SSIM").unwrap();
    let psnr = rep.row("Ours-PSNR").unwrap();
    assert!(ssim.ssim >= psnr.ssim && psnr.psnr >= ssim.psnr);
    for f in ["bench.csv", "attacks.jsonl", "mosaic.png", "metadata.json"] {
        assert!(rep.files.contains(&a.join(f)), "{f}");
        assert!(a.join(f).metadata().unwrap().len() > 0, "{f}");
    }
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(a.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["command"], "bench-defense");

    fs::create_dir_all(dir.path().join("bench")).unwrap();
    fs::copy(a.join("bench.csv"), dir.path().join("bench/bench.csv")).unwrap();
    let doc = build_report(dir.path()).unwrap();
    assert!(doc.contains("## Defense bench"));
    assert!(doc.contains("| Ours-SSIM |"));
    assert!(!doc.contains("## Latency"));
    assert!(dir.path().join("report.md").exists());
}

#[test]
fn report_needs_tables() {
    let dir = tempfile::tempdir().unwrap();
    assert!(build_report(dir.path()).is_err());
}

#[test]
fn sweep_grid_shape_skips_invalid_plans() {
    let cfg = quick();
    let dir = tempfile::tempdir().unwrap();
    // vgg-mini has 5 units, so no plan with h=5 is valid.
    let rep = run_split_sweep(&cfg, dir.path(), &[1, 5], &[0, 1]).unwrap();
    assert_eq!(rep.grid.len(), 4);
    for c in &rep.grid {
        assert_eq!(c.seeds, if c.h == 5 { 0 } else { 2 }, "{c:?}");
        assert_eq!(c.ssim.is_nan(), c.h == 5);
    }
    let grid = fs::read_to_string(dir.path().join("sweep_grid.csv")).unwrap();
    let lines: Vec<&str> = grid.lines().collect();
    assert_eq!(lines[0], "h,ssim_t0,ssim_t1,psnr_t0,psnr_t1");
    assert_eq!(lines.len(), 3);
    let runs = fs::read_to_string(dir.path().join("sweep_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 2 * 2);
    for f in ["sweep_attacks.jsonl", "sweep_mosaic.png", "metadata.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn train_and_attack_verbs_emit_files() {
    let cfg = quick();
    let dir = tempfile::tempdir().unwrap();
    let s = run_train(&cfg, &dir.path().join("train")).unwrap();
    assert_eq!(s.bodies, 3);
    assert_eq!(s.activated.len(), 2);
    for f in &s.files {
        assert!(f.exists(), "{}", f.display());
    }
    assert!(dir.path().join("train/body2.ckpt").exists());

    let recs = run_attack_verb(&cfg, &dir.path().join("attack")).unwrap();
    assert_eq!(recs.len(), 4);
    assert!(dir.path().join("attack/attacks.jsonl").exists());
    assert!(dir.path().join("attack/mosaic.png").exists());
}

#[test]
fn latency_bench_structure() {
    let mut cfg = quick();
    cfg.latency.n = 3;
    let dir = tempfile::tempdir().unwrap();
    let rep = run_latency_bench(&cfg, dir.path(), 32, 3).unwrap();
    assert_eq!((rep.standard.n, rep.ensemble.n, rep.ensemble.p), (1, 3, 2));
    assert!((rep.overhead - (rep.ensemble.total_s - rep.standard.total_s) / rep.standard.total_s).abs() < 1e-12);
    for r in [&rep.standard, &rep.ensemble] {
        let parts = r.client_s + r.server_s + r.comm_s;
        assert!((parts - r.total_s).abs() <= 0.02 * r.total_s);
    }
    assert!(dir.path().join("latency.csv").exists());
    assert!(measure_latency(&cfg, 1, 1, 0, 3, BodyMode::Sequential).is_err());

    // The same single-body pipeline measured twice has no systematic overhead.
    let one = measure_latency(&cfg, 1, 1, 128, 15, BodyMode::Sequential).unwrap();
    let again = measure_latency(&cfg, 1, 1, 128, 15, BodyMode::Sequential).unwrap();
    assert!(((again.total_s - one.total_s) / one.total_s).abs() < 0.5, "{one:?} vs {again:?}");
}
