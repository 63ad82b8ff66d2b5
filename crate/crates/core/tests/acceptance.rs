//! One test per acceptance criterion. Each prints a single PASS/FAIL line
//! (written straight to stderr so it survives output capture) and then
//! asserts the same condition.

use std::fs;
use std::io::Write as _;
use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use proptest::prelude::*;
use rand::Rng as _;
use splitshield::attack::{run_attack, score, train_decoder, AttackTarget, EvalBatch, StrategyKind};
use splitshield::defense::{
    batch_cosine, ensembler_infer, selector_combine, stage1_train, train_ensembler, DefenseParams, DefenseStrategy, SelectorKey,
};
use splitshield::harness::{load_partitions, median_server_time, run_defense_bench, run_split_sweep, ExperimentConfig, RunReport};
use splitshield::metrics::{psnr, ssim};
use splitshield::nn::{build_model, split, ArchSpec, ModelPartition, SplitPlan};
use splitshield::transport::{client_infer, serve, BodyMode, Connection, Frame, MsgType, DEFAULT_TIMEOUT};
use splitshield::{rng, Tensor};

const SEEDS: [u64; 3] = [1, 2, 3];

/// Criteria run one at a time so timing checks see an idle machine.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: u32, what: &str, ok: bool, detail: String) {
    let line = format!("[{}] criterion {id:>2}: {what}: {detail}", if ok { "PASS" } else { "FAIL" });
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(ok, "{line}");
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

struct BenchRun {
    report: RunReport,
    csv: Vec<u8>,
}

/// Toy bench for every seed, shared by the criteria that read it.
fn toy_benches() -> &'static [BenchRun] {
    static RUNS: OnceLock<Vec<BenchRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let mut cfg = ExperimentConfig::toy();
                cfg.master_seed = seed;
                let out = scratch(&format!("bench-seed{seed}"));
                let report = run_defense_bench(&cfg, &out).unwrap();
                let csv = fs::read(out.join("bench.csv")).unwrap();
                BenchRun { report, csv }
            })
            .collect()
    })
}

#[test]
fn c01_metric_units() {
    let _serial = serial();
    let t = Instant::now();
    let x = Tensor::uniform(&[2, 3, 16, 16], 1.0, &mut rng::stream(1, "acc1")).map(|v| v.abs());
    let self_ssim = ssim(&x, &x).unwrap();
    let c1 = 1e-4f64;
    let constant = ssim(&Tensor::zeros(&[1, 1, 8, 8]), &Tensor::full(&[1, 1, 8, 8], 1.0)).unwrap();
    let quarter = psnr(&Tensor::zeros(&[1, 1, 8, 8]), &Tensor::full(&[1, 1, 8, 8], 0.5)).unwrap();
    let base = Tensor::full(&[2, 1, 8, 8], 0.5);
    let noise = Tensor::uniform(&[2, 1, 8, 8], 1.0, &mut rng::stream(2, "acc1"));
    let ramp: Vec<f64> = (1..=10)
        .map(|s| psnr(&base, &base.add(&noise.scale(0.04 * s as f32)).unwrap()).unwrap())
        .collect();
    let monotone = ramp.windows(2).all(|w| w[1] < w[0]);
    let secs = t.elapsed().as_secs_f64();
    let ok = (self_ssim - 1.0).abs() <= 1e-9
        && (constant - c1 / (1.0 + c1)).abs() <= 1e-6
        && (quarter - 6.0206).abs() <= 1e-3
        && monotone
        && secs < 10.0;
    verdict(
        1,
        "metric units",
        ok,
        format!("ssim(x,x)={self_ssim:.12} const={constant:.6e} psnr(0.25)={quarter:.4} monotone={monotone} in {secs:.2}s"),
    );
}

#[test]
fn c02_partition_equivalence() {
    let _serial = serial();
    let t = Instant::now();
    let mut r = rng::stream(77, "acc2");
    let mut exact = 0;
    for case in 0..20 {
        let seed: u64 = r.random();
        let h = r.random_range(1..3);
        let plan = SplitPlan::new(h, r.random_range(0..3 - h));
        let spec = ArchSpec::new("tiny", &[r.random_range(1..4), 8, 8], r.random_range(2..9)).with_width(r.random_range(2..12));
        let model = build_model(&spec, seed).unwrap();
        let x = Tensor::randn(&[r.random_range(1..9), spec.input_shape[0], 8, 8], 1.0, &mut rng::indexed_stream(seed, "acc2", case));
        let parts = split(&model, plan).unwrap();
        let composed = parts.tail.forward(&parts.body.forward(&parts.head.forward(&x).unwrap()).unwrap()).unwrap();
        if composed == model.forward(&x).unwrap() {
            exact += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(2, "partition equivalence", exact == 20 && secs < 30.0, format!("{exact}/20 exact in {secs:.2}s"));
}

#[test]
fn c03_degenerate_collapse() {
    let _serial = serial();
    let cfg = ExperimentConfig::toy();
    let parts = load_partitions(&cfg.dataset, 1).unwrap();
    let params = DefenseParams {
        n: 1,
        p: 1,
        sigma: 0.0,
        lambda: 0.0,
        ..cfg.defense.params.clone()
    };
    let plan = cfg.split;
    let (model, _) = train_ensembler(&params, &cfg.arch_spec(), plan, &parts.train, 1).unwrap();
    let plain = ModelPartition {
        head: model.head.clone(),
        body: model.bodies[0].clone(),
        tail: model.tail.clone(),
    };
    let x = parts.eval.inputs();
    let ens = ensembler_infer(&model, x).unwrap();
    let deployed = DefenseStrategy::from_ensemble(model).infer(x).unwrap();
    let undefended = DefenseStrategy::undefended(plain).infer(x).unwrap();
    let diffs = ens.data().iter().zip(undefended.data()).filter(|(a, b)| a != b).count()
        + deployed.data().iter().zip(undefended.data()).filter(|(a, b)| a != b).count();
    verdict(3, "degenerate collapse", diffs == 0, format!("{diffs} differing logits over {} values", ens.len()));
}

fn selector_case() -> impl Strategy<Value = (usize, Vec<usize>, Vec<f32>, [usize; 4], u64)> {
    (1usize..9)
        .prop_flat_map(|n| (Just(n), proptest::sample::subsequence((0..n).collect::<Vec<_>>(), 1..=n)))
        .prop_flat_map(|(n, act)| {
            let p = act.len();
            (
                Just(n),
                Just(act),
                proptest::collection::vec(-2.0f32..2.0, p),
                (1usize..4, 1usize..5, 1usize..6, 1usize..6).prop_map(|(b, c, h, w)| [b, c, h, w]),
                any::<u64>(),
            )
        })
}

#[test]
fn c04_selector_contract() {
    let _serial = serial();
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig::with_cases(100));
    let result = runner.run(&selector_case(), |(n, activated, weights, shape, seed)| {
        let key = SelectorKey::new(n, activated.clone(), weights.clone()).unwrap();
        let outputs: Vec<Tensor> = (0..n).map(|i| Tensor::randn(&shape, 1.0, &mut rng::indexed_stream(seed, "acc4", i))).collect();
        let y = selector_combine(&outputs, &key).unwrap();
        let [b, c, h, w] = shape;
        prop_assert_eq!(y.shape(), &[b, activated.len() * c, h, w][..]);
        let plane = c * h * w;
        for s in 0..b {
            for (slot, (&i, &wt)) in activated.iter().zip(&weights).enumerate() {
                let want: Vec<f32> = outputs[i].sample(s).iter().map(|v| v * wt).collect();
                prop_assert_eq!(&y.sample(s)[slot * plane..(slot + 1) * plane], &want[..]);
            }
        }
        Ok(())
    });
    let detail = match &result {
        Ok(()) => "100 randomized cases".to_string(),
        Err(e) => e.to_string(),
    };
    verdict(4, "selector contract", result.is_ok(), detail);
}

#[test]
fn c05_stage1_distinctness() {
    let _serial = serial();
    let t = Instant::now();
    let cfg = ExperimentConfig::toy();
    let spec = ArchSpec::new("tiny", &cfg.dataset.shape, cfg.dataset.classes);
    let parts = load_partitions(&cfg.dataset, 1).unwrap();
    let (models, _) = stage1_train(&spec, cfg.split, &parts.train, 4, 0.1, &cfg.defense.params.train, 1).unwrap();
    let probe = parts.eval.inputs().slice_batch(0, 128);
    let heads: Vec<Tensor> = models.iter().map(|m| split(m, cfg.split).unwrap().head.forward(&probe).unwrap()).collect();
    let shape_ok = heads.iter().all(|h| h.shape() == heads[0].shape());
    let mut worst = f32::NEG_INFINITY;
    for i in 0..4 {
        for j in i + 1..4 {
            worst = worst.max(batch_cosine(&heads[i], &heads[j]).unwrap().0);
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(5, "stage-1 distinctness", shape_ok && worst < 0.99 && secs < 300.0, format!("max pairwise CS {worst:.4} in {secs:.1}s"));
}

#[test]
fn c06_defense_trend() {
    let _serial = serial();
    let t = Instant::now();
    let runs = toy_benches();
    let col = |name: &str| -> Vec<f64> { runs.iter().map(|r| r.report.row(name).unwrap().ssim).collect() };
    let (none, single, ens) = (col("None"), col("Single"), col("Ours-SSIM"));
    let (m_none, m_single, m_ens) = (median(none.clone()), median(single.clone()), median(ens.clone()));
    let ok = m_ens <= m_single - 0.05 && m_single <= m_none && m_ens <= m_none;
    verdict(
        6,
        "defense trend",
        ok,
        format!(
            "median SSIM none {m_none:.4} single {m_single:.4} ensembler {m_ens:.4} (per seed none {none:.3?} single {single:.3?} ens {ens:.3?}), {:.0}s",
            t.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn c07_split_depth_trend() {
    let _serial = serial();
    let t = Instant::now();
    let cfg = ExperimentConfig::toy();
    let rep = run_split_sweep(&cfg, &scratch("sweep"), &[1, 2, 3], &[0]).unwrap();
    let s: Vec<f64> = rep.grid.iter().map(|c| c.ssim).collect();
    let ok = s.len() == 3 && s.windows(2).all(|w| w[1] < w[0]) && rep.grid.iter().all(|c| c.seeds == 3);
    let secs = t.elapsed().as_secs_f64();
    verdict(7, "split-depth trend", ok && secs < 1200.0, format!("median SSIM by h=1,2,3: {s:.4?} in {secs:.0}s"));
}

#[test]
fn c08_accuracy_budget() {
    let _serial = serial();
    let runs = toy_benches();
    let deltas: Vec<f64> = runs.iter().map(|r| r.report.row("Ours-SSIM").unwrap().delta_acc).collect();
    let ok = deltas.iter().all(|d| d.abs() <= 0.05);
    verdict(8, "accuracy budget", ok, format!("ensembler minus undefended accuracy per seed {deltas:.4?}"));
}

#[test]
fn c09_attack_secrecy_oracle() {
    let _serial = serial();
    let cfg = ExperimentConfig::toy();
    let spec = cfg.arch_spec();
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in SEEDS {
        let parts = load_partitions(&cfg.dataset, seed).unwrap();
        let (model, _) = train_ensembler(&cfg.defense.params, &spec, cfg.split, &parts.train, seed).unwrap();
        let target = AttackTarget::new(&model.bodies, &spec, cfg.split).unwrap();
        let eval = EvalBatch::new(model.client_features(parts.eval.inputs()).unwrap(), parts.eval.images().clone()).unwrap();
        let rep = run_attack(&target, &parts.aux, &eval, &[StrategyKind::Single], &cfg.attack.config, seed).unwrap();
        let shadow = rep.best_ssim().unwrap().ssim;
        let leaked = train_decoder(&model.head, &parts.aux, &cfg.attack.config.decoder, seed).unwrap();
        let (_, leaked_ssim, _) = score(&leaked, &eval).unwrap();
        if leaked_ssim > shadow {
            wins += 1;
        }
        detail.push(format!("seed {seed}: leaked {leaked_ssim:.4} vs shadow {shadow:.4}"));
    }
    verdict(9, "attack secrecy oracle", wins == 3, format!("{wins}/3 ({})", detail.join("; ")));
}

#[test]
fn c10_transport() {
    let _serial = serial();
    let t = Instant::now();
    let mut r = rng::stream(10, "acc10");
    let mut round_trips = 0;
    for i in 0..1000 {
        let ndim = r.random_range(1..5);
        let shape: Vec<usize> = (0..ndim).map(|_| r.random_range(1..6)).collect();
        let len = shape.iter().product();
        let data: Vec<f32> = (0..len).map(|_| f32::from_bits(r.random())).collect();
        let tensor = Tensor::new(shape, data).unwrap();
        let frame = if i % 2 == 0 {
            Frame::features(tensor)
        } else {
            Frame::logits_set(vec![tensor], r.random())
        };
        let back = Frame::decode(&frame.encode().unwrap()).unwrap();
        let same = back.msg_type == frame.msg_type
            && back.server_time.map(f64::to_bits) == frame.server_time.map(f64::to_bits)
            && back.tensors[0].shape() == frame.tensors[0].shape()
            && back.tensors[0].data().iter().map(|v| v.to_bits()).eq(frame.tensors[0].data().iter().map(|v| v.to_bits()));
        if same && matches!(back.msg_type, MsgType::Features | MsgType::LogitsSet) {
            round_trips += 1;
        }
    }

    let cfg = ExperimentConfig::toy();
    let parts = load_partitions(&cfg.dataset, 1).unwrap();
    let (model, _) = train_ensembler(&cfg.defense.params, &cfg.arch_spec(), cfg.split, &parts.train, 1).unwrap();
    let x = parts.eval.inputs();
    let local = ensembler_infer(&model, x).unwrap();
    let server = serve(model.bodies.clone(), "127.0.0.1:0", BodyMode::Sequential).unwrap();
    let mut conn = Connection::connect(server.addr(), DEFAULT_TIMEOUT).unwrap();
    let mut bit_exact = true;
    let mut worst_additivity = 0.0f64;
    for _ in 0..5 {
        let (remote, lat) = client_infer(&model.head, &model.tail, &model.key, &model.noise, &mut conn, x).unwrap();
        bit_exact &= remote.data().iter().map(|v| v.to_bits()).eq(local.data().iter().map(|v| v.to_bits()));
        worst_additivity = worst_additivity.max(lat.additivity_error());
    }
    conn.close();
    server.shutdown();

    // Heavier bodies so per-body compute dominates timer noise.
    let mut heavy = ExperimentConfig::toy();
    heavy.dataset.shape = vec![3, 32, 32];
    let one = median_server_time(&heavy, 1, 128, 15).unwrap();
    let ten = median_server_time(&heavy, 10, 128, 15).unwrap();
    let ratio = ten / (10.0 * one);
    let secs = t.elapsed().as_secs_f64();
    let ok = round_trips == 1000 && bit_exact && worst_additivity < 0.02 && (0.7..=1.3).contains(&ratio) && secs < 300.0;
    verdict(
        10,
        "transport",
        ok,
        format!(
            "{round_trips}/1000 frames bit-exact, networked==local {bit_exact}, worst additivity {:.3}%, server N=10/(10*N=1) {ratio:.3} ({:.4}s vs {:.4}s), {secs:.1}s",
            worst_additivity * 100.0,
            ten,
            one
        ),
    );
}

#[test]
fn c11_determinism() {
    let _serial = serial();
    let first = &toy_benches()[0];
    let cfg = ExperimentConfig::toy();
    assert_eq!(cfg.master_seed, SEEDS[0]);
    let out = scratch("bench-repeat");
    run_defense_bench(&cfg, &out).unwrap();
    let again = fs::read(out.join("bench.csv")).unwrap();
    let same = again == first.csv;
    verdict(11, "determinism", same, format!("bench.csv {} bytes, identical {same}", again.len()));
}
