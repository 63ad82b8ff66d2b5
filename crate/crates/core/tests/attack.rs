use splitshield::attack::{
    reconstruct, run_attack, score, train_decoder, train_shadow, AttackConfig, AttackTarget, DecoderConfig, EvalBatch, GateMode, ShadowConfig,
    ShadowVariant, StrategyKind,
};
use splitshield::defense::{train_ensembler, train_undefended, DefenseParams, StageConfig};
use splitshield::harness::{load_partitions, DatasetSpec, Partitions};
use splitshield::metrics::{accuracy, mse};
use splitshield::nn::{ArchSpec, ModelGraph, SgdConfig, SplitPlan};
use splitshield::Tensor;

fn sgd(lr: f32) -> SgdConfig {
    SgdConfig {
        lr,
        momentum: 0.9,
        batch_size: 32,
        weight_decay: 0.0,
    }
}

fn parts(classes: usize, samples: usize, seed: u64) -> Partitions {
    let spec = DatasetSpec {
        samples,
        classes,
        ..DatasetSpec::default()
    };
    load_partitions(&spec, seed).unwrap()
}

fn stage(epochs: usize) -> StageConfig {
    StageConfig { epochs, optim: sgd(0.02) }
}

fn shadow_cfg(epochs: usize) -> ShadowConfig {
    ShadowConfig {
        channels: 16,
        epochs,
        optim: sgd(0.02),
        gate: GateMode::Joint,
    }
}

fn decoder_cfg(epochs: usize) -> DecoderConfig {
    DecoderConfig {
        channels: 16,
        epochs,
        optim: sgd(0.05),
    }
}

#[test]
fn identity_features_are_decoded_almost_perfectly() {
    let p = parts(4, 768, 1);
    let head = ModelGraph::identity(vec![1, 8, 8]);
    let cfg = DecoderConfig {
        optim: sgd(0.2),
        ..decoder_cfg(300)
    };
    let dec = train_decoder(&head, &p.aux, &cfg, 1).unwrap();
    assert!(dec.final_mse() < 1e-3, "train MSE {}", dec.final_mse());
    assert!(dec.final_mse() < dec.initial_mse);
}

#[test]
fn decoder_shape_and_range_contract() {
    let p = parts(4, 256, 2);
    let spec = ArchSpec::new("tiny", &[1, 8, 8], 4);
    let part = train_undefended(&spec, SplitPlan::new(1, 1), &p.train, &stage(1), 2).unwrap();
    let dec = train_decoder(&part.head, &p.aux, &decoder_cfg(2), 2).unwrap();
    assert_eq!(dec.epoch_mse.len(), 2);
    assert!(dec.epoch_mse[1] < dec.initial_mse);

    let z = part.head.forward(p.eval.inputs()).unwrap();
    let rec = reconstruct(&dec, &z).unwrap();
    assert_eq!(rec.shape(), p.eval.images().shape());
    assert!(rec.data().iter().all(|v| (0.0..=1.0).contains(v)));

    let blank = reconstruct(&dec, &Tensor::zeros(&[5, 8, 4, 4])).unwrap();
    assert_eq!(blank.shape(), &[5, 1, 8, 8]);
    assert!(blank.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(blank.sample(0), blank.sample(4));
    assert!(reconstruct(&dec, &Tensor::zeros(&[1, 4, 4, 4])).is_err());

    // Oracle case: feeding the decoder's own training features scores its
    // evaluation-mode training error.
    let feats = part.head.forward(p.aux.inputs()).unwrap();
    let eval = EvalBatch::new(feats.clone(), p.aux.images().clone()).unwrap();
    let (r, _, psnr) = score(&dec, &eval).unwrap();
    let direct = mse(&dec.graph.forward(&feats).unwrap(), p.aux.images()).unwrap();
    assert_eq!(mse(&r, p.aux.images()).unwrap(), direct);
    assert!((psnr - 10.0 * (1.0 / direct).log10()).abs() < 1e-9);
}

#[test]
fn adaptive_over_one_body_is_single_zero() {
    let p = parts(4, 256, 3);
    let spec = ArchSpec::new("tiny", &[1, 8, 8], 4);
    let plan = SplitPlan::new(1, 1);
    let part = train_undefended(&spec, plan, &p.train, &stage(1), 3).unwrap();
    let bodies = vec![part.body];
    let target = AttackTarget::new(&bodies, &spec, plan).unwrap();
    let single = train_shadow(&target, &p.aux, ShadowVariant::Single(0), &shadow_cfg(2), 3).unwrap();
    let adaptive = train_shadow(&target, &p.aux, ShadowVariant::Adaptive, &shadow_cfg(2), 3).unwrap();
    assert_eq!(single.shadow_head, adaptive.shadow_head);
    assert_eq!(single.shadow_tail, adaptive.shadow_tail);
    assert_eq!(single.epoch_losses, adaptive.epoch_losses);
    assert_eq!(adaptive.gate, Some(vec![1.0]));
    assert!(train_shadow(&target, &p.aux, ShadowVariant::Single(1), &shadow_cfg(1), 3).is_err());
}

#[test]
fn adaptive_gate_is_normalized_and_bodies_untouched() {
    let p = parts(4, 256, 4);
    let spec = ArchSpec::new("tiny", &[1, 8, 8], 4);
    let plan = SplitPlan::new(1, 1);
    let params = DefenseParams {
        n: 3,
        p: 2,
        train: stage(1),
        stage3: stage(1),
        ..DefenseParams::default()
    };
    let (model, _) = train_ensembler(&params, &spec, plan, &p.train, 4).unwrap();
    let digests: Vec<u64> = model.bodies.iter().map(|b| b.digest()).collect();
    let target = AttackTarget::new(&model.bodies, &spec, plan).unwrap();
    for gate in [GateMode::Joint, GateMode::Uniform] {
        let cfg = ShadowConfig { gate, ..shadow_cfg(2) };
        let s = train_shadow(&target, &p.aux, ShadowVariant::Adaptive, &cfg, 4).unwrap();
        let g = s.gate.unwrap();
        assert_eq!(g.len(), 3);
        assert!(g.iter().all(|&w| w >= 0.0));
        assert!((g.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        if gate == GateMode::Uniform {
            assert!(g.iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-7));
        }
        assert_eq!(s.target_bodies, vec![0, 1, 2]);
    }
    assert_eq!(model.bodies.iter().map(|b| b.digest()).collect::<Vec<_>>(), digests);
}

#[test]
fn shadow_learns_the_task_through_the_body() {
    let p = parts(4, 1024, 5);
    let spec = ArchSpec::new("tiny", &[1, 8, 8], 4);
    let plan = SplitPlan::new(1, 1);
    let part = train_undefended(&spec, plan, &p.train, &stage(10), 5).unwrap();
    let truth = accuracy(&part, &p.eval).unwrap();
    let bodies = vec![part.body.clone()];
    let target = AttackTarget::new(&bodies, &spec, plan).unwrap();
    let s = train_shadow(&target, &p.aux, ShadowVariant::Single(0), &shadow_cfg(10), 5).unwrap();
    let logits = s.logits(&bodies, p.eval.inputs()).unwrap();
    let hits = logits.argmax_rows().iter().zip(p.eval.labels()).filter(|(a, b)| a == b).count();
    let shadow = hits as f64 / p.eval.len() as f64;
    assert!((truth - shadow).abs() <= 0.05, "true {truth:.3} vs shadow {shadow:.3}");
}

#[test]
fn report_maxima_and_leaked_head() {
    let p = parts(4, 512, 6);
    let spec = ArchSpec::new("tiny", &[1, 8, 8], 4);
    let plan = SplitPlan::new(1, 1);
    let params = DefenseParams {
        n: 3,
        p: 2,
        train: stage(2),
        stage3: stage(2),
        ..DefenseParams::default()
    };
    let (model, _) = train_ensembler(&params, &spec, plan, &p.train, 6).unwrap();
    let target = AttackTarget::new(&model.bodies, &spec, plan).unwrap();
    let eval = EvalBatch::new(model.client_features(p.eval.inputs()).unwrap(), p.eval.images().clone()).unwrap();
    let cfg = AttackConfig {
        shadow: shadow_cfg(2),
        decoder: decoder_cfg(4),
        parallel: true,
    };
    let rep = run_attack(&target, &p.aux, &eval, &[StrategyKind::Single, StrategyKind::Adaptive], &cfg, 6).unwrap();
    assert_eq!(rep.singles.len(), 3);
    assert!(rep.adaptive.is_some());
    let best_s = rep.best_ssim().unwrap().ssim;
    let best_p = rep.best_psnr().unwrap().psnr;
    for r in &rep.singles {
        assert!(best_s >= r.ssim && best_p >= r.psnr);
        assert_eq!(r.reconstructions.shape(), p.eval.images().shape());
        assert_eq!(r.budget.decoder_epochs, 4);
    }
    assert_eq!(rep.all().count(), 4);

    let serial = run_attack(&target, &p.aux, &eval, &[StrategyKind::Single], &AttackConfig { parallel: false, ..cfg }, 6).unwrap();
    let a: Vec<f64> = serial.singles.iter().map(|r| r.ssim).collect();
    let b: Vec<f64> = rep.singles.iter().map(|r| r.ssim).collect();
    assert_eq!(a, b);

    let leaked = train_decoder(&model.head, &p.aux, &decoder_cfg(4), 6).unwrap();
    let (_, leaked_ssim, _) = score(&leaked, &eval).unwrap();
    assert!(leaked_ssim > best_s, "leaked {leaked_ssim} vs shadow {best_s}");
}
