use proptest::prelude::*;
use splitshield::defense::{
    baseline_defense, batch_cosine, choose_selector, ensembler_infer, selector_combine, stage1_seeds, stage1_train, stage3_train, train_ensembler,
    train_noise, DefenseKind, DefenseParams, NoiseSpec, Routing, SelectorKey, StageConfig,
};
use splitshield::harness::{load_dataset, DatasetSpec};
use splitshield::nn::train::cross_entropy;
use splitshield::nn::{build_model, split, train_epochs, ArchSpec, Loss, ModelPartition, SgdConfig, SplitPlan};
use splitshield::{rng, LabeledDataset, Tensor};

fn shapes(samples: usize, seed: u64) -> LabeledDataset {
    let spec = DatasetSpec {
        samples,
        ..DatasetSpec::default()
    };
    load_dataset(&spec, seed).unwrap()
}

fn tiny() -> ArchSpec {
    ArchSpec::new("tiny", &[1, 8, 8], 4)
}

fn stage(epochs: usize) -> StageConfig {
    StageConfig {
        epochs,
        optim: SgdConfig {
            lr: 0.02,
            momentum: 0.9,
            batch_size: 32,
            weight_decay: 0.0,
        },
    }
}

fn params(n: usize, p: usize, sigma: f32, lambda: f32, epochs: usize) -> DefenseParams {
    DefenseParams {
        n,
        p,
        sigma,
        lambda,
        train: stage(epochs),
        stage3: stage(epochs),
        ..DefenseParams::default()
    }
}

fn probe(data: &LabeledDataset, k: usize) -> Tensor {
    data.inputs().slice_batch(0, k)
}

#[test]
fn degenerate_ensemble_is_the_plain_pipeline() {
    let data = shapes(192, 1);
    let plan = SplitPlan::new(1, 1);
    let (model, _) = train_ensembler(&params(1, 1, 0.0, 0.0, 2), &tiny(), plan, &data, 1).unwrap();
    assert_eq!(model.key.activated, vec![0]);
    assert!(model.noise.tensor.data().iter().all(|&v| v == 0.0));
    let plain = ModelPartition {
        head: model.head.clone(),
        body: model.bodies[0].clone(),
        tail: model.tail.clone(),
    };
    let x = probe(&data, 64);
    assert_eq!(ensembler_infer(&model, &x).unwrap(), plain.forward(&x).unwrap());
}

#[test]
fn noiseless_single_stage1_equals_train_epochs() {
    let data = shapes(160, 2);
    let plan = SplitPlan::new(1, 1);
    let cfg = stage(2);
    let (models, noises) = stage1_train(&tiny(), plan, &data, 1, 0.0, &cfg, 9).unwrap();
    assert_eq!(noises[0].norm(), 0.0);
    let (init, _, shuffle) = stage1_seeds(9, 0);
    let (reference, _) = train_epochs(&build_model(&tiny(), init).unwrap(), &data, Loss::CrossEntropy, &cfg.optim, cfg.epochs, shuffle).unwrap();
    let x = probe(&data, 32);
    assert_eq!(models[0].forward(&x).unwrap(), reference.forward(&x).unwrap());
}

#[test]
fn stage1_heads_are_distinct() {
    let data = shapes(192, 3);
    let plan = SplitPlan::new(1, 1);
    let (models, noises) = stage1_train(&tiny(), plan, &data, 2, 0.1, &stage(2), 3).unwrap();
    assert_ne!(noises[0].tensor, noises[1].tensor);
    let x = probe(&data, 64);
    let h0 = split(&models[0], plan).unwrap().head.forward(&x).unwrap();
    let h1 = split(&models[1], plan).unwrap().head.forward(&x).unwrap();
    let (cs, _) = batch_cosine(&h0, &h1).unwrap();
    assert!(cs < 0.99, "cs {cs}");
}

#[test]
fn zero_lambda_objective_is_sum_of_path_cross_entropies() {
    let data = shapes(160, 4);
    let plan = SplitPlan::new(1, 1);
    let mut p = params(3, 2, 0.1, 0.0, 1);
    let (model, _) = train_ensembler(&p, &tiny(), plan, &data, 4).unwrap();
    let x = probe(&data, 32);
    let labels = &data.labels()[..32];
    let obj = model.objective(&x, labels, &p.stage3_config()).unwrap();
    assert_eq!(obj.path_ce.len(), 2);
    assert!((obj.total - obj.path_ce.iter().sum::<f32>()).abs() <= 1e-6);

    // Path i: only slot i of the tail input is filled.
    let z = model.client_features(&x).unwrap();
    let outs = model.server_outputs(&z).unwrap();
    for (slot, (&i, &s)) in model.key.activated.iter().zip(&model.key.weights).enumerate() {
        let parts: Vec<Tensor> = (0..2)
            .map(|k| if k == slot { outs[i].scale(s) } else { Tensor::zeros(outs[i].shape()) })
            .collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        let logits = model.tail.forward(&Tensor::concat_channels(&refs).unwrap()).unwrap();
        let (ce, _) = cross_entropy(&logits, labels);
        assert!((ce - obj.path_ce[slot]).abs() <= 1e-6, "path {slot}: {ce} vs {}", obj.path_ce[slot]);
    }

    p.lambda = 2.5;
    let reg = model.objective(&x, labels, &p.stage3_config()).unwrap();
    let want = reg.path_ce.iter().sum::<f32>() + 2.5 * reg.max_similarity();
    assert!((reg.total - want).abs() <= 1e-5);

    p.routing = Routing::Joint;
    p.lambda = 0.0;
    let joint = model.objective(&x, labels, &p.stage3_config()).unwrap();
    let (ce, _) = cross_entropy(&ensembler_infer(&model, &x).unwrap(), labels);
    assert_eq!(joint.path_ce.len(), 1);
    assert!((joint.path_ce[0] - ce).abs() <= 1e-6);
}

#[test]
fn stage3_lowers_similarity_and_freezes_bodies() {
    let data = shapes(256, 5);
    let plan = SplitPlan::new(1, 1);
    let p = params(4, 2, 0.1, 1.0, 3);
    let spec = tiny();
    let (stage1, _) = stage1_train(&spec, plan, &data, p.n, p.sigma, &p.train, 5).unwrap();
    let digests: Vec<u64> = stage1.iter().map(|m| split(m, plan).unwrap().body.digest()).collect();
    let key = choose_selector(4, 2, 17).unwrap();
    let mut at_init = p.stage3_config();
    at_init.train.epochs = 0;
    let (before, _) = stage3_train(&spec, plan, &stage1, &key, &data, p.sigma, &at_init, 5).unwrap();
    let (after, losses) = stage3_train(&spec, plan, &stage1, &key, &data, p.sigma, &p.stage3_config(), 5).unwrap();
    assert_eq!(losses.len(), 3);

    let x = probe(&data, 128);
    let labels = &data.labels()[..128];
    let cs_before = before.objective(&x, labels, &p.stage3_config()).unwrap().max_similarity();
    let cs_after = after.objective(&x, labels, &p.stage3_config()).unwrap().max_similarity();
    assert!(cs_after < cs_before, "max CS {cs_before} -> {cs_after}");

    for (b, d) in after.bodies.iter().zip(&digests) {
        assert_eq!(b.digest(), *d);
    }
    assert_eq!(after.stage1_heads.len(), 4);
}

#[test]
fn ensemble_logits_and_determinism() {
    let data = shapes(160, 6);
    let plan = SplitPlan::new(1, 1);
    let p = params(3, 2, 0.1, 1.0, 1);
    let (a, _) = train_ensembler(&p, &tiny(), plan, &data, 6).unwrap();
    let (b, _) = train_ensembler(&p, &tiny(), plan, &data, 6).unwrap();
    assert_eq!(a, b);
    let x = probe(&data, 16);
    let y = ensembler_infer(&a, &x).unwrap();
    assert_eq!(y.shape(), &[16, 4]);
    assert_eq!(y.argmax_rows(), ensembler_infer(&a, &x).unwrap().argmax_rows());
    let z = a.client_features(&x).unwrap();
    assert_eq!(a.server_outputs(&z).unwrap(), a.server_outputs_parallel(&z).unwrap());
}

#[test]
fn ensembler_without_tail_is_rejected() {
    let data = shapes(64, 7);
    assert!(train_ensembler(&params(3, 2, 0.1, 1.0, 1), &tiny(), SplitPlan::new(2, 0), &data, 7).is_err());
}

#[test]
fn undefended_client_sends_the_head_output() {
    let data = shapes(128, 8);
    let d = baseline_defense(DefenseKind::None, &params(1, 1, 0.1, 1.0, 1), &tiny(), SplitPlan::new(1, 1), &data, 8).unwrap();
    let x = probe(&data, 32);
    assert_eq!(d.client_forward(&x).unwrap(), d.head.forward(&x).unwrap());
    assert!(d.noise().is_none());
}

#[test]
fn single_noise_adds_its_fixed_tensor() {
    let data = shapes(128, 9);
    let d = baseline_defense(DefenseKind::SingleNoise, &params(1, 1, 0.1, 1.0, 1), &tiny(), SplitPlan::new(1, 1), &data, 9).unwrap();
    let x = probe(&data, 8);
    let noise = d.noise().unwrap();
    assert_eq!(noise.sigma, 0.1);
    let want = d.head.forward(&x).unwrap().add_broadcast(&noise.tensor).unwrap();
    assert_eq!(d.client_forward(&x).unwrap(), want);
    assert_eq!(d.client_forward(&x).unwrap(), d.client_forward(&x).unwrap());
}

#[test]
fn dropout_defenses_resample_masks() {
    let data = shapes(128, 10);
    let x = probe(&data, 8);
    for kind in [DefenseKind::DropoutSingle, DefenseKind::DropoutEnsemble] {
        let d = baseline_defense(kind, &params(3, 2, 0.1, 1.0, 1), &tiny(), SplitPlan::new(1, 1), &data, 10).unwrap();
        let first = d.client_forward(&x).unwrap();
        assert_ne!(first, d.client_forward(&x).unwrap(), "{kind}");
        d.reset_calls();
        assert_eq!(first, d.client_forward(&x).unwrap(), "{kind}");
        let h = d.head.forward(&x).unwrap();
        for (v, o) in first.data().iter().zip(h.data()) {
            assert!(*v == 0.0 || (*v - o / 0.7).abs() <= 1e-5 * (1.0 + o.abs()));
        }
    }
}

#[test]
fn trained_noise_without_reward_does_not_grow() {
    let data = shapes(192, 11);
    let plan = SplitPlan::new(1, 1);
    let spec = tiny();
    let (m, _) = train_epochs(&build_model(&spec, 11).unwrap(), &data, Loss::CrossEntropy, &stage(3).optim, 3, 11).unwrap();
    let part = split(&m, plan).unwrap();
    let init = NoiseSpec::sample(0.1, 12, part.head.output_shape()).unwrap();
    let flat = train_noise(&part, init.clone(), &data, 0.0, 0.01, 3, 32, 11).unwrap();
    assert!(flat.norm() <= init.norm() * 1.05, "{} -> {}", init.norm(), flat.norm());
    let rewarded = train_noise(&part, init.clone(), &data, 1.0, 0.01, 3, 32, 11).unwrap();
    assert!(rewarded.norm() > flat.norm());
}

#[test]
fn key_validation() {
    assert!(SelectorKey::new(3, vec![], vec![]).is_err());
    assert!(SelectorKey::new(3, vec![2, 1], vec![0.5, 0.5]).is_err());
    assert!(SelectorKey::new(3, vec![1, 3], vec![0.5, 0.5]).is_err());
    assert!(SelectorKey::new(3, vec![0, 1], vec![1.0]).is_err());
    assert!(choose_selector(4, 0, 1).is_err());
    assert!(choose_selector(4, 5, 1).is_err());
    let k = choose_selector(10, 4, 3).unwrap();
    assert_eq!(k, choose_selector(10, 4, 3).unwrap());
    assert!(k.weights.iter().all(|&w| w == 0.25));
    // Every index is reachable.
    let mut seen = [false; 6];
    for s in 0..200 {
        for i in choose_selector(6, 2, s).unwrap().activated {
            seen[i] = true;
        }
    }
    assert!(seen.iter().all(|&b| b));
}

fn key_strategy() -> impl Strategy<Value = (usize, Vec<usize>, Vec<f32>, [usize; 4], u64)> {
    (1usize..7)
        .prop_flat_map(|n| (Just(n), proptest::sample::subsequence((0..n).collect::<Vec<_>>(), 1..=n)))
        .prop_flat_map(|(n, act)| {
            let p = act.len();
            (
                Just(n),
                Just(act),
                proptest::collection::vec(0.0f32..2.0, p),
                (1usize..4, 1usize..4, 1usize..5, 1usize..5).prop_map(|(b, c, h, w)| [b, c, h, w]),
                any::<u64>(),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn selector_contract((n, activated, weights, shape, seed) in key_strategy()) {
        let key = SelectorKey::new(n, activated.clone(), weights.clone()).unwrap();
        let outputs: Vec<Tensor> = (0..n).map(|i| Tensor::randn(&shape, 1.0, &mut rng::indexed_stream(seed, "sel", i))).collect();
        let y = selector_combine(&outputs, &key).unwrap();
        let [b, c, h, w] = shape;
        prop_assert_eq!(y.shape(), &[b, activated.len() * c, h, w][..]);
        let plane = c * h * w;
        for s in 0..b {
            for (slot, (&i, &wt)) in activated.iter().zip(&weights).enumerate() {
                let got = &y.sample(s)[slot * plane..(slot + 1) * plane];
                let want: Vec<f32> = outputs[i].sample(s).iter().map(|v| v * wt).collect();
                prop_assert_eq!(got, &want[..]);
            }
        }
        // Doubling one selected map doubles exactly its slice.
        let mut doubled = outputs.clone();
        doubled[activated[0]] = outputs[activated[0]].scale(2.0);
        let y2 = selector_combine(&doubled, &key).unwrap();
        for s in 0..b {
            let (a, d) = (y.sample(s), y2.sample(s));
            for k in 0..plane {
                prop_assert_eq!(d[k], 2.0 * a[k]);
            }
            prop_assert_eq!(&d[plane..], &a[plane..]);
        }
    }
}
