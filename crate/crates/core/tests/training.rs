use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sotrack::dataset::*;
use sotrack::eval::ablation::desk_config;
use sotrack::model::Variant;
use sotrack::nn::Scope;
use sotrack::tensor::{grad_check_inputs, GradCheckOptions, Graph, Tensor};
use sotrack::training::*;
use sotrack::Error;

fn scalar(g: &mut Graph<f64>, v: f64) -> sotrack::tensor::Var {
    g.constant(Tensor::scalar(v))
}

fn focal(pred: &[f64], target: &[f64]) -> f64 {
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::new(vec![pred.len()], pred.to_vec()).unwrap());
    let l = g.focal_loss(p, target, FOCAL_CLAMP).unwrap();
    g.value(l).item()
}

fn smooth(pred: &[f64], target: &[f64], mask: &[bool]) -> f64 {
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::new(vec![pred.len()], pred.to_vec()).unwrap());
    let l = g.smooth_l1(p, target, mask).unwrap();
    g.value(l).item()
}

/// A 5×5 soft heat target around cell (2, 1).
fn heat_target() -> Vec<f64> {
    let mut t = vec![0.0; 25];
    for i in 0..5 {
        for j in 0..5 {
            let d = ((i as f64 - 2.0).powi(2) + (j as f64 - 1.0).powi(2)).sqrt();
            t[i * 5 + j] = 1.0 / (1.0 + d);
        }
    }
    t
}

// ---- losses --------------------------------------------------------------

#[test]
fn focal_single_positive_at_half() {
    let want = -(0.5f64).powi(2) * (0.5f64).ln();
    assert!((focal(&[0.5], &[1.0]) - want).abs() < 1e-12);
    assert!((want - 0.1733).abs() < 1e-4);
}

#[test]
fn focal_vanishes_for_a_perfect_prediction() {
    let t = heat_target();
    let p: Vec<f64> = t.iter().map(|&v| if v == 1.0 { 1.0 } else { 0.0 }).collect();
    let l = focal(&p, &t);
    assert!((0.0..1e-3).contains(&l), "{l}");
}

#[test]
fn focal_normalizes_by_positive_count() {
    let one = focal(&[0.3, 0.2], &[1.0, 0.5]);
    let two = focal(&[0.3, 0.2, 0.3, 0.2], &[1.0, 0.5, 1.0, 0.5]);
    assert!((one - two).abs() < 1e-12);
    let neg = -(0.5f64).powi(4) * 0.2f64.powi(2) * 0.8f64.ln();
    let pos = -(0.7f64).powi(2) * 0.3f64.ln();
    assert!((one - (pos + neg)).abs() < 1e-12);
}

#[test]
fn focal_gradients_match_central_differences() {
    let t = heat_target();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[25], |_| rng.gen_range(0.02..0.98));
        let opts = GradCheckOptions { step: 1e-5, ..GradCheckOptions::default() };
        let err = grad_check_inputs(|g, v| g.focal_loss(v[0], &t, FOCAL_CLAMP), &[x], opts).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn focal_gradient_is_zero_inside_the_clamp() {
    let mut g = Graph::<f64>::new();
    let mut x = Tensor::new(vec![2], vec![1e-6, 0.5]).unwrap();
    x.requires_grad = true;
    let p = g.leaf(x);
    let l = g.focal_loss(p, &[1.0, 0.0], FOCAL_CLAMP).unwrap();
    assert!(g.value(l).item().is_finite());
    g.backward(l).unwrap();
    assert_eq!(g.grad(p).unwrap()[0], 0.0);
    assert!(g.grad(p).unwrap()[1] > 0.0);
}

#[test]
fn smooth_l1_hand_values() {
    assert_eq!(smooth(&[3.0], &[3.0], &[true]), 0.0);
    assert_eq!(smooth(&[0.5], &[0.0], &[true]), 0.125);
    assert_eq!(smooth(&[-2.0], &[0.0], &[true]), 1.5);
    // Unsupervised elements are ignored, the mean runs over the rest.
    assert_eq!(smooth(&[0.5, 9.0, 2.0], &[0.0; 3], &[true, false, true]), (0.125 + 1.5) / 2.0);
}

#[test]
fn smooth_l1_gradients_match_central_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Keep every residual away from the |d| = 1 seam.
        let target: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d: Vec<f64> = (0..12)
            .map(|_| {
                let m = rng.gen_range(0.05..0.9) + if rng.gen_bool(0.5) { 1.15 } else { 0.0 };
                if rng.gen_bool(0.5) { m } else { -m }
            })
            .collect();
        let mask: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
        let x = Tensor::new(vec![12], target.iter().zip(&d).map(|(t, d)| t + d).collect()).unwrap();
        let err =
            grad_check_inputs(|g, v| g.smooth_l1(v[0], &target, &mask), &[x], GradCheckOptions::default()).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn chamfer_gradients_match_central_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Tensor::from_fn(&[7, 3], |_| rng.gen_range(-1.0..1.0));
        let q = Tensor::from_fn(&[9, 3], |_| rng.gen_range(-1.0..1.0));
        let opts = GradCheckOptions { step: 1e-5, ..GradCheckOptions::default() };
        let err = grad_check_inputs(|g, v| g.chamfer(v[0], v[1]), &[p, q], opts).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn combination_is_the_stated_weighted_sum() {
    let w = LossWeights::for_category(Category::NonRigid);
    let mut g = Graph::<f64>::new();
    let c: Vec<_> = [1.0, 2.0, 3.0, 4.0].iter().map(|&v| scalar(&mut g, v)).collect();
    let t = combine(&mut g, c[0], c[1], c[2], c[3], &w).unwrap();
    let v = t.values(&g);
    assert!((v.total - 9.000004).abs() < 1e-12);
    assert_eq!((v.hm, v.off, v.z, v.cd), (1.0, 2.0, 3.0, 4.0));

    let zeros: Vec<_> = (0..4).map(|_| scalar(&mut g, 0.0)).collect();
    let t = combine(&mut g, zeros[0], zeros[1], zeros[2], zeros[3], &w).unwrap();
    assert_eq!(t.values(&g).total, 0.0);
}

#[test]
fn dropping_the_chamfer_weight_leaves_the_detection_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let x: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.0..10.0));
        let w = LossWeights { lambda1: 1.0, lambda2: 2.0, lambda3: 0.0 };
        let mut g = Graph::<f64>::new();
        let c: Vec<_> = x.iter().map(|&v| scalar(&mut g, v)).collect();
        let t = combine(&mut g, c[0], c[1], c[2], c[3], &w).unwrap();
        assert_eq!(t.values(&g).total, (x[0] + x[1]) + 2.0 * x[2]);
    }
}

#[test]
fn chamfer_weight_follows_the_category() {
    assert_eq!(LossWeights::for_category(Category::NonRigid).lambda3, 1e-6);
    assert_eq!(LossWeights::for_category(Category::Rigid).lambda3, 2e-7);
    for c in [Category::Rigid, Category::NonRigid] {
        let w = LossWeights::for_category(c);
        assert_eq!((w.lambda1, w.lambda2), (1.0, 2.0));
    }
}

#[test]
fn non_finite_components_are_named() {
    let w = LossWeights::for_category(Category::Rigid);
    let mut g = Graph::<f64>::new();
    let c: Vec<_> = [0.1, 0.2, f64::NAN, 0.4].iter().map(|&v| scalar(&mut g, v)).collect();
    let t = combine(&mut g, c[0], c[1], c[2], c[3], &w).unwrap();
    match t.check_finite(&g, 7) {
        Err(Error::NonFiniteLoss { component, step }) => assert_eq!((component, step), ("z", 7)),
        other => panic!("{other:?}"),
    }
}

// ---- training loop -------------------------------------------------------

fn data(kind: TargetKind) -> Vec<Sequence> {
    let spec = SynthSpec { num_sequences: 3, frames_per_seq: 6, target_kind: kind, clutter_count: 4, point_density: 40.0 };
    generate_synthetic(11, &spec).unwrap()
}

fn cfg(seed: u64) -> TrainConfig {
    let mut c = desk_config();
    c.seed = seed;
    c.sample.search_points = 256;
    c.sample.template_points = 128;
    c.model.backbone.search_fps = vec![64, 32];
    c.model.backbone.template_fps = vec![32, 16];
    c.model.tapm.prototype_count = 16;
    c
}

#[test]
fn every_component_is_nonnegative_and_reported() {
    let seqs = data(TargetKind::CapsulePair);
    let t = Trainer::new(cfg(0)).unwrap();
    for step in 0..5 {
        let x = &t.batch(&seqs, step).unwrap()[0];
        let mut s = Scope::new(&t.store, true);
        let v = sample_loss(&t.model, &mut s, x).unwrap().check_finite(&s.g, step).unwrap();
        for c in [v.hm, v.off, v.z, v.cd] {
            assert!(c >= 0.0 && c.is_finite());
        }
        let w = LossWeights::for_category(x.category);
        let want = w.lambda1 * (v.hm + v.off) + w.lambda2 * v.z + w.lambda3 * v.cd;
        // Values are stored in f32.
        assert!((v.total - want).abs() <= 1e-6 * want.abs().max(1.0));
    }
}

#[test]
fn every_parameter_group_receives_gradient() {
    let seqs = data(TargetKind::CapsulePair);
    let t = Trainer::new(cfg(1)).unwrap();
    let x = &t.batch(&seqs, 0).unwrap()[0];
    let mut s = Scope::new(&t.store, true);
    let terms = sample_loss(&t.model, &mut s, x).unwrap();
    s.g.backward(terms.total).unwrap();
    let grads = s.param_grads();
    let mut groups = std::collections::BTreeMap::<String, f64>::new();
    for ((_, name, _), g) in t.store.iter().zip(&grads) {
        let group = name.split('.').next().unwrap().to_string();
        *groups.entry(group).or_default() += g.iter().map(|v| (*v as f64).abs()).sum::<f64>();
    }
    assert!(groups.len() >= 4, "{groups:?}");
    for (group, mag) in &groups {
        assert!(*mag > 0.0, "group `{group}` has no gradient");
    }
}

/// Repeats one fixed sample; returns the losses of the first and last step.
fn overfit(seed: u64, steps: usize) -> (LossValues, LossValues) {
    let seqs = data(TargetKind::CapsulePair);
    let mut t = Trainer::new(cfg(seed)).unwrap();
    let x = t.batch(&seqs, 0).unwrap().remove(0);
    let mut first = None;
    let mut last = LossValues::default();
    for _ in 0..steps {
        let mut s = Scope::new(&t.store, true);
        let terms = sample_loss(&t.model, &mut s, &x).unwrap();
        last = terms.check_finite(&s.g, 0).unwrap();
        first.get_or_insert(last);
        s.g.backward(terms.total).unwrap();
        let grads: Vec<Vec<f64>> = s.param_grads().into_iter().map(|g| g.into_iter().map(f64::from).collect()).collect();
        drop(s);
        t.adam.step(&mut t.store, &grads).unwrap();
    }
    (first.unwrap(), last)
}

#[test]
fn fifty_steps_on_one_sample_lower_the_loss() {
    for seed in 0..3 {
        let (first, last) = overfit(seed, 50);
        assert!(last.total < first.total, "seed {seed}: {} -> {}", first.total, last.total);
        assert!(last.cd < first.cd, "seed {seed}: chamfer {} -> {}", first.cd, last.cd);
    }
}

#[test]
fn batches_depend_only_on_seed_and_step() {
    let seqs = data(TargetKind::Cylinder);
    let a = Trainer::new(cfg(4)).unwrap();
    let b = Trainer::new(cfg(4)).unwrap();
    for step in [0, 3, 17] {
        let (x, y) = (&a.batch(&seqs, step).unwrap()[0], &b.batch(&seqs, step).unwrap()[0]);
        assert_eq!((&x.search, &x.template, &x.gt), (&y.search, &y.template, &y.gt));
        assert_eq!(x.category, Category::Rigid);
    }
    let other = &a.batch(&seqs, 1).unwrap()[0];
    assert_ne!(other.search, a.batch(&seqs, 0).unwrap()[0].search);
}

fn params(t: &Trainer) -> Vec<(String, Vec<f32>)> {
    t.store.iter().map(|(_, n, v)| (n.to_string(), v.data().to_vec())).collect()
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let seqs = data(TargetKind::CapsulePair);
    let dir = tempfile::tempdir().unwrap();
    let mut c = cfg(2);
    c.model.variant = Variant { tapm: true, vit: false, shuffle: true };
    c.steps = 6;
    c.checkpoint_every = 3;

    let (ck_a, log_a) = (dir.path().join("a.ckpt"), dir.path().join("a.csv"));
    let mut a = Trainer::new(c.clone()).unwrap();
    a.run(&seqs, &ck_a, &log_a).unwrap();

    let (ck_b, log_b) = (dir.path().join("b.ckpt"), dir.path().join("b.csv"));
    let mut b = Trainer::new(TrainConfig { steps: 3, ..c.clone() }).unwrap();
    b.run(&seqs, &ck_b, &log_b).unwrap();
    drop(b);
    let mut b = Trainer::load(&ck_b).unwrap();
    assert_eq!(b.step, 3);
    b.cfg.steps = 6;
    b.run(&seqs, &ck_b, &log_b).unwrap();

    assert_eq!(params(&a), params(&b));
    assert_eq!(a.adam.m, b.adam.m);
    assert_eq!(a.adam.v, b.adam.v);
    assert_eq!(fs::read(&log_a).unwrap(), fs::read(&log_b).unwrap());
    let log = fs::read_to_string(&log_a).unwrap();
    assert_eq!(log.lines().next(), Some(LOG_HEADER));
    assert_eq!(log.lines().count(), 7);
    assert_eq!(fs::read(&ck_a).unwrap(), fs::read(&ck_b).unwrap());
}

#[test]
fn non_finite_loss_stops_and_keeps_the_last_checkpoint() {
    let seqs = data(TargetKind::CapsulePair);
    let dir = tempfile::tempdir().unwrap();
    let (ck, log) = (dir.path().join("m.ckpt"), dir.path().join("m.csv"));
    let mut c = cfg(3);
    c.steps = 2;
    c.checkpoint_every = 2;
    let mut t = Trainer::new(c).unwrap();
    t.run(&seqs, &ck, &log).unwrap();
    let saved = fs::read(&ck).unwrap();

    t.cfg.steps = 4;
    let id = t.store.id_of("head.heat.b").or_else(|| t.store.ids().last()).unwrap();
    t.store.get_mut(id).data_mut()[0] = f32::NAN;
    let err = t.run(&seqs, &ck, &log).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 3, .. }), "{err}");
    assert_eq!(fs::read(&ck).unwrap(), saved);
}

// ---- checkpoint format ---------------------------------------------------

#[test]
fn checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = Tensor::<f32>::from_fn(&[3, 4], |_| rng.gen_range(-1.0..1.0));
    let b = Tensor::<f32>::scalar(2.5);
    let bytes = encode_checkpoint(&[("enc.w".into(), &a), ("β".into(), &b)]);
    assert_eq!(&bytes[..4], b"STK1");
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back, vec![("enc.w".to_string(), a), ("β".to_string(), b)]);
}

#[test]
fn checkpoint_rejects_bad_magic_and_truncation() {
    let t = Tensor::<f32>::from_fn(&[2, 2], |i| i as f32);
    let bytes = encode_checkpoint(&[("w".into(), &t)]);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::BadMagic { .. })));
    assert!(matches!(decode_checkpoint(b"ST"), Err(Error::BadMagic { .. })));
    for cut in [5, 9, bytes.len() - 1] {
        assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Truncated(_))), "cut {cut}");
    }
    assert!(decode_checkpoint(b"STK1").unwrap().is_empty());
}

#[test]
fn loading_rejects_a_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("x.ckpt");
    let t = Trainer::new(cfg(0)).unwrap();
    t.save(&ck).unwrap();
    assert!(Trainer::load(&ck).is_ok());
    let w = Tensor::<f32>::zeros(&[1]);
    fs::write(&ck, encode_checkpoint(&[("encoder.stage0.l0.w".into(), &w)])).unwrap();
    assert!(matches!(Trainer::load(&ck), Err(Error::Checkpoint(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = cfg(0);
    c.batch_size = 0;
    assert!(matches!(Trainer::new(c), Err(Error::InvalidArgument(_))));
    let mut c = cfg(0);
    c.optimizer.lr = -1.0;
    assert!(matches!(Trainer::new(c), Err(Error::InvalidArgument(_))));
}
