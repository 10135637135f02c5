use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sotrack::geometry::{Box3D, PointCloud};
use sotrack::model::*;
use sotrack::nn::{grad_check_params, Builder, ParamStore, Scope};
use sotrack::tensor::{GradCheckOptions, Graph, Tensor};

const TOL: f64 = 1e-4;

fn opts() -> GradCheckOptions {
    GradCheckOptions { step: 1e-3, max_elements: Some(24), refinements: 3 }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn cloud(n: usize, half: [f64; 3], rng: &mut ChaCha8Rng) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| half.map(|h| rng.gen_range(-h..h) as f32))
            .collect(),
    )
}

/// A 4×6 input grid, eight channels, one block everywhere.
fn small_cfg(variant: Variant) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            feature_dim: 8,
            search_fps: vec![16, 8],
            template_fps: vec![8, 4],
            neighbor_k: 4,
            heads: 2,
        },
        tapm: TapmConfig { prototype_count: 4, depth: 1, heads: 2 },
        bev: BevConfig { voxel_size: 0.2, x_range: [-0.4, 0.4], y_range: [-0.6, 0.6], z_range: [-1.0, 1.0] },
        head: HeadConfig { vit_depth: 1, vit_heads: 2, vit_channels: 16, trunk_channels: 4 },
        variant,
    }
}

/// Moves every parameter off its initialization (zero biases put ReLU
/// inputs exactly on the kink) to a generic point.
fn generic(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
    }
}

fn small_model(variant: Variant, seed: u64) -> (ModelConfig, ParamStore<f64>, Model) {
    let cfg = small_cfg(variant);
    let mut store = ParamStore::new();
    let model = Model::new(cfg.clone(), &mut store, seed).unwrap();
    (cfg, store, model)
}

fn weighted_sum(s: &mut Scope<f64>, x: sotrack::tensor::Var, w: &Tensor<f64>) -> sotrack::Result<sotrack::tensor::Var> {
    let wv = s.input(w.clone());
    let y = s.g.mul(x, wv)?;
    s.g.sum(y)
}

// ---- backbone ----------------------------------------------------------

#[test]
fn encoder_gradients_match_central_differences() {
    for seed in 0..10 {
        let (cfg, mut store, model) = small_model(Variant::BASELINE, seed);
        generic(&mut store, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let pc = cloud(32, [0.5, 0.5, 0.5], &mut rng);
        let w = random(&[8, 8], &mut rng);
        let fps = cfg.backbone.search_fps.clone();
        let err = grad_check_params(&store, &[], opts(), |s, _| {
            let e = model.encoder.encode(s, &pc, &fps)?;
            weighted_sum(s, e.feats, &w)
        })
        .unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn pointwise_features_follow_point_order() {
    let (_, store, model) = small_model(Variant::BASELINE, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pc = cloud(10, [1.0, 1.0, 1.0], &mut rng);
    let perm: Vec<usize> = (0..10).rev().collect();
    let mut s = Scope::new(&store, false);
    let a = model.encoder.pointwise(&mut s, 0, &pc, None).unwrap();
    let b = model.encoder.pointwise(&mut s, 0, &pc.select(&perm), None).unwrap();
    let (a, b) = (s.g.value(a).clone(), s.g.value(b).clone());
    for (r, &p) in perm.iter().enumerate() {
        assert_eq!(b.row(r), a.row(p));
    }
}

#[test]
fn template_and_search_share_encoder_weights() {
    let (cfg, store, model) = small_model(Variant::BASELINE, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (search, template) = (cloud(20, [0.5; 3], &mut rng), cloud(10, [0.3; 3], &mut rng));
    let bb = &cfg.backbone;
    assert_eq!(store.iter().filter(|(_, n, _)| n.starts_with("encoder.stage0.l0")).count(), 2);

    let grads = |which: [bool; 2]| {
        let mut s = Scope::new(&store, true);
        let mut terms = Vec::new();
        if which[0] {
            let e = model.encoder.encode(&mut s, &template, &bb.template_fps).unwrap();
            terms.push(s.g.sum(e.feats).unwrap());
        }
        if which[1] {
            let e = model.encoder.encode(&mut s, &search, &bb.search_fps).unwrap();
            terms.push(s.g.sum(e.feats).unwrap());
        }
        let l = terms.iter().skip(1).fold(terms[0], |acc, &t| s.g.add(acc, t).unwrap());
        s.g.backward(l).unwrap();
        s.param_grads()
    };
    let (both, t, x) = (grads([true, true]), grads([true, false]), grads([false, true]));
    for ((b, t), x) in both.iter().zip(&t).zip(&x) {
        for ((b, t), x) in b.iter().zip(t).zip(x) {
            assert!((b - (t + x)).abs() < 1e-12);
        }
    }
}

#[test]
fn encoder_rejects_too_few_points() {
    let (cfg, store, model) = small_model(Variant::BASELINE, 0);
    let mut s = Scope::new(&store, false);
    let pc = cloud(5, [1.0; 3], &mut ChaCha8Rng::seed_from_u64(0));
    assert!(model.encoder.encode(&mut s, &pc, &cfg.backbone.search_fps).is_err());
}

#[test]
fn fusion_gradients_match_central_differences() {
    for seed in 0..10 {
        let (_, mut store, model) = small_model(Variant::BASELINE, 20 + seed);
        generic(&mut store, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (ft, fs, w) = (random(&[4, 8], &mut rng), random(&[6, 8], &mut rng), random(&[6, 8], &mut rng));
        let err = grad_check_params(&store, &[ft, fs], opts(), |s, v| {
            let y = model.fusion.forward(s, v[0], v[1])?;
            weighted_sum(s, y, &w)
        })
        .unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn fusion_ignores_template_row_order() {
    let (_, store, model) = small_model(Variant::BASELINE, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (ft, fs) = (random(&[5, 8], &mut rng), random(&[7, 8], &mut rng));
    let perm = [3, 0, 4, 2, 1];
    let ft_perm = Tensor::from_fn(&[5, 8], |k| ft.row(perm[k / 8])[k % 8]);
    let run = |t: &Tensor<f64>| {
        let mut s = Scope::new(&store, false);
        let (a, b) = (s.input(t.clone()), s.input(fs.clone()));
        let y = model.fusion.forward(&mut s, a, b).unwrap();
        s.g.data(y).to_vec()
    };
    for (a, b) in run(&ft).iter().zip(run(&ft_perm)) {
        assert!((a - b).abs() < 1e-12);
    }
    let mut s = Scope::new(&store, false);
    let (a, b) = (s.input(Tensor::zeros(&[5, 6])), s.input(fs.clone()));
    assert!(model.fusion.forward(&mut s, a, b).is_err());
}

#[test]
fn two_token_attention_is_a_convex_mix() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let (q, k, v) = (random(&[1, 4], &mut rng), random(&[2, 4], &mut rng), random(&[2, 4], &mut rng));
        let mut g = Graph::<f64>::new();
        let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v.clone()));
        let y = g.attention(qv, kv, vv, 1).unwrap();
        let y = g.data(y);
        let (v0, v1) = (v.row(0), v.row(1));
        let a = (y[0] - v1[0]) / (v0[0] - v1[0]);
        assert!((0.0..=1.0).contains(&a));
        for c in 0..4 {
            assert!((y[c] - (a * v0[c] + (1.0 - a) * v1[c])).abs() < 1e-9);
        }
    }
}

// ---- prototype mining ------------------------------------------------------

fn tapm_model(seed: u64) -> (ModelConfig, ParamStore<f64>, Model) {
    small_model(Variant { tapm: true, vit: false, shuffle: false }, seed)
}

#[test]
fn tapm_gradients_match_central_differences() {
    for seed in 0..10 {
        let (cfg, mut store, model) = tapm_model(30 + seed);
        generic(&mut store, seed);
        let tapm = model.tapm.as_ref().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let fused = random(&[6, 8], &mut rng);
        let (wm, wp) = (random(&[6, 1], &mut rng), random(&[4, 8], &mut rng));
        let target = cloud(5, [0.3; 3], &mut rng).to_tensor::<f64>().unwrap();
        let vol = cfg.volume();
        let err = grad_check_params(&store, &[], opts(), |s, _| {
            let f = s.input(fused.clone());
            let (m, protos, coords) = tapm.forward(s, f, &vol)?;
            let a = weighted_sum(s, m, &wm)?;
            let b = weighted_sum(s, protos, &wp)?;
            let q = s.input(target.clone());
            let c = s.g.chamfer(coords, q)?;
            let ab = s.g.add(a, b)?;
            s.g.add(ab, c)
        })
        .unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn mask_saturates_with_its_bias() {
    let (_, mut store, model) = tapm_model(1);
    let tapm = model.tapm.as_ref().unwrap();
    let fused = random(&[6, 8], &mut ChaCha8Rng::seed_from_u64(1));
    store.get_mut(tapm.mask.w).data_mut().fill(0.0);
    for (bias, want, tol) in [(0.0, 0.5, 0.0), (20.0, 1.0, 1e-6)] {
        store.get_mut(tapm.mask.b.unwrap()).data_mut().fill(bias);
        let mut s = Scope::new(&store, false);
        let f = s.input(fused.clone());
        let (m, enhanced) = tapm.mask_and_enhance(&mut s, f).unwrap();
        assert!(s.g.data(m).iter().all(|&v| (v - want).abs() <= tol), "bias {bias}");
        for (e, x) in s.g.data(enhanced).iter().zip(fused.data()) {
            assert!((e - want * x).abs() <= tol * x.abs() + 1e-15);
        }
    }
}

#[test]
fn prototypes_ignore_search_row_order() {
    let (cfg, store, model) = tapm_model(2);
    let tapm = model.tapm.as_ref().unwrap();
    let fused = random(&[6, 8], &mut ChaCha8Rng::seed_from_u64(3));
    let perm = [5, 3, 1, 0, 2, 4];
    let permuted = Tensor::from_fn(&[6, 8], |k| fused.row(perm[k / 8])[k % 8]);
    let run = |t: &Tensor<f64>| {
        let mut s = Scope::new(&store, false);
        let f = s.input(t.clone());
        let (m, p, c) = tapm.forward(&mut s, f, &cfg.volume()).unwrap();
        (s.g.data(m).to_vec(), s.g.data(p).to_vec(), s.g.data(c).to_vec())
    };
    let ((m0, p0, c0), (m1, p1, c1)) = (run(&fused), run(&permuted));
    for (a, b) in p0.iter().zip(&p1).chain(c0.iter().zip(&c1)) {
        assert!((a - b).abs() < 1e-6);
    }
    for (r, &p) in perm.iter().enumerate() {
        assert!((m1[r] - m0[p]).abs() < 1e-12);
    }
}

#[test]
fn zero_decoder_places_prototypes_at_region_center() {
    let (cfg, mut store, model) = tapm_model(4);
    let tapm = model.tapm.as_ref().unwrap();
    let last = tapm.coords.layers.last().unwrap();
    store.get_mut(last.w).data_mut().fill(0.0);
    store.get_mut(last.b.unwrap()).data_mut().fill(0.0);
    let mut s = Scope::new(&store, false);
    let f = s.input(random(&[6, 8], &mut ChaCha8Rng::seed_from_u64(5)));
    let (_, _, c) = tapm.forward(&mut s, f, &cfg.volume()).unwrap();
    let vol = cfg.volume();
    for row in s.g.data(c).chunks(3) {
        assert_eq!(row, vol.center);
    }
    assert_eq!(vol.center, [0.0, 0.0, 0.0]);
    for (h, want) in vol.half.iter().zip([0.4, 0.6, 1.0]) {
        assert!((h - want).abs() < 1e-12);
    }
}

#[test]
fn prototype_loss_does_not_reach_backbone_or_fusion() {
    for seed in 0..3 {
        let (_, store, model) = small_model(Variant::FULL, 40 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let (search, template) = (cloud(24, [0.4, 0.6, 0.5], &mut rng), cloud(12, [0.3; 3], &mut rng));
        let aligned = cloud(12, [0.3; 3], &mut rng).to_tensor::<f64>().unwrap();
        let mut s = Scope::new(&store, true);
        let fwd = model.forward(&mut s, &search, &template).unwrap();
        let q = s.input(aligned);
        let cd = s.g.chamfer(fwd.prototypes.unwrap(), q).unwrap();
        s.g.backward(cd).unwrap();
        let mut tapm_nonzero = 0;
        for (id, name, _) in store.iter() {
            let g = s.param_grad(id);
            if name.starts_with("encoder.") || name.starts_with("fusion.") || name.starts_with("head.") {
                assert!(g.iter().all(|&v| v == 0.0), "{name} received gradient");
            } else if name.starts_with("tapm.") && g.iter().any(|&v| v != 0.0) {
                tapm_nonzero += 1;
            }
        }
        let tapm_params = store.iter().filter(|(_, n, _)| n.starts_with("tapm.")).count();
        assert_eq!(tapm_nonzero, tapm_params, "every prototype parameter should move");
    }
}

#[test]
fn assembly_appends_prototypes_after_search_rows() {
    let store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (ps, pi) = (cloud(4, [1.0; 3], &mut rng), cloud(2, [1.0; 3], &mut rng));
    let mut s = Scope::new(&store, false);
    let fs = s.input(random(&[4, 3], &mut rng));
    let fi = s.input(random(&[2, 3], &mut rng));

    let (c, f) = assemble_enhanced(&mut s, &ps, fs, None).unwrap();
    assert_eq!((c, f), (ps.clone(), fs));

    let (c, f) = assemble_enhanced(&mut s, &ps, fs, Some((&pi, fi))).unwrap();
    assert_eq!(c.points[..4], ps.points[..]);
    assert_eq!(c.points[4..], pi.points[..]);
    let (fsv, fiv) = (s.g.data(fs).to_vec(), s.g.data(fi).to_vec());
    assert_eq!(s.g.data(f), [fsv, fiv].concat());

    let short = s.input(random(&[3, 3], &mut rng));
    assert!(assemble_enhanced(&mut s, &ps, short, None).is_err());
}

#[test]
fn prototypes_only_change_the_cells_they_land_in() {
    let store = ParamStore::<f64>::new();
    let grid = small_cfg(Variant::FULL).bev.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (ps, pi) = (cloud(12, [0.4, 0.6, 0.5], &mut rng), cloud(3, [0.4, 0.6, 0.5], &mut rng));
    let mut s = Scope::new(&store, false);
    let fs = s.input(random(&[12, 5], &mut rng));
    let fi = s.input(random(&[3, 5], &mut rng));
    let base = voxelize_bev(&mut s.g, &ps, fs, &grid).unwrap();
    let (c, f) = assemble_enhanced(&mut s, &ps, fs, Some((&pi, fi))).unwrap();
    let with = voxelize_bev(&mut s.g, &c, f, &grid).unwrap();
    let touched: Vec<usize> = pi
        .iter_f64()
        .filter_map(|p| grid.cell_of(p[0], p[1]).map(|(i, j)| i * grid.cols + j))
        .collect();
    let (a, b) = (s.g.data(base), s.g.data(with));
    for cell in 0..grid.cells() {
        let (ra, rb) = (&a[cell * 5..cell * 5 + 5], &b[cell * 5..cell * 5 + 5]);
        if touched.contains(&cell) {
            assert!(ra.iter().zip(rb).all(|(x, y)| y >= x || *x == 0.0));
        } else {
            assert_eq!(ra, rb, "cell {cell}");
        }
    }
}

// ---- bird's-eye view -----------------------------------------------------

#[test]
fn voxelization_hand_cases() {
    let grid = Grid { rows: 3, cols: 4, cell: 0.5, xmin: 0.0, ymin: 0.0 };
    let mut g = Graph::<f64>::new();

    let one = PointCloud::new(vec![[0.7, 1.2, 3.0]]);
    let f = g.constant_f64(&[1, 2], &[-1.5, 2.0]).unwrap();
    let m = voxelize_bev(&mut g, &one, f, &grid).unwrap();
    assert_eq!(g.shape(m), &[3, 4, 2]);
    let k = 4 + 2; // (1, 2)
    for (cell, v) in g.data(m).chunks(2).enumerate() {
        assert_eq!(v, if cell == k { &[-1.5, 2.0][..] } else { &[0.0, 0.0][..] });
    }

    let two = PointCloud::new(vec![[0.1, 0.1, 0.0], [0.4, 0.3, 9.0], [5.0, 5.0, 0.0]]);
    let f = g.constant_f64(&[3, 2], &[1.0, -4.0, 3.0, -5.0, 7.0, 7.0]).unwrap();
    let m = voxelize_bev(&mut g, &two, f, &grid).unwrap();
    assert_eq!(&g.data(m)[..2], &[3.0, -4.0]);
    assert!(g.data(m)[2..].iter().all(|&v| v == 0.0), "out-of-grid point must be dropped");
}

#[test]
fn voxelization_commutes_with_whole_cell_shifts() {
    let grid = Grid { rows: 6, cols: 6, cell: 0.25, xmin: -0.75, ymin: -0.75 };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pts: Vec<[f32; 3]> = (0..15)
        .map(|_| {
            let (i, j) = (rng.gen_range(0..5), rng.gen_range(0..6));
            let mut at = |k: i32| -0.75 + 0.25 * (k as f32 + rng.gen_range(0.2..0.8));
            [at(i), at(j), 0.0]
        })
        .collect();
    let shifted: Vec<[f32; 3]> = pts.iter().map(|p| [p[0] + 0.25, p[1], p[2]]).collect();
    let mut g = Graph::<f64>::new();
    let f = g.constant(random(&[15, 3], &mut rng));
    let a = voxelize_bev(&mut g, &PointCloud::new(pts), f, &grid).unwrap();
    let b = voxelize_bev(&mut g, &PointCloud::new(shifted), f, &grid).unwrap();
    let row = 6 * 3;
    assert_eq!(&g.data(b)[row..], &g.data(a)[..5 * row]);
    assert!(g.data(b)[..row].iter().all(|&v| v == 0.0));
}

#[test]
fn vit_without_positions_is_pixel_permutation_equivariant() {
    let mut store = ParamStore::<f64>::new();
    let vit = Vit::new(&mut Builder::new(&mut store, 11), 2, 3, 8, 2, 2, 12).unwrap();
    store.get_mut(vit.pos).data_mut().fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&[2, 3, 8], &mut rng);
    let perm = [4, 2, 0, 5, 1, 3];
    let xp = Tensor::from_fn(&[2, 3, 8], |k| x.data()[perm[k / 8] * 8 + k % 8]);
    let run = |t: &Tensor<f64>| {
        let mut s = Scope::new(&store, false);
        let v = s.input(t.clone());
        let y = vit.forward(&mut s, v).unwrap();
        assert_eq!(s.g.shape(y), &[2, 3, 12]);
        s.g.data(y).to_vec()
    };
    let (a, b) = (run(&x), run(&xp));
    for (p, &src) in perm.iter().enumerate() {
        for c in 0..12 {
            assert!((b[p * 12 + c] - a[src * 12 + c]).abs() < 1e-12);
        }
    }
    let mut s = Scope::new(&store, false);
    let wrong = s.input(Tensor::zeros(&[3, 2, 8]));
    assert!(vit.forward(&mut s, wrong).is_err());
}

#[test]
fn upsampling_splits_each_pixel_into_four_groups() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_fn(&[38, 56, 128], |k| k as f32));
    let y = upsample(&mut g, x).unwrap();
    assert_eq!(g.shape(y), &[76, 112, 32]);
    let (xd, yd) = (g.data(x), g.data(y));
    for &(i, j) in &[(0, 0), (5, 17), (37, 55)] {
        for a in 0..2 {
            for b in 0..2 {
                for c in [0, 13, 31] {
                    let out = yd[((2 * i + a) * 112 + 2 * j + b) * 32 + c];
                    let src = xd[(i * 56 + j) * 128 + (a * 2 + b) * 32 + c];
                    assert_eq!(out, src);
                }
            }
        }
    }
}

#[test]
fn head_input_width_follows_the_variant() {
    let width = |v: Variant| {
        let mut store = ParamStore::<f32>::new();
        let cfg = ModelConfig { variant: v, ..ModelConfig::default() };
        Model::new(cfg, &mut store, 0).unwrap();
        store.get(store.id_of("head.trunk0.w").unwrap()).shape()[2]
    };
    assert_eq!(width(Variant::BASELINE), 32);
    assert_eq!(width(Variant { tapm: false, vit: false, shuffle: true }), 8);
    assert_eq!(width(Variant { tapm: false, vit: true, shuffle: false }), 32);
    assert_eq!(width(Variant::FULL), 32);
}

#[test]
fn head_gradients_match_central_differences() {
    for variant in [Variant::FULL, Variant::BASELINE, Variant { tapm: false, vit: false, shuffle: true }] {
        for seed in 0..10 {
            let (cfg, mut store, model) = small_model(variant, 50 + seed);
            generic(&mut store, seed);
            let grid = cfg.output_grid();
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            let v = random(&[4, 6, 8], &mut rng);
            let gt = Box3D::new(
                [rng.gen_range(-0.35..0.35), rng.gen_range(-0.55..0.55), rng.gen_range(-0.5..0.5)],
                [0.6, 0.4, 1.7],
                rng.gen_range(-0.3..0.3),
            )
            .unwrap();
            let t = build_targets(&gt, &grid).unwrap();
            let err = grad_check_params(&store, &[v], opts(), |s, x| {
                let maps = model.head.forward(s, x[0])?;
                let hm = s.g.focal_loss(maps.heat, &t.heat, 1e-4)?;
                let off = s.g.smooth_l1(maps.offset, &t.offset, &t.offset_mask)?;
                let z = s.g.smooth_l1(maps.z, &t.z, &t.z_mask)?;
                let a = s.g.add(hm, off)?;
                s.g.add(a, z)
            })
            .unwrap();
            assert!(err < TOL, "{} seed {seed}: {err}", variant.name());
        }
    }
}

#[test]
fn forward_shapes_and_heat_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (variant, rows, cols) in [(Variant::FULL, 8, 12), (Variant::BASELINE, 4, 6)] {
        let (_, store, model) = small_model(variant, 14);
        let (search, template) = (cloud(24, [0.4, 0.6, 0.5], &mut rng), cloud(12, [0.3; 3], &mut rng));
        let mut s = Scope::new(&store, false);
        let fwd = model.forward(&mut s, &search, &template).unwrap();
        assert_eq!(s.g.shape(fwd.maps.heat), &[rows, cols, 1]);
        assert_eq!(s.g.shape(fwd.maps.offset), &[rows, cols, 3]);
        assert_eq!(s.g.shape(fwd.maps.z), &[rows, cols, 1]);
        assert!(s.g.data(fwd.maps.heat).iter().all(|&h| h > 0.0 && h < 1.0));
        assert_eq!(fwd.prototypes.is_some(), variant.tapm);
        if let Some(p) = fwd.prototypes {
            assert_eq!(s.g.shape(p), &[4, 3]);
        }
    }
}

// ---- targets and decoding ----------------------------------------------------

#[test]
fn heat_targets_peak_and_fall_off() {
    let grid = BevConfig::default().output_grid(true);
    let gt = Box3D::new([0.33, -0.52, 0.1], [0.6, 0.4, 1.7], 0.2).unwrap();
    let t = build_targets(&gt, &grid).unwrap();
    let (ci, cj) = t.center_cell;
    assert_eq!(grid.cell_of(0.33, -0.52), Some((ci, cj)));
    let at = |i: usize, j: usize| t.heat[i * grid.cols + j];
    assert_eq!(at(ci, cj), 1.0);
    for (i, j) in [(ci - 1, cj), (ci + 1, cj), (ci, cj - 1), (ci, cj + 1)] {
        assert_eq!(at(i, j), 0.5);
    }
    let dist = |i: usize, j: usize| ((i as f64 - ci as f64).powi(2) + (j as f64 - cj as f64).powi(2)).sqrt();
    let mut cells: Vec<(f64, f64)> = (0..grid.cells()).map(|k| (dist(k / grid.cols, k % grid.cols), t.heat[k])).collect();
    cells.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert!(cells.windows(2).all(|w| w[1].1 <= w[0].1));
    assert_eq!(t.offset_mask.iter().filter(|&&m| m).count(), 3);
    assert_eq!(t.z_mask.iter().filter(|&&m| m).count(), 1);

    let far = Box3D::new([9.0, 0.0, 0.0], [0.6, 0.4, 1.7], 0.0).unwrap();
    assert!(matches!(build_targets(&far, &grid), Err(sotrack::Error::OutOfRegion(_))));
}

fn maps_from_targets(t: &Targets) -> MapValues {
    MapValues { heat: t.heat.clone(), offset: t.offset.clone(), z: t.z.clone() }
}

#[test]
fn decoding_the_targets_recovers_the_box() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for shuffle in [true, false] {
        let grid = BevConfig::default().output_grid(shuffle);
        for _ in 0..50 {
            let gt = Box3D::new(
                [rng.gen_range(-2.3..2.3), rng.gen_range(-2.3..2.3), rng.gen_range(-0.8..0.8)],
                [0.6, 0.4, 1.7],
                rng.gen_range(-3.1..3.1),
            )
            .unwrap();
            let t = build_targets(&gt, &grid).unwrap();
            let b = decode_box(&maps_from_targets(&t), &grid, gt.size).unwrap();
            let d = ((b.center[0] - gt.center[0]) as f64).hypot((b.center[1] - gt.center[1]) as f64);
            assert!(d <= grid.cell / 2.0, "{d}");
            assert_eq!(b.center[2], gt.center[2]);
            assert_eq!(b.heading, gt.heading);
            assert_eq!(b.size, gt.size);
        }
    }
}

#[test]
fn decoding_hand_cases() {
    let grid = Grid { rows: 4, cols: 5, cell: 0.1, xmin: -0.2, ymin: -0.25 };
    let n = grid.cells();
    let mut maps = MapValues { heat: vec![0.3; n], offset: vec![0.0; 3 * n], z: vec![0.0; n] };
    let b = decode_box(&maps, &grid, [1.0; 3]).unwrap();
    assert_eq!((b.center[0], b.center[1]), (-0.2, -0.25));

    maps.heat[2 * 5 + 3] = 0.9;
    let a = decode_box(&maps, &grid, [1.0; 3]).unwrap();
    maps.heat[2 * 5 + 3] = 0.3;
    maps.heat[3 * 5 + 3] = 0.9;
    let b = decode_box(&maps, &grid, [1.0; 3]).unwrap();
    assert!(((b.center[0] - a.center[0]) as f64 - 0.1).abs() < 1e-6);
    assert_eq!(b.center[1], a.center[1]);
    assert_eq!(argmax(&[0.1, 0.7, 0.7, 0.2]), 1);
}
