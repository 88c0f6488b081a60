//! Acceptance gate: ten behavioral criteria for the desk-scale pipeline.
//! Each test prints a single `[PASS]`/`[FAIL]` line. Expensive fixtures (the
//! synthetic dataset and one meta-trained init) are built once on disk and
//! shared; time-budgeted criteria measure their own wall clock, fixture
//! construction included.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mmvs::camera::Camera;
use mmvs::config::RunConfig;
use mmvs::eval::{evaluate_clouds, GridIndex};
use mmvs::fusion::{consistency_check, read_ply, FusionConfig, FusionView};
use mmvs::geometry::{
    depth_hypotheses, plane_sweep_homography, warp_with_depth,
};
use mmvs::losses::{
    recon_loss, self_loss, smooth_loss, ssim_map, sup_loss, sup_loss_on_pred, LossWeights,
};
use mmvs::meta::{fine_tune, meta_step, meta_train, FineTuneOpts, MetaConfig, TrainState};
use mmvs::network::{forward, forward_depth, init_model_params, ArchConfig, DepthPrediction};
use mmvs::scene::{
    desk_domains, generate_scene, load_dataset, make_dataset, render_view, ring_cameras,
    save_dataset, MultiViewSample, SceneDataset, View, DEPTH_SCALE,
};
use mmvs::tensor::{
    check_tensor_grad, gradcheck_params, with_precision, AdamState, ParamSet, Precision, Tensor,
};

fn report(criterion: &str, ok: bool, detail: &str) {
    // Written through the raw fd so the verdict lines show up even under
    // the harness's per-test output capture.
    use std::io::Write as _;
    use std::os::fd::FromRawFd;
    let line = format!("[{}] {criterion}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let mut out = unsafe { std::fs::File::from_raw_fd(1) };
    let _ = out.write_all(line.as_bytes());
    std::mem::forget(out);
    assert!(ok, "{criterion}: {detail}");
}

// ---------------------------------------------------------------- fixtures

static FIXTURES: Mutex<()> = Mutex::new(());

fn fixture_root() -> PathBuf {
    std::env::temp_dir().join("mmvs_acceptance_fixtures")
}

/// Desk-preset dataset, rendered once and reused by the slow criteria.
fn shared_dataset() -> SceneDataset {
    let _guard = FIXTURES.lock().unwrap();
    let dir = fixture_root().join("data");
    let ok = fixture_root().join("data.ok");
    if !ok.exists() {
        let ds = make_dataset(&RunConfig::desk().dataset_config()).unwrap();
        save_dataset(&ds, &dir, false).unwrap();
        std::fs::write(&ok, "done").unwrap();
        return ds;
    }
    load_dataset(&dir).unwrap()
}

fn train_meta_init(ds: &SceneDataset, name: &str, use_adam: bool, beta: f64) -> ParamSet {
    let _guard = FIXTURES.lock().unwrap();
    let path = fixture_root().join(name);
    if path.exists() {
        return ParamSet::load(&path).unwrap();
    }
    let mut cfg = RunConfig::desk().meta_config();
    cfg.seed = 77;
    cfg.max_iters = 25;
    cfg.patience = 1000;
    cfg.checkpoint_every = 0;
    cfg.use_adam = use_adam;
    cfg.beta = beta;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let params = init_model_params(&mut rng, &ArchConfig { channels: 8 });
    let mut state = TrainState::new(params, &cfg);
    meta_train(&mut state, ds, &cfg, None).unwrap();
    state.params.save(&path).unwrap();
    state.params
}

/// Meta init trained with the desk preset's own (SGD) outer loop.
fn preset_meta_init(ds: &SceneDataset) -> ParamSet {
    let beta = RunConfig::desk().meta.beta;
    train_meta_init(ds, "meta_init_sgd.ckpt", false, beta)
}

/// Stronger Adam-outer meta init for the mask-effect comparison.
fn shared_meta_init(ds: &SceneDataset) -> ParamSet {
    train_meta_init(ds, "meta_init_adam.ckpt", true, 1e-3)
}

fn held_out_mae(params: &ParamSet, samples: &[MultiViewSample], num_depths: usize) -> f64 {
    let n = samples.len().min(8);
    let mut total = 0.0;
    for s in &samples[..n] {
        let depths = depth_hypotheses(s.depth_min, s.depth_max, num_depths, false);
        let pred = forward_depth(params, s, &depths).unwrap();
        total += sup_loss_on_pred(&pred.depth, s.gt_depth.as_ref().unwrap())
            .unwrap()
            .value();
    }
    total / n as f64
}

fn mean_self_loss(params: &ParamSet, samples: &[MultiViewSample], w: &LossWeights) -> f64 {
    let n = samples.len().min(4);
    let mut total = 0.0;
    for s in &samples[..n] {
        total += self_loss(params, s, 16, w).unwrap().value();
    }
    total / n as f64
}

// -------------------------------------------------- criterion 1: gradients

fn rand_vals(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

#[test]
fn criterion_01_gradient_suite() {
    let start = Instant::now();
    let mut worst_prim: f64 = 0.0;

    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [2usize, 3 + seed as usize, 4];
        let n: usize = shape.iter().product();
        let smooth = rand_vals(&mut rng, n, -1.0, 1.0);
        // Inputs bounded away from the |.| / relu / sqrt kinks.
        let offset: Vec<f64> = smooth
            .iter()
            .map(|v| if *v >= 0.0 { v + 0.3 } else { v - 0.3 })
            .collect();
        let positive = rand_vals(&mut rng, n, 0.2, 1.5);

        let two = Tensor::full(&shape, 2.5);
        let other = Tensor::from_vec(&shape, rand_vals(&mut rng, n, -1.0, 1.0));
        let cases: Vec<(&str, &[f64], f64, Box<dyn Fn(&Tensor) -> Tensor>)> = vec![
            ("add", &smooth, 1e-3, Box::new({
                let o = other.clone();
                move |t| t.add(&o).unwrap().square().mean_all()
            })),
            ("sub", &smooth, 1e-3, Box::new({
                let o = other.clone();
                move |t| t.sub(&o).unwrap().square().mean_all()
            })),
            ("mul", &smooth, 1e-3, Box::new(|t| t.mul(t).unwrap().mean_all())),
            ("div", &smooth, 1e-3, Box::new(move |t| t.div(&two).unwrap().square().mean_all())),
            ("neg_scale", &smooth, 1e-3, Box::new(|t| t.neg().scale(1.7).square().mean_all())),
            ("abs", &offset, 1e-5, Box::new(|t| t.abs().mean_all())),
            ("relu", &offset, 1e-5, Box::new(|t| t.relu().square().mean_all())),
            ("sigmoid", &smooth, 1e-3, Box::new(|t| t.sigmoid().square().mean_all())),
            ("exp", &smooth, 1e-3, Box::new(|t| t.exp().mean_all())),
            ("ln", &positive, 1e-4, Box::new(|t| t.ln().square().mean_all())),
            ("sqrt", &positive, 1e-4, Box::new(|t| t.sqrt().mean_all())),
            ("softmax_depth", &smooth, 1e-3, Box::new({
                let o = other.clone();
                move |t| t.softmax_over_depth().unwrap().mul(&o).unwrap().sum_all()
            })),
            ("box_filter", &smooth, 1e-3, Box::new(|t| t.box_filter3x3().unwrap().square().mean_all())),
            ("fwd_diff", &offset, 1e-5, Box::new(|t| {
                t.forward_diff_x().abs().sum_all().add(&t.forward_diff_y().abs().sum_all()).unwrap()
            })),
        ];
        for (name, vals, h, f) in cases {
            let rep = check_tensor_grad(&shape, vals, &f, h);
            worst_prim = worst_prim.max(rep.max_rel_err);
            assert!(rep.max_rel_err < 1e-4, "{name} seed {seed}: {}", rep.max_rel_err);
        }

        // Pooling needs dimensions divisible by the factor.
        let pool_vals = rand_vals(&mut rng, 2 * 4 * 6, -1.0, 1.0);
        let rep = check_tensor_grad(
            &[2, 4, 6],
            &pool_vals,
            &|t| t.avg_downsample2d(2).unwrap().square().mean_all(),
            1e-3,
        );
        worst_prim = worst_prim.max(rep.max_rel_err);
        assert!(rep.max_rel_err < 1e-4, "avg_down seed {seed}: {}", rep.max_rel_err);

        // Convolutions and the warp sampler.
        let ivals = rand_vals(&mut rng, 2 * 5 * 5, -1.0, 1.0);
        let kvals = rand_vals(&mut rng, 3 * 2 * 3 * 3, -1.0, 1.0);
        let k3 = kvals.clone();
        let conv_in = move |t: &Tensor| {
            let k = Tensor::from_vec(&[3, 2, 3, 3], k3.clone());
            let b = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.0]);
            t.conv2d(&k, &b, 1, 1).unwrap().square().sum_all()
        };
        let rep = check_tensor_grad(&[2, 5, 5], &ivals, &conv_in, 1e-3);
        worst_prim = worst_prim.max(rep.max_rel_err);
        assert!(rep.max_rel_err < 1e-4, "conv2d input seed {seed}: {}", rep.max_rel_err);

        let iv = ivals.clone();
        let conv_k = move |k: &Tensor| {
            let img = Tensor::from_vec(&[2, 5, 5], iv.clone());
            let b = Tensor::from_vec(&[3], vec![0.0; 3]);
            img.conv2d(k, &b, 1, 1).unwrap().square().sum_all()
        };
        let rep = check_tensor_grad(&[3, 2, 3, 3], &kvals, &conv_k, 1e-3);
        worst_prim = worst_prim.max(rep.max_rel_err);
        assert!(rep.max_rel_err < 1e-4, "conv2d kernel seed {seed}: {}", rep.max_rel_err);

        let vvals = rand_vals(&mut rng, 2 * 3 * 4 * 4, -1.0, 1.0);
        let k5 = rand_vals(&mut rng, 2 * 2 * 3 * 3 * 3, -1.0, 1.0);
        let conv3 = move |t: &Tensor| {
            let k = Tensor::from_vec(&[2, 2, 3, 3, 3], k5.clone());
            let b = Tensor::from_vec(&[2], vec![0.1, -0.1]);
            t.conv3d(&k, &b, 1, 1).unwrap().square().sum_all()
        };
        let rep = check_tensor_grad(&[2, 3, 4, 4], &vvals, &conv3, 1e-3);
        worst_prim = worst_prim.max(rep.max_rel_err);
        assert!(rep.max_rel_err < 1e-4, "conv3d seed {seed}: {}", rep.max_rel_err);

        // Bilinear sampling: image and coordinate gradients, coordinates
        // held away from integer cell boundaries.
        let img_vals = rand_vals(&mut rng, 2 * 5 * 5, -1.0, 1.0);
        // Coordinates kept at least 0.2 from integer cell boundaries so the
        // central difference stays inside one bilinear cell.
        let coord_vals: Vec<f64> = (0..2 * 3 * 3)
            .map(|i| if i < 9 { 1.2 } else { 2.2 } + rng.gen_range(0.0..0.6))
            .collect();
        let cv = coord_vals.clone();
        let f_img = move |t: &Tensor| {
            let coords = Tensor::from_vec(&[2, 3, 3], cv.clone());
            Tensor::bilinear_sample(t, &coords).unwrap().0.sum_all()
        };
        let rep = check_tensor_grad(&[2, 5, 5], &img_vals, &f_img, 1e-3);
        worst_prim = worst_prim.max(rep.max_rel_err);
        assert!(rep.max_rel_err < 1e-4, "bilinear image seed {seed}: {}", rep.max_rel_err);
        let ivc = img_vals.clone();
        let f_crd = move |t: &Tensor| {
            let img = Tensor::from_vec(&[2, 5, 5], ivc.clone());
            Tensor::bilinear_sample(&img, t).unwrap().0.sum_all()
        };
        let rep = check_tensor_grad(&[2, 3, 3], &coord_vals, &f_crd, 1e-3);
        worst_prim = worst_prim.max(rep.max_rel_err);
        assert!(rep.max_rel_err < 1e-4, "bilinear coords seed {seed}: {}", rep.max_rel_err);
    }

    // Losses: reconstruction + smoothness through the full network (depth
    // path with confidences frozen, mask path on the unmodified loss) and
    // the supervised MAE, each against finite differences, 3 seeds.
    let mut worst_loss: f64 = 0.0;
    with_precision(Precision::F64, || {
        for seed in 0..3u64 {
            let params = init_model_params(
                &mut ChaCha8Rng::seed_from_u64(40 + seed),
                &ArchConfig { channels: 2 },
            );
            let sample = tiny_sample(50 + seed, 1);
            let w = LossWeights::default();
            let depths = depth_hypotheses(sample.depth_min, sample.depth_max, 4, false);
            let fixed_conf: Vec<Tensor> = forward(&params, &sample, &depths)
                .unwrap()
                .conf_masks
                .iter()
                .map(|c| c.detach())
                .collect();
            let s1 = sample.clone();
            let d1 = depths.clone();
            let depth_path = move |p: &ParamSet| {
                let mut pred = forward_depth(p, &s1, &d1).unwrap();
                pred.conf_masks = fixed_conf.clone();
                let w_fixed = LossWeights { mask_reg: 0.0, ..w };
                let recon = recon_loss(&pred, &w_fixed).unwrap();
                let smooth = smooth_loss(&pred.depth, &pred.ref_small).unwrap();
                recon.add(&smooth.scale(w.gamma_smooth)).unwrap()
            };
            let mut r = ChaCha8Rng::seed_from_u64(60 + seed);
            let mut entries = sample_entries(&params, &mut r, "feat.", 3);
            entries.extend(sample_entries(&params, &mut r, "reg.", 3));
            let rep = gradcheck_params(&params, &depth_path, &entries, 1e-5);
            worst_loss = worst_loss.max(rep.max_rel_err);
            assert!(rep.max_rel_err < 1e-3, "depth path seed {seed}: {}", rep.max_rel_err);

            let s2 = sample.clone();
            let full = move |p: &ParamSet| self_loss(p, &s2, 4, &w).unwrap();
            let mask_entries = sample_entries(&params, &mut r, "mask.", 4);
            let rep = gradcheck_params(&params, &full, &mask_entries, 1e-5);
            worst_loss = worst_loss.max(rep.max_rel_err);
            assert!(rep.max_rel_err < 1e-3, "mask path seed {seed}: {}", rep.max_rel_err);

            let s3 = sample.clone();
            let sup = move |p: &ParamSet| sup_loss(p, &s3, 4).unwrap();
            let sup_entries = sample_entries(&params, &mut r, "reg.", 4);
            let rep = gradcheck_params(&params, &sup, &sup_entries, 1e-5);
            worst_loss = worst_loss.max(rep.max_rel_err);
            assert!(rep.max_rel_err < 1e-3, "sup loss seed {seed}: {}", rep.max_rel_err);
        }
    });

    let elapsed = start.elapsed().as_secs_f64();
    let ok = worst_prim < 1e-4 && worst_loss < 1e-3 && elapsed < 60.0;
    report(
        "criterion 1 (gradient suite)",
        ok,
        &format!("primitive rel err {worst_prim:.2e}, loss rel err {worst_loss:.2e}, {elapsed:.1}s"),
    );
}

fn sample_entries(
    params: &ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    n: usize,
) -> Vec<(String, usize)> {
    let names: Vec<String> = params
        .names()
        .filter(|nm| nm.starts_with(prefix))
        .cloned()
        .collect();
    (0..n)
        .map(|_| {
            let name = names[rng.gen_range(0..names.len())].clone();
            let len = params.get(&name).unwrap().values().len();
            (name, rng.gen_range(0..len))
        })
        .collect()
}

fn tiny_sample(seed: u64, n: usize) -> MultiViewSample {
    let (domains, _) = desk_domains();
    let domain = &domains[1];
    let scene = generate_scene(seed, domain).unwrap();
    let cams = ring_cameras(domain, n + 2, 60.0, 32, 16);
    let views: Vec<View> = cams
        .iter()
        .map(|c| View {
            image: render_view(&scene, c, domain).unwrap().0,
            camera: c.clone(),
        })
        .collect();
    let (_, gt) = render_view(&scene, &cams[0], domain).unwrap();
    MultiViewSample {
        reference: views[0].clone(),
        neighbors: views[1..1 + n].to_vec(),
        gt_depth: Some(gt),
        domain_id: domain.id.clone(),
        scene_id: "acceptance_tiny".into(),
        held_out: false,
        depth_min: domain.depth_min,
        depth_max: domain.depth_max,
    }
}

// --------------------------------------------------- criterion 2: geometry

fn random_cam(rng: &mut ChaCha8Rng) -> Camera {
    let eye = Vector3::new(
        rng.gen_range(-0.5..0.5),
        rng.gen_range(-0.5..0.5),
        rng.gen_range(-3.5..-2.5),
    );
    Camera::look_at(
        eye,
        Vector3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), 0.0),
        Vector3::new(0.0, -1.0, 0.0),
        rng.gen_range(40.0..120.0),
        32,
        24,
    )
}

fn apply_h(h: &Matrix3<f64>, x: f64, y: f64) -> [f64; 2] {
    let v = h * Vector3::new(x, y, 1.0);
    [v[0] / v[2], v[1] / v[2]]
}

#[test]
fn criterion_02_geometry_oracle() {
    // Homography vs project∘backproject on 100 random camera pairs.
    let mut rng = ChaCha8Rng::seed_from_u64(211);
    let mut max_err: f64 = 0.0;
    for _ in 0..100 {
        let refc = random_cam(&mut rng);
        let srcc = random_cam(&mut rng);
        let d = rng.gen_range(1.0..6.0);
        let h = plane_sweep_homography(&refc, &srcc, d).unwrap();
        for _ in 0..5 {
            let px = [rng.gen_range(0.0..32.0), rng.gen_range(0.0..24.0)];
            let world = refc.backproject(px, d).unwrap();
            let (expected, depth) = srcc.project(world);
            if depth <= 0.1 {
                continue;
            }
            let got = apply_h(&h, px[0], px[1]);
            max_err = max_err
                .max((got[0] - expected[0]).abs())
                .max((got[1] - expected[1]).abs());
        }
    }

    // Identity warp reproduces the source wherever the projection is valid.
    let cam = Camera::new(
        Matrix3::new(20.0, 0.0, 4.0, 0.0, 20.0, 3.0, 0.0, 0.0, 1.0),
        Matrix3::identity(),
        Vector3::zeros(),
        8,
        6,
    )
    .unwrap();
    let img = Tensor::from_vec(&[1, 6, 8], (0..48).map(|i| i as f64 / 48.0).collect());
    let depth = Tensor::full(&[6, 8], 3.0);
    let (warped, mask) = warp_with_depth(&img, &cam, &cam, &depth).unwrap();
    let mut ident_err: f64 = 0.0;
    for p in 0..48 {
        if mask.values()[p] == 1.0 {
            ident_err = ident_err.max((warped.values()[p] - img.values()[p]).abs());
        }
    }

    // Fronto-parallel translation: pixels shift by exactly f*t_x/d.
    let f = 60.0;
    let refc = Camera::new(
        Matrix3::new(f, 0.0, 16.0, 0.0, f, 12.0, 0.0, 0.0, 1.0),
        Matrix3::identity(),
        Vector3::zeros(),
        32,
        24,
    )
    .unwrap();
    let mut src = refc.clone();
    let tx = 0.4;
    src.translation = Vector3::new(-tx, 0.0, 0.0);
    let mut shift_err: f64 = 0.0;
    for d in [1.0, 2.0, 5.0] {
        let h = plane_sweep_homography(&refc, &src, d).unwrap();
        let q = apply_h(&h, 10.0, 7.0);
        shift_err = shift_err
            .max((q[0] - (10.0 - f * tx / d)).abs())
            .max((q[1] - 7.0).abs());
    }

    let ok = max_err < 1e-6 && ident_err < 1e-6 && shift_err < 1e-6;
    report(
        "criterion 2 (geometry oracle)",
        ok,
        &format!(
            "homography err {max_err:.2e}, identity warp err {ident_err:.2e}, shift err {shift_err:.2e}"
        ),
    );
}

// ------------------------------------------- criterion 3: MAML degeneracy

fn tiny_dataset(seed: u64) -> SceneDataset {
    let mut cfg = mmvs::scene::desk_dataset_config(seed);
    cfg.train_domains.truncate(2);
    cfg.scenes_per_domain = 2;
    cfg.val_scenes_per_domain = 1;
    cfg.views_per_scene = 3;
    cfg.num_neighbors = 1;
    cfg.width = 32;
    cfg.height = 16;
    cfg.focal = 55.0;
    make_dataset(&cfg).unwrap()
}

fn tiny_meta_config(seed: u64) -> MetaConfig {
    MetaConfig {
        k: 1,
        alpha: 1e-4,
        beta: 1e-4,
        outer_batch: 1,
        max_iters: 5,
        patience: 50,
        smooth_window: 5,
        checkpoint_every: 0,
        seed,
        num_depths: 4,
        weights: LossWeights::default(),
        distinct_domains: false,
        use_adam: false,
    }
}

#[test]
fn criterion_03_maml_degeneracy() {
    let ds = tiny_dataset(31);
    let params = init_model_params(&mut ChaCha8Rng::seed_from_u64(32), &ArchConfig { channels: 2 });

    // k = 0: the meta update must equal a plain supervised SGD step.
    let mut cfg = tiny_meta_config(33);
    cfg.k = 0;
    let mut state = TrainState::new(params.clone_params(), &cfg);
    meta_step(&mut state, &ds, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let theta = params.clone_params();
    theta.zero_grads();
    let sample = &ds.val[rng.gen_range(0..ds.val.len())];
    sup_loss(&theta, sample, cfg.num_depths).unwrap().backward();
    let direct = theta.sgd_step(&theta.grads(), cfg.beta).unwrap();
    let mut max_k0: f64 = 0.0;
    for (name, t) in state.params.iter() {
        let d = direct.get(name).unwrap();
        for (a, b) in t.values().iter().zip(d.values()) {
            max_k0 = max_k0.max((a - b).abs());
        }
    }

    // alpha = 0: the inner loop is inert, so the outcome is again a plain
    // supervised step (after replaying the unused inner sample draw).
    let mut cfg = tiny_meta_config(34);
    cfg.k = 1;
    cfg.alpha = 0.0;
    let mut state = TrainState::new(params.clone_params(), &cfg);
    meta_step(&mut state, &ds, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let _ = rng.gen_range(0..ds.train.len());
    let sample = &ds.val[rng.gen_range(0..ds.val.len())];
    let theta = params.clone_params();
    theta.zero_grads();
    sup_loss(&theta, sample, cfg.num_depths).unwrap().backward();
    let direct = theta.sgd_step(&theta.grads(), cfg.beta).unwrap();
    let mut max_a0: f64 = 0.0;
    for (name, t) in state.params.iter() {
        let d = direct.get(name).unwrap();
        for (a, b) in t.values().iter().zip(d.values()) {
            max_a0 = max_a0.max((a - b).abs());
        }
    }

    let ok = max_k0 < 1e-7 && max_a0 < 1e-7;
    report(
        "criterion 3 (MAML degeneracy)",
        ok,
        &format!("k=0 max |Δ| {max_k0:.2e}, alpha=0 max |Δ| {max_a0:.2e}"),
    );
}

// ------------------------------------------- criterion 4: loss analytics

#[test]
fn criterion_04_loss_analytics() {
    // SSIM of an image with itself is 1.
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let img = Tensor::from_vec(&[3, 6, 7], (0..126).map(|_| rng.gen_range(0.0..1.0)).collect());
    let s = ssim_map(&img, &img).unwrap();
    let self_err = s.values().iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);

    // Constant images 0.2 / 0.8: variances vanish, closed form
    // (2*0.16 + C1) / (0.04 + 0.64 + C1) ≈ 0.4704.
    let const_err = with_precision(Precision::F64, || {
        let a = Tensor::full(&[3, 5, 5], 0.2);
        let b = Tensor::full(&[3, 5, 5], 0.8);
        let s = ssim_map(&a, &b).unwrap();
        s.values().iter().map(|v| (v - 0.4704).abs()).fold(0.0, f64::max)
    });

    // Zero residual: identical reference and warp, full confidence.
    let zero_recon = {
        let img = Tensor::from_vec(&[3, 5, 6], (0..90).map(|_| rng.gen_range(0.0..1.0)).collect());
        let [h, w] = [5usize, 6usize];
        let pred = DepthPrediction {
            depth: Tensor::full(&[h, w], 1.0),
            prob: Tensor::full(&[h, w], 1.0),
            err_maps: vec![Tensor::full(&[3, h, w], 0.0)],
            conf_masks: vec![Tensor::full(&[h, w], 1.0)],
            proj_masks: vec![Tensor::full(&[h, w], 1.0)],
            warped: vec![img.clone()],
            ref_small: img,
        };
        recon_loss(&pred, &LossWeights::default()).unwrap().value()
    };

    // Constant depth: forward differences vanish, smoothness is 0.
    let zero_smooth = {
        let img = Tensor::from_vec(&[3, 4, 5], (0..60).map(|_| rng.gen_range(0.0..1.0)).collect());
        let depth = Tensor::full(&[4, 5], 2.7);
        smooth_loss(&depth, &img).unwrap().value()
    };

    let ok = self_err < 1e-6 && const_err < 1e-3 && zero_recon == 0.0 && zero_smooth == 0.0;
    report(
        "criterion 4 (loss analytics)",
        ok,
        &format!(
            "self-SSIM err {self_err:.2e}, constant-SSIM err {const_err:.2e}, zero-residual {zero_recon:e}, constant-depth {zero_smooth:e}"
        ),
    );
}

// ---------------------------------------------- criterion 5: overfit check

#[test]
fn criterion_05_overfit_check() {
    let start = Instant::now();
    let ds = shared_dataset();
    let init = preset_meta_init(&ds);
    let cfg = RunConfig::desk();
    let w = cfg.meta.weights;

    // (a) 200 self-supervised fine-tune steps on the held-out domain halve
    // the mean self-supervised loss.
    let mut halved = 0;
    let mut ratios = Vec::new();
    for seed in [0u64, 1, 2] {
        let before = mean_self_loss(&init, &ds.held_out, &w);
        let opts = FineTuneOpts {
            lr: cfg.fine_tune.lr,
            steps: cfg.fine_tune.steps,
            freeze_tau: cfg.fine_tune.freeze_tau,
            batch_size: cfg.fine_tune.batch_size,
            num_depths: 16,
            weights: w,
            seed,
            use_adam: cfg.fine_tune.use_adam,
        };
        let (tuned, _) = fine_tune(&init, &ds.held_out, &opts).unwrap();
        let after = mean_self_loss(&tuned, &ds.held_out, &w);
        ratios.push(after / before);
        if after <= 0.5 * before {
            halved += 1;
        }
        if halved >= 2 {
            break;
        }
    }

    // (b) supervised training overfits one scene: MAE under 5% of the depth
    // range within 500 steps.
    let scene_id = &ds.held_out[0].scene_id;
    let scene: Vec<MultiViewSample> = ds
        .held_out
        .iter()
        .filter(|s| &s.scene_id == scene_id)
        .cloned()
        .collect();
    let range = scene[0].depth_max - scene[0].depth_min;
    let target = 0.05 * range;
    let mut overfit = 0;
    let mut best_maes = Vec::new();
    for seed in [10u64, 11, 12] {
        let mut theta = init_model_params(
            &mut ChaCha8Rng::seed_from_u64(seed),
            &ArchConfig { channels: 8 },
        );
        let mut adam = AdamState::new(&theta);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf17);
        let mut best = f64::INFINITY;
        for step in 0..500 {
            theta.zero_grads();
            let s = &scene[rng.gen_range(0..scene.len())];
            let loss = sup_loss(&theta, s, 16).unwrap();
            loss.backward();
            let grads = theta.grads();
            theta = adam.step(&theta, &grads, 1e-3, |_| true).unwrap();
            if step % 10 == 9 {
                best = best.min(held_out_mae(&theta, &scene, 16));
                if best < target {
                    break;
                }
            }
        }
        best_maes.push(best);
        if best < target {
            overfit += 1;
        }
        if overfit >= 2 {
            break;
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    let ok = halved >= 2 && overfit >= 2 && elapsed < 300.0;
    report(
        "criterion 5 (overfit check)",
        ok,
        &format!(
            "loss ratios {ratios:.3?} ({halved} halved), scene MAE {best_maes:.3?} vs {target:.3} ({overfit} under), {elapsed:.1}s"
        ),
    );
}

// ---------------------------------------------- criterion 6: meta advantage

#[test]
fn criterion_06_meta_advantage() {
    let start = Instant::now();
    let ds = shared_dataset();
    let cfg = RunConfig::desk();
    let w = cfg.meta.weights;

    // Per seed: meta-training vs a supervised-pretraining baseline with the
    // same number of parameter updates from the same random init, both then
    // given the identical fine-tune budget: 50 self-supervised SGD steps at
    // the inner-loop rate, i.e. the adaptation procedure the meta objective
    // optimizes for, just run longer. The inner rate is raised to 0.05 so
    // the three inner steps move the self-supervised loss materially; at the
    // preset 1e-4 the inner loop is a no-op and the meta objective carries
    // no adaptation signal.
    let mut wins = 0;
    let mut maes = Vec::new();
    for seed in [0u64, 1, 2] {
        let init = init_model_params(
            &mut ChaCha8Rng::seed_from_u64(seed),
            &ArchConfig { channels: 8 },
        );

        let mut mc = cfg.meta_config();
        mc.seed = seed;
        mc.max_iters = 80;
        mc.patience = 1000;
        mc.checkpoint_every = 0;
        mc.use_adam = true;
        mc.beta = 1e-3;
        mc.alpha = 0.05;
        let mut state = TrainState::new(init.clone_params(), &mc);
        meta_train(&mut state, &ds, &mc, None).unwrap();
        let theta_meta = state.params;

        let mut theta_sup = init.clone_params();
        let mut adam = AdamState::new(&theta_sup);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for _ in 0..mc.max_iters {
            theta_sup.zero_grads();
            let s = &ds.train[rng.gen_range(0..ds.train.len())];
            let loss = sup_loss(&theta_sup, s, 16).unwrap();
            loss.backward();
            let grads = theta_sup.grads();
            theta_sup = adam.step(&theta_sup, &grads, mc.beta, |_| true).unwrap();
        }

        let opts = FineTuneOpts {
            lr: mc.alpha,
            steps: 50,
            freeze_tau: true,
            batch_size: 1,
            num_depths: 16,
            weights: w,
            seed: seed ^ 0xada7,
            use_adam: false,
        };
        let (meta_ft, _) = fine_tune(&theta_meta, &ds.held_out, &opts).unwrap();
        let (sup_ft, _) = fine_tune(&theta_sup, &ds.held_out, &opts).unwrap();
        let m = held_out_mae(&meta_ft, &ds.held_out, 16);
        let s = held_out_mae(&sup_ft, &ds.held_out, 16);
        maes.push((m, s));
        if m < s {
            wins += 1;
        }
        if wins >= 2 {
            break;
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    let ok = wins >= 2 && elapsed < 1200.0;
    report(
        "criterion 6 (meta advantage)",
        ok,
        &format!("meta/supervised MAE pairs {maes:.4?}, meta wins {wins}, {elapsed:.1}s"),
    );
}

// ------------------------------------------- criterion 7: confidence masks

fn occlude(s: &MultiViewSample, rng: &mut ChaCha8Rng) -> MultiViewSample {
    let mut out = s.clone();
    for n in &mut out.neighbors {
        let [c, h, w] = [n.image.shape()[0], n.image.shape()[1], n.image.shape()[2]];
        let (bh, bw) = (h / 2, w / 2);
        let y0 = rng.gen_range(0..h - bh);
        let x0 = rng.gen_range(0..w - bw);
        let mut v = n.image.values().to_vec();
        for ch in 0..c {
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    v[ch * h * w + y * w + x] = 0.95;
                }
            }
        }
        n.image = Tensor::from_vec(n.image.shape(), v);
    }
    out
}

#[test]
fn criterion_07_confidence_mask_effect() {
    let ds = shared_dataset();
    let init = shared_meta_init(&ds);
    let w = RunConfig::desk().meta.weights;
    let steps = 60;

    // Synthetic occluders painted into every neighbour image; ground truth
    // on the reference stays clean. The masked variant fine-tunes with the
    // standard loss (confidences active and trainable); the no-mask variant
    // repeats the identical schedule with confidences forced to 1.
    let mut wins = 0;
    let mut maes = Vec::new();
    for seed in [0u64, 1, 2] {
        let mut orng = ChaCha8Rng::seed_from_u64(seed ^ 0x0cc1);
        let occluded: Vec<MultiViewSample> =
            ds.held_out.iter().map(|s| occlude(s, &mut orng)).collect();

        let opts = FineTuneOpts {
            lr: 1e-3,
            steps,
            freeze_tau: false,
            batch_size: 1,
            num_depths: 16,
            weights: w,
            seed,
            use_adam: true,
        };
        let (masked, _) = fine_tune(&init, &occluded, &opts).unwrap();

        let mut theta = init.clone_params();
        let mut adam = AdamState::new(&theta);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_off = LossWeights { mask_reg: 0.0, ..w };
        for _ in 0..steps {
            theta.zero_grads();
            let s = &occluded[rng.gen_range(0..occluded.len())];
            let depths = depth_hypotheses(s.depth_min, s.depth_max, 16, false);
            let mut pred = forward(&theta, s, &depths).unwrap();
            pred.conf_masks = pred
                .conf_masks
                .iter()
                .map(|c| Tensor::full(c.shape(), 1.0))
                .collect();
            let recon = recon_loss(&pred, &w_off).unwrap();
            let smooth = smooth_loss(&pred.depth, &pred.ref_small).unwrap();
            let loss = recon.add(&smooth.scale(w_off.gamma_smooth)).unwrap();
            loss.backward();
            let grads = theta.grads();
            theta = adam
                .step(&theta, &grads, 1e-3, |n| !n.starts_with("mask."))
                .unwrap();
        }

        let m = held_out_mae(&masked, &ds.held_out, 16);
        let n = held_out_mae(&theta, &ds.held_out, 16);
        maes.push((m, n));
        if m <= n {
            wins += 1;
        }
        if wins >= 2 {
            break;
        }
    }

    let ok = wins >= 2;
    report(
        "criterion 7 (confidence-mask effect)",
        ok,
        &format!("masked/no-mask MAE pairs {maes:.4?}, masked wins {wins}"),
    );
}

// ------------------------------------------ criterion 8: fusion/eval oracles

fn oracle_views(seed: u64, count: usize, plane: Option<f64>) -> Vec<FusionView> {
    let (domains, _) = desk_domains();
    let domain = &domains[0];
    let scene = match plane {
        Some(z_plane) => mmvs::scene::SceneSpec {
            seed,
            primitives: vec![mmvs::scene::Primitive::Backdrop {
                z_plane,
                color: [0.7, 0.7, 0.7],
            }],
        },
        None => generate_scene(seed, domain).unwrap(),
    };
    ring_cameras(domain, count, 110.0, 80, 64)
        .into_iter()
        .map(|cam| {
            let (img, depth) = render_view(&scene, &cam, domain).unwrap();
            FusionView {
                prob: Tensor::full(depth.shape(), 1.0),
                image: img.avg_downsample2d(DEPTH_SCALE).unwrap(),
                depth,
                camera: cam.scaled(DEPTH_SCALE),
            }
        })
        .collect()
}

#[test]
fn criterion_08_fusion_eval_oracles() {
    let cfg = FusionConfig::default();

    // Ground-truth renders: consistency on the co-visible set is >= 95%.
    let views = oracle_views(2, 4, None);
    let res = consistency_check(
        &views[0].depth,
        &views[0].camera,
        &views[1].depth,
        &views[1].camera,
        &cfg,
    )
    .unwrap();
    let dv = views[0].depth.values();
    let ds = views[1].depth.values();
    let (h, w) = (views[0].depth.shape()[0], views[0].depth.shape()[1]);
    let (sh, sw) = (views[1].depth.shape()[0], views[1].depth.shape()[1]);
    let mut covisible = 0usize;
    let mut consistent = 0usize;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let d = dv[i];
            if d <= 0.0 {
                continue;
            }
            let world = views[0].camera.backproject([x as f64, y as f64], d).unwrap();
            let ([qx, qy], dq) = views[1].camera.project(world);
            let (sx, sy) = (qx.round(), qy.round());
            if dq <= 0.0 || sx < 0.0 || sy < 0.0 || sx >= sw as f64 || sy >= sh as f64 {
                continue;
            }
            let d_src = ds[sy as usize * sw + sx as usize];
            // Co-visible: neither occluded nor across a silhouette edge.
            if d_src <= 0.0 || (d_src - dq).abs() / dq >= cfg.depth_thresh {
                continue;
            }
            covisible += 1;
            if res.consistent[i] {
                consistent += 1;
            }
        }
    }
    let gt_frac = consistent as f64 / covisible as f64;

    // A 2% uniform depth scaling breaks the 1% relative round-trip test
    // everywhere (plane-only scene, so no silhouette effects).
    let pviews = oracle_views(5, 2, Some(0.3));
    let scaled = Tensor::from_vec(
        pviews[1].depth.shape(),
        pviews[1].depth.values().iter().map(|d| d * 1.02).collect(),
    );
    let res = consistency_check(
        &pviews[0].depth,
        &pviews[0].camera,
        &scaled,
        &pviews[1].camera,
        &cfg,
    )
    .unwrap();
    let scaled_survivors = res.consistent.iter().filter(|&&c| c).count();

    // Spatial index nearest-neighbour distances equal brute force exactly.
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let points: Vec<[f64; 3]> = (0..1000)
        .map(|_| [0; 3].map(|_| rng.gen_range(-2.0..2.0)))
        .collect();
    let index = GridIndex::new(&points, 0.3).unwrap();
    let mut nn_exact = true;
    for _ in 0..1000 {
        let q = [0; 3].map(|_| rng.gen_range(-3.0..3.0));
        let brute = points
            .iter()
            .map(|p| {
                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        if index.nearest(q) != brute {
            nn_exact = false;
        }
    }

    // Identical clouds: perfect scores.
    let cloud = mmvs::fusion::PointCloud {
        points: points
            .iter()
            .map(|p| mmvs::fusion::FusedPoint {
                position: *p,
                color: [0.5; 3],
                support: 1,
            })
            .collect(),
    };
    let rep = evaluate_clouds(&cloud, &cloud, 2.0, &[0.05, 0.1]).unwrap();
    let perfect = rep.overall == 0.0
        && rep.accuracy == 0.0
        && rep.completeness == 0.0
        && rep.thresholds.iter().all(|t| t.f_score == 100.0);

    let ok = gt_frac >= 0.95 && scaled_survivors == 0 && nn_exact && perfect;
    report(
        "criterion 8 (fusion/eval oracles)",
        ok,
        &format!(
            "GT consistency {gt_frac:.3}, 2% scale survivors {scaled_survivors}, NN exact {nn_exact}, identical clouds perfect {perfect}"
        ),
    );
}

// -------------------------------------------- criterion 9: end-to-end CLI

fn mmvs_bin() -> &'static str {
    env!("CARGO_BIN_EXE_mmvs")
}

fn run_cli(args: &[&str]) -> std::process::Output {
    let out = Command::new(mmvs_bin()).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "mmvs {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn criterion_09_end_to_end_cli() {
    let start = Instant::now();
    let root = std::env::temp_dir().join("mmvs_acceptance_e2e");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();

    run_cli(&["--preset", "desk", "--out", &p("data"), "gen-data"]);
    run_cli(&["--preset", "desk", "--out", &p("train"), "meta-train", "--data", &p("data")]);
    run_cli(&[
        "--preset", "desk", "--out", &p("ft"),
        "fine-tune", "--data", &p("data"), "--checkpoint", &p("train"),
    ]);
    run_cli(&[
        "--preset", "desk", "--out", &p("fuse"),
        "fuse", "--data", &p("data"), "--checkpoint", &p("ft"),
    ]);
    run_cli(&[
        "--preset", "desk", "--out", &p("eval"),
        "eval", "--data", &p("data"), "--est", &p("fuse/cloud.ply"),
    ]);

    let cloud = read_ply(root.join("fuse/cloud.ply")).unwrap();
    let report_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("eval/report.json")).unwrap())
            .unwrap();
    let acc = report_json["accuracy"].as_f64().unwrap();
    let comp = report_json["completeness"].as_f64().unwrap();

    // 10% of the held-out domain's depth range [2, 6].
    let limit = 0.1 * 4.0;
    let elapsed = start.elapsed().as_secs_f64();
    let ok = !cloud.points.is_empty() && acc < limit && comp < limit && elapsed < 600.0;
    report(
        "criterion 9 (end-to-end CLI)",
        ok,
        &format!(
            "{} points, accuracy {acc:.4} / completeness {comp:.4} vs {limit}, {elapsed:.1}s",
            cloud.points.len()
        ),
    );
}

// --------------------------------------------- criterion 10: determinism

/// Byte-compares two directory trees, ignoring manifest.json (it records
/// wall-clock timings).
fn dirs_equal(a: &Path, b: &Path) -> bool {
    fn listing(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for e in entries {
            if e.is_dir() {
                listing(&e, root, out);
            } else if e.file_name().unwrap() != "manifest.json" {
                out.push(e.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut la = Vec::new();
    let mut lb = Vec::new();
    listing(a, a, &mut la);
    listing(b, b, &mut lb);
    la == lb
        && la.iter().all(|rel| {
            std::fs::read(a.join(rel)).unwrap() == std::fs::read(b.join(rel)).unwrap()
        })
}

#[test]
fn criterion_10_determinism() {
    let root = std::env::temp_dir().join("mmvs_acceptance_det");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();

    // A small config keeps the double runs cheap.
    let mut cfg = RunConfig::desk();
    cfg.seed = 9;
    cfg.meta.seed = 9;
    cfg.meta.max_iters = 3;
    cfg.meta.checkpoint_every = 0;
    cfg.fine_tune.steps = 5;
    cfg.save(root.join("cfg.json")).unwrap();
    let cfg_arg = p("cfg.json");

    let mut all_equal = true;
    let mut detail = String::new();
    let mut stage = |name: &str, args: &[&str]| {
        for run in ["a", "b"] {
            let out = p(&format!("{name}_{run}"));
            let mut full: Vec<&str> = vec!["--config", &cfg_arg, "--out", &out];
            full.extend(args.iter().map(|s| &**s));
            run_cli(&full);
        }
        let eq = dirs_equal(&root.join(format!("{name}_a")), &root.join(format!("{name}_b")));
        if !eq {
            all_equal = false;
            detail.push_str(&format!("{name} differs; "));
        }
        eq
    };

    stage("gen", &["gen-data"]);
    let data = p("gen_a");
    stage("train", &["meta-train", "--data", &data]);
    let ckpt = p("train_a");
    stage("ft", &["fine-tune", "--data", &data, "--checkpoint", &ckpt]);
    let ftc = p("ft_a");
    stage("predict", &["predict", "--data", &data, "--checkpoint", &ftc]);
    stage("fuse", &["fuse", "--data", &data, "--checkpoint", &ftc]);
    let ply = p("fuse_a/cloud.ply");
    stage("eval", &["eval", "--data", &data, "--est", &ply]);

    // Checkpoint resume reproduces the uninterrupted run bit for bit.
    let ds = tiny_dataset(101);
    let mut mcfg = tiny_meta_config(102);
    mcfg.max_iters = 4;
    let init = init_model_params(&mut ChaCha8Rng::seed_from_u64(103), &ArchConfig { channels: 2 });

    let mut full = TrainState::new(init.clone_params(), &mcfg);
    meta_train(&mut full, &ds, &mcfg, None).unwrap();

    let ckpt_dir = root.join("resume");
    let mut half_cfg = mcfg.clone();
    half_cfg.max_iters = 2;
    let mut half = TrainState::new(init.clone_params(), &half_cfg);
    meta_train(&mut half, &ds, &half_cfg, Some(&ckpt_dir)).unwrap();
    let mut resumed = TrainState::load(&ckpt_dir, &half_cfg).unwrap();
    meta_train(&mut resumed, &ds, &mcfg, None).unwrap();
    let resume_exact = resumed.params.content_hash() == full.params.content_hash();
    if !resume_exact {
        detail.push_str("resume differs; ");
    }

    let ok = all_equal && resume_exact;
    report(
        "criterion 10 (determinism)",
        ok,
        if detail.is_empty() { "all commands byte-reproducible, resume bit-exact" } else { &detail },
    );
}
