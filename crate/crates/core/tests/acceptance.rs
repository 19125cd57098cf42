//! Acceptance criteria. Each test prints one `criterion N PASS|FAIL` line
//! (written past the test harness capture) and then asserts it.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use posegan::data::{write_synthetic_set, ImageSet};
use posegan::eval::{load_ground_truth, mpjpe, mpjpe_sets, GroundTruthSet, GROUND_TRUTH_FILE};
use posegan::losses::{
    adversarial_losses, disc_loss, gen_adv_loss, perceptual_loss, regression_loss, regression_terms,
};
use posegan::nets::{poses_to_tensor, GammaConfig, GammaMode, ModelBundle, NetConfig};
use posegan::prior::{
    generate_frames, generate_prior, generate_prior_from_meta, joint_angles, CameraModel, MotionParams,
    PriorDataset, PriorMeta, DEFAULT_PRIOR_SIZE, POSES_FILE,
};
use posegan::raster::{beta_gradient, rasterize, rasterize_reference, Composition, RasterParams};
use posegan::skeleton::{Pose2D, SkeletonTopology};
use posegan::train::{
    eta_optimizer, load_bundle, predict_batch, pretrain_eta, train_loop, AuxPairing, RasterConfig, TrainConfig,
    LOG_FILE,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn report(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n} {}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n}: {detail}");
}

fn note(text: &str) {
    let _ = std::io::stderr().write_all(format!("  {text}\n").as_bytes());
}

fn prior_poses(t: &SkeletonTopology, seed: u64, count: usize) -> Vec<Pose2D> {
    let cam = CameraModel::default_for(t);
    let motion = MotionParams { seed, ..Default::default() };
    generate_prior(t, &t.limits, &motion, &cam, count).unwrap().poses
}

fn random_pose(t: &SkeletonTopology, rng: &mut ChaCha8Rng) -> Pose2D {
    let coords = (0..t.joint_count())
        .map(|_| [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)])
        .collect();
    Pose2D::new(t, coords).unwrap()
}

fn scalar(x: &Tensor) -> f64 {
    x.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn f64s(x: &Tensor) -> Vec<f64> {
    x.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

/// `|a - b| / max(|a|, |b|)`, 0 when both vanish.
fn rel_err(a: f64, b: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m == 0.0 {
        0.0
    } else {
        (a - b).abs() / m
    }
}

/// Worst per-coordinate relative error of the analytic β gradient against
/// central differences with step `h`, and the number of coordinates over
/// `tol`.
fn fd_check(t: &SkeletonTopology, params: &RasterParams, poses: &[Pose2D], h: f64, tol: f64) -> (f64, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut worst, mut bad, mut total) = (0.0f64, 0, 0);
    for pose in poses {
        let u: Vec<f64> = (0..params.image_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let analytic = beta_gradient(pose, t, params, &u).unwrap();
        let inner = |p: &Pose2D| -> f64 {
            rasterize(p, t, params).unwrap().pixels.iter().zip(&u).map(|(a, b)| a * b).sum()
        };
        for j in 0..t.joint_count() {
            for k in 0..2 {
                let (mut plus, mut minus) = (pose.clone(), pose.clone());
                plus.coords[j][k] += h;
                minus.coords[j][k] -= h;
                let fd = (inner(&plus) - inner(&minus)) / (2.0 * h);
                let e = rel_err(analytic[j][k], fd);
                worst = worst.max(e);
                bad += (e >= tol) as usize;
                total += 1;
            }
        }
    }
    (worst, bad, total)
}

#[test]
fn criterion_01_beta_gradient_matches_finite_differences() {
    let start = Instant::now();
    let t = SkeletonTopology::mouse18();
    let params = RasterParams::default_for(&t, (64, 64));
    let poses = prior_poses(&t, 41, 20);
    let (worst, bad, total) = fd_check(&t, &params, &poses, 1e-3, 1e-3);
    let (fine_worst, fine_bad, _) = fd_check(&t, &params, &poses, 1e-5, 1e-3);
    let elapsed = start.elapsed();
    note(&format!("diagnostic at h=1e-5: worst relative error {fine_worst:.2e}, {fine_bad} coordinates over 1e-3"));
    report(
        1,
        bad == 0 && elapsed < Duration::from_secs(60),
        &format!(
            "h=1e-3, sigma {:.2} px: {bad}/{total} coordinates with relative error >= 1e-3 (worst {worst:.2e}), {:.1}s",
            params.sigma,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_02_fast_rasterizer_equals_dense_reference() {
    let t = SkeletonTopology::mouse18();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let poses: Vec<Pose2D> = (0..50).map(|_| random_pose(&t, &mut rng)).collect();
    let mut worst = 0.0f64;
    for composition in [Composition::Max, Composition::SoftOr] {
        let mut params = RasterParams::default_for(&t, (128, 128));
        params.composition = composition;
        for p in &poses {
            let fast = rasterize(p, &t, &params).unwrap();
            let dense = rasterize_reference(p, &t, &params).unwrap();
            for (a, b) in fast.pixels.iter().zip(&dense.pixels) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    report(
        2,
        worst <= 1e-6,
        &format!("50 random poses at 128x128, both compositions: max |fast - dense| = {worst:.2e} (tol 1e-6)"),
    );
}

fn small_net(resolution: (usize, usize)) -> NetConfig {
    NetConfig {
        image_resolution: resolution,
        phi_channels: vec![4, 8],
        psi_channels: vec![4, 8],
        eta_channels: vec![4, 8],
        disc_channels: vec![4, 8],
        eta_hidden: 16,
        gamma: GammaConfig {
            mode: GammaMode::Random { channels: 4, seed: 1 },
            depth: 2,
        },
        ..Default::default()
    }
}

fn small_bundle(t: &SkeletonTopology) -> ModelBundle {
    let net = small_net((32, 32));
    let raster = RasterParams::default_for(t, net.image_resolution);
    ModelBundle::new(net, t.clone(), raster).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// `(1/N) Σ_i Σ_k (a_ik - b_ik)²` by explicit loops.
fn sq_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.dims()[0];
    let (a, b) = (f64s(a), f64s(b));
    let per = a.len() / n;
    let mut total = 0.0;
    for i in 0..n {
        let mut s = 0.0;
        for k in 0..per {
            let d = a[i * per + k] - b[i * per + k];
            s += d * d;
        }
        total += s;
    }
    total / n as f64
}

#[test]
fn criterion_03_loss_formulas_match_oracles() {
    let t = SkeletonTopology::mouse18();
    let b = small_bundle(&t);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut check = |got: f64, want: f64| worst = worst.max((got - want).abs());

    for n in [1usize, 3, 8] {
        // perceptual: feature-space squared distance
        let x = uniform(&mut rng, &[n, 1, 32, 32]);
        let x_rec = uniform(&mut rng, &[n, 1, 32, 32]);
        let got = scalar(&perceptual_loss(&b.gamma, &x_rec, &x).unwrap());
        let want = sq_oracle(&b.gamma_features(&x_rec).unwrap(), &b.gamma_features(&x).unwrap());
        check(got, want);

        // adversarial: least squares with prior -> 0, predicted -> 1
        let d_prior = uniform(&mut rng, &[n]);
        let d_pred = uniform(&mut rng, &[n + 2]);
        let (p, q) = (f64s(&d_prior), f64s(&d_pred));
        let want_d = p.iter().map(|v| v * v).sum::<f64>() / p.len() as f64
            + q.iter().map(|v| (1.0 - v) * (1.0 - v)).sum::<f64>() / q.len() as f64;
        let want_g = q.iter().map(|v| v * v).sum::<f64>() / q.len() as f64;
        check(scalar(&disc_loss(&d_prior, &d_pred).unwrap()), want_d);
        check(scalar(&gen_adv_loss(&d_pred).unwrap()), want_g);

        // regression: fused path against composed path against loops
        let poses: Vec<Pose2D> = (0..n).map(|_| random_pose(&t, &mut rng)).collect();
        let v_hat = poses_to_tensor(&poses).unwrap();
        let s_hat = b.beta(&v_hat).unwrap();
        let s = uniform(&mut rng, &[n, b.skeleton_channels(), 32, 32]);
        let lambda = rng.random_range(0.01..1.0);
        let (fused, parts) = regression_loss(&b, &s_hat, &v_hat, &s, lambda).unwrap();
        let eta_prior = b.eta_forward(&s_hat).unwrap();
        let rendered = b.beta(&b.eta_forward(&s).unwrap()).unwrap();
        let composed = regression_terms(&eta_prior, &v_hat, &rendered, &s).unwrap();
        let want_prior = sq_oracle(&eta_prior, &v_hat);
        let want_cycle = sq_oracle(&rendered, &s);
        check(scalar(&parts.prior), want_prior);
        check(scalar(&parts.cycle), want_cycle);
        check(scalar(&composed.combined(lambda).unwrap()), want_prior + lambda * want_cycle);
        check(scalar(&fused), want_prior + lambda * want_cycle);
    }

    let c = |v: &[f32]| Tensor::new(v, &Device::Cpu).unwrap();
    let zero_one = scalar(&adversarial_losses(&c(&[0.0; 5]), &c(&[1.0; 7])).unwrap().0);
    let halves = scalar(&adversarial_losses(&c(&[0.5; 4]), &c(&[0.5; 4])).unwrap().0);
    report(
        3,
        worst <= 1e-6 && zero_one == 0.0 && halves == 0.5,
        &format!("max |impl - oracle| = {worst:.2e} (tol 1e-6); L_D(0,1) = {zero_one}; L_D(0.5,0.5) = {halves}"),
    );
}

#[test]
fn criterion_04_prior_validity() {
    let start = Instant::now();
    let t = SkeletonTopology::mouse18();
    let meta = PriorMeta::new(
        &t,
        &t.limits,
        &MotionParams { seed: 4, ..Default::default() },
        &CameraModel::mouse_ventral(),
        DEFAULT_PRIOR_SIZE,
    );
    let frames = generate_frames(&t, &meta).unwrap();
    let within = frames
        .iter()
        .filter(|(_, f)| {
            let recovered = joint_angles(&t, &f.pose, f.root.heading);
            f.angles.within(&t.limits)
                && recovered
                    .azimuth
                    .iter()
                    .zip(&t.limits.azimuth)
                    .chain(recovered.elevation.iter().zip(&t.limits.elevation))
                    .all(|(a, r)| *a >= r.min - 1e-9 && *a <= r.max + 1e-9)
        })
        .count();
    let rigidity = frames
        .iter()
        .map(|(_, f)| f.pose.rigidity_error(&t, &t.lengths))
        .fold(0.0f64, f64::max);

    let dir = TempDir::new().unwrap();
    let prior = generate_prior_from_meta(&t, &meta).unwrap();
    prior.save(dir.path(), &t).unwrap();
    let nj = t.joint_count();
    let mut min_var = f64::INFINITY;
    for j in 0..nj {
        for k in 0..2 {
            let v: Vec<f64> = prior.poses.iter().map(|p| p.coords[j][k]).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
            min_var = min_var.min(var);
        }
    }
    let loaded = PriorDataset::load(dir.path(), &t).unwrap();
    let again = generate_prior_from_meta(&t, &loaded.meta).unwrap();
    let redo = TempDir::new().unwrap();
    again.save(redo.path(), &t).unwrap();
    let identical = again == prior
        && std::fs::read(dir.path().join(POSES_FILE)).unwrap() == std::fs::read(redo.path().join(POSES_FILE)).unwrap();
    let elapsed = start.elapsed();
    report(
        4,
        within == frames.len()
            && rigidity <= 1e-6
            && min_var > 0.0
            && identical
            && prior.len() == DEFAULT_PRIOR_SIZE
            && elapsed < Duration::from_secs(300),
        &format!(
            "{} poses, {within} within joint limits, max rigidity error {rigidity:.1e}, min coordinate variance {min_var:.2e}, regenerated identically: {identical}, {:.0}s",
            prior.len(),
            elapsed.as_secs_f64()
        ),
    );
}

fn random_gt(t: &SkeletonTopology, rng: &mut ChaCha8Rng, n: usize, w: u32, h: u32) -> GroundTruthSet {
    let mut g = GroundTruthSet::new(t, w, h, "random");
    for f in 0..n {
        g.frames.push(f);
        g.coords.push(
            (0..t.joint_count())
                .map(|_| {
                    (rng.random_range(0.0..1.0) > 0.1)
                        .then(|| [rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)])
                })
                .collect(),
        );
    }
    g
}

#[test]
fn criterion_05_mpjpe_oracle() {
    let t = SkeletonTopology::mouse18();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let gt = random_gt(&t, &mut rng, 30, 640, 480);
        let pred = random_gt(&t, &mut rng, 30, 640, 480);
        let table = mpjpe_sets(&pred, &gt).unwrap();
        let mut means = Vec::new();
        for j in 0..t.joint_count() {
            let (mut sum, mut count) = (0.0, 0);
            for f in 0..gt.frames.len() {
                if let (Some(a), Some(b)) = (pred.coords[f][j], gt.coords[f][j]) {
                    sum += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                    count += 1;
                }
            }
            let m = sum / count as f64;
            worst = worst.max((table.per_joint[j].unwrap() - m).abs());
            means.push(m);
        }
        worst = worst.max((table.average - means.iter().sum::<f64>() / means.len() as f64).abs());
    }

    // Whole-pixel annotations keep the shifted differences exact.
    let mut gt = random_gt(&t, &mut rng, 10, 200, 100);
    for c in gt.coords.iter_mut().flatten().flatten() {
        *c = c.map(f64::floor);
    }
    let mut shifted = gt.clone();
    for c in shifted.coords.iter_mut().flatten().flatten() {
        c[0] += 3.0;
        c[1] += 4.0;
    }
    let offset = mpjpe_sets(&shifted, &gt).unwrap();
    let all_five = offset.per_joint.iter().flatten().all(|&e| e == 5.0) && offset.average == 5.0;

    let pred = random_gt(&t, &mut rng, 10, 200, 100);
    let base = mpjpe_sets(&pred, &gt).unwrap();
    let double = mpjpe_sets(&pred.scaled(2), &gt.scaled(2)).unwrap();
    let doubles = base
        .per_joint
        .iter()
        .zip(&double.per_joint)
        .all(|(a, b)| b.unwrap() == 2.0 * a.unwrap())
        && double.average == 2.0 * base.average;
    report(
        5,
        worst <= 1e-9 && all_five && doubles,
        &format!("max |mpjpe - loop| = {worst:.1e} (tol 1e-9); (3,4) offset gives 5.0: {all_five}; 2x resolution doubles: {doubles}"),
    );
}

/// Mean joint error in pixels of the regressor on rasterized `poses`.
fn eta_pixel_error(bundle: &ModelBundle, poses: &[Pose2D]) -> f64 {
    let (h, w) = bundle.config.image_resolution;
    let mut total = 0.0;
    for chunk in poses.chunks(50) {
        let v = poses_to_tensor(chunk).unwrap();
        let pred = f64s(&bundle.eta_forward(&bundle.beta(&v).unwrap()).unwrap());
        let want = f64s(&v);
        for (p, q) in pred.chunks(2).zip(want.chunks(2)) {
            total += ((0.5 * w as f64 * (p[0] - q[0])).powi(2) + (0.5 * h as f64 * (p[1] - q[1])).powi(2)).sqrt();
        }
    }
    total / (poses.len() * bundle.topology.joint_count()) as f64
}

#[test]
fn criterion_06_regressor_learns_from_prior_pairs() {
    let start = Instant::now();
    let t = SkeletonTopology::mouse18();
    let train = prior_poses(&t, 600, 5000);
    let held_out = prior_poses(&t, 6000, 500);
    let mut cfg = TrainConfig {
        batch_size: 32,
        learning_rate: 1e-3,
        adam_beta1: 0.9,
        seed: 6,
        ..Default::default()
    };
    cfg.net.image_resolution = (128, 128);
    let bundle = cfg.build_bundle(t).unwrap();
    let mut opt = eta_optimizer(&bundle, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let budget = Duration::from_secs(45 * 60);
    let mut steps = 0;
    let mut err = eta_pixel_error(&bundle, &held_out);
    while start.elapsed() < budget && err >= 2.0 && steps < 20_000 {
        pretrain_eta(&bundle, &train, 500, cfg.batch_size, &mut opt, &mut rng).unwrap();
        steps += 500;
        err = eta_pixel_error(&bundle, &held_out);
        note(&format!("regressor step {steps}: {err:.3} px after {:.0}s", start.elapsed().as_secs_f64()));
    }
    let elapsed = start.elapsed();
    report(
        6,
        err < 2.0 && elapsed <= budget,
        &format!(
            "held-out mean joint error {err:.3} px at 128x128 after {steps} steps on 5000 pairs, {:.0}s (limit 2 px, 45 min)",
            elapsed.as_secs_f64()
        ),
    );
}

const SI_SP_STEPS: u64 = 2000;

/// Synthetic images with a disjoint prior, as trained for criteria 7 and 9.
fn si_sp_config(root: &Path) -> TrainConfig {
    let mut cfg = TrainConfig {
        images: root.join("images"),
        prior: root.join("prior"),
        batch_size: 8,
        learning_rate: 2e-4,
        steps: SI_SP_STEPS,
        checkpoint_every: 1000,
        sample_every: 500,
        lambda: 0.1,
        aux_pairing: AuxPairing::Global,
        eta_pretrain_steps: 1000,
        seed: 1,
        deterministic: true,
        raster: RasterConfig {
            sigma: Some(2.0),
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.weights.perceptual = 0.1;
    cfg.weights.regression = 1.0;
    cfg.weights.adversarial = 100.0;
    cfg.net = NetConfig {
        image_resolution: (64, 64),
        phi_channels: vec![8, 16, 32],
        psi_channels: vec![8, 16, 32],
        eta_channels: vec![16, 32, 64],
        disc_channels: vec![8, 16, 32],
        eta_hidden: 128,
        gamma: GammaConfig {
            mode: GammaMode::Random { channels: 8, seed: 0x5eed },
            depth: 3,
        },
        ..Default::default()
    };
    cfg
}

struct SiSpRuns {
    _dir: TempDir,
    root: PathBuf,
    runs: [PathBuf; 2],
    finals: [PathBuf; 2],
    elapsed: Duration,
}

/// Data for criterion 7 and two deterministic runs of its configuration,
/// built once per test binary.
fn si_sp_runs() -> &'static SiSpRuns {
    static RUNS: OnceLock<SiSpRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        std::env::set_var("RAYON_NUM_THREADS", "1");
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        let t = SkeletonTopology::mouse18();
        let cam = CameraModel::mouse_ventral();
        let meta = |seed: u64, count: usize| {
            PriorMeta::new(&t, &t.limits, &MotionParams { seed, ..Default::default() }, &cam, count)
        };
        write_synthetic_set(&root.join("images"), &t, &meta(1000, 2000), (64, 64)).unwrap();
        write_synthetic_set(&root.join("test"), &t, &meta(3000, 200), (64, 64)).unwrap();
        generate_prior_from_meta(&t, &meta(2000, 2000)).unwrap().save(&root.join("prior"), &t).unwrap();
        let cfg = si_sp_config(&root);
        let start = Instant::now();
        let mut finals = Vec::new();
        let runs = [root.join("run_a"), root.join("run_b")];
        for run in &runs {
            finals.push(train_loop(&cfg, run, None).unwrap().final_checkpoint);
        }
        SiSpRuns {
            root,
            runs,
            finals: [finals[0].clone(), finals[1].clone()],
            elapsed: start.elapsed() / 2,
            _dir: dir,
        }
    })
}

fn test_mpjpe(bundle: &ModelBundle, test_dir: &Path) -> f64 {
    let set = ImageSet::load(test_dir, bundle.config.image_resolution).unwrap();
    let gt = load_ground_truth(&test_dir.join(GROUND_TRUTH_FILE), &bundle.topology).unwrap();
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut preds = Vec::new();
    for chunk in idx.chunks(50) {
        let poses = bundle.predict(&set.tensor(chunk).unwrap()).unwrap();
        preds.extend(chunk.iter().map(|&i| set.frames[i].frame).zip(poses));
    }
    mpjpe(&preds, &gt).unwrap().average
}

#[test]
fn criterion_07_synthetic_end_to_end() {
    let runs = si_sp_runs();
    let cfg = si_sp_config(&runs.root);
    let test_dir = runs.root.join("test");
    let untrained = test_mpjpe(&cfg.build_bundle(SkeletonTopology::mouse18()).unwrap(), &test_dir);
    let (_, trained) = load_bundle(&runs.finals[0]).unwrap();
    let err = test_mpjpe(&trained, &test_dir);
    let width_limit = 0.08 * 64.0;
    report(
        7,
        err < width_limit && err * 3.0 <= untrained,
        &format!(
            "{SI_SP_STEPS} steps, {:.0}s: MPJPE {err:.2} px on 200 held-out frames (limit {width_limit:.2} px = 8% of 64), untrained {untrained:.2} px (need <= {:.2})",
            runs.elapsed.as_secs_f64(),
            untrained / 3.0
        ),
    );
}

fn run_tree(dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>, root: &Path) {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            run_tree(&p, out, root);
        } else {
            out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
        }
    }
}

#[test]
fn criterion_09_deterministic_runs_are_identical() {
    let runs = si_sp_runs();
    let log = |i: usize| std::fs::read(runs.runs[i].join(LOG_FILE)).unwrap();
    let same_log = log(0) == log(1) && !log(0).is_empty();
    let ckpt = |i: usize| {
        let mut v = Vec::new();
        run_tree(&runs.finals[i], &mut v, &runs.finals[i]);
        v
    };
    let (a, b) = (ckpt(0), ckpt(1));
    let same_ckpt = !a.is_empty() && a == b;
    report(
        9,
        same_log && same_ckpt,
        &format!(
            "two {SI_SP_STEPS}-step runs: loss logs identical: {same_log}; final checkpoints ({} files) identical: {same_ckpt}",
            a.len()
        ),
    );
}

/// Tiny configuration for structural runs.
fn toy_config(images: &Path, prior: &Path, topology: &str, steps: u64) -> TrainConfig {
    TrainConfig {
        topology: topology.into(),
        images: images.into(),
        prior: prior.into(),
        batch_size: 4,
        steps,
        checkpoint_every: steps.max(1),
        sample_every: 0,
        seed: 8,
        net: small_net((32, 32)),
        ..Default::default()
    }
}

#[test]
fn criterion_08_no_image_pose_pairing_reaches_training() {
    let dir = TempDir::new().unwrap();
    let root = dir.path();
    let t = SkeletonTopology::mouse18();
    let cam = CameraModel::mouse_ventral();
    let meta = |seed: u64, count: usize| {
        let mut m = PriorMeta::new(&t, &t.limits, &MotionParams { seed, ..Default::default() }, &cam, count);
        m.sequence_length = 20;
        m
    };
    let synthetic = root.join("synthetic");
    write_synthetic_set(&synthetic, &t, &meta(80, 40), (32, 32)).unwrap();
    let prior = root.join("prior");
    generate_prior_from_meta(&t, &meta(180, 40)).unwrap().save(&prior, &t).unwrap();

    // Unannotated frames, as extracted from real video.
    let real = root.join("real");
    std::fs::create_dir_all(&real).unwrap();
    for e in std::fs::read_dir(&synthetic).unwrap() {
        let p = e.unwrap().path();
        let name = p.file_name().unwrap().to_str().unwrap().to_string();
        if name.ends_with(".png") || name == "index.csv" {
            std::fs::copy(&p, real.join(&name)).unwrap();
        }
    }

    let si = train_loop(&toy_config(&synthetic, &prior, "mouse18", 6), &root.join("si"), None).unwrap();
    let ri = train_loop(&toy_config(&real, &prior, "mouse18", 6), &root.join("ri"), None).unwrap();
    let si_ok = si.audit.image_set_annotated && si.audit.shared_poses == 0;
    let ri_ok = !ri.audit.image_set_annotated && ri.audit.shared_poses == 0;
    let annotations_unused = std::fs::read(root.join("si").join(LOG_FILE)).unwrap()
        == std::fs::read(root.join("ri").join(LOG_FILE)).unwrap();

    // A prior built from the image set's own poses must be refused.
    let leaked = root.join("leaked_prior");
    let own = PriorDataset {
        poses: posegan::prior::read_poses_csv(&synthetic.join(POSES_FILE), &t).unwrap(),
        meta: meta(80, 40),
    };
    own.save(&leaked, &t).unwrap();
    let leak_refused = matches!(
        train_loop(&toy_config(&synthetic, &leaked, "mouse18", 1), &root.join("leak"), None),
        Err(posegan::Error::Data(m)) if m.contains("pairing leak")
    );
    let same_dir_refused = train_loop(&toy_config(&synthetic, &synthetic, "mouse18", 1), &root.join("same"), None).is_err();
    report(
        8,
        si_ok && ri_ok && annotations_unused && leak_refused && same_dir_refused,
        &format!(
            "SI+SP audit clean: {si_ok}; RI+SP audit clean: {ri_ok}; training identical with and without annotations: {annotations_unused}; shared poses refused: {leak_refused}; shared directory refused: {same_dir_refused}"
        ),
    );
}

#[test]
fn criterion_10_horse_topology_runs_end_to_end() {
    let dir = TempDir::new().unwrap();
    let root = dir.path();
    let t = SkeletonTopology::horse();
    let cam = CameraModel::default_for(&t);
    let meta = |seed: u64, count: usize| {
        let mut m = PriorMeta::new(&t, &t.limits, &MotionParams { seed, ..Default::default() }, &cam, count);
        m.sequence_length = 50;
        m
    };
    let images = root.join("images");
    write_synthetic_set(&images, &t, &meta(10, 100), (32, 32)).unwrap();
    let prior = root.join("prior");
    generate_prior_from_meta(&t, &meta(110, 200)).unwrap().save(&prior, &t).unwrap();
    let out = train_loop(&toy_config(&images, &prior, "horse", 500), &root.join("run"), None).unwrap();
    let (_, bundle) = load_bundle(&out.final_checkpoint).unwrap();
    let frames = posegan::data::load_native_frames(&images).unwrap();
    let imgs: Vec<_> = frames.into_iter().map(|(_, g)| g).collect();
    let (poses, _) = predict_batch(&bundle, &imgs).unwrap();
    let valid = poses.len() == imgs.len()
        && poses.iter().all(|p| {
            p.topology == "horse"
                && p.coords.len() == t.joint_count()
                && p.coords.iter().flatten().all(|c| c.is_finite() && c.abs() <= 1.0)
        });
    report(
        10,
        out.trainer.step == 500 && valid,
        &format!(
            "horse ({} joints): trained {} steps, predicted {} valid poses of {} images",
            t.joint_count(),
            out.trainer.step,
            poses.iter().filter(|p| p.coords.len() == t.joint_count()).count(),
            imgs.len()
        ),
    );
}
