use std::fs;
use std::path::{Path, PathBuf};

use posegan::data::{load_native_frames, write_synthetic_set};
use posegan::losses::total_loss;
use posegan::nets::{GammaConfig, GammaMode, NetConfig, PHI, PSI};
use posegan::prior::{generate_prior_from_meta, CameraModel, MotionParams, PriorMeta};
use posegan::skeleton::SkeletonTopology;
use posegan::train::{
    load_bundle, predict_batch, predict_pose, read_manifest, train_loop, Trainer, TrainConfig, CHECKPOINT_DIR, LOG_FILE,
};
use posegan::Error;
use tempfile::TempDir;

struct Data {
    _dir: TempDir,
    root: PathBuf,
}

fn data() -> Data {
    let dir = TempDir::new().unwrap();
    let root = dir.path().to_path_buf();
    let t = SkeletonTopology::mouse18();
    let cam = CameraModel::mouse_ventral();
    let meta = |seed, count| {
        let mut m = PriorMeta::new(&t, &t.limits, &MotionParams { seed, ..Default::default() }, &cam, count);
        m.sequence_length = 10;
        m
    };
    write_synthetic_set(&root.join("images"), &t, &meta(1, 30), (32, 32)).unwrap();
    generate_prior_from_meta(&t, &meta(100, 30)).unwrap().save(&root.join("prior"), &t).unwrap();
    Data { _dir: dir, root }
}

fn config(root: &Path, steps: u64) -> TrainConfig {
    TrainConfig {
        images: root.join("images"),
        prior: root.join("prior"),
        batch_size: 2,
        steps,
        checkpoint_every: 4,
        sample_every: 5,
        seed: 3,
        net: NetConfig {
            image_resolution: (32, 32),
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
        },
        ..Default::default()
    }
}

fn checkpoints(run: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(run.join(CHECKPOINT_DIR))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

fn log_rows(run: &Path) -> Vec<String> {
    fs::read_to_string(run.join(LOG_FILE)).unwrap().lines().skip(1).map(str::to_string).collect()
}

#[test]
fn zero_steps_writes_only_the_initial_checkpoint() {
    let d = data();
    let run = d.root.join("run");
    let out = train_loop(&config(&d.root, 0), &run, None).unwrap();
    assert_eq!(checkpoints(&run), ["step_0"]);
    assert!(log_rows(&run).is_empty());
    assert!(out.reports.is_empty());
    assert_eq!(read_manifest(&out.final_checkpoint).unwrap().step, 0);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let d = data();
    let run = d.root.join("run");
    let out = train_loop(&config(&d.root, 3), &run, None).unwrap();
    assert_eq!(checkpoints(&run), ["step_0", "step_3"]);
    let (cfg, bundle) = load_bundle(&out.final_checkpoint).unwrap();
    assert_eq!(cfg, config(&d.root, 3));
    assert_eq!(bundle.hash(&[]).unwrap(), out.trainer.bundle.hash(&[]).unwrap());

    let mut fresh = Trainer::new(cfg.clone(), SkeletonTopology::mouse18()).unwrap();
    fresh.load_checkpoint(&out.final_checkpoint).unwrap();
    let again = d.root.join("again");
    let path = fresh.save_checkpoint(&again).unwrap();
    for f in ["params.safetensors", "optimizer.safetensors", "manifest.toml"] {
        assert_eq!(fs::read(path.join(f)).unwrap(), fs::read(out.final_checkpoint.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn resume_continues_the_log_and_matches_an_uninterrupted_run() {
    let d = data();
    let full = d.root.join("full");
    train_loop(&config(&d.root, 10), &full, None).unwrap();
    assert_eq!(checkpoints(&full), ["step_0", "step_10", "step_4", "step_8"]);

    let split = d.root.join("split");
    train_loop(&config(&d.root, 4), &split, None).unwrap();
    let resumed = train_loop(&config(&d.root, 10), &split, Some(&split.join("checkpoints/step_4"))).unwrap();
    assert_eq!(resumed.reports.len(), 6);
    let rows = log_rows(&split);
    assert!(rows[4].starts_with("5,"));
    assert_eq!(rows, log_rows(&full));
    assert_eq!(
        fs::read(split.join("checkpoints/step_10/params.safetensors")).unwrap(),
        fs::read(full.join("checkpoints/step_10/params.safetensors")).unwrap()
    );
}

#[test]
fn resume_under_a_different_configuration_is_refused() {
    let d = data();
    let run = d.root.join("run");
    train_loop(&config(&d.root, 2), &run, None).unwrap();
    let mut other = config(&d.root, 4);
    other.learning_rate = 1e-3;
    assert!(matches!(
        train_loop(&other, &run, Some(&run.join("checkpoints/step_2"))),
        Err(Error::Config(_))
    ));
}

#[test]
fn missing_data_is_a_data_error() {
    let d = data();
    let mut cfg = config(&d.root, 1);
    cfg.prior = d.root.join("nowhere");
    assert!(matches!(train_loop(&cfg, &d.root.join("run"), None), Err(Error::Data(_))));
}

#[test]
fn invalid_configuration_lists_every_problem() {
    let d = data();
    let mut cfg = config(&d.root, 1);
    cfg.batch_size = 0;
    cfg.learning_rate = -1.0;
    cfg.adam_beta1 = 1.0;
    match cfg.validate() {
        Err(Error::Config(errs)) => assert_eq!(errs.len(), 3, "{errs:?}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn non_finite_loss_names_the_term() {
    assert_eq!(total_loss(1.0, 2.0, 3.0, 1).unwrap(), 6.0);
    assert_eq!(total_loss(0.0, 0.0, 0.0, 1).unwrap(), 0.0);
    match total_loss(1.0, f64::NAN, 0.0, 7) {
        Err(Error::Divergence { term, step }) => assert_eq!((term, step), ("disc", 7)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn prediction_is_batch_invariant_and_read_only() {
    let d = data();
    let out = train_loop(&config(&d.root, 2), &d.root.join("run"), None).unwrap();
    let (_, bundle) = load_bundle(&out.final_checkpoint).unwrap();
    let before = (bundle.hash(&[PHI]).unwrap(), bundle.hash(&[PSI]).unwrap());
    let frames: Vec<_> = load_native_frames(&d.root.join("images")).unwrap().into_iter().map(|(_, g)| g).collect();
    let (batched, resized) = predict_batch(&bundle, &frames[..7]).unwrap();
    assert_eq!(resized, 0);
    for (img, p) in frames[..7].iter().zip(&batched) {
        let (single, was_resized) = predict_pose(&bundle, img).unwrap();
        assert!(!was_resized);
        assert_eq!(single.coords.len(), 18);
        for (a, b) in single.coords.iter().zip(&p.coords) {
            assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
        }
    }
    assert_eq!((bundle.hash(&[PHI]).unwrap(), bundle.hash(&[PSI]).unwrap()), before);

    let big = image::imageops::resize(&frames[0], 50, 40, image::imageops::FilterType::Triangle);
    let (p, was_resized) = predict_pose(&bundle, &big).unwrap();
    assert!(was_resized);
    assert!(p.coords.iter().flatten().all(|c| c.abs() <= 1.0));
}
