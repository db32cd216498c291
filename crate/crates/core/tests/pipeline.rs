use putr::data::{format_xyz, generate_dataset};
use putr::geometry::{extract_patches, PointCloud, COVERAGE_FACTOR};
use putr::metrics::SurfaceRef;
use putr::model::{Model, ModelConfig};
use putr::pipeline::{
    evaluate, noise_sweep, train, upsample_cloud, EvalCase, OptimizerKind, ParamsReport, RunManifest, TrainConfig,
    TrainPair,
};
use putr::Error;
use rand::SeedableRng;

fn small(ratio: usize) -> ModelConfig {
    ModelConfig {
        channels: vec![16, 32],
        head_channels: 8,
        k: 8,
        psi: 2,
        ratio,
        ..ModelConfig::default()
    }
}

fn sphere_cloud(n: usize, seed: u64) -> PointCloud {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    PointCloud::new(SurfaceRef::unit_sphere().sample_uniform(n, &mut r)).unwrap()
}

#[test]
fn upsampling_yields_exactly_r_n_points_deterministically() {
    let model = Model::<f32>::init(small(4), 1).unwrap();
    let input = sphere_cloud(2048, 2);
    let a = upsample_cloud(&model, &input, 256).unwrap();
    let b = upsample_cloud(&model, &input, 256).unwrap();
    assert_eq!(a.len(), 8192);
    assert_eq!(format_xyz(&a), format_xyz(&b));
}

#[test]
fn single_patch_input_is_one_forward_pass() {
    let model = Model::<f64>::init(small(2), 3).unwrap();
    let input = sphere_cloud(128, 4);
    let out = upsample_cloud(&model, &input, 128).unwrap();
    let set = extract_patches(&input, 128, COVERAGE_FACTOR).unwrap();
    assert_eq!(set.patches.len(), 1);
    let p = &set.patches[0];
    let direct = p.denormalize(&model.upsample(&p.normalized).unwrap());
    let key = |c: &PointCloud| {
        let mut v: Vec<[u64; 3]> = c.points().iter().map(|q| q.map(f64::to_bits)).collect();
        v.sort_unstable();
        v
    };
    assert_eq!(key(&out), key(&direct));
}

#[test]
fn small_inputs_are_rejected_below_k() {
    let model = Model::<f32>::init(small(2), 5).unwrap();
    assert!(upsample_cloud(&model, &sphere_cloud(7, 6), 256).is_err());
    assert!(upsample_cloud(&model, &sphere_cloud(64, 6), 4).is_err());
    // Fewer points than the patch size: one patch of the whole cloud.
    assert_eq!(upsample_cloud(&model, &sphere_cloud(64, 6), 256).unwrap().len(), 128);
}

fn cases(n: usize, count: usize) -> Vec<EvalCase> {
    generate_dataset(&[SurfaceRef::unit_sphere()], n, 2, count, 9)
        .unwrap()
        .into_iter()
        .map(|r| EvalCase {
            input: r.sparse,
            gt: r.dense,
            surface: r.surface,
        })
        .collect()
}

#[test]
fn noise_sweep_zero_row_equals_clean_run() {
    let model = Model::<f32>::init(small(2), 7).unwrap();
    let cases = cases(64, 2);
    let sweep = noise_sweep(&model, &cases, &[0.0, 0.005, 0.01, 0.02], 64, 1).unwrap();
    assert_eq!(sweep.rows.len(), 4);
    let clean: Vec<_> = cases
        .iter()
        .map(|c| evaluate(&upsample_cloud(&model, &c.input, 64).unwrap(), &c.gt, &c.surface).unwrap())
        .collect();
    let mean = |f: fn(&putr::metrics::MetricReport) -> f64| clean.iter().map(f).sum::<f64>() / clean.len() as f64;
    let zero = &sweep.rows[0].report;
    assert_eq!((zero.cd, zero.hd, zero.p2f), (mean(|r| r.cd), mean(|r| r.hd), mean(|r| r.p2f)));
    let table = sweep.to_table();
    assert_eq!(table.lines().count(), 2 + 4);
    assert!(table.lines().skip(2).all(|l| l.split('|').count() == 4));
}

fn training_pairs(count: usize) -> Vec<TrainPair> {
    generate_dataset(&SurfaceRef::default_zoo()[..2], 32, 2, count, 4)
        .unwrap()
        .iter()
        .map(|r| TrainPair::from_record(r).unwrap())
        .collect()
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 3,
        ..TrainConfig::desk()
    }
}

#[test]
fn training_is_deterministic_and_keeps_best_checkpoint() {
    let pairs = training_pairs(7);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("best.putf");
    let cfg = TrainConfig {
        checkpoint: Some(ckpt.clone()),
        ..quick_config()
    };
    let model = Model::<f32>::init(small(2), 2).unwrap();
    let mut seen = Vec::new();
    let a = train(model.clone(), &pairs, &cfg, |log| seen.push(log.epoch)).unwrap();
    let b = train(model, &pairs, &cfg, |_| {}).unwrap();
    assert_eq!(seen, vec![0, 1, 2]);
    assert_eq!(a.loss_curve(), b.loss_curve());
    assert_eq!(a.model, b.model);
    // 7 pairs in batches of 3 fold into 3 + 4.
    assert!(a.epochs.iter().all(|e| e.steps == 2));
    let (saved, _) = putr::data::load_checkpoint(&ckpt).unwrap();
    assert_eq!(saved, a.best.params);
    let best = a.loss_curve().iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(a.loss_curve()[a.best_epoch], best);
}

#[test]
fn sgd_and_step_limit() {
    let pairs = training_pairs(4);
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        max_steps: Some(3),
        batch_size: 2,
        ..quick_config()
    };
    let out = train(Model::<f32>::init(small(2), 3).unwrap(), &pairs, &cfg, |_| {}).unwrap();
    assert_eq!(out.steps, 3);
    assert_eq!(out.epochs.len(), 2);
}

#[test]
fn non_finite_loss_aborts_with_coordinates() {
    let pairs = training_pairs(4);
    let mut model = Model::<f32>::init(small(2), 3).unwrap();
    model.params.get_mut("tail.b").unwrap().data_mut()[0] = f32::NAN;
    match train(model, &pairs, &quick_config(), |_| {}) {
        Err(Error::NonFiniteLoss { epoch: 0, batch: 0 }) => {}
        other => panic!("{:?}", other.map(|o| o.steps)),
    }
}

#[test]
fn parameter_totals_grow_with_depth() {
    let totals: Vec<usize> = (3..=6)
        .map(|l| ParamsReport::new(&ModelConfig::with_layers(l)).unwrap().count.total)
        .collect();
    assert!(totals.windows(2).all(|w| w[0] < w[1]), "{totals:?}");
    let report = ParamsReport::new(&ModelConfig::default()).unwrap();
    assert!(report.delta_percent().unwrap().abs() <= 15.0);
}

#[test]
fn run_manifest_json_round_trip() {
    let m = RunManifest {
        model_config: RunManifest::config_map(&small(2)),
        train_config: quick_config(),
        checkpoint_hash: Some("ab".into()),
        loss_curve: vec![1.0, 0.5],
        epoch_seconds: vec![0.1, 0.2],
        best_epoch: 1,
        steps: 4,
        final_report: None,
    };
    m.validate().unwrap();
    let back: RunManifest = serde_json::from_str(&m.to_json().unwrap()).unwrap();
    assert_eq!(back, m);
    let bad = RunManifest {
        loss_curve: vec![f64::NAN, 0.5],
        ..m
    };
    assert!(bad.validate().is_err());
}
