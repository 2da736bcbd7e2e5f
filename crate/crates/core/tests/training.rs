use normscape_core::data::PatchSet;
use normscape_core::landscape::PsnrOptions;
use normscape_core::model::{build_model, ModelConfig};
use normscape_core::objective::{total_loss, total_loss_and_grads, NormSetting, ObjectiveConfig};
use normscape_core::synthetic::synthetic_pairs;
use normscape_core::trainer::{
    checkpoint_name, load_resume, run_log_name, sgd_step, train, TrainConfig, TrainData, TrainError, TrainOptions,
};

fn small_data() -> TrainData<f64> {
    let train_pairs = synthetic_pairs(11, 3, 40, 40, 2).unwrap();
    let val_pairs = synthetic_pairs(12, 1, 40, 40, 2).unwrap();
    TrainData {
        train: PatchSet::from_pairs(&train_pairs, 13, 9).unwrap(),
        validation: PatchSet::from_pairs(&val_pairs, 13, 9).unwrap(),
        eval: synthetic_pairs(13, 2, 24, 24, 2).unwrap(),
        psnr: PsnrOptions::for_scale(2),
    }
}

fn small_config(setting: NormSetting) -> TrainConfig {
    TrainConfig {
        epochs: 4,
        lr_initial: 1e-4,
        batch_size: 8,
        setting,
        seed: 5,
        precision: normscape_core::Precision::F64,
        ..Default::default()
    }
}

#[test]
fn one_step_decreases_the_batch_loss() {
    let data = small_data();
    let (x, y) = data.train.gather(&(0..8).collect::<Vec<_>>());
    let obj = ObjectiveConfig::default();
    for seed in 0..20 {
        let params = build_model::<f64>(&ModelConfig::tiny(), seed).unwrap();
        for setting in [NormSetting::AllL2, NormSetting::Mix, NormSetting::AllL1] {
            let (before, grads) = total_loss_and_grads(&params, &x, &y, setting, &obj).unwrap();
            let mut stepped = params.clone();
            sgd_step(&mut stepped, &grads, 1e-5).unwrap();
            let after = total_loss(&stepped, &x, &y, setting, &obj).unwrap();
            assert!(after.total <= before.total, "seed {seed} {setting}: {} -> {}", before.total, after.total);
        }
    }
}

#[test]
fn training_is_deterministic_and_counts_steps() {
    let data = small_data();
    let cfg = small_config(NormSetting::Mix);
    let obj = ObjectiveConfig::default();
    let run = || {
        let params = build_model::<f64>(&ModelConfig::tiny(), 9).unwrap();
        train(&cfg, &obj, &data, params, None, &TrainOptions::default(), |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.state.records, b.state.records);
    assert_eq!(a.params, b.params);
    let spe = data.train.len() / cfg.batch_size;
    assert_eq!(a.steps_per_epoch, spe);
    assert_eq!(a.state.global_step, spe * cfg.epochs);
    for (i, r) in a.state.records.iter().enumerate() {
        assert_eq!(r.epoch, i + 1);
        assert_eq!(r.global_step, spe * (i + 1));
        assert!(r.validation_error.is_finite() && r.psnr_eval.is_finite());
        assert!((r.total_loss - (0.5 * r.l1_term + 0.5 * r.l2_term + r.l3_term)).abs() < 1e-9 * r.total_loss.max(1.0));
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = small_data();
    let cfg = small_config(NormSetting::AllL1);
    let obj = ObjectiveConfig::default();
    let init = build_model::<f64>(&ModelConfig::tiny(), 21).unwrap();

    let full_dir = tempfile::tempdir().unwrap();
    let full_opts = TrainOptions {
        checkpoint_dir: Some(full_dir.path().to_path_buf()),
        stop_after: None,
    };
    let full = train(&cfg, &obj, &data, init.clone(), None, &full_opts, |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first = TrainOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        stop_after: Some(2),
    };
    let partial = train(&cfg, &obj, &data, init, None, &first, |_| {}).unwrap();
    assert_eq!(partial.state.epoch, 2);
    let ckpt = dir.path().join(checkpoint_name(cfg.setting, 2));
    let (params, state) = load_resume::<f64>(&ckpt).unwrap();
    assert_eq!(state, partial.state);
    let second = TrainOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        stop_after: None,
    };
    let resumed = train(&cfg, &obj, &data, params, Some(state), &second, |_| {}).unwrap();

    assert_eq!(resumed.state.records, full.state.records);
    assert_eq!(resumed.params, full.params);
    let log = |d: &std::path::Path| std::fs::read_to_string(d.join(run_log_name(cfg.setting))).unwrap();
    assert_eq!(log(dir.path()), log(full_dir.path()));
    assert_eq!(log(dir.path()).lines().count(), cfg.epochs);
}

#[test]
fn divergence_aborts_with_batch_indices() {
    let data = small_data();
    let cfg = TrainConfig {
        lr_initial: 1e9,
        ..small_config(NormSetting::AllL2)
    };
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        stop_after: None,
    };
    let params = build_model::<f64>(&ModelConfig::tiny(), 1).unwrap();
    match train(&cfg, &ObjectiveConfig::default(), &data, params, None, &opts, |_| {}) {
        Err(TrainError::NonFinite { batch, .. }) => {
            assert_eq!(batch.len(), cfg.batch_size);
            assert!(dir.path().join("all-l2_abort.json").exists());
        }
        other => panic!("expected a non-finite abort, got {:?}", other.map(|o| o.state.epoch)),
    }
}

#[test]
fn zero_initialized_reconstruction_starts_at_the_bicubic_baseline() {
    use normscape_core::landscape::{evaluate_baseline, evaluate_model};
    let pairs = synthetic_pairs(30, 2, 32, 32, 2).unwrap();
    let opts = PsnrOptions::for_scale(2);
    let baseline = evaluate_baseline(&pairs, opts).unwrap().mean_psnr;
    let config = ModelConfig {
        zero_init_reconstruct: true,
        ..ModelConfig::tiny()
    };
    let params = build_model::<f64>(&config, 0).unwrap();
    let init = evaluate_model(&params, &pairs, opts).unwrap().mean_psnr;
    assert!((init - baseline).abs() < 1e-9, "{init} vs {baseline}");
}

#[test]
fn zero_learning_rate_leaves_params_and_loss_unchanged() {
    let data = small_data();
    let cfg = TrainConfig {
        lr_initial: 0.0,
        epochs: 3,
        ..small_config(NormSetting::Mix)
    };
    let params = build_model::<f64>(&ModelConfig::tiny(), 2).unwrap();
    let out = train(&cfg, &ObjectiveConfig::default(), &data, params.clone(), None, &TrainOptions::default(), |_| {}).unwrap();
    assert_eq!(out.params, params);
    let v: Vec<f64> = out.state.records.iter().map(|r| r.validation_error).collect();
    assert!(v.windows(2).all(|w| w[0] == w[1]));
}
