use treatsurv::conditioning::TreatmentCode;
use treatsurv::data::{generate_synthetic, SyntheticConfig, VolumeSample};
use treatsurv::model::{Fusion, SurvivalNet, SurvivalNetConfig};
use treatsurv::tensor::Tensor;
use treatsurv::training::{
    cross_validate, evaluate, load_checkpoint, load_checkpoint_with, prepare, save_checkpoint,
    TrainConfig, Trainer,
};
use treatsurv::Error;

fn small_model(fusion: Fusion) -> SurvivalNetConfig {
    SurvivalNetConfig {
        conv_channels: vec![2, 2, 2, 2],
        fc_widths: vec![8, 4, 1],
        fusion,
        seed: 3,
        ..SurvivalNetConfig::default()
    }
}

fn cohort(n: usize) -> Vec<VolumeSample> {
    let raw = generate_synthetic(&SyntheticConfig {
        n_subjects: n,
        seed: 5,
        ..SyntheticConfig::default()
    })
    .unwrap();
    prepare(&raw).unwrap()
}

fn train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        learning_rate: 1e-2,
        seed: 9,
        k: 3,
        ..TrainConfig::default()
    }
}

/// A network whose output is exactly `days` for every input.
fn constant_net(days: f64) -> SurvivalNet {
    let mut net = SurvivalNet::build(&small_model(Fusion::None)).unwrap();
    let cfg = net.config().clone();
    let head = net.fc_mut(2).unwrap();
    head.weight.data_mut().fill(0.0);
    head.bias.data_mut()[0] = (days - cfg.output_offset) / cfg.output_scale;
    net
}

fn with_days(days: &[f64]) -> Vec<VolumeSample> {
    let base = cohort(days.len().max(3));
    base.into_iter()
        .zip(days)
        .map(|(s, &d)| VolumeSample {
            survival_days: d,
            ..s
        })
        .collect()
}

#[test]
fn evaluate_examples() {
    let net = constant_net(100.0);
    assert_eq!(evaluate(&net, &with_days(&[100.0, 100.0])).unwrap(), 0.0);
    assert_eq!(evaluate(&net, &with_days(&[50.0, 150.0])).unwrap(), 50.0);
    assert!(matches!(evaluate(&net, &[]), Err(Error::Validation(_))));
}

#[test]
fn evaluate_ignores_sample_order() {
    let samples = cohort(12);
    let net = SurvivalNet::build(&small_model(Fusion::Adain)).unwrap();
    let mut reversed = samples.clone();
    reversed.reverse();
    let a = evaluate(&net, &samples).unwrap();
    let b = evaluate(&net, &reversed).unwrap();
    assert!((a - b).abs() <= 1e-12 * a.abs());
}

#[test]
fn zero_learning_rate_freezes_the_model() {
    let samples = cohort(8);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..train(3)
    };
    let mut trainer = Trainer::new(&small_model(Fusion::Adain), &cfg).unwrap();
    let before = trainer.net.clone();
    trainer.run(&samples, 3).unwrap();
    assert_eq!(trainer.net, before);
    let h = &trainer.loss_history;
    assert_eq!(h.len(), 3);
    assert!(h.iter().all(|&l| l == h[0]));
}

#[test]
fn same_seed_same_report() {
    let samples = cohort(12);
    let run = || cross_validate(&samples, &small_model(Fusion::Concat), &train(2), |_, _| Ok(())).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a.fold_mae.len(), 3);
    let mean = a.fold_mae.iter().sum::<f64>() / 3.0;
    assert_eq!(a.mean_mae, mean);
    assert!(a.summary().starts_with("MAE (in days): "));
}

#[test]
fn small_set_is_memorized() {
    let samples = cohort(8);
    let cfg = TrainConfig {
        batch_size: 8,
        learning_rate: 1e-3,
        ..train(500)
    };
    let mut trainer = Trainer::new(&small_model(Fusion::Adain), &cfg).unwrap();
    trainer.run(&samples, 500).unwrap();
    let h = &trainer.loss_history;
    assert!(h[499] < 0.05 * h[0], "epoch 1 {} epoch 500 {}", h[0], h[499]);
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    let samples = cohort(8);
    let model = small_model(Fusion::Adain);
    let cfg = train(20);

    let mut straight = Trainer::new(&model, &cfg).unwrap();
    straight.run(&samples, 20).unwrap();

    let mut first = Trainer::new(&model, &cfg).unwrap();
    first.run(&samples, 10).unwrap();
    save_checkpoint(&first, &path).unwrap();
    let mut resumed = load_checkpoint(&path).unwrap();
    assert_eq!(resumed, first);
    assert_eq!(
        evaluate(&resumed.net, &samples).unwrap(),
        evaluate(&first.net, &samples).unwrap()
    );
    resumed.run(&samples, 10).unwrap();
    assert_eq!(resumed, straight);
}

#[test]
fn checkpoint_rejects_other_fusion_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    let trainer = Trainer::new(&small_model(Fusion::Adain), &train(1)).unwrap();
    save_checkpoint(&trainer, &path).unwrap();

    let err = load_checkpoint_with(&path, &small_model(Fusion::None)).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
    assert!(err.to_string().contains("mapping"), "{err}");

    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));

    std::fs::write(&path, b"nope").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { offset: 0, .. })));
    assert!(matches!(
        load_checkpoint(&dir.path().join("missing")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn non_finite_loss_aborts_with_location() {
    let samples = cohort(8);
    let mut trainer = Trainer::new(&small_model(Fusion::None), &train(1)).unwrap();
    trainer.net.fc_mut(2).unwrap().bias.data_mut()[0] = f64::NAN;
    let err = trainer.run(&samples, 1).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)));
    assert!(err.to_string().contains("epoch 1 batch 0"), "{err}");
}

#[test]
fn treatments_are_used_by_conditioned_models() {
    let samples = cohort(4);
    let net = SurvivalNet::build(&small_model(Fusion::Concat)).unwrap();
    let x = Tensor::stack(&[&samples[0].volume]).unwrap();
    let a = net.predict(&x, &[TreatmentCode::GTR]).unwrap();
    let b = net.predict(&x, &[TreatmentCode::NA]).unwrap();
    assert_ne!(a, b);
}
