use candle_core::{DType, Device};
use glasseg::datakit::{synth_dataset, RgbtSample};
use glasseg::metrics::EvalOptions;
use glasseg::nnet::{Checkpoint, ModelConfig, SegmentationModel};
use glasseg::trainer::{evaluate_checkpoint, evaluate_model, train, TrainConfig, TrainOptions};

fn all_zero_model() -> SegmentationModel {
    let model = SegmentationModel::new(&ModelConfig::tiny(), 0, DType::F32, &Device::Cpu).unwrap();
    let w = model.store().get("head.weight").unwrap();
    w.set(&w.as_tensor().zeros_like().unwrap()).unwrap();
    let b = model.store().get("head.bias").unwrap();
    b.set(&(b.as_tensor().ones_like().unwrap() * -30.0).unwrap()).unwrap();
    model
}

fn split(data: &[RgbtSample], glass: bool) -> Vec<RgbtSample> {
    data.iter().filter(|s| s.mask().unwrap().is_empty() != glass).cloned().collect()
}

#[test]
fn all_zero_predictions() {
    let data = synth_dataset(8, 8, (32, 32), 1);
    let model = all_zero_model();
    let without = evaluate_model(&model, &split(&data, false), &EvalOptions::default()).unwrap();
    let n = without.without_glass.unwrap();
    assert_eq!((n.iou_star, n.fpr), (100.0, 0.0));
    assert!(without.with_glass.is_none());
    let with = evaluate_model(&model, &split(&data, true), &EvalOptions::default()).unwrap();
    assert_eq!(with.with_glass.unwrap().iou, 0.0);
}

#[test]
fn untrained_checkpoint_report_is_finite() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    let model = SegmentationModel::new(&ModelConfig::tiny(), 3, DType::F32, &Device::Cpu).unwrap();
    Checkpoint::from_model(&model).unwrap().save(&path).unwrap();
    let data = synth_dataset(20, 6, (40, 56), 2);
    let r = evaluate_checkpoint(&path, &data, &EvalOptions::default()).unwrap();
    let w = r.with_glass.unwrap();
    let n = r.without_glass.unwrap();
    for v in [w.mae, w.iou, w.f_beta, w.ber, n.mae, n.iou_star, n.fpr, r.all.mae] {
        assert!(v.is_finite());
    }
}

#[test]
fn smoothed_loss_does_not_rise_early() {
    let data = synth_dataset(100, 8, (64, 64), 2);
    let cfg = TrainConfig {
        batch_size: 8,
        lr_initial: 1e-3,
        lr_after: 1e-3,
        lr_switch_epoch: 60,
        total_epochs: 61,
        max_steps: Some(50),
        use_augmentation: false,
        val_fraction: 0.0,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let out = train(&ModelConfig::tiny(), &cfg, &data, &TrainOptions::default()).unwrap();
    let losses: Vec<f64> = out.state.steps.iter().map(|s| s.loss).collect();
    assert_eq!(losses.len(), 50);
    let smooth: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for pair in smooth.windows(2) {
        assert!(pair[1] <= pair[0], "{smooth:?}");
    }
}

#[test]
fn divergence_aborts_with_diagnostics() {
    let data = synth_dataset(1, 2, (32, 32), 1);
    let cfg = TrainConfig {
        batch_size: 2,
        lr_initial: 1e30,
        lr_after: 1e30,
        lr_switch_epoch: 5,
        total_epochs: 6,
        grad_clip: 0.0,
        use_augmentation: false,
        val_fraction: 0.0,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    match train(&ModelConfig::tiny(), &cfg, &data, &TrainOptions::default()) {
        Err(glasseg::GlassError::NonFiniteLoss { batch_ids, history, .. })
        | Err(glasseg::GlassError::NonFiniteGradient { batch_ids, history, .. }) => {
            assert!(!batch_ids.is_empty());
            assert!(!history.is_empty());
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training with lr 1e30 stayed finite"),
    }
}
