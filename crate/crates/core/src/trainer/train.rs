//! The optimization loop.
//!
//! Every random draw (epoch shuffle, per-sample augmentation, dropout) is
//! seeded from `(seed, epoch, batch)` so a resumed run replays exactly what
//! an uninterrupted one would have done.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::{augment, RgbtSample};
use crate::error::{GlassError, Result};
use crate::metrics::EvalOptions;
use crate::nnet::{Checkpoint, ForwardCtx, ModelConfig, SegmentationModel};
use crate::trainer::config::{lr_schedule, TrainConfig};
use crate::trainer::eval::{evaluate_model, images_to_tensor, masks_to_tensor, model_input};
use crate::trainer::loss::bce_with_logits;
use crate::trainer::optim::AdamW;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_score: Option<f64>,
}

/// Progress stored alongside a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub seed: u64,
    /// Epoch and batch index the next step will run.
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub global_step: usize,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_val_score: Option<f64>,
    pub train_config: TrainConfig,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Checkpoints and `train_log.jsonl` go here when set.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Directory holding ImageNet backbone weights.
    pub pretrained_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: SegmentationModel,
    pub state: TrainingState,
    pub checkpoints: Vec<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

const TAG_SHUFFLE: u64 = 1;
const TAG_AUGMENT: u64 = 2;
const TAG_DROPOUT: u64 = 3;
const TAG_SPLIT: u64 = 4;

/// Mixes `parts` into `seed` (splitmix64 finalizer per part).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Splits sample indices into training and validation sets. Whole scenes
/// are held out when there are at least two; otherwise individual samples.
pub fn split_validation(dataset: &[RgbtSample], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n = dataset.len();
    if fraction <= 0.0 || n < 2 {
        return ((0..n).collect(), vec![]);
    }
    let mut scenes: Vec<&str> = dataset.iter().map(|s| s.meta.scene.as_str()).collect();
    scenes.sort_unstable();
    scenes.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_SPLIT]));
    let held: Vec<usize> = if scenes.len() >= 2 {
        scenes.shuffle(&mut rng);
        let k = ((scenes.len() as f64 * fraction).ceil() as usize).clamp(1, scenes.len() - 1);
        let chosen = &scenes[..k];
        (0..n).filter(|&i| chosen.contains(&dataset[i].meta.scene.as_str())).collect()
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n - 1);
        let mut held = idx[..k].to_vec();
        held.sort_unstable();
        held
    };
    let train = (0..n).filter(|i| !held.contains(i)).collect();
    (train, held)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_SHUFFLE, epoch as u64])));
    idx
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    model: SegmentationModel,
    optimizer: AdamW,
    state: TrainingState,
    out_dir: Option<PathBuf>,
    checkpoints: Vec<PathBuf>,
    best_checkpoint: Option<PathBuf>,
}

impl Run<'_> {
    fn save(&mut self, name: &str) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.out_dir else { return Ok(None) };
        let path = dir.join(name);
        let mut ck = Checkpoint::from_model(&self.model)?;
        ck.optimizer = self.optimizer.state_tensors()?;
        ck.training = Some(serde_json::to_string(&self.state)?);
        ck.save(&path)?;
        if !self.checkpoints.contains(&path) {
            self.checkpoints.push(path.clone());
        }
        Ok(Some(path))
    }

    fn log(&self, record: &StepRecord) -> Result<()> {
        log::info!(
            "epoch {} step {} loss {:.6} lr {:e}",
            record.epoch,
            record.step,
            record.loss,
            record.lr
        );
        if let Some(dir) = &self.out_dir {
            let mut f = OpenOptions::new().create(true).append(true).open(dir.join("train_log.jsonl"))?;
            writeln!(f, "{}", serde_json::to_string(record)?)?;
        }
        Ok(())
    }

    fn step(&mut self, batch: &[&RgbtSample], epoch: usize, batch_index: usize) -> Result<f64> {
        let cfg = self.cfg;
        let augmented: Vec<RgbtSample> = if cfg.use_augmentation {
            batch
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    let seed = derive_seed(cfg.seed, &[TAG_AUGMENT, epoch as u64, batch_index as u64, j as u64]);
                    augment(s, &cfg.augment.with_seed(seed))
                })
                .collect::<Result<_>>()?
        } else {
            batch.iter().map(|s| (*s).clone()).collect()
        };
        let store = self.model.store().clone();
        let (dtype, device) = (store.dtype(), store.device().clone());
        let kind = self.model.config().input_kind;
        let rgb = kind
            .needs_rgb()
            .then(|| images_to_tensor(&augmented.iter().map(|s| s.rgb()).collect::<Vec<_>>(), dtype, &device))
            .transpose()?;
        let thermal = kind
            .needs_thermal()
            .then(|| images_to_tensor(&augmented.iter().map(|s| s.thermal()).collect::<Vec<_>>(), dtype, &device))
            .transpose()?;
        let masks = augmented
            .iter()
            .map(|s| s.mask().ok_or_else(|| GlassError::invalid(format!("training sample {} has no mask", s.meta.source))))
            .collect::<Result<Vec<_>>>()?;
        let target = masks_to_tensor(&masks, dtype, &device)?;
        let input = model_input(kind, rgb, thermal)?;

        let step = self.state.global_step;
        let ctx = ForwardCtx::train(derive_seed(cfg.seed, &[TAG_DROPOUT, step as u64]));
        let out = self.model.forward(&input, &ctx)?;
        let loss = bce_with_logits(&out.logits, &target)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let batch_ids = || batch.iter().map(|s| s.meta.source.clone()).collect();
        let history = || self.state.steps.iter().rev().take(20).rev().map(|r| r.loss).collect();
        if !value.is_finite() {
            return Err(GlassError::NonFiniteLoss {
                loss: value,
                epoch,
                step,
                batch_ids: batch_ids(),
                history: history(),
            });
        }
        let grads = loss.backward()?;
        let params = store.trainable();
        let grad_norm = AdamW::grad_norm(&params, &grads)?;
        if !grad_norm.is_finite() {
            return Err(GlassError::NonFiniteGradient {
                grad_norm,
                loss: value,
                epoch,
                step,
                batch_ids: batch_ids(),
                history: history(),
            });
        }
        let lr = lr_schedule(epoch, cfg);
        let stats = self.optimizer.step_with_norm(&params, &grads, lr, grad_norm)?;
        let record = StepRecord {
            step,
            epoch,
            loss: value,
            lr,
            grad_norm: stats.grad_norm,
        };
        self.log(&record)?;
        self.state.steps.push(record);
        self.state.global_step += 1;
        Ok(value)
    }
}

/// Trains `model_cfg` on `dataset` and returns the final model. Checkpoints
/// are written every `checkpoint_every` epochs, at the best validation score
/// (`best.safetensors`) and at the end (`last.safetensors`).
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig, dataset: &[RgbtSample], opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if dataset.is_empty() {
        return Err(GlassError::invalid("training set is empty"));
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let (model, optimizer, state) = match &opts.resume {
        Some(path) => resume(path, model_cfg, cfg)?,
        None => {
            let model = SegmentationModel::new(model_cfg, cfg.seed, DType::F32, &Device::Cpu)?;
            if model_cfg.pretrained {
                let dir = opts.pretrained_dir.as_deref().ok_or_else(|| {
                    GlassError::Config("model.pretrained is set but no pretrained weight directory was given".into())
                })?;
                model.load_pretrained(dir)?;
            }
            let state = TrainingState {
                seed: cfg.seed,
                epoch: 0,
                batch_in_epoch: 0,
                global_step: 0,
                steps: vec![],
                epochs: vec![],
                best_val_score: None,
                train_config: cfg.clone(),
            };
            (model, new_optimizer(cfg), state)
        }
    };

    let (train_idx, val_idx) = split_validation(dataset, cfg.val_fraction, cfg.seed);
    let val_set: Vec<RgbtSample> = val_idx.iter().map(|&i| dataset[i].clone()).collect();
    let mut run = Run {
        cfg,
        model,
        optimizer,
        state,
        out_dir: opts.out_dir.clone(),
        checkpoints: vec![],
        best_checkpoint: opts.out_dir.as_ref().map(|d| d.join("best.safetensors")).filter(|p| p.exists()),
    };

    'epochs: while run.state.epoch < cfg.total_epochs {
        let epoch = run.state.epoch;
        let order = epoch_order(train_idx.len(), cfg.seed, epoch);
        let batches: Vec<Vec<&RgbtSample>> = order
            .chunks(cfg.batch_size)
            .map(|c| c.iter().map(|&k| &dataset[train_idx[k]]).collect())
            .collect();
        while run.state.batch_in_epoch < batches.len() {
            if cfg.max_steps.is_some_and(|m| run.state.global_step >= m) {
                break 'epochs;
            }
            let b = run.state.batch_in_epoch;
            run.step(&batches[b], epoch, b)?;
            run.state.batch_in_epoch += 1;
        }

        let losses: Vec<f64> = run.state.steps.iter().filter(|r| r.epoch == epoch).map(|r| r.loss).collect();
        let mean_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        let val_score = if val_set.is_empty() {
            None
        } else {
            let report = evaluate_model(&run.model, &val_set, &EvalOptions::default())?;
            report.with_glass.map(|w| w.iou).or(report.without_glass.map(|n| n.iou_star))
        };
        log::info!("epoch {epoch} mean loss {mean_loss:.6} validation {val_score:?}");
        run.state.epochs.push(EpochRecord {
            epoch,
            mean_loss,
            val_score,
        });
        run.state.epoch += 1;
        run.state.batch_in_epoch = 0;

        if let Some(score) = val_score {
            if run.state.best_val_score.is_none_or(|b| score > b) {
                run.state.best_val_score = Some(score);
                run.best_checkpoint = run.save("best.safetensors")?;
            }
        }
        if cfg.checkpoint_every > 0 && run.state.epoch % cfg.checkpoint_every == 0 {
            run.save(&format!("epoch_{:04}.safetensors", run.state.epoch))?;
        }
    }
    run.save("last.safetensors")?;
    Ok(TrainOutcome {
        model: run.model,
        state: run.state,
        checkpoints: run.checkpoints,
        best_checkpoint: run.best_checkpoint,
    })
}

fn new_optimizer(cfg: &TrainConfig) -> AdamW {
    AdamW::new(cfg.weight_decay, (cfg.grad_clip > 0.0).then_some(cfg.grad_clip))
}

fn resume(path: &Path, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<(SegmentationModel, AdamW, TrainingState)> {
    let ck = Checkpoint::load(path)?;
    if ck.config != *model_cfg {
        return Err(GlassError::Config(format!(
            "checkpoint {} was trained with a different model configuration",
            path.display()
        )));
    }
    let state: TrainingState = serde_json::from_str(
        ck.training
            .as_deref()
            .ok_or_else(|| GlassError::Checkpoint(format!("{} holds no training state", path.display())))?,
    )?;
    if state.seed != cfg.seed {
        return Err(GlassError::Config(format!(
            "checkpoint seed {} differs from train.seed {}",
            state.seed, cfg.seed
        )));
    }
    let model = ck.to_model(DType::F32, &Device::Cpu)?;
    let mut optimizer = new_optimizer(cfg);
    optimizer.load_state_tensors(&ck.optimizer)?;
    Ok((model, optimizer, TrainingState {
        train_config: cfg.clone(),
        ..state
    }))
}
