//! Trains and evaluates a list of model variants under one training setup.

use serde::{Deserialize, Serialize};

use crate::datakit::RgbtSample;
use crate::error::{GlassError, Result};
use crate::metrics::{render_table, EvalOptions, MetricsReport};
use crate::nnet::{BackboneKind, DecoderKind, FusionKind, InputKind, ModelConfig};
use crate::trainer::config::TrainConfig;
use crate::trainer::eval::evaluate_model;
use crate::trainer::train::{train, TrainOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub config: ModelConfig,
    pub report: MetricsReport,
}

/// Every requested combination of the four ablation axes applied to `base`.
pub fn variant_grid(
    base: &ModelConfig,
    inputs: &[InputKind],
    fusions: &[FusionKind],
    decoders: &[DecoderKind],
    backbones: &[BackboneKind],
) -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for &input_kind in inputs {
        for &fusion_kind in fusions {
            for &decoder_kind in decoders {
                for &backbone_kind in backbones {
                    out.push(ModelConfig {
                        input_kind,
                        fusion_kind,
                        decoder_kind,
                        backbone_kind,
                        ..base.clone()
                    });
                }
            }
        }
    }
    out
}

/// One row per variant, each trained from the same seed on `train_set` and
/// scored on `test_set`.
pub fn run_ablation_matrix(
    variants: &[ModelConfig],
    cfg: &TrainConfig,
    train_set: &[RgbtSample],
    test_set: &[RgbtSample],
    opts: &TrainOptions,
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(GlassError::invalid("no ablation variants requested"));
    }
    variants
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let variant_opts = TrainOptions {
                out_dir: opts.out_dir.as_ref().map(|d| d.join(format!("variant_{i:02}"))),
                ..opts.clone()
            };
            let outcome = train(v, cfg, train_set, &variant_opts)?;
            Ok(AblationRow {
                variant: v.variant_name(),
                config: v.clone(),
                report: evaluate_model(&outcome.model, test_set, &EvalOptions::default())?,
            })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    render_table(&rows.iter().map(|r| (r.variant.clone(), r.report.clone())).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_covers_every_combination() {
        let grid = variant_grid(
            &ModelConfig::tiny(),
            InputKind::ALL,
            FusionKind::ALL,
            DecoderKind::ALL,
            &[BackboneKind::TinyTest],
        );
        assert_eq!(grid.len(), 5 * 7 * 3);
        let names: std::collections::BTreeSet<_> = grid.iter().map(|c| c.variant_name()).collect();
        assert_eq!(names.len(), grid.len());
    }
}
