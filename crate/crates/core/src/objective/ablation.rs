use serde::{Deserialize, Serialize};

use super::{StepReport, Strategy, TrainConfig, TrainData, Trainer};
use crate::corpus::ImageSample;
use crate::error::Result;
use crate::evalkit::{evaluate_model, EvalConfig, EvalReport};
use crate::spotter::SpotterConfig;

/// One row of the single-step ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: &'static str,
    pub partial_data: bool,
    pub roi_masking: bool,
}

pub const ABLATION_VARIANTS: [AblationVariant; 4] = [
    AblationVariant {
        name: "E2E-baseline",
        partial_data: false,
        roi_masking: false,
    },
    AblationVariant {
        name: "+ Mask",
        partial_data: false,
        roi_masking: true,
    },
    AblationVariant {
        name: "+ PD",
        partial_data: true,
        roi_masking: false,
    },
    AblationVariant {
        name: "E2E-full",
        partial_data: true,
        roi_masking: true,
    },
];

impl AblationVariant {
    pub fn by_name(name: &str) -> Option<Self> {
        ABLATION_VARIANTS.iter().copied().find(|v| v.name == name)
    }

    /// Model and training configurations of this variant.
    pub fn apply(
        &self,
        model: &SpotterConfig,
        train: &TrainConfig,
    ) -> (SpotterConfig, TrainConfig) {
        let mut m = model.clone();
        m.roimask.masking = self.roi_masking;
        let t = TrainConfig {
            strategy: Strategy::Single,
            use_partial: self.partial_data,
            ..train.clone()
        };
        (m, t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub ap_det: f64,
    pub ap_e2e: f64,
    pub report: EvalReport,
}

/// Trains one variant from `seed` and evaluates it on `heldout`, keeping detections down to
/// `ap_score_threshold` so the precision/recall sweep has a tail.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    variant: &AblationVariant,
    model: &SpotterConfig,
    train: &TrainConfig,
    data: &TrainData<'_>,
    heldout: &[ImageSample],
    seed: u64,
    eval: &EvalConfig,
    ap_score_threshold: f64,
    on_step: impl FnMut(&StepReport, &Trainer<f32>) -> Result<()>,
) -> Result<AblationRow> {
    let (m, t) = variant.apply(model, train);
    let mut trainer = Trainer::<f32>::new(&m, &t, seed)?;
    trainer.run(data, t.steps, on_step)?;
    trainer.model.set_score_threshold(ap_score_threshold);
    let report = evaluate_model(&trainer.model, &trainer.store, heldout, eval)?;
    Ok(AblationRow {
        variant: variant.name.to_string(),
        ap_det: report.detection.ap,
        ap_e2e: report.end_to_end.ap,
        report,
    })
}
