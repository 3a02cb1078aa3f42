//! Fusion-strategy and layer-count sweeps on a fixture set.

use serde::Serialize;

use super::eval::{confusion_over, Segmenter};
use super::metrics::{fwiou, macc, miou};
use super::report::{aggregate_means, render2};
use crate::cma::FusionStrategy;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::model::{ModelConfig, RsktModel};
use crate::sample::ImageSample;
use crate::training::{train, TrainConfig};
use crate::transfer::DecoderConfig;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub strategy: FusionStrategy,
    pub num_layers: usize,
    pub final_loss: f64,
    pub m_miou: f64,
    pub m_fwiou: f64,
    pub m_macc: f64,
}

/// Shared inputs of every ablation run.
pub struct AblationSetup<'a> {
    pub model: ModelConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub classes: Vec<String>,
    pub train_set: &'a [ImageSample],
    /// Named evaluation sets, each with its own class list.
    pub eval_sets: Vec<(String, Vec<String>, Vec<ImageSample>)>,
}

impl AblationSetup<'_> {
    /// Trains one variant and averages its metrics across evaluation sets.
    pub fn run(&self, strategy: FusionStrategy, num_layers: usize) -> Result<AblationRow> {
        let mut model = RsktModel::new(
            ModelConfig { strategy, ..self.model.clone() },
            FusionConfig { num_layers, ..self.fusion.clone() },
            self.decoder.clone(),
        )?;
        let vocab = model.vocabulary(self.classes.iter().cloned())?;
        let outcome = train(&mut model, self.train_set, &vocab, &self.train)?;
        let final_loss = *outcome
            .losses
            .last()
            .ok_or_else(|| Error::Config("ablation needs train.max_iters >= 1".into()))?;
        let (mut mi, mut fw, mut ma) = (Vec::new(), Vec::new(), Vec::new());
        for (name, classes, samples) in &self.eval_sets {
            let v = Segmenter::vocabulary(&model, classes)?;
            let cm = confusion_over(&model, samples, &v)?;
            let undefined = || Error::Empty(format!("evaluation set {name} has no labelled pixels"));
            mi.push(miou(&cm).0.ok_or_else(undefined)?);
            fw.push(fwiou(&cm).ok_or_else(undefined)?);
            ma.push(macc(&cm).ok_or_else(undefined)?);
        }
        Ok(AblationRow {
            strategy,
            num_layers,
            final_loss,
            m_miou: aggregate_means(&mi)?,
            m_fwiou: aggregate_means(&fw)?,
            m_macc: aggregate_means(&ma)?,
        })
    }

    /// Every strategy at the configured layer count, then every layer count
    /// in `layers` at the configured strategy.
    pub fn sweep(&self, layers: &[usize]) -> Result<Vec<AblationRow>> {
        let mut rows = Vec::new();
        for s in FusionStrategy::ALL {
            rows.push(self.run(s, self.fusion.num_layers)?);
        }
        for &n in layers {
            rows.push(self.run(self.model.strategy, n)?);
        }
        Ok(rows)
    }
}

/// Columns: m-mIoU, m-fwIoU, m-mACC (scaled by 100) and the final training loss.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("| strategy | N | m-mIoU | m-fwIoU | m-mACC | final loss |\n|---|---|---|---|---|---|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {:.4} |\n",
            r.strategy.name(),
            r.num_layers,
            render2(100.0 * r.m_miou),
            render2(100.0 * r.m_fwiou),
            render2(100.0 * r.m_macc),
            r.final_loss
        ));
    }
    out
}
