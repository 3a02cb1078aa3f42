//! Dataset evaluation under the open-vocabulary protocol: the class names
//! come from the evaluated dataset, never from training.

use super::manifest::DatasetManifest;
use super::metrics::{ConfusionMatrix, MetricsReport};
use crate::error::{Error, Result};
use crate::model::{prepare, RsktModel};
use crate::sample::{ImageSample, LabelMap};
use crate::vocab::ClassVocabulary;

/// Anything that turns an image into a label map over `vocab`.
pub trait Segmenter {
    fn segment(&self, sample: &ImageSample, vocab: &ClassVocabulary) -> Result<LabelMap>;

    /// Vocabulary for a dataset's class names.
    fn vocabulary(&self, classes: &[String]) -> Result<ClassVocabulary> {
        ClassVocabulary::with_default_templates(classes.iter().cloned())
    }
}

impl Segmenter for RsktModel {
    fn segment(&self, sample: &ImageSample, vocab: &ClassVocabulary) -> Result<LabelMap> {
        self.predict(sample, vocab)
    }

    fn vocabulary(&self, classes: &[String]) -> Result<ClassVocabulary> {
        RsktModel::vocabulary(self, classes.iter().cloned())
    }
}

/// Predicts the ground truth, with ignored pixels mapped to class 0.
pub struct GroundTruthCopy;

impl Segmenter for GroundTruthCopy {
    fn segment(&self, sample: &ImageSample, _vocab: &ClassVocabulary) -> Result<LabelMap> {
        let l = sample
            .label
            .as_ref()
            .ok_or_else(|| Error::Config("ground-truth copy needs labelled samples".into()))?;
        let ignore = sample.ignore_value;
        Ok(LabelMap::from_fn(l.height(), l.width(), |y, x| {
            let v = l.at(y, x);
            if v == ignore {
                0
            } else {
                v
            }
        }))
    }
}

/// Predicts one class everywhere.
pub struct ConstantPredictor(pub usize);

impl Segmenter for ConstantPredictor {
    fn segment(&self, sample: &ImageSample, _vocab: &ClassVocabulary) -> Result<LabelMap> {
        Ok(LabelMap::from_fn(sample.height(), sample.width(), |_, _| self.0 as i64))
    }
}

/// Confusion matrix over labelled samples. Non-square samples are
/// center-cropped together with their masks.
pub fn confusion_over(
    segmenter: &dyn Segmenter,
    samples: &[ImageSample],
    vocab: &ClassVocabulary,
) -> Result<ConfusionMatrix> {
    if samples.is_empty() {
        return Err(Error::Empty("dataset has no samples".into()));
    }
    let mut cm = ConfusionMatrix::new(vocab.num_classes());
    for s in samples {
        let s = prepare(s);
        let gt = s
            .label
            .as_ref()
            .ok_or_else(|| Error::Config("evaluation sample has no label".into()))?;
        let pred = segmenter.segment(&s, vocab)?;
        cm.accumulate(&pred, gt, s.ignore_value)?;
    }
    Ok(cm)
}

pub fn evaluate_samples(
    segmenter: &dyn Segmenter,
    samples: &[ImageSample],
    vocab: &ClassVocabulary,
) -> Result<MetricsReport> {
    Ok(MetricsReport::from_confusion(&confusion_over(segmenter, samples, vocab)?))
}

/// Evaluates one dataset with a vocabulary built from its own class list.
pub fn evaluate(segmenter: &dyn Segmenter, manifest: &DatasetManifest) -> Result<MetricsReport> {
    if manifest.entries.is_empty() {
        return Err(Error::Empty(format!("dataset {} has no entries", manifest.name)));
    }
    let vocab = segmenter.vocabulary(&manifest.classes)?;
    evaluate_samples(segmenter, &manifest.samples()?, &vocab)
}
