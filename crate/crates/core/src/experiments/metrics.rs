use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::model::IGNORE_LABEL;

/// Dataset-level `K x K` confusion counts, rows = ground truth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    /// Adds one image; pixels labelled 255 are skipped.
    pub fn add(&mut self, preds: &[u8], labels: &[u8]) -> Result<()> {
        if preds.len() != labels.len() {
            return Err(shape_err!("{} predictions for {} labels", preds.len(), labels.len()));
        }
        let k = self.classes;
        for (&p, &l) in preds.iter().zip(labels) {
            if l == IGNORE_LABEL {
                continue;
            }
            if l as usize >= k || p as usize >= k {
                return Err(crate::Error::Data(format!("class id out of range: truth {l}, prediction {p}, K = {k}")));
            }
            self.counts[l as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    /// Per-class IoU (`None` where the union is empty) and their mean.
    pub fn iou(&self) -> (Vec<Option<f64>>, f64) {
        let k = self.classes;
        let per: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..k).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|t| self.get(t, c)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per.iter().flatten().copied().collect();
        let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        (per, mean)
    }
}

/// IoU of one prediction map: per class and the mean over classes with a
/// non-empty union.
pub fn miou(preds: &[u8], labels: &[u8], classes: usize) -> Result<(Vec<Option<f64>>, f64)> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(preds, labels)?;
    Ok(cm.iou())
}
