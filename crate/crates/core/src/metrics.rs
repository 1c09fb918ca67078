//! Overlap metrics from thresholded probability maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    /// `TP / (TP + FP + FN)`; 1 when prediction and mask are both empty.
    pub fn iou(&self) -> f64 {
        let den = self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            self.tp as f64 / den as f64
        }
    }

    /// `2TP / (2TP + FP + FN)`; 1 when prediction and mask are both empty.
    pub fn f1(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }
}

/// A pixel is predicted foreground when its probability is `>= threshold`.
pub fn confusion(prob: &[f64], mask: &[f64], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for (&p, &y) in prob.iter().zip(mask) {
        match (p >= threshold, y > 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub iou: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_iou: f64,
    pub mean_f1: f64,
    pub per_image: Vec<ImageMetrics>,
    pub threshold: f64,
}

impl MetricsReport {
    pub fn from_images(per_image: Vec<ImageMetrics>, threshold: f64) -> Self {
        let n = per_image.len().max(1) as f64;
        Self {
            mean_iou: per_image.iter().map(|m| m.iou).sum::<f64>() / n,
            mean_f1: per_image.iter().map(|m| m.f1).sum::<f64>() / n,
            per_image,
            threshold,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-image IoU/F1 for `prob` and `mask` of shape `[N,1,H,W]`; `ids` names
/// the images (index strings are used when it is empty).
pub fn compute_metrics(prob: &Tensor, mask: &Tensor, threshold: f64, ids: &[String]) -> Result<MetricsReport> {
    if prob.dims() != mask.dims() {
        return Err(Error::shape(format!(
            "prediction {:?} and mask {:?} differ",
            prob.dims(),
            mask.dims()
        )));
    }
    let n = prob.dims()[0];
    if !ids.is_empty() && ids.len() != n {
        return Err(Error::shape(format!("{} ids for {n} images", ids.len())));
    }
    let plane = prob.len() / n;
    let per_image = prob
        .data()
        .chunks_exact(plane)
        .zip(mask.data().chunks_exact(plane))
        .enumerate()
        .map(|(i, (p, y))| {
            let c = confusion(p, y, threshold);
            ImageMetrics {
                id: ids.get(i).cloned().unwrap_or_else(|| i.to_string()),
                iou: c.iou(),
                f1: c.f1(),
            }
        })
        .collect();
    Ok(MetricsReport::from_images(per_image, threshold))
}
