//! Reconstruction and segmentation metrics.
//!
//! Predicted soft masks are hard-assigned by per-pixel argmax before any
//! segmentation metric is computed; ties go to the lowest slot index.
//! Ground-truth masks are a partition whose first `background_count`
//! masks are background.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{SceneBatch, SlotBatch};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MetricName {
    #[serde(rename = "MSE")]
    Mse,
    #[serde(rename = "ARI")]
    Ari,
    #[serde(rename = "SC")]
    Sc,
    #[serde(rename = "mSC")]
    Msc,
}

impl MetricName {
    pub const ALL: [MetricName; 4] = [MetricName::Mse, MetricName::Ari, MetricName::Sc, MetricName::Msc];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::Mse => "MSE",
            MetricName::Ari => "ARI",
            MetricName::Sc => "SC",
            MetricName::Msc => "mSC",
        }
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "MSE" | "mse" => Ok(MetricName::Mse),
            "ARI" | "ari" => Ok(MetricName::Ari),
            "SC" | "sc" => Ok(MetricName::Sc),
            "mSC" | "msc" | "MSC" => Ok(MetricName::Msc),
            other => Err(Error::Config(format!("unknown metric '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneMetricRecord {
    pub scene_index: usize,
    pub metric: MetricName,
    /// NaN when `skipped`.
    pub value: f64,
    pub skipped: bool,
}

/// Mean squared error over all pixels and channels.
pub fn mse(image: ArrayView3<f32>, recon: ArrayView3<f32>) -> Result<f64> {
    if image.shape() != recon.shape() {
        return Err(Error::Shape(format!(
            "image {:?} vs reconstruction {:?}",
            image.shape(),
            recon.shape()
        )));
    }
    let d = image.len();
    if d == 0 {
        return Ok(0.0);
    }
    let sum: f64 = image
        .iter()
        .zip(recon.iter())
        .map(|(&a, &b)| {
            let diff = a as f64 - b as f64;
            diff * diff
        })
        .sum();
    Ok(sum / d as f64)
}

/// Per-pixel argmax over the slot axis of K×H×W soft masks.
pub fn hard_labels(pred_masks: ArrayView3<f32>) -> Array2<usize> {
    let (k, h, w) = pred_masks.dim();
    let mut labels = Array2::zeros((h, w));
    let mut best = Array2::from_elem((h, w), f32::NEG_INFINITY);
    for slot in 0..k {
        let layer = pred_masks.index_axis(Axis(0), slot);
        ndarray::Zip::from(&mut labels)
            .and(&mut best)
            .and(&layer)
            .for_each(|l, b, &v| {
                if v > *b {
                    *b = v;
                    *l = slot;
                }
            });
    }
    labels
}

fn choose2(x: u64) -> f64 {
    (x as f64) * (x.saturating_sub(1) as f64) / 2.0
}

/// Adjusted Rand Index between two labelings of the same points, computed
/// from the contingency table. A zero denominator (both labelings a single
/// cluster, or fewer than two points) yields 1.0.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same points");
    let n = a.len() as u64;
    let na = a.iter().max().map_or(0, |&m| m + 1);
    let nb = b.iter().max().map_or(0, |&m| m + 1);
    let mut table = vec![0u64; na * nb];
    for (&i, &j) in a.iter().zip(b) {
        table[i * nb + j] += 1;
    }
    let mut rows = vec![0u64; na];
    let mut cols = vec![0u64; nb];
    for i in 0..na {
        for j in 0..nb {
            let c = table[i * nb + j];
            rows[i] += c;
            cols[j] += c;
        }
    }
    let index: f64 = table.iter().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.iter().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.iter().map(|&c| choose2(c)).sum();
    let total = choose2(n);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    let denom = max_index - expected;
    if denom == 0.0 {
        return 1.0;
    }
    (index - expected) / denom
}

fn check_scene_shapes(gt: &ArrayView3<u8>, pred: &ArrayView3<f32>, num_objects: usize) -> Result<()> {
    let (_, gh, gw) = gt.dim();
    let (_, ph, pw) = pred.dim();
    if (gh, gw) != (ph, pw) {
        return Err(Error::Shape(format!("gt masks {:?} vs predicted masks {:?}", gt.dim(), pred.dim())));
    }
    if num_objects > gt.len_of(Axis(0)) {
        return Err(Error::Shape(format!(
            "num_objects {num_objects} exceeds {} gt masks",
            gt.len_of(Axis(0))
        )));
    }
    Ok(())
}

/// Foreground ARI of one scene. `None` when the scene has no foreground pixels.
pub fn ari_foreground(
    gt_masks: ArrayView3<u8>,
    num_objects: usize,
    background_count: usize,
    pred_masks: ArrayView3<f32>,
) -> Result<Option<f64>> {
    check_scene_shapes(&gt_masks, &pred_masks, num_objects)?;
    let gt = crate::data::mask_labels(gt_masks.slice(s![..num_objects, .., ..]));
    let pred = hard_labels(pred_masks);
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (g, p) in gt.iter().zip(pred.iter()) {
        if *g >= background_count {
            a.push(*g);
            b.push(*p);
        }
    }
    if a.is_empty() {
        return Ok(None);
    }
    Ok(Some(adjusted_rand_index(&a, &b)))
}

/// Covering of the masks in `b` by the masks in `a` (rows are masks,
/// columns pixels). Empty masks in `b` are ignored; `None` when `b` has no
/// non-empty mask.
pub fn covering(a: ArrayView2<bool>, b: ArrayView2<bool>, weighted: bool) -> Option<f64> {
    assert_eq!(a.ncols(), b.ncols(), "mask sets must share the pixel universe");
    let a_sizes: Vec<usize> = a.rows().into_iter().map(|r| r.iter().filter(|&&v| v).count()).collect();
    let mut num = 0.0;
    let mut den = 0.0;
    for rb in b.rows() {
        let size_b = rb.iter().filter(|&&v| v).count();
        if size_b == 0 {
            continue;
        }
        let best = a
            .rows()
            .into_iter()
            .zip(&a_sizes)
            .map(|(ra, &size_a)| {
                let inter = ra.iter().zip(rb.iter()).filter(|(&x, &y)| x && y).count();
                let union = size_a + size_b - inter;
                inter as f64 / union as f64
            })
            .fold(0.0, f64::max);
        let weight = if weighted { size_b as f64 } else { 1.0 };
        num += weight * best;
        den += weight;
    }
    (den > 0.0).then(|| num / den)
}

/// SC (`weighted = true`) or mSC of the ground-truth foreground masks by the
/// argmax-binarized predicted masks. `None` when no foreground mask is non-empty.
pub fn segmentation_covering(
    pred_masks: ArrayView3<f32>,
    gt_masks: ArrayView3<u8>,
    num_objects: usize,
    background_count: usize,
    weighted: bool,
) -> Result<Option<f64>> {
    check_scene_shapes(&gt_masks, &pred_masks, num_objects)?;
    let (k, h, w) = pred_masks.dim();
    let labels = hard_labels(pred_masks);
    let mut a = Array2::from_elem((k, h * w), false);
    for (px, &l) in labels.iter().enumerate() {
        a[[l, px]] = true;
    }
    let fg = num_objects.saturating_sub(background_count);
    let mut b = Array2::from_elem((fg, h * w), false);
    for o in 0..fg {
        let layer = gt_masks.index_axis(Axis(0), background_count + o);
        for (px, &v) in layer.iter().enumerate() {
            b[[o, px]] = v != 0;
        }
    }
    Ok(covering(a.view(), b.view(), weighted))
}

fn scene_metric(
    scenes: &SceneBatch,
    slots: &SlotBatch,
    i: usize,
    metric: MetricName,
) -> Result<Option<f64>> {
    let gt = scenes.gt_masks.index_axis(Axis(0), i);
    let pred = slots.masks_of(i);
    let m = scenes.num_objects[i];
    let bg = scenes.background_count;
    match metric {
        MetricName::Mse => {
            let recon = slots
                .recon
                .as_ref()
                .ok_or_else(|| Error::Config("MSE requested but the slot batch has no reconstructions".into()))?;
            mse(scenes.images.index_axis(Axis(0), i), recon.index_axis(Axis(0), i)).map(Some)
        }
        MetricName::Ari => ari_foreground(gt, m, bg, pred),
        MetricName::Sc => segmentation_covering(pred, gt, m, bg, true),
        MetricName::Msc => segmentation_covering(pred, gt, m, bg, false),
    }
}

/// One record per scene and requested metric, ordered by scene index and
/// then by metric. Scenes are evaluated in parallel.
pub fn batch_metrics(
    scenes: &SceneBatch,
    slots: &SlotBatch,
    selection: &BTreeSet<MetricName>,
) -> Result<Vec<SceneMetricRecord>> {
    if scenes.len() != slots.len() {
        return Err(Error::Shape(format!(
            "{} scenes but {} slot entries",
            scenes.len(),
            slots.len()
        )));
    }
    let per_scene: Vec<Vec<SceneMetricRecord>> = (0..scenes.len())
        .into_par_iter()
        .map(|i| {
            selection
                .iter()
                .map(|&metric| {
                    let value = scene_metric(scenes, slots, i, metric)?;
                    Ok(SceneMetricRecord {
                        scene_index: i,
                        metric,
                        value: value.unwrap_or(f64::NAN),
                        skipped: value.is_none(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

/// Mean of the non-skipped records of `metric`, with the number of scenes used.
pub fn mean_of(records: &[SceneMetricRecord], metric: MetricName) -> Option<(f64, usize)> {
    let vals: Vec<f64> = records
        .iter()
        .filter(|r| r.metric == metric && !r.skipped)
        .map(|r| r.value)
        .collect();
    (!vals.is_empty()).then(|| (vals.iter().sum::<f64>() / vals.len() as f64, vals.len()))
}
