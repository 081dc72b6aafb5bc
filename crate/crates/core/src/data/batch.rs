//! In-memory scene and slot batches.

use std::collections::BTreeSet;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use super::schema::{PropertyKind, PropertySchema};
use super::splits::Splits;
use crate::error::{Error, Result};

/// Tolerance on the per-pixel sum of predicted soft masks.
pub const MASK_SUM_TOL: f32 = 1e-4;

/// Per-dataset record of an applied distribution shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftMetadata {
    pub name: String,
    /// Index of the object that went out of distribution, per scene.
    pub ood_objects: Vec<Option<usize>>,
    pub excluded_properties: Vec<String>,
    /// Scenes the shift declined to touch (object-shape gate).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped_scenes: Vec<usize>,
    /// Candidate log of the occlusion shift, one entry per scene.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occlusion: Option<Vec<crate::shifts::OcclusionLog>>,
}

/// One scene with exactly `num_objects` mask/property rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// H×W×C, values in [0, 1].
    pub image: Array3<f32>,
    /// M×H×W visible-region masks, a partition of the pixels.
    pub masks: Array3<u8>,
    /// One M×width array per schema entry.
    pub properties: Vec<Array2<f32>>,
    pub ood: Vec<bool>,
}

impl Scene {
    pub fn num_objects(&self) -> usize {
        self.masks.len_of(Axis(0))
    }

    pub fn height(&self) -> usize {
        self.image.len_of(Axis(0))
    }

    pub fn width(&self) -> usize {
        self.image.len_of(Axis(1))
    }

    /// Per-pixel index of the owning object.
    pub fn labels(&self) -> Array2<usize> {
        mask_labels(self.masks.view())
    }

    pub fn mask_area(&self, object: usize) -> usize {
        self.masks.index_axis(Axis(0), object).iter().filter(|&&v| v != 0).count()
    }

    /// Rebuilds the one-hot masks from a label map, keeping M rows.
    pub fn set_labels(&mut self, labels: &Array2<usize>) {
        self.masks.fill(0);
        for ((r, c), &l) in labels.indexed_iter() {
            self.masks[[l, r, c]] = 1;
        }
    }
}

/// Argmax label of hard masks; pixels with no owner get label 0.
pub fn mask_labels(masks: ArrayView3<u8>) -> Array2<usize> {
    let (m, h, w) = masks.dim();
    let mut labels = Array2::zeros((h, w));
    for o in 0..m {
        let layer = masks.index_axis(Axis(0), o);
        for ((r, c), &v) in layer.indexed_iter() {
            if v != 0 {
                labels[[r, c]] = o;
            }
        }
    }
    labels
}

/// Ground-truth scenes with annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBatch {
    pub name: String,
    pub schema: PropertySchema,
    /// N×H×W×C.
    pub images: Array4<f32>,
    /// N×M_max×H×W.
    pub gt_masks: Array4<u8>,
    pub num_objects: Vec<usize>,
    /// Per schema entry, N×M_max×width.
    pub properties: Vec<Array3<f32>>,
    /// Number of leading mask indices that are background.
    pub background_count: usize,
    /// N×M_max, true where the object underwent a shift.
    pub ood_flags: Array2<bool>,
    pub excluded_properties: BTreeSet<String>,
    pub splits: Option<Splits>,
    pub shift: Option<ShiftMetadata>,
}

impl SceneBatch {
    pub fn len(&self) -> usize {
        self.images.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        let (_, h, w, c) = self.images.dim();
        (h, w, c)
    }

    pub fn max_objects(&self) -> usize {
        self.gt_masks.len_of(Axis(1))
    }

    pub fn scene(&self, i: usize) -> Scene {
        let m = self.num_objects[i];
        Scene {
            image: self.images.index_axis(Axis(0), i).to_owned(),
            masks: self.gt_masks.slice(s![i, ..m, .., ..]).to_owned(),
            properties: self
                .properties
                .iter()
                .map(|p| p.slice(s![i, ..m, ..]).to_owned())
                .collect(),
            ood: self.ood_flags.slice(s![i, ..m]).to_vec(),
        }
    }

    /// Masks of scene `i` restricted to its real objects.
    pub fn masks_of(&self, i: usize) -> ArrayView3<'_, u8> {
        self.gt_masks.slice(s![i, ..self.num_objects[i], .., ..])
    }

    /// Foreground objects of scene `i` that are visible (non-empty mask).
    /// These are the targets for matching and property prediction.
    pub fn target_objects(&self, i: usize) -> Vec<usize> {
        (self.background_count..self.num_objects[i])
            .filter(|&o| self.gt_masks.slice(s![i, o, .., ..]).iter().any(|&v| v != 0))
            .collect()
    }

    /// Target vector (width P) of object `o` in scene `i`.
    pub fn target_vector(&self, i: usize, o: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.schema.width());
        for p in &self.properties {
            out.extend(p.slice(s![i, o, ..]).iter().map(|&v| v as f64));
        }
        out
    }

    /// Assembles a batch from per-scene data, zero-padding to the largest
    /// object count (or `min_max_objects`, whichever is larger).
    #[allow(clippy::too_many_arguments)]
    pub fn from_scenes(
        name: impl Into<String>,
        schema: PropertySchema,
        background_count: usize,
        dims: (usize, usize, usize),
        min_max_objects: usize,
        scenes: &[Scene],
    ) -> Self {
        let (h, w, c) = dims;
        let n = scenes.len();
        let m_max = scenes
            .iter()
            .map(Scene::num_objects)
            .max()
            .unwrap_or(0)
            .max(min_max_objects);
        let mut images = Array4::zeros((n, h, w, c));
        let mut gt_masks = Array4::zeros((n, m_max, h, w));
        let mut properties: Vec<Array3<f32>> = schema
            .entries()
            .iter()
            .map(|e| Array3::zeros((n, m_max, e.kind.width())))
            .collect();
        let mut ood_flags = Array2::from_elem((n, m_max), false);
        let mut num_objects = Vec::with_capacity(n);
        for (i, sc) in scenes.iter().enumerate() {
            let m = sc.num_objects();
            num_objects.push(m);
            images.index_axis_mut(Axis(0), i).assign(&sc.image);
            gt_masks.slice_mut(s![i, ..m, .., ..]).assign(&sc.masks);
            for (dst, src) in properties.iter_mut().zip(&sc.properties) {
                dst.slice_mut(s![i, ..m, ..]).assign(src);
            }
            for (o, &f) in sc.ood.iter().enumerate() {
                ood_flags[[i, o]] = f;
            }
        }
        SceneBatch {
            name: name.into(),
            schema,
            images,
            gt_masks,
            num_objects,
            properties,
            background_count,
            ood_flags,
            excluded_properties: BTreeSet::new(),
            splits: None,
            shift: None,
        }
    }

    /// Batch restricted to `indices` (in that order). Splits are dropped.
    pub fn select(&self, indices: &[usize]) -> SceneBatch {
        let scenes: Vec<Scene> = indices.iter().map(|&i| self.scene(i)).collect();
        let mut out = SceneBatch::from_scenes(
            self.name.clone(),
            self.schema.clone(),
            self.background_count,
            self.image_dims(),
            self.max_objects(),
            &scenes,
        );
        out.excluded_properties = self.excluded_properties.clone();
        out
    }

    /// Checks every dataset invariant, reporting the first offending scene.
    pub fn validate(&self) -> Result<()> {
        let (n, h, w, _c) = self.images.dim();
        let (mn, m_max, mh, mw) = self.gt_masks.dim();
        if mn != n || mh != h || mw != w {
            return Err(Error::InvalidData(format!(
                "gt_masks shape {:?} inconsistent with images {:?}",
                self.gt_masks.dim(),
                self.images.dim()
            )));
        }
        if self.num_objects.len() != n {
            return Err(Error::InvalidData(format!(
                "num_objects has {} entries for {} scenes",
                self.num_objects.len(),
                n
            )));
        }
        if self.ood_flags.dim() != (n, m_max) {
            return Err(Error::InvalidData(format!(
                "ood_flags shape {:?}, expected {:?}",
                self.ood_flags.dim(),
                (n, m_max)
            )));
        }
        if self.properties.len() != self.schema.len() {
            return Err(Error::InvalidData(format!(
                "{} property tensors for {} schema entries",
                self.properties.len(),
                self.schema.len()
            )));
        }
        for (p, e) in self.properties.iter().zip(self.schema.entries()) {
            if p.dim() != (n, m_max, e.kind.width()) {
                return Err(Error::InvalidData(format!(
                    "property '{}' has shape {:?}, expected {:?}",
                    e.name,
                    p.dim(),
                    (n, m_max, e.kind.width())
                )));
            }
        }
        for i in 0..n {
            self.validate_scene(i)?;
        }
        if let Some(splits) = &self.splits {
            splits.validate(n)?;
        }
        if let Some(shift) = &self.shift {
            if shift.ood_objects.len() != n {
                return Err(Error::InvalidData(format!(
                    "shift metadata lists {} scenes, batch has {}",
                    shift.ood_objects.len(),
                    n
                )));
            }
        }
        Ok(())
    }

    fn validate_scene(&self, i: usize) -> Result<()> {
        let m = self.num_objects[i];
        let m_max = self.max_objects();
        if m > m_max {
            return Err(Error::validation(i, format!("num_objects {m} exceeds M_max {m_max}")));
        }
        if m < self.background_count {
            return Err(Error::validation(
                i,
                format!("num_objects {m} below background_count {}", self.background_count),
            ));
        }
        if let Some(v) = self
            .images
            .index_axis(Axis(0), i)
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::validation(i, format!("image value {v} outside [0, 1]")));
        }
        let masks = self.gt_masks.index_axis(Axis(0), i);
        if masks.iter().any(|&v| v > 1) {
            return Err(Error::validation(i, "gt_masks must be binary"));
        }
        if masks.slice(s![m.., .., ..]).iter().any(|&v| v != 0) {
            return Err(Error::validation(i, "non-zero mask beyond num_objects"));
        }
        let sums = masks.map(|&v| v as u32).sum_axis(Axis(0));
        if let Some(((r, c), s)) = sums.indexed_iter().find(|(_, &s)| s != 1) {
            return Err(Error::validation(
                i,
                format!("gt_masks do not partition pixel ({r}, {c}): sum {s}"),
            ));
        }
        if self.ood_flags.slice(s![i, m..]).iter().any(|&f| f) {
            return Err(Error::validation(i, "ood flag set on padded object"));
        }
        for (p, e) in self.properties.iter().zip(self.schema.entries()) {
            let rows = p.index_axis(Axis(0), i);
            if rows.slice(s![m.., ..]).iter().any(|&v| v != 0.0) {
                return Err(Error::validation(i, format!("property '{}' not zero-padded", e.name)));
            }
            if let Some(v) = rows.iter().find(|v| !v.is_finite()) {
                return Err(Error::validation(i, format!("property '{}' has non-finite value {v}", e.name)));
            }
            if let PropertyKind::Categorical { .. } = e.kind {
                let excluded = self.excluded_properties.contains(&e.name);
                for o in self.background_count..m {
                    // Shifted objects may carry classes outside the schema.
                    if excluded && self.ood_flags[[i, o]] {
                        continue;
                    }
                    if !is_one_hot(rows.row(o)) {
                        return Err(Error::validation(
                            i,
                            format!("property '{}' of object {o} is not one-hot", e.name),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

fn is_one_hot(row: ndarray::ArrayView1<f32>) -> bool {
    let ones = row.iter().filter(|&&v| v == 1.0).count();
    let zeros = row.iter().filter(|&&v| v == 0.0).count();
    ones == 1 && ones + zeros == row.len()
}

/// Class index of a one-hot (or score) row: first maximum.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in row.into_iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Output of an upstream model for a batch of scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotBatch {
    /// N×K×d slot representations. Distributed models use K=1.
    pub slots: Array3<f32>,
    /// N×K×H×W soft masks summing to one per pixel.
    pub pred_masks: Array4<f32>,
    /// Optional N×H×W×C reconstructions.
    pub recon: Option<Array4<f32>>,
    pub distributed: bool,
}

impl SlotBatch {
    pub fn len(&self) -> usize {
        self.slots.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len_of(Axis(1))
    }

    pub fn slot_dim(&self) -> usize {
        self.slots.len_of(Axis(2))
    }

    pub fn slots_of(&self, i: usize) -> ArrayView2<'_, f32> {
        self.slots.index_axis(Axis(0), i)
    }

    pub fn masks_of(&self, i: usize) -> ArrayView3<'_, f32> {
        self.pred_masks.index_axis(Axis(0), i)
    }

    /// Entries at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> SlotBatch {
        SlotBatch {
            slots: self.slots.select(Axis(0), indices),
            pred_masks: self.pred_masks.select(Axis(0), indices),
            recon: self.recon.as_ref().map(|r| r.select(Axis(0), indices)),
            distributed: self.distributed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, k, _) = self.slots.dim();
        let (pn, pk, h, w) = self.pred_masks.dim();
        if k == 0 {
            return Err(Error::InvalidData("slot batch needs K >= 1".into()));
        }
        if pn != n || pk != k {
            return Err(Error::InvalidData(format!(
                "pred_masks shape {:?} inconsistent with slots {:?}",
                self.pred_masks.dim(),
                self.slots.dim()
            )));
        }
        if self.distributed && k != 1 {
            return Err(Error::InvalidData("distributed representations must use K = 1".into()));
        }
        if let Some(r) = &self.recon {
            let (rn, rh, rw, _) = r.dim();
            if rn != n || rh != h || rw != w {
                return Err(Error::InvalidData(format!(
                    "recon shape {:?} inconsistent with masks {:?}",
                    r.dim(),
                    self.pred_masks.dim()
                )));
            }
        }
        for i in 0..n {
            let masks = self.pred_masks.index_axis(Axis(0), i);
            if let Some(v) = masks.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::validation(i, format!("pred mask value {v} outside [0, 1]")));
            }
            let sums = masks.sum_axis(Axis(0));
            if let Some(((r, c), s)) = sums.indexed_iter().find(|(_, &s)| (s - 1.0).abs() > MASK_SUM_TOL) {
                return Err(Error::validation(i, format!("pred masks sum to {s} at pixel ({r}, {c})")));
            }
            if self.slots.index_axis(Axis(0), i).iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(i, "non-finite slot value"));
            }
        }
        Ok(())
    }

    /// Slot batch whose predicted masks are the ground-truth masks, padded
    /// with empty slots up to `k`. Slots are zero vectors of width 1.
    pub fn from_gt_masks(batch: &SceneBatch, k: usize) -> Result<SlotBatch> {
        let (h, w, _) = batch.image_dims();
        let n = batch.len();
        if batch.num_objects.iter().any(|&m| m > k) {
            return Err(Error::Config(format!("some scene has more than {k} objects")));
        }
        let mut pred = Array4::zeros((n, k, h, w));
        for i in 0..n {
            let m = batch.num_objects[i];
            pred.slice_mut(s![i, ..m, .., ..])
                .assign(&batch.masks_of(i).mapv(|v| v as f32));
        }
        Ok(SlotBatch {
            slots: Array3::zeros((n, k, 1)),
            pred_masks: pred,
            recon: Some(batch.images.clone()),
            distributed: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::schema::presets;
    use ndarray::array;

    fn tiny_scene() -> Scene {
        // 2×2 image, background + 1 object occupying the left column.
        let masks = array![[[0u8, 1], [0, 1]], [[1, 0], [1, 0]]];
        let mut color = Array2::zeros((2, 3));
        color.row_mut(1).assign(&array![1.0f32, 0.0, 0.0]);
        let mut shape = Array2::zeros((2, 3));
        shape[[1, 2]] = 1.0;
        let scale = array![[0.0f32], [0.5]];
        let x = array![[0.0f32], [0.25]];
        let y = array![[0.0f32], [0.5]];
        Scene {
            image: Array3::from_elem((2, 2, 3), 0.5),
            masks,
            properties: vec![color, scale, shape, x, y],
            ood: vec![false, false],
        }
    }

    fn tiny_batch() -> SceneBatch {
        SceneBatch::from_scenes("t", presets::multi_dsprites(), 1, (2, 2, 3), 3, &[tiny_scene(), tiny_scene()])
    }

    #[test]
    fn padding_and_roundtrip_through_scene() {
        let b = tiny_batch();
        assert_eq!(b.max_objects(), 3);
        b.validate().unwrap();
        assert_eq!(b.scene(1), tiny_scene());
        assert_eq!(b.target_objects(0), vec![1]);
        assert_eq!(b.target_vector(0, 1), vec![1.0, 0.0, 0.0, 0.5, 0.0, 0.0, 1.0, 0.25, 0.5]);
    }

    #[test]
    fn mask_sum_of_two_names_scene() {
        let mut b = tiny_batch();
        b.gt_masks[[0, 1, 0, 1]] = 1;
        match b.validate() {
            Err(Error::Validation { scene, .. }) => assert_eq!(scene, 0),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn non_one_hot_rejected_unless_excluded_and_ood() {
        let mut b = tiny_batch();
        b.properties[2][[1, 1, 2]] = 0.0;
        assert!(matches!(b.validate(), Err(Error::Validation { scene: 1, .. })));
        b.ood_flags[[1, 1]] = true;
        b.excluded_properties.insert("shape".into());
        b.validate().unwrap();
    }

    #[test]
    fn labels_match_masks() {
        let sc = tiny_scene();
        assert_eq!(sc.labels(), array![[1usize, 0], [1, 0]]);
    }

    #[test]
    fn gt_slot_batch_is_valid() {
        let b = tiny_batch();
        let sb = SlotBatch::from_gt_masks(&b, 4).unwrap();
        sb.validate().unwrap();
        assert!(SlotBatch::from_gt_masks(&b, 1).is_err());
    }

    #[test]
    fn argmax_first_max() {
        assert_eq!(argmax([0.0, 2.0, 2.0, 1.0]), 1);
    }
}
