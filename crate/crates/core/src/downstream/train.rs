//! Probe training on frozen representations.

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::property_loss_grad;
use super::mlp::{backward, forward, forward_cached, Adam, PredictorConfig, PredictorParams, ProbeLayout};
use crate::data::{SceneBatch, SlotBatch, Splits};
use crate::error::{Error, Result};
use crate::matching::{deterministic_order, hungarian, loss_costs, mask_match_costs, two_step_ood_match, CostMatrix, MatchingMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub lr_halving_period: usize,
    pub eval_period: usize,
    pub early_stop_patience: usize,
    pub early_stop_min_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            max_steps: 6000,
            lr_halving_period: 2000,
            eval_period: 250,
            early_stop_patience: 3,
            early_stop_min_delta: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.lr_halving_period == 0 || self.eval_period == 0 {
            return Err(Error::Config("lr, batch_size, lr_halving_period and eval_period must be positive".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be at least 1".into()));
        }
        if !(self.early_stop_min_delta >= 0.0) {
            return Err(Error::Config("early_stop_min_delta must be non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate used for the update at 0-based step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * 0.5f64.powi((step / self.lr_halving_period) as i32)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: usize,
    /// Minibatch loss of every step.
    pub train_losses: Vec<f64>,
    /// `(steps completed, validation loss)`.
    pub val_losses: Vec<(usize, f64)>,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn final_val_loss(&self) -> Option<f64> {
        self.val_losses.last().map(|v| v.1)
    }
}

/// Per-scene probe inputs: one row per slot (slot-wise) or a single row.
pub(crate) struct ProbeInputs {
    pub rows: Vec<Array2<f64>>,
}

impl ProbeInputs {
    pub fn from_slots(slots: &SlotBatch, config: &PredictorConfig) -> Result<Self> {
        if slots.slot_dim() != config.input_width {
            return Err(Error::Config(format!(
                "slot width {} but probe input width {}",
                slots.slot_dim(),
                config.input_width
            )));
        }
        match config.layout {
            ProbeLayout::SlotWise if slots.distributed => {
                return Err(Error::Config("slot-wise probe on a distributed representation".into()))
            }
            ProbeLayout::Distributed { .. } if !slots.distributed => {
                return Err(Error::Config("distributed probe on a slot representation".into()))
            }
            _ => {}
        }
        let rows = (0..slots.len()).map(|i| slots.slots_of(i).mapv(f64::from)).collect();
        Ok(Self { rows })
    }

    /// Zero-width single-row inputs, for constant predictors.
    pub fn constant(n: usize) -> Self {
        Self {
            rows: (0..n).map(|_| Array2::zeros((1, 0))).collect(),
        }
    }
}

/// Matching targets of one scene.
pub(crate) struct SceneTargets {
    pub objects: Vec<usize>,
    /// One row per entry of `objects`.
    pub targets: Array2<f64>,
    pub ood: Vec<bool>,
    /// Mask costs of the targets against every slot.
    pub mask_costs: Option<CostMatrix>,
}

impl SceneTargets {
    pub fn build(batch: &SceneBatch, i: usize, slots: Option<&SlotBatch>) -> Result<Self> {
        let objects = batch.target_objects(i);
        let p = batch.schema.width();
        let mut targets = Array2::zeros((objects.len(), p));
        for (r, &o) in objects.iter().enumerate() {
            targets.row_mut(r).assign(&ndarray::Array1::from(batch.target_vector(i, o)));
        }
        let ood = objects.iter().map(|&o| batch.ood_flags[[i, o]]).collect();
        let mask_costs = match slots {
            Some(sb) => {
                let gt = batch.masks_of(i);
                let sel = gt.select(ndarray::Axis(0), &objects);
                Some(mask_match_costs(sb.masks_of(i), sel.view())?)
            }
            None => None,
        };
        Ok(Self {
            objects,
            targets,
            ood,
            mask_costs,
        })
    }

    pub fn id_subset(&self) -> Vec<usize> {
        (0..self.objects.len()).filter(|&r| !self.ood[r]).collect()
    }

    pub fn all(&self) -> Vec<usize> {
        (0..self.objects.len()).collect()
    }
}

pub(crate) fn build_targets(batch: &SceneBatch, scenes: &[usize], slots: Option<&SlotBatch>) -> Result<Vec<SceneTargets>> {
    use rayon::prelude::*;
    scenes.par_iter().map(|&i| SceneTargets::build(batch, i, slots)).collect()
}

/// Predictions of one scene, reshaped to one row per matchable output.
pub(crate) fn scene_predictions(out: ArrayView2<f64>, target_width: usize) -> Array2<f64> {
    let total = out.len();
    out.as_standard_layout()
        .to_owned()
        .into_shape_with_order((total / target_width, target_width))
        .expect("output width is a multiple of target width")
}

/// Matches the `subset` of targets (local indices) to prediction rows.
/// Returns `(local target index, prediction row)`.
pub(crate) fn match_scene(
    mode: MatchingMode,
    preds: ArrayView2<f64>,
    st: &SceneTargets,
    subset: &[usize],
    batch: &SceneBatch,
    included: &[bool],
    two_step: bool,
) -> Result<Vec<(usize, usize)>> {
    if subset.is_empty() || preds.nrows() == 0 {
        return Ok(Vec::new());
    }
    let schema = &batch.schema;
    let targets = st.targets.select(ndarray::Axis(0), subset);
    let ood: Vec<bool> = subset.iter().map(|&r| st.ood[r]).collect();
    let local = match mode {
        MatchingMode::Loss => {
            if two_step && ood.iter().any(|&f| f) {
                two_step_ood_match(preds, targets.view(), schema, &ood, included)?.pairs
            } else {
                hungarian(&loss_costs(preds, targets.view(), schema, included)?)?.pairs
            }
        }
        MatchingMode::Mask => {
            let costs = st
                .mask_costs
                .as_ref()
                .ok_or_else(|| Error::Config("mask matching requires predicted masks".into()))?;
            let cols: Vec<usize> = (0..costs.num_slots()).collect();
            hungarian(&costs.submatrix(subset, &cols))?
                .pairs
                .into_iter()
                .map(|(r, c)| (subset.iter().position(|&s| s == r).expect("row label from subset"), c))
                .collect()
        }
        MatchingMode::Deterministic => deterministic_order(targets.view(), schema, &ood)
            .into_iter()
            .take(preds.nrows())
            .enumerate()
            .map(|(row, obj)| (obj, row))
            .collect(),
    };
    Ok(local.into_iter().map(|(r, c)| (subset[r], c)).collect())
}

pub(crate) struct Trainer<'a> {
    pub batch: &'a SceneBatch,
    pub config: &'a PredictorConfig,
    pub inputs: &'a ProbeInputs,
    pub mode: MatchingMode,
    pub included: Vec<bool>,
}

impl Trainer<'_> {
    fn stack(&self, scenes: &[usize]) -> Array2<f64> {
        let rows: usize = scenes.iter().map(|&i| self.inputs.rows[i].nrows()).sum();
        let mut x = Array2::zeros((rows, self.config.input_width));
        let mut at = 0;
        for &i in scenes {
            let r = &self.inputs.rows[i];
            x.slice_mut(s![at..at + r.nrows(), ..]).assign(r);
            at += r.nrows();
        }
        x
    }

    /// Mean matched loss over `scenes` (targets aligned with `scenes`),
    /// ignoring OOD objects. Optionally accumulates the output gradient.
    fn matched_loss(
        &self,
        scenes: &[usize],
        targets: &[&SceneTargets],
        out: &Array2<f64>,
        mut grad: Option<&mut Array2<f64>>,
    ) -> Result<f64> {
        let p = self.config.target_width();
        let mut matches = Vec::with_capacity(scenes.len());
        let mut at = 0;
        let mut pairs_total = 0usize;
        for (&i, st) in scenes.iter().zip(targets) {
            let r = self.inputs.rows[i].nrows();
            let preds = scene_predictions(out.slice(s![at..at + r, ..]), p);
            let pairs = match_scene(self.mode, preds.view(), st, &st.id_subset(), self.batch, &self.included, false)?;
            pairs_total += pairs.len();
            matches.push((at, r, preds, pairs));
            at += r;
        }
        if pairs_total == 0 {
            return Ok(0.0);
        }
        let scale = 1.0 / pairs_total as f64;
        let mut total = 0.0;
        let mut gbuf = vec![0.0; p];
        for ((at, r, preds, pairs), st) in matches.into_iter().zip(targets) {
            let mut gscene = grad.as_ref().map(|_| Array2::<f64>::zeros(preds.dim()));
            for (t, row) in pairs {
                let pr = preds.row(row);
                let tg = st.targets.row(t);
                let pr = pr.as_slice().expect("standard layout");
                let tg = tg.as_slice().expect("standard layout");
                gbuf.iter_mut().for_each(|g| *g = 0.0);
                total += property_loss_grad(pr, tg, &self.batch.schema, &self.included, &mut gbuf, scale);
                if let Some(gs) = gscene.as_mut() {
                    gs.row_mut(row).iter_mut().zip(&gbuf).for_each(|(a, b)| *a += b);
                }
            }
            if let (Some(g), Some(gs)) = (grad.as_deref_mut(), gscene) {
                let width = g.ncols();
                let gs = gs.into_shape_with_order((r, width)).expect("reshape gradient");
                g.slice_mut(s![at..at + r, ..]).assign(&gs);
            }
        }
        Ok(total * scale)
    }

    pub fn loss(&self, params: &PredictorParams, scenes: &[usize], targets: &[&SceneTargets]) -> Result<f64> {
        let out = forward(params, self.stack(scenes).view());
        self.matched_loss(scenes, targets, &out, None)
    }

    pub fn run(
        &self,
        params: &mut PredictorParams,
        tc: &TrainConfig,
        train: &[usize],
        train_targets: &[SceneTargets],
        val: &[usize],
        val_targets: &[SceneTargets],
    ) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        if train.is_empty() || tc.max_steps == 0 {
            return Ok(log);
        }
        let val_refs: Vec<&SceneTargets> = val_targets.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        let mut adam = Adam::new(params);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut cursor = order.len();
        let mut best = f64::INFINITY;
        let mut bad = 0usize;
        for step in 0..tc.max_steps {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let end = (cursor + tc.batch_size).min(order.len());
            let picks = &order[cursor..end];
            cursor = end;
            let scenes: Vec<usize> = picks.iter().map(|&j| train[j]).collect();
            let targets: Vec<&SceneTargets> = picks.iter().map(|&j| &train_targets[j]).collect();

            let (out, cache) = forward_cached(params, self.stack(&scenes).view());
            let mut grad = Array2::zeros(out.dim());
            let loss = self.matched_loss(&scenes, &targets, &out, Some(&mut grad))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let (grads, _) = backward(params, &cache, grad);
            adam.step(params, &grads, tc.lr_at(step));
            log.train_losses.push(loss);
            log.steps = step + 1;

            if log.steps % tc.eval_period == 0 && !val.is_empty() {
                let v = self.loss(params, val, &val_refs)?;
                if !v.is_finite() {
                    return Err(Error::NonFiniteLoss { step });
                }
                log.val_losses.push((log.steps, v));
                if best - v > tc.early_stop_min_delta {
                    best = v;
                    bad = 0;
                } else {
                    bad += 1;
                    if bad >= tc.early_stop_patience {
                        log.stopped_early = true;
                        break;
                    }
                }
            }
        }
        Ok(log)
    }
}

/// Trains a probe on frozen representations.
///
/// OOD objects are left out of matching and of the loss. Properties listed
/// in the batch's `excluded_properties` are left out of the loss.
pub fn train_probe(
    slots: &SlotBatch,
    batch: &SceneBatch,
    config: &PredictorConfig,
    train_config: &TrainConfig,
    mode: MatchingMode,
    splits: &Splits,
) -> Result<(PredictorParams, TrainLog)> {
    config.validate()?;
    train_config.validate()?;
    check_alignment(slots, batch, config, mode)?;
    let inputs = ProbeInputs::from_slots(slots, config)?;
    let mut params = PredictorParams::init(config, train_config.seed);
    let log = train_with_inputs(&inputs, Some(slots), batch, config, train_config, mode, splits, &mut params)?;
    Ok((params, log))
}

pub(crate) fn check_alignment(slots: &SlotBatch, batch: &SceneBatch, config: &PredictorConfig, mode: MatchingMode) -> Result<()> {
    if slots.len() != batch.len() {
        return Err(Error::Shape(format!("{} slot scenes vs {} dataset scenes", slots.len(), batch.len())));
    }
    if config.target_width() != batch.schema.width() {
        return Err(Error::Config(format!(
            "probe predicts width {} but schema width is {}",
            config.target_width(),
            batch.schema.width()
        )));
    }
    if mode == MatchingMode::Mask && matches!(config.layout, ProbeLayout::Distributed { .. }) {
        return Err(Error::Config("mask matching is undefined for distributed representations".into()));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn train_with_inputs(
    inputs: &ProbeInputs,
    slots: Option<&SlotBatch>,
    batch: &SceneBatch,
    config: &PredictorConfig,
    train_config: &TrainConfig,
    mode: MatchingMode,
    splits: &Splits,
    params: &mut PredictorParams,
) -> Result<TrainLog> {
    splits.validate(batch.len())?;
    let mask_slots = if mode == MatchingMode::Mask { slots } else { None };
    let train_targets = build_targets(batch, &splits.train, mask_slots)?;
    let val_targets = build_targets(batch, &splits.val, mask_slots)?;
    let trainer = Trainer {
        batch,
        config,
        inputs,
        mode,
        included: batch.schema.mask_excluding(batch.excluded_properties.iter().map(String::as_str)),
    };
    trainer.run(params, train_config, &splits.train, &train_targets, &splits.val, &val_targets)
}
