//! Constant-output baselines that ignore the image.

use serde::{Deserialize, Serialize};

use super::eval::{evaluate_inputs, score_outcomes, ObjectOutcome, ProbeScores};
use super::mlp::{PredictorConfig, PredictorParams};
use super::train::{train_with_inputs, ProbeInputs, TrainConfig};
use crate::data::{PropertyKind, SceneBatch, Splits};
use crate::error::{Error, Result};
use crate::matching::MatchingMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Mean of numeric properties and majority class, fitted on the fit split.
    AnalyticSlotwise,
    /// A learned constant vector per output group, matched by loss.
    LearnedLossMatch,
    /// A learned constant vector per output group, matched in fixed order.
    LearnedDeterministic,
}

/// The analytic constant prediction (width P): mean of each numeric
/// property pooled over its dims and one-hot majority class (lowest class on ties), over the
/// target objects of `scenes`.
pub fn analytic_constant(batch: &SceneBatch, scenes: &[usize]) -> Vec<f64> {
    let schema = &batch.schema;
    let mut sums = vec![0.0; schema.width()];
    let mut count = 0usize;
    for &i in scenes {
        for o in batch.target_objects(i) {
            for (s, v) in sums.iter_mut().zip(batch.target_vector(i, o)) {
                *s += v;
            }
            count += 1;
        }
    }
    let mut out = vec![0.0; schema.width()];
    if count == 0 {
        return out;
    }
    for (i, e) in schema.entries().iter().enumerate() {
        let seg = schema.offset(i)..schema.offset(i) + e.kind.width();
        match e.kind {
            PropertyKind::Categorical { .. } => {
                let best = crate::data::argmax(sums[seg.clone()].iter().copied());
                out[seg.start + best] = 1.0;
            }
            PropertyKind::Numeric { dims } => {
                // One mean pooled over the property's dims, the same mean R² is taken about.
                let mean = sums[seg.clone()].iter().sum::<f64>() / (count * dims) as f64;
                out[seg].fill(mean);
            }
        }
    }
    out
}

/// Scores the analytic constant fitted on `fit` against the objects of `eval`.
pub fn analytic_baseline(batch: &SceneBatch, fit: &[usize], eval: &[usize]) -> ProbeScores {
    let constant = analytic_constant(batch, fit);
    let outcomes: Vec<ObjectOutcome> = eval
        .iter()
        .flat_map(|&i| {
            batch.target_objects(i).into_iter().map(move |o| (i, o))
        })
        .map(|(i, o)| ObjectOutcome {
            target: batch.target_vector(i, o),
            prediction: Some(constant.clone()),
            ood: batch.ood_flags[[i, o]],
        })
        .collect();
    score_outcomes(batch, &outcomes)
}

/// Baseline scores on the test split.
///
/// The analytic mode fits on the training split and yields one result. The
/// learned modes train `groups` constant vectors with the standard protocol,
/// one result per seed in `seeds`.
pub fn baseline_constant(
    batch: &SceneBatch,
    mode: BaselineMode,
    groups: usize,
    train_config: &TrainConfig,
    splits: &Splits,
    seeds: &[u64],
) -> Result<Vec<ProbeScores>> {
    splits.validate(batch.len())?;
    let matching = match mode {
        BaselineMode::AnalyticSlotwise => return Ok(vec![analytic_baseline(batch, &splits.train, &splits.test)]),
        BaselineMode::LearnedLossMatch => MatchingMode::Loss,
        BaselineMode::LearnedDeterministic => MatchingMode::Deterministic,
    };
    if groups == 0 {
        return Err(Error::Config("learned baselines need at least one output group".into()));
    }
    let config = PredictorConfig::distributed(0, 0, batch.schema.width(), groups);
    let inputs = ProbeInputs::constant(batch.len());
    seeds
        .iter()
        .map(|&seed| {
            let tc = TrainConfig {
                seed,
                ..train_config.clone()
            };
            let mut params = PredictorParams::init(&config, seed);
            train_with_inputs(&inputs, None, batch, &config, &tc, matching, splits, &mut params)?;
            evaluate_inputs(&params, &config, &inputs, None, batch, matching, &splits.test)
        })
        .collect()
}
