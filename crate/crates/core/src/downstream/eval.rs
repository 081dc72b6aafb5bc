//! Matched evaluation of trained probes: accuracy for categorical
//! properties, pooled R² for numeric ones, split by ID and OOD objects.

use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mlp::{forward, PredictorConfig, PredictorParams};
use super::train::{build_targets, check_alignment, match_scene, scene_predictions, ProbeInputs, SceneTargets};
use crate::data::{argmax, PropertyKind, SceneBatch, SlotBatch};
use crate::error::Result;
use crate::matching::MatchingMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Accuracy,
    R2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    /// `None` when the group has no objects (or zero target variance for R²).
    pub value: Option<f64>,
    /// Objects contributing: all objects for accuracy, matched ones for R².
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyScore {
    pub property: String,
    pub kind: ScoreKind,
    pub id: GroupScore,
    pub ood: GroupScore,
    pub all: GroupScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeScores {
    pub properties: Vec<PropertyScore>,
    pub objects: usize,
    pub unmatched: usize,
}

impl ProbeScores {
    pub fn get(&self, property: &str) -> Option<&PropertyScore> {
        self.properties.iter().find(|p| p.property == property)
    }
}

/// One evaluated object: its target, its prediction if matched, and its group.
pub(crate) struct ObjectOutcome {
    pub target: Vec<f64>,
    pub prediction: Option<Vec<f64>>,
    pub ood: bool,
}

#[derive(Default, Clone, Copy)]
struct Acc {
    correct: usize,
    total: usize,
}

#[derive(Default, Clone)]
struct Pool {
    pred: Vec<f64>,
    truth: Vec<f64>,
    objects: usize,
}

impl Pool {
    fn r2(&self) -> GroupScore {
        if self.truth.is_empty() {
            return GroupScore { value: None, count: 0 };
        }
        let mean = self.truth.iter().sum::<f64>() / self.truth.len() as f64;
        let ss_tot: f64 = self.truth.iter().map(|t| (t - mean) * (t - mean)).sum();
        let ss_res: f64 = self.pred.iter().zip(&self.truth).map(|(p, t)| (p - t) * (p - t)).sum();
        GroupScore {
            value: (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot),
            count: self.objects,
        }
    }
}

/// Scores outcomes per property of `batch.schema`, skipping excluded properties.
pub(crate) fn score_outcomes(batch: &SceneBatch, outcomes: &[ObjectOutcome]) -> ProbeScores {
    let schema = &batch.schema;
    let mut properties = Vec::new();
    for (i, e) in schema.entries().iter().enumerate() {
        if batch.excluded_properties.contains(&e.name) {
            continue;
        }
        let seg = schema.offset(i)..schema.offset(i) + e.kind.width();
        let score = match e.kind {
            PropertyKind::Categorical { .. } => {
                let mut acc = [Acc::default(); 2];
                for o in outcomes {
                    let a = &mut acc[o.ood as usize];
                    a.total += 1;
                    if let Some(p) = &o.prediction {
                        let truth = argmax(o.target[seg.clone()].iter().copied());
                        if argmax(p[seg.clone()].iter().copied()) == truth {
                            a.correct += 1;
                        }
                    }
                }
                let g = |a: Acc| GroupScore {
                    value: (a.total > 0).then(|| a.correct as f64 / a.total as f64),
                    count: a.total,
                };
                let all = Acc {
                    correct: acc[0].correct + acc[1].correct,
                    total: acc[0].total + acc[1].total,
                };
                PropertyScore {
                    property: e.name.clone(),
                    kind: ScoreKind::Accuracy,
                    id: g(acc[0]),
                    ood: g(acc[1]),
                    all: g(all),
                }
            }
            PropertyKind::Numeric { .. } => {
                let mut pools = [Pool::default(), Pool::default(), Pool::default()];
                for o in outcomes {
                    if let Some(p) = &o.prediction {
                        for pool in [o.ood as usize, 2] {
                            pools[pool].pred.extend_from_slice(&p[seg.clone()]);
                            pools[pool].truth.extend_from_slice(&o.target[seg.clone()]);
                            pools[pool].objects += 1;
                        }
                    }
                }
                PropertyScore {
                    property: e.name.clone(),
                    kind: ScoreKind::R2,
                    id: pools[0].r2(),
                    ood: pools[1].r2(),
                    all: pools[2].r2(),
                }
            }
        };
        properties.push(score);
    }
    ProbeScores {
        properties,
        objects: outcomes.len(),
        unmatched: outcomes.iter().filter(|o| o.prediction.is_none()).count(),
    }
}

pub(crate) fn evaluate_inputs(
    params: &PredictorParams,
    config: &PredictorConfig,
    inputs: &ProbeInputs,
    slots: Option<&SlotBatch>,
    batch: &SceneBatch,
    mode: MatchingMode,
    split: &[usize],
) -> Result<ProbeScores> {
    let mask_slots = if mode == MatchingMode::Mask { slots } else { None };
    let targets = build_targets(batch, split, mask_slots)?;
    let included = batch.schema.mask_excluding(batch.excluded_properties.iter().map(String::as_str));
    let per_scene: Vec<Vec<ObjectOutcome>> = split
        .par_iter()
        .zip(targets.par_iter())
        .map(|(&i, st): (&usize, &SceneTargets)| {
            let out = forward(params, inputs.rows[i].view());
            let preds = scene_predictions(out.view(), config.target_width());
            let pairs = match_scene(mode, preds.view(), st, &st.all(), batch, &included, true)?;
            let mut outcomes: Vec<ObjectOutcome> = (0..st.objects.len())
                .map(|r| ObjectOutcome {
                    target: st.targets.row(r).to_vec(),
                    prediction: None,
                    ood: st.ood[r],
                })
                .collect();
            for (t, row) in pairs {
                outcomes[t].prediction = Some(preds.slice(s![row, ..]).to_vec());
            }
            Ok(outcomes)
        })
        .collect::<Result<_>>()?;
    let flat: Vec<ObjectOutcome> = per_scene.into_iter().flatten().collect();
    Ok(score_outcomes(batch, &flat))
}

/// Evaluates a trained probe on the scenes in `split`.
///
/// Loss matching switches to two-step matching in scenes with OOD objects.
/// Objects left unmatched count as classification errors and are left out
/// of the R² pools.
pub fn evaluate_probe(
    params: &PredictorParams,
    config: &PredictorConfig,
    slots: &SlotBatch,
    batch: &SceneBatch,
    mode: MatchingMode,
    split: &[usize],
) -> Result<ProbeScores> {
    config.validate()?;
    check_alignment(slots, batch, config, mode)?;
    let inputs = ProbeInputs::from_slots(slots, config)?;
    evaluate_inputs(params, config, &inputs, Some(slots), batch, mode, split)
}

/// Per-scene prediction rows of a probe (K×P slot-wise, groups×P distributed).
pub fn predict(params: &PredictorParams, config: &PredictorConfig, slots: &SlotBatch, scene: usize) -> Result<Array2<f64>> {
    let inputs = ProbeInputs::from_slots(slots, config)?;
    let out = forward(params, inputs.rows[scene].view());
    Ok(scene_predictions(out.view(), config.target_width()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::presets;
    use crate::data::Scene;
    use ndarray::{array, Array2, Array3};

    fn batch_with(shapes: &[usize], xs: &[f32]) -> SceneBatch {
        let m = shapes.len() + 1;
        let mut masks = Array3::zeros((m, 1, m));
        for o in 0..m {
            masks[[o, 0, o]] = 1;
        }
        let mut color = Array2::zeros((m, 3));
        let mut shape = Array2::zeros((m, 3));
        let mut scale = Array2::zeros((m, 1));
        let mut x = Array2::zeros((m, 1));
        for (j, (&s, &xv)) in shapes.iter().zip(xs).enumerate() {
            color[[j + 1, 0]] = 0.5;
            shape[[j + 1, s]] = 1.0;
            scale[[j + 1, 0]] = 0.5;
            x[[j + 1, 0]] = xv;
        }
        let scene = Scene {
            image: Array3::zeros((1, m, 3)),
            masks,
            properties: vec![color, scale, shape, x.clone(), x],
            ood: vec![false; m],
        };
        SceneBatch::from_scenes("t", presets::multi_dsprites(), 1, (1, m, 3), m, &[scene])
    }

    fn outcomes(batch: &SceneBatch, f: impl Fn(&[f64]) -> Option<Vec<f64>>) -> Vec<ObjectOutcome> {
        batch
            .target_objects(0)
            .into_iter()
            .map(|o| {
                let t = batch.target_vector(0, o);
                ObjectOutcome {
                    prediction: f(&t),
                    target: t,
                    ood: false,
                }
            })
            .collect()
    }

    #[test]
    fn perfect_predictions() {
        let b = batch_with(&[0, 1, 2], &[0.1, 0.5, 0.9]);
        let s = score_outcomes(&b, &outcomes(&b, |t| Some(t.to_vec())));
        assert_eq!(s.get("shape").unwrap().all.value, Some(1.0));
        assert_eq!(s.get("x").unwrap().all.value, Some(1.0));
        assert_eq!(s.get("shape").unwrap().ood.value, None);
    }

    #[test]
    fn pooled_mean_gives_zero_r2_and_unmatched_are_errors() {
        let b = batch_with(&[0, 0, 2], &[0.1, 0.5, 0.9]);
        let mean = 0.5;
        let s = score_outcomes(
            &b,
            &outcomes(&b, |t| {
                let mut p = t.to_vec();
                p[7] = mean;
                Some(p)
            }),
        );
        assert!(s.get("x").unwrap().all.value.unwrap().abs() < 1e-12);
        let s = score_outcomes(&b, &outcomes(&b, |t| (t[6] != 1.0).then(|| t.to_vec())));
        let shape = s.get("shape").unwrap();
        assert!((shape.all.value.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.unmatched, 1);
        assert_eq!(s.get("x").unwrap().all.count, 2);
    }

    #[test]
    fn constant_target_has_no_r2() {
        let b = batch_with(&[0, 1], &[0.5, 0.5]);
        let s = score_outcomes(&b, &outcomes(&b, |t| Some(t.to_vec())));
        assert_eq!(s.get("x").unwrap().all.value, None);
        let _ = array![0];
    }

    #[test]
    fn excluded_properties_are_skipped() {
        let mut b = batch_with(&[0, 1], &[0.1, 0.5]);
        b.excluded_properties.insert("shape".into());
        let s = score_outcomes(&b, &outcomes(&b, |t| Some(t.to_vec())));
        assert!(s.get("shape").is_none());
        assert_eq!(s.properties.len(), 4);
    }
}
