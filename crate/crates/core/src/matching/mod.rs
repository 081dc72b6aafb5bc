//! Slot/object matching.
//!
//! A cost matrix has one row per ground-truth object and one column per
//! slot. Mask matching uses negative cosine similarity between masks, loss
//! matching the downstream prediction loss, and deterministic matching a
//! fixed lexicographic order of the objects.

mod hungarian;

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

pub use hungarian::hungarian;

use crate::data::{argmax, PropertyKind, PropertySchema};
use crate::downstream::loss::property_loss;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingMode {
    Mask,
    Loss,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    /// M×K, finite.
    pub costs: Array2<f64>,
    pub row_objects: Vec<usize>,
    pub col_slots: Vec<usize>,
}

impl CostMatrix {
    /// Matrix whose rows and columns are labelled `0..M` and `0..K`.
    pub fn new(costs: Array2<f64>) -> Self {
        let (m, k) = costs.dim();
        Self {
            costs,
            row_objects: (0..m).collect(),
            col_slots: (0..k).collect(),
        }
    }

    pub fn with_labels(costs: Array2<f64>, row_objects: Vec<usize>, col_slots: Vec<usize>) -> Result<Self> {
        if costs.dim() != (row_objects.len(), col_slots.len()) {
            return Err(Error::Shape(format!(
                "cost matrix {:?} with {} row and {} column labels",
                costs.dim(),
                row_objects.len(),
                col_slots.len()
            )));
        }
        Ok(Self {
            costs,
            row_objects,
            col_slots,
        })
    }

    pub fn num_objects(&self) -> usize {
        self.costs.nrows()
    }

    pub fn num_slots(&self) -> usize {
        self.costs.ncols()
    }

    /// Builds a labelled assignment from local (row, column) positions.
    pub(crate) fn assignment_from_local(&self, local: &[(usize, usize)]) -> Assignment {
        let mut local = local.to_vec();
        local.sort_unstable();
        let total_cost = local.iter().map(|&(r, c)| self.costs[[r, c]]).sum();
        let mut pairs: Vec<(usize, usize)> = local
            .iter()
            .map(|&(r, c)| (self.row_objects[r], self.col_slots[c]))
            .collect();
        pairs.sort_unstable();
        Assignment { pairs, total_cost }
    }

    pub(crate) fn submatrix(&self, rows: &[usize], cols: &[usize]) -> CostMatrix {
        CostMatrix {
            costs: Array2::from_shape_fn((rows.len(), cols.len()), |(r, c)| self.costs[[rows[r], cols[c]]]),
            row_objects: rows.iter().map(|&r| self.row_objects[r]).collect(),
            col_slots: cols.iter().map(|&c| self.col_slots[c]).collect(),
        }
    }
}

/// A partial injection between objects and slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(object_index, slot_index)`, sorted by object.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn slot_of(&self, object: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == object).map(|p| p.1)
    }
}

/// Mask matching costs: `cost[m, k] = -cos(g_m, p_k)`, with zero-norm
/// vectors given similarity 0.
pub fn mask_match_costs(pred_masks: ArrayView3<f32>, gt_masks: ArrayView3<u8>) -> Result<CostMatrix> {
    let (k, ph, pw) = pred_masks.dim();
    let (m, gh, gw) = gt_masks.dim();
    if (ph, pw) != (gh, gw) {
        return Err(Error::Shape(format!(
            "predicted masks {:?} vs gt masks {:?}",
            pred_masks.dim(),
            gt_masks.dim()
        )));
    }
    let p: Vec<Vec<f64>> = pred_masks
        .axis_iter(Axis(0))
        .map(|l| l.iter().map(|&v| v as f64).collect())
        .collect();
    let g: Vec<Vec<f64>> = gt_masks
        .axis_iter(Axis(0))
        .map(|l| l.iter().map(|&v| v as f64).collect())
        .collect();
    Ok(CostMatrix::new(mask_costs_from_vectors(&p, &g, m, k)))
}

fn mask_costs_from_vectors(p: &[Vec<f64>], g: &[Vec<f64>], m: usize, k: usize) -> Array2<f64> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let pn: Vec<f64> = p.iter().map(|v| norm(v)).collect();
    let gn: Vec<f64> = g.iter().map(|v| norm(v)).collect();
    Array2::from_shape_fn((m, k), |(i, j)| {
        if pn[j] == 0.0 || gn[i] == 0.0 {
            return 0.0;
        }
        let dot: f64 = g[i].iter().zip(&p[j]).map(|(a, b)| a * b).sum();
        -dot / (gn[i] * pn[j])
    })
}

/// Loss matching costs with an explicit per-entry inclusion mask.
/// `predictions` is K×P, `targets` M×P.
pub fn loss_costs(
    predictions: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    schema: &PropertySchema,
    included: &[bool],
) -> Result<CostMatrix> {
    let p = schema.width();
    if predictions.ncols() != p || targets.ncols() != p {
        return Err(Error::Shape(format!(
            "prediction width {} / target width {} vs schema width {p}",
            predictions.ncols(),
            targets.ncols()
        )));
    }
    let predictions = predictions.as_standard_layout();
    let targets = targets.as_standard_layout();
    let (m, k) = (targets.nrows(), predictions.nrows());
    let costs = Array2::from_shape_fn((m, k), |(i, j)| {
        property_loss(
            predictions.row(j).as_slice().expect("standard layout"),
            targets.row(i).as_slice().expect("standard layout"),
            schema,
            included,
        )
    });
    Ok(CostMatrix::new(costs))
}

/// Loss matching costs restricted to the named properties.
pub fn loss_match_costs<'a, I>(
    predictions: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    schema: &PropertySchema,
    included: I,
) -> Result<CostMatrix>
where
    I: IntoIterator<Item = &'a str>,
{
    let mask = schema.mask_for(included)?;
    loss_costs(predictions, targets, schema, &mask)
}

fn compare_objects(a: &[f64], b: &[f64], schema: &PropertySchema) -> Ordering {
    for (i, e) in schema.entries().iter().enumerate() {
        let seg = schema.offset(i)..schema.offset(i) + e.kind.width();
        let ord = match e.kind {
            PropertyKind::Categorical { .. } => {
                argmax(a[seg.clone()].iter().copied()).cmp(&argmax(b[seg].iter().copied()))
            }
            PropertyKind::Numeric { .. } => a[seg.clone()]
                .iter()
                .zip(&b[seg])
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal),
        };
        if ord.is_ne() {
            return ord;
        }
    }
    Ordering::Equal
}

/// Object indices in deterministic order: in-distribution objects first,
/// then OOD objects; within each group lexicographically by the canonical
/// property tuple. The sort is stable. Slot `k` pairs with `order[k]`.
pub fn deterministic_order(targets: ArrayView2<f64>, schema: &PropertySchema, ood: &[bool]) -> Vec<usize> {
    let rows: Vec<Vec<f64>> = targets.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        let ga = ood.get(a).copied().unwrap_or(false);
        let gb = ood.get(b).copied().unwrap_or(false);
        ga.cmp(&gb).then_with(|| compare_objects(&rows[a], &rows[b], schema))
    });
    order
}

/// Pairs the `k`-th object of `order` with slot `k` for every
/// `k < min(M, K)`, costed with `costs`.
pub fn deterministic_match(order: &[usize], costs: &CostMatrix) -> Assignment {
    let k = costs.num_slots();
    let local: Vec<(usize, usize)> = order.iter().take(k).enumerate().map(|(slot, &obj)| (obj, slot)).collect();
    costs.assignment_from_local(&local)
}

/// Two-step matching for scenes containing OOD objects.
///
/// Step one matches every object on the properties in `globally_id` (those
/// in distribution for all objects) and keeps only the pairs of OOD objects.
/// Step two matches the remaining objects to the remaining slots on all
/// schema properties.
pub fn two_step_ood_match(
    predictions: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    schema: &PropertySchema,
    ood: &[bool],
    globally_id: &[bool],
) -> Result<Assignment> {
    let m = targets.nrows();
    let k = predictions.nrows();
    if ood.len() != m {
        return Err(Error::Shape(format!("{} ood flags for {m} objects", ood.len())));
    }
    if !globally_id.iter().any(|&b| b) {
        return Err(Error::Match(
            "two-step matching needs at least one property that is in distribution for every object".into(),
        ));
    }
    let n_ood = ood.iter().filter(|&&f| f).count();
    if n_ood > k {
        return Err(Error::Match(format!("{n_ood} OOD objects but only {k} slots")));
    }
    let restricted = loss_costs(predictions, targets, schema, globally_id)?;
    let first = hungarian(&restricted)?;
    let kept: Vec<(usize, usize)> = first.pairs.iter().copied().filter(|&(o, _)| ood[o]).collect();

    let full = loss_costs(predictions, targets, schema, &vec![true; schema.len()])?;
    let rest_rows: Vec<usize> = (0..m).filter(|o| !kept.iter().any(|p| p.0 == *o)).collect();
    let rest_cols: Vec<usize> = (0..k).filter(|s| !kept.iter().any(|p| p.1 == *s)).collect();
    let second = hungarian(&full.submatrix(&rest_rows, &rest_cols))?;

    let mut pairs = kept;
    pairs.extend(second.pairs);
    Ok(full.assignment_from_local(&pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PropertyEntry;
    use ndarray::{array, Array3};

    fn schema() -> PropertySchema {
        PropertySchema::new(vec![
            PropertyEntry {
                name: "shape".into(),
                kind: PropertyKind::Categorical { num_classes: 3 },
            },
            PropertyEntry {
                name: "pos".into(),
                kind: PropertyKind::Numeric { dims: 3 },
            },
        ])
        .unwrap()
    }

    #[test]
    fn mask_cost_examples() {
        let g = Array3::from_shape_vec((2, 2, 2), vec![1u8, 1, 0, 0, 0, 0, 1, 1]).unwrap();
        let p = g.mapv(|v| v as f32 * 0.5);
        let c = mask_match_costs(p.view(), g.view()).unwrap();
        assert!((c.costs[[0, 0]] + 1.0).abs() < 1e-12);
        assert!((c.costs[[1, 1]] + 1.0).abs() < 1e-12);
        assert_eq!(c.costs[[0, 1]], 0.0);
        let empty = Array3::<f32>::zeros((1, 2, 2));
        assert_eq!(mask_match_costs(empty.view(), g.view()).unwrap().costs, array![[0.0], [0.0]]);
    }

    #[test]
    fn loss_costs_examples() {
        let s = schema();
        // Correct class with a logit margin of 10 and exact numerics.
        let pred = array![[10.0, 0.0, 0.0, 0.5, 0.5, 0.5]];
        let tgt = array![[1.0, 0.0, 0.0, 0.5, 0.5, 0.5]];
        let c = loss_match_costs(pred.view(), tgt.view(), &s, ["shape", "pos"]).unwrap();
        let closed_form = (1.0 + 2.0 * (-10.0f64).exp()).ln();
        assert!((c.costs[[0, 0]] - closed_form).abs() < 1e-15);
        assert!(c.costs[[0, 0]] < 1e-4);

        let none = loss_match_costs(pred.view(), tgt.view(), &s, []).unwrap();
        assert_eq!(none.costs[[0, 0]], 0.0);

        let off = array![[10.0, 0.0, 0.0, 1.5, 1.5, 1.5]];
        let c = loss_match_costs(off.view(), tgt.view(), &s, ["pos"]).unwrap();
        assert_eq!(c.costs[[0, 0]], 1.0);

        assert!(matches!(
            loss_match_costs(pred.view(), tgt.view(), &s, ["color"]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn deterministic_order_rules() {
        let s = schema();
        let same = array![[1.0, 0.0, 0.0, 0.1, 0.2, 0.3], [1.0, 0.0, 0.0, 0.1, 0.2, 0.3]];
        assert_eq!(deterministic_order(same.view(), &s, &[false, false]), vec![0, 1]);

        let t = array![[0.0, 0.0, 1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.9, 0.9, 0.9]];
        assert_eq!(deterministic_order(t.view(), &s, &[false, false]), vec![1, 0]);

        // Object 2 has the smallest tuple but is OOD.
        let t = array![
            [0.0, 1.0, 0.0, 0.5, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.1, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        ];
        let ood = [false, false, true];
        let order = deterministic_order(t.view(), &s, &ood);
        let mut reference: Vec<usize> = (0..3).collect();
        reference.sort_by_key(|&i| (ood[i], argmax(t.row(i).iter().take(3).copied())));
        assert_eq!(order, reference);
        assert_eq!(order, vec![0, 1, 2]);
    }

    #[test]
    fn deterministic_match_takes_first_k() {
        let c = CostMatrix::new(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let a = deterministic_match(&[2, 0, 1], &c);
        assert_eq!(a.pairs, vec![(0, 1), (2, 0)]);
        assert_eq!(a.total_cost, 5.0 + 2.0);
    }

    #[test]
    fn two_step_without_ood_equals_plain() {
        let s = schema();
        let preds = array![
            [2.0, 0.0, 0.0, 0.1, 0.1, 0.1],
            [0.0, 2.0, 0.0, 0.5, 0.5, 0.5],
            [0.0, 0.0, 2.0, 0.9, 0.9, 0.9]
        ];
        let tgts = array![[0.0, 1.0, 0.0, 0.4, 0.5, 0.6], [1.0, 0.0, 0.0, 0.0, 0.2, 0.1]];
        let plain = hungarian(&loss_costs(preds.view(), tgts.view(), &s, &[true, true]).unwrap()).unwrap();
        let two = two_step_ood_match(preds.view(), tgts.view(), &s, &[false, false], &[false, true]).unwrap();
        assert_eq!(plain, two);
    }

    #[test]
    fn two_step_guards() {
        let s = schema();
        let preds = array![[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]];
        let tgts = array![[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0, 0.0, 0.0]];
        assert!(matches!(
            two_step_ood_match(preds.view(), tgts.view(), &s, &[true, false], &[false, false]),
            Err(Error::Match(_))
        ));
        assert!(matches!(
            two_step_ood_match(preds.view(), tgts.view(), &s, &[true, true], &[false, true]),
            Err(Error::Match(_))
        ));
    }
}
