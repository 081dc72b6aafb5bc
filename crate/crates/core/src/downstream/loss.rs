//! Per-object prediction loss: softmax cross-entropy for categorical
//! segments, squared error averaged over dimensions for numeric segments,
//! summed over the included properties.

use crate::data::{PropertyKind, PropertySchema};
use crate::error::{Error, Result};

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn segment_loss(kind: PropertyKind, out: &[f64], tgt: &[f64]) -> f64 {
    match kind {
        PropertyKind::Categorical { .. } => {
            let lse = log_sum_exp(out);
            tgt.iter().zip(out).map(|(t, o)| t * (lse - o)).sum()
        }
        PropertyKind::Numeric { dims } => {
            out.iter().zip(tgt).map(|(o, t)| (o - t) * (o - t)).sum::<f64>() / dims as f64
        }
    }
}

/// Loss of one prediction against one target; `included[i]` selects schema entry `i`.
pub fn property_loss(output: &[f64], target: &[f64], schema: &PropertySchema, included: &[bool]) -> f64 {
    schema
        .entries()
        .iter()
        .enumerate()
        .filter(|(i, _)| included[*i])
        .map(|(i, e)| {
            let seg = schema.offset(i)..schema.offset(i) + e.kind.width();
            segment_loss(e.kind, &output[seg.clone()], &target[seg])
        })
        .sum()
}

/// Like [`property_loss`], additionally accumulating `scale * dL/d(output)` into `grad`.
pub fn property_loss_grad(
    output: &[f64],
    target: &[f64],
    schema: &PropertySchema,
    included: &[bool],
    grad: &mut [f64],
    scale: f64,
) -> f64 {
    let mut total = 0.0;
    for (i, e) in schema.entries().iter().enumerate() {
        if !included[i] {
            continue;
        }
        let seg = schema.offset(i)..schema.offset(i) + e.kind.width();
        let out = &output[seg.clone()];
        let tgt = &target[seg.clone()];
        let g = &mut grad[seg];
        total += segment_loss(e.kind, out, tgt);
        match e.kind {
            PropertyKind::Categorical { .. } => {
                let lse = log_sum_exp(out);
                let mass: f64 = tgt.iter().sum();
                for ((gi, o), t) in g.iter_mut().zip(out).zip(tgt) {
                    *gi += scale * ((o - lse).exp() * mass - t);
                }
            }
            PropertyKind::Numeric { dims } => {
                for ((gi, o), t) in g.iter_mut().zip(out).zip(tgt) {
                    *gi += scale * 2.0 * (o - t) / dims as f64;
                }
            }
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// One entry per included property, in schema order.
    pub per_property: Vec<(String, f64)>,
}

/// Loss restricted to the named properties, with a per-property breakdown.
pub fn loss<'a, I>(output: &[f64], target: &[f64], schema: &PropertySchema, included: I) -> Result<LossBreakdown>
where
    I: IntoIterator<Item = &'a str>,
{
    let w = schema.width();
    if output.len() != w || target.len() != w {
        return Err(Error::Shape(format!(
            "output width {} / target width {} vs schema width {w}",
            output.len(),
            target.len()
        )));
    }
    let mask = schema.mask_for(included)?;
    let per_property: Vec<(String, f64)> = schema
        .entries()
        .iter()
        .enumerate()
        .filter(|(i, _)| mask[*i])
        .map(|(i, e)| {
            let seg = schema.offset(i)..schema.offset(i) + e.kind.width();
            (e.name.clone(), segment_loss(e.kind, &output[seg.clone()], &target[seg]))
        })
        .collect();
    Ok(LossBreakdown {
        total: per_property.iter().map(|p| p.1).sum(),
        per_property,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PropertyEntry;

    fn schema() -> PropertySchema {
        PropertySchema::new(vec![
            PropertyEntry {
                name: "shape".into(),
                kind: PropertyKind::Categorical { num_classes: 4 },
            },
            PropertyEntry {
                name: "pos".into(),
                kind: PropertyKind::Numeric { dims: 3 },
            },
        ])
        .unwrap()
    }

    #[test]
    fn uniform_logits_give_ln4() {
        let out = [0.3, 0.3, 0.3, 0.3, 0.0, 0.0, 0.0];
        let tgt = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let l = loss(&out, &tgt, &schema(), ["shape"]).unwrap();
        assert!((l.total - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn numeric_terms() {
        let tgt = [1.0, 0.0, 0.0, 0.0, 0.2, 0.4, 0.6];
        let exact = [0.0, 0.0, 0.0, 0.0, 0.2, 0.4, 0.6];
        assert_eq!(loss(&exact, &tgt, &schema(), ["pos"]).unwrap().total, 0.0);
        let off = [0.0, 0.0, 0.0, 0.0, 1.2, 1.4, 1.6];
        let l = loss(&off, &tgt, &schema(), ["pos"]).unwrap();
        assert!((l.total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn breakdown_and_errors() {
        let tgt = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let out = [0.0; 7];
        let l = loss(&out, &tgt, &schema(), ["shape", "pos"]).unwrap();
        assert_eq!(l.per_property.len(), 2);
        assert_eq!(l.per_property[1], ("pos".to_string(), 0.0));
        assert!(matches!(loss(&out, &tgt, &schema(), ["size"]), Err(Error::Config(_))));
        assert!(matches!(loss(&out[..3], &tgt, &schema(), ["shape"]), Err(Error::Shape(_))));
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let s = schema();
        let out = [0.5, -1.0, 2.0, 0.1, 0.3, -0.2, 0.9];
        let tgt = [0.0, 1.0, 0.0, 0.0, 0.1, 0.2, 0.3];
        let inc = [true, true];
        let mut g = [0.0; 7];
        property_loss_grad(&out, &tgt, &s, &inc, &mut g, 1.0);
        for i in 0..7 {
            let mut p = out;
            let mut m = out;
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (property_loss(&p, &tgt, &s, &inc) - property_loss(&m, &tgt, &s, &inc)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8, "coord {i}: {fd} vs {}", g[i]);
        }
    }
}
