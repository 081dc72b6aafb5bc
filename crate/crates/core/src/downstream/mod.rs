//! Property-prediction probes trained on frozen representations.

pub mod baseline;
pub mod eval;
pub mod loss;
pub mod mlp;
pub mod train;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use baseline::{analytic_baseline, analytic_constant, baseline_constant, BaselineMode};
pub use eval::{evaluate_probe, predict, GroupScore, ProbeScores, PropertyScore, ScoreKind};
pub use loss::{loss, LossBreakdown};
pub use mlp::{backward, forward, forward_cached, forward_one, Adam, PredictorConfig, PredictorParams, ProbeLayout};
pub use train::{train_probe, TrainConfig, TrainLog};

use crate::data::{PropertyKind, PropertySchema};
use crate::error::{Error, Result};

/// The value of one property of one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PropertyValue {
    Class(usize),
    Values(Vec<f64>),
}

/// Encodes one object: categorical values one-hot, numeric values raw, in
/// schema order.
pub fn encode_object(values: &[PropertyValue], schema: &PropertySchema) -> Result<Vec<f64>> {
    if values.len() != schema.len() {
        return Err(Error::Shape(format!("{} values for {} properties", values.len(), schema.len())));
    }
    let mut out = Vec::with_capacity(schema.width());
    for (e, v) in schema.entries().iter().zip(values) {
        match (e.kind, v) {
            (PropertyKind::Categorical { num_classes }, PropertyValue::Class(c)) if *c < num_classes => {
                out.extend((0..num_classes).map(|j| if j == *c { 1.0 } else { 0.0 }));
            }
            (PropertyKind::Numeric { dims }, PropertyValue::Values(xs)) if xs.len() == dims => {
                out.extend_from_slice(xs);
            }
            _ => {
                return Err(Error::Shape(format!("value {v:?} does not fit property {:?}", e.name)));
            }
        }
    }
    Ok(out)
}

/// Target matrix with one row of width P per object.
pub fn encode_targets(objects: &[Vec<PropertyValue>], schema: &PropertySchema) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((objects.len(), schema.width()));
    for (r, o) in objects.iter().enumerate() {
        out.row_mut(r).assign(&ndarray::Array1::from(encode_object(o, schema)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{presets, PropertyEntry};

    #[test]
    fn layout_example() {
        let schema = PropertySchema::new(vec![
            PropertyEntry {
                name: "shape".into(),
                kind: PropertyKind::Categorical { num_classes: 3 },
            },
            PropertyEntry {
                name: "x".into(),
                kind: PropertyKind::Numeric { dims: 1 },
            },
        ])
        .unwrap();
        let t = encode_targets(&[vec![PropertyValue::Class(2), PropertyValue::Values(vec![0.25])]], &schema).unwrap();
        assert_eq!(t.row(0).to_vec(), vec![0.0, 0.0, 1.0, 0.25]);
        assert!(encode_targets(&[vec![PropertyValue::Class(3), PropertyValue::Values(vec![0.0])]], &schema).is_err());
        assert!(encode_targets(&[vec![PropertyValue::Class(0)]], &schema).is_err());
    }

    #[test]
    fn empty_schema_and_clevr_width() {
        let t = encode_targets(&[vec![], vec![]], &PropertySchema::empty()).unwrap();
        assert_eq!(t.dim(), (2, 0));
        assert_eq!(presets::clevr().width(), 17);
    }
}
