//! Dummy coding of survey variables into design-matrix columns.
//!
//! Categorical variables with `m` levels expand to `m-1` indicator columns
//! for levels `1..m`, leaving level `m` as reference. A binary variable
//! coded 1/2 therefore enters as the single indicator `I(x = 1)`.

use crate::frame::{VariableKind, VariableSpec};

pub(crate) fn encoded_width(spec: &VariableSpec) -> usize {
    match spec.kind {
        VariableKind::Categorical { levels } => levels - 1,
        VariableKind::Continuous { .. } => 1,
    }
}

pub(crate) fn push_encoded(spec: &VariableSpec, value: f64, row: &mut Vec<f64>) {
    match spec.kind {
        VariableKind::Categorical { levels } => {
            let code = value as usize;
            for level in 1..levels {
                row.push(if code == level { 1.0 } else { 0.0 });
            }
        }
        VariableKind::Continuous { .. } => row.push(value),
    }
}
