//! Flat parameter-vector arithmetic.
//!
//! All model exchange and aggregation happens over [`ParamVector`], a flat
//! `f64` array. Accumulation order is fixed left-to-right in every operation
//! so identical inputs produce bit-identical outputs on every run.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// A flat vector of model parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// True when every entry is finite (no NaN/Inf).
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}

fn check_len(a: &ParamVector, b: &ParamVector) -> Result<()> {
    if a.len() != b.len() {
        return Err(SimError::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

/// Inner product, accumulated left-to-right.
pub fn dot(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    check_len(a, b)?;
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    Ok(acc)
}

/// Euclidean norm.
pub fn norm(a: &ParamVector) -> f64 {
    let mut acc = 0.0;
    for x in a.iter() {
        acc += x * x;
    }
    acc.sqrt()
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]` to absorb
/// rounding. A zero-norm operand yields 0 (neutral).
pub fn cosine_similarity(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    check_len(a, b)?;
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(a, b)? / (na * nb)).clamp(-1.0, 1.0))
}

/// Elementwise `a - b`.
pub fn sub(a: &ParamVector, b: &ParamVector) -> Result<ParamVector> {
    check_len(a, b)?;
    Ok(ParamVector(
        a.iter().zip(b.iter()).map(|(x, y)| x - y).collect(),
    ))
}

/// Weighted sum of parameter vectors, term order as given.
pub fn weighted_sum(terms: &[(f64, &ParamVector)]) -> Result<ParamVector> {
    let (_, first) = terms.first().ok_or(SimError::EmptyBuffer)?;
    let mut out = vec![0.0; first.len()];
    for (w, v) in terms {
        check_len(first, v)?;
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += w * x;
        }
    }
    Ok(ParamVector(out))
}

/// Convex blend `(1 - theta) * global + theta * fresh`.
pub fn mix(global: &ParamVector, fresh: &ParamVector, theta: f64) -> Result<ParamVector> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(SimError::Config(format!(
            "mixing coefficient must lie in [0, 1], got {theta}"
        )));
    }
    check_len(global, fresh)?;
    Ok(ParamVector(
        global
            .iter()
            .zip(fresh.iter())
            .map(|(g, f)| (1.0 - theta) * g + theta * f)
            .collect(),
    ))
}
