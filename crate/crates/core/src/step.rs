use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Right-continuous piecewise-constant function of time.
///
/// `eval(t)` is the value at the largest knot `<= t`, or `left_value`
/// before the first knot. Past the last knot the last value is held.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    knots: Vec<f64>,
    values: Vec<f64>,
    left_value: f64,
}

impl StepFunction {
    pub fn new(knots: Vec<f64>, values: Vec<f64>, left_value: f64) -> Result<Self> {
        if knots.len() != values.len() {
            return Err(invalid(format!(
                "{} knots but {} values",
                knots.len(),
                values.len()
            )));
        }
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(invalid("non-finite knot"));
        }
        if knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("knots must be strictly increasing"));
        }
        Ok(Self {
            knots,
            values,
            left_value,
        })
    }

    pub fn constant(value: f64) -> Self {
        Self {
            knots: Vec::new(),
            values: Vec::new(),
            left_value: value,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let i = self.knots.partition_point(|&k| k <= t);
        if i == 0 {
            self.left_value
        } else {
            self.values[i - 1]
        }
    }

    /// Left limit `f(t-)`: value at the largest knot strictly below `t`.
    pub fn left_limit(&self, t: f64) -> f64 {
        let i = self.knots.partition_point(|&k| k < t);
        if i == 0 {
            self.left_value
        } else {
            self.values[i - 1]
        }
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn left_value(&self) -> f64 {
        self.left_value
    }

    /// Applies `f` to every value, keeping the knots.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            knots: self.knots.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            left_value: f(self.left_value),
        }
    }
}
