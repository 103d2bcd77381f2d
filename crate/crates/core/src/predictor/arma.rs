//! Autoregressive moving-average next-value baseline.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::PredictorError;

/// `omega` are the autoregressive weights on past values, `lambda` the
/// moving-average weights on past one-step residuals; index 0 is lag 1.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ArmaParams {
    pub omega: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl ArmaParams {
    /// Zero-order hold: the next value repeats the last one.
    pub fn hold() -> Self {
        Self {
            omega: vec![1.0],
            lambda: Vec::new(),
        }
    }
}

/// One-step forecast `sum_i omega_i * s[n+1-i] + sum_j lambda_j * e[n+1-j]`.
///
/// `history` and `errors` are ordered oldest first, so the most recent value
/// is the last element. Residuals that are not yet observed should be passed
/// as zero.
pub fn arma_predict(
    params: &ArmaParams,
    history: &[f64],
    errors: &[f64],
) -> Result<f64, PredictorError> {
    if history.len() < params.omega.len() {
        return Err(PredictorError::InsufficientHistory {
            needed: params.omega.len(),
            got: history.len(),
        });
    }
    if errors.len() < params.lambda.len() {
        return Err(PredictorError::InsufficientHistory {
            needed: params.lambda.len(),
            got: errors.len(),
        });
    }
    let ar: f64 = params
        .omega
        .iter()
        .zip(history.iter().rev())
        .map(|(w, s)| w * s)
        .sum();
    let ma: f64 = params
        .lambda
        .iter()
        .zip(errors.iter().rev())
        .map(|(l, e)| l * e)
        .sum();
    Ok(ar + ma)
}

fn least_squares(rows: &[Vec<f64>], targets: &[f64]) -> Option<Vec<f64>> {
    let cols = rows.first()?.len();
    if cols == 0 {
        return Some(Vec::new());
    }
    let x = DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c]);
    let y = DVector::from_column_slice(targets);
    let mut gram = x.transpose() * &x;
    let ridge = 1e-10 * (gram.trace() / cols as f64).max(1e-300);
    for i in 0..cols {
        gram[(i, i)] += ridge;
    }
    let rhs = x.transpose() * y;
    let sol = gram.cholesky()?.solve(&rhs);
    sol.iter()
        .all(|v| v.is_finite())
        .then(|| sol.iter().copied().collect())
}

/// Hannan-Rissanen two-stage fit: a long autoregression supplies residual
/// estimates, then values and residuals are regressed jointly.
pub fn fit_arma(
    series: &[f64],
    ar_order: usize,
    ma_order: usize,
) -> Result<ArmaParams, PredictorError> {
    let long = if ma_order > 0 {
        (ar_order.max(ma_order) + 8).max(10)
    } else {
        0
    };
    let start = long.max(ar_order) + ma_order;
    if series.len() < start + 2 * (ar_order + ma_order).max(1) {
        return Err(PredictorError::InsufficientHistory {
            needed: start + 2 * (ar_order + ma_order).max(1),
            got: series.len(),
        });
    }

    let mut residuals = vec![0.0; series.len()];
    if ma_order > 0 {
        let rows: Vec<Vec<f64>> = (long..series.len())
            .map(|t| (1..=long).map(|i| series[t - i]).collect())
            .collect();
        let phi = least_squares(&rows, &series[long..]).ok_or(PredictorError::SingularFit)?;
        for t in long..series.len() {
            let pred: f64 = (1..=long).map(|i| phi[i - 1] * series[t - i]).sum();
            residuals[t] = series[t] - pred;
        }
    }

    let rows: Vec<Vec<f64>> = (start..series.len())
        .map(|t| {
            (1..=ar_order)
                .map(|i| series[t - i])
                .chain((1..=ma_order).map(|j| residuals[t - j]))
                .collect()
        })
        .collect();
    let beta = least_squares(&rows, &series[start..]).ok_or(PredictorError::SingularFit)?;
    Ok(ArmaParams {
        omega: beta[..ar_order].to_vec(),
        lambda: beta[ar_order..].to_vec(),
    })
}

/// Streaming forecaster that tracks its own history and residuals.
#[derive(Debug, Clone)]
pub struct ArmaForecaster {
    params: ArmaParams,
    history: VecDeque<f64>,
    residuals: VecDeque<f64>,
}

impl ArmaForecaster {
    pub fn new(params: ArmaParams) -> Self {
        Self {
            params,
            history: VecDeque::new(),
            residuals: VecDeque::new(),
        }
    }

    pub fn params(&self) -> &ArmaParams {
        &self.params
    }

    /// Forecast of the next value; falls back to holding the last value (or
    /// zero) until enough history is available.
    pub fn forecast(&self) -> f64 {
        let history: Vec<f64> = self.history.iter().copied().collect();
        let residuals: Vec<f64> = self.residuals.iter().copied().collect();
        arma_predict(&self.params, &history, &residuals)
            .unwrap_or_else(|_| history.last().copied().unwrap_or(0.0))
    }

    /// Records a delivered value and its residual against the forecast.
    pub fn observe(&mut self, value: f64) {
        let residual = if self.history.len() >= self.params.omega.len() {
            value - self.forecast()
        } else {
            0.0
        };
        self.push(value, residual);
    }

    /// Records a value that was substituted rather than measured; its
    /// residual is unknown and taken as zero.
    pub fn substitute(&mut self, value: f64) {
        self.push(value, 0.0);
    }

    fn push(&mut self, value: f64, residual: f64) {
        let keep = self.params.omega.len().max(1);
        self.history.push_back(value);
        while self.history.len() > keep {
            self.history.pop_front();
        }
        self.residuals.push_back(residual);
        while self.residuals.len() > self.params.lambda.len() {
            self.residuals.pop_front();
        }
    }
}
