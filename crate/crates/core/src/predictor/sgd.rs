use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mlp::{mlp_backward_accumulate, mlp_forward, DropoutMask, Gradients, MlpParams};
use super::model::WindowDataset;
use super::PredictorError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Applied to the follower's hidden layers only.
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            dropout_rate: 0.2,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), PredictorError> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.batch_size > 0
            && (0.0..1.0).contains(&self.dropout_rate);
        if ok {
            Ok(())
        } else {
            Err(PredictorError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// Momentum buffer matching a network's parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub velocity: Gradients,
}

impl MomentumState {
    pub fn new(params: &MlpParams) -> Self {
        Self {
            velocity: Gradients::zeros_like(params),
        }
    }
}

/// Heavy-ball update: `v <- momentum * v - lr * g`, then `theta <- theta + v`.
pub fn sgd_step(
    params: &mut MlpParams,
    grads: &Gradients,
    state: &mut MomentumState,
    cfg: &SgdConfig,
) -> Result<(), PredictorError> {
    let dims = params.dims();
    if grads.dims() != dims || state.velocity.dims() != dims {
        return Err(PredictorError::ShapeMismatch);
    }
    let (lr, mu) = (cfg.learning_rate, cfg.momentum);
    for ((layer, g), v) in params
        .layers_mut()
        .iter_mut()
        .zip(&grads.layers)
        .zip(state.velocity.layers.iter_mut())
    {
        for ((w, gw), vw) in layer
            .weights
            .iter_mut()
            .zip(&g.weights)
            .zip(v.weights.iter_mut())
        {
            *vw = mu * *vw - lr * gw;
            *w += *vw;
        }
        for ((b, gb), vb) in layer.bias.iter_mut().zip(&g.bias).zip(v.bias.iter_mut()) {
            *vb = mu * *vb - lr * gb;
            *b += *vb;
        }
    }
    Ok(())
}

/// Per-sample gradients are summed in fixed-size chunks and the chunk sums
/// are reduced in index order, so results do not depend on thread count.
const CHUNK: usize = 8;

/// Mean squared error (averaged over samples and outputs) on the selected
/// rows, in inference mode.
pub fn mse_loss(
    params: &MlpParams,
    data: &WindowDataset,
    rows: &[usize],
) -> Result<f64, PredictorError> {
    if rows.is_empty() {
        return Ok(0.0);
    }
    let partial: Result<Vec<f64>, PredictorError> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut s = 0.0;
            for &r in chunk {
                let out = params.infer(&data.inputs[r])?;
                s += out
                    .iter()
                    .zip(&data.targets[r])
                    .map(|(y, t)| (y - t).powi(2))
                    .sum::<f64>();
            }
            Ok(s)
        })
        .collect();
    let total: f64 = partial?.iter().sum();
    Ok(total / (rows.len() * params.out_dim()) as f64)
}

/// Loss and gradient of the mean squared error over `rows`, optionally with
/// one dropout mask per row (same order as `rows`).
pub fn mse_gradient(
    params: &MlpParams,
    data: &WindowDataset,
    rows: &[usize],
    masks: Option<&[DropoutMask]>,
) -> Result<(f64, Gradients), PredictorError> {
    if let Some(m) = masks {
        if m.len() != rows.len() {
            return Err(PredictorError::ShapeMismatch);
        }
    }
    if rows.is_empty() {
        return Ok((0.0, Gradients::zeros_like(params)));
    }
    let norm = 1.0 / (rows.len() * params.out_dim()) as f64;
    let partial: Result<Vec<(f64, Gradients)>, PredictorError> = rows
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut grads = Gradients::zeros_like(params);
            let mut loss = 0.0;
            for (k, &r) in chunk.iter().enumerate() {
                let mask = masks.map(|m| &m[c * CHUNK + k]);
                let (out, cache) = mlp_forward(params, &data.inputs[r], mask)?;
                let g: Vec<f64> = out
                    .iter()
                    .zip(&data.targets[r])
                    .map(|(y, t)| {
                        loss += (y - t).powi(2);
                        2.0 * (y - t) * norm
                    })
                    .collect();
                mlp_backward_accumulate(params, &cache, &g, &mut grads)?;
            }
            Ok((loss, grads))
        })
        .collect();
    let mut parts = partial?.into_iter();
    let (mut loss, mut grads) = parts.next().expect("non-empty");
    for (l, g) in parts {
        loss += l;
        grads.add_assign(&g);
    }
    Ok((loss * norm, grads))
}
