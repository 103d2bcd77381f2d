//! Windowed next-sample predictor built around an [`MlpParams`] network.

use serde::{Deserialize, Serialize};

use super::mlp::{mlp_init, MlpParams};
use super::PredictorError;
use crate::trace_io::{Features, HapticSample, Trace, FEATURE_COUNT};

pub const DEFAULT_WINDOW: usize = 4;
pub const LEADER_DEPTH: usize = 12;
pub const FOLLOWER_DEPTH: usize = 8;
pub const HIDDEN_WIDTH: usize = 100;

/// Architecture of the two predictor networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Number of past samples fed to each network.
    pub window: usize,
    pub leader_depth: usize,
    pub follower_depth: usize,
    pub width: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            leader_depth: LEADER_DEPTH,
            follower_depth: FOLLOWER_DEPTH,
            width: HIDDEN_WIDTH,
        }
    }
}

impl NetworkConfig {
    pub fn input_dim(&self) -> usize {
        self.window * FEATURE_COUNT
    }

    pub fn leader_net(&self, seed: u64) -> Result<MlpParams, PredictorError> {
        mlp_init(
            self.leader_depth,
            self.width,
            self.input_dim(),
            FEATURE_COUNT,
            seed,
        )
    }

    pub fn follower_net(&self, seed: u64) -> Result<MlpParams, PredictorError> {
        mlp_init(
            self.follower_depth,
            self.width,
            self.input_dim(),
            FEATURE_COUNT,
            seed,
        )
    }
}

/// What the network output represents before de-normalisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// The next sample itself.
    Absolute,
    /// The change from the last sample in the window to the next one.
    Delta,
}

/// Per-feature affine maps applied around the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub input_mean: Features,
    pub input_scale: Features,
    pub target_mean: Features,
    pub target_scale: Features,
}

impl Normalizer {
    pub fn identity() -> Self {
        Self {
            input_mean: [0.0; FEATURE_COUNT],
            input_scale: [1.0; FEATURE_COUNT],
            target_mean: [0.0; FEATURE_COUNT],
            target_scale: [1.0; FEATURE_COUNT],
        }
    }

    /// Mean and standard deviation of the inputs and of the chosen target
    /// over a training trace. Features without variance get scale 0: their
    /// standardised inputs and targets are 0 and the decoded target is the
    /// training mean.
    pub fn fit(trace: &Trace, target: TargetMode) -> Self {
        let feats = trace.features();
        let (input_mean, input_scale) = mean_std(feats.iter().copied());
        let targets = feats.windows(2).map(|w| match target {
            TargetMode::Absolute => w[1],
            TargetMode::Delta => std::array::from_fn(|k| w[1][k] - w[0][k]),
        });
        let (target_mean, target_scale) = mean_std(targets);
        Self {
            input_mean,
            input_scale,
            target_mean,
            target_scale,
        }
    }
}

fn mean_std(rows: impl Iterator<Item = Features> + Clone) -> (Features, Features) {
    let n = rows.clone().count().max(1) as f64;
    let mut mean = [0.0; FEATURE_COUNT];
    for r in rows.clone() {
        for k in 0..FEATURE_COUNT {
            mean[k] += r[k] / n;
        }
    }
    let mut var = [0.0; FEATURE_COUNT];
    for r in rows {
        for k in 0..FEATURE_COUNT {
            var[k] += (r[k] - mean[k]).powi(2) / n;
        }
    }
    let scale = std::array::from_fn(|k| {
        let s = var[k].sqrt();
        if s > 1e-12 * mean[k].abs().max(1e-12) {
            s
        } else {
            0.0
        }
    });
    (mean, scale)
}

/// `(x - mean) / scale`, or 0 for a frozen (scale 0) feature.
#[inline]
fn standardise(x: f64, mean: f64, scale: f64) -> f64 {
    if scale == 0.0 {
        0.0
    } else {
        (x - mean) / scale
    }
}

/// Normalised training pairs: flattened input windows and next-sample targets.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowDataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// A network together with its input window length and normalisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    net: MlpParams,
    window: usize,
    normalizer: Normalizer,
    target: TargetMode,
}

impl Predictor {
    /// Raw predictor: identity normalisation, network output is the next
    /// sample directly.
    pub fn new(net: MlpParams, window: usize) -> Result<Self, PredictorError> {
        Self::with_parts(net, window, Normalizer::identity(), TargetMode::Absolute)
    }

    pub fn with_parts(
        net: MlpParams,
        window: usize,
        normalizer: Normalizer,
        target: TargetMode,
    ) -> Result<Self, PredictorError> {
        if window == 0 || net.in_dim() != window * FEATURE_COUNT || net.out_dim() != FEATURE_COUNT {
            return Err(PredictorError::InvalidDims(format!(
                "window {window} needs a {}->{FEATURE_COUNT} network, got {}->{}",
                window * FEATURE_COUNT,
                net.in_dim(),
                net.out_dim()
            )));
        }
        Ok(Self {
            net,
            window,
            normalizer,
            target,
        })
    }

    /// Predictor that learns standardised next-sample changes, with
    /// statistics taken from `trace`.
    pub fn fitted(net: MlpParams, window: usize, trace: &Trace) -> Result<Self, PredictorError> {
        let normalizer = Normalizer::fit(trace, TargetMode::Delta);
        Self::with_parts(net, window, normalizer, TargetMode::Delta)
    }

    pub fn net(&self) -> &MlpParams {
        &self.net
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn target(&self) -> TargetMode {
        self.target
    }

    /// Same predictor with a different network of identical shape.
    pub fn with_net(&self, net: MlpParams) -> Result<Self, PredictorError> {
        if net.dims() != self.net.dims() {
            return Err(PredictorError::ShapeMismatch);
        }
        Ok(Self {
            net,
            ..self.clone()
        })
    }

    /// Network input for a window (oldest first).
    ///
    /// Absolute predictors see every sample standardised. Delta predictors
    /// see the `W - 1` consecutive one-step changes, scaled like the
    /// targets, followed by the standardised last sample, so the same
    /// motion looks the same wherever it happens.
    pub fn encode_window(&self, window: &[Features]) -> Vec<f64> {
        let n = &self.normalizer;
        let mut out = Vec::with_capacity(window.len() * FEATURE_COUNT);
        let push_standardised = |out: &mut Vec<f64>, f: &Features| {
            out.extend(
                (0..FEATURE_COUNT).map(|k| standardise(f[k], n.input_mean[k], n.input_scale[k])),
            );
        };
        match self.target {
            TargetMode::Absolute => window.iter().for_each(|f| push_standardised(&mut out, f)),
            TargetMode::Delta => {
                for w in window.windows(2) {
                    out.extend(
                        (0..FEATURE_COUNT)
                            .map(|k| standardise(w[1][k] - w[0][k], 0.0, n.target_scale[k])),
                    );
                }
                if let Some(last) = window.last() {
                    push_standardised(&mut out, last);
                }
            }
        }
        out
    }

    pub fn encode_target(&self, last: &Features, next: &Features) -> Vec<f64> {
        let n = &self.normalizer;
        (0..FEATURE_COUNT)
            .map(|k| {
                let raw = match self.target {
                    TargetMode::Absolute => next[k],
                    TargetMode::Delta => next[k] - last[k],
                };
                standardise(raw, n.target_mean[k], n.target_scale[k])
            })
            .collect()
    }

    pub fn decode_output(&self, output: &[f64], last: &Features) -> Features {
        let n = &self.normalizer;
        std::array::from_fn(|k| {
            let raw = n.target_mean[k] + n.target_scale[k] * output[k];
            match self.target {
                TargetMode::Absolute => raw,
                TargetMode::Delta => last[k] + raw,
            }
        })
    }

    /// Inference-mode prediction of the sample following `window`
    /// (oldest first).
    pub fn predict_features(&self, window: &[Features]) -> Result<Features, PredictorError> {
        if window.len() != self.window {
            return Err(PredictorError::WrongWindowLength {
                expected: self.window,
                got: window.len(),
            });
        }
        let out = self.net.infer(&self.encode_window(window))?;
        Ok(self.decode_output(&out, &window[window.len() - 1]))
    }

    /// Every `(window, next sample)` pair of a trace, normalised.
    pub fn dataset(&self, trace: &Trace) -> Result<WindowDataset, PredictorError> {
        let feats = trace.features();
        if feats.len() <= self.window {
            return Err(PredictorError::InsufficientHistory {
                needed: self.window + 1,
                got: feats.len(),
            });
        }
        let (inputs, targets) = (self.window..feats.len())
            .map(|i| {
                let w = &feats[i - self.window..i];
                (
                    self.encode_window(w),
                    self.encode_target(&w[self.window - 1], &feats[i]),
                )
            })
            .unzip();
        Ok(WindowDataset { inputs, targets })
    }
}

/// Predicts the feature vector of the sample that follows `window`.
pub fn predict_next(
    predictor: &Predictor,
    window: &[HapticSample],
) -> Result<Features, PredictorError> {
    let feats: Vec<Features> = window.iter().map(HapticSample::features).collect();
    predictor.predict_features(&feats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::mlp::Activation;
    use crate::trace_io::{generate_synthetic_trace, MovementKind};

    #[test]
    fn zero_net_predicts_zero() {
        let net = MlpParams::zeros(&[36, 100, 9], Activation::Relu).unwrap();
        let p = Predictor::new(net, 4).unwrap();
        let trace = generate_synthetic_trace(MovementKind::Drag, 10, 1000.0, 1).unwrap();
        assert_eq!(predict_next(&p, &trace.samples()[..4]).unwrap(), [0.0; 9]);
    }

    #[test]
    fn wrong_window_length() {
        let p = Predictor::new(NetworkConfig::default().follower_net(0).unwrap(), 4).unwrap();
        let trace = generate_synthetic_trace(MovementKind::Drag, 10, 1000.0, 1).unwrap();
        assert!(matches!(
            predict_next(&p, &trace.samples()[..3]),
            Err(PredictorError::WrongWindowLength {
                expected: 4,
                got: 3
            })
        ));
    }

    #[test]
    fn mismatched_network_rejected() {
        let net = mlp_init(2, 8, 9, 9, 0).unwrap();
        assert!(matches!(
            Predictor::new(net, 4),
            Err(PredictorError::InvalidDims(_))
        ));
    }

    #[test]
    fn delta_target_round_trip() {
        let trace = generate_synthetic_trace(MovementKind::Tapping, 200, 1000.0, 3).unwrap();
        let p = Predictor::fitted(NetworkConfig::default().follower_net(0).unwrap(), 4, &trace)
            .unwrap();
        let f = trace.features();
        let enc = p.encode_target(&f[10], &f[11]);
        let dec = p.decode_output(&enc, &f[10]);
        for k in 0..9 {
            assert!((dec[k] - f[11][k]).abs() < 1e-12);
        }
        assert_eq!(p.dataset(&trace).unwrap().len(), 196);
    }
}
