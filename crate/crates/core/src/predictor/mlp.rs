use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::PredictorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Dense layer, weights stored row-major as `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    #[inline]
    pub fn row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.in_dim..(o + 1) * self.in_dim]
    }

    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..self.out_dim).map(|o| {
            self.bias[o]
                + self
                    .row(o)
                    .iter()
                    .zip(input)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
        }));
    }
}

/// Fully connected network: rectifier (or identity) on hidden layers, identity
/// on the output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layers: Vec<Layer>,
    hidden_activation: Activation,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>, hidden_activation: Activation) -> Result<Self, PredictorError> {
        if layers.is_empty() {
            return Err(PredictorError::InvalidDims(
                "network needs at least one layer".into(),
            ));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(PredictorError::InvalidDims(format!(
                    "layer {i} has a zero dimension"
                )));
            }
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(PredictorError::InvalidDims(format!(
                    "layer {i} storage does not match its dims"
                )));
            }
            if i > 0 && layers[i - 1].out_dim != l.in_dim {
                return Err(PredictorError::InvalidDims(format!(
                    "layer {i} expects {} inputs but layer {} emits {}",
                    l.in_dim,
                    i - 1,
                    layers[i - 1].out_dim
                )));
            }
            if !l.weights.iter().chain(&l.bias).all(|x| x.is_finite()) {
                return Err(PredictorError::NonFiniteParameter);
            }
        }
        Ok(Self {
            layers,
            hidden_activation,
        })
    }

    /// All-zero network with the given layer widths (`dims[0]` is the input).
    pub fn zeros(dims: &[usize], hidden_activation: Activation) -> Result<Self, PredictorError> {
        if dims.len() < 2 {
            return Err(PredictorError::InvalidDims(
                "need input and output dims".into(),
            ));
        }
        let layers = dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Self::new(layers, hidden_activation)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access for in-place optimiser updates; shapes must not change.
    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// `(in_dim, out_dim)` of every layer.
    pub fn dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.in_dim, l.out_dim)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Flat parameter vector: per layer, row-major weights then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            flat.extend_from_slice(&l.weights);
            flat.extend_from_slice(&l.bias);
        }
        flat
    }

    /// Copy of `self` with parameters taken from a flat vector in
    /// [`MlpParams::to_flat`] order.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self, PredictorError> {
        if flat.len() != self.param_count() {
            return Err(PredictorError::ShapeMismatch);
        }
        let mut out = self.clone();
        let mut offset = 0;
        for l in &mut out.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|x| x.is_finite()))
    }

    /// Inference-mode forward pass without caching.
    pub fn infer(&self, input: &[f64]) -> Result<Vec<f64>, PredictorError> {
        if input.len() != self.in_dim() {
            return Err(PredictorError::InputDims {
                expected: self.in_dim(),
                got: input.len(),
            });
        }
        if !input.iter().all(|x| x.is_finite()) {
            return Err(PredictorError::NonFiniteInput);
        }
        let mut a = input.to_vec();
        let mut z = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine(&a, &mut z);
            if i < last {
                for v in z.iter_mut() {
                    *v = self.hidden_activation.apply(*v);
                }
            }
            std::mem::swap(&mut a, &mut z);
        }
        Ok(a)
    }
}

/// He (Kaiming) initialisation: weights ~ N(0, 2 / fan_in), biases zero.
///
/// `depth` counts weight layers: one layer maps `in_dim -> out_dim`
/// directly; otherwise the first maps to `width`, `depth - 2` hidden layers
/// keep `width`, and the last maps to `out_dim`.
pub fn mlp_init(
    depth: usize,
    width: usize,
    in_dim: usize,
    out_dim: usize,
    seed: u64,
) -> Result<MlpParams, PredictorError> {
    if depth == 0 || in_dim == 0 || out_dim == 0 || (depth > 1 && width == 0) {
        return Err(PredictorError::InvalidDims(format!(
            "depth={depth} width={width} in={in_dim} out={out_dim}"
        )));
    }
    let mut dims = vec![in_dim];
    dims.extend(std::iter::repeat_n(width, depth - 1));
    dims.push(out_dim);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            Layer {
                in_dim: fan_in,
                out_dim: fan_out,
                weights: (0..fan_in * fan_out)
                    .map(|_| normal.sample(&mut rng))
                    .collect(),
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    MlpParams::new(layers, Activation::Relu)
}

/// Per-hidden-layer keep flags for inverted dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    rate: f64,
    keep: Vec<Vec<bool>>,
}

impl DropoutMask {
    pub fn new(rate: f64, keep: Vec<Vec<bool>>) -> Result<Self, PredictorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(PredictorError::InvalidConfig(format!(
                "dropout rate {rate} outside [0,1)"
            )));
        }
        Ok(Self { rate, keep })
    }

    /// Draws a mask for every hidden layer of `params`.
    pub fn sample<R: rand::Rng>(
        params: &MlpParams,
        rate: f64,
        rng: &mut R,
    ) -> Result<Self, PredictorError> {
        let keep_dist = Bernoulli::new(1.0 - rate).map_err(|_| {
            PredictorError::InvalidConfig(format!("dropout rate {rate} outside [0,1)"))
        })?;
        let hidden = &params.layers[..params.layers.len() - 1];
        let keep = hidden
            .iter()
            .map(|l| (0..l.out_dim).map(|_| keep_dist.sample(rng)).collect())
            .collect();
        Self::new(rate, keep)
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn keep(&self) -> &[Vec<bool>] {
        &self.keep
    }

    fn scale(&self) -> f64 {
        1.0 / (1.0 - self.rate)
    }
}

/// Activations recorded by [`mlp_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    dims: Vec<(usize, usize)>,
    /// Input seen by each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
    mask: Option<DropoutMask>,
}

pub fn mlp_forward(
    params: &MlpParams,
    input: &[f64],
    mask: Option<&DropoutMask>,
) -> Result<(Vec<f64>, ForwardCache), PredictorError> {
    if input.len() != params.in_dim() {
        return Err(PredictorError::InputDims {
            expected: params.in_dim(),
            got: input.len(),
        });
    }
    if !input.iter().all(|x| x.is_finite()) {
        return Err(PredictorError::NonFiniteInput);
    }
    let last = params.layers.len() - 1;
    if let Some(m) = mask {
        let ok = m.keep.len() == last
            && m.keep
                .iter()
                .zip(&params.layers)
                .all(|(k, l)| k.len() == l.out_dim);
        if !ok {
            return Err(PredictorError::ShapeMismatch);
        }
    }
    let act = params.hidden_activation;
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut a = input.to_vec();
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = Vec::with_capacity(layer.out_dim);
        layer.affine(&a, &mut z);
        let next = if i < last {
            let mut h: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
            if let Some(m) = mask {
                let s = m.scale();
                for (v, &k) in h.iter_mut().zip(&m.keep[i]) {
                    *v = if k { *v * s } else { 0.0 };
                }
            }
            h
        } else {
            z.clone()
        };
        inputs.push(a);
        pre.push(z);
        a = next;
    }
    let cache = ForwardCache {
        dims: params.dims(),
        inputs,
        pre,
        mask: mask.cloned(),
    };
    Ok((a, cache))
}

/// Parameter-shaped buffer used for gradients and momentum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    pub fn dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.in_dim, l.out_dim)).collect()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for l in &self.layers {
            flat.extend_from_slice(&l.weights);
            flat.extend_from_slice(&l.bias);
        }
        flat
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights
                .iter_mut()
                .zip(&b.weights)
                .for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights
                .iter_mut()
                .chain(l.bias.iter_mut())
                .for_each(|x| *x *= factor);
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias))
            .map(|x| x * x)
            .sum()
    }
}

/// Reverse-mode gradients of `dot(output_gradient, forward(params))`.
pub fn mlp_backward(
    params: &MlpParams,
    cache: &ForwardCache,
    output_gradient: &[f64],
) -> Result<Gradients, PredictorError> {
    let mut grads = Gradients::zeros_like(params);
    mlp_backward_accumulate(params, cache, output_gradient, &mut grads)?;
    Ok(grads)
}

/// Like [`mlp_backward`] but adds into an existing buffer.
pub fn mlp_backward_accumulate(
    params: &MlpParams,
    cache: &ForwardCache,
    output_gradient: &[f64],
    grads: &mut Gradients,
) -> Result<(), PredictorError> {
    if cache.dims != params.dims() || cache.inputs.len() != params.layers.len() {
        return Err(PredictorError::CacheMismatch);
    }
    if output_gradient.len() != params.out_dim() || grads.dims() != params.dims() {
        return Err(PredictorError::ShapeMismatch);
    }
    let act = params.hidden_activation;
    let mut g = output_gradient.to_vec();
    for i in (0..params.layers.len()).rev() {
        let layer = &params.layers[i];
        let input = &cache.inputs[i];
        let gl = &mut grads.layers[i];
        for (o, &go) in g.iter().enumerate() {
            gl.bias[o] += go;
            if go != 0.0 {
                let row = &mut gl.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                row.iter_mut().zip(input).for_each(|(w, x)| *w += go * x);
            }
        }
        if i == 0 {
            break;
        }
        let mut ga = vec![0.0; layer.in_dim];
        for (o, &go) in g.iter().enumerate() {
            if go != 0.0 {
                ga.iter_mut()
                    .zip(layer.row(o))
                    .for_each(|(a, w)| *a += go * w);
            }
        }
        if let Some(m) = &cache.mask {
            let s = m.scale();
            for (a, &k) in ga.iter_mut().zip(&m.keep[i - 1]) {
                *a = if k { *a * s } else { 0.0 };
            }
        }
        for (a, &z) in ga.iter_mut().zip(&cache.pre[i - 1]) {
            *a *= act.derivative(z);
        }
        g = ga;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn identity_layer(n: usize) -> Layer {
        let mut l = Layer::zeros(n, n);
        for i in 0..n {
            l.weights[i * n + i] = 1.0;
        }
        l
    }

    #[test]
    fn single_layer_init() {
        let p = mlp_init(1, 100, 9, 9, 0).unwrap();
        assert_eq!(p.dims(), vec![(9, 9)]);
        assert!(p.layers()[0].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_shapes_and_determinism() {
        let a = mlp_init(12, 100, 36, 9, 5).unwrap();
        assert_eq!(a.depth(), 12);
        assert_eq!(a.layers()[0].in_dim, 36);
        assert_eq!(a.layers()[11].out_dim, 9);
        assert!(a.layers()[1..11]
            .iter()
            .all(|l| l.in_dim == 100 && l.out_dim == 100));
        assert_eq!(a, mlp_init(12, 100, 36, 9, 5).unwrap());
        assert_ne!(a, mlp_init(12, 100, 36, 9, 6).unwrap());
        assert!(matches!(
            mlp_init(0, 100, 9, 9, 0),
            Err(PredictorError::InvalidDims(_))
        ));
    }

    #[test]
    fn he_variance_first_layer() {
        let p = mlp_init(12, 100, 9, 9, 17).unwrap();
        let w = &p.layers()[0].weights;
        assert_eq!(w.len(), 900);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let target = 2.0 / 9.0;
        assert!((var - target).abs() <= 0.15 * target, "var {var}");
    }

    #[test]
    fn zero_net_outputs_zero() {
        let p = MlpParams::zeros(&[9, 100, 100, 9], Activation::Relu).unwrap();
        let (out, _) = mlp_forward(&p, &[1.0; 9], None).unwrap();
        assert_eq!(out, vec![0.0; 9]);
    }

    #[test]
    fn identity_layer_passes_through() {
        let p = MlpParams::new(vec![identity_layer(9)], Activation::Relu).unwrap();
        let v: Vec<f64> = (0..9).map(|i| i as f64 - 4.5).collect();
        assert_eq!(mlp_forward(&p, &v, None).unwrap().0, v);
        assert_eq!(p.infer(&v).unwrap(), v);
    }

    #[test]
    fn non_finite_input_rejected() {
        let p = mlp_init(2, 4, 3, 2, 0).unwrap();
        assert!(matches!(
            mlp_forward(&p, &[0.0, f64::NAN, 1.0], None),
            Err(PredictorError::NonFiniteInput)
        ));
    }

    #[test]
    fn chained_dims_enforced() {
        let layers = vec![Layer::zeros(3, 4), Layer::zeros(5, 2)];
        assert!(matches!(
            MlpParams::new(layers, Activation::Relu),
            Err(PredictorError::InvalidDims(_))
        ));
    }

    #[test]
    fn dropout_zeroes_and_scales() {
        let mut hidden = identity_layer(4);
        hidden.bias = vec![0.0; 4];
        let p = MlpParams::new(vec![hidden, identity_layer(4)], Activation::Identity).unwrap();
        let mask = DropoutMask::new(0.5, vec![vec![true, false, true, false]]).unwrap();
        let (out, _) = mlp_forward(&p, &[1.0, 2.0, 3.0, 4.0], Some(&mask)).unwrap();
        assert_eq!(out, vec![2.0, 0.0, 6.0, 0.0]);
    }

    #[test]
    fn zero_output_gradient_gives_zero_grads() {
        let p = mlp_init(3, 5, 4, 3, 2).unwrap();
        let (_, cache) = mlp_forward(&p, &[0.1, -0.2, 0.3, 0.4], None).unwrap();
        let g = mlp_backward(&p, &cache, &[0.0; 3]).unwrap();
        assert!(g.to_flat().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scalar_squared_error_closed_form() {
        // y = w x + b, loss = (y - t)^2, dL/dw = 2 (y - t) x, dL/db = 2 (y - t).
        let layer = Layer {
            in_dim: 1,
            out_dim: 1,
            weights: vec![0.7],
            bias: vec![-0.2],
        };
        let p = MlpParams::new(vec![layer], Activation::Relu).unwrap();
        let (x, t) = (1.5, 2.0);
        let (y, cache) = mlp_forward(&p, &[x], None).unwrap();
        let g = mlp_backward(&p, &cache, &[2.0 * (y[0] - t)]).unwrap();
        let pred = 0.7 * 1.5 - 0.2;
        assert!((g.layers[0].weights[0] - 2.0 * (pred - t) * x).abs() < 1e-15);
        assert!((g.layers[0].bias[0] - 2.0 * (pred - t)).abs() < 1e-15);
    }

    #[test]
    fn cache_from_other_net_rejected() {
        let a = mlp_init(3, 5, 4, 3, 2).unwrap();
        let b = mlp_init(2, 5, 4, 3, 2).unwrap();
        let (_, cache) = mlp_forward(&a, &[0.0; 4], None).unwrap();
        assert!(matches!(
            mlp_backward(&b, &cache, &[1.0; 3]),
            Err(PredictorError::CacheMismatch)
        ));
    }

    #[test]
    fn flat_round_trip() {
        let p = mlp_init(3, 6, 4, 2, 8).unwrap();
        let flat = p.to_flat();
        assert_eq!(flat.len(), p.param_count());
        assert_eq!(p.with_flat(&flat).unwrap(), p);
        assert!(matches!(
            p.with_flat(&flat[1..]),
            Err(PredictorError::ShapeMismatch)
        ));
    }

    #[test]
    fn infer_matches_forward() {
        let p = mlp_init(4, 10, 6, 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert_eq!(p.infer(&x).unwrap(), mlp_forward(&p, &x, None).unwrap().0);
    }
}
