//! Small fully-connected networks with hand-written backpropagation.
//!
//! Evaluation is generic over [`Scalar`], so the same code path yields exact
//! gradients (`f64`) and, when seeded with dual numbers, the directional
//! derivative of those gradients (a Hessian-vector product).

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    /// Curvature is zero almost everywhere, which blinds the remainder probe.
    Relu,
    Identity,
    /// `z²`; only used to build exact quadratic test heads.
    Square,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
            Activation::Square => "square",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            "square" => Some(Activation::Square),
            _ => None,
        }
    }

    #[inline]
    fn apply<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => {
                if z.re() > 0.0 {
                    z
                } else {
                    S::zero()
                }
            }
            Activation::Identity => z,
            Activation::Square => z * z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `h`.
    #[inline]
    fn slope<S: Scalar>(self, z: S, h: S) -> S {
        match self {
            Activation::Tanh => S::cst(1.0) - h * h,
            Activation::Relu => S::cst(if z.re() > 0.0 { 1.0 } else { 0.0 }),
            Activation::Identity => S::cst(1.0),
            Activation::Square => z.scale(2.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OutputHead {
    Softmax { temperature: f64 },
    Linear,
}

/// Architecture of a feed-forward net: `layer_widths[0]` is the input width,
/// the last entry the output width, and one activation per hidden layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub layer_widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub head: OutputHead,
}

impl NetSpec {
    pub fn new(layer_widths: Vec<usize>, activations: Vec<Activation>, head: OutputHead) -> Result<Self> {
        let spec = NetSpec {
            layer_widths,
            activations,
            head,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Same activation on every hidden layer.
    pub fn uniform(layer_widths: Vec<usize>, activation: Activation, head: OutputHead) -> Result<Self> {
        let hidden = layer_widths.len().saturating_sub(2);
        Self::new(layer_widths, vec![activation; hidden], head)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidNet("need an input and an output width".into()));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidNet("layer widths must be positive".into()));
        }
        if self.activations.len() != self.layer_widths.len() - 2 {
            return Err(Error::InvalidNet(format!(
                "{} hidden layers but {} activations",
                self.layer_widths.len() - 2,
                self.activations.len()
            )));
        }
        if let OutputHead::Softmax { temperature } = self.head {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::InvalidNet("softmax temperature must be > 0".into()));
            }
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated")
    }

    pub fn layer_count(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn layout(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let weights = offset..offset + inputs * outputs;
                let biases = weights.end..weights.end + outputs;
                offset = biases.end;
                LayerLayout {
                    inputs,
                    outputs,
                    weights,
                    biases,
                }
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Where one layer's row-major weight matrix and bias vector live in the
/// flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Range<usize>,
    pub biases: Range<usize>,
}

/// Flat weights and biases, layer by layer (`W` row-major, then `b`).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<LayerLayout>,
}

impl ParamVector {
    pub fn from_values(spec: &NetSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if values.len() != spec.param_count() {
            return Err(Error::dim("parameter vector", spec.param_count(), values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidNet("non-finite parameter".into()));
        }
        Ok(ParamVector {
            values,
            layout: spec.layout(),
        })
    }

    pub fn zeros(spec: &NetSpec) -> Result<Self> {
        Self::from_values(spec, vec![0.0; spec.param_count()])
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng + ?Sized>(spec: &NetSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut values = vec![0.0; spec.param_count()];
        for l in spec.layout() {
            let bound = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
            for v in &mut values[l.weights.clone()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Self::from_values(spec, values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &[LayerLayout] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Weight connecting input `col` to output `row` of layer `layer`.
    pub fn weight(&self, layer: usize, row: usize, col: usize) -> f64 {
        let l = &self.layout[layer];
        self.values[l.weights.start + row * l.inputs + col]
    }

    pub fn set_weight(&mut self, layer: usize, row: usize, col: usize, v: f64) {
        let l = &self.layout[layer];
        self.values[l.weights.start + row * l.inputs + col] = v;
    }

    pub fn bias(&self, layer: usize, row: usize) -> f64 {
        self.values[self.layout[layer].biases.start + row]
    }

    pub fn set_bias(&mut self, layer: usize, row: usize, v: f64) {
        let start = self.layout[layer].biases.start;
        self.values[start + row] = v;
    }

    /// In-place `θ ← θ + k·d`.
    pub fn axpy(&mut self, k: f64, d: &[f64]) {
        debug_assert_eq!(d.len(), self.values.len());
        for (v, g) in self.values.iter_mut().zip(d) {
            *v += k * g;
        }
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct Trace<S> {
    /// `inputs[l]` is the input of layer `l`; `inputs[0]` is the net input.
    inputs: Vec<Vec<S>>,
    pre: Vec<Vec<S>>,
}

impl<S: Scalar> Trace<S> {
    /// Raw output of the last layer (logits for a softmax head).
    pub fn output(&self) -> &[S] {
        self.pre.last().expect("at least one layer")
    }
}

/// A validated network: spec plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: NetSpec,
    params: ParamVector,
}

impl Mlp {
    pub fn new(spec: NetSpec, params: ParamVector) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::dim("parameter vector", spec.param_count(), params.len()));
        }
        Ok(Mlp { spec, params })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn input_width(&self) -> usize {
        self.spec.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.spec.output_width()
    }

    pub fn trace<S: Scalar>(&self, x: &[S]) -> Result<Trace<S>> {
        if x.len() != self.input_width() {
            return Err(Error::dim("network input", self.input_width(), x.len()));
        }
        let layers = self.params.layout();
        let w = self.params.values();
        let mut inputs = Vec::with_capacity(layers.len());
        let mut pre = Vec::with_capacity(layers.len());
        let mut h: Vec<S> = x.to_vec();
        for (l, lay) in layers.iter().enumerate() {
            let z: Vec<S> = (0..lay.outputs)
                .map(|r| {
                    let row = &w[lay.weights.start + r * lay.inputs..][..lay.inputs];
                    let mut acc = S::cst(w[lay.biases.start + r]);
                    for (wi, hi) in row.iter().zip(&h) {
                        if *wi != 0.0 {
                            acc += hi.scale(*wi);
                        }
                    }
                    acc
                })
                .collect();
            let next = if l + 1 < layers.len() {
                let act = self.spec.activations[l];
                z.iter().map(|&zi| act.apply(zi)).collect()
            } else {
                Vec::new()
            };
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(z);
        }
        Ok(Trace { inputs, pre })
    }

    /// Raw last-layer output (before any softmax head).
    pub fn raw_output(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.output().to_vec())
    }

    /// Backpropagates `d_out` (gradient with respect to the raw output) to the
    /// net input. When `param_grad` is given, parameter gradients are added
    /// into it.
    pub fn backprop<S: Scalar>(&self, trace: &Trace<S>, d_out: Vec<S>, mut param_grad: Option<&mut [S]>) -> Vec<S> {
        let layers = self.params.layout();
        let w = self.params.values();
        let mut delta = d_out;
        for l in (0..layers.len()).rev() {
            let lay = &layers[l];
            if l + 1 < layers.len() {
                let act = self.spec.activations[l];
                let out = &trace.inputs[l + 1];
                for (k, d) in delta.iter_mut().enumerate() {
                    *d = *d * act.slope(trace.pre[l][k], out[k]);
                }
            }
            if let Some(g) = param_grad.as_deref_mut() {
                let input = &trace.inputs[l];
                for (r, &dr) in delta.iter().enumerate() {
                    let base = lay.weights.start + r * lay.inputs;
                    for (c, &hc) in input.iter().enumerate() {
                        g[base + c] += dr * hc;
                    }
                    g[lay.biases.start + r] += dr;
                }
            }
            let mut prev = vec![S::zero(); lay.inputs];
            for (r, &dr) in delta.iter().enumerate() {
                let row = &w[lay.weights.start + r * lay.inputs..][..lay.inputs];
                for (p, &wi) in prev.iter_mut().zip(row) {
                    if wi != 0.0 {
                        *p += dr.scale(wi);
                    }
                }
            }
            delta = prev;
        }
        delta
    }
}

/// Numerically stable softmax of `z / temperature`.
pub fn softmax<S: Scalar>(z: &[S], temperature: f64) -> Vec<S> {
    let inv_t = 1.0 / temperature;
    let m = z.iter().map(|v| v.re() * inv_t).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<S> = z.iter().map(|&v| (v.scale(inv_t) - S::cst(m)).exp()).collect();
    let mut total = S::zero();
    for &v in &e {
        total += v;
    }
    e.into_iter().map(|v| v / total).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Mlp {
        let spec = NetSpec::uniform(vec![2, 2, 1], Activation::Tanh, OutputHead::Linear).unwrap();
        // layer 0: W = [[1, 2], [-1, 0.5]], b = [0.1, -0.2]; layer 1: W = [[3, -2]], b = [0.5]
        let params = ParamVector::from_values(&spec, vec![1.0, 2.0, -1.0, 0.5, 0.1, -0.2, 3.0, -2.0, 0.5]).unwrap();
        Mlp::new(spec, params).unwrap()
    }

    #[test]
    fn forward_matches_hand_arithmetic() {
        let net = tiny();
        let x = [0.3, -0.4];
        let h0 = (0.3 - 0.8 + 0.1f64).tanh();
        let h1 = (-0.3 - 0.2 - 0.2f64).tanh();
        let y = 3.0 * h0 - 2.0 * h1 + 0.5;
        assert!((net.raw_output(&x).unwrap()[0] - y).abs() < 1e-15);
    }

    #[test]
    fn layout_is_contiguous() {
        let spec = NetSpec::uniform(vec![3, 4, 2], Activation::Tanh, OutputHead::Linear).unwrap();
        let lay = spec.layout();
        assert_eq!(lay[0].weights, 0..12);
        assert_eq!(lay[0].biases, 12..16);
        assert_eq!(lay[1].weights, 16..24);
        assert_eq!(lay[1].biases, 24..26);
        assert_eq!(spec.param_count(), 26);
    }

    #[test]
    fn spec_rejects_bad_shapes() {
        assert!(NetSpec::new(vec![3], vec![], OutputHead::Linear).is_err());
        assert!(NetSpec::new(vec![3, 2], vec![Activation::Tanh], OutputHead::Linear).is_err());
        assert!(NetSpec::new(vec![3, 2], vec![], OutputHead::Softmax { temperature: 0.0 }).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, -1000.0, 3.0], 1.0);
        let s: f64 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(p[0] > 0.999);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }
}
