//! Dense feed-forward networks with a flat, globally indexed parameter store.
//!
//! Every weight and bias lives in a single `Vec<T>`. Dense layer `d` with
//! shape `out x in` owns the contiguous range starting at its offset: the
//! weights in row-major order followed by the `out` biases. Parameter indices
//! therefore follow layer order, and a flat index identifies exactly one
//! scalar parameter.

mod loss;
mod train;

pub use loss::{LossFn, SoftmaxCrossEntropy};
pub use train::{train_sgd, TrainConfig, TrainReport};

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative given the layer input and its output. ReLU at exactly zero
    /// has derivative zero.
    #[inline]
    fn derivative<T: Scalar>(self, input: T, output: T) -> T {
        match self {
            Activation::Relu => {
                if input > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - output * output,
            Activation::Identity => T::one(),
        }
    }

    /// Whether gradients through this function can be tiny without being zero.
    pub fn saturates(self) -> bool {
        matches!(self, Activation::Tanh)
    }
}

/// Position of a dense layer's parameters inside the flat store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub offset: usize,
}

impl Dense {
    pub fn param_count(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }

    #[inline]
    pub fn weight_index(&self, row: usize, col: usize) -> usize {
        self.offset + row * self.in_dim + col
    }

    #[inline]
    pub fn bias_index(&self, row: usize) -> usize {
        self.offset + self.out_dim * self.in_dim + row
    }

    fn weights<'a, T>(&self, params: &'a [T]) -> &'a [T] {
        &params[self.offset..self.offset + self.out_dim * self.in_dim]
    }

    fn biases<'a, T>(&self, params: &'a [T]) -> &'a [T] {
        let start = self.offset + self.out_dim * self.in_dim;
        &params[start..start + self.out_dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Dense(Dense),
    Activation(Activation),
}

/// Layer description used to build a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense { out: usize },
    Activation { function: Activation },
}

/// Structural location of a flat parameter index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamSlot {
    /// `layer` indexes the network's layer list (not the dense-only list).
    Weight {
        layer: usize,
        row: usize,
        col: usize,
    },
    Bias {
        layer: usize,
        row: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f32> {
    input_dim: usize,
    layers: Vec<Layer>,
    params: Vec<T>,
    seed: u64,
}

impl<T: Scalar> Network<T> {
    /// Builds a network with Glorot-uniform weights and zero biases.
    pub fn new(input_dim: usize, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut net = Self::zeroed(input_dim, specs, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &net.layers {
            if let Layer::Dense(d) = layer {
                let limit = (6.0 / (d.in_dim + d.out_dim) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit)
                    .map_err(|e| Error::InvalidConfig(e.to_string()))?;
                let end = d.offset + d.out_dim * d.in_dim;
                for w in &mut net.params[d.offset..end] {
                    *w = T::lit(dist.sample(&mut rng));
                }
            }
        }
        Ok(net)
    }

    /// Builds a network with every parameter zero.
    pub fn zeroed(input_dim: usize, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidConfig("input dimension must be > 0".into()));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut dim = input_dim;
        let mut offset = 0;
        for spec in specs {
            match *spec {
                LayerSpec::Dense { out } => {
                    if out == 0 {
                        return Err(Error::InvalidConfig("dense layer width must be > 0".into()));
                    }
                    let d = Dense {
                        in_dim: dim,
                        out_dim: out,
                        offset,
                    };
                    offset += d.param_count();
                    dim = out;
                    layers.push(Layer::Dense(d));
                }
                LayerSpec::Activation { function } => layers.push(Layer::Activation(function)),
            }
        }
        if !layers.iter().any(|l| matches!(l, Layer::Dense(_))) {
            return Err(Error::InvalidConfig(
                "network needs at least one dense layer".into(),
            ));
        }
        Ok(Self {
            input_dim,
            layers,
            params: vec![T::zero(); offset],
            seed,
        })
    }

    /// Builds a network from explicit parameter values laid out in flat order.
    pub fn from_params(input_dim: usize, specs: &[LayerSpec], params: Vec<T>) -> Result<Self> {
        let mut net = Self::zeroed(input_dim, specs, 0)?;
        if params.len() != net.params.len() {
            return Err(Error::Dimension {
                expected: net.params.len(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Domain("non-finite parameter".into()));
        }
        net.params = params;
        Ok(net)
    }

    /// Multi-layer perceptron: `hidden` activation after every dense layer
    /// except the last, which stays linear (logits).
    pub fn mlp(widths: &[usize], hidden: Activation, seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidConfig(
                "mlp needs input and output widths".into(),
            ));
        }
        Self::new(widths[0], &mlp_specs(&widths[1..], hidden), seed)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.dense_layers().last().map(|d| d.out_dim).unwrap_or(0)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| match *l {
                Layer::Dense(d) => LayerSpec::Dense { out: d.out_dim },
                Layer::Activation(function) => LayerSpec::Activation { function },
            })
            .collect()
    }

    pub fn dense_layers(&self) -> impl DoubleEndedIterator<Item = &Dense> + '_ {
        self.layers.iter().filter_map(|l| match l {
            Layer::Dense(d) => Some(d),
            Layer::Activation(_) => None,
        })
    }

    pub fn activations(&self) -> impl Iterator<Item = Activation> + '_ {
        self.layers.iter().filter_map(|l| match l {
            Layer::Activation(a) => Some(*a),
            Layer::Dense(_) => None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    pub fn bias_indices(&self) -> Vec<usize> {
        self.dense_layers()
            .flat_map(|d| (0..d.out_dim).map(move |r| d.bias_index(r)))
            .collect()
    }

    pub fn param_index(&self, slot: ParamSlot) -> Result<usize> {
        let (layer, row) = match slot {
            ParamSlot::Weight { layer, row, .. } | ParamSlot::Bias { layer, row } => (layer, row),
        };
        let d = match self.layers.get(layer) {
            Some(Layer::Dense(d)) => d,
            _ => {
                return Err(Error::IndexOutOfRange {
                    what: "dense layer",
                    index: layer,
                    limit: self.layers.len(),
                })
            }
        };
        if row >= d.out_dim {
            return Err(Error::IndexOutOfRange {
                what: "row",
                index: row,
                limit: d.out_dim,
            });
        }
        match slot {
            ParamSlot::Weight { col, .. } if col >= d.in_dim => Err(Error::IndexOutOfRange {
                what: "column",
                index: col,
                limit: d.in_dim,
            }),
            ParamSlot::Weight { col, .. } => Ok(d.weight_index(row, col)),
            ParamSlot::Bias { .. } => Ok(d.bias_index(row)),
        }
    }

    pub fn param_slot(&self, index: usize) -> Result<ParamSlot> {
        for (layer, l) in self.layers.iter().enumerate() {
            if let Layer::Dense(d) = l {
                if index < d.offset || index >= d.offset + d.param_count() {
                    continue;
                }
                let local = index - d.offset;
                let nw = d.out_dim * d.in_dim;
                return Ok(if local < nw {
                    ParamSlot::Weight {
                        layer,
                        row: local / d.in_dim,
                        col: local % d.in_dim,
                    }
                } else {
                    ParamSlot::Bias {
                        layer,
                        row: local - nw,
                    }
                });
            }
        }
        Err(Error::IndexOutOfRange {
            what: "parameter",
            index,
            limit: self.params.len(),
        })
    }

    pub fn max_abs_param(&self) -> T {
        self.params
            .iter()
            .fold(T::zero(), |m, &p| if p.abs() > m { p.abs() } else { m })
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            input_dim: self.input_dim,
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|&p| <U as num_traits::NumCast>::from(p).unwrap_or_else(U::nan))
                .collect(),
            seed: self.seed,
        }
    }

    fn check_input(&self, input: &[T]) -> Result<()> {
        if input.len() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                got: input.len(),
            });
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite input".into()));
        }
        Ok(())
    }

    /// Runs the network, caching every intermediate vector.
    pub fn forward<I: AsRef<[T]> + ?Sized>(&self, input: &I) -> Result<ForwardTrace<T>> {
        let input = input.as_ref();
        self.check_input(input)?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input.to_vec());
        for layer in &self.layers {
            let prev = values.last().expect("trace starts with the input");
            let next = match layer {
                Layer::Dense(d) => {
                    let w = d.weights(&self.params);
                    let b = d.biases(&self.params);
                    w.chunks_exact(d.in_dim)
                        .zip(b)
                        .map(|(row, &bias)| dot(row, prev) + bias)
                        .collect()
                }
                Layer::Activation(a) => prev.iter().map(|&x| a.apply(x)).collect(),
            };
            values.push(next);
        }
        let trace = ForwardTrace { values };
        if trace.logits().iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(
                "forward pass produced non-finite logits".into(),
            ));
        }
        Ok(trace)
    }

    pub fn logits<I: AsRef<[T]> + ?Sized>(&self, input: &I) -> Result<Vec<T>> {
        let mut trace = self.forward(input)?;
        Ok(trace.values.pop().unwrap_or_default())
    }

    /// Arg-max label; ties go to the lowest index.
    pub fn predict<I: AsRef<[T]> + ?Sized>(&self, input: &I) -> Result<usize> {
        Ok(argmax(&self.logits(input)?))
    }

    fn check_trace(&self, trace: &ForwardTrace<T>) -> Result<()> {
        if trace.values.len() != self.layers.len() + 1 || trace.values[0].len() != self.input_dim {
            return Err(Error::InvalidConfig(
                "trace was not produced by this network".into(),
            ));
        }
        Ok(())
    }

    /// Core reverse pass. Seeds the gradient at the logits with `out_grad`,
    /// adds parameter gradients into `param_grad` when given, and returns the
    /// gradient at the input when `want_input` is set.
    ///
    /// `on_dense` observes the gradient with respect to every dense layer's
    /// output, in reverse layer order, as `(dense layer, layer input, grad)`.
    pub(crate) fn backward_with<F>(
        &self,
        trace: &ForwardTrace<T>,
        out_grad: &[T],
        mut param_grad: Option<&mut [T]>,
        want_input: bool,
        mut on_dense: F,
    ) -> Option<Vec<T>>
    where
        F: FnMut(&Dense, &[T], &[T]),
    {
        let mut grad = out_grad.to_vec();
        let first_dense = self
            .layers
            .iter()
            .position(|l| matches!(l, Layer::Dense(_)))
            .unwrap_or(0);
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.values[li];
            match layer {
                Layer::Activation(a) => {
                    let output = &trace.values[li + 1];
                    for ((g, &x), &y) in grad.iter_mut().zip(input).zip(output) {
                        *g *= a.derivative(x, y);
                    }
                }
                Layer::Dense(d) => {
                    on_dense(d, input, &grad);
                    if let Some(pg) = param_grad.as_deref_mut() {
                        let nw = d.out_dim * d.in_dim;
                        let (gw, gb) = pg[d.offset..d.offset + nw + d.out_dim].split_at_mut(nw);
                        for ((row, gbias), &g) in gw.chunks_exact_mut(d.in_dim).zip(gb).zip(&grad) {
                            if g == T::zero() {
                                continue;
                            }
                            axpy(row, g, input);
                            *gbias += g;
                        }
                    }
                    if li <= first_dense && !want_input {
                        return None;
                    }
                    let mut next = vec![T::zero(); d.in_dim];
                    let w = d.weights(&self.params);
                    for (row, &g) in w.chunks_exact(d.in_dim).zip(&grad) {
                        if g != T::zero() {
                            axpy(&mut next, g, row);
                        }
                    }
                    grad = next;
                }
            }
        }
        want_input.then_some(grad)
    }

    /// Exact gradient of one logit with respect to every parameter.
    pub fn param_gradients(
        &self,
        trace: &ForwardTrace<T>,
        output_index: usize,
    ) -> Result<GradientVector<T>> {
        self.check_trace(trace)?;
        let k = self.output_dim();
        if output_index >= k {
            return Err(Error::IndexOutOfRange {
                what: "output",
                index: output_index,
                limit: k,
            });
        }
        let mut seed = vec![T::zero(); k];
        seed[output_index] = T::one();
        let mut values = vec![T::zero(); self.params.len()];
        self.backward_with(trace, &seed, Some(&mut values), false, |_, _, _| {});
        Ok(GradientVector {
            values,
            output_index: Some(output_index),
        })
    }

    /// Gradient of `loss(logits, target)` with respect to all parameters.
    pub fn loss_param_gradient<L: LossFn<T>>(
        &self,
        input: &[T],
        target: usize,
        loss: &L,
    ) -> Result<(T, Vec<T>)> {
        let trace = self.forward(input)?;
        let (value, seed) = loss.value_and_grad(trace.logits(), target)?;
        let mut grad = vec![T::zero(); self.params.len()];
        self.backward_with(&trace, &seed, Some(&mut grad), false, |_, _, _| {});
        Ok((value, grad))
    }

    /// Gradient of `loss(logits, target)` with respect to the input.
    pub fn loss_input_gradient<L: LossFn<T>>(
        &self,
        input: &[T],
        target: usize,
        loss: &L,
    ) -> Result<(T, Vec<T>)> {
        let trace = self.forward(input)?;
        let (value, seed) = loss.value_and_grad(trace.logits(), target)?;
        let grad = self
            .backward_with(&trace, &seed, None, true, |_, _, _| {})
            .expect("input gradient requested");
        Ok((value, grad))
    }

    /// Central finite difference of one logit with respect to one parameter.
    /// The parameter is restored bit-exactly before returning.
    pub fn finite_diff_gradient<I: AsRef<[T]> + ?Sized>(
        &mut self,
        input: &I,
        param_index: usize,
        output_index: usize,
        delta: T,
    ) -> Result<T> {
        if !(delta > T::zero()) {
            return Err(Error::InvalidConfig(
                "finite-difference delta must be > 0".into(),
            ));
        }
        if param_index >= self.params.len() {
            return Err(Error::IndexOutOfRange {
                what: "parameter",
                index: param_index,
                limit: self.params.len(),
            });
        }
        let k = self.output_dim();
        if output_index >= k {
            return Err(Error::IndexOutOfRange {
                what: "output",
                index: output_index,
                limit: k,
            });
        }
        let original = self.params[param_index];
        self.params[param_index] = original + delta;
        let plus = self.logits(input);
        self.params[param_index] = original - delta;
        let minus = self.logits(input);
        self.params[param_index] = original;
        let (plus, minus) = (plus?, minus?);
        Ok((plus[output_index] - minus[output_index]) / (delta + delta))
    }
}

pub(crate) fn mlp_specs(widths: &[usize], hidden: Activation) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    for (i, &w) in widths.iter().enumerate() {
        specs.push(LayerSpec::Dense { out: w });
        if i + 1 < widths.len() {
            specs.push(LayerSpec::Activation { function: hidden });
        }
    }
    specs
}

/// Cached intermediate values of one forward pass: the input followed by the
/// output of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T = f32> {
    values: Vec<Vec<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn input(&self) -> &[T] {
        &self.values[0]
    }

    pub fn logits(&self) -> &[T] {
        self.values.last().expect("trace is never empty")
    }

    pub fn layer_count(&self) -> usize {
        self.values.len() - 1
    }

    /// Input of layer `layer`.
    pub fn layer_input(&self, layer: usize) -> &[T] {
        &self.values[layer]
    }

    /// Output of layer `layer`.
    pub fn layer_output(&self, layer: usize) -> &[T] {
        &self.values[layer + 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector<T = f32> {
    pub values: Vec<T>,
    pub output_index: Option<usize>,
}

pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    const W1_00: usize = 0;
    const B1_0: usize = 4;
    const W2_0: usize = 6;
    const W2_1: usize = 7;
    const B2: usize = 8;

    #[test]
    fn t9_forward_hand_values() {
        let net = t9::<f32>();
        assert_eq!(net.param_count(), 9);
        assert_eq!(net.logits(&[1.0, 0.0]).unwrap(), vec![1.0]);
        assert_eq!(net.logits(&[0.0, 0.0]).unwrap(), vec![0.0]);
        assert_eq!(net.logits(&[0.0, 1.0]).unwrap(), vec![-1.0]);
    }

    #[test]
    fn identity_network_passes_input_through() {
        let net = Network::<f32>::from_params(
            3,
            &[
                LayerSpec::Dense { out: 3 },
                LayerSpec::Activation {
                    function: Activation::Identity,
                },
            ],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let v = [0.25f32, -3.0, 7.5];
        assert_eq!(net.logits(&v).unwrap(), v.to_vec());
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let net = t9::<f32>();
        assert!(matches!(
            net.forward(&[1.0f32, 2.0, 3.0]),
            Err(Error::Dimension {
                expected: 2,
                got: 3
            })
        ));
        assert!(matches!(
            net.forward(&[f32::NAN, 0.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn t9_gradients_support() {
        let net = t9::<f32>();
        let trace = net.forward(&[1.0, 0.0]).unwrap();
        let g = net.param_gradients(&trace, 0).unwrap();
        let nonzero: Vec<usize> = (0..9).filter(|&i| g.values[i] != 0.0).collect();
        assert_eq!(nonzero, vec![W1_00, B1_0, W2_0, B2]);

        let trace = net.forward(&[0.0, 0.0]).unwrap();
        let g = net.param_gradients(&trace, 0).unwrap();
        let nonzero: Vec<usize> = (0..9).filter(|&i| g.values[i] != 0.0).collect();
        assert_eq!(nonzero, vec![B2]);
        assert_eq!(g.values[B2], 1.0);
    }

    #[test]
    fn gradient_output_index_checked() {
        let net = t9::<f32>();
        let trace = net.forward(&[1.0, 0.0]).unwrap();
        assert!(matches!(
            net.param_gradients(&trace, 1),
            Err(Error::IndexOutOfRange { what: "output", .. })
        ));
    }

    #[test]
    fn finite_difference_on_t9() {
        let mut net = t9::<f64>();
        let before = net.clone();
        let g = net
            .finite_diff_gradient(&[1.0, 0.0], W2_0, 0, 1e-3)
            .unwrap();
        assert!((g - 1.0).abs() <= 1e-6);
        let g = net
            .finite_diff_gradient(&[1.0, 0.0], W2_1, 0, 1e-3)
            .unwrap();
        assert!(g.abs() <= 1e-9);
        assert_eq!(net, before);
        assert!(net.finite_diff_gradient(&[1.0, 0.0], 9, 0, 1e-3).is_err());
        assert!(net.finite_diff_gradient(&[1.0, 0.0], 0, 0, 0.0).is_err());
    }

    #[test]
    fn linear_network_matches_finite_difference_exactly() {
        // Dyadic parameters keep every intermediate exactly representable.
        let mut net = Network::<f64>::from_params(
            2,
            &[LayerSpec::Dense { out: 2 }],
            vec![0.5, -0.25, 2.0, 1.0, 0.125, -1.0],
        )
        .unwrap();
        let x = [0.75, -1.5];
        let trace = net.forward(&x).unwrap();
        for out in 0..2 {
            let g = net.param_gradients(&trace, out).unwrap();
            for p in 0..net.param_count() {
                let fd = net.finite_diff_gradient(&x, p, out, 0.5).unwrap();
                assert_eq!(fd, g.values[p], "param {p} output {out}");
            }
        }
    }

    #[test]
    fn output_bias_gradient_is_one() {
        let net = Network::<f32>::mlp(&[5, 7, 3], Activation::Tanh, 3).unwrap();
        let trace = net.forward(&[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let last = *net.dense_layers().last().unwrap();
        for c in 0..3 {
            let g = net.param_gradients(&trace, c).unwrap();
            assert_eq!(g.values[last.bias_index(c)], 1.0);
        }
    }

    #[test]
    fn predict_tie_break_and_shift_invariance() {
        let net = t9_two_logit::<f32>();
        assert_eq!(net.logits(&[1.0, 0.0]).unwrap(), vec![1.0, -1.0]);
        assert_eq!(net.predict(&[1.0, 0.0]).unwrap(), 0);
        assert_eq!(argmax(&[2.0f32, 2.0, 2.0]), 0);

        let mut shifted = net.clone();
        let last = *shifted.dense_layers().last().unwrap();
        for r in 0..2 {
            shifted.params_mut()[last.bias_index(r)] += 3.0;
        }
        for x in [[1.0, 0.0], [0.0, 1.0], [0.3, 0.7]] {
            assert_eq!(net.predict(&x).unwrap(), shifted.predict(&x).unwrap());
        }
    }

    #[test]
    fn param_index_is_a_bijection() {
        let net = Network::<f32>::mlp(&[4, 3, 2], Activation::Relu, 0).unwrap();
        for i in 0..net.param_count() {
            let slot = net.param_slot(i).unwrap();
            assert_eq!(net.param_index(slot).unwrap(), i);
        }
        assert!(net.param_slot(net.param_count()).is_err());
        assert!(net
            .param_index(ParamSlot::Weight {
                layer: 1,
                row: 0,
                col: 0
            })
            .is_err());
    }

    #[test]
    fn glorot_init_bounds_and_determinism() {
        let a = Network::<f32>::mlp(&[20, 10, 4], Activation::Relu, 11).unwrap();
        let b = Network::<f32>::mlp(&[20, 10, 4], Activation::Relu, 11).unwrap();
        assert_eq!(a, b);
        let d = *a.dense_layers().next().unwrap();
        let limit = (6.0f32 / 30.0).sqrt();
        for r in 0..10 {
            assert_eq!(a.params()[d.bias_index(r)], 0.0);
            for c in 0..20 {
                assert!(a.params()[d.weight_index(r, c)].abs() <= limit);
            }
        }
    }

    #[test]
    fn tanh_saturation_kills_downstream_gradients() {
        // Hidden unit 0 receives a pre-activation of 12.
        let net = Network::<f32>::from_params(
            1,
            &[
                LayerSpec::Dense { out: 1 },
                LayerSpec::Activation {
                    function: Activation::Tanh,
                },
                LayerSpec::Dense { out: 1 },
            ],
            vec![12.0, 0.0, 0.7, 0.1],
        )
        .unwrap();
        let trace = net.forward(&[1.0]).unwrap();
        let g = net.param_gradients(&trace, 0).unwrap();
        assert!(g.values[0].abs() < 1e-6);
        assert!(g.values[1].abs() < 1e-6);
    }

    fn tiny_net(hidden: Activation) -> impl Strategy<Value = (Network<f64>, Vec<Vec<f64>>)> {
        (1usize..5, 1usize..6, 1usize..4, 1usize..4, any::<u64>()).prop_flat_map(
            move |(i, h1, h2, o, seed)| {
                let net = Network::<f64>::mlp(&[i, h1, h2, o], hidden, seed).unwrap();
                let inputs =
                    proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, i), 20);
                (Just(net), inputs)
            },
        )
    }

    fn check_against_fd(mut net: Network<f64>, inputs: Vec<Vec<f64>>) -> Result<(), TestCaseError> {
        // Biases jittered away from zero so ReLU kinks are not hit by the
        // finite-difference step.
        for b in net.bias_indices() {
            net.params_mut()[b] = 0.05 + (b as f64 * 0.37).sin() * 0.1;
        }
        for x in &inputs {
            let trace = net.forward(x).unwrap();
            for out in 0..net.output_dim() {
                let g = net.param_gradients(&trace, out).unwrap();
                for p in 0..net.param_count() {
                    let fd = net.finite_diff_gradient(x, p, out, 1e-6).unwrap();
                    let tol = f64::max(1e-4, 1e-3 * g.values[p].abs());
                    prop_assert!(
                        (fd - g.values[p]).abs() <= tol,
                        "param {} out {}: analytic {} fd {}",
                        p,
                        out,
                        g.values[p],
                        fd
                    );
                }
            }
        }
        Ok(())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn relu_gradients_match_finite_differences((net, inputs) in tiny_net(Activation::Relu)) {
            check_against_fd(net, inputs)?;
        }

        #[test]
        fn tanh_gradients_match_finite_differences((net, inputs) in tiny_net(Activation::Tanh)) {
            check_against_fd(net, inputs)?;
        }

        #[test]
        fn forward_and_gradients_are_reproducible(seed in any::<u64>(), x in proptest::collection::vec(0.0f32..1.0, 6)) {
            let net = Network::<f32>::mlp(&[6, 5, 3], Activation::Relu, seed).unwrap();
            let a = net.forward(&x).unwrap();
            let b = net.forward(&x).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.layer_count(), net.layers().len());
            let ga = net.param_gradients(&a, 1).unwrap();
            let gb = net.param_gradients(&b, 1).unwrap();
            prop_assert_eq!(ga, gb);
        }

        #[test]
        fn linear_network_second_difference_vanishes(seed in any::<u64>(), x in proptest::collection::vec(-1.0f64..1.0, 3), p in 0usize..16) {
            let mut net = Network::<f64>::new(3, &[LayerSpec::Dense { out: 4 }], seed).unwrap();
            let h = 1e-2;
            let base = net.params()[p];
            let eval = |v: f64, net: &mut Network<f64>| {
                net.params_mut()[p] = v;
                net.logits(&x).unwrap()
            };
            let plus = eval(base + h, &mut net);
            let mid = eval(base, &mut net);
            let minus = eval(base - h, &mut net);
            for c in 0..4 {
                prop_assert!((plus[c] - 2.0 * mid[c] + minus[c]).abs() < 1e-12);
            }
        }
    }
}
