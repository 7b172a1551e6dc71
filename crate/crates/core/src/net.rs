//! Dense ReLU networks with the handful of passes the training losses need.
//!
//! Everything is batched: a batch is a matrix with one sample per row.
//!
//! * [`Mlp::forward`] records layer inputs and ReLU masks in a [`Trace`].
//! * [`Mlp::backward`] is the usual reverse pass over a trace.
//! * [`Mlp::jvp`] pushes tangents through the network with the masks of a
//!   trace held fixed, i.e. it applies the input Jacobian at each row's point.
//! * [`Mlp::jvp_backward`] differentiates a JVP with respect to the weights
//!   and the tangent. With masks frozen the JVP is multilinear in the weights,
//!   so this is exact almost everywhere.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Layer widths, input first. Hidden layers use ReLU, the last layer is
/// affine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub widths: Vec<usize>,
}

impl NetSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        Ok(Self { widths })
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// The mirrored spec, used to build a decoder from an encoder.
    pub fn reversed(&self) -> Self {
        Self {
            widths: self.widths.iter().rev().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Per-layer inputs and hidden-layer activation masks of a batched forward
/// pass.
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Array2<f64>>,
    masks: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl Trace {
    /// Activation pattern of hidden layer `layer` (1.0 active, 0.0 inactive).
    pub fn mask(&self, layer: usize) -> ArrayView2<'_, f64> {
        self.masks[layer].view()
    }

    /// Restricts the trace to the given rows.
    pub fn select_rows(&self, rows: &[usize]) -> Trace {
        Trace {
            inputs: self
                .inputs
                .iter()
                .map(|a| a.select(Axis(0), rows))
                .collect(),
            masks: self.masks.iter().map(|a| a.select(Axis(0), rows)).collect(),
            output: self.output.select(Axis(0), rows),
        }
    }
}

/// Tangent inputs of every layer, recorded by [`Mlp::jvp`].
#[derive(Debug, Clone)]
pub struct TangentTrace {
    inputs: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

/// Gradient accumulator mirroring an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub layers: Vec<Dense>,
}

impl MlpGrad {
    pub fn add_assign(&mut self, other: &MlpGrad) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }
}

impl Mlp {
    /// He-uniform initialisation for hidden layers; the last layer is scaled
    /// down by 0.1. Biases start at zero.
    pub fn init(spec: &NetSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = spec.n_layers();
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
                let mut limit = (6.0 / fan_in as f64).sqrt();
                if l + 1 == n {
                    limit *= 0.1;
                }
                let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                    rng.random_range(-limit..limit)
                });
                Dense {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network without layers".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.nrows() {
                return Err(Error::shape(
                    "layer bias",
                    layer.weight.nrows(),
                    layer.bias.len(),
                ));
            }
            if l > 0 && layer.weight.ncols() != layers[l - 1].weight.nrows() {
                return Err(Error::shape(
                    "layer input",
                    layers[l - 1].weight.nrows(),
                    layer.weight.ncols(),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn spec(&self) -> NetSpec {
        let mut widths = vec![self.layers[0].weight.ncols()];
        widths.extend(self.layers.iter().map(|l| l.weight.nrows()));
        NetSpec { widths }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }

    pub fn zero_grad(&self) -> MlpGrad {
        MlpGrad {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_width() {
            return Err(Error::shape("network input", self.input_width(), cols));
        }
        Ok(())
    }

    /// Batched forward pass.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Trace> {
        self.check_input(x.ncols())?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n - 1);
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut h = a.dot(&layer.weight.t());
            h += &layer.bias;
            inputs.push(a);
            if l + 1 < n {
                // ReLU with zero subgradient at the kink
                let mask = h.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                h *= &mask;
                masks.push(mask);
            }
            a = h;
        }
        Ok(Trace {
            inputs,
            masks,
            output: a,
        })
    }

    /// Forward pass of a single input, returning the output and per-layer
    /// activation masks.
    pub fn forward_one(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<bool>>)> {
        let xb = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let trace = self.forward(xb)?;
        let masks = trace
            .masks
            .iter()
            .map(|m| m.row(0).iter().map(|&v| v > 0.0).collect())
            .collect();
        Ok((trace.output.row(0).to_vec(), masks))
    }

    /// Output-only forward pass.
    pub fn eval(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let n = self.layers.len();
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut h = a.dot(&layer.weight.t());
            h += &layer.bias;
            if l + 1 < n {
                h.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
            }
            a = h;
        }
        Ok(a)
    }

    pub fn eval_one(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let xb = x.insert_axis(Axis(0));
        Ok(self.eval(xb)?.row(0).to_owned())
    }

    /// Reverse pass. Accumulates parameter gradients into `grad` and returns
    /// the gradient with respect to the input when `want_input` is set.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_out: Array2<f64>,
        grad: &mut MlpGrad,
        want_input: bool,
    ) -> Option<Array2<f64>> {
        let mut delta = grad_out;
        for l in (0..self.layers.len()).rev() {
            let g = &mut grad.layers[l];
            g.weight += &delta.t().dot(&trace.inputs[l]);
            g.bias += &delta.sum_axis(Axis(0));
            if l == 0 && !want_input {
                return None;
            }
            let mut prev = delta.dot(&self.layers[l].weight);
            if l > 0 {
                prev *= &trace.masks[l - 1];
            }
            delta = prev;
        }
        Some(delta)
    }

    /// Jacobian-vector products: row `r` of the result is `J(x_r) t_r`, where
    /// `x_r` is the point recorded in row `r` of `trace`.
    pub fn jvp(&self, trace: &Trace, tangents: ArrayView2<'_, f64>) -> Result<TangentTrace> {
        self.check_input(tangents.ncols())?;
        if tangents.nrows() != trace.output.nrows() {
            return Err(Error::shape(
                "jvp rows",
                trace.output.nrows(),
                tangents.nrows(),
            ));
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut t = tangents.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut s = t.dot(&layer.weight.t());
            if l + 1 < n {
                s *= &trace.masks[l];
            }
            inputs.push(t);
            t = s;
        }
        Ok(TangentTrace { inputs, output: t })
    }

    /// Reverse pass through [`Mlp::jvp`]. Weight gradients go into `grad`
    /// (biases do not enter a JVP); the gradient with respect to the tangent
    /// input is returned when `want_tangent` is set.
    pub fn jvp_backward(
        &self,
        trace: &Trace,
        tangent: &TangentTrace,
        grad_out: Array2<f64>,
        grad: &mut MlpGrad,
        want_tangent: bool,
    ) -> Option<Array2<f64>> {
        let mut delta = grad_out;
        for l in (0..self.layers.len()).rev() {
            grad.layers[l].weight += &delta.t().dot(&tangent.inputs[l]);
            if l == 0 && !want_tangent {
                return None;
            }
            let mut prev = delta.dot(&self.layers[l].weight);
            if l > 0 {
                prev *= &trace.masks[l - 1];
            }
            delta = prev;
        }
        Some(delta)
    }

    /// Exact input Jacobian (`out x in`) of the piecewise-linear network at
    /// `x`.
    pub fn input_jacobian(&self, x: &[f64]) -> Result<Array2<f64>> {
        let xb = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let trace = self.forward(xb)?;
        let n = self.layers.len();
        let mut jac = self.layers[0].weight.clone();
        for l in 0..n {
            if l > 0 {
                jac = self.layers[l].weight.dot(&jac);
            }
            if l + 1 < n {
                let mask = trace.masks[l].row(0);
                for (mut row, &m) in jac.rows_mut().into_iter().zip(mask.iter()) {
                    row *= m;
                }
            }
        }
        Ok(jac)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a list of parameter blocks. Blocks appended later (new ODE
/// coefficient matrices) start with zero moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("adam blocks", params.len(), grads.len()));
        }
        while self.first.len() < params.len() {
            let len = params[self.first.len()].len();
            self.first.push(vec![0.0; len]);
            self.second.push(vec![0.0; len]);
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (b, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[b], &mut self.second[b]);
            if m.len() != p.len() || g.len() != p.len() {
                return Err(Error::shape("adam block", p.len(), g.len()));
            }
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn identity_layer(n: usize) -> Dense {
        Dense {
            weight: Array2::eye(n),
            bias: Array1::zeros(n),
        }
    }

    #[test]
    fn identity_affine_layer_is_identity() {
        let net = Mlp::from_layers(vec![identity_layer(3)]).unwrap();
        let (y, masks) = net.forward_one(&[1.0, -2.0, 3.5]).unwrap();
        assert_eq!(y, vec![1.0, -2.0, 3.5]);
        assert!(masks.is_empty());
        assert_eq!(
            net.input_jacobian(&[0.3, 0.1, 0.2]).unwrap(),
            Array2::<f64>::eye(3)
        );
    }

    #[test]
    fn relu_clamps_negatives() {
        let net = Mlp::from_layers(vec![identity_layer(2), identity_layer(2)]).unwrap();
        let (y, masks) = net.forward_one(&[-1.0, 2.0]).unwrap();
        assert_eq!(y, vec![0.0, 2.0]);
        assert_eq!(masks, vec![vec![false, true]]);
    }

    #[test]
    fn dead_hidden_layer_gives_zero_jacobian() {
        let mut net = Mlp::init(&NetSpec::new(vec![4, 6, 3]).unwrap(), 1);
        net.layers[0].bias.fill(-1e3);
        let jac = net.input_jacobian(&[0.1, 0.2, -0.3, 0.4]).unwrap();
        assert!(jac.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_scripted_reference() {
        let net = Mlp::init(&NetSpec::new(vec![3, 4, 2]).unwrap(), 7);
        let x = [0.3, -1.2, 0.8];
        // hand-written reference
        let mut hidden = [0.0; 4];
        for (i, h) in hidden.iter_mut().enumerate() {
            let mut s = net.layers[0].bias[i];
            for (j, xj) in x.iter().enumerate() {
                s += net.layers[0].weight[(i, j)] * xj;
            }
            *h = s.max(0.0);
        }
        let (y, _) = net.forward_one(&x).unwrap();
        for (i, yi) in y.iter().enumerate() {
            let mut s = net.layers[1].bias[i];
            for (j, hj) in hidden.iter().enumerate() {
                s += net.layers[1].weight[(i, j)] * hj;
            }
            assert_abs_diff_eq!(*yi, s, epsilon = 1e-14);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let net = Mlp::init(&NetSpec::new(vec![5, 7, 3]).unwrap(), 3);
        let x = [0.4, -0.2, 0.9, 0.1, -0.7];
        let jac = net.input_jacobian(&x).unwrap();
        let (_, masks0) = net.forward_one(&x).unwrap();
        let h = 1e-6;
        for c in 0..5 {
            let mut xp = x;
            let mut xm = x;
            xp[c] += h;
            xm[c] -= h;
            let (yp, mp) = net.forward_one(&xp).unwrap();
            let (ym, mm) = net.forward_one(&xm).unwrap();
            // skip probes that straddle a kink
            if mp != masks0 || mm != masks0 {
                continue;
            }
            for r in 0..3 {
                assert!((jac[(r, c)] - (yp[r] - ym[r]) / (2.0 * h)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn jacobian_is_constant_within_a_linear_region() {
        let net = Mlp::init(&NetSpec::new(vec![4, 10, 10, 2]).unwrap(), 11);
        let x = [0.5, -0.25, 0.75, 0.1];
        let mut y = x;
        y[1] += 1e-7;
        assert_eq!(
            net.forward_one(&x).unwrap().1,
            net.forward_one(&y).unwrap().1
        );
        let diff = &net.input_jacobian(&x).unwrap() - &net.input_jacobian(&y).unwrap();
        assert!(diff.iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn batched_jvp_agrees_with_explicit_jacobian() {
        let net = Mlp::init(&NetSpec::new(vec![3, 5, 2]).unwrap(), 5);
        let x = array![[0.1, 0.2, 0.3], [-0.4, 0.5, -0.6]];
        let t = array![[1.0, 0.0, -1.0], [0.5, 0.5, 2.0]];
        let trace = net.forward(x.view()).unwrap();
        let out = net.jvp(&trace, t.view()).unwrap().output;
        for r in 0..2 {
            let j = net.input_jacobian(x.row(r).as_slice().unwrap()).unwrap();
            let expect = j.dot(&t.row(r));
            for c in 0..2 {
                assert_abs_diff_eq!(out[(r, c)], expect[c], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn half_squared_norm_gradient_on_linear_net_is_outer_product() {
        let net = Mlp::from_layers(vec![Dense {
            weight: array![[1.0, 2.0], [0.5, -1.0], [0.0, 3.0]],
            bias: array![0.1, 0.0, -0.2],
        }])
        .unwrap();
        let x = array![[0.7, -0.3]];
        let trace = net.forward(x.view()).unwrap();
        let y = trace.output.clone();
        let mut grad = net.zero_grad();
        net.backward(&trace, y.clone(), &mut grad, false);
        let expect = y.t().dot(&x);
        assert_eq!(grad.layers[0].weight, expect);
        assert_eq!(grad.layers[0].bias, y.row(0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let spec = NetSpec::new(vec![3, 6, 6, 2]).unwrap();
        let net = Mlp::init(&spec, 21);
        let x = array![[0.3, -0.4, 0.9], [0.2, 0.8, -0.5]];
        let loss = |n: &Mlp| -> f64 {
            let y = n.eval(x.view()).unwrap();
            0.5 * y.iter().map(|v| v * v).sum::<f64>()
        };
        let trace = net.forward(x.view()).unwrap();
        let mut grad = net.zero_grad();
        net.backward(&trace, trace.output.clone(), &mut grad, false);
        let h = 1e-6;
        for l in 0..net.layers.len() {
            for idx in 0..net.layers[l].weight.len() {
                let mut p = net.clone();
                let mut m = net.clone();
                p.layers[l].weight.as_slice_mut().unwrap()[idx] += h;
                m.layers[l].weight.as_slice_mut().unwrap()[idx] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                let an = grad.layers[l].weight.as_slice().unwrap()[idx];
                assert!(
                    (fd - an).abs() < 1e-6 * (1.0 + an.abs()),
                    "{l}/{idx}: {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut adam = AdamState::new(AdamConfig::default());
        let mut p = vec![1.0, -2.0];
        adam.update(&mut [&mut p[..]], &[&[0.0, 0.0][..]]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_constant_gradient_moves_by_lr_against_sign() {
        let mut adam = AdamState::new(AdamConfig::default());
        let mut p = vec![0.0, 0.0];
        let g = [3.0, -0.01];
        let mut last = p.clone();
        for _ in 0..200 {
            last.copy_from_slice(&p);
            adam.update(&mut [&mut p[..]], &[&g[..]]).unwrap();
        }
        assert_abs_diff_eq!(p[0] - last[0], -1e-3, epsilon = 1e-8);
        assert_abs_diff_eq!(p[1] - last[1], 1e-3, epsilon = 1e-5);
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        let mut adam = AdamState::new(AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        });
        let mut p = vec![1.0, -2.0, 0.5];
        let scales = [1.0, 4.0, 0.25];
        let loss = |p: &[f64]| p.iter().zip(&scales).map(|(x, s)| s * x * x).sum::<f64>();
        let mut history = vec![loss(&p)];
        for _ in 0..10 {
            let g: Vec<f64> = p.iter().zip(&scales).map(|(x, s)| 2.0 * s * x).collect();
            adam.update(&mut [&mut p[..]], &[&g[..]]).unwrap();
            history.push(loss(&p));
        }
        for w in history[2..].windows(2) {
            assert!(w[1] < w[0], "{history:?}");
        }
    }

    #[test]
    fn init_is_deterministic() {
        let spec = NetSpec::new(vec![8, 5, 2]).unwrap();
        assert_eq!(Mlp::init(&spec, 3), Mlp::init(&spec, 3));
        assert_ne!(Mlp::init(&spec, 3), Mlp::init(&spec, 4));
    }
}
