//! The bias-free discriminator `D = a_L ∘ l_L ∘ … ∘ a_1 ∘ l_1`.
//!
//! Layers are dense (`y = W x`) or convolutional; every activation between
//! layers is ReLU or leaky ReLU and the last one is sigmoid or identity.
//! Values flow between layers as flat vectors (a conv layer reads and writes
//! its `c×H×W` block in row-major order), so a dense head can sit directly on
//! a conv trunk.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::conv::{conv2d_adjoint_raw, conv2d_kernel_grad_raw, conv2d_raw, ConvGeometry, KernelShape};
use crate::error::{shape_err, Error, Result};
use crate::init::{init_weights, InitScheme};
use crate::power::{power_iteration, ConvOp, DenseOp, IterMode, LinearOperator, PowerIterState};
use crate::rng::Rng;
use crate::specnorm::NormMode;
use crate::tensor::{dot, matvec, matvec_t, norm, Tensor};

/// Largest value of `|σ''(z)|` for the logistic sigmoid, `1/(6√3)`.
pub const SIGMOID_MAX_CURVATURE: f64 = 0.096_225_044_864_937_63;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    ReLU,
    LeakyReLU(f64),
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn lipschitz(&self) -> f64 {
        match self {
            Activation::Sigmoid => 0.25,
            _ => 1.0,
        }
    }

    pub fn is_piecewise_linear(&self) -> bool {
        matches!(self, Activation::ReLU | Activation::LeakyReLU(_))
    }

    pub fn apply(&self, z: f64) -> f64 {
        match *self {
            Activation::ReLU => z.max(0.0),
            Activation::LeakyReLU(a) => {
                if z > 0.0 {
                    z
                } else {
                    a * z
                }
            }
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative; the ReLU kink at 0 takes the left slope.
    pub fn derivative(&self, z: f64) -> f64 {
        match *self {
            Activation::ReLU => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyReLU(a) => {
                if z > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn second_derivative(&self, z: f64) -> f64 {
        match *self {
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            _ => 0.0,
        }
    }

    /// Upper bound on `|a''|`, the Hessian of the output w.r.t. the last
    /// pre-activation.
    pub fn max_curvature(&self) -> f64 {
        match self {
            Activation::Sigmoid => SIGMOID_MAX_CURVATURE,
            _ => 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if let Activation::LeakyReLU(a) = *self {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Precondition(format!(
                    "leaky ReLU slope must lie in (0, 1), got {a}"
                )));
            }
        }
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::ReLU => write!(f, "relu"),
            Activation::LeakyReLU(a) => write!(f, "lrelu:{a}"),
            Activation::Sigmoid => write!(f, "sigmoid"),
            Activation::Identity => write!(f, "identity"),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let act = match s {
            "relu" => Activation::ReLU,
            "sigmoid" => Activation::Sigmoid,
            "identity" => Activation::Identity,
            "lrelu" => Activation::LeakyReLU(0.1),
            _ => match s.strip_prefix("lrelu:") {
                Some(a) => Activation::LeakyReLU(
                    a.parse()
                        .map_err(|_| Error::Format(format!("bad leaky slope in {s:?}")))?,
                ),
                None => return Err(Error::Format(format!("unknown activation {s:?}"))),
            },
        };
        act.validate()?;
        Ok(act)
    }
}

impl Serialize for Activation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Activation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerKind {
    /// `out × in` weight matrix.
    Dense { inp: usize, out: usize },
    Conv { kernel: KernelShape, geom: ConvGeometry },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub weights: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn dense(weights: Tensor, activation: Activation) -> Result<Self> {
        let (out, inp) = weights.dims2()?;
        activation.validate()?;
        Ok(Self {
            kind: LayerKind::Dense { inp, out },
            weights,
            activation,
        })
    }

    pub fn conv(weights: Tensor, geom: ConvGeometry, activation: Activation) -> Result<Self> {
        let kernel = KernelShape::of(&weights)?;
        geom.check(&kernel)?;
        activation.validate()?;
        Ok(Self {
            kind: LayerKind::Conv { kernel, geom },
            weights,
            activation,
        })
    }

    pub fn input_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense { inp, .. } => inp,
            LayerKind::Conv { geom, .. } => geom.input_len(),
        }
    }

    pub fn output_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense { out, .. } => out,
            LayerKind::Conv { kernel, geom } => geom
                .output_shape(&kernel)
                .map(|s| s.iter().product())
                .unwrap_or(0),
        }
    }

    /// `(n_i, m_i)`: fan-in and fan-out.
    pub fn fans(&self) -> (usize, usize) {
        match self.kind {
            LayerKind::Dense { inp, out } => (inp, out),
            LayerKind::Conv { kernel, .. } => (kernel.fan_in(), kernel.fan_out()),
        }
    }

    /// Shape of the matrix whose entries the variance bounds refer to
    /// (`W` itself, or the out-grouped reshape of a kernel).
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.kind {
            LayerKind::Dense { inp, out } => (out, inp),
            LayerKind::Conv { kernel, .. } => (kernel.c_out, kernel.fan_in()),
        }
    }

    pub fn geometry(&self) -> Option<ConvGeometry> {
        match self.kind {
            LayerKind::Conv { geom, .. } => Some(geom),
            LayerKind::Dense { .. } => None,
        }
    }

    /// `l_w(x)`, the pre-activation.
    pub fn linear(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            LayerKind::Dense { inp, out } => matvec(self.weights.data(), out, inp, x),
            LayerKind::Conv { kernel, geom } => conv2d_raw(x, self.weights.data(), &kernel, &geom),
        }
    }

    /// `l_wᵀ(y)`.
    pub fn linear_adjoint(&self, y: &[f64]) -> Vec<f64> {
        match self.kind {
            LayerKind::Dense { inp, out } => matvec_t(self.weights.data(), out, inp, y),
            LayerKind::Conv { kernel, geom } => {
                conv2d_adjoint_raw(y, self.weights.data(), &kernel, &geom)
            }
        }
    }

    /// Gradient of `⟨delta, l_w(input)⟩` with respect to `w`, in the weight
    /// tensor's layout.
    pub fn weight_grad(&self, input: &[f64], delta: &[f64]) -> Vec<f64> {
        match self.kind {
            LayerKind::Dense { inp, out } => {
                let mut g = vec![0.0; out * inp];
                for (row, &d) in g.chunks_exact_mut(inp).zip(delta) {
                    if d != 0.0 {
                        row.iter_mut().zip(input).for_each(|(gi, xi)| *gi = d * xi);
                    }
                }
                g
            }
            LayerKind::Conv { kernel, geom } => conv2d_kernel_grad_raw(input, delta, &kernel, &geom),
        }
    }

    /// The strict operator `x ↦ l_w(x)`.
    pub fn operator(&self) -> LayerOp<'_> {
        match self.kind {
            LayerKind::Dense { inp, out } => {
                LayerOp::Dense(DenseOp::new(self.weights.data(), out, inp).expect("validated layer"))
            }
            LayerKind::Conv { kernel, geom } => {
                LayerOp::Conv(ConvOp::new(self.weights.data(), kernel, geom).expect("validated layer"))
            }
        }
    }

    /// Strict operator norm `||l_w||`, converged from a seeded start.
    pub fn strict_sigma(&self, seed: u64) -> f64 {
        let op = self.operator();
        let mut st = PowerIterState::for_op(&op, &mut Rng::new(seed));
        power_iteration(&op, IterMode::EXACT, &mut st)
            .map(|r| r.sigma)
            .unwrap_or(0.0)
    }

    pub fn with_weights(&self, weights: Tensor) -> Result<Self> {
        if weights.shape() != self.weights.shape() {
            return Err(shape_err(format!(
                "replacement weights {:?} do not match {:?}",
                weights.shape(),
                self.weights.shape()
            )));
        }
        Ok(Self {
            kind: self.kind,
            weights,
            activation: self.activation,
        })
    }
}

pub enum LayerOp<'a> {
    Dense(DenseOp<'a>),
    Conv(ConvOp<'a>),
}

impl LinearOperator for LayerOp<'_> {
    fn input_len(&self) -> usize {
        match self {
            LayerOp::Dense(op) => op.input_len(),
            LayerOp::Conv(op) => op.input_len(),
        }
    }
    fn output_len(&self) -> usize {
        match self {
            LayerOp::Dense(op) => op.output_len(),
            LayerOp::Conv(op) => op.output_len(),
        }
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            LayerOp::Dense(op) => op.apply(x),
            LayerOp::Conv(op) => op.apply(x),
        }
    }
    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        match self {
            LayerOp::Dense(op) => op.adjoint(y),
            LayerOp::Conv(op) => op.adjoint(y),
        }
    }
}

/// Ordered bias-free layers. Internal activations are ReLU/leaky ReLU, the
/// last activation is sigmoid or identity, and the output is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    pub norm: NormMode,
}

impl Network {
    pub fn new(layers: Vec<Layer>, norm: NormMode) -> Result<Self> {
        if layers.is_empty() {
            return Err(shape_err("network needs at least one layer"));
        }
        let last = layers.len() - 1;
        for (i, layer) in layers.iter().enumerate() {
            let ok = if i == last {
                matches!(layer.activation, Activation::Sigmoid | Activation::Identity)
            } else {
                layer.activation.is_piecewise_linear()
            };
            if !ok {
                return Err(Error::Precondition(format!(
                    "layer {i} activation {} not allowed ({})",
                    layer.activation,
                    if i == last {
                        "final must be sigmoid or identity"
                    } else {
                        "internal must be relu or lrelu"
                    }
                )));
            }
            if i > 0 && layers[i - 1].output_len() != layer.input_len() {
                return Err(shape_err(format!(
                    "layer {} outputs {} values but layer {i} expects {}",
                    i - 1,
                    layers[i - 1].output_len(),
                    layer.input_len()
                )));
            }
        }
        if layers[last].output_len() != 1 {
            return Err(shape_err("last layer must produce a scalar"));
        }
        norm.validate()?;
        Ok(Self { layers, norm })
    }

    /// Dense network with the given widths, e.g. `[2, 64, 64, 1]`.
    pub fn dense(
        widths: &[usize],
        hidden: Activation,
        last: Activation,
        init: &InitScheme,
        rng: &mut Rng,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(shape_err("need at least input and output widths"));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let w = init_weights(&[widths[i + 1], widths[i]], init, rng)?;
                Layer::dense(w, if i + 1 == n { last } else { hidden })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, NormMode::default())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].input_len()
    }

    pub fn final_activation(&self) -> Activation {
        self.layers[self.layers.len() - 1].activation
    }

    /// `∏ Lip(a_i)`.
    pub fn lipschitz_product(&self) -> f64 {
        self.layers.iter().map(|l| l.activation.lipschitz()).product()
    }

    pub fn weights(&self) -> Vec<&Tensor> {
        self.layers.iter().map(|l| &l.weights).collect()
    }

    pub fn with_weights(&self, weights: Vec<Tensor>) -> Result<Self> {
        if weights.len() != self.layers.len() {
            return Err(shape_err("weight count does not match layer count"));
        }
        let layers = self
            .layers
            .iter()
            .zip(weights)
            .map(|(l, w)| l.with_weights(w))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            norm: self.norm,
        })
    }

    pub fn with_norm(mut self, norm: NormMode) -> Result<Self> {
        norm.validate()?;
        self.norm = norm;
        Ok(self)
    }

    /// Multiplies layer `i`'s weights by `c[i]`.
    pub fn rescaled(&self, c: &[f64]) -> Result<Self> {
        if c.len() != self.layers.len() {
            return Err(shape_err("one scale per layer required"));
        }
        self.with_weights(
            self.layers
                .iter()
                .zip(c)
                .map(|(l, &ci)| l.weights.scaled(ci))
                .collect(),
        )
    }

    /// Strict per-layer operator norms of the current weights.
    pub fn strict_sigmas(&self) -> Vec<f64> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.strict_sigma(0x5eed_0000 + i as u64))
            .collect()
    }

    pub fn architecture(&self) -> Architecture {
        let last = self.layers.len() - 1;
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let activation = (i != last).then_some(l.activation);
                match l.kind {
                    LayerKind::Dense { inp, out } => LayerSpec::Dense {
                        inp,
                        out,
                        activation,
                    },
                    LayerKind::Conv { kernel, geom } => LayerSpec::Conv {
                        c_out: kernel.c_out,
                        c_in: kernel.c_in,
                        k_h: kernel.k_h,
                        k_w: kernel.k_w,
                        stride: geom.stride,
                        pad: geom.pad,
                        input: geom.input,
                        activation,
                    },
                }
            })
            .collect();
        Architecture {
            layers,
            final_activation: self.final_activation(),
        }
    }
}

/// Network architecture JSON:
///
/// ```json
/// {"layers": [{"kind": "conv", "c_out": 4, "c_in": 1, "k_h": 3, "k_w": 3,
///              "stride": 1, "pad": 1, "input": [1, 8, 8], "activation": "lrelu:0.1"},
///             {"kind": "dense", "in": 256, "out": 1}],
///  "final": "identity"}
/// ```
///
/// The last layer's activation comes from `final`; giving it an
/// `activation` as well is an error unless the two agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub layers: Vec<LayerSpec>,
    #[serde(rename = "final")]
    pub final_activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense {
        #[serde(rename = "in")]
        inp: usize,
        out: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        activation: Option<Activation>,
    },
    Conv {
        c_out: usize,
        c_in: usize,
        k_h: usize,
        k_w: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        input: [usize; 3],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        activation: Option<Activation>,
    },
}

fn one() -> usize {
    1
}

impl LayerSpec {
    fn weight_dims(&self) -> Vec<usize> {
        match *self {
            LayerSpec::Dense { inp, out, .. } => vec![out, inp],
            LayerSpec::Conv {
                c_out,
                c_in,
                k_h,
                k_w,
                ..
            } => vec![c_out, c_in, k_h, k_w],
        }
    }

    fn activation(&self) -> Option<Activation> {
        match self {
            LayerSpec::Dense { activation, .. } | LayerSpec::Conv { activation, .. } => *activation,
        }
    }

    fn build(&self, weights: Tensor, activation: Activation) -> Result<Layer> {
        match *self {
            LayerSpec::Dense { .. } => Layer::dense(weights, activation),
            LayerSpec::Conv {
                stride, pad, input, ..
            } => Layer::conv(weights, ConvGeometry::new(input, stride, pad), activation),
        }
    }
}

impl Architecture {
    fn activations(&self) -> Result<Vec<Activation>> {
        let last = self.layers.len().saturating_sub(1);
        self.layers
            .iter()
            .enumerate()
            .map(|(i, spec)| match (i == last, spec.activation()) {
                (true, None) => Ok(self.final_activation),
                (true, Some(a)) if a == self.final_activation => Ok(a),
                (true, Some(a)) => Err(Error::Format(format!(
                    "last layer activation {a} conflicts with final {}",
                    self.final_activation
                ))),
                (false, Some(a)) => Ok(a),
                (false, None) => Err(Error::Format(format!("layer {i} needs an activation"))),
            })
            .collect()
    }

    pub fn weight_dims(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(LayerSpec::weight_dims).collect()
    }

    /// Builds a network with freshly initialized weights.
    pub fn init(&self, scheme: &InitScheme, rng: &mut Rng) -> Result<Network> {
        let weights = self
            .layers
            .iter()
            .map(|s| init_weights(&s.weight_dims(), scheme, rng))
            .collect::<Result<Vec<_>>>()?;
        self.with_weights(weights)
    }

    pub fn with_weights(&self, weights: Vec<Tensor>) -> Result<Network> {
        if weights.len() != self.layers.len() {
            return Err(shape_err("weight count does not match architecture"));
        }
        let acts = self.activations()?;
        let layers = self
            .layers
            .iter()
            .zip(weights)
            .zip(acts)
            .map(|((spec, w), a)| {
                if w.shape() != spec.weight_dims() {
                    return Err(shape_err(format!(
                        "weights {:?} do not match layer dims {:?}",
                        w.shape(),
                        spec.weight_dims()
                    )));
                }
                spec.build(w, a)
            })
            .collect::<Result<Vec<_>>>()?;
        Network::new(layers, NormMode::default())
    }
}

/// Cached internals of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    /// `o_l^t`, pre-activations, one per layer.
    pub pre: Vec<Vec<f64>>,
    /// `o_a^t`, post-activations, one per layer.
    pub post: Vec<Vec<f64>>,
    pub output: f64,
}

impl ForwardTrace {
    /// Input to layer `t` (`o_a^{t-1}`, with `o_a^0 = x`).
    pub fn layer_input(&self, t: usize) -> &[f64] {
        if t == 0 {
            &self.input
        } else {
            &self.post[t - 1]
        }
    }
}

pub fn forward(net: &Network, x: &[f64]) -> Result<ForwardTrace> {
    if x.len() != net.input_len() {
        return Err(shape_err(format!(
            "input has {} entries, network expects {}",
            x.len(),
            net.input_len()
        )));
    }
    let mut pre = Vec::with_capacity(net.depth());
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(net.depth());
    for layer in net.layers() {
        let input = post.last().map_or(x, |v| v.as_slice());
        let z = layer.linear(input);
        let a: Vec<f64> = z.iter().map(|&zi| layer.activation.apply(zi)).collect();
        pre.push(z);
        post.push(a);
    }
    let output = post.last().expect("nonempty network")[0];
    if !output.is_finite() {
        return Err(Error::NonFinite("forward"));
    }
    Ok(ForwardTrace {
        input: x.to_vec(),
        pre,
        post,
        output,
    })
}

/// `D(x)` without keeping the trace.
pub fn output(net: &Network, x: &[f64]) -> Result<f64> {
    forward(net, x).map(|t| t.output)
}

/// Analytic gradients of `D(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub grad_x: Vec<f64>,
    /// `∇_{w_t} D`, shaped like each layer's weights.
    pub grads_w: Vec<Tensor>,
    /// `∇_{o_l^t} D`.
    pub grad_pre: Vec<Vec<f64>>,
    /// `∇_{o_a^t} D`.
    pub grad_post: Vec<Vec<f64>>,
}

impl Gradients {
    /// `||∇_θ D||_F` over all layers.
    pub fn theta_norm(&self) -> f64 {
        self.grads_w
            .iter()
            .map(|g| g.frobenius().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn layer_norms(&self) -> Vec<f64> {
        self.grads_w.iter().map(Tensor::frobenius).collect()
    }
}

pub fn backward(net: &Network, trace: &ForwardTrace) -> Result<Gradients> {
    let depth = net.depth();
    if trace.pre.len() != depth {
        return Err(shape_err("trace does not belong to this network"));
    }
    let mut grad_pre = vec![Vec::new(); depth];
    let mut grad_post = vec![Vec::new(); depth];
    let mut grads_w = Vec::with_capacity(depth);
    let mut upstream = vec![1.0];
    for t in (0..depth).rev() {
        let layer = &net.layers()[t];
        let delta: Vec<f64> = upstream
            .iter()
            .zip(&trace.pre[t])
            .map(|(g, &z)| g * layer.activation.derivative(z))
            .collect();
        let gw = layer.weight_grad(trace.layer_input(t), &delta);
        grads_w.push(Tensor::new(layer.weights.shape().to_vec(), gw)?);
        let next = layer.linear_adjoint(&delta);
        grad_post[t] = std::mem::replace(&mut upstream, next);
        grad_pre[t] = delta;
    }
    grads_w.reverse();
    Ok(Gradients {
        grad_x: upstream,
        grads_w,
        grad_pre,
        grad_post,
    })
}

/// Forward then backward.
pub fn gradients(net: &Network, x: &[f64]) -> Result<(ForwardTrace, Gradients)> {
    let trace = forward(net, x)?;
    let grads = backward(net, &trace)?;
    Ok((trace, grads))
}

/// `||x||·∏Lip(a_i)·∏σ_i / σ_t`, the bound on `||∇_{w_t} D(x)||_F`.
pub fn layer_grad_bound(net: &Network, x: &[f64], t: usize, sigmas: &[f64]) -> Result<f64> {
    if sigmas.len() != net.depth() || t >= net.depth() {
        return Err(shape_err("need one sigma per layer and t < L"));
    }
    if sigmas[t] <= 0.0 {
        return Err(Error::UndefinedBound { layer: t });
    }
    let others: f64 = sigmas
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != t)
        .map(|(_, s)| s)
        .product();
    Ok(norm(x) * net.lipschitz_product() * others)
}

/// `√L·||x||·∏Lip(a_i)`, the bound on `||∇_θ D(x)||_F` when every `σ_i ≤ 1`.
pub fn overall_grad_bound(net: &Network, x: &[f64]) -> f64 {
    (net.depth() as f64).sqrt() * norm(x) * net.lipschitz_product()
}

/// Sign pattern of every piecewise-linear pre-activation.
fn kink_pattern(net: &Network, trace: &ForwardTrace) -> Vec<bool> {
    net.layers()
        .iter()
        .zip(&trace.pre)
        .filter(|(l, _)| l.activation.is_piecewise_linear())
        .flat_map(|(_, z)| z.iter().map(|&zi| zi > 0.0))
        .collect()
}

/// Smallest `|o_l^t|` over all piecewise-linear units, i.e. how close `x` is
/// to a kink.
pub fn kink_margin(net: &Network, trace: &ForwardTrace) -> f64 {
    net.layers()
        .iter()
        .zip(&trace.pre)
        .filter(|(l, _)| l.activation.is_piecewise_linear())
        .flat_map(|(_, z)| z.iter().map(|zi| zi.abs()))
        .fold(f64::INFINITY, f64::min)
}

pub const DEFAULT_HVP_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Hvp {
    pub value: Tensor,
    /// Step actually used; smaller than requested when `±h·v` crossed a kink.
    pub step: f64,
}

fn layer_grad_at(net: &Network, x: &[f64], t: usize, w: Tensor) -> Result<(Vec<bool>, Tensor)> {
    let mut weights: Vec<Tensor> = net.weights().into_iter().cloned().collect();
    weights[t] = w;
    let perturbed = net.with_weights(weights)?;
    let trace = forward(&perturbed, x)?;
    let pattern = kink_pattern(&perturbed, &trace);
    let mut g = backward(&perturbed, &trace)?;
    Ok((pattern, g.grads_w.swap_remove(t)))
}

/// Central-difference Hessian-vector product of `D(x)` with respect to the
/// weights of layer `t`, all other weights (and any normalization divisor)
/// held fixed.
///
/// If `w_t ± h·v` changes the ReLU activation pattern the step is divided by
/// ten, down to `1e-12`, so the difference does not straddle a kink.
pub fn hvp_detail(net: &Network, x: &[f64], t: usize, v: &Tensor, h: f64) -> Result<Hvp> {
    let w = &net.layers().get(t).ok_or_else(|| shape_err("layer index"))?.weights;
    if v.shape() != w.shape() {
        return Err(shape_err("direction must be shaped like the layer weights"));
    }
    if v.data().iter().all(|&x| x == 0.0) {
        return Ok(Hvp {
            value: Tensor::zeros(w.shape()),
            step: h,
        });
    }
    let centre = kink_pattern(net, &forward(net, x)?);
    let mut step = h;
    loop {
        let plus = Tensor::new(
            w.shape().to_vec(),
            w.data().iter().zip(v.data()).map(|(a, b)| a + step * b).collect(),
        )?;
        let minus = Tensor::new(
            w.shape().to_vec(),
            w.data().iter().zip(v.data()).map(|(a, b)| a - step * b).collect(),
        )?;
        let (pp, gp) = layer_grad_at(net, x, t, plus)?;
        let (pm, gm) = layer_grad_at(net, x, t, minus)?;
        if (pp == centre && pm == centre) || step < 1e-12 {
            let value = gp
                .data()
                .iter()
                .zip(gm.data())
                .map(|(a, b)| (a - b) / (2.0 * step))
                .collect();
            return Ok(Hvp {
                value: Tensor::new(w.shape().to_vec(), value)?,
                step,
            });
        }
        step /= 10.0;
    }
}

pub fn hvp(net: &Network, x: &[f64], t: usize, v: &Tensor, h: f64) -> Result<Tensor> {
    hvp_detail(net, x, t, v, h).map(|r| r.value)
}

/// The layer-`t` Hessian as a symmetric operator for power iteration.
struct HessianOp<'a> {
    net: &'a Network,
    x: &'a [f64],
    t: usize,
    h: f64,
    shape: Vec<usize>,
}

impl LinearOperator for HessianOp<'_> {
    fn input_len(&self) -> usize {
        self.shape.iter().product()
    }
    fn output_len(&self) -> usize {
        self.input_len()
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let v = Tensor::new(self.shape.clone(), v.to_vec()).expect("direction shape");
        hvp(self.net, self.x, self.t, &v, self.h)
            .expect("validated network")
            .into_data()
    }
    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        self.apply(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HessianEstimate {
    pub sigma: f64,
    pub iterations: usize,
    /// False when power iteration stopped at `iters` without settling.
    pub converged: bool,
}

/// Spectral norm of `H_{w_t}(D)(x)` by power iteration over [`hvp`].
pub fn hessian_sigma_estimate(net: &Network, x: &[f64], t: usize, iters: usize) -> Result<HessianEstimate> {
    let layer = net.layers().get(t).ok_or_else(|| shape_err("layer index"))?;
    forward(net, x)?;
    let op = HessianOp {
        net,
        x,
        t,
        h: DEFAULT_HVP_STEP,
        shape: layer.weights.shape().to_vec(),
    };
    let scale = dot(x, x).max(1e-300);
    let mode = IterMode::Converge {
        tol: 1e-10 * scale,
        max_iters: iters,
    };
    let mut st = PowerIterState::for_op(&op, &mut Rng::new(0x4e55 + t as u64));
    let r = power_iteration(&op, mode, &mut st)?;
    Ok(HessianEstimate {
        sigma: r.sigma,
        iterations: r.iterations,
        converged: r.converged,
    })
}
