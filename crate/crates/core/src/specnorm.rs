//! Spectral-norm estimators and the weight normalizers built on them.
//!
//! For a kernel `c_out×c_in×k_h×k_w` there are three divisors:
//!
//! * `SN_w`: `σ(W₁)` with `W₁` the `c_out × (c_in·k_h·k_w)` reshape,
//! * `SN_Conv`: the operator norm of the convolution over a fixed input,
//! * `BSN`: `(σ(W₁) + σ(W₂))/2` with `W₂` the `c_in × (c_out·k_h·k_w)`
//!   reshape.
//!
//! For a dense layer every mode reduces to the matrix spectral norm.
//! Normalization is a forward-time reparameterization: the effective weight
//! is `s·w/(divisor + ε)` and the raw weight is never modified.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conv::{conv2d_kernel_grad_raw, ConvGeometry, KernelShape};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Layer, Network};
use crate::power::{power_iteration, ConvOp, DenseOp, IterMode, LinearOperator, PowerIterState};
use crate::rng::Rng;
use crate::tensor::{dot, Tensor};

/// Floor added to every divisor.
pub const DIVISOR_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormKind {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "sn_w")]
    SNw,
    #[serde(rename = "sn_conv")]
    SNConv,
    #[serde(rename = "bsn")]
    BSN,
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::None => "none",
            NormKind::SNw => "sn_w",
            NormKind::SNConv => "sn_conv",
            NormKind::BSN => "bsn",
        })
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormKind::None),
            "sn_w" | "sn" | "snw" => Ok(NormKind::SNw),
            "sn_conv" | "snconv" => Ok(NormKind::SNConv),
            "bsn" => Ok(NormKind::BSN),
            _ => Err(Error::Format(format!("unknown norm mode {s:?}"))),
        }
    }
}

/// Which divisor to use plus the scale `s` applied afterwards. With
/// `kind = None` the scale is still applied as a plain multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormMode {
    pub kind: NormKind,
    #[serde(default = "unit_scale")]
    pub scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl Default for NormMode {
    fn default() -> Self {
        Self::new(NormKind::None)
    }
}

impl NormMode {
    pub fn new(kind: NormKind) -> Self {
        Self { kind, scale: 1.0 }
    }

    pub fn scaled(kind: NormKind, scale: f64) -> Self {
        Self { kind, scale }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Precondition(format!(
                "scale must be > 0, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    /// `W₁`: `c_out × (c_in·k_h·k_w)`.
    OutGrouped,
    /// `W₂`: `c_in × (c_out·k_h·k_w)`.
    InGrouped,
}

fn kernel_shape_of(kernel: &Tensor) -> Result<KernelShape> {
    if kernel.rank() != 4 {
        return Err(shape_err(format!(
            "reshape needs a rank-4 kernel, got {:?}",
            kernel.shape()
        )));
    }
    KernelShape::of(kernel)
}

/// In-grouped data: row `ci`, column `co·k_h·k_w + tap`.
fn in_grouped_data(data: &[f64], ks: &KernelShape) -> Vec<f64> {
    let taps = ks.taps();
    let mut out = vec![0.0; data.len()];
    for co in 0..ks.c_out {
        for ci in 0..ks.c_in {
            let src = (co * ks.c_in + ci) * taps;
            let dst = ci * ks.c_out * taps + co * taps;
            out[dst..dst + taps].copy_from_slice(&data[src..src + taps]);
        }
    }
    out
}

/// Inverse of [`in_grouped_data`].
fn from_in_grouped(data: &[f64], ks: &KernelShape) -> Vec<f64> {
    let taps = ks.taps();
    let mut out = vec![0.0; data.len()];
    for co in 0..ks.c_out {
        for ci in 0..ks.c_in {
            let dst = (co * ks.c_in + ci) * taps;
            let src = ci * ks.c_out * taps + co * taps;
            out[dst..dst + taps].copy_from_slice(&data[src..src + taps]);
        }
    }
    out
}

pub fn reshape_kernel(kernel: &Tensor, grouping: Grouping) -> Result<Tensor> {
    let ks = kernel_shape_of(kernel)?;
    match grouping {
        Grouping::OutGrouped => Tensor::matrix(ks.c_out, ks.fan_in(), kernel.data().to_vec()),
        Grouping::InGrouped => Tensor::matrix(ks.c_in, ks.fan_out(), in_grouped_data(kernel.data(), &ks)),
    }
}

/// Matrix view of a weight tensor under `grouping`; a dense `m×n` weight is
/// returned as is for out-grouped and transposed for in-grouped.
fn grouped_matrix(weights: &Tensor, grouping: Grouping) -> Result<(Vec<f64>, usize, usize)> {
    match weights.rank() {
        2 => {
            let (r, c) = weights.dims2()?;
            Ok(match grouping {
                Grouping::OutGrouped => (weights.data().to_vec(), r, c),
                Grouping::InGrouped => (weights.transpose()?.into_data(), c, r),
            })
        }
        4 => {
            let m = reshape_kernel(weights, grouping)?;
            let (r, c) = m.dims2()?;
            Ok((m.into_data(), r, c))
        }
        _ => Err(shape_err(format!(
            "weights must be a matrix or a kernel, got {:?}",
            weights.shape()
        ))),
    }
}

fn fresh_state<'a>(slot: &'a mut Option<PowerIterState>, op: &impl LinearOperator, seed: u64) -> &'a mut PowerIterState {
    if !slot.as_ref().is_some_and(|s| s.fits(op)) {
        *slot = Some(PowerIterState::for_op(op, &mut Rng::new(seed)));
    }
    slot.as_mut().expect("just filled")
}

/// `σ` of the grouped reshape of `kernel` (a kernel or a dense matrix).
pub fn kernel_sigma(kernel: &Tensor, grouping: Grouping, mode: IterMode, state: &mut PowerIterState) -> Result<f64> {
    if grouping == Grouping::OutGrouped && matches!(kernel.rank(), 2 | 4) {
        let rows = kernel.shape()[0];
        let op = DenseOp::new(kernel.data(), rows, kernel.len() / rows)?;
        return Ok(power_iteration(&op, mode, state)?.sigma);
    }
    let (data, r, c) = grouped_matrix(kernel, grouping)?;
    let op = DenseOp::new(&data, r, c)?;
    Ok(power_iteration(&op, mode, state)?.sigma)
}

/// Operator norm of the convolution with `kernel` over `input_shape`.
pub fn conv_sigma(
    kernel: &Tensor,
    input_shape: [usize; 3],
    stride: usize,
    pad: usize,
    mode: IterMode,
    state: &mut PowerIterState,
) -> Result<f64> {
    let ks = KernelShape::of(kernel)?;
    let op = ConvOp::new(kernel.data(), ks, ConvGeometry::new(input_shape, stride, pad))?;
    Ok(power_iteration(&op, mode, state)?.sigma)
}

/// Per-layer power-iteration states, one slot per σ variant. Slots are
/// created lazily from a seed derived from the layer index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SigmaStates {
    pub w1: Option<PowerIterState>,
    pub w2: Option<PowerIterState>,
    pub conv: Option<PowerIterState>,
    seed: u64,
}

impl SigmaStates {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Default::default()
        }
    }

    fn w1_sigma(&mut self, w: &Tensor, mode: IterMode) -> Result<f64> {
        let rows = w.shape()[0];
        let op = DenseOp::new(w.data(), rows, w.len() / rows)?;
        let st = fresh_state(&mut self.w1, &op, self.seed);
        Ok(power_iteration(&op, mode, st)?.sigma)
    }

    fn w2_sigma(&mut self, w: &Tensor, mode: IterMode) -> Result<f64> {
        let (data, r, c) = grouped_matrix(w, Grouping::InGrouped)?;
        let op = DenseOp::new(&data, r, c)?;
        let st = fresh_state(&mut self.w2, &op, self.seed ^ 0x2);
        Ok(power_iteration(&op, mode, st)?.sigma)
    }

    fn conv_sigma(&mut self, w: &Tensor, geom: ConvGeometry, mode: IterMode) -> Result<f64> {
        let op = ConvOp::new(w.data(), KernelShape::of(w)?, geom)?;
        let st = fresh_state(&mut self.conv, &op, self.seed ^ 0x3);
        Ok(power_iteration(&op, mode, st)?.sigma)
    }
}

/// One state set per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStates {
    pub layers: Vec<SigmaStates>,
}

impl NormStates {
    pub fn new(num_layers: usize, seed: u64) -> Self {
        Self {
            layers: (0..num_layers)
                .map(|i| SigmaStates::new(seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64)))
                .collect(),
        }
    }

    pub fn for_network(net: &Network, seed: u64) -> Self {
        Self::new(net.depth(), seed)
    }
}

/// The three σ views of one kernel plus the BSN mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaReport {
    pub sigma_w1: f64,
    pub sigma_w2: f64,
    pub sigma_conv: Option<f64>,
    pub sigma_bsn: f64,
}

/// Converged σ report for a kernel (or dense matrix); `geometry` adds the
/// strict conv operator norm.
pub fn sigma_report(weights: &Tensor, geometry: Option<ConvGeometry>, mode: IterMode, seed: u64) -> Result<SigmaReport> {
    let mut st = SigmaStates::new(seed);
    let sigma_w1 = st.w1_sigma(weights, mode)?;
    let sigma_w2 = st.w2_sigma(weights, mode)?;
    let sigma_conv = match geometry {
        Some(g) if weights.rank() == 4 => Some(st.conv_sigma(weights, g, mode)?),
        Some(_) => return Err(shape_err("conv geometry given for a dense weight")),
        None => None,
    };
    Ok(SigmaReport {
        sigma_w1,
        sigma_w2,
        sigma_conv,
        sigma_bsn: (sigma_w1 + sigma_w2) / 2.0,
    })
}

/// Divisor for one weight tensor under `kind`. Dense weights use the matrix
/// σ for every kind; conv weights need `geometry` for `SNConv`.
pub fn norm_divisor(
    weights: &Tensor,
    kind: NormKind,
    geometry: Option<ConvGeometry>,
    states: &mut SigmaStates,
    mode: IterMode,
) -> Result<f64> {
    let divisor = match (kind, weights.rank()) {
        (NormKind::None, _) => {
            return Err(Error::Precondition("norm_divisor called with mode none".into()))
        }
        (_, 2) => states.w1_sigma(weights, mode)?,
        (NormKind::SNw, 4) => states.w1_sigma(weights, mode)?,
        (NormKind::SNConv, 4) => {
            let g = geometry.ok_or_else(|| Error::Precondition("SN_Conv needs an input geometry".into()))?;
            states.conv_sigma(weights, g, mode)?
        }
        (NormKind::BSN, 4) => (states.w1_sigma(weights, mode)? + states.w2_sigma(weights, mode)?) / 2.0,
        _ => return Err(shape_err(format!("unsupported weight rank {:?}", weights.shape()))),
    };
    Ok(divisor)
}

/// Effective weights of a network after normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    /// Same architecture with `s·w/(divisor+ε)` as weights.
    pub net: Network,
    /// Divisor used per layer (`1` when the mode is `None`).
    pub divisors: Vec<f64>,
}

fn layer_divisor(layer: &Layer, index: usize, kind: NormKind, states: &mut SigmaStates, mode: IterMode) -> Result<f64> {
    if kind == NormKind::None {
        return Ok(1.0);
    }
    let d = norm_divisor(&layer.weights, kind, layer.geometry(), states, mode)?;
    if d <= 0.0 {
        return Err(Error::DivisorZero { layer: index });
    }
    Ok(d)
}

/// Computes each layer's divisor with `mode` iterations and returns the
/// reparameterized network. `net` keeps its raw weights.
pub fn apply_normalization(net: &Network, states: &mut NormStates, mode: IterMode) -> Result<Normalized> {
    if states.layers.len() != net.depth() {
        return Err(shape_err("one state set per layer required"));
    }
    let NormMode { kind, scale } = net.norm;
    let mut divisors = Vec::with_capacity(net.depth());
    let mut weights = Vec::with_capacity(net.depth());
    for (i, (layer, st)) in net.layers().iter().zip(&mut states.layers).enumerate() {
        let d = layer_divisor(layer, i, kind, st, mode)?;
        let factor = if kind == NormKind::None { scale } else { scale / (d + DIVISOR_EPS) };
        weights.push(layer.weights.scaled(factor));
        divisors.push(d);
    }
    Ok(Normalized {
        net: net.with_weights(weights)?,
        divisors,
    })
}

/// Effective network under `norm` with fully converged divisors; the
/// result carries no normalization mode of its own.
pub fn normalize_strict(net: &Network, norm: NormMode) -> Result<Network> {
    let net = net.clone().with_norm(norm)?;
    let mut states = NormStates::for_network(&net, 0);
    apply_normalization(&net, &mut states, IterMode::EXACT)?
        .net
        .with_norm(NormMode::default())
}

/// `∂divisor/∂w` using the singular vectors held in `states`. The states
/// must be converged on `weights` for the result to be the true derivative.
pub fn divisor_gradient(weights: &Tensor, kind: NormKind, geometry: Option<ConvGeometry>, states: &SigmaStates) -> Result<Tensor> {
    let missing = || Error::Precondition("power-iteration state not initialized".into());
    let outer = |st: &PowerIterState| -> Vec<f64> {
        st.u.iter()
            .flat_map(|&ui| st.v.iter().map(move |&vj| ui * vj))
            .collect()
    };
    let w1 = || -> Result<Vec<f64>> { Ok(outer(states.w1.as_ref().ok_or_else(missing)?)) };
    let data = match (kind, weights.rank()) {
        (NormKind::None, _) => vec![0.0; weights.len()],
        (_, 2) | (NormKind::SNw, 4) => w1()?,
        (NormKind::SNConv, 4) => {
            let st = states.conv.as_ref().ok_or_else(missing)?;
            let g = geometry.ok_or_else(|| Error::Precondition("SN_Conv needs an input geometry".into()))?;
            conv2d_kernel_grad_raw(&st.v, &st.u, &KernelShape::of(weights)?, &g)
        }
        (NormKind::BSN, 4) => {
            let ks = KernelShape::of(weights)?;
            let g2 = from_in_grouped(&outer(states.w2.as_ref().ok_or_else(missing)?), &ks);
            w1()?.iter().zip(&g2).map(|(a, b)| 0.5 * (a + b)).collect()
        }
        _ => return Err(shape_err("unsupported weight rank")),
    };
    Tensor::new(weights.shape().to_vec(), data)
}

/// Pulls a gradient with respect to the effective weight back to the raw
/// weight through `w_eff = s·w/(σ(w)+ε)`:
///
/// `∇_w = s/(σ+ε) · (G − ⟨G, w⟩/(σ+ε) · ∂σ/∂w)`.
pub fn raw_weight_gradient(grad_eff: &Tensor, raw: &Tensor, divisor: f64, scale: f64, dsigma: &Tensor) -> Result<Tensor> {
    if grad_eff.shape() != raw.shape() || dsigma.shape() != raw.shape() {
        return Err(shape_err("gradient, weight and dσ shapes differ"));
    }
    let d = divisor + DIVISOR_EPS;
    let proj = dot(grad_eff.data(), raw.data()) / d;
    let data = grad_eff
        .data()
        .iter()
        .zip(dsigma.data())
        .map(|(g, ds)| scale / d * (g - proj * ds))
        .collect();
    Tensor::new(raw.shape().to_vec(), data)
}

/// Gradients of `D(x)` with respect to the raw weights, including the
/// dependence of each divisor on its weight. `states` must be converged on
/// `net`'s raw weights (e.g. by a preceding `apply_normalization` in a
/// converge mode).
pub fn raw_gradients(net: &Network, normalized: &Normalized, states: &NormStates, x: &[f64]) -> Result<Vec<Tensor>> {
    let (_, g) = crate::nn::gradients(&normalized.net, x)?;
    let NormMode { kind, scale } = net.norm;
    net.layers()
        .iter()
        .zip(g.grads_w)
        .zip(&normalized.divisors)
        .zip(&states.layers)
        .map(|(((layer, ge), &d), st)| {
            if kind == NormKind::None {
                return Ok(ge.scaled(scale));
            }
            let ds = divisor_gradient(&layer.weights, kind, layer.geometry(), st)?;
            raw_weight_gradient(&ge, &layer.weights, d, scale, &ds)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::exact_sigma;
    use crate::nn::{Activation, Layer};
    use crate::tensor::norm;

    fn rand_kernel(dims: [usize; 4], seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(&dims, || rng.gaussian())
    }

    fn sigma(kernel: &Tensor, g: Grouping) -> f64 {
        let m = reshape_kernel(kernel, g).unwrap();
        let (r, c) = m.dims2().unwrap();
        let mut st = PowerIterState::seeded(c, r, 1);
        kernel_sigma(kernel, g, IterMode::EXACT, &mut st).unwrap()
    }

    #[test]
    fn scalar_kernel_reshape() {
        let k = Tensor::new(vec![1, 1, 1, 1], vec![-3.0]).unwrap();
        for g in [Grouping::OutGrouped, Grouping::InGrouped] {
            assert_eq!(reshape_kernel(&k, g).unwrap().data(), &[-3.0]);
        }
    }

    #[test]
    fn reshape_preserves_frobenius() {
        let k = rand_kernel([4, 3, 3, 2], 0);
        for g in [Grouping::OutGrouped, Grouping::InGrouped] {
            let m = reshape_kernel(&k, g).unwrap();
            assert!((m.frobenius() - k.frobenius()).abs() < 1e-12);
        }
        let w2 = reshape_kernel(&k, Grouping::InGrouped).unwrap();
        assert_eq!(w2.shape(), &[3, 4 * 3 * 2]);
        let ks = KernelShape::of(&k).unwrap();
        assert_eq!(from_in_grouped(w2.data(), &ks), k.data());
    }

    #[test]
    fn one_by_one_groupings_are_transposes() {
        let k = rand_kernel([2, 3, 1, 1], 4);
        let w1 = reshape_kernel(&k, Grouping::OutGrouped).unwrap();
        let w2 = reshape_kernel(&k, Grouping::InGrouped).unwrap();
        for co in 0..2 {
            for ci in 0..3 {
                assert_eq!(w1.data()[co * 3 + ci], w2.data()[ci * 2 + co]);
            }
        }
    }

    #[test]
    fn reshape_requires_rank_four() {
        assert!(reshape_kernel(&Tensor::zeros(&[2, 2]), Grouping::OutGrouped).is_err());
    }

    #[test]
    fn delta_kernel_has_unit_sigma() {
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        assert!((sigma(&k, Grouping::OutGrouped) - 1.0).abs() < 1e-12);
        assert!((sigma(&k, Grouping::InGrouped) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_sigma_matches_eigensolve() {
        let k = rand_kernel([4, 3, 3, 3], 0);
        for g in [Grouping::OutGrouped, Grouping::InGrouped] {
            let m = reshape_kernel(&k, g).unwrap();
            let (r, c) = m.dims2().unwrap();
            let oracle = exact_sigma(m.data(), r, c);
            assert!((sigma(&k, g) - oracle).abs() < 1e-8 * oracle);
            assert!((sigma(&k.scaled(2.0), g) - 2.0 * oracle).abs() < 1e-8 * oracle);
        }
    }

    #[test]
    fn conv_sigma_of_scalar_kernel() {
        let k = Tensor::new(vec![1, 1, 1, 1], vec![-1.5]).unwrap();
        let mut st = PowerIterState::seeded(25, 25, 0);
        let s = conv_sigma(&k, [1, 5, 5], 1, 0, IterMode::EXACT, &mut st).unwrap();
        assert!((s - 1.5).abs() < 1e-12);
    }

    #[test]
    fn bsn_divisor_is_mean_of_groupings() {
        let k = rand_kernel([4, 3, 3, 3], 0);
        let mut st = SigmaStates::new(3);
        let d = norm_divisor(&k, NormKind::BSN, None, &mut st, IterMode::EXACT).unwrap();
        let mean = (sigma(&k, Grouping::OutGrouped) + sigma(&k, Grouping::InGrouped)) / 2.0;
        assert!((d - mean).abs() < 1e-10 * mean);
        let r = sigma_report(&k, None, IterMode::EXACT, 0).unwrap();
        assert_eq!(r.sigma_bsn, (r.sigma_w1 + r.sigma_w2) / 2.0);
    }

    #[test]
    fn scalar_kernel_bsn() {
        let k = Tensor::new(vec![1, 1, 1, 1], vec![-0.75]).unwrap();
        let d = norm_divisor(&k, NormKind::BSN, None, &mut SigmaStates::new(0), IterMode::VERIFY).unwrap();
        assert!((d - 0.75).abs() < 1e-14);
    }

    #[test]
    fn dense_modes_coincide() {
        let mut rng = Rng::new(8);
        let w = Tensor::from_fn(&[16, 16], || rng.gaussian());
        let a = norm_divisor(&w, NormKind::SNw, None, &mut SigmaStates::new(1), IterMode::EXACT).unwrap();
        let b = norm_divisor(&w, NormKind::BSN, None, &mut SigmaStates::new(1), IterMode::EXACT).unwrap();
        let c = norm_divisor(&w, NormKind::SNConv, None, &mut SigmaStates::new(1), IterMode::EXACT).unwrap();
        assert!((a - b).abs() < 1e-12 * a);
        assert!((a - c).abs() < 1e-12 * a);
    }

    #[test]
    fn none_mode_is_plain_scale() {
        let mut rng = Rng::new(2);
        let net = Network::dense(&[3, 5, 1], Activation::ReLU, Activation::Identity, &crate::init::InitScheme::lecun(), &mut rng).unwrap();
        let mut st = NormStates::for_network(&net, 0);
        let n = apply_normalization(&net, &mut st, IterMode::VERIFY).unwrap();
        assert_eq!(n.net, net);
        let scaled = net.clone().with_norm(NormMode::scaled(NormKind::None, 2.0)).unwrap();
        let n = apply_normalization(&scaled, &mut st, IterMode::VERIFY).unwrap();
        assert_eq!(n.net.layers()[0].weights, net.layers()[0].weights.scaled(2.0));
    }

    #[test]
    fn zero_kernel_is_divisor_zero() {
        let w = Tensor::zeros(&[2, 3]);
        let net = Network::new(
            vec![
                Layer::dense(w, Activation::ReLU).unwrap(),
                Layer::dense(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap(), Activation::Identity).unwrap(),
            ],
            NormMode::new(NormKind::SNw),
        )
        .unwrap();
        let mut st = NormStates::for_network(&net, 0);
        assert!(matches!(
            apply_normalization(&net, &mut st, IterMode::VERIFY),
            Err(Error::DivisorZero { layer: 0 })
        ));
    }

    #[test]
    fn state_resized_when_shape_changes() {
        let mut st = SigmaStates::new(0);
        let a = rand_kernel([2, 2, 3, 3], 1);
        let b = rand_kernel([3, 2, 3, 3], 1);
        norm_divisor(&a, NormKind::SNw, None, &mut st, IterMode::VERIFY).unwrap();
        norm_divisor(&b, NormKind::SNw, None, &mut st, IterMode::VERIFY).unwrap();
        assert_eq!(st.w1.as_ref().unwrap().u.len(), 3);
    }

    #[test]
    fn divisor_gradient_matches_finite_difference() {
        let k = rand_kernel([3, 2, 3, 3], 6);
        let geom = ConvGeometry::new([2, 5, 5], 1, 1);
        for kind in [NormKind::SNw, NormKind::BSN, NormKind::SNConv] {
            let mut st = SigmaStates::new(0);
            norm_divisor(&k, kind, Some(geom), &mut st, IterMode::EXACT).unwrap();
            let g = divisor_gradient(&k, kind, Some(geom), &st).unwrap();
            let h = 1e-6;
            let mut dir = Rng::new(9);
            let v: Vec<f64> = (0..k.len()).map(|_| dir.gaussian()).collect();
            let shift = |sgn: f64| {
                let w = Tensor::new(k.shape().to_vec(), k.data().iter().zip(&v).map(|(a, b)| a + sgn * h * b).collect()).unwrap();
                norm_divisor(&w, kind, Some(geom), &mut SigmaStates::new(0), IterMode::EXACT).unwrap()
            };
            let fd = (shift(1.0) - shift(-1.0)) / (2.0 * h);
            let an = dot(g.data(), &v);
            assert!((fd - an).abs() < 1e-6 * norm(&v), "{kind}: fd {fd} vs {an}");
        }
    }
}
