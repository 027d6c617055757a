//! Executable checks for each bound: gradient norms, rescaling invariance,
//! optimal per-layer allocation, parameter variance under SN and BSN,
//! internal output/gradient bounds, the gradient-ratio scan, and the Hessian
//! bounds.
//!
//! Every check is deterministic given its inputs and seed, and returns a
//! serializable report with a `pass` flag and the extremal value measured.
//! Raw per-sample values are available through [`SuiteReport::sample_rows`]
//! for CSV export.

use rayon::prelude::*;
use serde::Serialize;

use crate::conv::KernelShape;
use crate::error::{Error, Result};
use crate::linalg::exact_sigma;
use crate::nn::{backward, forward, hessian_sigma_estimate, layer_grad_bound, overall_grad_bound, Activation, ForwardTrace, Gradients, Network};
use crate::rng::Rng;
use crate::specnorm::{reshape_kernel, Grouping};
use crate::tensor::{norm, Tensor};

/// Relative slack for the deterministic gradient and internal bounds.
pub const GRAD_BOUND_SLACK: f64 = 1e-6;
/// Relative slack for finite-difference Hessian estimates.
pub const HESSIAN_SLACK: f64 = 1e-3;
/// `||H|| < IDENTITY_HESSIAN_TOL·||x||²` counts as zero.
pub const IDENTITY_HESSIAN_TOL: f64 = 1e-5;
/// Curvature bound for a sigmoid last layer, `0.1·||x||²`.
pub const SIGMOID_HESSIAN_COEFF: f64 = 0.1;

/// Common surface used by the `verify` command.
pub trait SuiteReport: Serialize {
    fn passed(&self) -> bool;
    fn sample_header(&self) -> Vec<&'static str>;
    fn sample_rows(&self) -> Vec<Vec<f64>>;
}

/// Neumaier-compensated sum; the result depends only on the order of `xs`.
pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0_f64, 0.0_f64);
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn gaussian_inputs(dim: usize, count: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..count).map(|_| rng.gaussian_vec(dim)).collect()
}

// ---------------------------------------------------------------------------
// Internal bounds

/// Ratios `value / bound` for the four internal chains at one layer.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct InternalRatios {
    pub layer: usize,
    /// `||o_a^t||` vs `||x||·∏_{i≤t}Lip·∏_{i≤t}σ`.
    pub post: f64,
    /// `||o_l^t||` vs `||x||·∏_{i<t}Lip·∏_{i≤t}σ`.
    pub pre: f64,
    /// `||∇_{o_a^t}D||` vs `∏_{i>t}Lip·∏_{i>t}σ`.
    pub grad_post: f64,
    /// `||∇_{o_l^t}D||` vs `∏_{i≥t}Lip·∏_{i>t}σ`.
    pub grad_pre: f64,
}

impl InternalRatios {
    pub fn max(&self) -> f64 {
        self.post.max(self.pre).max(self.grad_post).max(self.grad_pre)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InternalBoundsReport {
    pub max_ratio: f64,
    pub per_layer: Vec<InternalRatios>,
    pub pass: bool,
}

fn ratio(value: f64, bound: f64) -> f64 {
    if value == 0.0 {
        0.0
    } else if bound == 0.0 {
        f64::INFINITY
    } else {
        value / bound
    }
}

fn internal_ratios(net: &Network, trace: &ForwardTrace, grads: &Gradients, sigmas: &[f64]) -> Vec<InternalRatios> {
    let lips: Vec<f64> = net.layers().iter().map(|l| l.activation.lipschitz()).collect();
    let depth = net.depth();
    let prod = |v: &[f64], r: std::ops::Range<usize>| -> f64 { v[r].iter().product() };
    let xn = norm(&trace.input);
    (0..depth)
        .map(|t| {
            let b_post = xn * prod(&lips, 0..t + 1) * prod(sigmas, 0..t + 1);
            let b_pre = xn * prod(&lips, 0..t) * prod(sigmas, 0..t + 1);
            let b_gpost = prod(&lips, t + 1..depth) * prod(sigmas, t + 1..depth);
            let b_gpre = prod(&lips, t..depth) * prod(sigmas, t + 1..depth);
            InternalRatios {
                layer: t,
                post: ratio(norm(&trace.post[t]), b_post),
                pre: ratio(norm(&trace.pre[t]), b_pre),
                grad_post: ratio(norm(&grads.grad_post[t]), b_gpost),
                grad_pre: ratio(norm(&grads.grad_pre[t]), b_gpre),
            }
        })
        .collect()
}

/// Checks the four internal-norm chains at `x` against the strict
/// per-layer `sigmas`.
pub fn check_internal_bounds(net: &Network, x: &[f64], sigmas: &[f64]) -> Result<InternalBoundsReport> {
    let trace = forward(net, x)?;
    let grads = backward(net, &trace)?;
    let per_layer = internal_ratios(net, &trace, &grads, sigmas);
    let max_ratio = per_layer.iter().map(InternalRatios::max).fold(0.0, f64::max);
    Ok(InternalBoundsReport {
        max_ratio,
        per_layer,
        pass: max_ratio <= 1.0 + GRAD_BOUND_SLACK,
    })
}

impl SuiteReport for InternalBoundsReport {
    fn passed(&self) -> bool {
        self.pass
    }
    fn sample_header(&self) -> Vec<&'static str> {
        vec!["layer", "post", "pre", "grad_post", "grad_pre"]
    }
    fn sample_rows(&self) -> Vec<Vec<f64>> {
        self.per_layer
            .iter()
            .map(|r| vec![r.layer as f64, r.post, r.pre, r.grad_post, r.grad_pre])
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Gradient bound

#[derive(Debug, Clone, Serialize)]
pub struct GradientSample {
    pub x_norm: f64,
    /// `||∇_θD|| / (√L·||x||·∏Lip)`.
    pub overall_ratio: f64,
    /// Per layer `||∇_{w_t}D|| / layer_grad_bound(t)`.
    pub layer_ratios: Vec<f64>,
    /// Per layer `||∇_{w_t}D|| / (||x||·∏Lip)`, the form that assumes
    /// every `σ_i ≤ 1`.
    pub unit_ratios: Vec<f64>,
    pub internal_max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradientBoundReport {
    pub depth: usize,
    pub final_activation: String,
    pub sigmas: Vec<f64>,
    pub max_ratio: f64,
    pub max_layer_ratio: f64,
    pub max_unit_ratio: f64,
    pub max_internal_ratio: f64,
    pub pass: bool,
    #[serde(skip)]
    pub samples: Vec<GradientSample>,
}

/// Gradient-norm bounds at the given inputs. `net` carries the effective
/// (already normalized) weights; strict σs are recomputed from them.
pub fn check_gradient_bound_on(net: &Network, inputs: &[Vec<f64>]) -> Result<GradientBoundReport> {
    let sigmas = net.strict_sigmas();
    let lip = net.lipschitz_product();
    let mut samples = Vec::with_capacity(inputs.len());
    for x in inputs {
        let trace = forward(net, x)?;
        let grads = backward(net, &trace)?;
        let xn = norm(x);
        let norms = grads.layer_norms();
        let layer_ratios = norms
            .iter()
            .enumerate()
            .map(|(t, &g)| Ok(ratio(g, layer_grad_bound(net, x, t, &sigmas)?)))
            .collect::<Result<Vec<_>>>()?;
        let unit_ratios = norms.iter().map(|&g| ratio(g, xn * lip)).collect();
        let internal_max = internal_ratios(net, &trace, &grads, &sigmas)
            .iter()
            .map(InternalRatios::max)
            .fold(0.0, f64::max);
        samples.push(GradientSample {
            x_norm: xn,
            overall_ratio: ratio(grads.theta_norm(), overall_grad_bound(net, x)),
            layer_ratios,
            unit_ratios,
            internal_max,
        });
    }
    let fold = |f: &dyn Fn(&GradientSample) -> f64| samples.iter().map(f).fold(0.0, f64::max);
    let max_ratio = fold(&|s| s.overall_ratio);
    let max_layer_ratio = fold(&|s| s.layer_ratios.iter().copied().fold(0.0, f64::max));
    let max_unit_ratio = fold(&|s| s.unit_ratios.iter().copied().fold(0.0, f64::max));
    let max_internal_ratio = fold(&|s| s.internal_max);
    let ok = |r: f64| r <= 1.0 + GRAD_BOUND_SLACK;
    Ok(GradientBoundReport {
        depth: net.depth(),
        final_activation: net.final_activation().to_string(),
        sigmas,
        max_ratio,
        max_layer_ratio,
        max_unit_ratio,
        max_internal_ratio,
        pass: ok(max_ratio) && ok(max_layer_ratio) && ok(max_internal_ratio),
        samples,
    })
}

/// [`check_gradient_bound_on`] at `num_inputs` standard Gaussian inputs.
pub fn check_gradient_bound(net: &Network, num_inputs: usize, rng: &mut Rng) -> Result<GradientBoundReport> {
    let inputs = gaussian_inputs(net.input_len(), num_inputs, rng);
    check_gradient_bound_on(net, &inputs)
}

impl SuiteReport for GradientBoundReport {
    fn passed(&self) -> bool {
        self.pass
    }
    fn sample_header(&self) -> Vec<&'static str> {
        vec!["input", "layer", "x_norm", "overall_ratio", "layer_ratio", "unit_ratio", "internal_max"]
    }
    fn sample_rows(&self) -> Vec<Vec<f64>> {
        self.samples
            .iter()
            .enumerate()
            .flat_map(|(i, s)| {
                s.layer_ratios.iter().zip(&s.unit_ratios).enumerate().map(move |(t, (&lr, &ur))| {
                    vec![i as f64, t as f64, s.x_norm, s.overall_ratio, lr, ur, s.internal_max]
                })
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Rescaling invariance

/// Positive per-layer scale factors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleVector(pub Vec<f64>);

impl ScaleVector {
    pub fn product(&self) -> f64 {
        self.0.iter().product()
    }

    /// Log-normal factors, mean-centred in log space so the product is 1.
    pub fn random_feasible(len: usize, log_std: f64, rng: &mut Rng) -> Self {
        let logs: Vec<f64> = (0..len).map(|_| log_std * rng.gaussian()).collect();
        let mean = logs.iter().sum::<f64>() / len as f64;
        Self(logs.iter().map(|l| (l - mean).exp()).collect())
    }

    fn check_feasible(&self) -> Result<()> {
        if self.0.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::Precondition("scale factors must be positive".into()));
        }
        let logsum: f64 = self.0.iter().map(|c| c.ln()).sum();
        if logsum.abs() > 1e-12 {
            return Err(Error::Precondition(format!(
                "product of scale factors is {} (must be 1)",
                self.product()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RescalingReport {
    pub scales: Vec<f64>,
    pub max_out_dev: f64,
    pub max_gradx_dev: f64,
    /// Largest deviation divided by `1 + |D(x)|`.
    pub max_rel_dev: f64,
    pub pass: bool,
    #[serde(skip)]
    pub samples: Vec<[f64; 3]>,
}

/// Compares `D` and `∇_x D` of `net` against the net with layer weights
/// `c_i·w_i`, `∏c_i = 1`.
pub fn check_rescaling_equivalence(net: &Network, c: &ScaleVector, inputs: &[Vec<f64>]) -> Result<RescalingReport> {
    c.check_feasible()?;
    if net.layers()[..net.depth() - 1]
        .iter()
        .any(|l| !l.activation.is_piecewise_linear())
    {
        return Err(Error::Precondition("internal activations must be relu/lrelu".into()));
    }
    let scaled = net.rescaled(&c.0)?;
    let mut samples = Vec::with_capacity(inputs.len());
    for x in inputs {
        let (ta, ga) = (forward(net, x)?, forward(&scaled, x)?);
        let gxa = backward(net, &ta)?.grad_x;
        let gxb = backward(&scaled, &ga)?.grad_x;
        let out_dev = (ta.output - ga.output).abs();
        let diff: Vec<f64> = gxa.iter().zip(&gxb).map(|(a, b)| a - b).collect();
        let grad_dev = norm(&diff);
        samples.push([out_dev, grad_dev, out_dev.max(grad_dev) / (1.0 + ta.output.abs())]);
    }
    let max_of = |k: usize| samples.iter().map(|s| s[k]).fold(0.0, f64::max);
    let max_rel_dev = max_of(2);
    Ok(RescalingReport {
        scales: c.0.clone(),
        max_out_dev: max_of(0),
        max_gradx_dev: max_of(1),
        max_rel_dev,
        pass: max_rel_dev < 1e-9,
        samples,
    })
}

impl SuiteReport for RescalingReport {
    fn passed(&self) -> bool {
        self.pass
    }
    fn sample_header(&self) -> Vec<&'static str> {
        vec!["input", "out_dev", "gradx_dev", "rel_dev"]
    }
    fn sample_rows(&self) -> Vec<Vec<f64>> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| vec![i as f64, s[0], s[1], s[2]])
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Optimal allocation

/// `c_t = λ/σ_t` with `λ` the geometric mean of `sigmas`.
pub fn optimal_allocation(sigmas: &[f64]) -> Result<ScaleVector> {
    if sigmas.is_empty() || sigmas.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Precondition("all sigmas must be positive".into()));
    }
    let mean_log = sigmas.iter().map(|s| s.ln()).sum::<f64>() / sigmas.len() as f64;
    Ok(ScaleVector(sigmas.iter().map(|s| (mean_log - s.ln()).exp()).collect()))
}

pub fn geometric_mean(xs: &[f64]) -> f64 {
    (xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64).exp()
}

/// Gradient-norm objective over the set where per-layer gradient norms are
/// inversely proportional to spectral norms: `F(c) = √(Σ Q²/(c_i²σ_i²))`.
pub fn allocation_objective(c: &[f64], sigmas: &[f64], q: f64) -> f64 {
    c.iter()
        .zip(sigmas)
        .map(|(ci, si)| (q / (ci * si)).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct AllocationReport {
    pub sigmas: Vec<f64>,
    pub q: f64,
    pub lambda: f64,
    pub c_opt: Vec<f64>,
    pub f_opt: f64,
    /// `√L·Q/λ`.
    pub f_closed_form: f64,
    pub min_random_f: f64,
    /// `F(c_opt) − min F(c_rand)`; never positive beyond round-off.
    pub max_improvement: f64,
    pub pass: bool,
    #[serde(skip)]
    pub samples: Vec<f64>,
}

pub fn check_allocation_optimality(sigmas: &[f64], q: f64, num_random_c: usize, rng: &mut Rng) -> Result<AllocationReport> {
    if !(q > 0.0) {
        return Err(Error::Precondition("Q must be positive".into()));
    }
    let c_opt = optimal_allocation(sigmas)?;
    let lambda = geometric_mean(sigmas);
    let f_opt = allocation_objective(&c_opt.0, sigmas, q);
    let f_closed_form = (sigmas.len() as f64).sqrt() * q / lambda;
    let samples: Vec<f64> = (0..num_random_c)
        .map(|_| {
            let c = ScaleVector::random_feasible(sigmas.len(), 1.0, rng);
            allocation_objective(&c.0, sigmas, q)
        })
        .collect();
    let min_random_f = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let max_improvement = f_opt - min_random_f;
    let tol = 1e-9 * f_closed_form.max(1.0);
    Ok(AllocationReport {
        sigmas: sigmas.to_vec(),
        q,
        lambda,
        c_opt: c_opt.0,
        f_opt,
        f_closed_form,
        min_random_f,
        max_improvement,
        pass: (f_opt - f_closed_form).abs() <= tol && max_improvement <= tol,
        samples,
    })
}

impl SuiteReport for AllocationReport {
    fn passed(&self) -> bool {
        self.pass
    }
    fn sample_header(&self) -> Vec<&'static str> {
        vec!["sample", "f_random", "f_opt"]
    }
    fn sample_rows(&self) -> Vec<Vec<f64>> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, &f)| vec![i as f64, f, self.f_opt])
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Monte-Carlo parameter variance

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryDist {
    Gaussian,
    Uniform,
}

impl std::str::FromStr for EntryDist {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(EntryDist::Gaussian),
            "uniform" => Ok(EntryDist::Uniform),
            _ => Err(Error::Format(format!("unknown distribution {s:?}"))),
        }
    }
}

impl EntryDist {
    fn draw(&self, rng: &mut Rng) -> f64 {
        match self {
            EntryDist::Gaussian => rng.gaussian(),
            EntryDist::Uniform => rng.uniform_in(-1.0, 1.0),
        }
    }
}

pub const MIN_TRIALS: usize = 1000;

/// Parameter variance of normalized random weights.
///
/// `empirical_var` is the pooled second moment of the normalized entries,
/// i.e. the variance about the distribution's exact zero mean (the entries
/// are symmetric); `empirical_mean` is reported alongside.
#[derive(Debug, Clone, Serialize)]
pub struct VarianceReport {
    pub rows: usize,
    pub cols: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelShape>,
    pub dist: EntryDist,
    pub trials: usize,
    pub empirical_var: f64,
    pub empirical_mean: f64,
    pub upper_bound: f64,
    /// `upper_bound·(1 + 3/√trials)`.
    pub threshold: f64,
    /// Scaling reference for the lower bound, up to an unknown constant.
    pub lower_qualitative: Option<f64>,
    pub pass: bool,
    #[serde(skip)]
    pub samples: Vec<f64>,
}

impl SuiteReport for VarianceReport {
    fn passed(&self) -> bool {
        self.pass
    }
    fn sample_header(&self) -> Vec<&'static str> {
        vec!["trial", "mean_sq_normalized"]
    }
    fn sample_rows(&self) -> Vec<Vec<f64>> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, &v)| vec![i as f64, v])
            .collect()
    }
}

/// Runs `trials` independent trials, trial `i` on stream `i` of `seed`,
/// and returns `(Σ a², Σ a)` of the normalized entries per trial.
fn run_trials(trials: usize, seed: u64, trial: impl Fn(&mut Rng) -> (f64, f64) + Sync) -> Vec<(f64, f64)> {
    (0..trials)
        .into_par_iter()
        .map(|i| trial(&mut Rng::stream(seed, i as u64)))
        .collect()
}

fn variance_from(per_trial: &[(f64, f64)], entries: usize) -> (f64, f64, Vec<f64>) {
    let total = (per_trial.len() * entries) as f64;
    let var = compensated_sum(per_trial.iter().map(|p| p.0)) / total;
    let mean = compensated_sum(per_trial.iter().map(|p| p.1)) / total;
    let samples = per_trial.iter().map(|p| p.0 / entries as f64).collect();
    (var, mean, samples)
}

fn check_trials(trials: usize) -> Result<()> {
    if trials < MIN_TRIALS {
        return Err(Error::Precondition(format!("need at least {MIN_TRIALS} trials, got {trials}")));
    }
    Ok(())
}

/// Variance of `a_ij/σ(A)` for `m×n` matrices with i.i.d. entries.
pub fn mc_variance_sn(m: usize, n: usize, dist: EntryDist, trials: usize, seed: u64) -> Result<VarianceReport> {
    check_trials(trials)?;
    if m == 0 || n == 0 {
        return Err(Error::Precondition("matrix dims must be >= 1".into()));
    }
    let per_trial = run_trials(trials, seed, |rng| {
        let a: Vec<f64> = (0..m * n).map(|_| dist.draw(rng)).collect();
        let s = exact_sigma(&a, m, n);
        if s == 0.0 {
            return (0.0, 0.0);
        }
        let sq = a.iter().map(|x| x * x).sum::<f64>() / (s * s);
        (sq, a.iter().sum::<f64>() / s)
    });
    let (empirical_var, empirical_mean, samples) = variance_from(&per_trial, m * n);
    let upper_bound = 1.0 / m.max(n) as f64;
    let threshold = upper_bound * (1.0 + 3.0 / (trials as f64).sqrt());
    let lo = m.min(n);
    Ok(VarianceReport {
        rows: m,
        cols: n,
        kernel: None,
        dist,
        trials,
        empirical_var,
        empirical_mean,
        upper_bound,
        threshold,
        lower_qualitative: (lo >= 2).then(|| 1.0 / (m.max(n) as f64 * (lo as f64).ln())),
        pass: empirical_var <= threshold,
        samples,
    })
}

/// Variance of `w_ij/σ_w` with `σ_w = (σ(W₁)+σ(W₂))/2` for random kernels.
/// Requires `k_h·k_w ≥ max(c_out/c_in, c_in/c_out)`.
pub fn mc_variance_bsn(shape: KernelShape, dist: EntryDist, trials: usize, seed: u64) -> Result<VarianceReport> {
    check_trials(trials)?;
    shape.validate()?;
    let ratio = (shape.c_out as f64 / shape.c_in as f64).max(shape.c_in as f64 / shape.c_out as f64);
    if (shape.taps() as f64) < ratio {
        return Err(Error::Precondition(format!(
            "k_h·k_w = {} must be >= max(c_out/c_in, c_in/c_out) = {ratio}",
            shape.taps()
        )));
    }
    let dims = shape.dims();
    let per_trial = run_trials(trials, seed, |rng| {
        let k = Tensor::from_fn(&dims, || dist.draw(rng));
        let w1 = reshape_kernel(&k, Grouping::OutGrouped).expect("rank-4");
        let w2 = reshape_kernel(&k, Grouping::InGrouped).expect("rank-4");
        let s1 = exact_sigma(w1.data(), shape.c_out, shape.fan_in());
        let s2 = exact_sigma(w2.data(), shape.c_in, shape.fan_out());
        let sw = (s1 + s2) / 2.0;
        if sw == 0.0 {
            return (0.0, 0.0);
        }
        let sq = k.data().iter().map(|x| x * x).sum::<f64>() / (sw * sw);
        (sq, k.data().iter().sum::<f64>() / sw)
    });
    let (empirical_var, empirical_mean, samples) = variance_from(&per_trial, shape.numel());
    let upper_bound = 2.0 / (shape.fan_in() + shape.fan_out()) as f64;
    let threshold = upper_bound * (1.0 + 3.0 / (trials as f64).sqrt());
    let (m, n) = (shape.c_out, shape.fan_in());
    let lo = m.min(n);
    Ok(VarianceReport {
        rows: m,
        cols: n,
        kernel: Some(shape),
        dist,
        trials,
        empirical_var,
        empirical_mean,
        upper_bound,
        threshold,
        lower_qualitative: (lo >= 2).then(|| 1.0 / (m.max(n) as f64 * (lo as f64).ln())),
        pass: empirical_var <= threshold,
        samples,
    })
}

// ---------------------------------------------------------------------------
// Gradient-ratio scan

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatioPoint {
    pub checkpoint: usize,
    pub rescaling: usize,
    pub i: usize,
    pub j: usize,
    /// `mean||∇_{w_i}D|| / mean||∇_{w_j}D||`.
    pub grad_norm_ratio: f64,
    /// `σ_j/σ_i` of the rescaled weights.
    pub inverse_sigma_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RatioScan {
    pub target_geomean: f64,
    pub points: Vec<RatioPoint>,
    /// Largest `|log(grad ratio) − log(inverse σ ratio)|`, a distance from
    /// exact membership.
    pub max_log_gap: f64,
    pub pass: bool,
}

impl SuiteReport for RatioScan {
    fn passed(&self) -> bool {
        self.pass
    }
    fn sample_header(&self) -> Vec<&'static str> {
        vec!["checkpoint", "rescaling", "i", "j", "grad_norm_ratio", "inverse_sigma_ratio"]
    }
    fn sample_rows(&self) -> Vec<Vec<f64>> {
        self.points
            .iter()
            .map(|p| {
                vec![
                    p.checkpoint as f64,
                    p.rescaling as f64,
                    p.i as f64,
                    p.j as f64,
                    p.grad_norm_ratio,
                    p.inverse_sigma_ratio,
                ]
            })
            .collect()
    }
}

/// For each checkpoint (effective weights) and each of `rescalings` scale
/// vectors, rescales the layers so the geometric mean of their strict σs is
/// `target_geomean` and records gradient-norm ratios against inverse
/// σ ratios for every layer pair `i < j`, with gradient norms averaged over
/// `inputs`. Rescaling 0 is the uniform one; the rest are log-normal.
pub fn setd_ratio_scan(checkpoints: &[Network], rescalings: usize, inputs: &[Vec<f64>], target_geomean: f64, rng: &mut Rng) -> Result<RatioScan> {
    if !(target_geomean > 0.0) || inputs.is_empty() {
        return Err(Error::Precondition("need a positive target and at least one input".into()));
    }
    let mut points = Vec::new();
    for (ci, net) in checkpoints.iter().enumerate() {
        let sigmas = net.strict_sigmas();
        if sigmas.iter().any(|&s| s <= 0.0) {
            return Err(Error::Precondition(format!("checkpoint {ci} has a zero layer")));
        }
        let depth = net.depth();
        for r in 0..rescalings.max(1) {
            let c = if r == 0 {
                ScaleVector(vec![1.0; depth])
            } else {
                ScaleVector::random_feasible(depth, 0.5, rng)
            };
            let scaled_sigmas: Vec<f64> = sigmas.iter().zip(&c.0).map(|(s, c)| s * c).collect();
            let adjust = target_geomean / geometric_mean(&scaled_sigmas);
            let factors: Vec<f64> = c.0.iter().map(|c| c * adjust).collect();
            let scaled = net.rescaled(&factors)?;
            let new_sigmas: Vec<f64> = sigmas.iter().zip(&factors).map(|(s, f)| s * f).collect();
            let mut mean_norms = vec![0.0; depth];
            for x in inputs {
                let (_, g) = crate::nn::gradients(&scaled, x)?;
                for (m, n) in mean_norms.iter_mut().zip(g.layer_norms()) {
                    *m += n / inputs.len() as f64;
                }
            }
            if depth == 1 {
                points.push(RatioPoint {
                    checkpoint: ci,
                    rescaling: r,
                    i: 0,
                    j: 0,
                    grad_norm_ratio: 1.0,
                    inverse_sigma_ratio: 1.0,
                });
            }
            for i in 0..depth {
                for j in i + 1..depth {
                    points.push(RatioPoint {
                        checkpoint: ci,
                        rescaling: r,
                        i,
                        j,
                        grad_norm_ratio: mean_norms[i] / mean_norms[j],
                        inverse_sigma_ratio: new_sigmas[j] / new_sigmas[i],
                    });
                }
            }
        }
    }
    let max_log_gap = points
        .iter()
        .map(|p| (p.grad_norm_ratio.ln() - p.inverse_sigma_ratio.ln()).abs())
        .fold(0.0, f64::max);
    let pass = points
        .iter()
        .all(|p| p.grad_norm_ratio.is_finite() && p.grad_norm_ratio > 0.0 && p.inverse_sigma_ratio > 0.0);
    Ok(RatioScan {
        target_geomean,
        points,
        max_log_gap,
        pass,
    })
}

// ---------------------------------------------------------------------------
// Hessian bounds

#[derive(Debug, Clone, Serialize)]
pub struct HessianSample {
    pub input: usize,
    pub layer: usize,
    pub x_norm_sq: f64,
    pub estimate: f64,
    /// `|a_L''(o_l^L)|·||x||²·∏σ²/σ_t²`.
    pub bound: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct HessianReport {
    pub final_activation: String,
    pub sigmas: Vec<f64>,
    /// Largest `estimate / bound` (0 when both vanish).
    pub max_bound_ratio: f64,
    /// Largest `estimate / ||x||²`.
    pub max_normalized_estimate: f64,
    /// The specialization checked: `0.1` for sigmoid, `1e-5` (strict) for
    /// identity.
    pub specialization_limit: f64,
    pub all_converged: bool,
    pub pass: bool,
    #[serde(skip)]
    pub samples: Vec<HessianSample>,
}

impl SuiteReport for HessianReport {
    fn passed(&self) -> bool {
        self.pass
    }
    fn sample_header(&self) -> Vec<&'static str> {
        vec!["input", "layer", "x_norm_sq", "estimate", "bound", "converged"]
    }
    fn sample_rows(&self) -> Vec<Vec<f64>> {
        self.samples
            .iter()
            .map(|s| {
                vec![
                    s.input as f64,
                    s.layer as f64,
                    s.x_norm_sq,
                    s.estimate,
                    s.bound,
                    s.converged as u8 as f64,
                ]
            })
            .collect()
    }
}

/// Per-layer Hessian spectral-norm estimates against the general bound and
/// the last-activation specialization (sigmoid `0.1·||x||²`, identity 0).
pub fn check_hessian_bounds(net: &Network, inputs: &[Vec<f64>], iters: usize) -> Result<HessianReport> {
    let sigmas = net.strict_sigmas();
    let last = net.final_activation();
    let depth = net.depth();
    let all_prod: f64 = sigmas.iter().map(|s| s * s).product();
    let normalized = sigmas.iter().all(|&s| s <= 1.0 + GRAD_BOUND_SLACK);
    let mut samples = Vec::new();
    for (i, x) in inputs.iter().enumerate() {
        let trace = forward(net, x)?;
        let z = trace.pre[depth - 1][0];
        let curvature = last.second_derivative(z).abs();
        let xsq = norm(x).powi(2);
        for t in 0..depth {
            let est = hessian_sigma_estimate(net, x, t, iters)?;
            let bound = if sigmas[t] > 0.0 {
                curvature * xsq * all_prod / (sigmas[t] * sigmas[t])
            } else {
                f64::INFINITY
            };
            samples.push(HessianSample {
                input: i,
                layer: t,
                x_norm_sq: xsq,
                estimate: est.sigma,
                bound,
                converged: est.converged,
            });
        }
    }
    let max_bound_ratio = samples
        .iter()
        .map(|s| ratio(s.estimate, s.bound))
        .fold(0.0, f64::max);
    let max_normalized_estimate = samples
        .iter()
        .map(|s| ratio(s.estimate, s.x_norm_sq))
        .fold(0.0, f64::max);
    let general_ok = samples
        .iter()
        .all(|s| s.estimate <= s.bound * (1.0 + HESSIAN_SLACK) + IDENTITY_HESSIAN_TOL * s.x_norm_sq);
    let (specialization_limit, special_ok) = match last {
        Activation::Sigmoid => (
            SIGMOID_HESSIAN_COEFF,
            !normalized || max_normalized_estimate <= SIGMOID_HESSIAN_COEFF * (1.0 + HESSIAN_SLACK),
        ),
        _ => (IDENTITY_HESSIAN_TOL, max_normalized_estimate < IDENTITY_HESSIAN_TOL),
    };
    let all_converged = samples.iter().all(|s| s.converged);
    Ok(HessianReport {
        final_activation: last.to_string(),
        sigmas,
        max_bound_ratio,
        max_normalized_estimate,
        specialization_limit,
        all_converged,
        pass: general_ok && special_ok,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allocation_examples() {
        assert_eq!(optimal_allocation(&[1.0, 1.0, 1.0]).unwrap().0, vec![1.0; 3]);
        let c = optimal_allocation(&[4.0, 1.0]).unwrap().0;
        assert!((c[0] - 0.5).abs() < 1e-15 && (c[1] - 2.0).abs() < 1e-15);
        let c = optimal_allocation(&[8.0, 2.0, 1.0]).unwrap();
        let lambda = 16f64.cbrt();
        for (ci, s) in c.0.iter().zip([8.0, 2.0, 1.0]) {
            assert!((ci - lambda / s).abs() < 1e-14);
        }
        assert!((c.product() - 1.0).abs() < 1e-12);
        assert!(optimal_allocation(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn allocation_objective_closed_form() {
        let r = check_allocation_optimality(&[4.0, 1.0], 1.0, 100, &mut Rng::new(0)).unwrap();
        assert!((r.f_opt - 2f64.sqrt() / 2.0).abs() < 1e-12);
        assert!(r.pass);
    }

    #[test]
    fn equal_sigmas_never_beaten() {
        let r = check_allocation_optimality(&[3.0; 4], 2.0, 500, &mut Rng::new(1)).unwrap();
        assert!(r.pass);
        assert_eq!(r.c_opt, vec![1.0; 4]);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(xs), 2.0);
    }

    #[test]
    fn feasible_scales_multiply_to_one() {
        let mut rng = Rng::new(3);
        for len in 1..6 {
            let c = ScaleVector::random_feasible(len, 1.0, &mut rng);
            assert!((c.product() - 1.0).abs() < 1e-12);
            assert!(c.check_feasible().is_ok());
        }
        assert!(ScaleVector(vec![2.0, 2.0]).check_feasible().is_err());
    }

    #[test]
    fn too_few_trials() {
        assert!(mc_variance_sn(3, 3, EntryDist::Gaussian, 10, 0).is_err());
    }

    #[test]
    fn bsn_hypothesis() {
        let ks = KernelShape::new(8, 1, 1, 1).unwrap();
        assert!(matches!(
            mc_variance_bsn(ks, EntryDist::Gaussian, 1000, 0),
            Err(Error::Precondition(_))
        ));
    }
}
