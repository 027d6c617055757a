//! Small-scale adversarial training with per-step spectral normalization of
//! the discriminator, Adam, hinge or vanilla loss, and per-layer
//! instrumentation (gradient norms, σ views, normalized parameter variance,
//! mode coverage).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{self, mode_coverage, sample_ring, ImageBatch, RingSpec};
use crate::error::{Error, Result};
use crate::init::InitScheme;
use crate::nn::{self, sigmoid, Activation, Architecture, LayerSpec, Network};
use crate::power::IterMode;
use crate::rng::Rng;
use crate::specnorm::{
    apply_normalization, divisor_gradient, norm_divisor, raw_weight_gradient, sigma_report, NormKind, NormMode,
    NormStates, SigmaStates,
};
use crate::tensor::{matvec, matvec_t, norm, Tensor};

/// `|D(x)|` beyond this aborts training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
/// Generator samples drawn for each mode-coverage estimate.
pub const COVERAGE_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Hinge,
    Vanilla,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hinge" => Ok(LossKind::Hinge),
            "vanilla" => Ok(LossKind::Vanilla),
            _ => Err(Error::Format(format!("unknown loss {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha_g: f64,
    pub alpha_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub n_dis: usize,
    pub batch_size: usize,
    pub iters: usize,
    pub loss: LossKind,
    pub norm_mode: NormMode,
    pub power_iters_per_step: usize,
    pub log_every: usize,
    /// 0 keeps only the initial and final checkpoints.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha_g: 1e-4,
            alpha_d: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            n_dis: 1,
            batch_size: 64,
            iters: 20_000,
            loss: LossKind::Hinge,
            norm_mode: NormMode::new(NormKind::SNw),
            power_iters_per_step: 1,
            log_every: 500,
            checkpoint_every: 5000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Precondition(m.to_string()));
        if !(self.alpha_g > 0.0 && self.alpha_d > 0.0) {
            return bad("learning rates must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)");
        }
        if self.n_dis == 0 || self.batch_size == 0 || self.power_iters_per_step == 0 || self.log_every == 0 {
            return bad("n_dis, batch_size, power_iters_per_step and log_every must be >= 1");
        }
        self.norm_mode.validate()
    }
}

// ---------------------------------------------------------------------------
// Losses

/// `log σ(z)` without overflow.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len() as f64;
    xs.sum::<f64>() / n
}

pub fn discriminator_loss(d_real: &[f64], d_fake: &[f64], kind: LossKind) -> f64 {
    match kind {
        LossKind::Hinge => {
            mean(d_real.iter().map(|d| (1.0 - d).max(0.0))) + mean(d_fake.iter().map(|d| (1.0 + d).max(0.0)))
        }
        // log(1 − σ(d)) = log σ(−d)
        LossKind::Vanilla => {
            -mean(d_real.iter().map(|&d| log_sigmoid(d))) - mean(d_fake.iter().map(|&d| log_sigmoid(-d)))
        }
    }
}

pub fn generator_loss(d_fake: &[f64], kind: LossKind) -> f64 {
    match kind {
        LossKind::Hinge => -mean(d_fake.iter().copied()),
        LossKind::Vanilla => -mean(d_fake.iter().map(|&d| log_sigmoid(d))),
    }
}

/// `∂loss/∂d` per sample for the real and fake terms of the discriminator
/// loss.
fn d_loss_slopes(d: f64, real: bool, kind: LossKind, n: usize) -> f64 {
    let n = n as f64;
    match (kind, real) {
        (LossKind::Hinge, true) => if d < 1.0 { -1.0 / n } else { 0.0 },
        (LossKind::Hinge, false) => if d > -1.0 { 1.0 / n } else { 0.0 },
        (LossKind::Vanilla, true) => -sigmoid(-d) / n,
        (LossKind::Vanilla, false) => sigmoid(d) / n,
    }
}

fn g_loss_slope(d: f64, kind: LossKind, n: usize) -> f64 {
    match kind {
        LossKind::Hinge => -1.0 / n as f64,
        LossKind::Vanilla => -sigmoid(-d) / n as f64,
    }
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn new(alpha: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            alpha,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place, parameters in order.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, hp: AdamParams) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape("adam: parameter, gradient and state counts differ".into()));
    }
    if params.iter().zip(grads).any(|(p, g)| p.shape() != g.shape()) {
        return Err(Error::Shape("adam: gradient shape mismatch".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, (pi, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * gi;
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *pi -= hp.alpha * mh / (vh.sqrt() + hp.eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Generator

/// MLP with biases: LeakyReLU hidden layers and a chosen output activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub z_dim: usize,
    /// `[w_0, b_0, w_1, b_1, ...]`, `w_i` shaped `[out, in]`.
    pub params: Vec<Tensor>,
    pub hidden: Activation,
    pub output: Activation,
}

struct GenTrace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    out: Vec<f64>,
}

impl Generator {
    /// Widths `[z_dim, h_1, ..., out_dim]`.
    pub fn new(widths: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Precondition("generator needs >= 2 positive widths".into()));
        }
        let scheme = InitScheme::kaiming(hidden_slope(hidden));
        let mut params = Vec::new();
        for w in widths.windows(2) {
            params.push(crate::init::init_weights(&[w[1], w[0]], &scheme, rng)?);
            params.push(Tensor::zeros(&[w[1]]));
        }
        Ok(Self {
            z_dim: widths[0],
            params,
            hidden,
            output,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.params[self.params.len() - 1].len()
    }

    fn depth(&self) -> usize {
        self.params.len() / 2
    }

    fn act(&self, i: usize) -> Activation {
        if i + 1 == self.depth() {
            self.output
        } else {
            self.hidden
        }
    }

    fn run(&self, z: &[f64]) -> GenTrace {
        let mut inputs = Vec::with_capacity(self.depth());
        let mut pre = Vec::with_capacity(self.depth());
        let mut h = z.to_vec();
        for i in 0..self.depth() {
            let (w, b) = (&self.params[2 * i], &self.params[2 * i + 1]);
            let mut zz = matvec(w.data(), w.shape()[0], w.shape()[1], &h);
            for (a, bi) in zz.iter_mut().zip(b.data()) {
                *a += bi;
            }
            let next = zz.iter().map(|&x| self.act(i).apply(x)).collect();
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(zz);
        }
        GenTrace { inputs, pre, out: h }
    }

    pub fn generate(&self, z: &[f64]) -> Vec<f64> {
        self.run(z).out
    }

    /// Adds `∂(gᵀ·G(z))/∂params` into `acc`.
    fn accumulate_grad(&self, trace: &GenTrace, grad_out: &[f64], acc: &mut [Tensor]) {
        let mut up = grad_out.to_vec();
        for i in (0..self.depth()).rev() {
            let delta: Vec<f64> = up
                .iter()
                .zip(&trace.pre[i])
                .map(|(g, &z)| g * self.act(i).derivative(z))
                .collect();
            let input = &trace.inputs[i];
            let (rows, cols) = (self.params[2 * i].shape()[0], self.params[2 * i].shape()[1]);
            let gw = acc[2 * i].data_mut();
            for (r, d) in delta.iter().enumerate() {
                if *d != 0.0 {
                    for (c, x) in input.iter().enumerate() {
                        gw[r * cols + c] += d * x;
                    }
                }
            }
            for (gb, d) in acc[2 * i + 1].data_mut().iter_mut().zip(&delta) {
                *gb += d;
            }
            if i > 0 {
                up = matvec_t(self.params[2 * i].data(), rows, cols, &delta);
            }
        }
    }
}

fn hidden_slope(a: Activation) -> f64 {
    match a {
        Activation::LeakyReLU(s) => s,
        _ => 0.0,
    }
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Debug, Clone)]
pub enum Dataset {
    Ring(RingSpec),
    Images(ImageBatch),
}

impl Dataset {
    pub fn dim(&self) -> usize {
        match self {
            Dataset::Ring(_) => 2,
            Dataset::Images(b) => {
                let [_, c, h, w] = b.dims();
                c * h * w
            }
        }
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        match self {
            Dataset::Ring(spec) => Ok(sample_ring(spec, n, rng)?
                .data()
                .chunks(2)
                .map(<[f64]>::to_vec)
                .collect()),
            Dataset::Images(b) => {
                if b.is_empty() {
                    return Err(Error::Precondition("image dataset is empty".into()));
                }
                Ok((0..n).map(|_| b.image(rng.below(b.len())).to_vec()).collect())
            }
        }
    }
}

/// Default models: a `dim→64→64→1` LeakyReLU(0.1) discriminator with
/// identity output, and a `z→64→64→dim` LeakyReLU(0.2) generator (z = 16
/// for the ring, 64 for images).
pub fn default_models(dataset: &Dataset, rng: &mut Rng) -> Result<(Generator, Architecture)> {
    let dim = dataset.dim();
    let (z, out) = match dataset {
        Dataset::Ring(_) => (16, Activation::Identity),
        Dataset::Images(_) => (64, Activation::Sigmoid),
    };
    let hidden = if dim > 64 { 128 } else { 64 };
    let gen = Generator::new(&[z, hidden, hidden, dim], Activation::LeakyReLU(0.2), out, rng)?;
    let lrelu = Some(Activation::LeakyReLU(0.1));
    let arch = Architecture {
        layers: vec![
            LayerSpec::Dense { inp: dim, out: hidden, activation: lrelu },
            LayerSpec::Dense { inp: hidden, out: hidden, activation: lrelu },
            LayerSpec::Dense { inp: hidden, out: 1, activation: None },
        ],
        final_activation: Activation::Identity,
    };
    Ok((gen, arch))
}

// ---------------------------------------------------------------------------
// Metrics and checkpoints

/// One CSV row: per-layer values for `layer` plus scalars repeated per row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub iter: usize,
    pub layer: usize,
    /// Batch mean of `||∇_{w_t}D||_F` under converged normalization.
    pub grad_fro: f64,
    pub sigma_w1: f64,
    pub sigma_w2: f64,
    pub sigma_bsn: f64,
    /// Variance of the entries of `w/σ(w)`.
    pub param_var: f64,
    pub loss_d: f64,
    pub loss_g: f64,
    pub mode_coverage: Option<f64>,
    /// Batch mean of the layer's gradient bound.
    #[serde(skip)]
    pub grad_bound: f64,
    /// Batch mean of `||x||·∏Lip`, the bound when every σ is 1.
    #[serde(skip)]
    pub unit_bound: f64,
    /// `1/max(m, n)` of the layer's matrix view.
    #[serde(skip)]
    pub var_bound: f64,
}

pub const METRICS_HEADER: [&str; 10] = [
    "iter",
    "layer",
    "grad_fro",
    "sigma_w1",
    "sigma_w2",
    "sigma_bsn",
    "param_var",
    "loss_d",
    "loss_g",
    "mode_coverage",
];

/// Discriminator weights at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iter: usize,
    pub architecture: Architecture,
    pub norm: NormMode,
    /// Raw (unnormalized) weights.
    pub weights: Vec<Tensor>,
}

impl Checkpoint {
    pub fn network(&self) -> Result<Network> {
        self.architecture.with_weights(self.weights.clone())?.with_norm(self.norm)
    }

    /// Network with effective weights under converged normalization.
    pub fn effective(&self) -> Result<Network> {
        let net = self.network()?;
        let mut states = NormStates::for_network(&net, 0);
        Ok(apply_normalization(&net, &mut states, IterMode::VERIFY)?.net)
    }

    pub fn file_name(&self) -> String {
        format!("ckpt_{}.json", self.iter)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(self.file_name()), serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

fn param_variance(w: &Tensor, divisor: f64) -> f64 {
    if divisor <= 0.0 {
        return 0.0;
    }
    w.scaled(1.0 / divisor).variance()
}

/// Per-layer metrics at the current weights on `batch`.
///
/// Gradients and their bounds use converged normalization of `disc`; the σ
/// views describe `effective` (the weights actually used in the last step).
pub fn snapshot_metrics(
    disc: &Network,
    effective: &Network,
    batch: &[Vec<f64>],
    seed: u64,
) -> Result<Vec<MetricsRecord>> {
    let mut states = NormStates::for_network(disc, seed);
    let strict = apply_normalization(disc, &mut states, IterMode::VERIFY)?.net;
    let sigmas = strict.strict_sigmas();
    let depth = disc.depth();
    let lip = strict.lipschitz_product();
    let mut grad = vec![0.0; depth];
    let mut bound = vec![0.0; depth];
    let mut unit = 0.0;
    for x in batch {
        let (_, g) = nn::gradients(&strict, x)?;
        for (t, n) in g.layer_norms().into_iter().enumerate() {
            grad[t] += n;
            bound[t] += if sigmas[t] > 0.0 { nn::layer_grad_bound(&strict, x, t, &sigmas)? } else { 0.0 };
        }
        unit += norm(x) * lip;
    }
    let b = batch.len() as f64;
    let kind = match disc.norm.kind {
        NormKind::None => NormKind::SNw,
        k => k,
    };
    (0..depth)
        .map(|t| {
            let layer = &disc.layers()[t];
            let rep = sigma_report(&effective.layers()[t].weights, None, IterMode::VERIFY, seed ^ t as u64)?;
            let mut st = SigmaStates::new(seed ^ (t as u64) << 8);
            let div = norm_divisor(&layer.weights, kind, layer.geometry(), &mut st, IterMode::VERIFY)?;
            let (m, n) = layer.matrix_dims();
            Ok(MetricsRecord {
                iter: 0,
                layer: t,
                grad_fro: grad[t] / b,
                sigma_w1: rep.sigma_w1,
                sigma_w2: rep.sigma_w2,
                sigma_bsn: rep.sigma_bsn,
                param_var: param_variance(&layer.weights, div),
                loss_d: f64::NAN,
                loss_g: f64::NAN,
                mode_coverage: None,
                grad_bound: bound[t] / b,
                unit_bound: unit / b,
                var_bound: 1.0 / m.max(n) as f64,
            })
        })
        .collect()
}

pub fn write_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if records.is_empty() {
        w.write_record(METRICS_HEADER)?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Training

pub struct TrainOutcome {
    pub generator: Generator,
    /// Raw discriminator weights.
    pub discriminator: Network,
    pub records: Vec<MetricsRecord>,
    pub checkpoints: Vec<Checkpoint>,
    /// Set when the divergence guard fired; everything above is kept up to
    /// that point.
    pub diverged: Option<Error>,
    pub iters_done: usize,
}

impl TrainOutcome {
    /// Mode coverage of the last log row, if any.
    pub fn final_coverage(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.mode_coverage)
    }
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    arch: &'a Architecture,
    dataset: &'a Dataset,
    gen: Generator,
    disc: Network,
    states: NormStates,
    adam_g: AdamState,
    adam_d: AdamState,
    rng: Rng,
    eval_rng: Rng,
}

fn check_output(d: f64, iter: usize) -> Result<f64> {
    if !d.is_finite() || d.abs() > DIVERGENCE_LIMIT {
        return Err(Error::Divergence { iter, value: d });
    }
    Ok(d)
}

impl Trainer<'_> {
    fn normalize(&mut self) -> Result<crate::specnorm::Normalized> {
        let mode = IterMode::persistent(self.cfg.power_iters_per_step);
        apply_normalization(&self.disc, &mut self.states, mode)
    }

    fn latent(&mut self, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.rng.gaussian_vec(self.gen.z_dim)).collect()
    }

    fn d_step(&mut self, iter: usize) -> Result<f64> {
        let b = self.cfg.batch_size;
        let real = self.dataset.sample(b, &mut self.rng)?;
        let fake: Vec<Vec<f64>> = self.latent(b).iter().map(|z| self.gen.generate(z)).collect();
        let normalized = self.normalize()?;
        let eff = &normalized.net;
        let mut acc: Vec<Tensor> = eff.layers().iter().map(|l| Tensor::zeros(l.weights.shape())).collect();
        let (mut dr, mut df) = (Vec::with_capacity(b), Vec::with_capacity(b));
        for (batch, is_real) in [(&real, true), (&fake, false)] {
            for x in batch {
                let (trace, g) = nn::gradients(eff, x)?;
                let d = check_output(trace.output, iter)?;
                let slope = d_loss_slopes(d, is_real, self.cfg.loss, b);
                if slope != 0.0 {
                    for (a, gw) in acc.iter_mut().zip(&g.grads_w) {
                        crate::tensor::axpy(slope, gw.data(), a.data_mut());
                    }
                }
                if is_real { dr.push(d) } else { df.push(d) }
            }
        }
        let NormMode { kind, scale } = self.disc.norm;
        let grads = self
            .disc
            .layers()
            .iter()
            .zip(&acc)
            .zip(&normalized.divisors)
            .zip(&self.states.layers)
            .map(|(((layer, ge), &d), st)| {
                if kind == NormKind::None {
                    return Ok(ge.scaled(scale));
                }
                let ds = divisor_gradient(&layer.weights, kind, layer.geometry(), st)?;
                raw_weight_gradient(ge, &layer.weights, d, scale, &ds)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut params: Vec<Tensor> = self.disc.weights().into_iter().cloned().collect();
        adam_step(
            &mut params,
            &grads,
            &mut self.adam_d,
            AdamParams::new(self.cfg.alpha_d, self.cfg.beta1, self.cfg.beta2),
        )?;
        self.disc = self.disc.with_weights(params)?;
        Ok(discriminator_loss(&dr, &df, self.cfg.loss))
    }

    fn g_step(&mut self, iter: usize) -> Result<f64> {
        let b = self.cfg.batch_size;
        let zs = self.latent(b);
        let eff = self.normalize()?.net;
        let mut acc: Vec<Tensor> = self.gen.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut df = Vec::with_capacity(b);
        for z in &zs {
            let trace = self.gen.run(z);
            let (dt, g) = nn::gradients(&eff, &trace.out)?;
            let d = check_output(dt.output, iter)?;
            let slope = g_loss_slope(d, self.cfg.loss, b);
            let grad_out: Vec<f64> = g.grad_x.iter().map(|v| v * slope).collect();
            self.gen.accumulate_grad(&trace, &grad_out, &mut acc);
            df.push(d);
        }
        adam_step(
            &mut self.gen.params,
            &acc,
            &mut self.adam_g,
            AdamParams::new(self.cfg.alpha_g, self.cfg.beta1, self.cfg.beta2),
        )?;
        Ok(generator_loss(&df, self.cfg.loss))
    }

    fn coverage(&mut self) -> Result<Option<f64>> {
        let Dataset::Ring(spec) = self.dataset else {
            return Ok(None);
        };
        let pts: Vec<f64> = (0..COVERAGE_SAMPLES)
            .flat_map(|_| {
                let z = self.eval_rng.gaussian_vec(self.gen.z_dim);
                self.gen.generate(&z)
            })
            .collect();
        Ok(Some(mode_coverage(&Tensor::new(vec![COVERAGE_SAMPLES, 2], pts)?, spec, None)?))
    }

    fn log(&mut self, iter: usize, loss_d: f64, loss_g: f64) -> Result<Vec<MetricsRecord>> {
        let batch = self.dataset.sample(self.cfg.batch_size, &mut self.eval_rng)?;
        let mut probe_states = self.states.clone();
        let mode = IterMode::persistent(self.cfg.power_iters_per_step);
        let effective = apply_normalization(&self.disc, &mut probe_states, mode)?.net;
        let coverage = self.coverage()?;
        let mut rows = snapshot_metrics(&self.disc, &effective, &batch, self.cfg.seed)?;
        for r in &mut rows {
            r.iter = iter;
            r.loss_d = loss_d;
            r.loss_g = loss_g;
            r.mode_coverage = coverage;
        }
        Ok(rows)
    }

    fn checkpoint(&self, iter: usize) -> Checkpoint {
        Checkpoint {
            iter,
            architecture: self.arch.clone(),
            norm: self.disc.norm,
            weights: self.disc.weights().into_iter().cloned().collect(),
        }
    }
}

/// Alternates `n_dis` discriminator steps with one generator step for
/// `cfg.iters` iterations. Each discriminator evaluation is preceded by
/// `power_iters_per_step` persistent power-iteration steps per layer.
pub fn train(gen: Generator, arch: &Architecture, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if gen.out_dim() != dataset.dim() {
        return Err(Error::Shape(format!(
            "generator emits {} values, data has {}",
            gen.out_dim(),
            dataset.dim()
        )));
    }
    let mut init_rng = Rng::stream(cfg.seed, 2);
    let disc = arch.init(&InitScheme::lecun(), &mut init_rng)?.with_norm(cfg.norm_mode)?;
    if disc.input_len() != dataset.dim() {
        return Err(Error::Shape("discriminator input does not match data".into()));
    }
    let mut t = Trainer {
        cfg,
        arch,
        dataset,
        adam_g: AdamState::new(&gen.params),
        adam_d: AdamState::new(&disc.weights().into_iter().cloned().collect::<Vec<_>>()),
        states: NormStates::for_network(&disc, cfg.seed),
        gen,
        disc,
        rng: Rng::stream(cfg.seed, 0),
        eval_rng: Rng::stream(cfg.seed, 1),
    };
    let mut records = Vec::new();
    let mut checkpoints = vec![t.checkpoint(0)];
    let mut diverged = None;
    let mut done = 0;
    for iter in 1..=cfg.iters {
        let step = (|| -> Result<(f64, f64)> {
            let mut ld = 0.0;
            for _ in 0..cfg.n_dis {
                ld = t.d_step(iter)?;
            }
            let lg = t.g_step(iter)?;
            Ok((ld, lg))
        })();
        let (ld, lg) = match step {
            Ok(v) => v,
            Err(e @ Error::Divergence { .. }) => {
                diverged = Some(e);
                break;
            }
            Err(e) => return Err(e),
        };
        done = iter;
        if iter % cfg.log_every == 0 || iter == cfg.iters {
            records.extend(t.log(iter, ld, lg)?);
        }
        if (cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0) || iter == cfg.iters {
            checkpoints.push(t.checkpoint(iter));
        }
    }
    Ok(TrainOutcome {
        generator: t.gen,
        discriminator: t.disc,
        records,
        checkpoints,
        diverged,
        iters_done: done,
    })
}

/// Writes `metrics.csv`, every checkpoint, and a final sample file
/// (`samples.csv` for 2-D data, `samples.pgm` for images).
pub fn write_run(out: &Path, outcome: &TrainOutcome, dataset: &Dataset, seed: u64) -> Result<()> {
    fs::create_dir_all(out)?;
    write_metrics_csv(&outcome.records, &out.join("metrics.csv"))?;
    for c in &outcome.checkpoints {
        c.save(out)?;
    }
    let mut rng = Rng::stream(seed, 3);
    let g = &outcome.generator;
    match dataset {
        Dataset::Ring(_) => {
            let pts: Vec<f64> = (0..COVERAGE_SAMPLES)
                .flat_map(|_| g.generate(&rng.gaussian_vec(g.z_dim)))
                .collect();
            data::write_points_csv(&Tensor::new(vec![COVERAGE_SAMPLES, 2], pts)?, &out.join("samples.csv"))
        }
        Dataset::Images(b) => {
            let [_, c, h, w] = b.dims();
            let n = 64;
            let px: Vec<f64> = (0..n)
                .flat_map(|_| g.generate(&rng.gaussian_vec(g.z_dim)))
                .map(|v| v.clamp(0.0, 1.0))
                .collect();
            let batch = ImageBatch::new(Tensor::new(vec![n, c, h, w], px)?, (0.0, 1.0))?;
            data::write_pgm_grid(&batch, 8, &out.join("samples.pgm"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        assert_eq!(discriminator_loss(&[1.0, 2.0], &[-1.0, -3.0], LossKind::Hinge), 0.0);
        assert_eq!(discriminator_loss(&[0.0], &[0.0], LossKind::Hinge), 2.0);
        let v = discriminator_loss(&[0.0], &[0.0], LossKind::Vanilla);
        assert!((v - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(generator_loss(&[0.0], LossKind::Hinge), 0.0);
        assert_eq!(generator_loss(&[1.0, -1.0], LossKind::Hinge), 0.0);
        assert!((generator_loss(&[0.0], LossKind::Vanilla) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn vanilla_is_stable_at_extremes() {
        let v = discriminator_loss(&[800.0], &[-800.0], LossKind::Vanilla);
        assert!(v.is_finite() && v < 1e-300);
        assert!((generator_loss(&[-800.0], LossKind::Vanilla) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn slopes_match_finite_differences() {
        for kind in [LossKind::Hinge, LossKind::Vanilla] {
            for &d in &[-1.7, -0.3, 0.4, 1.6] {
                let h = 1e-6;
                let num = (discriminator_loss(&[d + h], &[0.5], kind) - discriminator_loss(&[d - h], &[0.5], kind)) / (2.0 * h);
                assert!((num - d_loss_slopes(d, true, kind, 1)).abs() < 1e-6);
                let num = (discriminator_loss(&[0.5], &[d + h], kind) - discriminator_loss(&[0.5], &[d - h], kind)) / (2.0 * h);
                assert!((num - d_loss_slopes(d, false, kind, 1)).abs() < 1e-6);
                let num = (generator_loss(&[d + h], kind) - generator_loss(&[d - h], kind)) / (2.0 * h);
                assert!((num - g_loss_slope(d, kind, 1)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn adam_examples() {
        let hp = AdamParams::new(1e-3, 0.9, 0.999);
        let mut p = vec![Tensor::new(vec![1], vec![0.5]).unwrap()];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::zeros(&[1])], &mut st, hp).unwrap();
        assert_eq!(p[0].data()[0], 0.5);

        let mut p = vec![Tensor::new(vec![1], vec![0.0]).unwrap()];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::new(vec![1], vec![1.0]).unwrap()], &mut st, hp).unwrap();
        assert!((p[0].data()[0] + 1e-3).abs() < 1e-10);

        let hp = AdamParams::new(0.01, 0.0, 0.0);
        let mut p = vec![Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()];
        let mut st = AdamState::new(&p);
        let g = [Tensor::new(vec![2], vec![3.0, -0.2]).unwrap()];
        adam_step(&mut p, &g, &mut st, hp).unwrap();
        adam_step(&mut p, &g, &mut st, hp).unwrap();
        assert!((p[0].data()[0] + 0.02).abs() < 1e-8);
        assert!((p[0].data()[1] - 0.02).abs() < 1e-8);
    }

    #[test]
    fn generator_gradient_matches_finite_difference() {
        let mut rng = Rng::new(5);
        let mut g = Generator::new(&[3, 5, 2], Activation::LeakyReLU(0.2), Activation::Identity, &mut rng).unwrap();
        for p in g.params.iter_mut().skip(1).step_by(2) {
            *p = Tensor::from_fn(p.shape(), || 0.1 * rng.gaussian());
        }
        let z = rng.gaussian_vec(3);
        let up = [0.7, -1.3];
        let mut acc: Vec<Tensor> = g.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        g.accumulate_grad(&g.run(&z), &up, &mut acc);
        let f = |g: &Generator| crate::tensor::dot(&g.generate(&z), &up);
        let h = 1e-6;
        for k in 0..g.params.len() {
            for i in 0..g.params[k].len() {
                let mut gp = g.clone();
                gp.params[k].data_mut()[i] += h;
                let mut gm = g.clone();
                gm.params[k].data_mut()[i] -= h;
                let num = (f(&gp) - f(&gm)) / (2.0 * h);
                assert!((num - acc[k].data()[i]).abs() < 1e-6, "param {k}[{i}]");
            }
        }
    }

    fn tiny_cfg(iters: usize) -> TrainConfig {
        TrainConfig {
            iters,
            batch_size: 8,
            log_every: 5,
            checkpoint_every: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_iters_keeps_initial_checkpoint_only() {
        let ds = Dataset::Ring(RingSpec::default());
        let (g, arch) = default_models(&ds, &mut Rng::new(0)).unwrap();
        let out = train(g, &arch, &ds, &tiny_cfg(0)).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.checkpoints.len(), 1);
        assert_eq!(out.checkpoints[0].iter, 0);
    }

    #[test]
    fn short_run_is_reproducible() {
        let ds = Dataset::Ring(RingSpec::default());
        let run = || {
            let (g, arch) = default_models(&ds, &mut Rng::new(1)).unwrap();
            train(g, &arch, &ds, &tiny_cfg(10)).unwrap().records
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), 2 * 3);
        assert_eq!(a, b);
        for r in &a {
            assert!(r.param_var <= r.var_bound * (1.0 + 1e-9));
            assert!(r.grad_fro <= r.grad_bound * (1.0 + 1e-3));
        }
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = TrainConfig::default();
        c.norm_mode.scale = 0.0;
        assert!(c.validate().is_err());
        c = TrainConfig { n_dis: 0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let ds = Dataset::Ring(RingSpec::default());
        let (g, arch) = default_models(&ds, &mut Rng::new(2)).unwrap();
        let out = train(g, &arch, &ds, &tiny_cfg(0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        out.checkpoints[0].save(dir.path()).unwrap();
        let back = Checkpoint::load(&dir.path().join("ckpt_0.json")).unwrap();
        assert_eq!(back, out.checkpoints[0]);
        let eff = back.effective().unwrap();
        for s in eff.strict_sigmas() {
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
