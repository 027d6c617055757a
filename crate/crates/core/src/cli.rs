//! Command-line front end: `verify`, `specnorm` and `train`.
//!
//! Exit codes: 0 success / pass, 1 a check failed, 2 usage or configuration
//! error, 3 training stopped by the divergence guard.
//!
//! `verify` and `train` accept `--config <file.json>` whose keys are the long
//! flag names (with `_` for `-`); flags given on the command line win.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::conv::{ConvGeometry, KernelShape};
use crate::data::{load_mnist_idx, write_table_csv, RingSpec};
use crate::error::{Error, Result};
use crate::gan::{self, Checkpoint, Dataset, LossKind, TrainConfig};
use crate::init::InitScheme;
use crate::nn::{Activation, Architecture, Network};
use crate::power::IterMode;
use crate::rng::Rng;
use crate::specnorm::{normalize_strict, sigma_report, NormKind, NormMode};
use crate::tensor::Tensor;
use crate::theorems::{self, EntryDist, ScaleVector, SuiteReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

const SUITES_HELP: &str = "\
Suites:
  prop1     gradient-norm bound for a normalized network (per layer and overall)
  prop2     output and input-gradient invariance under layer rescaling with prod c = 1
  thm2      optimal per-layer scale allocation c_t = lambda / sigma_t
  thm3      Monte-Carlo variance of a_ij / sigma(A) against 1/max(m,n)
  thm4      Monte-Carlo variance under the two-reshape mean (BSN) against 2/(fan_in+fan_out)
  hessian   per-layer Hessian spectral norm against its bound (sigmoid 0.1|x|^2, identity 0)
  internal  layer output and backpropagated-gradient norm chains
  setd      gradient-norm ratios against inverse sigma ratios across checkpoints";

#[derive(Parser, Debug)]
#[command(name = "snlab", version, about = "Spectral normalization: bounds, checks and training runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a verification suite and write <suite>.json and <suite>.csv.
    #[command(after_help = SUITES_HELP)]
    Verify(VerifyArgs),
    /// Print the sigma views of a kernel given as tensor JSON.
    Specnorm(SpecnormArgs),
    /// Train a GAN and write metrics.csv, checkpoints and samples.
    Train(TrainArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Prop1,
    Prop2,
    Thm2,
    Thm3,
    Thm4,
    Hessian,
    Internal,
    Setd,
}

impl Suite {
    fn name(self) -> &'static str {
        match self {
            Suite::Prop1 => "prop1",
            Suite::Prop2 => "prop2",
            Suite::Thm2 => "thm2",
            Suite::Thm3 => "thm3",
            Suite::Thm4 => "thm4",
            Suite::Hessian => "hessian",
            Suite::Internal => "internal",
            Suite::Setd => "setd",
        }
    }
}

macro_rules! merge_fields {
    ($a:ident, $b:ident; $($f:ident),*) => {
        Self { $($f: $a.$f.or($b.$f),)* }
    };
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyArgs {
    #[arg(long)]
    pub suite: Option<Suite>,
    /// JSON file with default values for these flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of layers for generated dense networks.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Hidden width (and input dimension) for generated dense networks.
    #[arg(long)]
    pub width: Option<usize>,
    /// Last-layer activation: identity or sigmoid.
    #[arg(long = "final")]
    #[serde(rename = "final")]
    pub final_act: Option<Activation>,
    /// Discriminator architecture JSON used instead of a generated dense net.
    #[arg(long)]
    pub arch: Option<PathBuf>,
    /// Number of random inputs.
    #[arg(long)]
    pub inputs: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub dist: Option<EntryDist>,
    /// Kernel shape c_out,c_in,k_h,k_w.
    #[arg(long)]
    pub kernel: Option<String>,
    /// Worker threads for Monte-Carlo trials.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Directory of ckpt_<iter>.json files for the ratio scan.
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
    /// Random rescalings per checkpoint (scan) or random scale vectors (rescaling suite).
    #[arg(long)]
    pub rescalings: Option<usize>,
    /// Geometric mean of the rescaled sigmas in the ratio scan.
    #[arg(long)]
    pub target: Option<f64>,
}

impl VerifyArgs {
    fn merge(self, base: Self) -> Self {
        merge_fields!(self, base; suite, config, out, seed, layers, width, final_act, arch, inputs, m, n,
            trials, dist, kernel, workers, checkpoints, rescalings, target)
    }
}

#[derive(Args, Debug, Clone)]
pub struct SpecnormArgs {
    /// Kernel JSON: {"shape": [...], "data": [...]} (rank 2 or 4).
    pub kernel: PathBuf,
    /// Also compute the conv operator norm for the input geometry.
    #[arg(long)]
    pub conv: bool,
    /// Spatial input size HxW (channels come from the kernel).
    #[arg(long, default_value = "8x8")]
    pub input: String,
    #[arg(long, default_value_t = 0)]
    pub pad: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetChoice {
    Ring8,
    Mnist,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<DatasetChoice>,
    #[arg(long)]
    pub mnist_images: Option<PathBuf>,
    #[arg(long)]
    pub mnist_labels: Option<PathBuf>,
    /// Discriminator architecture JSON (default dim->64->64->1).
    #[arg(long)]
    pub arch: Option<PathBuf>,
    /// none | sn_w | sn_conv | bsn
    #[arg(long)]
    pub norm: Option<NormKind>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// hinge | vanilla
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub n_dis: Option<usize>,
    #[arg(long)]
    pub alpha_g: Option<f64>,
    #[arg(long)]
    pub alpha_d: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub power_iters: Option<usize>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

impl TrainArgs {
    fn merge(self, base: Self) -> Self {
        merge_fields!(self, base; config, dataset, mnist_images, mnist_labels, arch, norm, scale, iters, seed,
            out, batch, loss, n_dis, alpha_g, alpha_d, beta1, beta2, power_iters, log_every, checkpoint_every)
    }

    /// Fills every unset value with its default so the echo is complete.
    fn resolved(self) -> Self {
        let d = TrainConfig::default();
        Self {
            config: None,
            dataset: self.dataset.or(Some(DatasetChoice::Ring8)),
            norm: self.norm.or(Some(d.norm_mode.kind)),
            scale: self.scale.or(Some(d.norm_mode.scale)),
            iters: self.iters.or(Some(d.iters)),
            seed: self.seed.or(Some(d.seed)),
            out: self.out.or(Some(PathBuf::from("run"))),
            batch: self.batch.or(Some(d.batch_size)),
            loss: self.loss.or(Some(d.loss)),
            n_dis: self.n_dis.or(Some(d.n_dis)),
            alpha_g: self.alpha_g.or(Some(d.alpha_g)),
            alpha_d: self.alpha_d.or(Some(d.alpha_d)),
            beta1: self.beta1.or(Some(d.beta1)),
            beta2: self.beta2.or(Some(d.beta2)),
            power_iters: self.power_iters.or(Some(d.power_iters_per_step)),
            log_every: self.log_every.or(Some(d.log_every)),
            checkpoint_every: self.checkpoint_every.or(Some(d.checkpoint_every)),
            ..self
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha_g: self.alpha_g.unwrap(),
            alpha_d: self.alpha_d.unwrap(),
            beta1: self.beta1.unwrap(),
            beta2: self.beta2.unwrap(),
            n_dis: self.n_dis.unwrap(),
            batch_size: self.batch.unwrap(),
            iters: self.iters.unwrap(),
            loss: self.loss.unwrap(),
            norm_mode: NormMode::scaled(self.norm.unwrap(), self.scale.unwrap()),
            power_iters_per_step: self.power_iters.unwrap(),
            log_every: self.log_every.unwrap(),
            checkpoint_every: self.checkpoint_every.unwrap(),
            seed: self.seed.unwrap(),
        }
    }
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Specnorm(a) => cmd_specnorm(a),
        Command::Train(a) => cmd_train(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Divergence { .. } => EXIT_DIVERGED,
                _ => EXIT_USAGE,
            }
        }
    }
}

// ---------------------------------------------------------------------------
// verify

fn write_report<R: SuiteReport>(out: &Path, name: &str, report: &R) -> Result<i32> {
    fs::create_dir_all(out)?;
    fs::write(out.join(format!("{name}.json")), serde_json::to_string_pretty(report)?)?;
    write_table_csv(&report.sample_header(), &report.sample_rows(), &out.join(format!("{name}.csv")))?;
    let pass = report.passed();
    println!("{name}: {}", if pass { "pass" } else { "FAIL" });
    Ok(if pass { EXIT_OK } else { EXIT_FAIL })
}

/// Several reports of the same kind under one pass flag.
#[derive(Debug, Serialize)]
pub struct ReportSet<R> {
    pub pass: bool,
    pub reports: Vec<R>,
}

impl<R: SuiteReport> ReportSet<R> {
    pub fn new(reports: Vec<R>) -> Self {
        Self {
            pass: reports.iter().all(SuiteReport::passed),
            reports,
        }
    }
}

impl<R: SuiteReport> SuiteReport for ReportSet<R> {
    fn passed(&self) -> bool {
        self.pass
    }
    fn sample_header(&self) -> Vec<&'static str> {
        let mut h = vec!["report"];
        if let Some(r) = self.reports.first() {
            h.extend(r.sample_header());
        }
        h
    }
    fn sample_rows(&self) -> Vec<Vec<f64>> {
        self.reports
            .iter()
            .enumerate()
            .flat_map(|(i, r)| {
                r.sample_rows().into_iter().map(move |mut row| {
                    row.insert(0, i as f64);
                    row
                })
            })
            .collect()
    }
}

fn parse_kernel_shape(s: &str) -> Result<KernelShape> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Format(format!("bad kernel shape {s:?}"))))
        .collect::<Result<_>>()?;
    match dims[..] {
        [a, b, c, d] => KernelShape::new(a, b, c, d),
        _ => Err(Error::Format(format!("kernel shape needs 4 values, got {s:?}"))),
    }
}

/// Raw network for a suite: from `--arch` or a generated dense net.
fn suite_network(a: &VerifyArgs, rng: &mut Rng, default_final: Activation) -> Result<Network> {
    let last = a.final_act.unwrap_or(default_final);
    if let Some(path) = &a.arch {
        let mut arch: Architecture = read_config(path)?;
        arch.final_activation = last;
        return arch.init(&InitScheme::lecun(), rng);
    }
    let layers = a.layers.unwrap_or(4);
    let width = a.width.unwrap_or(16);
    if layers == 0 || width == 0 {
        return Err(Error::Precondition("layers and width must be >= 1".into()));
    }
    let mut widths = vec![width; layers];
    widths.push(1);
    Network::dense(&widths, Activation::ReLU, last, &InitScheme::lecun(), rng)
}

/// Effective weights under converged SN_w (SN_Conv for conv layers).
fn strict_normalized(net: Network) -> Result<Network> {
    let kind = if net.layers().iter().any(|l| l.geometry().is_some()) {
        NormKind::SNConv
    } else {
        NormKind::SNw
    };
    normalize_strict(&net, NormMode::new(kind))
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        Some(n) if n > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| Error::Precondition(format!("thread pool: {e}"))),
        _ => Ok(f()),
    }
}

pub fn cmd_verify(args: VerifyArgs) -> Result<i32> {
    let a = match &args.config {
        Some(p) => args.clone().merge(read_config(p)?),
        None => args,
    };
    let suite = a
        .suite
        .ok_or_else(|| Error::Precondition("--suite is required".into()))?;
    let seed = a.seed.unwrap_or(0);
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let name = suite.name();
    let mut rng = Rng::new(seed);
    let inputs = a.inputs;
    match suite {
        Suite::Prop1 => {
            let net = strict_normalized(suite_network(&a, &mut rng, Activation::Identity)?)?;
            let r = theorems::check_gradient_bound(&net, inputs.unwrap_or(100), &mut rng)?;
            write_report(&out, name, &r)
        }
        Suite::Internal => {
            let net = strict_normalized(suite_network(&a, &mut rng, Activation::Identity)?)?;
            let sigmas = net.strict_sigmas();
            let xs = theorems::gaussian_inputs(net.input_len(), inputs.unwrap_or(100), &mut rng);
            let reports = xs
                .iter()
                .map(|x| theorems::check_internal_bounds(&net, x, &sigmas))
                .collect::<Result<Vec<_>>>()?;
            write_report(&out, name, &ReportSet::new(reports))
        }
        Suite::Prop2 => {
            let net = suite_network(&a, &mut rng, Activation::Identity)?;
            let xs = theorems::gaussian_inputs(net.input_len(), inputs.unwrap_or(50), &mut rng);
            let reports = (0..a.rescalings.unwrap_or(20))
                .map(|_| {
                    let c = ScaleVector::random_feasible(net.depth(), 1.0, &mut rng);
                    theorems::check_rescaling_equivalence(&net, &c, &xs)
                })
                .collect::<Result<Vec<_>>>()?;
            write_report(&out, name, &ReportSet::new(reports))
        }
        Suite::Thm2 => {
            let layers = a.layers.unwrap_or(4).max(1);
            let sigmas: Vec<f64> = (0..layers).map(|_| rng.uniform_in(-2.0, 2.0).exp()).collect();
            let r = theorems::check_allocation_optimality(&sigmas, 1.0, a.trials.unwrap_or(1000), &mut rng)?;
            write_report(&out, name, &r)
        }
        Suite::Thm3 => {
            let (m, n) = (a.m.unwrap_or(64), a.n.unwrap_or(64));
            let dist = a.dist.unwrap_or(EntryDist::Gaussian);
            let trials = a.trials.unwrap_or(10_000);
            let r = with_workers(a.workers, || theorems::mc_variance_sn(m, n, dist, trials, seed))??;
            write_report(&out, name, &r)
        }
        Suite::Thm4 => {
            let ks = parse_kernel_shape(a.kernel.as_deref().unwrap_or("3,3,3,3"))?;
            let dist = a.dist.unwrap_or(EntryDist::Gaussian);
            let trials = a.trials.unwrap_or(10_000);
            let r = with_workers(a.workers, || theorems::mc_variance_bsn(ks, dist, trials, seed))??;
            write_report(&out, name, &r)
        }
        Suite::Hessian => {
            let net = strict_normalized(suite_network(&a, &mut rng, Activation::Sigmoid)?)?;
            let xs = theorems::gaussian_inputs(net.input_len(), inputs.unwrap_or(100), &mut rng);
            let r = theorems::check_hessian_bounds(&net, &xs, 200)?;
            write_report(&out, name, &r)
        }
        Suite::Setd => {
            let nets = match &a.checkpoints {
                Some(dir) => load_checkpoints(dir)?
                    .iter()
                    .map(Checkpoint::effective)
                    .collect::<Result<Vec<_>>>()?,
                None => (0..3)
                    .map(|_| strict_normalized(suite_network(&a, &mut rng, Activation::Identity)?))
                    .collect::<Result<Vec<_>>>()?,
            };
            let dim = nets
                .first()
                .ok_or_else(|| Error::Precondition("no checkpoints found".into()))?
                .input_len();
            let xs = theorems::gaussian_inputs(dim, inputs.unwrap_or(32), &mut rng);
            let target = a.target.unwrap_or(1.0);
            let r = theorems::setd_ratio_scan(&nets, a.rescalings.unwrap_or(10), &xs, target, &mut rng)?;
            write_report(&out, name, &r)
        }
    }
}

/// `ckpt_<iter>.json` files in `dir`, ordered by iteration.
pub fn load_checkpoints(dir: &Path) -> Result<Vec<Checkpoint>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let iter = path
            .file_name()
            .and_then(|f| f.to_str())
            .and_then(|f| f.strip_prefix("ckpt_"))
            .and_then(|f| f.strip_suffix(".json"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(i) = iter {
            found.push((i, path));
        }
    }
    found.sort();
    found.iter().map(|(_, p)| Checkpoint::load(p)).collect()
}

// ---------------------------------------------------------------------------
// specnorm

fn parse_hw(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Format(format!("input size must look like 8x8, got {s:?}"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

pub fn cmd_specnorm(a: SpecnormArgs) -> Result<i32> {
    let kernel: Tensor = read_config(&a.kernel)?;
    let geometry = if a.conv {
        let ks = KernelShape::of(&kernel)?;
        let (h, w) = parse_hw(&a.input)?;
        let g = ConvGeometry::new([ks.c_in, h, w], a.stride, a.pad);
        g.check(&ks)?;
        Some(g)
    } else {
        None
    };
    let report = sigma_report(&kernel, geometry, IterMode::VERIFY, 0)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// train

pub fn cmd_train(args: TrainArgs) -> Result<i32> {
    let merged = match &args.config {
        Some(p) => args.clone().merge(read_config(p)?),
        None => args,
    };
    let run = merged.resolved();
    let cfg = run.train_config();
    cfg.validate()?;
    let dataset = match run.dataset.unwrap() {
        DatasetChoice::Ring8 => Dataset::Ring(RingSpec::default()),
        DatasetChoice::Mnist => {
            let (Some(i), Some(l)) = (&run.mnist_images, &run.mnist_labels) else {
                return Err(Error::Precondition("mnist needs --mnist-images and --mnist-labels".into()));
            };
            Dataset::Images(load_mnist_idx(i, l)?)
        }
    };
    let out = run.out.clone().unwrap();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&run)?)?;

    let (gen, default_arch) = gan::default_models(&dataset, &mut Rng::stream(cfg.seed, 4))?;
    let arch = match &run.arch {
        Some(p) => read_config(p)?,
        None => default_arch,
    };
    let outcome = gan::train(gen, &arch, &dataset, &cfg)?;
    gan::write_run(&out, &outcome, &dataset, cfg.seed)?;
    if let Some(e) = &outcome.diverged {
        eprintln!("error: {e}");
        return Ok(EXIT_DIVERGED);
    }
    println!(
        "trained {} iterations; wrote {}",
        outcome.iters_done,
        out.join("metrics.csv").display()
    );
    Ok(EXIT_OK)
}
