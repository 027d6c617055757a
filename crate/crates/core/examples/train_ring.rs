//! Trains a GAN on the 8-mode ring with a spectrally normalized
//! discriminator and prints the logged metrics.
//!
//! ```text
//! cargo run --release --example train_ring -- [seed] [iters] [norm]
//! ```

use std::time::Instant;

use snlab::gan::{default_models, train, Dataset, TrainConfig};
use snlab::data::RingSpec;
use snlab::specnorm::{NormKind, NormMode};
use snlab::Rng;

fn main() -> snlab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().map_or(0, |s| s.parse().expect("seed"));
    let iters: usize = args.get(1).map_or(2000, |s| s.parse().expect("iters"));
    let kind: NormKind = args.get(2).map_or(Ok(NormKind::SNw), |s| s.parse())?;

    let ds = Dataset::Ring(RingSpec::default());
    let cfg = TrainConfig {
        iters,
        seed,
        log_every: (iters / 10).max(1),
        norm_mode: NormMode::new(kind),
        ..TrainConfig::default()
    };
    let (gen, arch) = default_models(&ds, &mut Rng::stream(seed, 4))?;

    let t0 = Instant::now();
    let out = train(gen, &arch, &ds, &cfg)?;
    println!("iter  layer  grad_fro   bound      sigma_w1  param_var  var_bound  loss_d   coverage");
    for r in &out.records {
        println!(
            "{:5} {:5}  {:9.4}  {:9.4}  {:8.4}  {:9.6}  {:9.6}  {:7.4}  {:.3}",
            r.iter,
            r.layer,
            r.grad_fro,
            r.grad_bound,
            r.sigma_w1,
            r.param_var,
            r.var_bound,
            r.loss_d,
            r.mode_coverage.unwrap_or(f64::NAN)
        );
    }
    if let Some(e) = &out.diverged {
        println!("stopped early: {e}");
    }
    println!(
        "{} iterations in {:.1}s, final coverage {:?}",
        out.iters_done,
        t0.elapsed().as_secs_f64(),
        out.final_coverage()
    );
    Ok(())
}
