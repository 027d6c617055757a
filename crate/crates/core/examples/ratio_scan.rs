//! Trains briefly, then compares per-layer gradient-norm ratios with
//! inverse spectral-norm ratios on the saved checkpoints.

use snlab::data::RingSpec;
use snlab::gan::{default_models, train, Dataset, TrainConfig};
use snlab::specnorm::{NormKind, NormMode};
use snlab::theorems::{gaussian_inputs, setd_ratio_scan};
use snlab::Rng;

fn main() -> snlab::Result<()> {
    let ds = Dataset::Ring(RingSpec::default());
    let (gen, arch) = default_models(&ds, &mut Rng::new(0))?;
    let cfg = TrainConfig {
        iters: 600,
        log_every: 300,
        checkpoint_every: 200,
        norm_mode: NormMode::new(NormKind::SNw),
        ..TrainConfig::default()
    };
    let out = train(gen, &arch, &ds, &cfg)?;
    let nets = out.checkpoints.iter().map(|c| c.effective()).collect::<snlab::Result<Vec<_>>>()?;
    let mut rng = Rng::new(1);
    let xs = gaussian_inputs(2, 64, &mut rng);
    let scan = setd_ratio_scan(&nets, 4, &xs, 1.0, &mut rng)?;
    println!("checkpoint rescaling i j   grad ratio  inverse sigma ratio");
    for p in &scan.points {
        println!("{:10} {:9} {} {}   {:10.4}  {:10.4}", p.checkpoint, p.rescaling, p.i, p.j, p.grad_norm_ratio, p.inverse_sigma_ratio);
    }
    println!("max |log gap| = {:.3}", scan.max_log_gap);
    Ok(())
}
