//! Per-layer and overall gradient norms of a spectrally normalized
//! discriminator against their bounds, plus the internal norm chains.

use snlab::init::InitScheme;
use snlab::nn::{Activation, Network};
use snlab::specnorm::{normalize_strict, NormKind, NormMode};
use snlab::theorems::check_gradient_bound;
use snlab::Rng;

fn main() -> snlab::Result<()> {
    let mut rng = Rng::new(0);
    for last in [Activation::Identity, Activation::Sigmoid] {
        let raw = Network::dense(&[16, 32, 32, 16, 1], Activation::ReLU, last, &InitScheme::lecun(), &mut rng)?;
        let net = normalize_strict(&raw, NormMode::new(NormKind::SNw))?;
        let r = check_gradient_bound(&net, 200, &mut rng)?;
        println!("final {last}: sigmas {:?}", r.sigmas.iter().map(|s| format!("{s:.6}")).collect::<Vec<_>>());
        println!("  max |grad_theta| / (sqrt(L)|x|prod Lip) = {:.4}", r.max_ratio);
        println!("  max per-layer |grad_w| / bound          = {:.4}", r.max_layer_ratio);
        println!("  max internal chain ratio                = {:.4}", r.max_internal_ratio);
        println!("  pass: {}", r.pass);

        // without normalization the same bound uses the raw sigmas and grows with them
        let plain = check_gradient_bound(&raw, 200, &mut rng)?;
        println!("  unnormalized: max |grad_w| / (|x| prod Lip) = {:.3}", plain.max_unit_ratio);
    }
    Ok(())
}
