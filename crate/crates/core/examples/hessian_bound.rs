//! Largest Hessian eigenvalue of D with respect to each layer's weights,
//! estimated by finite-difference Hessian-vector products.

use snlab::init::InitScheme;
use snlab::nn::{Activation, Network};
use snlab::specnorm::{normalize_strict, NormKind, NormMode};
use snlab::theorems::{check_hessian_bounds, gaussian_inputs};
use snlab::Rng;

fn main() -> snlab::Result<()> {
    let mut rng = Rng::new(5);
    for last in [Activation::Sigmoid, Activation::Identity] {
        let raw = Network::dense(&[8, 16, 16, 1], Activation::ReLU, last, &InitScheme::lecun(), &mut rng)?;
        let net = normalize_strict(&raw, NormMode::new(NormKind::SNw))?;
        let xs = gaussian_inputs(8, 20, &mut rng);
        let r = check_hessian_bounds(&net, &xs, 200)?;
        println!("final {last}: max |H|/|x|^2 = {:.5} (limit {}), max |H|/bound = {:.4}, pass {}",
            r.max_normalized_estimate, r.specialization_limit, r.max_bound_ratio, r.pass);
        for s in r.samples.iter().take(3) {
            println!("  input {} layer {}: |H| = {:.5}, bound = {:.5}", s.input, s.layer, s.estimate, s.bound);
        }
    }
    Ok(())
}
