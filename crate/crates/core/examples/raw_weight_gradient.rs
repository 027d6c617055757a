//! Gradient of D with respect to the raw weights when the network uses
//! w/sigma(w), checked against finite differences.

use snlab::init::InitScheme;
use snlab::nn::{self, Activation, Network};
use snlab::power::IterMode;
use snlab::specnorm::{apply_normalization, normalize_strict, raw_gradients, NormKind, NormMode, NormStates};
use snlab::Rng;

fn main() -> snlab::Result<()> {
    let mut rng = Rng::new(9);
    let net = Network::dense(&[3, 6, 1], Activation::LeakyReLU(0.2), Activation::Sigmoid, &InitScheme::lecun(), &mut rng)?
        .with_norm(NormMode::new(NormKind::SNw))?;
    let x = rng.gaussian_vec(3);

    let mut states = NormStates::for_network(&net, 0);
    let normalized = apply_normalization(&net, &mut states, IterMode::EXACT)?;
    let grads = raw_gradients(&net, &normalized, &states, &x)?;
    let (_, eff) = nn::gradients(&normalized.net, &x)?;

    let h = 1e-6;
    for t in 0..net.depth() {
        let mut worst = 0.0_f64;
        for i in 0..grads[t].len() {
            let eval = |d: f64| -> snlab::Result<f64> {
                let mut ws: Vec<_> = net.weights().into_iter().cloned().collect();
                ws[t].data_mut()[i] += d;
                nn::output(&normalize_strict(&net.with_weights(ws)?, net.norm)?, &x)
            };
            let num = (eval(h)? - eval(-h)?) / (2.0 * h);
            worst = worst.max((num - grads[t].data()[i]).abs());
        }
        println!(
            "layer {t}: |grad raw| = {:.6}, |grad effective| = {:.6}, max |analytic - numeric| = {worst:.2e}",
            grads[t].frobenius(),
            eff.grads_w[t].frobenius()
        );
    }
    Ok(())
}
