//! Weight-initialization schemes and what spectral normalization does to
//! their per-entry variance.

use snlab::init::{init_weights, InitKind, InitScheme};
use snlab::linalg::exact_sigma;
use snlab::Rng;

fn main() -> snlab::Result<()> {
    let dims = [128, 64];
    let mut rng = Rng::new(4);
    let schemes = [
        ("lecun", InitScheme::lecun()),
        ("xavier", InitScheme::new(InitKind::Xavier, 1.0)),
        ("kaiming", InitScheme::kaiming(0.0)),
        ("gaussian 0.02", InitScheme::new(InitKind::PlainGaussian, 0.02)),
        ("uniform 0.1", InitScheme::new(InitKind::PlainUniform, 0.1)),
    ];
    println!("{:>14} {:>12} {:>12} {:>10} {:>14}", "scheme", "target var", "sample var", "sigma", "var after SN");
    for (name, s) in schemes {
        let w = init_weights(&dims, &s, &mut rng)?;
        let sigma = exact_sigma(w.data(), dims[0], dims[1]);
        println!(
            "{name:>14} {:12.6} {:12.6} {:10.4} {:14.6}",
            s.variance(dims[1], dims[0]),
            w.variance(),
            sigma,
            w.scaled(1.0 / sigma).variance()
        );
    }
    println!("upper bound after SN: 1/max(m,n) = {:.6}", 1.0 / 128.0);
    Ok(())
}
