//! Multiplying layer t by c_t with prod c_t = 1 leaves D and its input
//! gradient unchanged, while the per-layer gradient norms move.

use snlab::init::InitScheme;
use snlab::nn::{gradients, Activation, Network};
use snlab::theorems::{check_rescaling_equivalence, gaussian_inputs, ScaleVector};
use snlab::Rng;

fn main() -> snlab::Result<()> {
    let mut rng = Rng::new(11);
    let net = Network::dense(&[6, 10, 10, 1], Activation::LeakyReLU(0.2), Activation::Sigmoid, &InitScheme::lecun(), &mut rng)?;
    let xs = gaussian_inputs(6, 50, &mut rng);
    let c = ScaleVector(vec![4.0, 0.5, 0.5]);
    let r = check_rescaling_equivalence(&net, &c, &xs)?;
    println!("c = {:?}, max |dD| = {:.2e}, max |d grad_x| = {:.2e}", c.0, r.max_out_dev, r.max_gradx_dev);

    let scaled = net.rescaled(&c.0)?;
    let (_, g0) = gradients(&net, &xs[0])?;
    let (_, g1) = gradients(&scaled, &xs[0])?;
    println!("layer grad norms before: {:?}", g0.layer_norms());
    println!("layer grad norms after:  {:?}", g1.layer_norms());

    match check_rescaling_equivalence(&net, &ScaleVector(vec![2.0, 1.0, 1.0]), &xs) {
        Err(e) => println!("prod c != 1 rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
