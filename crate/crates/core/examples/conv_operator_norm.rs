//! The σ views of a convolution kernel: the two reshapes, their mean, and
//! the true operator norm for a given input size.

use snlab::conv::explicit_conv_matrix;
use snlab::linalg::exact_sigma_matrix;
use snlab::power::IterMode;
use snlab::specnorm::sigma_report;
use snlab::conv::ConvGeometry;
use snlab::{Rng, Tensor};

fn main() -> snlab::Result<()> {
    let mut rng = Rng::new(3);
    let kernel = Tensor::from_fn(&[8, 4, 3, 3], || rng.gaussian());
    println!("kernel 8x4x3x3, stride 1, pad 1");
    println!("{:>8} {:>10} {:>10} {:>10} {:>10} {:>12}", "input", "sigma_w1", "sigma_w2", "bsn", "conv", "explicit");
    for size in [3, 4, 6, 8, 12] {
        let geom = ConvGeometry::new([4, size, size], 1, 1);
        let r = sigma_report(&kernel, Some(geom), IterMode::EXACT, 0)?;
        let explicit = exact_sigma_matrix(&explicit_conv_matrix(&kernel, [4, size, size], 1, 1)?)?;
        println!(
            "{:>8} {:10.5} {:10.5} {:10.5} {:10.5} {:12.5}",
            format!("{size}x{size}"),
            r.sigma_w1,
            r.sigma_w2,
            r.sigma_bsn,
            r.sigma_conv.unwrap_or(f64::NAN),
            explicit
        );
    }
    Ok(())
}
