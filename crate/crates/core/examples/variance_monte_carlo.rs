//! Variance of normalized random weights: single-reshape SN against
//! 1/max(m,n) and the two-reshape mean against 2/(fan_in + fan_out).

use snlab::conv::KernelShape;
use snlab::theorems::{mc_variance_bsn, mc_variance_sn, EntryDist};

fn main() -> snlab::Result<()> {
    println!("{:>14} {:>9} {:>11} {:>11} {:>11}", "shape", "dist", "empirical", "upper", "lower ref");
    for (m, n) in [(1, 1), (3, 3), (16, 64), (64, 64), (3, 100)] {
        for dist in [EntryDist::Gaussian, EntryDist::Uniform] {
            let r = mc_variance_sn(m, n, dist, 4000, 1)?;
            println!(
                "{:>14} {:>9} {:11.6} {:11.6} {:>11}",
                format!("{m}x{n}"),
                format!("{dist:?}"),
                r.empirical_var,
                r.upper_bound,
                r.lower_qualitative.map_or("-".into(), |l| format!("{l:.6}"))
            );
        }
    }
    println!();
    for dims in [(1, 1, 1, 1), (3, 3, 3, 3), (8, 4, 3, 3), (16, 16, 3, 3)] {
        let ks = KernelShape::new(dims.0, dims.1, dims.2, dims.3)?;
        let r = mc_variance_bsn(ks, EntryDist::Gaussian, 2000, 1)?;
        println!("BSN {dims:?}: empirical {:.6}, bound {:.6}", r.empirical_var, r.upper_bound);
    }
    Ok(())
}
