//! Spreading a fixed product of spectral norms across layers: the uniform
//! allocation c_t = lambda/sigma_t minimizes the total gradient norm.

use snlab::theorems::{allocation_objective, check_allocation_optimality, optimal_allocation, ScaleVector};
use snlab::Rng;

fn main() -> snlab::Result<()> {
    let sigmas = [8.0, 2.0, 1.0, 0.25];
    let c = optimal_allocation(&sigmas)?;
    println!("sigmas {sigmas:?}");
    println!("c_opt  {:?}", c.0);
    println!("F(c_opt) = {:.6}", allocation_objective(&c.0, &sigmas, 1.0));
    println!("F(1)     = {:.6}", allocation_objective(&[1.0; 4], &sigmas, 1.0));

    let mut rng = Rng::new(2);
    for _ in 0..3 {
        let r = ScaleVector::random_feasible(4, 0.7, &mut rng);
        println!("F(random) = {:.6}", allocation_objective(&r.0, &sigmas, 1.0));
    }
    let report = check_allocation_optimality(&sigmas, 1.0, 1000, &mut rng)?;
    println!("closed form {:.6}, best of 1000 random {:.6}, pass {}", report.f_closed_form, report.min_random_f, report.pass);
    Ok(())
}
