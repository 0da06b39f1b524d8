//! Sobolev-norm bound on the total variation between the rescaled velocity
//! and its OU limit, and the derivative slices that feed it.

use sklimit::integrators::simulate_rescaled;
use sklimit::malliavin::{hnorm_sq, r_grid, slice_ou, slice_pair, tv_bound_rescaled, DEFAULT_R_NODES};
use sklimit::model::{builtin, SolverGrid};
use sklimit::noise::SeedSpec;

fn main() -> sklimit::error::Result<()> {
    let spec = builtin("linear_trig")?.initial(0.5, 0.0).build()?;
    let t = 1.0;
    for (i, alpha) in [64.0, 256.0, 1024.0].into_iter().enumerate() {
        let b = tv_bound_rescaled(alpha, t, &spec, 2_000, SeedSpec::new(5, i as u64))?;
        println!(
            "alpha={alpha:>6}  E|dY|^2={:.3e}  E||D dY||^2={:.3e}  bound={:.4}",
            b.l2_term, b.h_term, b.bound
        );
    }

    // The OU slice alone: its H-norm is sigma00^2 lambda(t, 2(kappa+gamma)).
    let grid = SolverGrid::capped(&spec)?;
    let run = simulate_rescaled(&spec, &grid, 256.0, 200, SeedSpec::new(6, 0))?;
    let nodes = r_grid(t, DEFAULT_R_NODES)?;
    let (_, dy) = slice_pair(&run.primary, &spec, 256.0, t, &nodes)?;
    let ou = slice_ou(spec.sigma00(), spec.kappa_plus_gamma(), t, &nodes, 200);
    println!("||DY~^a||^2 = {:.5}, ||DY~||^2 = {:.5}", hnorm_sq(&dy)?.mean, hnorm_sq(&ou)?.mean);
    Ok(())
}
