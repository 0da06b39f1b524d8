//! Rescaled velocity against its OU limit: coupled gap and terminal variance.

use sklimit::integrators::simulate_rescaled;
use sklimit::model::{builtin, lambda_kernel, SolverGrid};
use sklimit::noise::SeedSpec;

fn main() -> sklimit::error::Result<()> {
    let spec = builtin("trig")?.kappa(1.0).gamma(1.0).initial(0.3, 0.0).build()?;
    let grid = SolverGrid::capped(&spec)?;
    let target = spec.sigma00().powi(2) * lambda_kernel(grid.horizon(), 2.0 * spec.kappa_plus_gamma())?;
    println!("OU variance at T: {target:.5}");
    for (i, alpha) in [16.0, 256.0, 4096.0].into_iter().enumerate() {
        let run = simulate_rescaled(&spec, &grid, alpha, 5_000, SeedSpec::new(3, i as u64))?;
        let y = run.primary.y_final.as_ref().unwrap();
        let var = y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
        let sup = run.primary.running_sup.as_ref().unwrap();
        let l2 = (sup.iter().map(|s| s * s).sum::<f64>() / sup.len() as f64).sqrt();
        println!("alpha={alpha:>6}  E[Y~^2]={var:.5}  (E sup|Y~^a - Y~|^2)^(1/2)={l2:.3e}");
    }
    Ok(())
}
