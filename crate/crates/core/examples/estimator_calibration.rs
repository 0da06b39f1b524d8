//! Distance estimators on Gaussian pairs with closed-form answers.

use sklimit::cli::calibration_checks;
use sklimit::distances::{kde_density, tv_noise_floor};
use sklimit::noise::{standard_normals, SeedSpec};

fn main() -> sklimit::error::Result<()> {
    for c in calibration_checks(SeedSpec::new(10, 0), 100_000)? {
        println!("{:<30} {:>10.6}  expected {} +- {}  {}", c.check, c.estimate, c.expected, c.tolerance, if c.passed { "ok" } else { "FAIL" });
    }
    let z = standard_normals(SeedSpec::new(10, 9), 10_000);
    let kde = kde_density(&z, None)?;
    println!("kde bandwidth {:.4}, integral {:.6}", kde.bandwidth, kde.integral());
    for n in [1_000, 10_000, 100_000] {
        println!("tv noise floor at n={n}: {:.4}", tv_noise_floor(n)?);
    }
    Ok(())
}
