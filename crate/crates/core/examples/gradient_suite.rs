//! Finite-difference checks of every differentiable path.

use avatar_core::gradcheck::run_suite;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let configs = std::env::args().nth(1).map(|a| a.parse()).transpose()?.unwrap_or(5);
    let results = run_suite(configs, 0, |r| println!("{:<24} max rel error {:.2e}", r.name, r.max_rel_error))?;
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!("{} checks x {configs} configurations, worst {worst:.2e}", results.len());
    Ok(())
}
