//! Empirical tail of a randomly selected sum for a fixed unit vector,
//! against its exponential bound.

use concentration_lab::deviation::c_grid;
use concentration_lab::rng::stream;
use concentration_lab::sparsify::{estimate_k, tail10_experiment, SampledSubspace};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sub = SampledSubspace::gaussian(2, 512, 1.0, 1.5, &mut stream(8, "example-tail10", 0))?;
    let k = estimate_k(&sub, 256, 1)?;
    let u = [1.0, 0.5];
    let norm = sub.lr_norm(&u)?;
    let x: Vec<f64> = u.iter().map(|v| v / norm).collect();
    let rep = tail10_experiment(&sub, &x, 0.25, 20_000, &c_grid(1.0, 12), k, 2)?;
    println!("K ≈ {k:.4}, pass {}", rep.pass);
    print!("{}", rep.to_csv());
    Ok(())
}
