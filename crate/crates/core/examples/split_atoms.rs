//! Split heavy atoms of a non-uniform measure so every atom is at most
//! `1/N`, without changing any norm on the subspace.

use concentration_lab::rng::stream;
use concentration_lab::sparsify::{split_atoms, SampledSubspace};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let big_n = 200;
    let sub = SampledSubspace::gaussian(3, big_n, 1.0, 1.5, &mut stream(4, "example-split", 0))?;
    let mu: Vec<f64> = (1..=big_n).map(|i| i as f64).collect();
    let total: f64 = mu.iter().sum();
    let sub = sub.with_mu(mu.iter().map(|m| m / total).collect())?;
    let (split, rep) = split_atoms(&sub, 1.0 / big_n as f64)?;
    println!(
        "N {} → {}, largest atom {:.3e} (cap {:.3e}), within 2M: {}",
        rep.n_before, rep.n_after, rep.max_atom, rep.cap, rep.size_within_2m
    );
    let x = [0.3, -1.2, 0.5];
    println!("‖x‖_r before {:.15}, after {:.15}", sub.lr_norm(&x)?, split.lr_norm(&x)?);
    Ok(())
}
