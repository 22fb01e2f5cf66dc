//! Repeated sparsification of a Gaussian subspace, with per-round
//! distortion and the cumulative product.

use concentration_lab::rng::stream;
use concentration_lab::sparsify::{iterate_embedding, IterateOptions, SampledSubspace, UniformDensity};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sub = SampledSubspace::gaussian(2, 1500, 1.0, 1.5, &mut stream(12, "example-iterate", 0))?;
    let rep = iterate_embedding(&sub, 3, &[0.25], &UniformDensity::default(), 1.0, 12, &IterateOptions::default())?;
    for r in &rep.rounds {
        println!(
            "round {}: N {} (split {}) → {}, δ = {:.4}, distortion {:.4}",
            r.round, r.n_in, r.n_split, r.k, r.choice.delta, r.distortion
        );
    }
    println!(
        "cumulative distortion {:.4} (budget {:.4}), pass {}",
        rep.cumulative_distortion, rep.distortion_budget, rep.pass
    );
    Ok(())
}
