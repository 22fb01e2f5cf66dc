//! Random coordinate selection on a Gaussian 4-dimensional subspace of
//! `L_1` over 2048 atoms, certified on an ε-net.

use concentration_lab::rng::stream;
use concentration_lab::sparsify::{
    build_net, choose_delta_k, estimate_k, Certifier, NetOptions, SampledSubspace,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (n, big_n, r, s, eps) = (4, 2048, 1.0, 1.5, 0.25);
    let sub = SampledSubspace::gaussian(n, big_n, r, s, &mut stream(1, "example-subspace", 0))?;
    let k = estimate_k(&sub, 256, 2)?;
    let t = std::time::Instant::now();
    let net = build_net(&sub, eps, 3, &NetOptions::default())?;
    println!(
        "K ≈ {k:.4}, net of {} points (volumetric bound e^{:.1}), certified: {}, built in {:.1?}",
        net.size,
        net.log_theoretical_size,
        net.certified,
        t.elapsed()
    );
    let cert = Certifier::new(&sub, &net)?;
    for c in [1.0, 2.0, 4.0, 8.0] {
        let choice = choose_delta_k(n, big_n, k, r, s, eps, c)?;
        let trials: Vec<_> = (0..100)
            .map(|i| cert.trial(choice.delta, eps, i))
            .collect::<Result<_, _>>()?;
        let passed = trials.iter().filter(|t| t.pass).count();
        let worst = trials.iter().map(|t| t.distortion).fold(1.0, f64::max);
        println!(
            "c = {c}: δ = {:.4}, k_target = {:.0}, {passed}/100 certified, worst distortion {worst:.4}",
            choice.delta, choice.k_target
        );
    }
    Ok(())
}
