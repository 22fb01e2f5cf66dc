//! Check `E exp(φ_A^p / 4) ≤ 1 / P(A)` on random spaces for several outer
//! exponents.

use concentration_lab::inequality_lab::theorem1_verify;
use concentration_lab::product_space::{random_event, random_space, RandomSpaceParams};
use concentration_lab::rng::stream;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for i in 0..5 {
        let mut rng = stream(11, "example-theorem1", i);
        let params = RandomSpaceParams {
            max_blocks: 4,
            ..Default::default()
        };
        let base = random_space(&params, &mut rng);
        let event = random_event(&base, 1 << 14, &mut rng)?;
        for p in [2.0, 3.0, 4.0] {
            let rep = theorem1_verify(&base.with_outer_p(p), &event, 1e-6)?;
            println!(
                "space {i}, p = {p}: P(A) = {:.4}, E = {:.4} ≤ {:.4}: {}",
                rep.prob_a, rep.expectation, rep.bound, rep.pass
            );
        }
    }
    Ok(())
}
