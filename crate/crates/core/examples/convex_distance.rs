//! Certified convex distance from each outcome of a random space to a
//! random event.

use concentration_lab::convex_distance::convex_distance;
use concentration_lab::product_space::{random_event, random_space, RandomSpaceParams};
use concentration_lab::rng::stream;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = stream(3, "example-distance", 0);
    let params = RandomSpaceParams {
        min_blocks: 3,
        max_blocks: 3,
        max_points: 2,
        ..Default::default()
    };
    let space = random_space(&params, &mut rng);
    let event = random_event(&space, 1 << 12, &mut rng)?;
    println!(
        "{} blocks, {} outcomes, |A| = {}",
        space.n_blocks(),
        space.outcome_count().unwrap_or(0),
        event.len()
    );
    for (t, _) in space.outcomes(1 << 12)? {
        let cert = convex_distance(&space, &event, &t, 1e-9)?;
        println!(
            "  {:?}: φ ∈ [{:.6}, {:.6}] after {} iterations{}",
            t.0,
            cert.lower,
            cert.upper,
            cert.iterations,
            if event.contains(&t) { " (in A)" } else { "" }
        );
    }
    Ok(())
}
