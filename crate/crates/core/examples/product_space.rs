//! Build a small product space, validate it, enumerate outcomes and compare
//! an event's exact probability with a sampled frequency.

use concentration_lab::product_space::{
    event_probability, validate_space, BlockNorm, BlockSpace, Event, ProductSpace,
};
use concentration_lab::rng::stream;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let space = ProductSpace::new(
        vec![
            BlockSpace::new(vec![vec![0.0], vec![1.0]], BlockNorm::L2, vec![0.3, 0.7]),
            BlockSpace::new(
                vec![vec![0.0, 0.0], vec![0.5, 0.0], vec![0.0, 0.5]],
                BlockNorm::L1,
                vec![0.5, 0.25, 0.25],
            ),
        ],
        2.0,
    );
    let diag = validate_space(&space);
    println!("valid: {}, outcomes: {:?}", diag.is_valid(), diag.outcome_count);

    for (t, w) in space.outcomes(1 << 10)? {
        println!("  {:?}  P = {w:.4}  x = {:?}", t.0, space.coordinates(&t));
    }

    let event = Event::from_indices(&space, [0, 4]);
    let exact = event_probability(&space, &event)?;
    let mut rng = stream(7, "example-sample", 0);
    let n = 100_000;
    let hits = (0..n).filter(|_| event.contains(&space.sample(&mut rng))).count();
    println!("P(A) = {exact:.4}, sampled {:.4} over {n} draws", hits as f64 / n as f64);
    Ok(())
}
