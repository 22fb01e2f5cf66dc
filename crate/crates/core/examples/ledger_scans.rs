//! Grid scans of the scalar inequalities and the slice inequalities on a
//! random three-block space.

use concentration_lab::inequality_lab::{base_case_scan, claim_scan, ineq7_scan, slice_inequalities_check};
use concentration_lab::product_space::{random_event, random_space, RandomSpaceParams};
use concentration_lab::rng::stream;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let base = base_case_scan(10_001)?;
    println!("base case: max {:.12} at {:?}", base.max, base.argmax);
    let claim = claim_scan(10_000)?;
    println!(
        "claim: max {:.3e}, f(1) = {:.3e}, f'(1) = {:.3e}",
        claim.scan.max, claim.f_at_one, claim.fprime_at_one
    );
    let unit = ineq7_scan(1000)?;
    println!("unit square: max {:.3e} over {} points", unit.max, unit.points);

    let mut rng = stream(5, "example-ledger", 0);
    let params = RandomSpaceParams {
        min_blocks: 3,
        max_blocks: 3,
        ..Default::default()
    };
    let space = random_space(&params, &mut rng);
    let event = random_event(&space, 1 << 14, &mut rng)?;
    let slices = slice_inequalities_check(&space, &event, 1e-6)?;
    println!(
        "slices: {} checks, {} skipped, max excess {:.3e}",
        slices.checks,
        slices.skipped.len(),
        slices.max_excess_v
    );
    Ok(())
}
