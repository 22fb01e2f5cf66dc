//! Tails of convex Lipschitz functions around the median and the mean,
//! written as CSV curves.

use concentration_lab::deviation::{c_grid, lipschitz_p, random_convex_fn, tail_vs_bound, CenterKind, FnFamily, TailOptions};
use concentration_lab::product_space::{random_space, RandomSpaceParams};
use concentration_lab::rng::stream;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = stream(9, "example-deviation", 0);
    let params = RandomSpaceParams {
        min_blocks: 6,
        max_blocks: 6,
        ..Default::default()
    };
    let space = random_space(&params, &mut rng);
    for family in [FnFamily::Linear, FnFamily::DistanceToPoint, FnFamily::MaxAffine] {
        let f = random_convex_fn(family, &space, &mut rng);
        let grid = c_grid(2.0 * lipschitz_p(&f, &space)?, 20);
        for center in [CenterKind::Median, CenterKind::Mean] {
            let opts = TailOptions {
                center,
                ..Default::default()
            };
            let rep = tail_vs_bound(&space, &f, &grid, &opts)?;
            let worst = rep.rows.iter().filter(|r| r.bound > 0.0).map(|r| r.tail / r.bound).fold(0.0, f64::max);
            println!("{family:?} around {center:?}: σ = {:.4}, worst tail/bound {worst:.3}, pass {}", rep.sigma_p, rep.pass);
            if family == FnFamily::Linear && center == CenterKind::Median {
                print!("{}", rep.to_csv());
            }
        }
    }
    Ok(())
}
