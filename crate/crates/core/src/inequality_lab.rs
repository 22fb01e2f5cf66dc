//! Exhaustive checks of the convex-distance concentration inequality
//!
//! ```text
//! E exp(φ_{A,p}^p / 4) ≤ 1 / P(A)
//! ```
//!
//! on enumerable product spaces, together with scans of every scalar step in
//! its induction proof: the base case, the two-branch choice of `α(λ)`, the
//! bound `g(λ) ≤ 2 − λ`, the product inequality on the unit square, and the
//! slice inequalities relating `φ_A(t, w)` to the distances from `t` to the
//! sections `A_w`.

use serde::Serialize;

use crate::convex_distance::{HullSolver, SolverOptions};
use crate::error::{Error, Result};
use crate::numeric::{abs_pow, CompensatedSum};
use crate::product_space::{
    event_probability, BlockSpace, Event, Outcome, ProductSpace, DEFAULT_OUTCOME_CAP,
};

/// Points on the `α` grid used by [`slice_inequalities_check`].
pub const ALPHA_GRID: usize = 1001;

/// Certified bounds on `φ` for every outcome of an enumerable space, in
/// lexicographic order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceProfile {
    pub exponent: f64,
    pub weights: Vec<f64>,
    pub upper: Vec<f64>,
    pub lower: Vec<f64>,
}

impl DistanceProfile {
    pub fn max_gap(&self) -> f64 {
        self.upper
            .iter()
            .zip(&self.lower)
            .fold(0.0, |m, (u, l)| m.max(u - l))
    }
}

/// Solve `φ_{A,p}(t)` for all `t ∈ Ω`. Fails on the first uncertified solve.
pub fn distance_profile(
    space: &ProductSpace,
    event: &Event,
    exponent: Option<f64>,
    tol: f64,
    cap: u64,
) -> Result<DistanceProfile> {
    let solver = HullSolver::new(space, event, exponent)?;
    let opts = SolverOptions::with_tol(tol);
    let outcomes = space.outcomes(cap)?;
    let n = outcomes.len();
    let mut profile = DistanceProfile {
        exponent: solver.exponent(),
        weights: Vec::with_capacity(n),
        upper: Vec::with_capacity(n),
        lower: Vec::with_capacity(n),
    };
    for (t, w) in outcomes {
        let cert = solver.solve(&t, &opts)?;
        if !cert.certified {
            return Err(Error::NotCertified {
                upper: cert.upper,
                lower: cert.lower,
                iterations: cert.iterations,
            });
        }
        profile.weights.push(w);
        profile.upper.push(cert.upper);
        profile.lower.push(cert.lower);
    }
    Ok(profile)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem1Report {
    pub outer_p: f64,
    pub event_size: usize,
    pub prob_a: f64,
    /// `Σ_t P({t}) exp(ub(t)^p / 4)`.
    pub expectation: f64,
    /// `1 / P(A)`.
    pub bound: f64,
    pub margin: f64,
    /// `Σ_t P({t}) (exp(ub^p / 4) − exp(lb^p / 4))`.
    pub gap_budget: f64,
    /// `P(A) · expectation`, to be compared with `1 + gap_budget`.
    pub normalized: f64,
    pub max_gap: f64,
    pub pass: bool,
}

impl Theorem1Report {
    pub fn from_profile(profile: &DistanceProfile, prob_a: f64, event_size: usize) -> Self {
        let p = profile.exponent;
        let mut hi = CompensatedSum::new();
        let mut lo = CompensatedSum::new();
        for ((w, u), l) in profile.weights.iter().zip(&profile.upper).zip(&profile.lower) {
            hi.add(w * (abs_pow(*u, p) / 4.0).exp());
            lo.add(w * (abs_pow(*l, p) / 4.0).exp());
        }
        let expectation = hi.value();
        let gap_budget = (hi.value() - lo.value()).max(0.0);
        let bound = 1.0 / prob_a;
        Self {
            outer_p: p,
            event_size,
            prob_a,
            expectation,
            bound,
            margin: bound - expectation,
            gap_budget,
            normalized: prob_a * expectation,
            max_gap: profile.max_gap(),
            pass: expectation <= bound + gap_budget,
        }
    }
}

pub fn theorem1_verify(space: &ProductSpace, event: &Event, tol: f64) -> Result<Theorem1Report> {
    let profile = distance_profile(space, event, None, tol, DEFAULT_OUTCOME_CAP)?;
    theorem1_from_profile(space, event, &profile)
}

pub fn theorem1_from_profile(
    space: &ProductSpace,
    event: &Event,
    profile: &DistanceProfile,
) -> Result<Theorem1Report> {
    let prob_a = event_probability(space, event)?;
    Ok(Theorem1Report::from_profile(profile, prob_a, event.len()))
}

/// Worst excess of `ub_p(t)^p − ub_2(t)^2` over all outcomes; the pointwise
/// comparison holds because every block displacement has norm at most one.
pub fn pointwise_exponent_excess(profile_p: &DistanceProfile, profile_2: &DistanceProfile) -> f64 {
    let p = profile_p.exponent;
    profile_p
        .upper
        .iter()
        .zip(&profile_2.upper)
        .map(|(a, b)| abs_pow(*a, p) - b * b)
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScanResult {
    /// Largest value found (for inequality scans: largest violation).
    pub max: f64,
    pub argmax: [f64; 2],
    pub points: u64,
}

fn grid(n: usize, i: usize) -> f64 {
    i as f64 / (n - 1) as f64
}

fn check_grid(grid_size: usize) -> Result<()> {
    if grid_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "grid size {grid_size} must be at least 2"
        )));
    }
    Ok(())
}

/// `r (r + (1 − r) e^{1/4})`, the one-block bound times `P(A) = r`.
pub fn base_case_value(r: f64) -> f64 {
    r * (r + (1.0 - r) * 0.25f64.exp())
}

/// Maximize [`base_case_value`] over `grid_size` uniform points of `[0, 1]`.
pub fn base_case_scan(grid_size: usize) -> Result<ScanResult> {
    check_grid(grid_size)?;
    let mut best = ScanResult {
        max: f64::NEG_INFINITY,
        argmax: [0.0; 2],
        points: grid_size as u64,
    };
    for i in 0..grid_size {
        let r = grid(grid_size, i);
        let v = base_case_value(r);
        if v > best.max {
            best.max = v;
            best.argmax = [r, 0.0];
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LedgerScalars {
    pub lambda: f64,
    pub alpha: f64,
    pub g: f64,
}

/// `α(λ) = 1 + 2 log λ` and `g = exp(−log λ − (log λ)²)` while
/// `2 log λ > −1`; otherwise `α = 0`, `g = e^{1/4}`.
pub fn alpha_g(lambda: f64) -> Result<LedgerScalars> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda = {lambda} outside (0, 1]"
        )));
    }
    Ok(alpha_g_unchecked(lambda))
}

fn alpha_g_unchecked(lambda: f64) -> LedgerScalars {
    let l = lambda.ln();
    if 2.0 * l > -1.0 {
        LedgerScalars {
            lambda,
            alpha: 1.0 + 2.0 * l,
            g: (-l - l * l).exp(),
        }
    } else {
        LedgerScalars {
            lambda,
            alpha: 0.0,
            g: 0.25f64.exp(),
        }
    }
}

/// `f(λ) = g(λ) + λ − 2`.
pub fn claim_value(lambda: f64) -> f64 {
    alpha_g_unchecked(lambda).g + lambda - 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClaimScan {
    pub scan: ScanResult,
    pub f_at_one: f64,
    /// Centered difference at `λ = 1`, using the smooth branch on both sides.
    pub fprime_at_one: f64,
}

/// Scan `f` on `λ = i / grid_size`, `i = 1..=grid_size`.
pub fn claim_scan(grid_size: usize) -> Result<ClaimScan> {
    check_grid(grid_size)?;
    let mut scan = ScanResult {
        max: f64::NEG_INFINITY,
        argmax: [0.0; 2],
        points: grid_size as u64,
    };
    for i in 1..=grid_size {
        let lambda = i as f64 / grid_size as f64;
        let v = claim_value(lambda);
        if v > scan.max {
            scan.max = v;
            scan.argmax = [lambda, 0.0];
        }
    }
    let h = 1e-5;
    let smooth = |x: f64| {
        let l: f64 = x.ln();
        (-l - l * l).exp() + x - 2.0
    };
    Ok(ClaimScan {
        scan,
        f_at_one: claim_value(1.0),
        fprime_at_one: (smooth(1.0 + h) - smooth(1.0 - h)) / (2.0 * h),
    })
}

/// `(q + (1 − q)(2 − t)) (q + (1 − q) t)`.
pub fn ineq7_value(q: f64, t: f64) -> f64 {
    (q + (1.0 - q) * (2.0 - t)) * (q + (1.0 - q) * t)
}

/// Largest `ineq7_value − 1` over a `grid_size × grid_size` grid of `[0, 1]²`.
pub fn ineq7_scan(grid_size: usize) -> Result<ScanResult> {
    check_grid(grid_size)?;
    let mut best = ScanResult {
        max: f64::NEG_INFINITY,
        argmax: [0.0; 2],
        points: (grid_size as u64).pow(2),
    };
    for i in 0..grid_size {
        let q = grid(grid_size, i);
        for j in 0..grid_size {
            let t = grid(grid_size, j);
            let v = ineq7_value(q, t) - 1.0;
            if v > best.max {
                best.max = v;
                best.argmax = [q, t];
            }
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SliceReport {
    /// Index in the last block of the heaviest section.
    pub v: usize,
    pub slice_probs: Vec<f64>,
    /// Points of the last block whose section is empty.
    pub skipped: Vec<usize>,
    pub checks: usize,
    /// Worst `φ_A(t, v)^p − φ_{A_v}(t)^p`.
    pub max_excess_v: f64,
    /// Worst `φ_A(t, w)^p − min_α [α φ_{A_w}^p + (1 − α) φ_{A_v}^p + (1 − α)^p]`.
    pub max_excess_w: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Split off the last block and compare distances in `Ω_1 × … × Ω_{n+1}`
/// against distances to the sections `A_w ⊆ Ω_1 × … × Ω_n`.
///
/// The left-hand sides use lower bounds and the right-hand sides upper
/// bounds, so solver error cannot produce a spurious pass. A solve that stalls
/// short of its tolerance still yields valid bounds and is used as is.
/// With `outer_p = p` the last-block penalty is `(1 − α)^p`, which is the
/// familiar `(1 − α)²` when `p = 2`.
pub fn slice_inequalities_check(
    space: &ProductSpace,
    event: &Event,
    tol: f64,
) -> Result<SliceReport> {
    space.ensure_valid()?;
    event.validate(space)?;
    if space.n_blocks() < 2 {
        return Err(Error::InvalidArgument(
            "slice check needs at least two blocks".into(),
        ));
    }
    if event.is_empty() {
        return Err(Error::InvalidEvent("slice check on an empty event".into()));
    }
    let p = space.outer_p;
    let nb = space.n_blocks();
    let head = ProductSpace::new(space.blocks[..nb - 1].to_vec(), p);
    let last: &BlockSpace = &space.blocks[nb - 1];
    space.checked_count(DEFAULT_OUTCOME_CAP)?;

    let mut sections: Vec<Vec<Outcome>> = vec![Vec::new(); last.len()];
    for a in event.outcomes() {
        sections[a.0[nb - 1]].push(Outcome(a.0[..nb - 1].to_vec()));
    }
    let sections: Vec<Event> = sections.into_iter().map(Event::new).collect();
    let slice_probs = sections
        .iter()
        .map(|s| event_probability(&head, s))
        .collect::<Result<Vec<_>>>()?;
    let skipped: Vec<usize> = (0..last.len()).filter(|&w| sections[w].is_empty()).collect();
    let mut v = None;
    for w in 0..last.len() {
        if sections[w].is_empty() {
            continue;
        }
        if v.is_none_or(|b: usize| slice_probs[w] > slice_probs[b]) {
            v = Some(w);
        }
    }
    let v = v.ok_or_else(|| Error::InvalidEvent("every section is empty".into()))?;

    let opts = SolverOptions::with_tol((tol * 1e-2).min(1e-8));
    let full = HullSolver::new(space, event, None)?;
    let section_solvers = sections
        .iter()
        .map(|s| {
            if s.is_empty() {
                Ok(None)
            } else {
                HullSolver::new(&head, s, None).map(Some)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let solve = |solver: &HullSolver, t: &Outcome| -> Result<(f64, f64)> {
        let c = solver.solve(t, &opts)?;
        Ok((abs_pow(c.lower, p), abs_pow(c.upper, p)))
    };

    let mut checks = 0;
    let mut max_excess_v = f64::NEG_INFINITY;
    let mut max_excess_w = f64::NEG_INFINITY;
    let alphas: Vec<f64> = (0..ALPHA_GRID).map(|i| grid(ALPHA_GRID, i)).collect();
    for (t, _) in head.outcomes(DEFAULT_OUTCOME_CAP)? {
        let (_, dv) = solve(section_solvers[v].as_ref().unwrap(), &t)?;
        let mut tw = t.0.clone();
        tw.push(v);
        let (lhs, _) = solve(&full, &Outcome(tw.clone()))?;
        max_excess_v = max_excess_v.max(lhs - dv);
        checks += 1;
        for (w, sw) in section_solvers.iter().enumerate() {
            let Some(sw) = sw else { continue };
            if w == v {
                continue;
            }
            let (_, dw) = solve(sw, &t)?;
            *tw.last_mut().unwrap() = w;
            let (lhs, _) = solve(&full, &Outcome(tw.clone()))?;
            let rhs = alphas
                .iter()
                .map(|&a| a * dw + (1.0 - a) * dv + abs_pow(1.0 - a, p))
                .fold(f64::INFINITY, f64::min);
            max_excess_w = max_excess_w.max(lhs - rhs);
            checks += 1;
        }
    }
    let pass = max_excess_v <= tol && max_excess_w <= tol;
    Ok(SliceReport {
        v,
        slice_probs,
        skipped,
        checks,
        max_excess_v,
        max_excess_w,
        tol,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::product_space::{bernoulli_cube, random_event, random_space, RandomSpaceParams};
    use crate::rng::stream;
    use approx::assert_relative_eq;

    fn ev(v: &[&[usize]]) -> Event {
        Event::new(v.iter().map(|x| Outcome(x.to_vec())).collect())
    }

    #[test]
    fn one_block_expectation() {
        let s = bernoulli_cube(1, 0.5).unwrap();
        let r = theorem1_verify(&s, &ev(&[&[0]]), 1e-10).unwrap();
        assert_relative_eq!(r.expectation, 0.5 + 0.5 * 0.25f64.exp(), epsilon = 1e-9);
        assert_relative_eq!(r.bound, 2.0);
        assert!(r.pass);
    }

    #[test]
    fn square_expectation() {
        let s = bernoulli_cube(2, 0.5).unwrap();
        let r = theorem1_verify(&s, &ev(&[&[0, 0]]), 1e-10).unwrap();
        let want = 0.25 * (1.0 + 2.0 * 0.25f64.exp() + 0.5f64.exp());
        assert_relative_eq!(r.expectation, want, epsilon = 1e-9);
        assert_relative_eq!(r.expectation, 1.30420, epsilon = 1e-5);
        assert!(r.pass && r.margin > 2.6);
    }

    #[test]
    fn whole_space_has_zero_margin() {
        let s = bernoulli_cube(3, 0.3).unwrap();
        let all = Event::full(&s, DEFAULT_OUTCOME_CAP).unwrap();
        let r = theorem1_verify(&s, &all, 1e-8).unwrap();
        assert_relative_eq!(r.expectation, 1.0, epsilon = 1e-12);
        assert_relative_eq!(r.bound, 1.0, epsilon = 1e-12);
        assert!(r.margin.abs() < 1e-12 && r.pass);
    }

    #[test]
    fn random_sweep_respects_bound_for_several_exponents() {
        let params = RandomSpaceParams {
            max_blocks: 4,
            ..Default::default()
        };
        for i in 0..12 {
            let mut rng = stream(7, "lab-test", i);
            let s = random_space(&params, &mut rng);
            let a = random_event(&s, DEFAULT_OUTCOME_CAP, &mut rng).unwrap();
            let p2 = distance_profile(&s, &a, Some(2.0), 1e-8, DEFAULT_OUTCOME_CAP).unwrap();
            for p in [2.0, 3.0, 4.0] {
                let sp = s.with_outer_p(p);
                let prof = distance_profile(&sp, &a, None, 1e-8, DEFAULT_OUTCOME_CAP).unwrap();
                let r = theorem1_from_profile(&sp, &a, &prof).unwrap();
                assert!(r.normalized <= 1.0 + r.gap_budget, "{r:?}");
                assert!(pointwise_exponent_excess(&prof, &p2) <= 3e-8);
            }
        }
    }

    #[test]
    fn base_case_peaks_at_one() {
        let r = base_case_scan(1001).unwrap();
        assert!((r.max - 1.0).abs() < 1e-9);
        assert_eq!(r.argmax[0], 1.0);
        assert_eq!(base_case_value(0.0), 0.0);
        assert_relative_eq!(
            base_case_value(0.5),
            0.5 * (0.5 + 0.5 * 0.25f64.exp()),
            epsilon = 1e-15
        );
        assert_relative_eq!(base_case_value(0.5), 0.57100, epsilon = 1e-5);
        assert!(base_case_scan(1).is_err());
    }

    #[test]
    fn alpha_g_branches() {
        let one = alpha_g(1.0).unwrap();
        assert_eq!((one.alpha, one.g), (1.0, 1.0));
        let edge = alpha_g((-0.5f64).exp()).unwrap();
        assert_eq!(edge.alpha, 0.0);
        assert_relative_eq!(edge.g, 0.25f64.exp(), epsilon = 1e-15);
        let q = alpha_g((-0.25f64).exp()).unwrap();
        assert_relative_eq!(q.alpha, 0.5, epsilon = 1e-15);
        assert_relative_eq!(q.g, (3.0f64 / 16.0).exp(), epsilon = 1e-15);
        assert_relative_eq!(q.g, 1.20623, epsilon = 1e-5);
        assert!(alpha_g(0.0).is_err() && alpha_g(1.5).is_err() && alpha_g(f64::NAN).is_err());
    }

    #[test]
    fn g_is_continuous_at_the_branch_point() {
        let b = (-0.5f64).exp();
        let left = alpha_g(b * (1.0 - 1e-15)).unwrap().g;
        let right = alpha_g(b * (1.0 + 1e-15)).unwrap().g;
        assert!((left - right).abs() < 1e-12);
    }

    #[test]
    fn claim_holds() {
        let c = claim_scan(10_000).unwrap();
        assert!(c.scan.max <= 1e-12, "{c:?}");
        assert_eq!(c.f_at_one, 0.0);
        assert!(c.fprime_at_one.abs() < 1e-6);
        assert_relative_eq!(
            claim_value((-0.5f64).exp()),
            0.25f64.exp() + (-0.5f64).exp() - 2.0,
            epsilon = 1e-15
        );
        assert_relative_eq!(claim_value((-0.5f64).exp()), -0.10944, epsilon = 1e-5);
        let l = 0.9f64.ln();
        let v = claim_value(0.9);
        assert_relative_eq!(v, (-l - l * l).exp() - 1.1, epsilon = 1e-15);
        assert!(v < 0.0 && (v + 0.001155).abs() < 1e-6, "{v}");
    }

    #[test]
    fn ineq7_holds() {
        let r = ineq7_scan(1000).unwrap();
        assert!(r.max <= 1e-12, "{r:?}");
        assert!(r.max >= -1e-15);
        assert_eq!(ineq7_value(0.37, 1.0), 1.0);
        assert_eq!(ineq7_value(1.0, 0.2), 1.0);
        assert_eq!(ineq7_value(0.5, 0.0), 0.75);
    }

    #[test]
    fn slice_check_on_diagonal() {
        let s = bernoulli_cube(2, 0.5).unwrap();
        let r = slice_inequalities_check(&s, &ev(&[&[0, 0], &[1, 1]]), 1e-6).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.v, 0);
        assert_eq!(r.checks, 4);
        assert!(r.skipped.is_empty());
    }

    #[test]
    fn slice_check_on_product_set_is_tight() {
        let s = bernoulli_cube(3, 0.4).unwrap();
        let a = ev(&[&[0, 1, 0], &[0, 1, 1], &[1, 1, 0], &[1, 1, 1]]);
        let r = slice_inequalities_check(&s, &a, 1e-6).unwrap();
        assert!(r.pass);
        assert!(r.max_excess_v.abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn empty_slice_is_skipped() {
        let s = bernoulli_cube(2, 0.5).unwrap();
        let r = slice_inequalities_check(&s, &ev(&[&[0, 0], &[1, 0]]), 1e-6).unwrap();
        assert_eq!(r.skipped, vec![1]);
        assert_eq!(r.checks, 2);
        assert!(r.pass);
    }

    #[test]
    fn random_three_block_slices() {
        let params = RandomSpaceParams {
            min_blocks: 3,
            max_blocks: 3,
            ..Default::default()
        };
        for i in 0..8 {
            let mut rng = stream(11, "slice-test", i);
            let s = random_space(&params, &mut rng);
            let a = random_event(&s, DEFAULT_OUTCOME_CAP, &mut rng).unwrap();
            let r = slice_inequalities_check(&s, &a, 1e-6).unwrap();
            assert!(r.pass, "{r:?}");
        }
    }
}
