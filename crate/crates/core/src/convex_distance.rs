//! Certified distance from an outcome to the convex hull of an event:
//!
//! ```text
//! φ_{A,p}(t) = inf { (Σ_i ‖t_i − s_i‖_i^p)^{1/p} : s ∈ conv A }.
//! ```
//!
//! The solver works in hull coordinates `λ ∈ Δ^{|A|}` and minimizes
//! `G(λ) = Σ_i ‖t_i − (Aλ)_i‖_i^p` with the away-step conditional gradient
//! method. Every iterate yields a dual functional `y` (the normalized
//! subgradient of `G` at the residual) and with it the lower bound
//! `min_{a ∈ A} ⟨y, t − a⟩ ≤ φ`, which costs nothing extra because the linear
//! minimization oracle already scans all atoms.
//!
//! Blocks carrying `L1`/`LINF` in two or more dimensions make `G`
//! non-differentiable, and the optimum typically sits on a kink where a single
//! subgradient cannot close the gap. When the conditional-gradient phase stalls
//! the solver switches to a corrective phase: column generation whose master
//! problem (the active atoms, polyhedral block norms in epigraph form) is
//! solved by a primal-dual interior-point method. The duals of the epigraph
//! constraints supply the mixed subgradient the certificate needs.
//!
//! Outcomes inside the hull but outside `A` are settled by Wolfe's
//! min-norm-point method in the Euclidean metric, since `G` is too flat near
//! zero for the first-order phase to reach `tol` there.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::abs_pow;
use crate::product_space::{BlockNorm, Event, Outcome, ProductSpace};

pub const DEFAULT_TOL: f64 = 1e-8;

/// Conditional-gradient iterations before the corrective phase takes over.
const CG_PHASE_ITERS: usize = 400;
const MASTER_NEWTON_STEPS: usize = 100;
const POLISH_STEPS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Target width of `[lower, upper]` on `φ`.
    pub tol: f64,
    /// Defaults to `50·|A| + 10000`.
    pub max_iter: Option<usize>,
    /// Overrides the space's `outer_p`.
    pub exponent: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: None,
            exponent: None,
        }
    }
}

impl SolverOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceCert {
    /// `φ` at the returned convex combination.
    pub upper: f64,
    /// Certified lower bound on `φ`.
    pub lower: f64,
    /// Convex weights, aligned with `event.outcomes()`.
    pub coefficients: Vec<f64>,
    pub certified: bool,
    pub iterations: usize,
    pub exponent: f64,
}

impl DistanceCert {
    /// `Σ_j λ_j a_j` in ambient coordinates.
    pub fn hull_point(&self, space: &ProductSpace, event: &Event) -> Vec<f64> {
        let mut s = vec![0.0; space.ambient_dim()];
        for (w, a) in self.coefficients.iter().zip(event.outcomes()) {
            if *w != 0.0 {
                for (x, y) in s.iter_mut().zip(space.coordinates(a)) {
                    *x += w * y;
                }
            }
        }
        s
    }

    /// Distance from `t` to [`hull_point`](Self::hull_point), recomputed from
    /// the stored coefficients.
    pub fn recompute_upper(&self, space: &ProductSpace, event: &Event, t: &Outcome) -> f64 {
        let s = self.hull_point(space, event);
        let diff: Vec<f64> = space
            .coordinates(t)
            .iter()
            .zip(&s)
            .map(|(a, b)| a - b)
            .collect();
        space.mixed_norm_p(&diff, self.exponent)
    }

    pub fn gap(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Solve for `φ_{A,p}(t)` with the space's `outer_p`.
pub fn convex_distance(
    space: &ProductSpace,
    event: &Event,
    t: &Outcome,
    tol: f64,
) -> Result<DistanceCert> {
    let solver = HullSolver::new(space, event, None)?;
    solver.solve(t, &SolverOptions::with_tol(tol))
}

#[derive(Debug, Clone)]
struct Block {
    off: usize,
    dim: usize,
    /// One-dimensional blocks are handled as `L2`; all tags agree there.
    norm: BlockNorm,
    /// Offset of this block's points in the flat score tables.
    table_off: usize,
    points: Vec<Vec<f64>>,
}

impl Block {
    fn smooth(&self) -> bool {
        self.norm == BlockNorm::L2
    }
}

/// Precomputed geometry for repeated solves against one event.
#[derive(Debug, Clone)]
pub struct HullSolver<'a> {
    space: &'a ProductSpace,
    event: &'a Event,
    p: f64,
    blocks: Vec<Block>,
    dim: usize,
    /// `codes[j * nb + i]` = table slot of atom `j`'s point in block `i`.
    codes: Vec<u32>,
    table_len: usize,
}

impl<'a> HullSolver<'a> {
    pub fn new(space: &'a ProductSpace, event: &'a Event, exponent: Option<f64>) -> Result<Self> {
        space.ensure_valid()?;
        if event.is_empty() {
            return Err(Error::InvalidEvent("convex distance to an empty event".into()));
        }
        event.validate(space)?;
        let p = exponent.unwrap_or(space.outer_p);
        if !(p >= 2.0 && p.is_finite()) {
            return Err(Error::InvalidArgument(format!("exponent {p} must be >= 2")));
        }
        let mut blocks = Vec::with_capacity(space.n_blocks());
        let (mut off, mut table_off) = (0, 0);
        for b in &space.blocks {
            let dim = b.dim();
            let norm = if dim == 1 { BlockNorm::L2 } else { b.norm };
            blocks.push(Block {
                off,
                dim,
                norm,
                table_off,
                points: b.points.clone(),
            });
            off += dim;
            table_off += b.points.len();
        }
        let nb = blocks.len();
        let mut codes = Vec::with_capacity(event.len() * nb);
        for a in event.outcomes() {
            for (blk, &k) in blocks.iter().zip(&a.0) {
                codes.push((blk.table_off + k) as u32);
            }
        }
        Ok(Self {
            space,
            event,
            p,
            blocks,
            dim: off,
            codes,
            table_len: table_off,
        })
    }

    pub fn exponent(&self) -> f64 {
        self.p
    }

    fn n_atoms(&self) -> usize {
        self.event.len()
    }

    fn atom_point(&self, j: usize, out: &mut [f64]) {
        let nb = self.blocks.len();
        for (i, blk) in self.blocks.iter().enumerate() {
            let k = self.codes[j * nb + i] as usize - blk.table_off;
            out[blk.off..blk.off + blk.dim].copy_from_slice(&blk.points[k]);
        }
    }

    fn value(&self, u: &[f64]) -> f64 {
        self.blocks
            .iter()
            .map(|b| abs_pow(b.norm.norm(&u[b.off..b.off + b.dim]), self.p))
            .sum()
    }

    /// A subgradient of `G` at residual `u`, written into `g`.
    fn subgradient(&self, u: &[f64], g: &mut [f64]) {
        for b in &self.blocks {
            let ui = &u[b.off..b.off + b.dim];
            let gi = &mut g[b.off..b.off + b.dim];
            let n = b.norm.norm(ui);
            if n == 0.0 {
                gi.fill(0.0);
                continue;
            }
            let scale = self.p * n.powf(self.p - 1.0);
            match b.norm {
                BlockNorm::L2 => {
                    for (x, y) in gi.iter_mut().zip(ui) {
                        *x = scale * y / n;
                    }
                }
                BlockNorm::L1 => {
                    for (x, y) in gi.iter_mut().zip(ui) {
                        *x = if *y > 0.0 {
                            scale
                        } else if *y < 0.0 {
                            -scale
                        } else {
                            0.0
                        };
                    }
                }
                BlockNorm::LInf => {
                    gi.fill(0.0);
                    let k = first_argmax_abs(ui);
                    gi[k] = scale * ui[k].signum();
                }
            }
        }
    }

    /// Mixed dual norm `(Σ ‖g_i‖_{i,*}^{p*})^{1/p*}`.
    fn dual_norm(&self, g: &[f64]) -> f64 {
        let q = self.p / (self.p - 1.0);
        let acc: f64 = self
            .blocks
            .iter()
            .map(|b| abs_pow(b.norm.dual_norm(&g[b.off..b.off + b.dim]), q))
            .sum();
        acc.powf(1.0 / q)
    }

    fn fill_scores(&self, g: &[f64], table: &mut [f64]) {
        for b in &self.blocks {
            let gi = &g[b.off..b.off + b.dim];
            for (k, pt) in b.points.iter().enumerate() {
                table[b.table_off + k] = gi.iter().zip(pt).map(|(x, y)| x * y).sum();
            }
        }
    }

    fn atom_score(&self, j: usize, table: &[f64]) -> f64 {
        let nb = self.blocks.len();
        self.codes[j * nb..(j + 1) * nb]
            .iter()
            .map(|&c| table[c as usize])
            .sum()
    }

    /// `argmax_j ⟨g, a_j⟩`, lowest index on ties.
    fn linear_oracle(&self, table: &[f64]) -> (usize, f64) {
        let nb = self.blocks.len();
        let mut best = (0, f64::NEG_INFINITY);
        for (j, code) in self.codes.chunks_exact(nb).enumerate() {
            let h: f64 = code.iter().map(|&c| table[c as usize]).sum();
            if h > best.1 {
                best = (j, h);
            }
        }
        best
    }

    /// Dual lower bound `min_j ⟨y, t − a_j⟩` for `y = g / ‖g‖_*`.
    fn dual_bound(&self, g: &[f64], t: &[f64], table: &mut [f64]) -> (f64, usize) {
        let gn = self.dual_norm(g);
        if !(gn > 0.0) {
            return (0.0, 0);
        }
        self.fill_scores(g, table);
        let (j, hmax) = self.linear_oracle(table);
        let gt: f64 = g.iter().zip(t).map(|(a, b)| a * b).sum();
        ((gt - hmax) / gn, j)
    }

    /// Wolfe's min-norm-point method for `conv{a_j − t}` in the Euclidean
    /// norm, started from the heaviest atom of `start`. Used only to settle points that lie in the
    /// hull (or within rounding of it), where the value of `G` is too flat
    /// near zero for the first-order phases to reach `tol`.
    fn euclidean_min_norm(
        &self,
        t: &[f64],
        start: &[(usize, f64)],
        max_iter: usize,
    ) -> Option<Vec<(usize, f64)>> {
        let d = self.dim;
        let mut table = vec![0.0; self.table_len];
        let mut pt = vec![0.0; d];
        let shifted = |j: usize, pt: &mut Vec<f64>| {
            self.atom_point(j, pt);
            pt.iter().zip(t).map(|(a, b)| a - b).collect::<Vec<f64>>()
        };
        let first = start.iter().fold(start[0], |m, a| if a.1 > m.1 { *a } else { m });
        let mut set = vec![first.0];
        let mut pts = vec![shifted(first.0, &mut pt)];
        let mut w = vec![1.0];
        let scale = pts
            .iter()
            .map(|x| dot(x, x))
            .fold(1e-300, f64::max);
        let combine = |pts: &[Vec<f64>], w: &[f64]| {
            let mut x = vec![0.0; d];
            for (p, &l) in pts.iter().zip(w) {
                for (a, b) in x.iter_mut().zip(p) {
                    *a += l * b;
                }
            }
            x
        };
        for _ in 0..max_iter.min(50 * (d + 2) + 200) {
            let x = combine(&pts, &w);
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            self.fill_scores(&neg, &mut table);
            let (j, h) = self.linear_oracle(&table);
            // ⟨x, a_j − t⟩ = −h − ⟨x, t⟩
            let xj = -h - dot(&x, t);
            if dot(&x, &x) - xj <= 1e-15 * scale || set.contains(&j) {
                return Some(set.into_iter().zip(w).collect());
            }
            set.push(j);
            pts.push(shifted(j, &mut pt));
            w.push(0.0);
            loop {
                let k = set.len();
                let mut kkt = DMatrix::zeros(k + 1, k + 1);
                for a in 0..k {
                    for b in a..k {
                        let v = dot(&pts[a], &pts[b]);
                        kkt[(a, b)] = v;
                        kkt[(b, a)] = v;
                    }
                    kkt[(a, k)] = 1.0;
                    kkt[(k, a)] = 1.0;
                }
                let mut rhs = DVector::zeros(k + 1);
                rhs[k] = 1.0;
                let alpha = kkt.lu().solve(&rhs)?;
                if (0..k).all(|a| alpha[a] > 0.0) {
                    w = (0..k).map(|a| alpha[a]).collect();
                    break;
                }
                let mut theta: f64 = 1.0;
                for a in 0..k {
                    if alpha[a] <= 0.0 {
                        theta = theta.min(w[a] / (w[a] - alpha[a]));
                    }
                }
                for a in 0..k {
                    w[a] = theta * alpha[a] + (1.0 - theta) * w[a];
                }
                let mut a = 0;
                while a < set.len() {
                    if w[a] <= 1e-16 {
                        set.remove(a);
                        pts.remove(a);
                        w.remove(a);
                    } else {
                        a += 1;
                    }
                }
                if set.is_empty() {
                    return None;
                }
            }
        }
        Some(set.into_iter().zip(w).collect())
    }

    /// Right derivative of `γ ↦ G(u − γ d)`.
    fn slope(&self, u: &[f64], d: &[f64], gamma: f64, w: &mut [f64]) -> f64 {
        for ((wi, ui), di) in w.iter_mut().zip(u).zip(d) {
            *wi = ui - gamma * di;
        }
        let mut acc = 0.0;
        for b in &self.blocks {
            let wi = &w[b.off..b.off + b.dim];
            let di = &d[b.off..b.off + b.dim];
            let n = b.norm.norm(wi);
            if n == 0.0 {
                continue;
            }
            let dd = directional_norm_derivative(b.norm, wi, di, -1.0);
            acc += self.p * n.powf(self.p - 1.0) * dd;
        }
        acc
    }

    fn line_search(&self, u: &[f64], d: &[f64], gamma_max: f64, w: &mut [f64]) -> f64 {
        if self.p == 2.0 && self.blocks.iter().all(Block::smooth) {
            let ud: f64 = u.iter().zip(d).map(|(a, b)| a * b).sum();
            let dd: f64 = d.iter().map(|x| x * x).sum();
            if dd == 0.0 {
                return 0.0;
            }
            return (ud / dd).clamp(0.0, gamma_max);
        }
        if self.slope(u, d, 0.0, w) >= 0.0 {
            return 0.0;
        }
        if self.slope(u, d, gamma_max, w) <= 0.0 {
            return gamma_max;
        }
        let (mut lo, mut hi) = (0.0, gamma_max);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.slope(u, d, mid, w) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let val = |g: f64, w: &mut [f64]| {
            for ((wi, ui), di) in w.iter_mut().zip(u).zip(d) {
                *wi = ui - g * di;
            }
            self.value(w)
        };
        if val(hi, w) <= val(lo, w) {
            hi
        } else {
            lo
        }
    }

    pub fn solve(&self, t: &Outcome, opts: &SolverOptions) -> Result<DistanceCert> {
        if !(opts.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tol = {} must be > 0", opts.tol)));
        }
        self.space.check_outcome(t)?;
        let m = self.n_atoms();
        let max_iter = opts.max_iter.unwrap_or(50 * m + 10_000);
        let tc = self.space.coordinates(t);

        if let Ok(pos) = self.event.outcomes().binary_search(t) {
            let mut coefficients = vec![0.0; m];
            coefficients[pos] = 1.0;
            return Ok(DistanceCert {
                upper: 0.0,
                lower: 0.0,
                coefficients,
                certified: true,
                iterations: 0,
                exponent: self.p,
            });
        }

        let mut state = CgState::start(self, &tc);
        let mut best_lower: f64 = 0.0;
        let mut iterations = 0;
        let mut certified = false;
        let cg_budget = max_iter.min(CG_PHASE_ITERS);
        let mut stall = 0;

        let d = self.dim;
        let mut g = vec![0.0; d];
        let mut dir = vec![0.0; d];
        let mut work = vec![0.0; d];
        let mut atom = vec![0.0; d];
        let mut table = vec![0.0; self.table_len];

        while iterations < cg_budget {
            iterations += 1;
            if iterations % 64 == 0 {
                state.resync(self, &tc);
            }
            let upper = self.value(&state.u).powf(1.0 / self.p);
            if upper < opts.tol {
                certified = true;
                best_lower = 0.0;
                break;
            }
            self.subgradient(&state.u, &mut g);
            let (lb, fw_atom) = self.dual_bound(&g, &tc, &mut table);
            best_lower = best_lower.max(lb);
            if upper - best_lower <= opts.tol {
                certified = true;
                break;
            }
            // scores ⟨g, a_j⟩ are in `table` after dual_bound
            let gs: f64 = g.iter().zip(&state.s).map(|(a, b)| a * b).sum();
            let h_fw = self.atom_score(fw_atom, &table);
            let fw_gap = h_fw - gs;
            let (away_pos, h_away) = state
                .active
                .iter()
                .enumerate()
                .map(|(pos, &(j, _))| (pos, self.atom_score(j, &table)))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            let away_gap = gs - h_away;

            let value_before = self.value(&state.u);
            if fw_gap >= away_gap {
                self.atom_point(fw_atom, &mut atom);
                for ((x, a), s) in dir.iter_mut().zip(&atom).zip(&state.s) {
                    *x = a - s;
                }
                let gamma = self.line_search(&state.u, &dir, 1.0, &mut work);
                state.forward(fw_atom, gamma, &dir);
            } else {
                let (j, lam) = state.active[away_pos];
                self.atom_point(j, &mut atom);
                for ((x, a), s) in dir.iter_mut().zip(&atom).zip(&state.s) {
                    *x = s - a;
                }
                let gamma_max = lam / (1.0 - lam);
                let gamma = self.line_search(&state.u, &dir, gamma_max, &mut work);
                state.away(away_pos, gamma, gamma_max, &dir);
            }
            let value_after = self.value(&state.u);
            if value_after >= value_before * (1.0 - 1e-15) {
                stall += 1;
                if stall >= 8 {
                    break;
                }
            } else {
                stall = 0;
            }
        }

        let mut weights = state.active.clone();
        if !certified {
            if let Some(w) = self.euclidean_min_norm(&tc, &weights, max_iter) {
                let mut u = tc.clone();
                let mut pt = vec![0.0; d];
                for &(j, l) in &w {
                    self.atom_point(j, &mut pt);
                    for (x, y) in u.iter_mut().zip(&pt) {
                        *x -= l * y;
                    }
                }
                if self.value(&u).powf(1.0 / self.p) < opts.tol {
                    weights = w;
                    certified = true;
                }
            }
        }
        if !certified && iterations < max_iter {
            let mut corr = Corrective::new(self, &tc, &state.active);
            let out = corr.run(opts.tol, max_iter - iterations, best_lower);
            iterations += out.iterations;
            best_lower = best_lower.max(out.lower);
            if out.upper <= self.value(&state.u).powf(1.0 / self.p) {
                weights = out.weights;
            }
        }

        let mut coefficients = vec![0.0; m];
        let total: f64 = weights.iter().map(|w| w.1).sum();
        for &(j, w) in &weights {
            coefficients[j] += w / total;
        }
        let cert = DistanceCert {
            upper: 0.0,
            lower: 0.0,
            coefficients,
            certified: false,
            iterations,
            exponent: self.p,
        };
        let upper = cert.recompute_upper(self.space, self.event, t);
        let (lower, certified) = if upper < opts.tol {
            (0.0, true)
        } else {
            let lower = best_lower.clamp(0.0, upper);
            (lower, upper - lower <= opts.tol)
        };
        Ok(DistanceCert {
            upper,
            lower,
            certified,
            ..cert
        })
    }
}

fn first_argmax_abs(v: &[f64]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, x) in v.iter().enumerate() {
        if x.abs() > best.1 {
            best = (k, x.abs());
        }
    }
    best.0
}

/// Right derivative of `γ ↦ ‖w + γ·sign·v‖` at `γ = 0`.
fn directional_norm_derivative(norm: BlockNorm, w: &[f64], v: &[f64], sign: f64) -> f64 {
    match norm {
        BlockNorm::L2 => {
            let n = BlockNorm::L2.norm(w);
            if n == 0.0 {
                BlockNorm::L2.norm(v)
            } else {
                sign * w.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / n
            }
        }
        BlockNorm::L1 => w
            .iter()
            .zip(v)
            .map(|(a, b)| {
                let b = sign * b;
                if *a > 0.0 {
                    b
                } else if *a < 0.0 {
                    -b
                } else {
                    b.abs()
                }
            })
            .sum(),
        BlockNorm::LInf => {
            let m = BlockNorm::LInf.norm(w);
            if m == 0.0 {
                return BlockNorm::LInf.norm(v);
            }
            w.iter()
                .zip(v)
                .filter(|(a, _)| a.abs() == m)
                .map(|(a, b)| a.signum() * sign * b)
                .fold(f64::NEG_INFINITY, f64::max)
        }
    }
}

/// Sparse iterate of the conditional-gradient phase.
struct CgState {
    /// `(atom, weight)` with positive weights summing to one.
    active: Vec<(usize, f64)>,
    s: Vec<f64>,
    u: Vec<f64>,
}

impl CgState {
    fn start(solver: &HullSolver<'_>, t: &[f64]) -> Self {
        // nearest atom
        let mut table = vec![0.0; solver.table_len];
        for b in &solver.blocks {
            for (k, pt) in b.points.iter().enumerate() {
                table[b.table_off + k] =
                    abs_pow(b.norm.distance(&t[b.off..b.off + b.dim], pt), solver.p);
            }
        }
        let nb = solver.blocks.len();
        let mut best = (0, f64::INFINITY);
        for (j, code) in solver.codes.chunks_exact(nb).enumerate() {
            let v: f64 = code.iter().map(|&c| table[c as usize]).sum();
            if v < best.1 {
                best = (j, v);
            }
        }
        let mut s = vec![0.0; solver.dim];
        solver.atom_point(best.0, &mut s);
        let u = t.iter().zip(&s).map(|(a, b)| a - b).collect();
        Self {
            active: vec![(best.0, 1.0)],
            s,
            u,
        }
    }

    fn resync(&mut self, solver: &HullSolver<'_>, t: &[f64]) {
        let total: f64 = self.active.iter().map(|a| a.1).sum();
        let mut pt = vec![0.0; solver.dim];
        self.s.fill(0.0);
        for a in &mut self.active {
            a.1 /= total;
            solver.atom_point(a.0, &mut pt);
            for (x, y) in self.s.iter_mut().zip(&pt) {
                *x += a.1 * y;
            }
        }
        for ((u, a), b) in self.u.iter_mut().zip(t).zip(&self.s) {
            *u = a - b;
        }
    }

    fn shift(&mut self, gamma: f64, dir: &[f64]) {
        for ((s, u), d) in self.s.iter_mut().zip(self.u.iter_mut()).zip(dir) {
            *s += gamma * d;
            *u -= gamma * d;
        }
    }

    fn forward(&mut self, atom: usize, gamma: f64, dir: &[f64]) {
        if gamma <= 0.0 {
            return;
        }
        if gamma >= 1.0 {
            self.active.clear();
            self.active.push((atom, 1.0));
        } else {
            for a in &mut self.active {
                a.1 *= 1.0 - gamma;
            }
            match self.active.iter_mut().find(|a| a.0 == atom) {
                Some(a) => a.1 += gamma,
                None => self.active.push((atom, gamma)),
            }
        }
        self.shift(gamma, dir);
    }

    fn away(&mut self, pos: usize, gamma: f64, gamma_max: f64, dir: &[f64]) {
        if gamma <= 0.0 {
            return;
        }
        for a in &mut self.active {
            a.1 *= 1.0 + gamma;
        }
        self.active[pos].1 -= gamma;
        if gamma >= gamma_max || self.active[pos].1 <= 0.0 {
            self.active.remove(pos);
        }
        self.shift(gamma, dir);
    }
}

struct CorrectiveOutcome {
    weights: Vec<(usize, f64)>,
    upper: f64,
    lower: f64,
    iterations: usize,
}

/// Restricted master over a small set of atoms, with the polyhedral block
/// norms lifted to epigraph variables `z_i ≥ ⟨e, u_i⟩` for every vertex `e`
/// of the dual unit ball:
///
/// ```text
/// min  Σ_{L2} ‖u_i‖^p + Σ_{poly} z_i^p
/// s.t. λ ≥ 0,  Σ λ = 1,  z_i − ⟨e, u_i⟩ ≥ 0,   u = Σ_j λ_j (t − a_j).
/// ```
///
/// Solved by a primal-dual interior-point method; the duals of the vertex
/// constraints assemble the mixed subgradient used for pricing and for the
/// certificate.
struct Corrective<'s, 'a> {
    solver: &'s HullSolver<'a>,
    t: Vec<f64>,
    atoms: Vec<usize>,
    /// Columns `t − a_j` for the atoms in `atoms`.
    cols: Vec<Vec<f64>>,
    poly: Vec<PolyBlock>,
    lambda: Vec<f64>,
    /// Vertex-constraint duals of the last master solve, block by block,
    /// in the objective's own scale.
    duals: Vec<Vec<f64>>,
    /// Weights and duals from the crossover after the last master solve.
    polished: Option<(Vec<f64>, Vec<Vec<f64>>)>,
}

struct PolyBlock {
    block: usize,
    vertices: Vec<Vec<f64>>,
}

fn dual_ball_vertices(norm: BlockNorm, dim: usize) -> Vec<Vec<f64>> {
    match norm {
        BlockNorm::L1 => (0..1usize << dim)
            .map(|mask| {
                (0..dim)
                    .map(|k| if mask >> k & 1 == 1 { -1.0 } else { 1.0 })
                    .collect()
            })
            .collect(),
        BlockNorm::LInf => (0..dim)
            .flat_map(|k| {
                [1.0, -1.0].into_iter().map(move |sgn| {
                    let mut e = vec![0.0; dim];
                    e[k] = sgn;
                    e
                })
            })
            .collect(),
        BlockNorm::L2 => Vec::new(),
    }
}

/// Largest `α ≤ 1` keeping `v + α·dv > 0`, shortened by `frac`.
fn step_to_boundary(v: &DVector<f64>, dv: &DVector<f64>, frac: f64) -> f64 {
    let mut a: f64 = 1.0;
    for (x, d) in v.iter().zip(dv.iter()) {
        if *d < 0.0 {
            a = a.min(-frac * x / d);
        }
    }
    a
}

impl<'s, 'a> Corrective<'s, 'a> {
    fn new(solver: &'s HullSolver<'a>, t: &[f64], active: &[(usize, f64)]) -> Self {
        let poly: Vec<PolyBlock> = solver
            .blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| !b.smooth())
            .map(|(i, b)| PolyBlock {
                block: i,
                vertices: dual_ball_vertices(b.norm, b.dim),
            })
            .collect();
        let duals = poly.iter().map(|pb| vec![0.0; pb.vertices.len()]).collect();
        let mut c = Self {
            solver,
            t: t.to_vec(),
            atoms: Vec::new(),
            cols: Vec::new(),
            poly,
            lambda: Vec::new(),
            duals,
            polished: None,
        };
        for &(j, w) in active {
            c.push_atom(j, w);
        }
        c.normalize();
        c
    }

    fn normalize(&mut self) {
        let total: f64 = self.lambda.iter().sum();
        for l in &mut self.lambda {
            *l /= total;
        }
    }

    fn push_atom(&mut self, j: usize, w: f64) {
        let mut pt = vec![0.0; self.solver.dim];
        self.solver.atom_point(j, &mut pt);
        self.cols
            .push(self.t.iter().zip(&pt).map(|(a, b)| a - b).collect());
        self.atoms.push(j);
        self.lambda.push(w);
    }

    fn remove_atom(&mut self, pos: usize) {
        self.atoms.remove(pos);
        self.cols.remove(pos);
        self.lambda.remove(pos);
    }

    fn residual(&self, lambda: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; self.solver.dim];
        for (col, &l) in self.cols.iter().zip(lambda) {
            for (x, c) in u.iter_mut().zip(col) {
                *x += l * c;
            }
        }
        u
    }

    fn n_vars(&self) -> usize {
        self.atoms.len() + self.poly.len()
    }

    /// Inequality rows `C x ≥ 0` over `x = (λ, z)`.
    fn constraints(&self) -> DMatrix<f64> {
        let k = self.atoms.len();
        let rows = k + self.poly.iter().map(|pb| pb.vertices.len()).sum::<usize>();
        let mut c = DMatrix::zeros(rows, self.n_vars());
        for a in 0..k {
            c[(a, a)] = 1.0;
        }
        let mut r = k;
        for (pi, pb) in self.poly.iter().enumerate() {
            let b = &self.solver.blocks[pb.block];
            for e in &pb.vertices {
                for (a, col) in self.cols.iter().enumerate() {
                    c[(r, a)] = -dot(e, &col[b.off..b.off + b.dim]);
                }
                c[(r, k + pi)] = 1.0;
                r += 1;
            }
        }
        c
    }

    /// Objective, gradient and Hessian in `x = (λ, z)`. The objective is
    /// `S^{2/p}` for `S = Σ_{L2} ‖u_i‖^p + Σ_{poly} z_i^p`, which is the square
    /// of the mixed norm at the optimum and stays well scaled when `φ` is
    /// small and `p > 2`.
    fn derivatives(&self, x: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let p = self.solver.p;
        let k = self.atoms.len();
        let nv = self.n_vars();
        let lambda: Vec<f64> = x.iter().take(k).copied().collect();
        let u = self.residual(&lambda);
        let mut f = 0.0;
        let mut grad = DVector::zeros(nv);
        let mut hess = DMatrix::zeros(nv, nv);

        for b in self.solver.blocks.iter().filter(|b| b.smooth()) {
            let ui = &u[b.off..b.off + b.dim];
            let n = BlockNorm::L2.norm(ui);
            f += abs_pow(n, p);
            // ∇ = p‖u‖^{p−2} u, ∇² = p‖u‖^{p−2} I + p(p−2)‖u‖^{p−4} u uᵀ
            let (gscale, hid, huu) = if n == 0.0 {
                (0.0, if p == 2.0 { 2.0 } else { 0.0 }, 0.0)
            } else {
                (
                    p * n.powf(p - 2.0),
                    p * n.powf(p - 2.0),
                    p * (p - 2.0) * n.powf(p - 4.0),
                )
            };
            let ru: Vec<f64> = self
                .cols
                .iter()
                .map(|c| dot(&c[b.off..b.off + b.dim], ui))
                .collect();
            for a in 0..k {
                grad[a] += gscale * ru[a];
                let ca = &self.cols[a][b.off..b.off + b.dim];
                for c in a..k {
                    let cc = &self.cols[c][b.off..b.off + b.dim];
                    let h = hid * dot(ca, cc) + huu * ru[a] * ru[c];
                    hess[(a, c)] += h;
                    if a != c {
                        hess[(c, a)] += h;
                    }
                }
            }
        }
        for pi in 0..self.poly.len() {
            let zi = x[k + pi].max(0.0);
            f += abs_pow(zi, p);
            grad[k + pi] += p * zi.powf(p - 1.0);
            hess[(k + pi, k + pi)] += p * (p - 1.0) * zi.powf(p - 2.0);
        }
        if p == 2.0 || f <= 0.0 {
            return (f, grad, hess);
        }
        // F = S^{2/p}
        let c1 = 2.0 / p * f.powf(2.0 / p - 1.0);
        let c2 = 2.0 / p * (2.0 / p - 1.0) * f.powf(2.0 / p - 2.0);
        let hess = hess * c1 + &grad * grad.transpose() * c2;
        (f.powf(2.0 / p), grad * c1, hess)
    }

    /// Primal-dual interior-point solve of the master from the current
    /// weights. Returns the number of Newton steps.
    fn solve_master(&mut self) -> usize {
        let k = self.atoms.len();
        let nv = self.n_vars();
        let cm = self.constraints();
        let m = cm.nrows();

        let mut x = DVector::zeros(nv);
        for a in 0..k {
            x[a] = 0.9 * self.lambda[a] + 0.1 / k as f64;
        }
        let lam0: Vec<f64> = x.iter().take(k).copied().collect();
        let u0 = self.residual(&lam0);
        for (pi, pb) in self.poly.iter().enumerate() {
            let b = &self.solver.blocks[pb.block];
            x[k + pi] = 1.1 * b.norm.norm(&u0[b.off..b.off + b.dim]) + 1e-3;
        }
        let mut xc = x.clone();
        let uc = self.residual(&self.lambda);
        for a in 0..k {
            xc[a] = self.lambda[a];
        }
        for (pi, pb) in self.poly.iter().enumerate() {
            let b = &self.solver.blocks[pb.block];
            xc[k + pi] = b.norm.norm(&uc[b.off..b.off + b.dim]);
        }
        let f0 = self.derivatives(&xc).0;
        let scale = if f0 > 0.0 { 1.0 / f0 } else { 1.0 };

        let mut s = (&cm * &x).map(|v| v.max(1e-3));
        let mut y = s.map(|v| 0.1 / v);
        let mut nu = 0.0;
        let mut steps = 0;
        let mut best = (f64::INFINITY, x.clone(), s.clone(), y.clone());
        let mut start: Option<(f64, f64)> = None;

        for _ in 0..MASTER_NEWTON_STEPS {
            steps += 1;
            let (_, g, h) = self.derivatives(&x);
            let g = g * scale;
            let h = h * scale;
            let mut r_d = &g - cm.tr_mul(&y);
            for a in 0..k {
                r_d[a] -= nu;
            }
            let r_p = &cm * &x - &s;
            let r_e = 1.0 - x.iter().take(k).sum::<f64>();
            let mu = s.dot(&y) / m as f64;
            let gnorm = g.amax().max(1e-300);
            let infeas = (r_d.amax() / gnorm).max(r_p.amax()).max(r_e.abs());
            let merit = infeas.max(mu);
            let (mu0, infeas0) = *start.get_or_insert((mu, infeas.max(1e-300)));
            if !merit.is_finite() {
                break;
            }
            if merit < best.0 {
                best = (merit, x.clone(), s.clone(), y.clone());
            }
            if merit <= 1e-15 || mu <= 1e-20 {
                break;
            }

            let d = y.component_div(&s);
            let mut kkt = DMatrix::zeros(nv + 1, nv + 1);
            let mut mm = h;
            for r in 0..m {
                let dr = d[r];
                let row = cm.row(r);
                for a in 0..nv {
                    if row[a] == 0.0 {
                        continue;
                    }
                    for b in 0..nv {
                        mm[(a, b)] += dr * row[a] * row[b];
                    }
                }
            }
            kkt.view_mut((0, 0), (nv, nv)).copy_from(&mm);
            for a in 0..k {
                kkt[(a, nv)] = -1.0;
                kkt[(nv, a)] = 1.0;
            }
            let lu = kkt.lu();
            let newton = |r_c: &DVector<f64>| -> Option<(DVector<f64>, f64, DVector<f64>, DVector<f64>)> {
                let w = (r_c - y.component_mul(&r_p)).component_div(&s);
                let top = -&r_d + cm.tr_mul(&w);
                let mut rhs = DVector::zeros(nv + 1);
                rhs.rows_mut(0, nv).copy_from(&top);
                rhs[nv] = r_e;
                let sol = lu.solve(&rhs)?;
                let dx = sol.rows(0, nv).into_owned();
                let ds = &cm * &dx + &r_p;
                let dy = (r_c - y.component_mul(&ds)).component_div(&s);
                Some((dx, sol[nv], ds, dy))
            };
            let r_aff = -s.component_mul(&y);
            let Some((_, _, ds_a, dy_a)) = newton(&r_aff) else { break };
            let a_aff = step_to_boundary(&s, &ds_a, 1.0).min(step_to_boundary(&y, &dy_a, 1.0));
            let mu_aff = (&s + &ds_a * a_aff).dot(&(&y + &dy_a * a_aff)) / m as f64;
            // keep complementarity from outrunning dual feasibility
            let floor = (0.1 * mu0 * infeas / infeas0 / mu).min(1.0);
            let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3).max(floor);
            let target = sigma * mu;
            let r_pure = DVector::from_element(m, target) - s.component_mul(&y);
            let r_c = &r_pure - ds_a.component_mul(&dy_a);
            // backtrack on the KKT residual; full Newton steps can cycle when p > 2
            let residual = |x: &DVector<f64>, s: &DVector<f64>, y: &DVector<f64>, nu: f64| {
                let g = self.derivatives(x).1 * scale;
                let mut r_d = g - cm.tr_mul(y);
                for a in 0..k {
                    r_d[a] -= nu;
                }
                let r_p = &cm * x - s;
                let r_e = 1.0 - x.iter().take(k).sum::<f64>();
                let r_c = s.component_mul(y).add_scalar(-target);
                (r_d.norm_squared() + r_p.norm_squared() + r_e * r_e + r_c.norm_squared()).sqrt()
            };
            let r0 = residual(&x, &s, &y, nu);
            let search = |rc: &DVector<f64>, halvings: usize| {
                let (dx, dnu, ds, dy) = newton(rc)?;
                let mut alpha =
                    step_to_boundary(&s, &ds, 0.995).min(step_to_boundary(&y, &dy, 0.995));
                for _ in 0..halvings {
                    let r1 = residual(
                        &(&x + &dx * alpha),
                        &(&s + &ds * alpha),
                        &(&y + &dy * alpha),
                        nu + dnu * alpha,
                    );
                    if r1 <= (1.0 - 1e-4 * alpha) * r0 {
                        return Some((alpha, dx, dnu, ds, dy));
                    }
                    alpha *= 0.5;
                }
                None
            };
            let Some((alpha, dx, dnu, ds, dy)) = search(&r_c, 4).or_else(|| search(&r_pure, 40))
            else {
                break;
            };
            if !(alpha > 1e-12) {
                break;
            }
            x += &dx * alpha;
            s += &ds * alpha;
            y += &dy * alpha;
            nu += dnu * alpha;
        }

        let (_, x, s, y) = best;
        self.polished = self.polish(&cm, &x, &s, &y, scale);
        self.lambda = self.clean_weights(x.iter().take(k).copied());
        self.duals = self.split_duals(&y, scale);
        steps
    }

    fn clean_weights(&self, lambda: impl Iterator<Item = f64>) -> Vec<f64> {
        let mut lam: Vec<f64> = lambda.map(|l| l.max(0.0)).collect();
        let total: f64 = lam.iter().sum();
        if total > 0.0 {
            lam.iter_mut().for_each(|l| *l /= total);
        } else {
            let n = lam.len() as f64;
            lam.fill(1.0 / n);
        }
        lam
    }

    /// Vertex-constraint duals per polyhedral block, unscaled.
    fn split_duals(&self, y: &DVector<f64>, scale: f64) -> Vec<Vec<f64>> {
        let mut r = self.atoms.len();
        self.poly
            .iter()
            .map(|pb| {
                let d = (0..pb.vertices.len())
                    .map(|v| y[r + v].max(0.0) / scale)
                    .collect();
                r += pb.vertices.len();
                d
            })
            .collect()
    }

    /// Crossover: take the constraints the interior-point iterate marks as
    /// active (`y > s`) as equalities and finish with equality-constrained
    /// Newton steps. Exact on degenerate optima where the barrier path only
    /// converges linearly, e.g. a block whose residual vanishes with `p > 2`.
    fn polish(
        &self,
        cm: &DMatrix<f64>,
        x0: &DVector<f64>,
        s: &DVector<f64>,
        y: &DVector<f64>,
        scale: f64,
    ) -> Option<(Vec<f64>, Vec<Vec<f64>>)> {
        let k = self.atoms.len();
        let nv = self.n_vars();
        let active: Vec<usize> = (0..cm.nrows()).filter(|&r| y[r] > s[r]).collect();
        let ne = active.len() + 1;
        let mut e = DMatrix::zeros(ne, nv);
        for (i, &r) in active.iter().enumerate() {
            e.row_mut(i).copy_from(&cm.row(r));
        }
        for a in 0..k {
            e[(ne - 1, a)] = 1.0;
        }
        let mut rhs_e = DVector::zeros(ne);
        rhs_e[ne - 1] = 1.0;

        let mut x = x0.clone();
        for _ in 0..POLISH_STEPS {
            let (f, g, h) = self.derivatives(&x);
            let g = g * scale;
            let mut kkt = DMatrix::zeros(nv + ne, nv + ne);
            kkt.view_mut((0, 0), (nv, nv)).copy_from(&(h * scale));
            kkt.view_mut((0, nv), (nv, ne)).copy_from(&e.transpose());
            kkt.view_mut((nv, 0), (ne, nv)).copy_from(&e);
            let mut rhs = DVector::zeros(nv + ne);
            rhs.rows_mut(0, nv).copy_from(&-&g);
            rhs.rows_mut(nv, ne).copy_from(&(&rhs_e - &e * &x));
            let sol = kkt.svd(true, true).solve(&rhs, 1e-13).ok()?;
            let dx = sol.rows(0, nv).into_owned();
            let feasible = (&rhs_e - &e * &x).amax() <= 1e-14;
            let mut alpha = 1.0;
            if feasible {
                let slope = g.dot(&dx);
                while alpha > 1e-8 {
                    let trial = &x + &dx * alpha;
                    if self.derivatives(&trial).0 * scale <= f * scale + 1e-4 * alpha * slope {
                        break;
                    }
                    alpha *= 0.5;
                }
            }
            x += &dx * alpha;
            if dx.amax() * alpha <= 1e-15 * x.amax().max(1e-300) {
                break;
            }
        }
        if (0..k).any(|a| x[a] < -1e-12) || (cm * &x).iter().any(|v| *v < -1e-12) {
            return None;
        }
        // multipliers: [C_Aᵀ b] w = ∇F
        let g = self.derivatives(&x).1 * scale;
        let w = e.transpose().svd(true, true).solve(&g, 1e-13).ok()?;
        let mut y_full = DVector::zeros(cm.nrows());
        for (i, &r) in active.iter().enumerate() {
            y_full[r] = w[i];
        }
        Some((
            self.clean_weights(x.iter().take(k).copied()),
            self.split_duals(&y_full, scale),
        ))
    }

    /// Mixed subgradient: exact gradients on the `L2` blocks, dual-weighted
    /// vertex sums on the polyhedral blocks.
    fn dual_gradient(&self, lambda: &[f64], duals: &[Vec<f64>]) -> Vec<f64> {
        let p = self.solver.p;
        let u = self.residual(lambda);
        let mut g = vec![0.0; self.solver.dim];
        let big_s = self.solver.value(&u);
        let c1 = if p == 2.0 || big_s <= 0.0 {
            1.0
        } else {
            2.0 / p * big_s.powf(2.0 / p - 1.0)
        };
        for b in self.solver.blocks.iter().filter(|b| b.smooth()) {
            let ui = &u[b.off..b.off + b.dim];
            let n = BlockNorm::L2.norm(ui);
            if n > 0.0 {
                let scale = c1 * p * n.powf(p - 2.0);
                for (x, y) in g[b.off..b.off + b.dim].iter_mut().zip(ui) {
                    *x = scale * y;
                }
            }
        }
        for (pb, duals) in self.poly.iter().zip(duals) {
            let b = &self.solver.blocks[pb.block];
            for (e, &w) in pb.vertices.iter().zip(duals) {
                for (x, ek) in g[b.off..b.off + b.dim].iter_mut().zip(e) {
                    *x += w * ek;
                }
            }
        }
        g
    }

    fn upper(&self, lambda: &[f64]) -> f64 {
        let u = self.residual(lambda);
        self.solver.value(&u).powf(1.0 / self.solver.p)
    }

    fn run(&mut self, tol: f64, budget: usize, lower0: f64) -> CorrectiveOutcome {
        let solver = self.solver;
        let mut table = vec![0.0; solver.table_len];
        let mut best_lower = lower0;
        let mut iterations = 0;
        let mut best = (self.upper(&self.lambda), self.snapshot(&self.lambda));
        let keep = 2 * (solver.dim + 2);

        while iterations < budget {
            iterations += self.solve_master();
            let mut candidates = vec![(self.lambda.clone(), self.duals.clone())];
            candidates.extend(self.polished.take());
            let mut fresh = Vec::new();
            let mut warm = (f64::INFINITY, 0);
            for (c, (lambda, duals)) in candidates.iter().enumerate() {
                let upper = self.upper(lambda);
                if upper < best.0 {
                    best = (upper, self.snapshot(lambda));
                }
                if upper < warm.0 {
                    warm = (upper, c);
                }
                let g = self.dual_gradient(lambda, duals);
                let (lb, j) = solver.dual_bound(&g, &self.t, &mut table);
                best_lower = best_lower.max(lb);
                if !self.atoms.contains(&j) && !fresh.contains(&j) {
                    fresh.push(j);
                }
            }
            self.lambda = candidates.swap_remove(warm.1).0;
            if best.0 < tol || best.0 - best_lower <= tol || fresh.is_empty() {
                break;
            }
            if self.atoms.len() >= keep {
                let lmax = self.lambda.iter().cloned().fold(0.0, f64::max);
                let mut pos = 0;
                while pos < self.atoms.len() {
                    if self.lambda[pos] < 1e-12 * lmax {
                        self.remove_atom(pos);
                    } else {
                        pos += 1;
                    }
                }
            }
            for j in fresh {
                self.push_atom(j, 0.0);
            }
        }
        CorrectiveOutcome {
            weights: best.1,
            upper: best.0,
            lower: best_lower,
            iterations,
        }
    }

    fn snapshot(&self, lambda: &[f64]) -> Vec<(usize, f64)> {
        self.atoms.iter().copied().zip(lambda.iter().copied()).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Brute-force upper bound on `φ`: minimum over the simplex grid with step
/// `1/resolution`. Only for `|A| ≤ 4`.
pub fn min_norm_oracle(
    space: &ProductSpace,
    event: &Event,
    t: &Outcome,
    resolution: usize,
) -> Result<f64> {
    space.ensure_valid()?;
    event.validate(space)?;
    space.check_outcome(t)?;
    if event.is_empty() || event.len() > 4 {
        return Err(Error::InvalidArgument(format!(
            "grid oracle needs 1..=4 atoms, got {}",
            event.len()
        )));
    }
    if resolution == 0 {
        return Err(Error::InvalidArgument("resolution must be positive".into()));
    }
    let tc = space.coordinates(t);
    let pts: Vec<Vec<f64>> = event.outcomes().iter().map(|a| space.coordinates(a)).collect();
    let mut counts = vec![0usize; pts.len()];
    let mut best = f64::INFINITY;
    grid_walk(&mut counts, 0, resolution, &mut |c| {
        let mut diff = tc.clone();
        for (k, pt) in c.iter().zip(&pts) {
            let w = *k as f64 / resolution as f64;
            for (d, x) in diff.iter_mut().zip(pt) {
                *d -= w * x;
            }
        }
        best = best.min(space.mixed_norm(&diff));
    });
    Ok(best)
}

fn grid_walk(counts: &mut [usize], pos: usize, left: usize, f: &mut impl FnMut(&[usize])) {
    if pos + 1 == counts.len() {
        counts[pos] = left;
        f(counts);
        return;
    }
    for k in 0..=left {
        counts[pos] = k;
        grid_walk(counts, pos + 1, left - k, f);
    }
}
