//! Random coordinate selection for an `n`-dimensional subspace `X` of
//! `L_r({1..N}, μ)`.
//!
//! Keeping each atom `i` independently with probability `δ` and reading
//! `S(x) = Σ_{i∈A} μ(i)|x(i)|^r` on an ε-net of the unit sphere certifies that
//! the restriction to `A` is, up to the factor `δ^{1/r}`, a small-distortion
//! copy of `X`. [`iterate_embedding`] repeats the step with atom splitting and
//! a pluggable change of density.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{abs_pow, compensated_sum, sig17};
use crate::rng::{derive_seed, stream};

/// Relative singular-value threshold of the rank test.
const RANK_TOL: f64 = 1e-10;
/// Slack on `Σ μ = 1` and on measure caps.
const MASS_TOL: f64 = 1e-12;
/// Unit-norm tolerance for net points and test vectors.
const UNIT_TOL: f64 = 1e-10;

/// On-disk form of a subspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceFile {
    pub basis: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub r: f64,
    pub s: f64,
}

/// `X = span` of the columns of an `N × n` table, as functions on
/// `({1..N}, μ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSubspace {
    /// Row-major, `N × n`.
    basis: Vec<f64>,
    mu: Vec<f64>,
    n: usize,
    r: f64,
    s: f64,
}

impl SampledSubspace {
    pub fn new(basis: Vec<Vec<f64>>, mu: Vec<f64>, r: f64, s: f64) -> Result<Self> {
        let n = basis.first().map_or(0, |row| row.len());
        if n == 0 {
            return Err(Error::InvalidSubspace("empty basis".into()));
        }
        if let Some(row) = basis.iter().find(|row| row.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: row.len(),
            });
        }
        let flat: Vec<f64> = basis.into_iter().flatten().collect();
        Self::from_flat(flat, mu, n, r, s)
    }

    fn from_flat(basis: Vec<f64>, mu: Vec<f64>, n: usize, r: f64, s: f64) -> Result<Self> {
        let big_n = mu.len();
        if basis.len() != big_n * n {
            return Err(Error::DimensionMismatch {
                expected: big_n * n,
                got: basis.len(),
            });
        }
        if !(r > 0.0 && r <= 2.0) {
            return Err(Error::InvalidSubspace(format!("r = {r} outside (0, 2]")));
        }
        if !(s > r && s <= 2.0 * r) {
            return Err(Error::InvalidSubspace(format!(
                "need r < s <= 2r, got r = {r}, s = {s}"
            )));
        }
        if basis.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidSubspace("non-finite basis entry".into()));
        }
        if mu.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
            return Err(Error::InvalidSubspace("negative or non-finite weight".into()));
        }
        let total = compensated_sum(mu.iter().copied());
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidSubspace(format!("weights sum to {total}, not 1")));
        }
        let sub = Self { basis, mu, n, r, s };
        let rank = sub.rank();
        if rank < n {
            return Err(Error::InvalidSubspace(format!(
                "basis has rank {rank} < {n} on the support of mu"
            )));
        }
        Ok(sub)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: SubspaceFile = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.display().to_string(),
            source,
        })?;
        Self::new(file.basis, file.mu, file.r, file.s)
    }

    pub fn to_file(&self) -> SubspaceFile {
        SubspaceFile {
            basis: self.basis.chunks(self.n).map(<[f64]>::to_vec).collect(),
            mu: self.mu.clone(),
            r: self.r,
            s: self.s,
        }
    }

    /// Independent standard Gaussian basis entries, uniform `μ`.
    pub fn gaussian<R: Rng + ?Sized>(n: usize, big_n: usize, r: f64, s: f64, rng: &mut R) -> Result<Self> {
        let basis = (0..big_n * n).map(|_| rng.sample(StandardNormal)).collect();
        Self::from_flat(basis, vec![1.0 / big_n as f64; big_n], n, r, s)
    }

    /// The constant functions, uniform `μ`.
    pub fn constants(big_n: usize, r: f64, s: f64) -> Result<Self> {
        Self::from_flat(vec![1.0; big_n], vec![1.0 / big_n as f64; big_n], 1, r, s)
    }

    /// Coordinate functions of `{1..N}`, uniform `μ`.
    pub fn identity(big_n: usize, r: f64, s: f64) -> Result<Self> {
        let mut basis = vec![0.0; big_n * big_n];
        for i in 0..big_n {
            basis[i * big_n + i] = 1.0;
        }
        Self::from_flat(basis, vec![1.0 / big_n as f64; big_n], big_n, r, s)
    }

    /// Same subspace with every basis entry multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let basis = self.basis.iter().map(|b| b * factor).collect();
        Self::from_flat(basis, self.mu.clone(), self.n, self.r, self.s)
    }

    /// Same functions with a different measure on the same atoms.
    pub fn with_mu(&self, mu: Vec<f64>) -> Result<Self> {
        Self::from_flat(self.basis.clone(), mu, self.n, self.r, self.s)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn n_atoms(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn q(&self) -> f64 {
        self.s / self.r
    }

    /// Exponent dual to `q = s / r`.
    pub fn p(&self) -> f64 {
        let q = self.q();
        q / (q - 1.0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.basis[i * self.n..(i + 1) * self.n]
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Values `X(i) = Σ_j x_j basis_{ij}`.
    pub fn values(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x)?;
        Ok(self.basis.chunks(self.n).map(|row| dot(row, x)).collect())
    }

    /// `Σ μ(i) |X(i)|^u`.
    fn moment(&self, x: &[f64], u: f64) -> f64 {
        compensated_sum(
            self.basis
                .chunks(self.n)
                .zip(&self.mu)
                .map(|(row, m)| m * abs_pow(dot(row, x), u)),
        )
    }

    /// `‖X‖_{L_u(μ)}`.
    pub fn norm_u(&self, x: &[f64], u: f64) -> Result<f64> {
        self.check_len(x)?;
        if !(u > 0.0) {
            return Err(Error::InvalidArgument(format!("norm exponent {u} must be positive")));
        }
        Ok(self.moment(x, u).powf(1.0 / u))
    }

    pub fn lr_norm(&self, x: &[f64]) -> Result<f64> {
        self.norm_u(x, self.r)
    }

    pub fn ls_norm(&self, x: &[f64]) -> Result<f64> {
        self.norm_u(x, self.s)
    }

    /// Numerical rank of the `√μ`-weighted rows with `μ > 0`.
    pub fn rank(&self) -> usize {
        let rows: Vec<usize> = (0..self.n_atoms()).filter(|&i| self.mu[i] > 0.0).collect();
        if rows.is_empty() {
            return 0;
        }
        let m = DMatrix::from_fn(rows.len(), self.n, |a, j| {
            self.mu[rows[a]].sqrt() * self.basis[rows[a] * self.n + j]
        });
        let sv = m.singular_values();
        let top = sv.max();
        if !(top > 0.0) {
            return 0;
        }
        sv.iter().filter(|&&v| v > RANK_TOL * top).count()
    }

    /// Restriction to `atoms` with `μ` renormalized there. Also returns the
    /// mass `Σ_{i∈atoms} μ(i)` that was renormalized away.
    pub fn restrict(&self, atoms: &[usize]) -> Result<(Self, f64)> {
        let mass = compensated_sum(atoms.iter().map(|&i| self.mu[i]));
        if !(mass > 0.0) {
            return Err(Error::Degenerate("restriction to a null set".into()));
        }
        let mut basis = Vec::with_capacity(atoms.len() * self.n);
        for &i in atoms {
            basis.extend_from_slice(self.row(i));
        }
        let mu = renormalize(atoms.iter().map(|&i| self.mu[i]).collect());
        Ok((Self::from_flat(basis, mu, self.n, self.r, self.s)?, mass))
    }

    /// Gram matrix of the basis in `L_2(μ)`.
    fn gram(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.n, self.n);
        for (row, m) in self.basis.chunks(self.n).zip(&self.mu) {
            for a in 0..self.n {
                for b in 0..self.n {
                    g[(a, b)] += m * row[a] * row[b];
                }
            }
        }
        g
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Divide by a compensated total.
fn renormalize(mut mu: Vec<f64>) -> Vec<f64> {
    let total = compensated_sum(mu.iter().copied());
    for m in &mut mu {
        *m /= total;
    }
    mu
}

pub fn lr_norm(x: &[f64], sub: &SampledSubspace) -> Result<f64> {
    sub.lr_norm(x)
}

fn gaussian_direction<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Lower estimate of `sup_{x ≠ 0} ‖x‖_a / ‖x‖_b`: the best of the
/// coordinate vectors and `budget` seeded Gaussian directions, then
/// coordinate ascent from the best few with a halving step until no move
/// improves the ratio by more than `1e-9`.
fn ratio_sup(sub: &SampledSubspace, a: f64, b: f64, budget: usize, seed: u64, tag: &str) -> Result<f64> {
    let n = sub.dim();
    let ratio = |x: &[f64]| {
        let den = sub.moment(x, b).powf(1.0 / b);
        if den > 0.0 {
            Some(sub.moment(x, a).powf(1.0 / a) / den)
        } else {
            None
        }
    };
    let mut starts: Vec<(f64, Vec<f64>)> = Vec::new();
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        if let Some(v) = ratio(&e) {
            starts.push((v, e));
        }
    }
    for i in 0..budget {
        let x = gaussian_direction(n, &mut stream(seed, tag, i as u64));
        if let Some(v) = ratio(&x) {
            starts.push((v, x));
        }
    }
    if starts.is_empty() {
        return Err(Error::Degenerate("every probed direction has zero norm".into()));
    }
    starts.sort_by(|u, v| v.0.total_cmp(&u.0));
    let mut best = starts[0].0;
    for (mut val, mut x) in starts.into_iter().take(4) {
        let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut h = 0.5 * scale;
        let mut guard = 0;
        while h > 1e-9 * scale && guard < 400 * n {
            guard += 1;
            let mut moved = false;
            for j in 0..n {
                for sign in [1.0, -1.0] {
                    let mut y = x.clone();
                    y[j] += sign * h;
                    if let Some(v) = ratio(&y) {
                        if v > val * (1.0 + 1e-9) {
                            val = v;
                            x = y;
                            moved = true;
                        }
                    }
                }
            }
            if !moved {
                h *= 0.5;
            }
        }
        best = best.max(val);
    }
    Ok(best)
}

/// Estimate `K` with `‖x‖_s ≤ K ‖x‖_r` on `X`. A lower bound on the true
/// constant, clamped at 1, which Hölder's inequality guarantees.
pub fn estimate_k(sub: &SampledSubspace, budget: usize, seed: u64) -> Result<f64> {
    if budget == 0 {
        return Err(Error::InvalidArgument("estimate budget must be >= 1".into()));
    }
    Ok(ratio_sup(sub, sub.s, sub.r, budget, seed, "estimate-k")?.max(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub cap: f64,
    pub n_before: usize,
    pub n_after: usize,
    /// Copies made of each original atom.
    pub copies: Vec<usize>,
    pub max_atom: f64,
    /// `M = 1 / cap`.
    pub m: f64,
    /// `N′ ≤ 2M`.
    pub size_within_2m: bool,
    /// Every atom `≤ 2 / N′`.
    pub atoms_within_2_over_n: bool,
}

/// Replace every atom heavier than `cap` by `⌈μ(i)/cap⌉` equal copies of its
/// row. All `L_u(μ)` norms are unchanged. `cap ≥ 1` leaves the subspace as is.
pub fn split_atoms(sub: &SampledSubspace, cap: f64) -> Result<(SampledSubspace, SplitReport)> {
    if !(cap > 0.0 && cap.is_finite()) {
        return Err(Error::InvalidArgument(format!("cap {cap} must be positive")));
    }
    let n = sub.dim();
    let mut basis = Vec::with_capacity(sub.basis.len());
    let mut mu = Vec::with_capacity(sub.n_atoms());
    let mut copies = Vec::with_capacity(sub.n_atoms());
    for (i, &w) in sub.mu.iter().enumerate() {
        let mut m = 1;
        if cap < 1.0 && w > cap {
            m = (w / cap).ceil() as usize;
            while w / m as f64 > cap {
                m += 1;
            }
        }
        for _ in 0..m {
            basis.extend_from_slice(sub.row(i));
            mu.push(w / m as f64);
        }
        copies.push(m);
    }
    let n_after = mu.len();
    let max_atom = mu.iter().cloned().fold(0.0, f64::max);
    let out = SampledSubspace {
        basis,
        mu,
        n,
        r: sub.r,
        s: sub.s,
    };
    let m = 1.0 / cap;
    let report = SplitReport {
        cap,
        n_before: sub.n_atoms(),
        n_after,
        copies,
        max_atom,
        m,
        size_within_2m: n_after as f64 <= 2.0 * m,
        atoms_within_2_over_n: max_atom <= 2.0 / n_after as f64 * (1.0 + MASS_TOL),
    };
    Ok((out, report))
}

/// Coordinates in which the Euclidean distance of coefficient vectors is
/// the `L_2(μ)` distance of the functions, together with a margin-inflated
/// estimate `k2` of `sup ‖·‖_2 / ‖·‖_r`. Since `μ` is a probability and
/// `r ≤ 2`, `‖·‖_r ≤ ‖·‖_2` gives a rigorous upper bound on the net metric,
/// while `k2` only prunes candidates.
struct Geometry<'a> {
    sub: &'a SampledSubspace,
    chol_t: DMatrix<f64>,
    k2: f64,
    /// Power applied to `‖·‖_r` so that the metric satisfies the triangle
    /// inequality (`r` itself when `r < 1`).
    power: f64,
}

impl<'a> Geometry<'a> {
    fn new(sub: &'a SampledSubspace, seed: u64) -> Result<Self> {
        let chol = sub
            .gram()
            .cholesky()
            .ok_or_else(|| Error::Degenerate("Gram matrix is not positive definite".into()))?;
        let chol_t = chol.l().transpose();
        let k2 = 1.25 * ratio_sup(sub, 2.0, sub.r, 64, seed, "net-k2")?.max(1.0);
        Ok(Self {
            sub,
            chol_t,
            k2,
            power: sub.r.min(1.0),
        })
    }

    fn embed(&self, x: &[f64]) -> Vec<f64> {
        (&self.chol_t * DVector::from_column_slice(x)).as_slice().to_vec()
    }

    /// Net metric between unit vectors.
    fn dist(&self, x: &[f64], y: &[f64]) -> f64 {
        let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        let m = self.sub.moment(&d, self.sub.r);
        if self.power < 1.0 {
            m
        } else {
            m.powf(1.0 / self.sub.r)
        }
    }

    fn upper(&self, g: f64) -> f64 {
        g.powf(self.power)
    }

    fn lower(&self, g: f64) -> f64 {
        (g / self.k2).powf(self.power)
    }

    fn radius(&self, eps: f64) -> f64 {
        eps.powf(self.power)
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Options for [`build_net`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetOptions {
    /// Size of each audit sample of fresh directions.
    pub probe_count: usize,
    /// Construction directions drawn up front.
    pub pool_size: usize,
    /// Construction covers the pool at `shrink · ε`.
    pub shrink: f64,
    pub max_size: usize,
    pub audit_rounds: usize,
}

impl Default for NetOptions {
    fn default() -> Self {
        Self {
            probe_count: 10_000,
            pool_size: 10_000,
            shrink: 0.85,
            max_size: 20_000,
            audit_rounds: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub epsilon: f64,
    /// Coefficient vectors with `‖x‖_r = 1`.
    pub points: Vec<Vec<f64>>,
    pub certified: bool,
    pub size: usize,
    pub probe_count: usize,
    pub audits: usize,
    /// Probes of the last audit not covered within `ε`.
    pub uncovered: usize,
    /// `n r log(2/ε)`, the log of the volumetric net size.
    pub log_theoretical_size: f64,
    pub seed: u64,
}

fn unit_direction<R: Rng + ?Sized>(sub: &SampledSubspace, rng: &mut R) -> Vec<f64> {
    loop {
        let x = gaussian_direction(sub.dim(), rng);
        let norm = sub.moment(&x, sub.r).powf(1.0 / sub.r);
        if norm > 0.0 {
            return x.iter().map(|v| v / norm).collect();
        }
    }
}

/// Greedy farthest-point ε-net of the unit sphere of `X`, audited on fresh
/// probe samples. Probes missed by an audit join the construction pool and
/// the next audit uses a new sample; the net is certified when an audit
/// finds every probe within `ε`.
pub fn build_net(sub: &SampledSubspace, epsilon: f64, seed: u64, opts: &NetOptions) -> Result<NetSpec> {
    let n = sub.dim();
    if n > 6 {
        return Err(Error::InvalidArgument(format!("net construction needs n <= 6, got {n}")));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be positive")));
    }
    if opts.probe_count == 0 || opts.pool_size == 0 || !(opts.shrink > 0.0 && opts.shrink <= 1.0) {
        return Err(Error::InvalidArgument("bad net options".into()));
    }
    let geo = Geometry::new(sub, seed)?;
    let rho = geo.radius(epsilon);
    let build_rho = geo.radius(epsilon * opts.shrink);

    let mut pool: Vec<Vec<f64>> = (0..opts.pool_size)
        .map(|i| unit_direction(sub, &mut stream(seed, "net-pool", i as u64)))
        .collect();
    let mut pool_y: Vec<Vec<f64>> = pool.iter().map(|x| geo.embed(x)).collect();
    let mut mind = vec![f64::INFINITY; pool.len()];
    let mut centers: Vec<Vec<f64>> = Vec::new();
    let mut centers_y: Vec<Vec<f64>> = Vec::new();

    // new pool points get their distance to the current net; adding a
    // center updates only points it might be closer to
    let relax = |x: &[f64], y: &[f64], cur: f64, cx: &[f64], cy: &[f64]| -> f64 {
        let g = euclid(y, cy);
        if geo.lower(g) >= cur {
            return cur;
        }
        let ub = geo.upper(g);
        if ub <= build_rho && ub <= cur {
            return ub;
        }
        cur.min(geo.dist(x, cx))
    };

    let mut certified = false;
    let mut audits = 0;
    let mut uncovered = 0;
    'outer: for audit in 0..opts.audit_rounds.max(1) {
        loop {
            let (far, &gap) = match mind
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
            {
                Some(v) => v,
                None => break,
            };
            if gap <= build_rho {
                break;
            }
            if centers.len() >= opts.max_size {
                break 'outer;
            }
            let (cx, cy) = (pool[far].clone(), pool_y[far].clone());
            for i in 0..pool.len() {
                mind[i] = relax(&pool[i], &pool_y[i], mind[i], &cx, &cy);
            }
            mind[far] = 0.0;
            centers.push(cx);
            centers_y.push(cy);
        }

        audits = audit + 1;
        let mut missed = Vec::new();
        for i in 0..opts.probe_count {
            let x = unit_direction(sub, &mut stream(seed, &format!("net-probe-{audit}"), i as u64));
            let y = geo.embed(&x);
            let mut order: Vec<(f64, usize)> = centers_y
                .iter()
                .enumerate()
                .map(|(c, cy)| (euclid(&y, cy), c))
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0));
            let covered = order
                .iter()
                .take_while(|(g, _)| geo.lower(*g) <= rho)
                .any(|&(g, c)| geo.upper(g) <= rho || geo.dist(&x, &centers[c]) <= rho);
            if !covered {
                missed.push((x, y));
            }
        }
        uncovered = missed.len();
        if missed.is_empty() {
            certified = true;
            break;
        }
        for (x, y) in missed {
            let mut d = f64::INFINITY;
            for (cx, cy) in centers.iter().zip(&centers_y) {
                d = relax(&x, &y, d, cx, cy);
            }
            pool.push(x);
            pool_y.push(y);
            mind.push(d);
        }
    }

    for x in &centers {
        let norm = sub.lr_norm(x)?;
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::Degenerate(format!("net point has norm {norm}")));
        }
    }
    Ok(NetSpec {
        epsilon,
        size: centers.len(),
        points: centers,
        certified,
        probe_count: opts.probe_count,
        audits,
        uncovered,
        log_theoretical_size: n as f64 * sub.r * (2.0 / epsilon).ln(),
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaChoice {
    pub delta: f64,
    pub k_target: f64,
    pub eta: f64,
    pub p: f64,
    pub q: f64,
    /// `δ ≥ 1`: the instance is too small for the formula and selection
    /// would keep every atom.
    pub too_small: bool,
}

/// `η = c ε^{rp} / (r log(2/ε))`, `δ = (n K^{rp} / (η N))^{1/p}`,
/// `k = 2δN`.
pub fn choose_delta_k(
    n: usize,
    big_n: usize,
    k: f64,
    r: f64,
    s: f64,
    epsilon: f64,
    c_universal: f64,
) -> Result<DeltaChoice> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} outside (0, 1)")));
    }
    if n == 0 || big_n == 0 || !(k > 0.0) || !(r > 0.0) || !(c_universal > 0.0) {
        return Err(Error::InvalidArgument("choose_delta_k needs positive inputs".into()));
    }
    if !(s > r && s <= 2.0 * r) {
        return Err(Error::InvalidArgument(format!("need r < s <= 2r, got r = {r}, s = {s}")));
    }
    let q = s / r;
    let p = q / (q - 1.0);
    let eta = c_universal * epsilon.powf(r * p) / (r * (2.0 / epsilon).ln());
    let delta = (n as f64 * k.powf(r * p) / (eta * big_n as f64)).powf(1.0 / p);
    Ok(DeltaChoice {
        delta,
        k_target: 2.0 * delta * big_n as f64,
        eta,
        p,
        q,
        too_small: delta >= 1.0 - MASS_TOL,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrial {
    pub seed: u64,
    pub delta: f64,
    pub epsilon: f64,
    /// Selected atoms, ascending. Reproducible from `seed`, so not serialized.
    #[serde(skip)]
    pub mask: Vec<usize>,
    pub k: usize,
    /// `S(x)` per net point. Not serialized.
    #[serde(skip)]
    pub sums: Vec<f64>,
    pub min_sum: f64,
    pub max_sum: f64,
    /// `max |S(x) − δ| / δ`.
    pub max_rel_dev: f64,
    pub distortion: f64,
    /// `δ^{1/r}`, the factor in "a multiple of an isomorphism".
    pub scale: f64,
    pub pass: bool,
}

/// Per-net-point weights `μ(i)|x(i)|^r` and their totals `‖x‖_r^r`,
/// computed once and reused across trials. `S(x)` is divided by the total
/// summed in the same order, so keeping every atom gives exactly 1.
pub struct Certifier<'a> {
    sub: &'a SampledSubspace,
    weights: Vec<Vec<f64>>,
    totals: Vec<f64>,
}

impl<'a> Certifier<'a> {
    pub fn new(sub: &'a SampledSubspace, net: &NetSpec) -> Result<Self> {
        if !net.certified {
            return Err(Error::Hypothesis("selection needs a certified net".into()));
        }
        if net.points.is_empty() {
            return Err(Error::InvalidArgument("empty net".into()));
        }
        let weights = net
            .points
            .iter()
            .map(|x| {
                let v = sub.values(x)?;
                Ok(v.iter().zip(&sub.mu).map(|(a, m)| m * abs_pow(*a, sub.r)).collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        let totals = weights.iter().map(|w| compensated_sum(w.iter().copied())).collect();
        Ok(Self { sub, weights, totals })
    }

    /// Independent `δ`-coin per atom from `seed`, then `S(x)` on the net.
    pub fn trial(&self, delta: f64, epsilon: f64, seed: u64) -> Result<SelectionTrial> {
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::InvalidArgument(format!("delta {delta} outside (0, 1]")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be positive")));
        }
        let mut rng = stream(seed, "select", 0);
        let mask: Vec<usize> = (0..self.sub.n_atoms())
            .filter(|_| rng.random::<f64>() < delta)
            .collect();
        let sums: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.totals)
            .map(|(w, total)| compensated_sum(mask.iter().map(|&i| w[i])) / total)
            .collect();
        let min_sum = sums.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_sum = sums.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let max_rel_dev = sums.iter().map(|s| (s - delta).abs()).fold(0.0, f64::max) / delta;
        let distortion = if min_sum > 0.0 {
            (max_sum / min_sum).powf(1.0 / self.sub.r)
        } else {
            f64::INFINITY
        };
        let pass = min_sum > 0.0 && max_rel_dev <= epsilon.powf(self.sub.r);
        Ok(SelectionTrial {
            seed,
            delta,
            epsilon,
            k: mask.len(),
            mask,
            sums,
            min_sum,
            max_sum,
            max_rel_dev,
            distortion,
            scale: delta.powf(1.0 / self.sub.r),
            pass,
        })
    }
}

/// One selection trial; see [`Certifier`] to reuse the net across trials.
pub fn select_and_certify(
    sub: &SampledSubspace,
    net: &NetSpec,
    delta: f64,
    epsilon: f64,
    seed: u64,
) -> Result<SelectionTrial> {
    Certifier::new(sub, net)?.trial(delta, epsilon, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tail10Row {
    pub c: f64,
    pub exceed: f64,
    pub bound: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tail10Report {
    pub delta: f64,
    pub trials: usize,
    pub k: f64,
    pub p: f64,
    pub n_atoms: usize,
    pub seed: u64,
    pub rows: Vec<Tail10Row>,
    pub pass: bool,
}

impl Tail10Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("c,tail,bound,violated\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                sig17(r.c),
                sig17(r.exceed),
                sig17(r.bound),
                r.violated
            ));
        }
        out
    }
}

/// `4 exp(−c^p N / (8 K^{rp}))`.
pub fn tail10_bound(c: f64, big_n: usize, k: f64, r: f64, p: f64) -> f64 {
    4.0 * (-abs_pow(c, p) * big_n as f64 / (8.0 * k.powf(r * p))).exp()
}

/// Empirical `P(|Σ δ_i μ(i)|x(i)|^r − δ| > c)` over seeded trials against
/// [`tail10_bound`]. A row is flagged when `emp − 3√(emp/trials)` exceeds
/// the bound.
pub fn tail10_experiment(
    sub: &SampledSubspace,
    x: &[f64],
    delta: f64,
    trials: usize,
    c_grid: &[f64],
    k: f64,
    seed: u64,
) -> Result<Tail10Report> {
    let big_n = sub.n_atoms();
    let cap = 2.0 / big_n as f64;
    if let Some(m) = sub.mu.iter().find(|&&m| m > cap * (1.0 + MASS_TOL)) {
        return Err(Error::Hypothesis(format!("atom {m} exceeds 2/N = {cap}")));
    }
    let norm = sub.lr_norm(x)?;
    if (norm - 1.0).abs() > UNIT_TOL {
        return Err(Error::InvalidArgument(format!("‖x‖_r = {norm}, expected 1")));
    }
    if !(delta > 0.0 && delta <= 1.0) || trials == 0 || c_grid.is_empty() || !(k >= 1.0) {
        return Err(Error::InvalidArgument("bad tail experiment parameters".into()));
    }
    let w: Vec<f64> = sub
        .values(x)?
        .iter()
        .zip(&sub.mu)
        .map(|(v, m)| m * abs_pow(*v, sub.r))
        .collect();
    let mut counts = vec![0usize; c_grid.len()];
    for t in 0..trials {
        let mut rng = stream(seed, "tail10", t as u64);
        let mut acc = 0.0;
        for wi in &w {
            if rng.random::<f64>() < delta {
                acc += wi;
            }
        }
        let dev = (acc - delta).abs();
        for (cnt, &c) in counts.iter_mut().zip(c_grid) {
            if dev > c {
                *cnt += 1;
            }
        }
    }
    let p = sub.p();
    let rows: Vec<Tail10Row> = c_grid
        .iter()
        .zip(&counts)
        .map(|(&c, &cnt)| {
            let exceed = cnt as f64 / trials as f64;
            let bound = tail10_bound(c, big_n, k, sub.r, p);
            Tail10Row {
                c,
                exceed,
                bound,
                violated: exceed - 3.0 * (exceed / trials as f64).sqrt() > bound,
            }
        })
        .collect();
    let pass = rows.iter().all(|r| !r.violated);
    Ok(Tail10Report {
        delta,
        trials,
        k,
        p,
        n_atoms: big_n,
        seed,
        rows,
        pass,
    })
}

/// Supplies, for the current subspace, an equivalent one (same `L_r`
/// geometry) together with a constant `K` such that `‖x‖_s ≤ K‖x‖_r`.
pub trait DensityProvider {
    fn provide(&self, sub: &SampledSubspace, round: usize, seed: u64) -> Result<(SampledSubspace, f64)>;
}

/// Moves to the uniform measure on the support of `μ` by the isometry
/// `X(i) ↦ X(i) (N μ(i))^{1/r}`, then estimates `K`, unless `k` is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformDensity {
    pub k_budget: usize,
    pub k: Option<f64>,
}

impl Default for UniformDensity {
    fn default() -> Self {
        Self { k_budget: 256, k: None }
    }
}

impl DensityProvider for UniformDensity {
    fn provide(&self, sub: &SampledSubspace, round: usize, seed: u64) -> Result<(SampledSubspace, f64)> {
        let support: Vec<usize> = (0..sub.n_atoms()).filter(|&i| sub.mu[i] > 0.0).collect();
        let big_n = support.len() as f64;
        let uniform = sub.mu.iter().all(|&m| m == 0.0 || m == sub.mu[support[0]]);
        let out = if uniform && support.len() == sub.n_atoms() {
            sub.clone()
        } else {
            let mut basis = Vec::with_capacity(support.len() * sub.n);
            for &i in &support {
                let f = (big_n * sub.mu[i]).powf(1.0 / sub.r);
                basis.extend(sub.row(i).iter().map(|b| b * f));
            }
            SampledSubspace::from_flat(basis, vec![1.0 / big_n; support.len()], sub.n, sub.r, sub.s)?
        };
        let k = match self.k {
            Some(k) => k,
            None => estimate_k(&out, self.k_budget, derive_seed(seed, "density-k", round as u64))?,
        };
        Ok((out, k))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IterateOptions {
    pub net: NetOptions,
    pub retries: usize,
}

impl Default for IterateOptions {
    fn default() -> Self {
        Self {
            net: NetOptions::default(),
            retries: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub epsilon: f64,
    /// Atoms entering the round.
    pub n_in: usize,
    /// Atoms after splitting.
    pub n_split: usize,
    pub k_hat: f64,
    pub choice: DeltaChoice,
    pub net_size: usize,
    pub net_seed: u64,
    pub attempts: Vec<SelectionTrial>,
    /// Atoms kept.
    pub k: usize,
    pub distortion: f64,
    pub scale: f64,
    /// `Σ_{i∈A} μ(i)` before renormalizing.
    pub kept_mass: f64,
    pub noop: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub rounds: Vec<RoundRecord>,
    pub cumulative_distortion: f64,
    /// `Π (1 + ε_j)`.
    pub distortion_budget: f64,
    pub sizes_decrease: bool,
    pub pass: bool,
}

impl IterationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,N,k,distortion\n");
        for r in &self.rounds {
            out.push_str(&format!("{},{},{},{}\n", r.round, r.n_split, r.k, sig17(r.distortion)));
        }
        out
    }
}

/// Repeat: change density, split atoms to `μ ≤ 1/N` (so `N′ ≤ 2N` and every
/// atom is `≤ 2/N′`), size `δ`, retry selection until the net certifies,
/// restrict and renormalize. A round with `δ ≥ 1` keeps every atom and is
/// reported as a no-op.
pub fn iterate_embedding(
    sub: &SampledSubspace,
    rounds: usize,
    epsilon_per_round: &[f64],
    provider: &dyn DensityProvider,
    c_universal: f64,
    seed: u64,
    opts: &IterateOptions,
) -> Result<IterationReport> {
    if rounds == 0 {
        return Err(Error::InvalidArgument("rounds must be >= 1".into()));
    }
    if epsilon_per_round.is_empty() || (epsilon_per_round.len() != 1 && epsilon_per_round.len() != rounds) {
        return Err(Error::InvalidArgument(format!(
            "need 1 or {rounds} epsilons, got {}",
            epsilon_per_round.len()
        )));
    }
    let mut current = sub.clone();
    let mut records = Vec::with_capacity(rounds);
    let mut cumulative = 1.0;
    let mut budget = 1.0;
    for round in 0..rounds {
        let eps = epsilon_per_round[round.min(epsilon_per_round.len() - 1)];
        let n_in = current.n_atoms();
        let (dense, k_hat) = provider
            .provide(&current, round, seed)
            .map_err(|e| Error::DensityProvider(e.to_string()))?;
        let (split, _) = split_atoms(&dense, 1.0 / dense.n_atoms() as f64)?;
        let choice = choose_delta_k(split.dim(), split.n_atoms(), k_hat, split.r, split.s, eps, c_universal)?;
        budget *= 1.0 + eps;
        let net_seed = derive_seed(seed, "round-net", round as u64);
        if choice.too_small {
            records.push(RoundRecord {
                round,
                epsilon: eps,
                n_in,
                n_split: split.n_atoms(),
                k_hat,
                choice,
                net_size: 0,
                net_seed,
                attempts: Vec::new(),
                k: split.n_atoms(),
                distortion: 1.0,
                scale: 1.0,
                kept_mass: 1.0,
                noop: true,
            });
            current = split;
            continue;
        }
        let net = build_net(&split, eps, net_seed, &opts.net)?;
        if !net.certified {
            return Err(Error::Hypothesis(format!(
                "round {round}: net of size {} not certified",
                net.size
            )));
        }
        let cert = Certifier::new(&split, &net)?;
        let mut attempts = Vec::new();
        let mut accepted = None;
        for attempt in 0..opts.retries.max(1) {
            let s = derive_seed(seed, &format!("round-{round}"), attempt as u64);
            let trial = cert.trial(choice.delta, eps, s)?;
            if trial.pass {
                if let Ok(next) = split.restrict(&trial.mask) {
                    accepted = Some((trial.clone(), next));
                    attempts.push(trial);
                    break;
                }
            }
            attempts.push(trial);
        }
        let Some((trial, (next, kept_mass))) = accepted else {
            return Err(Error::RetriesExhausted {
                round,
                attempts: attempts.len(),
            });
        };
        cumulative *= trial.distortion;
        records.push(RoundRecord {
            round,
            epsilon: eps,
            n_in,
            n_split: split.n_atoms(),
            k_hat,
            choice,
            net_size: net.size,
            net_seed,
            k: trial.k,
            distortion: trial.distortion,
            scale: trial.scale,
            kept_mass,
            attempts,
            noop: false,
        });
        current = next;
    }
    let sizes_decrease = records.iter().all(|r| r.k < r.n_split);
    let pass = sizes_decrease && cumulative <= budget;
    Ok(IterationReport {
        rounds: records,
        cumulative_distortion: cumulative,
        distortion_budget: budget,
        sizes_decrease,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use statrs::distribution::{Binomial, Discrete};

    fn small_net() -> NetOptions {
        NetOptions {
            probe_count: 2_000,
            pool_size: 1_000,
            ..Default::default()
        }
    }

    fn gaussian(n: usize, big_n: usize, r: f64, s: f64, seed: u64) -> SampledSubspace {
        SampledSubspace::gaussian(n, big_n, r, s, &mut stream(seed, "sparsify-test", 0)).unwrap()
    }

    #[test]
    fn norms_of_coordinate_functions() {
        let sub = SampledSubspace::identity(8, 1.0, 1.5).unwrap();
        let mut e = vec![0.0; 8];
        e[3] = 1.0;
        assert_relative_eq!(sub.lr_norm(&e).unwrap(), 0.125, epsilon = 1e-15);
        assert_relative_eq!(sub.ls_norm(&e).unwrap(), 0.125f64.powf(1.0 / 1.5), epsilon = 1e-15);
        let c = SampledSubspace::constants(10, 0.5, 0.8).unwrap();
        assert_relative_eq!(lr_norm(&[-2.0], &c).unwrap(), 2.0, epsilon = 1e-14);
        assert!(sub.lr_norm(&[1.0]).is_err());
    }

    #[test]
    fn rejects_bad_subspaces() {
        let dup = vec![vec![1.0, 2.0], vec![3.0, 6.0], vec![-1.0, -2.0]];
        let mu = vec![0.5, 0.25, 0.25];
        assert!(matches!(
            SampledSubspace::new(dup, mu.clone(), 1.0, 1.5),
            Err(Error::InvalidSubspace(_))
        ));
        let ok = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        assert!(SampledSubspace::new(ok.clone(), mu.clone(), 1.0, 1.5).is_ok());
        assert!(SampledSubspace::new(ok.clone(), mu.clone(), 1.0, 1.0).is_err());
        assert!(SampledSubspace::new(ok.clone(), mu.clone(), 1.0, 2.5).is_err());
        assert!(SampledSubspace::new(ok.clone(), mu.clone(), 2.5, 4.0).is_err());
        assert!(SampledSubspace::new(ok.clone(), vec![0.5, 0.25, 0.3], 1.0, 1.5).is_err());
        // rank is measured on the support of mu
        assert!(SampledSubspace::new(ok, vec![0.5, 0.5, 0.0], 1.0, 1.5).is_ok());
        let zero_row = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        assert!(SampledSubspace::new(zero_row, vec![0.0, 0.0, 1.0], 1.0, 1.5).is_err());
    }

    #[test]
    fn file_round_trip() {
        let sub = gaussian(3, 20, 1.0, 1.8, 1);
        let text = serde_json::to_string(&sub.to_file()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub.json");
        std::fs::write(&path, text).unwrap();
        assert_eq!(SampledSubspace::from_file(&path).unwrap(), sub);
        assert!(SampledSubspace::from_file(&dir.path().join("missing.json")).is_err());
    }

    #[test]
    fn k_of_identity_and_constants() {
        for (big_n, r, s) in [(6usize, 1.0, 1.5), (10, 0.5, 0.9), (5, 1.5, 2.5)] {
            let sub = SampledSubspace::identity(big_n, r, s).unwrap();
            let want = (big_n as f64).powf(1.0 / sub.r() - 1.0 / sub.s());
            let k = estimate_k(&sub, 32, 9).unwrap();
            assert_relative_eq!(k, want, max_relative = 1e-12);
        }
        let c = SampledSubspace::constants(30, 1.0, 1.5).unwrap();
        assert_eq!(estimate_k(&c, 8, 0).unwrap(), 1.0);
        assert!(estimate_k(&c, 0, 0).is_err());
    }

    #[test]
    fn k_is_a_lower_bound_that_dominates_samples() {
        let sub = gaussian(3, 200, 1.0, 1.5, 2);
        let k = estimate_k(&sub, 64, 3).unwrap();
        assert!(k >= 1.0);
        for i in 0..200 {
            let x = gaussian_direction(3, &mut stream(77, "k-check", i));
            let ratio = sub.ls_norm(&x).unwrap() / sub.lr_norm(&x).unwrap();
            assert!(ratio <= k * (1.0 + 1e-6), "{ratio} > {k}");
        }
    }

    #[test]
    fn split_examples() {
        let sub = SampledSubspace::new(vec![vec![1.0], vec![2.0]], vec![0.75, 0.25], 1.0, 1.5).unwrap();
        let (out, rep) = split_atoms(&sub, 0.25).unwrap();
        assert_eq!(rep.copies, vec![3, 1]);
        assert_eq!(out.n_atoms(), 4);
        assert_eq!(out.mu(), &[0.25, 0.25, 0.25, 0.25]);
        assert_eq!(rep.max_atom, 0.25);
        assert!(rep.size_within_2m && rep.atoms_within_2_over_n);

        let g = gaussian(2, 16, 1.0, 1.5, 4);
        let (same, rep) = split_atoms(&g, 1.0 / 16.0).unwrap();
        assert_eq!(same, g);
        assert_eq!(rep.n_after, 16);
        assert!(split_atoms(&g, 0.0).is_err());
    }

    #[test]
    fn split_preserves_norms() {
        let mut rng = stream(5, "split-mu", 0);
        let raw: Vec<f64> = (0..12).map(|_| rng.random::<f64>().powi(3)).collect();
        let mu = renormalize(raw);
        let basis: Vec<Vec<f64>> = (0..12).map(|_| gaussian_direction(3, &mut rng)).collect();
        let sub = SampledSubspace::new(basis, mu, 0.7, 1.2).unwrap();
        let (out, rep) = split_atoms(&sub, 1.0 / 12.0).unwrap();
        assert!(rep.max_atom <= 1.0 / 12.0);
        assert!(rep.size_within_2m && rep.atoms_within_2_over_n);
        for i in 0..20 {
            let x = gaussian_direction(3, &mut stream(6, "split-x", i));
            for u in [0.7, 1.2, 2.0] {
                assert_relative_eq!(out.norm_u(&x, u).unwrap(), sub.norm_u(&x, u).unwrap(), max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn delta_formula() {
        let (n, big_n, r, s, eps, c) = (3usize, 1000usize, 1.0, 1.5, 0.25, 1.0);
        let d = choose_delta_k(n, big_n, 1.2, r, s, eps, c).unwrap();
        assert_eq!(d.q, 1.5);
        assert_relative_eq!(d.p, 3.0, epsilon = 1e-15);
        let eta = eps.powf(3.0) / 8.0f64.ln();
        assert_relative_eq!(d.eta, eta, max_relative = 1e-14);
        let delta = (3.0 * 1.2f64.powi(3) / (eta * 1000.0)).cbrt();
        assert_relative_eq!(d.delta, delta, max_relative = 1e-12);
        assert_relative_eq!(d.k_target, 2000.0 * delta, max_relative = 1e-12);
        assert!(!d.too_small);
        // n = η N puts δ at exactly one
        let edge = choose_delta_k(4, 1, 1.0, 1.0, 1.5, 0.5, 4.0 * 4.0f64.ln() / 0.125).unwrap();
        assert_relative_eq!(edge.delta, 1.0, epsilon = 1e-12);
        assert_relative_eq!(edge.k_target, 2.0, epsilon = 1e-12);
        assert!(edge.too_small);
        assert!(choose_delta_k(3, 10, 1.0, 1.0, 1.5, 1.0, 1.0).is_err());
        assert!(choose_delta_k(3, 10, 1.0, 1.0, 2.5, 0.5, 1.0).is_err());
    }

    #[test]
    fn one_dimensional_net_is_antipodal() {
        let sub = gaussian(1, 50, 1.0, 1.5, 7);
        let net = build_net(&sub, 0.25, 1, &small_net()).unwrap();
        assert!(net.certified);
        assert_eq!(net.size, 2);
        let a = sub.values(&net.points[0]).unwrap();
        let b = sub.values(&net.points[1]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(*x, -*y, max_relative = 1e-12);
        }
        let wide = build_net(&gaussian(2, 40, 1.0, 1.5, 8), 2.5, 2, &small_net()).unwrap();
        assert_eq!(wide.size, 1);
        assert!(wide.certified);
    }

    #[test]
    fn net_covers_independent_probes() {
        for (r, s) in [(1.0, 1.5), (0.6, 1.0), (2.0, 3.0)] {
            let sub = gaussian(2, 120, r, s, 9);
            let net = build_net(&sub, 0.3, 3, &small_net()).unwrap();
            assert!(net.certified, "{r}: {} uncovered", net.uncovered);
            for x in &net.points {
                assert_relative_eq!(sub.lr_norm(x).unwrap(), 1.0, epsilon = 1e-10);
            }
            for i in 0..300 {
                let x = unit_direction(&sub, &mut stream(404, "independent", i));
                let best = net
                    .points
                    .iter()
                    .map(|z| {
                        let d: Vec<f64> = x.iter().zip(z).map(|(a, b)| a - b).collect();
                        sub.lr_norm(&d).unwrap()
                    })
                    .fold(f64::INFINITY, f64::min);
                assert!(best <= 0.3, "r = {r}: probe at {best}");
            }
        }
        assert!(build_net(&gaussian(7, 30, 1.0, 1.5, 1), 0.5, 0, &small_net()).is_err());
    }

    #[test]
    fn full_selection_has_unit_distortion() {
        let sub = gaussian(2, 64, 1.0, 1.5, 10);
        let net = build_net(&sub, 0.4, 4, &small_net()).unwrap();
        let t = select_and_certify(&sub, &net, 1.0, 0.4, 5).unwrap();
        assert_eq!(t.k, 64);
        assert_eq!(t.distortion, 1.0);
        assert_eq!(t.scale, 1.0);
        assert!(t.pass);
    }

    #[test]
    fn distortion_ignores_basis_scale() {
        let sub = gaussian(2, 300, 1.0, 1.5, 11);
        let big = sub.scaled(7.0).unwrap();
        let net = build_net(&sub, 0.3, 6, &small_net()).unwrap();
        let net7 = build_net(&big, 0.3, 6, &small_net()).unwrap();
        assert_eq!(net.size, net7.size);
        let a = select_and_certify(&sub, &net, 0.5, 0.3, 12).unwrap();
        let b = select_and_certify(&big, &net7, 0.5, 0.3, 12).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_relative_eq!(a.distortion, b.distortion, max_relative = 1e-9);
        assert_eq!(a.pass, b.pass);
    }

    #[test]
    fn empty_selection_fails_with_infinite_distortion() {
        let sub = gaussian(1, 4, 1.0, 1.5, 12);
        let net = build_net(&sub, 0.5, 0, &small_net()).unwrap();
        let c = Certifier::new(&sub, &net).unwrap();
        let t = (0..200)
            .map(|i| c.trial(0.05, 0.5, i).unwrap())
            .find(|t| t.k == 0)
            .unwrap();
        assert_eq!(t.distortion, f64::INFINITY);
        assert!(!t.pass);
        let mut bad = net.clone();
        bad.certified = false;
        assert!(matches!(Certifier::new(&sub, &bad), Err(Error::Hypothesis(_))));
    }

    #[test]
    fn selection_statistic_is_binomial() {
        let big_n = 64usize;
        let delta = 0.3;
        let trials = 20_000;
        let sub = SampledSubspace::constants(big_n, 1.0, 1.5).unwrap();
        let grid = [0.01, 0.05, 0.1, 0.15, 0.2];
        let rep = tail10_experiment(&sub, &[1.0], delta, trials, &grid, 1.0, 21).unwrap();
        let bin = Binomial::new(delta, big_n as u64).unwrap();
        for row in &rep.rows {
            let exact: f64 = (0..=big_n as u64)
                .filter(|&k| (k as f64 / big_n as f64 - delta).abs() > row.c)
                .map(|k| bin.pmf(k))
                .sum();
            let se = (exact * (1.0 - exact) / trials as f64).sqrt();
            assert!((row.exceed - exact).abs() <= 3.0 * se + 1e-12, "{row:?} vs {exact}");
            assert!(!row.violated);
        }
        assert!(rep.pass);
        assert!(rep.to_csv().starts_with("c,tail,bound,violated\n"));
    }

    #[test]
    fn tail_experiment_checks_hypotheses() {
        let heavy = SampledSubspace::new(
            vec![vec![1.0], vec![1.0], vec![1.0]],
            vec![0.8, 0.1, 0.1],
            1.0,
            1.5,
        )
        .unwrap();
        assert!(matches!(
            tail10_experiment(&heavy, &[1.0], 0.5, 10, &[0.1], 1.0, 0),
            Err(Error::Hypothesis(_))
        ));
        let c = SampledSubspace::constants(8, 1.0, 1.5).unwrap();
        assert!(tail10_experiment(&c, &[2.0], 0.5, 10, &[0.1], 1.0, 0).is_err());
        assert_relative_eq!(tail10_bound(0.5, 64, 1.0, 1.0, 3.0), 4.0 * (-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn uniform_density_is_an_isometry() {
        let mut rng = stream(13, "density", 0);
        let mu = renormalize((0..20).map(|i| if i % 5 == 0 { 0.0 } else { rng.random::<f64>() }).collect());
        let basis: Vec<Vec<f64>> = (0..20).map(|_| gaussian_direction(2, &mut rng)).collect();
        let sub = SampledSubspace::new(basis, mu, 1.0, 1.5).unwrap();
        let (out, k) = UniformDensity::default().provide(&sub, 0, 1).unwrap();
        assert_eq!(out.n_atoms(), 16);
        assert!(out.mu().iter().all(|&m| m == 1.0 / 16.0));
        assert!(k >= 1.0);
        for i in 0..10 {
            let x = gaussian_direction(2, &mut stream(14, "density-x", i));
            assert_relative_eq!(out.lr_norm(&x).unwrap(), sub.lr_norm(&x).unwrap(), max_relative = 1e-12);
        }
    }

    #[test]
    fn restriction_renormalizes() {
        let sub = gaussian(2, 10, 1.0, 1.5, 15);
        let (r, mass) = sub.restrict(&[0, 2, 4, 6, 8]).unwrap();
        assert_relative_eq!(mass, 0.5, epsilon = 1e-15);
        assert_eq!(r.n_atoms(), 5);
        assert!(r.mu().iter().all(|&m| (m - 0.2).abs() < 1e-15));
        assert!(sub.restrict(&[]).is_err());
    }

    #[test]
    fn iteration_shrinks_and_stays_within_budget() {
        let sub = gaussian(2, 600, 1.0, 1.5, 16);
        let opts = IterateOptions {
            net: small_net(),
            retries: 32,
        };
        let rep = iterate_embedding(&sub, 2, &[0.5], &UniformDensity::default(), 1.0, 17, &opts).unwrap();
        assert_eq!(rep.rounds.len(), 2);
        assert!(rep.sizes_decrease && rep.pass, "{rep:?}");
        assert_relative_eq!(rep.distortion_budget, 2.25, epsilon = 1e-15);
        assert_eq!(rep.rounds[1].n_in, rep.rounds[0].k);
        for r in &rep.rounds {
            assert!(r.attempts.last().unwrap().pass);
            assert!(r.choice.delta < 1.0);
        }
        let again = iterate_embedding(&sub, 2, &[0.5], &UniformDensity::default(), 1.0, 17, &opts).unwrap();
        assert_eq!(serde_json::to_string(&rep).unwrap(), serde_json::to_string(&again).unwrap());
        let csv = rep.to_csv();
        assert!(csv.starts_with("round,N,k,distortion\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn tiny_instance_rounds_are_noops() {
        let sub = gaussian(2, 20, 1.0, 1.5, 18);
        let rep = iterate_embedding(&sub, 2, &[0.5], &UniformDensity::default(), 1.0, 0, &IterateOptions::default()).unwrap();
        assert!(rep.rounds.iter().all(|r| r.noop && r.k == 20));
        assert!(!rep.sizes_decrease);
        assert_eq!(rep.cumulative_distortion, 1.0);
    }

    #[test]
    fn delta_identities_on_random_inputs() {
        let mut rng = stream(19, "delta-identities", 0);
        for _ in 0..200 {
            let n = rng.random_range(1..7usize);
            let big_n = rng.random_range(10..100_000usize);
            let k = 1.0 + 3.0 * rng.random::<f64>();
            let r = 0.2 + 1.8 * rng.random::<f64>();
            let s = r * (1.05 + 0.95 * rng.random::<f64>());
            let eps = 0.05 + 0.9 * rng.random::<f64>();
            let c = 0.5 + 8.0 * rng.random::<f64>();
            let d = choose_delta_k(n, big_n, k, r, s, eps, c).unwrap();
            let nn = big_n as f64;
            assert_relative_eq!(d.k_target, 2.0 * nn * d.delta, max_relative = 1e-12);
            let back = d.eta * d.delta.powf(d.p) * nn / k.powf(r * d.p);
            assert_relative_eq!(back, n as f64, max_relative = 1e-12);
            let closed = 2.0 * d.eta.powf(-1.0 / d.p) * (n as f64).powf(1.0 / d.p) * nn.powf(1.0 / d.q) * k.powf(r);
            assert_relative_eq!(d.k_target, closed, max_relative = 1e-10);
        }
    }

    #[test]
    fn delta_scaling_in_n_atoms() {
        let a = choose_delta_k(4, 1000, 1.3, 1.0, 1.5, 0.25, 1.0).unwrap();
        let b = choose_delta_k(4, 8000, 1.3, 1.0, 1.5, 0.25, 1.0).unwrap();
        assert_relative_eq!(b.delta, a.delta / 2.0, max_relative = 1e-12);
        assert_relative_eq!(b.k_target, a.k_target * 4.0, max_relative = 1e-12);
    }

    #[test]
    fn planar_net_is_small() {
        let sub = gaussian(2, 500, 1.0, 1.5, 20);
        let net = build_net(&sub, 0.5, 21, &NetOptions::default()).unwrap();
        assert!(net.certified);
        assert!(net.size <= 36, "{}", net.size);
        assert_eq!(net.probe_count, 10_000);
    }

    #[test]
    fn constants_pass_frequency_is_binomial() {
        let big_n = 128usize;
        let (delta, eps) = (0.5, 0.2);
        let sub = SampledSubspace::constants(big_n, 1.0, 1.5).unwrap();
        let net = build_net(&sub, eps, 0, &small_net()).unwrap();
        let cert = Certifier::new(&sub, &net).unwrap();
        let trials = 10_000;
        let passed = (0..trials).filter(|&i| cert.trial(delta, eps, i).unwrap().pass).count();
        let bin = Binomial::new(delta, big_n as u64).unwrap();
        let exact: f64 = (0..=big_n as u64)
            .filter(|&k| (k as f64 / big_n as f64 - delta).abs() <= eps * delta)
            .map(|k| bin.pmf(k))
            .sum();
        let freq = passed as f64 / trials as f64;
        let se = (exact * (1.0 - exact) / trials as f64).sqrt();
        assert!((freq - exact).abs() <= 3.0 * se, "{freq} vs {exact}");
    }
}
