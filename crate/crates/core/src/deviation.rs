//! Deviation of convex Lipschitz functions on a product space from their
//! median and mean, compared against the exponential tail bounds
//!
//! ```text
//! P(|f − M_f| > c) ≤ 4 exp(−c^p / (4 σ_p^p))
//! P(|f − E f| > c) ≤ K exp(−δ c^p / σ_p^p),   K = 8, δ = 1/32
//! ```
//!
//! where `σ_p` is the Lipschitz constant of `f` for the mixed norm
//! `(Σ ‖x_i‖_i^p)^{1/p}`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{abs_pow, compensated_sum, sig17, CompensatedSum};
use crate::product_space::{Outcome, ProductSpace, DEFAULT_OUTCOME_CAP};
use crate::rng::stream;

/// Relative slack when comparing enumerated masses and grouping tied values.
const MASS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinePiece {
    pub coeffs: Vec<Vec<f64>>,
    pub offset: f64,
}

/// A convex function on `conv Ω`, given block by block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConvexFnSpec {
    /// `Σ_i ⟨c_i, x_i⟩`.
    Linear { coeffs: Vec<Vec<f64>> },
    /// `(Σ_i ‖x_i − z_i‖_i^e)^{1/e}` with `e ≥ 1`.
    DistanceToPoint { point: Vec<Vec<f64>>, exponent: f64 },
    /// `max_k (Σ_i ⟨c_{k,i}, x_i⟩ + b_k)`.
    MaxAffine { pieces: Vec<AffinePiece> },
}

fn check_blocks(space: &ProductSpace, v: &[Vec<f64>], what: &str) -> Result<()> {
    if v.len() != space.n_blocks() {
        return Err(Error::InvalidArgument(format!(
            "{what} has {} blocks, space has {}",
            v.len(),
            space.n_blocks()
        )));
    }
    for (b, c) in space.blocks.iter().zip(v) {
        if c.len() != b.dim() {
            return Err(Error::DimensionMismatch {
                expected: b.dim(),
                got: c.len(),
            });
        }
        if c.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!("{what} has a non-finite entry")));
        }
    }
    Ok(())
}

fn linear_at(coeffs: &[Vec<f64>], space: &ProductSpace, t: &Outcome) -> f64 {
    compensated_sum(space.blocks.iter().zip(coeffs).zip(&t.0).flat_map(|((b, c), &k)| {
        c.iter().zip(&b.points[k]).map(|(a, x)| a * x)
    }))
}

/// `(Σ ‖c_i‖_{i,*}^q)^{1/q}` with `q = p/(p − 1)`.
fn linear_lipschitz(coeffs: &[Vec<f64>], space: &ProductSpace) -> f64 {
    let p = space.outer_p;
    let q = p / (p - 1.0);
    let acc = compensated_sum(
        space
            .blocks
            .iter()
            .zip(coeffs)
            .map(|(b, c)| abs_pow(b.norm.dual_norm(c), q)),
    );
    acc.powf(1.0 / q)
}

impl ConvexFnSpec {
    pub fn validate(&self, space: &ProductSpace) -> Result<()> {
        match self {
            ConvexFnSpec::Linear { coeffs } => check_blocks(space, coeffs, "linear coefficients"),
            ConvexFnSpec::DistanceToPoint { point, exponent } => {
                check_blocks(space, point, "reference point")?;
                if !(*exponent >= 1.0 && exponent.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "distance exponent {exponent} must be finite and >= 1"
                    )));
                }
                for (i, (b, z)) in space.blocks.iter().zip(point).enumerate() {
                    for (k, &zk) in z.iter().enumerate() {
                        let lo = b.points.iter().map(|x| x[k]).fold(f64::INFINITY, f64::min);
                        let hi = b.points.iter().map(|x| x[k]).fold(f64::NEG_INFINITY, f64::max);
                        if zk < lo || zk > hi {
                            return Err(Error::InvalidArgument(format!(
                                "reference coordinate {zk} of block {i} outside [{lo}, {hi}]"
                            )));
                        }
                    }
                }
                Ok(())
            }
            ConvexFnSpec::MaxAffine { pieces } => {
                if pieces.is_empty() {
                    return Err(Error::InvalidArgument("max-affine with no pieces".into()));
                }
                for piece in pieces {
                    check_blocks(space, &piece.coeffs, "affine coefficients")?;
                    if !piece.offset.is_finite() {
                        return Err(Error::InvalidArgument("non-finite affine offset".into()));
                    }
                }
                Ok(())
            }
        }
    }

    /// `f(t)`. Assumes [`ConvexFnSpec::validate`] passed.
    pub fn eval(&self, space: &ProductSpace, t: &Outcome) -> f64 {
        match self {
            ConvexFnSpec::Linear { coeffs } => linear_at(coeffs, space, t),
            ConvexFnSpec::DistanceToPoint { point, exponent } => {
                let acc = compensated_sum(space.blocks.iter().zip(point).zip(&t.0).map(
                    |((b, z), &k)| abs_pow(b.norm.distance(&b.points[k], z), *exponent),
                ));
                acc.powf(1.0 / exponent)
            }
            ConvexFnSpec::MaxAffine { pieces } => pieces
                .iter()
                .map(|pc| linear_at(&pc.coeffs, space, t) + pc.offset)
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }

    pub fn family(&self) -> FnFamily {
        match self {
            ConvexFnSpec::Linear { .. } => FnFamily::Linear,
            ConvexFnSpec::DistanceToPoint { .. } => FnFamily::DistanceToPoint,
            ConvexFnSpec::MaxAffine { .. } => FnFamily::MaxAffine,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FnFamily {
    Linear,
    DistanceToPoint,
    MaxAffine,
}

impl FnFamily {
    pub const ALL: [FnFamily; 3] = [FnFamily::Linear, FnFamily::DistanceToPoint, FnFamily::MaxAffine];
}

/// Exact Lipschitz constant of `f` for the mixed norm with exponent
/// `space.outer_p`.
///
/// For a distance with exponent `e < p` over `n` blocks the constant is
/// `n^{1/e − 1/p}`, the norm of the identity from `ℓ_p^n` to `ℓ_e^n`.
pub fn lipschitz_p(f: &ConvexFnSpec, space: &ProductSpace) -> Result<f64> {
    f.validate(space)?;
    Ok(match f {
        ConvexFnSpec::Linear { coeffs } => linear_lipschitz(coeffs, space),
        ConvexFnSpec::DistanceToPoint { exponent, .. } => {
            let p = space.outer_p;
            if *exponent >= p {
                1.0
            } else {
                (space.n_blocks() as f64).powf(1.0 / exponent - 1.0 / p)
            }
        }
        ConvexFnSpec::MaxAffine { pieces } => pieces
            .iter()
            .map(|pc| linear_lipschitz(&pc.coeffs, space))
            .fold(0.0, f64::max),
    })
}

/// Lower median and mean of a weighted sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Center {
    pub median: f64,
    pub mean: f64,
}

/// Values within `MASS_TOL` (relative) of each other count as one atom, so
/// rounding in `f` cannot split a tie.
fn weighted_center(mut values: Vec<(f64, f64)>) -> Center {
    values.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total = compensated_sum(values.iter().map(|v| v.1));
    let mean = compensated_sum(values.iter().map(|v| v.0 * v.1)) / total;
    let mut below = CompensatedSum::new();
    let mut i = 0;
    let mut median = values.last().map_or(0.0, |v| v.0);
    while i < values.len() {
        let m = values[i].0;
        let mut j = i;
        while j < values.len() && values[j].0 - m <= MASS_TOL * m.abs().max(1.0) {
            below.add(values[j].1);
            j += 1;
        }
        if below.value() >= (0.5 - MASS_TOL) * total {
            median = m;
            break;
        }
        i = j;
    }
    Center { median, mean }
}

/// Exact lower median and mean of `f` under the product measure.
pub fn exact_center(space: &ProductSpace, f: &ConvexFnSpec, cap: u64) -> Result<Center> {
    space.ensure_valid()?;
    f.validate(space)?;
    let values = space
        .outcomes(cap)?
        .map(|(t, w)| (f.eval(space, &t), w))
        .collect();
    Ok(weighted_center(values))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CenterKind {
    #[default]
    Median,
    Mean,
}

/// Options for [`tail_vs_bound`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TailOptions {
    pub center: CenterKind,
    /// `0` enumerates `Ω` exactly.
    pub mc_trials: usize,
    pub seed: u64,
    /// Prefactor of the mean bound.
    pub mean_k: f64,
    /// Exponent constant of the mean bound.
    pub mean_delta: f64,
    pub cap: u64,
}

impl Default for TailOptions {
    fn default() -> Self {
        Self {
            center: CenterKind::Median,
            mc_trials: 0,
            seed: 0,
            mean_k: 8.0,
            mean_delta: 1.0 / 32.0,
            cap: DEFAULT_OUTCOME_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub c: f64,
    pub tail: f64,
    pub bound: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub family: FnFamily,
    pub exponent: f64,
    pub sigma_p: f64,
    pub median: f64,
    pub mean: f64,
    pub center_kind: CenterKind,
    /// Whether median and mean come from enumeration rather than the sample.
    pub center_exact: bool,
    pub mc_trials: usize,
    pub seed: u64,
    pub rows: Vec<TailRow>,
    pub pass: bool,
}

impl DeviationReport {
    pub fn center(&self) -> f64 {
        match self.center_kind {
            CenterKind::Median => self.median,
            CenterKind::Mean => self.mean,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("c,tail,bound,violated\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                sig17(r.c),
                sig17(r.tail),
                sig17(r.bound),
                r.violated
            ));
        }
        out
    }
}

/// The bound for `center` at deviation `c`. A zero Lipschitz constant means
/// `f` is constant, and the bound degenerates to 0.
pub fn tail_bound(center: CenterKind, c: f64, sigma: f64, p: f64, opts: &TailOptions) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let x = abs_pow(c / sigma, p);
    match center {
        CenterKind::Median => 4.0 * (-x / 4.0).exp(),
        CenterKind::Mean => opts.mean_k * (-opts.mean_delta * x).exp(),
    }
}

/// Tail of `|f − center|` on `c_grid`, computed exactly or by seeded
/// sampling, against the matching bound. Monte Carlo rows are flagged only
/// when `tail − 3 √(tail / trials)` still exceeds the bound.
pub fn tail_vs_bound(
    space: &ProductSpace,
    f: &ConvexFnSpec,
    c_grid: &[f64],
    opts: &TailOptions,
) -> Result<DeviationReport> {
    space.ensure_valid()?;
    f.validate(space)?;
    if c_grid.is_empty() {
        return Err(Error::InvalidArgument("empty c grid".into()));
    }
    if c_grid.iter().any(|c| !(*c > 0.0 && c.is_finite())) || c_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(
            "c grid must be positive and strictly ascending".into(),
        ));
    }
    let sigma = lipschitz_p(f, space)?;
    let p = space.outer_p;

    let (values, center, center_exact) = if opts.mc_trials == 0 {
        let values: Vec<(f64, f64)> = space
            .outcomes(opts.cap)?
            .map(|(t, w)| (f.eval(space, &t), w))
            .collect();
        let center = weighted_center(values.clone());
        (values, center, true)
    } else {
        let values: Vec<(f64, f64)> = (0..opts.mc_trials)
            .map(|i| {
                let t = space.sample(&mut stream(opts.seed, "deviation", i as u64));
                (f.eval(space, &t), 1.0)
            })
            .collect();
        match exact_center(space, f, opts.cap) {
            Ok(c) => (values, c, true),
            Err(Error::CapExceeded { .. }) => {
                let c = weighted_center(values.clone());
                (values, c, false)
            }
            Err(e) => return Err(e),
        }
    };
    let m = match opts.center {
        CenterKind::Median => center.median,
        CenterKind::Mean => center.mean,
    };

    // sorted deviations with suffix masses give every tail in one pass
    let mut dev: Vec<(f64, f64)> = values.iter().map(|&(v, w)| ((v - m).abs(), w)).collect();
    dev.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total = compensated_sum(dev.iter().map(|d| d.1));
    let mut suffix = vec![0.0; dev.len() + 1];
    let mut acc = CompensatedSum::new();
    for i in (0..dev.len()).rev() {
        acc.add(dev[i].1);
        suffix[i] = acc.value();
    }

    let mut rows = Vec::with_capacity(c_grid.len());
    let mut pos = 0;
    for &c in c_grid {
        while pos < dev.len() && dev[pos].0 <= c {
            pos += 1;
        }
        let tail = (suffix[pos] / total).clamp(0.0, 1.0);
        let bound = tail_bound(opts.center, c, sigma, p, opts);
        let excess = if opts.mc_trials == 0 {
            tail
        } else {
            tail - 3.0 * (tail / opts.mc_trials as f64).sqrt()
        };
        rows.push(TailRow {
            c,
            tail,
            bound,
            violated: excess > bound,
        });
    }
    let pass = rows.iter().all(|r| !r.violated);
    Ok(DeviationReport {
        family: f.family(),
        exponent: p,
        sigma_p: sigma,
        median: center.median,
        mean: center.mean,
        center_kind: opts.center,
        center_exact,
        mc_trials: opts.mc_trials,
        seed: opts.seed,
        rows,
        pass,
    })
}

/// `n` evenly spaced points in `(0, hi]`.
pub fn c_grid(hi: f64, n: usize) -> Vec<f64> {
    (1..=n).map(|k| hi * k as f64 / n as f64).collect()
}

fn gaussian_blocks<R: Rng + ?Sized>(space: &ProductSpace, rng: &mut R) -> Vec<Vec<f64>> {
    space
        .blocks
        .iter()
        .map(|b| (0..b.dim()).map(|_| rng.sample(rand_distr::StandardNormal)).collect())
        .collect()
}

/// A random member of `family` valid for `space`: Gaussian coefficients,
/// a uniform reference point in the bounding box with exponent `outer_p`,
/// or the maximum of three Gaussian affine pieces.
pub fn random_convex_fn<R: Rng + ?Sized>(
    family: FnFamily,
    space: &ProductSpace,
    rng: &mut R,
) -> ConvexFnSpec {
    match family {
        FnFamily::Linear => ConvexFnSpec::Linear {
            coeffs: gaussian_blocks(space, rng),
        },
        FnFamily::DistanceToPoint => ConvexFnSpec::DistanceToPoint {
            point: space
                .blocks
                .iter()
                .map(|b| {
                    (0..b.dim())
                        .map(|k| {
                            let lo = b.points.iter().map(|x| x[k]).fold(f64::INFINITY, f64::min);
                            let hi = b.points.iter().map(|x| x[k]).fold(f64::NEG_INFINITY, f64::max);
                            lo + (hi - lo) * rng.random::<f64>()
                        })
                        .collect()
                })
                .collect(),
            exponent: space.outer_p,
        },
        FnFamily::MaxAffine => ConvexFnSpec::MaxAffine {
            pieces: (0..3)
                .map(|_| AffinePiece {
                    coeffs: gaussian_blocks(space, rng),
                    offset: rng.sample(rand_distr::StandardNormal),
                })
                .collect(),
        },
    }
}
