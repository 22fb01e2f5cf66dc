//! Finite product probability spaces `Ω = Ω_1 × … × Ω_n` sitting inside the
//! block-`ℓ_p` sum of small normed spaces, with exact enumeration.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{compensated_sum, CompensatedSum};

/// Default ceiling on `|Ω|` for exhaustive enumeration.
pub const DEFAULT_OUTCOME_CAP: u64 = 1 << 20;

const PROB_SUM_TOL: f64 = 1e-12;
const DIAMETER_TOL: f64 = 1e-12;

/// Norm carried by a block. In one dimension all three coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockNorm {
    #[serde(rename = "L1")]
    L1,
    #[serde(rename = "L2")]
    L2,
    #[serde(rename = "LINF")]
    LInf,
}

impl BlockNorm {
    pub const ALL: [BlockNorm; 3] = [BlockNorm::L1, BlockNorm::L2, BlockNorm::LInf];

    pub fn norm(self, v: &[f64]) -> f64 {
        match self {
            BlockNorm::L1 => v.iter().map(|x| x.abs()).sum(),
            BlockNorm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            BlockNorm::LInf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    pub fn dual(self) -> BlockNorm {
        match self {
            BlockNorm::L1 => BlockNorm::LInf,
            BlockNorm::L2 => BlockNorm::L2,
            BlockNorm::LInf => BlockNorm::L1,
        }
    }

    pub fn dual_norm(self, v: &[f64]) -> f64 {
        self.dual().norm(v)
    }

    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            BlockNorm::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            BlockNorm::L2 => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            BlockNorm::LInf => a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs())),
        }
    }
}

impl fmt::Display for BlockNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockNorm::L1 => "L1",
            BlockNorm::L2 => "L2",
            BlockNorm::LInf => "LINF",
        })
    }
}

/// One factor `Ω_i` with its measure `P_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpace {
    pub points: Vec<Vec<f64>>,
    pub norm: BlockNorm,
    pub probs: Vec<f64>,
}

impl BlockSpace {
    pub fn new(points: Vec<Vec<f64>>, norm: BlockNorm, probs: Vec<f64>) -> Self {
        Self {
            points,
            norm,
            probs,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    /// Largest pairwise distance under the block norm.
    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                if a.len() == b.len() {
                    d = d.max(self.norm.distance(a, b));
                }
            }
        }
        d
    }
}

/// `Ω = Ω_1 × … × Ω_n` with the product measure; `outer_p` combines the
/// block norms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductSpace {
    pub blocks: Vec<BlockSpace>,
    pub outer_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockDiagnostics {
    pub index: usize,
    pub points: usize,
    pub dim: usize,
    pub diameter: f64,
    pub prob_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpaceDiagnostics {
    pub blocks: Vec<BlockDiagnostics>,
    /// `None` when the product overflows `u64`.
    pub outcome_count: Option<u64>,
    pub violations: Vec<String>,
}

impl SpaceDiagnostics {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Report every invariant violation of `space`. Never fails.
pub fn validate_space(space: &ProductSpace) -> SpaceDiagnostics {
    let mut violations = Vec::new();
    if !(space.outer_p >= 2.0 && space.outer_p.is_finite()) {
        violations.push(format!("outer_p = {} must be finite and >= 2", space.outer_p));
    }
    if space.blocks.is_empty() {
        violations.push("space has no blocks".to_string());
    }
    let mut blocks = Vec::with_capacity(space.blocks.len());
    for (i, b) in space.blocks.iter().enumerate() {
        if b.points.is_empty() {
            violations.push(format!("block {i}: no points"));
        }
        let dim = b.dim();
        if b.points.iter().any(|p| p.len() != dim) {
            violations.push(format!("block {i}: points have differing dimensions"));
        }
        if dim == 0 && !b.points.is_empty() {
            violations.push(format!("block {i}: zero-dimensional points"));
        }
        if b.points.iter().flatten().any(|x| !x.is_finite()) {
            violations.push(format!("block {i}: non-finite coordinate"));
        }
        if b.probs.len() != b.points.len() {
            violations.push(format!(
                "block {i}: {} probabilities for {} points",
                b.probs.len(),
                b.points.len()
            ));
        }
        if b.probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            violations.push(format!("block {i}: negative or non-finite probability"));
        }
        let prob_sum = compensated_sum(b.probs.iter().copied());
        if (prob_sum - 1.0).abs() > PROB_SUM_TOL {
            violations.push(format!("block {i}: probabilities sum to {prob_sum}, not 1"));
        }
        let diameter = b.diameter();
        if diameter > 1.0 + DIAMETER_TOL {
            violations.push(format!("block {i}: diameter {diameter} exceeds 1"));
        }
        blocks.push(BlockDiagnostics {
            index: i,
            points: b.points.len(),
            dim,
            diameter,
            prob_sum,
        });
    }
    let outcome_count = space.outcome_count();
    if outcome_count.is_none() {
        violations.push("outcome count overflows u64".to_string());
    }
    SpaceDiagnostics {
        blocks,
        outcome_count,
        violations,
    }
}

impl ProductSpace {
    pub fn new(blocks: Vec<BlockSpace>, outer_p: f64) -> Self {
        Self { blocks, outer_p }
    }

    /// Same space with a different outer exponent.
    pub fn with_outer_p(&self, outer_p: f64) -> Self {
        Self {
            blocks: self.blocks.clone(),
            outer_p,
        }
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let d = validate_space(self);
        if d.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidSpace(d.violations.join("; ")))
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn outcome_count(&self) -> Option<u64> {
        self.blocks
            .iter()
            .try_fold(1u64, |acc, b| acc.checked_mul(b.points.len() as u64))
    }

    /// `|Ω|` as a `usize`, failing above `cap`.
    pub fn checked_count(&self, cap: u64) -> Result<usize> {
        match self.outcome_count() {
            Some(c) if c <= cap => Ok(c as usize),
            Some(c) => Err(Error::CapExceeded {
                count: c.to_string(),
                cap,
            }),
            None => Err(Error::CapExceeded {
                count: "overflow".to_string(),
                cap,
            }),
        }
    }

    pub fn ambient_dim(&self) -> usize {
        self.blocks.iter().map(BlockSpace::dim).sum()
    }

    pub fn radices(&self) -> Vec<usize> {
        self.blocks.iter().map(BlockSpace::len).collect()
    }

    pub fn weight(&self, t: &Outcome) -> f64 {
        self.blocks
            .iter()
            .zip(&t.0)
            .map(|(b, &k)| b.probs[k])
            .product()
    }

    /// Mixed-radix index, first block most significant (lexicographic order).
    pub fn index_of(&self, t: &Outcome) -> usize {
        self.blocks
            .iter()
            .zip(&t.0)
            .fold(0usize, |acc, (b, &k)| acc * b.points.len() + k)
    }

    pub fn outcome_at(&self, mut index: usize) -> Outcome {
        let mut idx = vec![0; self.blocks.len()];
        for (slot, b) in idx.iter_mut().zip(&self.blocks).rev() {
            *slot = index % b.points.len();
            index /= b.points.len();
        }
        Outcome(idx)
    }

    pub fn check_outcome(&self, t: &Outcome) -> Result<()> {
        if t.0.len() != self.blocks.len() {
            return Err(Error::InvalidEvent(format!(
                "outcome {t} has {} indices, space has {} blocks",
                t.0.len(),
                self.blocks.len()
            )));
        }
        for (i, (b, &k)) in self.blocks.iter().zip(&t.0).enumerate() {
            if k >= b.points.len() {
                return Err(Error::InvalidEvent(format!(
                    "outcome {t}: index {k} out of range for block {i} ({} points)",
                    b.points.len()
                )));
            }
        }
        Ok(())
    }

    /// Concatenated block coordinates of `t`.
    pub fn coordinates(&self, t: &Outcome) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.ambient_dim());
        for (b, &k) in self.blocks.iter().zip(&t.0) {
            out.extend_from_slice(&b.points[k]);
        }
        out
    }

    /// Block-`ℓ_p` norm of an ambient vector, with `p` given explicitly.
    pub fn mixed_norm_p(&self, v: &[f64], p: f64) -> f64 {
        let mut off = 0;
        let mut acc = 0.0;
        for b in &self.blocks {
            let d = b.dim();
            acc += crate::numeric::abs_pow(b.norm.norm(&v[off..off + d]), p);
            off += d;
        }
        acc.powf(1.0 / p)
    }

    pub fn mixed_norm(&self, v: &[f64]) -> f64 {
        self.mixed_norm_p(v, self.outer_p)
    }

    /// Iterate outcomes in lexicographic order with their product weights.
    /// Draw one outcome from the product measure.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Outcome {
        Outcome(
            self.blocks
                .iter()
                .map(|b| {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    for (k, &w) in b.probs.iter().enumerate() {
                        acc += w;
                        if u < acc {
                            return k;
                        }
                    }
                    b.probs.iter().rposition(|&w| w > 0.0).unwrap_or(0)
                })
                .collect(),
        )
    }

    pub fn outcomes(&self, cap: u64) -> Result<Outcomes<'_>> {
        self.ensure_valid()?;
        let total = self.checked_count(cap)?;
        Ok(Outcomes {
            space: self,
            current: vec![0; self.blocks.len()],
            remaining: total,
        })
    }
}

/// `t = (t_1, …, t_n)`: one point index per block.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Outcome(pub Vec<usize>);

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, k) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{k}")?;
        }
        write!(f, ")")
    }
}

impl From<Vec<usize>> for Outcome {
    fn from(v: Vec<usize>) -> Self {
        Outcome(v)
    }
}

/// A subset `A ⊆ Ω`, kept sorted and deduplicated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<Outcome>", into = "Vec<Outcome>")]
pub struct Event {
    outcomes: Vec<Outcome>,
}

impl From<Vec<Outcome>> for Event {
    fn from(v: Vec<Outcome>) -> Self {
        Event::new(v)
    }
}

impl From<Event> for Vec<Outcome> {
    fn from(e: Event) -> Self {
        e.outcomes
    }
}

impl Event {
    pub fn new(mut outcomes: Vec<Outcome>) -> Self {
        outcomes.sort();
        outcomes.dedup();
        Self { outcomes }
    }

    pub fn empty() -> Self {
        Self {
            outcomes: Vec::new(),
        }
    }

    /// The whole space.
    pub fn full(space: &ProductSpace, cap: u64) -> Result<Self> {
        let n = space.checked_count(cap)?;
        Ok(Self::from_indices(space, 0..n))
    }

    /// Build from mixed-radix indices.
    pub fn from_indices<I: IntoIterator<Item = usize>>(space: &ProductSpace, idx: I) -> Self {
        Self::new(idx.into_iter().map(|i| space.outcome_at(i)).collect())
    }

    pub fn outcomes(&self) -> &[Outcome] {
        &self.outcomes
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn contains(&self, t: &Outcome) -> bool {
        self.outcomes.binary_search(t).is_ok()
    }

    pub fn validate(&self, space: &ProductSpace) -> Result<()> {
        self.outcomes.iter().try_for_each(|t| space.check_outcome(t))
    }

    /// Membership mask over mixed-radix indices.
    pub fn mask(&self, space: &ProductSpace, cap: u64) -> Result<Vec<bool>> {
        let n = space.checked_count(cap)?;
        let mut mask = vec![false; n];
        for t in &self.outcomes {
            mask[space.index_of(t)] = true;
        }
        Ok(mask)
    }

    pub fn complement(&self, space: &ProductSpace, cap: u64) -> Result<Self> {
        self.validate(space)?;
        let mask = self.mask(space, cap)?;
        Ok(Self::from_indices(
            space,
            mask.iter().enumerate().filter(|(_, &m)| !m).map(|(i, _)| i),
        ))
    }

    pub fn is_subset_of(&self, other: &Event) -> bool {
        self.outcomes.iter().all(|t| other.contains(t))
    }
}

/// Lexicographic outcome stream; see [`ProductSpace::outcomes`].
pub struct Outcomes<'a> {
    space: &'a ProductSpace,
    current: Vec<usize>,
    remaining: usize,
}

impl Iterator for Outcomes<'_> {
    type Item = (Outcome, f64);

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let t = Outcome(self.current.clone());
        let w = self.space.weight(&t);
        for (slot, b) in self.current.iter_mut().zip(&self.space.blocks).rev() {
            *slot += 1;
            if *slot < b.points.len() {
                break;
            }
            *slot = 0;
        }
        Some((t, w))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl ExactSizeIterator for Outcomes<'_> {}

pub fn enumerate_outcomes(space: &ProductSpace, cap: u64) -> Result<Outcomes<'_>> {
    space.outcomes(cap)
}

/// `n` copies of `{0, 1} ⊂ ℝ` with weights `(1 − η, η)`.
pub fn bernoulli_cube(n: usize, eta: f64) -> Result<ProductSpace> {
    if n == 0 {
        return Err(Error::InvalidArgument("cube needs at least one block".into()));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidArgument(format!("eta = {eta} outside [0, 1]")));
    }
    let block = BlockSpace::new(vec![vec![0.0], vec![1.0]], BlockNorm::L2, vec![1.0 - eta, eta]);
    Ok(ProductSpace::new(vec![block; n], 2.0))
}

/// Exact product-measure probability of `event`.
pub fn event_probability(space: &ProductSpace, event: &Event) -> Result<f64> {
    event.validate(space)?;
    let mut acc = CompensatedSum::new();
    for t in event.outcomes() {
        acc.add(space.weight(t));
    }
    Ok(acc.value())
}

/// Parameters for [`random_space`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RandomSpaceParams {
    pub min_blocks: usize,
    pub max_blocks: usize,
    pub min_points: usize,
    pub max_points: usize,
    pub max_dim: usize,
    pub max_outcomes: u64,
    pub outer_p: f64,
}

impl Default for RandomSpaceParams {
    fn default() -> Self {
        Self {
            min_blocks: 1,
            max_blocks: 7,
            min_points: 2,
            max_points: 3,
            max_dim: 3,
            max_outcomes: 1 << 14,
            outer_p: 2.0,
        }
    }
}

/// Random valid space: mixed norm tags, points rescaled to a diameter in
/// `[0.5, 1]`, probabilities bounded away from zero.
pub fn random_space<R: Rng>(params: &RandomSpaceParams, rng: &mut R) -> ProductSpace {
    let n_blocks = rng.random_range(params.min_blocks..=params.max_blocks);
    let mut blocks = Vec::with_capacity(n_blocks);
    let mut count: u64 = 1;
    for _ in 0..n_blocks {
        let mut m = rng.random_range(params.min_points..=params.max_points);
        while m > params.min_points && count * m as u64 > params.max_outcomes {
            m -= 1;
        }
        if count * m as u64 > params.max_outcomes {
            break;
        }
        count *= m as u64;
        let d = rng.random_range(1..=params.max_dim);
        let norm = BlockNorm::ALL[rng.random_range(0..3)];
        let mut points: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..d).map(|_| rng.random::<f64>()).collect())
            .collect();
        for k in 0..d {
            let lo = points.iter().map(|x| x[k]).fold(f64::INFINITY, f64::min);
            for x in points.iter_mut() {
                x[k] -= lo;
            }
        }
        let diam = BlockSpace::new(points.clone(), norm, vec![]).diameter();
        if diam > 0.0 {
            let target = rng.random_range(0.5..=1.0);
            for x in points.iter_mut().flatten() {
                *x *= target / diam;
            }
        }
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let probs = raw.iter().map(|w| w / total).collect();
        blocks.push(BlockSpace::new(points, norm, probs));
    }
    if blocks.is_empty() {
        blocks.push(BlockSpace::new(vec![vec![0.0], vec![1.0]], BlockNorm::L2, vec![0.5, 0.5]));
    }
    ProductSpace::new(blocks, params.outer_p)
}

/// Each outcome kept independently with probability ½; redrawn if empty.
pub fn random_event<R: Rng>(space: &ProductSpace, cap: u64, rng: &mut R) -> Result<Event> {
    let n = space.checked_count(cap)?;
    loop {
        let idx: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
        if !idx.is_empty() {
            return Ok(Event::from_indices(space, idx));
        }
    }
}
