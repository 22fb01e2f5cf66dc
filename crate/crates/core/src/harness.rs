//! Config-driven runs behind the `conclab` binary.
//!
//! A run resolves a [`RunConfig`], executes one command, and writes
//! `<out>/<command>.json` plus CSV curves. Every report echoes the resolved
//! config and seed; the only nondeterministic field is `timestamp`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::deviation::{c_grid, random_convex_fn, tail_vs_bound, CenterKind, ConvexFnSpec, FnFamily, TailOptions};
use crate::error::{Error, Result};
use crate::inequality_lab::{
    base_case_scan, claim_scan, distance_profile, ineq7_scan, pointwise_exponent_excess,
    slice_inequalities_check, theorem1_from_profile,
};
use crate::product_space::{
    bernoulli_cube, random_event, random_space, Event, ProductSpace, RandomSpaceParams, DEFAULT_OUTCOME_CAP,
};
use crate::rng::{derive_seed, stream};
use crate::sparsify::{
    build_net, choose_delta_k, estimate_k, iterate_embedding, tail10_experiment, Certifier, DeltaChoice,
    IterateOptions, NetOptions, SampledSubspace, UniformDensity,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    VerifyTheorem1,
    Ledger,
    Deviation,
    Sparsify,
    Iterate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::VerifyTheorem1 => "verify-theorem1",
            Command::Ledger => "ledger",
            Command::Deviation => "deviation",
            Command::Sparsify => "sparsify",
            Command::Iterate => "iterate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub theorem1: Theorem1Config,
    pub ledger: LedgerConfig,
    pub deviation: DeviationConfig,
    pub sparsify: SparsifyConfig,
    pub iterate: IterateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            theorem1: Theorem1Config::default(),
            ledger: LedgerConfig::default(),
            deviation: DeviationConfig::default(),
            sparsify: SparsifyConfig::default(),
            iterate: IterateConfig::default(),
        }
    }
}

/// `n`-cube with `P(x_i = 1) = eta` and `events` random events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CubeSweep {
    pub n: usize,
    pub eta: f64,
    pub events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceInstance {
    pub space: ProductSpace,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Theorem1Config {
    /// Seeded random `(space, event)` pairs.
    pub random: usize,
    pub params: RandomSpaceParams,
    pub cube: Option<CubeSweep>,
    /// JSON file holding a list of [`SpaceInstance`].
    pub instances_file: Option<PathBuf>,
    /// Outer exponents; each instance is solved once per exponent.
    pub exponents: Vec<f64>,
    pub tol: f64,
}

impl Default for Theorem1Config {
    fn default() -> Self {
        Self {
            random: 200,
            params: RandomSpaceParams::default(),
            cube: None,
            instances_file: None,
            exponents: vec![2.0, 3.0, 4.0],
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LedgerConfig {
    pub base_grid: usize,
    pub claim_grid: usize,
    pub ineq7_grid: usize,
    pub slices: usize,
    pub slice_params: RandomSpaceParams,
    pub slice_tol: f64,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        Self {
            base_grid: 10_001,
            claim_grid: 10_000,
            ineq7_grid: 1_000,
            slices: 50,
            slice_params: RandomSpaceParams {
                min_blocks: 3,
                max_blocks: 3,
                ..RandomSpaceParams::default()
            },
            slice_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviationConfig {
    pub spaces: usize,
    pub params: RandomSpaceParams,
    pub families: Vec<FnFamily>,
    pub centers: Vec<CenterKind>,
    /// Points of the `c` grid, which ends at `max f − min f` over `Ω`.
    pub grid_points: usize,
    /// `center` and `seed` are replaced for each curve.
    pub tail: TailOptions,
}

impl Default for DeviationConfig {
    fn default() -> Self {
        Self {
            spaces: 100,
            params: RandomSpaceParams {
                max_outcomes: 1 << 12,
                ..RandomSpaceParams::default()
            },
            families: FnFamily::ALL.to_vec(),
            centers: vec![CenterKind::Median, CenterKind::Mean],
            grid_points: 50,
            tail: TailOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SubspaceSource {
    File(PathBuf),
    /// Standard Gaussian basis entries with uniform `μ`.
    Gaussian { n: usize, atoms: usize, r: f64, s: f64 },
    Constants { atoms: usize, r: f64, s: f64 },
}

impl Default for SubspaceSource {
    fn default() -> Self {
        SubspaceSource::Gaussian {
            n: 4,
            atoms: 2048,
            r: 1.0,
            s: 1.5,
        }
    }
}

impl SubspaceSource {
    fn load(&self, seed: u64) -> Result<SampledSubspace> {
        match self {
            SubspaceSource::File(path) => SampledSubspace::from_file(path),
            SubspaceSource::Gaussian { n, atoms, r, s } => {
                SampledSubspace::gaussian(*n, *atoms, *r, *s, &mut stream(seed, "subspace", 0))
            }
            SubspaceSource::Constants { atoms, r, s } => SampledSubspace::constants(*atoms, *r, *s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tail10Config {
    /// Defaults to the normalized first basis vector.
    pub x: Option<Vec<f64>>,
    pub delta: f64,
    pub trials: usize,
    pub c_grid: Vec<f64>,
    /// Defaults to the estimated `K`.
    pub k: Option<f64>,
}

impl Default for Tail10Config {
    fn default() -> Self {
        Self {
            x: None,
            delta: 0.5,
            trials: 100_000,
            c_grid: (1..=20).map(|i| 0.0049 * i as f64).collect(),
            k: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparsifyConfig {
    pub subspace: SubspaceSource,
    pub epsilon: f64,
    /// Tried in order; the report names the smallest that passes.
    pub c_universal: Vec<f64>,
    pub trials: usize,
    /// Fraction of trials that must certify.
    pub pass_rate: f64,
    pub k: Option<f64>,
    pub k_budget: usize,
    pub net: NetOptions,
    pub tail10: Option<Tail10Config>,
}

impl Default for SparsifyConfig {
    fn default() -> Self {
        Self {
            subspace: SubspaceSource::default(),
            epsilon: 0.25,
            c_universal: vec![1.0, 2.0, 4.0, 8.0],
            trials: 100,
            pass_rate: 0.5,
            k: None,
            k_budget: 256,
            net: NetOptions::default(),
            tail10: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterateConfig {
    pub subspace: SubspaceSource,
    pub rounds: usize,
    pub epsilon: Vec<f64>,
    pub c_universal: f64,
    pub density: UniformDensity,
    pub options: IterateOptions,
}

impl Default for IterateConfig {
    fn default() -> Self {
        Self {
            subspace: SubspaceSource::default(),
            rounds: 3,
            epsilon: vec![0.25],
            c_universal: 1.0,
            density: UniformDensity::default(),
            options: IterateOptions::default(),
        }
    }
}

/// One pass/fail row of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    /// Distance to the failure threshold, positive when passing.
    pub margin: Option<f64>,
}

impl Check {
    fn new(name: impl Into<String>, pass: bool, margin: Option<f64>) -> Self {
        Self {
            name: name.into(),
            pass,
            margin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub checks: usize,
    pub passed: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tool: String,
    pub version: String,
    pub command: Command,
    pub seed: u64,
    pub config: RunConfig,
    pub summary: Summary,
    pub checks: Vec<Check>,
    pub results: Value,
    pub error: Option<String>,
    /// Seconds since the Unix epoch when the report was written.
    pub timestamp: u64,
}

/// A named CSV body to write next to the report.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub file: String,
    pub csv: String,
}

/// Output of a command before it is written.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub checks: Vec<Check>,
    pub results: Value,
    pub curves: Vec<Curve>,
}

#[derive(Debug)]
pub enum HarnessError {
    /// Bad config, unreadable input or unwritable output.
    Config(Error),
    Internal(Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Internal(_) => 3,
        }
    }
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::Config(e) => write!(f, "{e}"),
            HarnessError::Internal(e) => write!(f, "internal error: {e}"),
        }
    }
}

impl std::error::Error for HarnessError {}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

/// Inputs read from disk before any computation, so that missing files are
/// config errors rather than internal ones.
enum Inputs {
    None,
    Instances(Vec<SpaceInstance>),
    Subspace(SampledSubspace),
}

fn resolve(command: Command, cfg: &RunConfig) -> Result<Inputs> {
    match command {
        Command::VerifyTheorem1 => {
            let t = &cfg.theorem1;
            if t.exponents.iter().any(|p| !(*p >= 1.0)) {
                return Err(Error::Config("theorem1 exponents must be >= 1".into()));
            }
            if !(t.tol > 0.0) {
                return Err(Error::Config("theorem1 tol must be positive".into()));
            }
            match &t.instances_file {
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(|source| Error::Io {
                        path: path.display().to_string(),
                        source,
                    })?;
                    let list: Vec<SpaceInstance> = serde_json::from_str(&text).map_err(|source| Error::Json {
                        path: path.display().to_string(),
                        source,
                    })?;
                    for inst in &list {
                        inst.space.ensure_valid()?;
                        for e in &inst.events {
                            e.validate(&inst.space)?;
                        }
                    }
                    Ok(Inputs::Instances(list))
                }
                None => Ok(Inputs::None),
            }
        }
        Command::Ledger => {
            let l = &cfg.ledger;
            if l.base_grid < 2 || l.claim_grid < 2 || l.ineq7_grid < 2 {
                return Err(Error::Config("ledger grids need at least 2 points".into()));
            }
            Ok(Inputs::None)
        }
        Command::Deviation => {
            let d = &cfg.deviation;
            if d.grid_points == 0 {
                return Err(Error::Config("deviation grid needs at least one point".into()));
            }
            Ok(Inputs::None)
        }
        Command::Sparsify => {
            let s = &cfg.sparsify;
            if !(s.epsilon > 0.0 && s.epsilon < 1.0) {
                return Err(Error::Config("sparsify epsilon must lie in (0, 1)".into()));
            }
            if s.c_universal.iter().any(|c| !(*c > 0.0)) {
                return Err(Error::Config("c_universal values must be positive".into()));
            }
            Ok(Inputs::Subspace(s.subspace.load(cfg.seed)?))
        }
        Command::Iterate => {
            let it = &cfg.iterate;
            if it.rounds == 0 || it.epsilon.is_empty() || it.epsilon.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
                return Err(Error::Config("iterate needs rounds >= 1 and epsilons in (0, 1)".into()));
            }
            Ok(Inputs::Subspace(it.subspace.load(cfg.seed)?))
        }
    }
}

/// Resolve inputs, run `command`, and write the report and curves into `out`.
/// Returns the written report; its summary decides the exit status.
pub fn run(command: Command, cfg: &RunConfig, out: &Path) -> std::result::Result<Report, HarnessError> {
    fs::create_dir_all(out)
        .map_err(|source| {
            HarnessError::Config(Error::Io {
                path: out.display().to_string(),
                source,
            })
        })?;
    let inputs = resolve(command, cfg).map_err(HarnessError::Config)?;
    let result = execute(command, cfg, inputs);
    let (outcome, error) = match result {
        Ok(o) => (o, None),
        Err(e) => (
            Outcome {
                checks: Vec::new(),
                results: Value::Null,
                curves: Vec::new(),
            },
            Some(e),
        ),
    };
    let report = build_report(command, cfg, &outcome, error.as_ref().map(|e| e.to_string()));
    emit_report(&report, &outcome.curves, out).map_err(HarnessError::Config)?;
    match error {
        Some(e) => Err(HarnessError::Internal(e)),
        None => Ok(report),
    }
}

pub fn build_report(command: Command, cfg: &RunConfig, outcome: &Outcome, error: Option<String>) -> Report {
    let passed = outcome.checks.iter().filter(|c| c.pass).count();
    Report {
        tool: "conclab".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command,
        seed: cfg.seed,
        config: cfg.clone(),
        summary: Summary {
            checks: outcome.checks.len(),
            passed,
            pass: error.is_none() && passed == outcome.checks.len(),
        },
        checks: outcome.checks.clone(),
        results: outcome.results.clone(),
        error,
        timestamp: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    }
}

/// Write `<command>.json` and every curve into `out`.
pub fn emit_report(report: &Report, curves: &[Curve], out: &Path) -> Result<()> {
    let write = |path: PathBuf, body: &str| {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|source| Error::Io {
                path: dir.display().to_string(),
                source,
            })?;
        }
        fs::write(&path, body).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    };
    let mut body = serde_json::to_string_pretty(report).expect("report serializes");
    body.push('\n');
    write(out.join(format!("{}.json", report.command.name())), &body)?;
    for c in curves {
        write(out.join(&c.file), &c.csv)?;
    }
    Ok(())
}

fn execute(command: Command, cfg: &RunConfig, inputs: Inputs) -> Result<Outcome> {
    match (command, inputs) {
        (Command::VerifyTheorem1, Inputs::Instances(list)) => theorem1_sweep(&cfg.theorem1, cfg.seed, &list),
        (Command::VerifyTheorem1, _) => theorem1_sweep(&cfg.theorem1, cfg.seed, &[]),
        (Command::Ledger, _) => ledger(&cfg.ledger, cfg.seed),
        (Command::Deviation, _) => deviation_sweep(&cfg.deviation, cfg.seed),
        (Command::Sparsify, Inputs::Subspace(sub)) => sparsify_run(&cfg.sparsify, cfg.seed, &sub),
        (Command::Iterate, Inputs::Subspace(sub)) => iterate_run(&cfg.iterate, cfg.seed, &sub),
        (c, _) => Err(Error::Config(format!("{} needs a subspace", c.name()))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Row {
    pub source: String,
    pub outer_p: f64,
    pub blocks: usize,
    pub outcomes: usize,
    pub event_size: usize,
    pub prob_a: f64,
    pub expectation: f64,
    pub bound: f64,
    pub margin: f64,
    pub gap_budget: f64,
    pub normalized: f64,
    pub max_gap: f64,
    /// Worst `ub_p^p − ub_2^2` over outcomes, for `p ≠ 2`.
    pub pointwise_excess: Option<f64>,
    pub pass: bool,
}

/// Check one event at every configured exponent.
fn theorem1_rows(space: &ProductSpace, event: &Event, source: &str, cfg: &Theorem1Config) -> Result<Vec<Theorem1Row>> {
    let tol = cfg.tol;
    let base = space.with_outer_p(2.0);
    let needs_two = cfg.exponents.iter().any(|&p| p != 2.0);
    let p2 = if needs_two || cfg.exponents.contains(&2.0) {
        Some(distance_profile(&base, event, None, tol, DEFAULT_OUTCOME_CAP)?)
    } else {
        None
    };
    let mut rows = Vec::new();
    for &p in &cfg.exponents {
        let sp = space.with_outer_p(p);
        let owned;
        let prof = if p == 2.0 {
            p2.as_ref().expect("profile at p = 2")
        } else {
            owned = distance_profile(&sp, event, None, tol, DEFAULT_OUTCOME_CAP)?;
            &owned
        };
        let r = theorem1_from_profile(&sp, event, prof)?;
        let pointwise_excess = if p == 2.0 {
            None
        } else {
            Some(pointwise_exponent_excess(prof, p2.as_ref().expect("profile at p = 2")))
        };
        let pointwise_ok = pointwise_excess.is_none_or(|x| x <= 3.0 * tol);
        rows.push(Theorem1Row {
            source: source.to_string(),
            outer_p: p,
            blocks: space.n_blocks(),
            outcomes: space.checked_count(DEFAULT_OUTCOME_CAP)?,
            event_size: r.event_size,
            prob_a: r.prob_a,
            expectation: r.expectation,
            bound: r.bound,
            margin: r.margin,
            gap_budget: r.gap_budget,
            normalized: r.normalized,
            max_gap: r.max_gap,
            pointwise_excess,
            pass: r.pass && pointwise_ok,
        });
    }
    Ok(rows)
}

/// Explicit instances, then the cube sweep, then seeded random instances.
pub fn theorem1_sweep(cfg: &Theorem1Config, seed: u64, instances: &[SpaceInstance]) -> Result<Outcome> {
    let mut rows = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        for (j, e) in inst.events.iter().enumerate() {
            rows.extend(theorem1_rows(&inst.space, e, &format!("file:{i}:{j}"), cfg)?);
        }
    }
    if let Some(cube) = &cfg.cube {
        let space = bernoulli_cube(cube.n, cube.eta)?;
        for j in 0..cube.events {
            let event = random_event(&space, DEFAULT_OUTCOME_CAP, &mut stream(seed, "theorem1-cube", j as u64))?;
            rows.extend(theorem1_rows(&space, &event, &format!("cube:{j}"), cfg)?);
        }
    }
    for i in 0..cfg.random {
        let mut rng = stream(seed, "theorem1-random", i as u64);
        let space = random_space(&cfg.params, &mut rng);
        let event = random_event(&space, DEFAULT_OUTCOME_CAP, &mut rng)?;
        rows.extend(theorem1_rows(&space, &event, &format!("random:{i}"), cfg)?);
    }
    let checks = rows
        .iter()
        .map(|r| {
            Check::new(
                format!("{} p={}", r.source, r.outer_p),
                r.pass,
                Some(1.0 + r.gap_budget - r.normalized),
            )
        })
        .collect();
    Ok(Outcome {
        checks,
        results: to_value(&rows),
        curves: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRow {
    pub index: usize,
    pub checks: usize,
    pub skipped: Vec<usize>,
    pub max_excess_v: f64,
    pub max_excess_w: f64,
    pub pass: bool,
}

pub fn ledger(cfg: &LedgerConfig, seed: u64) -> Result<Outcome> {
    let base = base_case_scan(cfg.base_grid)?;
    let claim = claim_scan(cfg.claim_grid)?;
    let ineq7 = ineq7_scan(cfg.ineq7_grid)?;
    let mut checks = vec![
        Check::new(
            "base case max is 1 at r = 1",
            (base.max - 1.0).abs() <= 1e-9 && base.argmax[0] == 1.0,
            Some(1e-9 - (base.max - 1.0).abs()),
        ),
        Check::new("claim g(λ) ≤ 2 − λ", claim.scan.max <= 1e-12, Some(1e-12 - claim.scan.max)),
        Check::new("unit-square product ≤ 1", ineq7.max <= 1e-12, Some(1e-12 - ineq7.max)),
    ];
    let mut slices = Vec::with_capacity(cfg.slices);
    for i in 0..cfg.slices {
        let mut rng = stream(seed, "ledger-slice", i as u64);
        let space = random_space(&cfg.slice_params, &mut rng);
        let event = random_event(&space, DEFAULT_OUTCOME_CAP, &mut rng)?;
        let r = slice_inequalities_check(&space, &event, cfg.slice_tol)?;
        checks.push(Check::new(
            format!("slice:{i}"),
            r.pass,
            Some(cfg.slice_tol - r.max_excess_v.max(r.max_excess_w)),
        ));
        slices.push(SliceRow {
            index: i,
            checks: r.checks,
            skipped: r.skipped,
            max_excess_v: r.max_excess_v,
            max_excess_w: r.max_excess_w,
            pass: r.pass,
        });
    }
    let results = serde_json::json!({
        "base_case": base,
        "claim": claim,
        "ineq7": ineq7,
        "slices": slices,
    });
    Ok(Outcome {
        checks,
        results,
        curves: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationRow {
    pub space: usize,
    pub family: FnFamily,
    pub center: CenterKind,
    pub sigma_p: f64,
    pub center_value: f64,
    pub worst_ratio: f64,
    pub violations: usize,
    pub curve: String,
    pub pass: bool,
}

/// `max f − min f` over `Ω`, or 1 for a constant `f`. Beyond it every tail
/// is zero.
fn grid_top(space: &ProductSpace, f: &ConvexFnSpec, cap: u64) -> Result<f64> {
    let (lo, hi) = space
        .outcomes(cap)?
        .map(|(t, _)| f.eval(space, &t))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    Ok(if hi > lo { hi - lo } else { 1.0 })
}

pub fn deviation_sweep(cfg: &DeviationConfig, seed: u64) -> Result<Outcome> {
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut checks = Vec::new();
    for i in 0..cfg.spaces {
        let mut rng = stream(seed, "deviation-space", i as u64);
        let space = random_space(&cfg.params, &mut rng);
        for (fi, &family) in cfg.families.iter().enumerate() {
            let f = random_convex_fn(family, &space, &mut stream(seed, "deviation-fn", (i * 8 + fi) as u64));
            let grid = c_grid(grid_top(&space, &f, cfg.tail.cap)?, cfg.grid_points);
            for &center in &cfg.centers {
                let opts = TailOptions {
                    center,
                    seed: derive_seed(seed, "deviation-mc", i as u64),
                    ..cfg.tail.clone()
                };
                let rep = tail_vs_bound(&space, &f, &grid, &opts)?;
                let worst_ratio = rep
                    .rows
                    .iter()
                    .filter(|r| r.bound > 0.0)
                    .map(|r| r.tail / r.bound)
                    .fold(0.0, f64::max);
                let name = format!("deviation/{i:04}-{}-{}.csv", family_name(family), center_name(center));
                checks.push(Check::new(
                    format!("space:{i} {} {}", family_name(family), center_name(center)),
                    rep.pass,
                    Some(1.0 - worst_ratio),
                ));
                rows.push(DeviationRow {
                    space: i,
                    family,
                    center,
                    sigma_p: rep.sigma_p,
                    center_value: rep.center(),
                    worst_ratio,
                    violations: rep.rows.iter().filter(|r| r.violated).count(),
                    curve: name.clone(),
                    pass: rep.pass,
                });
                curves.push(Curve {
                    file: name,
                    csv: rep.to_csv(),
                });
            }
        }
    }
    Ok(Outcome {
        checks,
        results: to_value(&rows),
        curves,
    })
}

fn family_name(f: FnFamily) -> &'static str {
    match f {
        FnFamily::Linear => "linear",
        FnFamily::DistanceToPoint => "distance",
        FnFamily::MaxAffine => "max-affine",
    }
}

fn center_name(c: CenterKind) -> &'static str {
    match c {
        CenterKind::Median => "median",
        CenterKind::Mean => "mean",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub seed: u64,
    pub k: usize,
    pub distortion: f64,
    pub max_rel_dev: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSweep {
    pub c_universal: f64,
    pub choice: DeltaChoice,
    pub passed: usize,
    pub rate: f64,
    pub pass: bool,
    pub trials: Vec<TrialRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsifyResults {
    pub n: usize,
    pub atoms: usize,
    pub r: f64,
    pub s: f64,
    pub p: f64,
    pub k: f64,
    pub k_estimated: bool,
    pub net_size: usize,
    pub net_certified: bool,
    pub net_log_theoretical_size: f64,
    pub net_seed: u64,
    pub sweeps: Vec<SelectionSweep>,
    pub smallest_passing_c: Option<f64>,
    pub tail10: Option<crate::sparsify::Tail10Report>,
}

pub fn sparsify_run(cfg: &SparsifyConfig, seed: u64, sub: &SampledSubspace) -> Result<Outcome> {
    let (k, k_estimated) = match cfg.k {
        Some(k) => (k, false),
        None => (estimate_k(sub, cfg.k_budget, derive_seed(seed, "sparsify-k", 0))?, true),
    };
    let net_seed = derive_seed(seed, "sparsify-net", 0);
    let net = build_net(sub, cfg.epsilon, net_seed, &cfg.net)?;
    let mut checks = vec![Check::new("net certified", net.certified, None)];
    let mut sweeps = Vec::new();
    if net.certified {
        let cert = Certifier::new(sub, &net)?;
        for (ci, &c) in cfg.c_universal.iter().enumerate() {
            let choice = choose_delta_k(sub.dim(), sub.n_atoms(), k, sub.r(), sub.s(), cfg.epsilon, c)?;
            let mut trials = Vec::with_capacity(cfg.trials);
            if !choice.too_small {
                for t in 0..cfg.trials {
                    let s = derive_seed(seed, &format!("sparsify-trial-{ci}"), t as u64);
                    let tr = cert.trial(choice.delta, cfg.epsilon, s)?;
                    trials.push(TrialRow {
                        seed: s,
                        k: tr.k,
                        distortion: tr.distortion,
                        max_rel_dev: tr.max_rel_dev,
                        pass: tr.pass,
                    });
                }
            }
            let passed = trials.iter().filter(|t| t.pass).count();
            let rate = if trials.is_empty() { 0.0 } else { passed as f64 / trials.len() as f64 };
            sweeps.push(SelectionSweep {
                c_universal: c,
                choice,
                passed,
                rate,
                pass: !trials.is_empty() && rate >= cfg.pass_rate,
                trials,
            });
        }
    }
    let smallest_passing_c = sweeps
        .iter()
        .filter(|s| s.pass)
        .map(|s| s.c_universal)
        .fold(None, |m: Option<f64>, c| Some(m.map_or(c, |m| m.min(c))));
    if !cfg.c_universal.is_empty() {
        checks.push(Check::new(
            "selection certifies at some c_universal",
            smallest_passing_c.is_some(),
            sweeps.iter().map(|s| s.rate - cfg.pass_rate).fold(None, |m: Option<f64>, v| {
                Some(m.map_or(v, |m| m.max(v)))
            }),
        ));
    }
    let mut curves = Vec::new();
    let tail10 = match &cfg.tail10 {
        Some(t) => {
            let x = match &t.x {
                Some(x) => x.clone(),
                None => {
                    let mut e = vec![0.0; sub.dim()];
                    e[0] = 1.0;
                    let norm = sub.lr_norm(&e)?;
                    e[0] /= norm;
                    e
                }
            };
            let rep = tail10_experiment(
                sub,
                &x,
                t.delta,
                t.trials,
                &t.c_grid,
                t.k.unwrap_or(k),
                derive_seed(seed, "sparsify-tail10", 0),
            )?;
            checks.push(Check::new("selection tail within bound", rep.pass, None));
            curves.push(Curve {
                file: "sparsify-tail.csv".into(),
                csv: rep.to_csv(),
            });
            Some(rep)
        }
        None => None,
    };
    let results = SparsifyResults {
        n: sub.dim(),
        atoms: sub.n_atoms(),
        r: sub.r(),
        s: sub.s(),
        p: sub.p(),
        k,
        k_estimated,
        net_size: net.size,
        net_certified: net.certified,
        net_log_theoretical_size: net.log_theoretical_size,
        net_seed,
        sweeps,
        smallest_passing_c,
        tail10,
    };
    Ok(Outcome {
        checks,
        results: to_value(&results),
        curves,
    })
}

pub fn iterate_run(cfg: &IterateConfig, seed: u64, sub: &SampledSubspace) -> Result<Outcome> {
    let rep = iterate_embedding(
        sub,
        cfg.rounds,
        &cfg.epsilon,
        &cfg.density,
        cfg.c_universal,
        derive_seed(seed, "iterate", 0),
        &cfg.options,
    )?;
    let checks = vec![
        Check::new("N strictly decreases", rep.sizes_decrease, None),
        Check::new(
            "cumulative distortion within budget",
            rep.cumulative_distortion <= rep.distortion_budget,
            Some(rep.distortion_budget - rep.cumulative_distortion),
        ),
    ];
    let curves = vec![Curve {
        file: "iterate.csv".into(),
        csv: rep.to_csv(),
    }];
    Ok(Outcome {
        checks,
        results: to_value(&rep),
        curves,
    })
}
