//! Sample spaces, null models, statistic specifications and battery
//! validation.
//!
//! A statistic specification bundles a pure window function with the
//! moment constants it is centred and scaled by. Moments are never assumed:
//! they are computed by an explicit [`MomentMethod`] (exact enumeration over a
//! finite alphabet, Monte-Carlo, or a caller-supplied closed form).

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{lcm, CompensatedSum};
use crate::rng::chunked;

/// Default cap on the number of tuples visited by exact enumeration.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1 << 24;
/// Default replicate count for Monte-Carlo moment estimation.
pub const DEFAULT_MC_REPLICATES: usize = 1_000_000;
/// Tolerance on `sum(pmf) == 1` and `sum(cells) == 1`.
pub const PROBABILITY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("triple {triple}: {constraint}")]
    DivisibilityViolation { triple: usize, constraint: String },
    #[error("chain length s = {chain} is below the required minimum {required}")]
    WindowTooShort { chain: usize, required: usize },
    #[error("triple {triple}: degenerate sigma for {statistic} ({sigma})")]
    DegenerateSigma {
        triple: usize,
        statistic: &'static str,
        sigma: f64,
    },
    #[error("cell {cell} has zero probability under the null model{}", .triple.map(|q| format!(" (triple {q})")).unwrap_or_default())]
    EmptyCell { triple: Option<usize>, cell: usize },
    #[error("cell probabilities sum to {sum}, expected 1")]
    CellsNotNormalized { sum: f64 },
    #[error("sample length n = {n} is below the required minimum {required}")]
    SampleTooShort { n: usize, required: usize },
    #[error("invalid null model: {0}")]
    InvalidNullModel(String),
    #[error(
        "negative variance estimate {estimate} (standard error {se}); increase the replicate count"
    )]
    NegativeVarianceEstimate { estimate: f64, se: f64 },
    #[error("moment is not finite")]
    NonFiniteMoment,
    #[error("enumeration of {size} tuples exceeds the cap {cap}")]
    EnumerationTooLarge { size: u128, cap: u64 },
    #[error("unsupported method: {0}")]
    UnsupportedMethod(String),
    #[error("invalid battery: {0}")]
    InvalidBattery(String),
}

/// The set the tested sequence takes values in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleSpace {
    /// Symbols `0..alphabet`, stored as integral `f64` values.
    Finite { alphabet: usize },
    /// Reals in `[0, 1]`.
    UnitInterval,
}

impl SampleSpace {
    pub fn contains(&self, x: f64) -> bool {
        match *self {
            SampleSpace::Finite { alphabet } => {
                x >= 0.0 && x.fract() == 0.0 && (x as usize) < alphabet
            }
            SampleSpace::UnitInterval => (0.0..=1.0).contains(&x),
        }
    }
}

// Vector-valued spaces are a natural extension point; only finite alphabets
// and [0, 1] are supported.
/// The H0 law of one sequence element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NullModel {
    Finite { pmf: Vec<f64> },
    Uniform,
}

impl NullModel {
    pub fn finite(pmf: Vec<f64>) -> Result<Self, ModelError> {
        if pmf.len() < 2 {
            return Err(ModelError::InvalidNullModel(
                "alphabet must have at least two symbols".into(),
            ));
        }
        if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(ModelError::InvalidNullModel(
                "pmf entries must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > PROBABILITY_TOLERANCE {
            return Err(ModelError::InvalidNullModel(format!("pmf sums to {total}")));
        }
        Ok(NullModel::Finite { pmf })
    }

    pub fn bernoulli(p: f64) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(ModelError::InvalidNullModel(format!(
                "Bernoulli parameter {p} outside [0, 1]"
            )));
        }
        Self::finite(vec![1.0 - p, p])
    }

    /// Fair coin, the usual binary H0.
    pub fn fair_bits() -> Self {
        NullModel::Finite {
            pmf: vec![0.5, 0.5],
        }
    }

    pub fn uniform() -> Self {
        NullModel::Uniform
    }

    pub fn space(&self) -> SampleSpace {
        match self {
            NullModel::Finite { pmf } => SampleSpace::Finite {
                alphabet: pmf.len(),
            },
            NullModel::Uniform => SampleSpace::UnitInterval,
        }
    }

    /// Checks the pmf invariants (useful after deserialization).
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            NullModel::Finite { pmf } => Self::finite(pmf.clone()).map(|_| ()),
            NullModel::Uniform => Ok(()),
        }
    }

    /// Draws one element.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            NullModel::Uniform => rng.random::<f64>(),
            NullModel::Finite { pmf } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (symbol, p) in pmf.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return symbol as f64;
                    }
                }
                // rounding slack: last symbol with positive mass
                pmf.iter().rposition(|p| *p > 0.0).unwrap_or(0) as f64
            }
        }
    }

    /// Support points with their probabilities (finite models only).
    pub(crate) fn atoms(&self) -> Option<Vec<(f64, f64)>> {
        match self {
            NullModel::Finite { pmf } => Some(
                pmf.iter()
                    .enumerate()
                    .filter(|(_, p)| **p > 0.0)
                    .map(|(s, p)| (s as f64, *p))
                    .collect(),
            ),
            NullModel::Uniform => None,
        }
    }
}

/// Visits every tuple of `len` support points of a finite null model with
/// its probability.
pub(crate) fn enumerate_tuples(
    null: &NullModel,
    len: usize,
    cap: u64,
    mut visit: impl FnMut(&[f64], f64),
) -> Result<(), ModelError> {
    let atoms = null.atoms().ok_or_else(|| {
        ModelError::UnsupportedMethod("exact enumeration needs a finite alphabet".into())
    })?;
    let size = (atoms.len() as u128)
        .checked_pow(len as u32)
        .unwrap_or(u128::MAX);
    if size > cap as u128 {
        return Err(ModelError::EnumerationTooLarge { size, cap });
    }
    let mut index = vec![0usize; len];
    let mut values: Vec<f64> = vec![atoms[0].0; len];
    loop {
        let prob: f64 = index.iter().map(|&i| atoms[i].1).product();
        visit(&values, prob);
        // odometer, last position fastest
        let mut pos = len;
        loop {
            if pos == 0 {
                return Ok(());
            }
            pos -= 1;
            index[pos] += 1;
            if index[pos] < atoms.len() {
                values[pos] = atoms[index[pos]].0;
                break;
            }
            index[pos] = 0;
            values[pos] = atoms[0].0;
        }
    }
}

type RealFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type ClassFn = dyn Fn(&[f64]) -> usize + Send + Sync;

/// A named pure function of `arity` consecutive sequence elements.
#[derive(Clone)]
pub struct WindowFn {
    name: Arc<str>,
    arity: usize,
    f: Arc<RealFn>,
}

impl WindowFn {
    pub fn new(
        name: impl Into<Arc<str>>,
        arity: usize,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        assert!(arity >= 1, "window arity must be positive");
        WindowFn {
            name: name.into(),
            arity,
            f: Arc::new(f),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    /// Evaluates on the first `arity` elements of `window`.
    #[inline]
    pub fn call(&self, window: &[f64]) -> f64 {
        (self.f)(&window[..self.arity])
    }
}

impl fmt::Debug for WindowFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "WindowFn({}, m={})", self.name, self.arity)
    }
}

/// Maps a short block to one of `classes` cells: the composition of the
/// block function with the partition of its range.
#[derive(Clone)]
pub struct Classifier {
    name: Arc<str>,
    block_len: usize,
    classes: usize,
    f: Arc<ClassFn>,
}

impl Classifier {
    pub fn new(
        name: impl Into<Arc<str>>,
        block_len: usize,
        classes: usize,
        f: impl Fn(&[f64]) -> usize + Send + Sync + 'static,
    ) -> Self {
        assert!(block_len >= 1 && classes >= 1);
        Classifier {
            name: name.into(),
            block_len,
            classes,
            f: Arc::new(f),
        }
    }

    /// One class containing everything. Used to pad a triple that has no
    /// short-block member.
    pub fn trivial() -> Self {
        Classifier::new("trivial", 1, 1, |_| 0)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn classify(&self, block: &[f64]) -> usize {
        let c = (self.f)(&block[..self.block_len]);
        debug_assert!(c < self.classes, "classifier {} returned {c}", self.name);
        c
    }
}

impl fmt::Debug for Classifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Classifier({}, L={}, classes={})",
            self.name, self.block_len, self.classes
        )
    }
}

/// Mean and long-run standard deviation of a window function under H0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub sigma: f64,
    /// Standard errors, present for Monte-Carlo estimates.
    pub mean_se: Option<f64>,
    pub sigma_se: Option<f64>,
}

impl Moments {
    pub fn exact(mean: f64, sigma: f64) -> Self {
        Moments {
            mean,
            sigma,
            mean_se: None,
            sigma_se: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MomentMethod {
    /// Visit all `|X|^(2m-1)` windows of a finite alphabet.
    ExactEnumeration {
        cap: u64,
    },
    MonteCarlo {
        replicates: usize,
        seed: u64,
    },
    /// Known mean and variance of `f(e1)`; only valid for `m = 1`.
    ClosedForm {
        mean: f64,
        variance: f64,
    },
}

impl Default for MomentMethod {
    fn default() -> Self {
        MomentMethod::ExactEnumeration {
            cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

/// `E f(e1..em)` and `sigma^2 = Var f + 2 sum_{i=2}^m cov(f(e_i..), f(e_1..))`.
pub fn compute_window_moments(
    f: &WindowFn,
    null: &NullModel,
    method: &MomentMethod,
) -> Result<Moments, ModelError> {
    let m = f.arity();
    let moments = match method {
        MomentMethod::ClosedForm { mean, variance } => {
            if m != 1 {
                return Err(ModelError::UnsupportedMethod(format!(
                    "closed form moments need m = 1, got m = {m}"
                )));
            }
            if *variance < 0.0 {
                return Err(ModelError::NegativeVarianceEstimate {
                    estimate: *variance,
                    se: 0.0,
                });
            }
            Moments::exact(*mean, variance.sqrt())
        }
        MomentMethod::ExactEnumeration { cap } => exact_moments(f, null, *cap)?,
        MomentMethod::MonteCarlo { replicates, seed } => mc_moments(f, null, *replicates, *seed)?,
    };
    if !moments.mean.is_finite() || !moments.sigma.is_finite() {
        return Err(ModelError::NonFiniteMoment);
    }
    Ok(moments)
}

/// Moments of a summing-statistic window function.
pub fn compute_sum_moments(
    f: &WindowFn,
    null: &NullModel,
    method: &MomentMethod,
) -> Result<Moments, ModelError> {
    compute_window_moments(f, null, method)
}

/// Moments of a long-block window function (same formula as the summing case).
pub fn compute_lb_moments(
    f: &WindowFn,
    null: &NullModel,
    method: &MomentMethod,
) -> Result<Moments, ModelError> {
    compute_window_moments(f, null, method)
}

fn exact_moments(f: &WindowFn, null: &NullModel, cap: u64) -> Result<Moments, ModelError> {
    let m = f.arity();
    let mut mean = CompensatedSum::new();
    let mut second = CompensatedSum::new();
    let mut cross = vec![CompensatedSum::new(); m];
    let mut finite = true;
    enumerate_tuples(null, 2 * m - 1, cap, |w, p| {
        let first = f.call(w);
        finite &= first.is_finite();
        mean.add(p * first);
        second.add(p * first * first);
        for (lag, acc) in cross.iter_mut().enumerate().skip(1) {
            acc.add(p * first * f.call(&w[lag..]));
        }
    })?;
    if !finite {
        return Err(ModelError::NonFiniteMoment);
    }
    let mu = mean.value();
    let mut var = second.value() - mu * mu;
    for acc in cross.iter().skip(1) {
        var += 2.0 * (acc.value() - mu * mu);
    }
    // exact arithmetic can leave -1e-17 for degenerate functions
    let var = if var < 0.0 && var > -1e-12 { 0.0 } else { var };
    if var < 0.0 {
        return Err(ModelError::NegativeVarianceEstimate {
            estimate: var,
            se: 0.0,
        });
    }
    Ok(Moments::exact(mu, var.sqrt()))
}

fn mc_moments(
    f: &WindowFn,
    null: &NullModel,
    replicates: usize,
    seed: u64,
) -> Result<Moments, ModelError> {
    if replicates < 2 {
        return Err(ModelError::UnsupportedMethod(
            "Monte-Carlo moments need at least two replicates".into(),
        ));
    }
    let m = f.arity();
    let span = 2 * m - 1;
    let draw = |rng: &mut rand_chacha::ChaCha8Rng, buf: &mut [f64], vals: &mut [f64]| {
        for x in buf.iter_mut() {
            *x = null.sample(rng);
        }
        for (lag, v) in vals.iter_mut().enumerate() {
            *v = f.call(&buf[lag..]);
        }
    };
    let firsts = chunked(replicates, seed, |rng, count| {
        let mut buf = vec![0.0; span];
        let mut vals = vec![0.0; m];
        let mut acc = CompensatedSum::new();
        for _ in 0..count {
            draw(rng, &mut buf, &mut vals);
            acc.add(vals[0]);
        }
        acc
    });
    let mut total = CompensatedSum::new();
    firsts.iter().for_each(|a| total.merge(a));
    let mu = total.value() / replicates as f64;
    if !mu.is_finite() {
        return Err(ModelError::NonFiniteMoment);
    }
    // second pass regenerates the same draws
    let parts = chunked(replicates, seed, |rng, count| {
        let mut buf = vec![0.0; span];
        let mut vals = vec![0.0; m];
        let mut sq = CompensatedSum::new();
        let mut g_sum = CompensatedSum::new();
        let mut g_sq = CompensatedSum::new();
        for _ in 0..count {
            draw(rng, &mut buf, &mut vals);
            let d0 = vals[0] - mu;
            let g = d0 * d0 + 2.0 * vals[1..].iter().map(|v| d0 * (v - mu)).sum::<f64>();
            sq.add(d0 * d0);
            g_sum.add(g);
            g_sq.add(g * g);
        }
        [sq, g_sum, g_sq]
    });
    let mut sums = [CompensatedSum::new(); 3];
    for part in &parts {
        for (s, p) in sums.iter_mut().zip(part) {
            s.merge(p);
        }
    }
    let r = replicates as f64;
    let var_f = sums[0].value() / (r - 1.0);
    let g_mean = sums[1].value() / r;
    let g_var = ((sums[2].value() / r - g_mean * g_mean) * r / (r - 1.0)).max(0.0);
    let var_se = (g_var / r).sqrt();
    if !g_mean.is_finite() {
        return Err(ModelError::NonFiniteMoment);
    }
    let var = if g_mean < 0.0 {
        if g_mean < -5.0 * var_se {
            return Err(ModelError::NegativeVarianceEstimate {
                estimate: g_mean,
                se: var_se,
            });
        }
        0.0
    } else {
        g_mean
    };
    let sigma = var.sqrt();
    let sigma_se = if sigma > 0.0 {
        var_se / (2.0 * sigma)
    } else {
        var_se.sqrt()
    };
    Ok(Moments {
        mean: mu,
        sigma,
        mean_se: Some((var_f / r).sqrt()),
        sigma_se: Some(sigma_se),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum CellMethod {
    ExactEnumeration {
        cap: u64,
    },
    MonteCarlo {
        replicates: usize,
        seed: u64,
    },
    /// Closed-form cell probabilities supplied by the caller (catalog tests).
    AnalyticPlugin {
        cells: Vec<f64>,
    },
}

/// `E_sb(j) = P(classifier(e1..eL) = j)` for every class.
pub fn compute_sb_cells(
    classifier: &Classifier,
    null: &NullModel,
    method: &CellMethod,
) -> Result<Vec<f64>, ModelError> {
    let k = classifier.classes();
    let cells = match method {
        CellMethod::AnalyticPlugin { cells } => {
            if cells.len() != k {
                return Err(ModelError::InvalidBattery(format!(
                    "{} cell probabilities supplied for {k} classes",
                    cells.len()
                )));
            }
            cells.clone()
        }
        CellMethod::ExactEnumeration { cap } => {
            let mut acc = vec![CompensatedSum::new(); k];
            enumerate_tuples(null, classifier.block_len(), *cap, |block, p| {
                acc[classifier.classify(block)].add(p);
            })?;
            acc.iter().map(CompensatedSum::value).collect()
        }
        CellMethod::MonteCarlo { replicates, seed } => {
            let parts = chunked(*replicates, *seed, |rng, count| {
                let mut counts = vec![0u64; k];
                let mut buf = vec![0.0; classifier.block_len()];
                for _ in 0..count {
                    for x in buf.iter_mut() {
                        *x = null.sample(rng);
                    }
                    counts[classifier.classify(&buf)] += 1;
                }
                counts
            });
            let mut counts = vec![0u64; k];
            for part in parts {
                counts.iter_mut().zip(part).for_each(|(c, p)| *c += p);
            }
            counts
                .iter()
                .map(|&c| c as f64 / *replicates as f64)
                .collect()
        }
    };
    check_cells(&cells, None)?;
    Ok(cells)
}

fn check_cells(cells: &[f64], triple: Option<usize>) -> Result<(), ModelError> {
    if let Some(cell) = cells.iter().position(|p| !(*p > 0.0)) {
        return Err(ModelError::EmptyCell { triple, cell });
    }
    let sum: f64 = cells.iter().sum();
    if (sum - 1.0).abs() > PROBABILITY_TOLERANCE {
        return Err(ModelError::CellsNotNormalized { sum });
    }
    Ok(())
}

/// Parameters of a summing statistic.
#[derive(Debug, Clone)]
pub struct SumSpec {
    pub f: WindowFn,
    pub mean: f64,
    pub sigma: f64,
    /// Known bound on `|f|`, if any.
    pub bound: Option<f64>,
    /// Present only to complete a triple; excluded from marginal checks.
    pub auxiliary: bool,
}

impl SumSpec {
    pub fn new(f: WindowFn, moments: Moments) -> Self {
        SumSpec {
            f,
            mean: moments.mean,
            sigma: moments.sigma,
            bound: None,
            auxiliary: false,
        }
    }

    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = Some(bound);
        self
    }

    pub fn window(&self) -> usize {
        self.f.arity()
    }
}

/// Parameters of a long-block statistic built over `blocks` long blocks.
#[derive(Debug, Clone)]
pub struct LongBlockSpec {
    pub f: WindowFn,
    pub blocks: usize,
    pub mean: f64,
    pub sigma: f64,
    pub bound: Option<f64>,
    /// Present only to complete a triple; excluded from marginal checks.
    pub auxiliary: bool,
}

impl LongBlockSpec {
    pub fn new(f: WindowFn, blocks: usize, moments: Moments) -> Self {
        LongBlockSpec {
            f,
            blocks,
            mean: moments.mean,
            sigma: moments.sigma,
            bound: None,
            auxiliary: false,
        }
    }

    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = Some(bound);
        self
    }

    pub fn window(&self) -> usize {
        self.f.arity()
    }
}

/// Parameters of a short-block statistic: classifier plus H0 cell
/// probabilities.
#[derive(Debug, Clone)]
pub struct ShortBlockSpec {
    pub classifier: Classifier,
    pub cells: Vec<f64>,
    pub auxiliary: bool,
}

impl ShortBlockSpec {
    pub fn new(classifier: Classifier, cells: Vec<f64>) -> Self {
        ShortBlockSpec {
            classifier,
            cells,
            auxiliary: false,
        }
    }

    /// `K_sb = 0`: a single cell of probability one, contributing a
    /// constant coordinate.
    pub fn trivial() -> Self {
        ShortBlockSpec {
            classifier: Classifier::trivial(),
            cells: vec![1.0],
            auxiliary: true,
        }
    }

    pub fn block_len(&self) -> usize {
        self.classifier.block_len()
    }

    /// Number of classes minus one (the chi-square degrees of freedom).
    pub fn dof(&self) -> usize {
        self.cells.len() - 1
    }
}

/// A nonnegative-definite quadratic form `sum_i (sum_q d(i,q) T_sum[q])^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadSpec {
    pub name: String,
    /// `tau x sum_refs.len()` coefficient rows.
    pub coeffs: Vec<Vec<f64>>,
    /// Zero-based triple indices whose summing statistics enter the form.
    pub sum_refs: Vec<usize>,
}

impl QuadSpec {
    pub fn rows(&self) -> usize {
        self.coeffs.len()
    }

    /// Coefficient of triple `q` in row `i` (zero when `q` is not referenced).
    pub fn coefficient(&self, i: usize, q: usize) -> f64 {
        self.sum_refs
            .iter()
            .zip(&self.coeffs[i])
            .filter(|(r, _)| **r == q)
            .map(|(_, d)| *d)
            .sum()
    }
}

/// Triple of statistics `(T_sum, T_lb, T_sb)` sharing the index `q`.
#[derive(Debug, Clone)]
pub struct Triple {
    pub sum: SumSpec,
    pub lb: LongBlockSpec,
    pub sb: ShortBlockSpec,
}

impl Triple {
    pub fn new(sum: SumSpec, lb: LongBlockSpec, sb: ShortBlockSpec) -> Self {
        Triple { sum, lb, sb }
    }

    /// A triple holding only a summing statistic: the long-block member
    /// mirrors the summing function over one block and the short-block
    /// member is the trivial classifier. Both are marked auxiliary.
    pub fn sum_only(sum: SumSpec) -> Self {
        let mut lb = LongBlockSpec::new(sum.f.clone(), 1, Moments::exact(sum.mean, sum.sigma));
        lb.bound = sum.bound;
        lb.auxiliary = true;
        Triple {
            sum,
            lb,
            sb: ShortBlockSpec::trivial(),
        }
    }
}

/// A full battery description: null model, triples, quadratic statistics and
/// the decomposition parameters.
#[derive(Debug, Clone)]
pub struct BatteryConfig {
    pub null: NullModel,
    pub triples: Vec<Triple>,
    pub quads: Vec<QuadSpec>,
    /// `N`: number of disjoint blocks of the decomposition.
    pub blocks: usize,
    /// `h`: stride between retained chains.
    pub stride: usize,
    /// `s`: chain length.
    pub chain: usize,
    /// Sample length.
    pub n: usize,
}

/// A battery whose invariants were checked, with derived constants.
#[derive(Debug, Clone)]
pub struct ValidatedBattery {
    config: BatteryConfig,
    min_chain: usize,
    k_star: usize,
    warnings: Vec<String>,
}

impl ValidatedBattery {
    pub fn config(&self) -> &BatteryConfig {
        &self.config
    }

    pub fn triples(&self) -> &[Triple] {
        &self.config.triples
    }

    pub fn quads(&self) -> &[QuadSpec] {
        &self.config.quads
    }

    pub fn null(&self) -> &NullModel {
        &self.config.null
    }

    pub fn n(&self) -> usize {
        self.config.n
    }

    /// `s*` lower bound: `h + max_q max(m_sum, m_lb) - 1`.
    pub fn min_chain(&self) -> usize {
        self.min_chain
    }

    /// `K* = 3Q + sum_q K_sb`.
    pub fn k_star(&self) -> usize {
        self.k_star
    }

    /// Number of statistics, `3Q + J`.
    pub fn statistic_count(&self) -> usize {
        3 * self.config.triples.len() + self.config.quads.len()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Same battery at another sample length.
    pub fn with_len(&self, n: usize) -> Result<ValidatedBattery, ModelError> {
        let mut config = self.config.clone();
        config.n = n;
        validate_battery(config)
    }

    pub fn into_config(self) -> BatteryConfig {
        self.config
    }
}

/// Checks every battery invariant and fills in `s*`, `K*`.
pub fn validate_battery(config: BatteryConfig) -> Result<ValidatedBattery, ModelError> {
    config.null.validate()?;
    if config.triples.is_empty() {
        return Err(ModelError::InvalidBattery("no triples".into()));
    }
    if config.blocks == 0 || config.stride == 0 || config.chain == 0 {
        return Err(ModelError::InvalidBattery(
            "N, h and s must be positive".into(),
        ));
    }
    let mut warnings = Vec::new();
    let mut max_window = 1;
    let min_n = config.blocks * (2 * config.stride - 1);
    for (q, t) in config.triples.iter().enumerate() {
        let label = q + 1;
        for (statistic, sigma) in [("sum", t.sum.sigma), ("lb", t.lb.sigma)] {
            if !(sigma.is_finite() && sigma > 0.0) {
                return Err(ModelError::DegenerateSigma {
                    triple: label,
                    statistic,
                    sigma,
                });
            }
        }
        if !t.sum.mean.is_finite() || !t.lb.mean.is_finite() {
            return Err(ModelError::NonFiniteMoment);
        }
        if t.lb.blocks == 0 {
            return Err(ModelError::InvalidBattery(format!(
                "triple {label}: N_lb must be positive"
            )));
        }
        if t.sb.cells.len() != t.sb.classifier.classes() {
            return Err(ModelError::InvalidBattery(format!(
                "triple {label}: {} cells for {} classes",
                t.sb.cells.len(),
                t.sb.classifier.classes()
            )));
        }
        check_cells(&t.sb.cells, Some(label))?;
        if !config.blocks.is_multiple_of(t.lb.blocks) {
            return Err(ModelError::DivisibilityViolation {
                triple: label,
                constraint: format!(
                    "N_lb = {} does not divide N = {}",
                    t.lb.blocks, config.blocks
                ),
            });
        }
        if !config.stride.is_multiple_of(t.sb.block_len()) {
            return Err(ModelError::DivisibilityViolation {
                triple: label,
                constraint: format!(
                    "L_sb = {} does not divide h = {}",
                    t.sb.block_len(),
                    config.stride
                ),
            });
        }
        if t.sum.bound.is_none() && !matches!(config.null, NullModel::Finite { .. }) {
            warnings.push(format!(
                "triple {label}: f_sum has no declared bound; limit theory holds under H0 only"
            ));
        }
        if t.lb.bound.is_none() && !matches!(config.null, NullModel::Finite { .. }) {
            warnings.push(format!(
                "triple {label}: f_lb has no declared bound; limit theory holds under H0 only"
            ));
        }
        max_window = max_window.max(t.sum.window()).max(t.lb.window());
    }
    let min_chain = config.stride + max_window - 1;
    if config.chain < min_chain {
        return Err(ModelError::WindowTooShort {
            chain: config.chain,
            required: min_chain,
        });
    }
    if config.n < min_n {
        return Err(ModelError::SampleTooShort {
            n: config.n,
            required: min_n,
        });
    }
    let q_count = config.triples.len();
    for quad in &config.quads {
        if quad.coeffs.is_empty() {
            return Err(ModelError::InvalidBattery(format!(
                "quadratic statistic {} has no rows",
                quad.name
            )));
        }
        if let Some(r) = quad.sum_refs.iter().find(|r| **r >= q_count) {
            return Err(ModelError::InvalidBattery(format!(
                "quadratic statistic {} references triple {} of {q_count}",
                quad.name,
                r + 1
            )));
        }
        if quad
            .coeffs
            .iter()
            .any(|row| row.len() != quad.sum_refs.len() || row.iter().any(|d| !d.is_finite()))
        {
            return Err(ModelError::InvalidBattery(format!(
                "quadratic statistic {} has malformed coefficient rows",
                quad.name
            )));
        }
    }
    let k_star = 3 * q_count + config.triples.iter().map(|t| t.sb.dof()).sum::<usize>();
    Ok(ValidatedBattery {
        config,
        min_chain,
        k_star,
        warnings,
    })
}

/// Smallest `N` and `h` compatible with the triples' `N_lb` and `L_sb`.
pub fn minimal_decomposition(triples: &[Triple]) -> (usize, usize) {
    let n = triples.iter().fold(1, |acc, t| lcm(acc, t.lb.blocks));
    let h = triples.iter().fold(1, |acc, t| lcm(acc, t.sb.block_len()));
    (n, h)
}
