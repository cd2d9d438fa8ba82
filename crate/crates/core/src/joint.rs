//! Joint asymptotics of a battery: the stacked window functional `f*`, the
//! block sums `X*`/`Y`, the covariance matrices `Phi*` and `G*`, a sampler of
//! the Gaussian limit and the zero-block independence criterion.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    enumerate_tuples, ModelError, NullModel, ValidatedBattery, DEFAULT_ENUMERATION_CAP,
};
use crate::numeric::{lcm, CompensatedSum};
use crate::rng::chunked;
use crate::statistics::Sequence;

/// Eigenvalues below `-PSD_TOLERANCE * lambda_max` reject an estimate.
pub const PSD_TOLERANCE: f64 = 1e-8;
/// Eigenvalues below `CLAMP_THRESHOLD * lambda_max` are zeroed when sampling.
pub const CLAMP_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JointError {
    #[error("window of length {len} is shorter than s* = {required}")]
    WindowTooShort { len: usize, required: usize },
    #[error("sequence of length {got} is too short (need N*s = {needed})")]
    SequenceTooShort { needed: usize, got: usize },
    #[error("covariance estimate is indefinite: min eigenvalue {min} vs max {max}")]
    IndefiniteEstimate { min: f64, max: f64 },
    #[error("matrix is not positive semidefinite: min eigenvalue {min} vs max {max}")]
    NotPSD { min: f64, max: f64 },
    #[error("unknown statistic {0}")]
    UnknownStatistic(String),
    #[error("window function returned a non-finite value")]
    NonFiniteValue,
    #[error("unsupported method: {0}")]
    UnsupportedMethod(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Coordinates of one triple inside `f*`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleRange {
    /// `K_sb + 1` short-block cell coordinates.
    pub sb: Range<usize>,
    pub lb: usize,
    pub sum: usize,
    pub sb_block_len: usize,
    pub lb_blocks: usize,
}

impl TripleRange {
    /// All coordinates of the triple.
    pub fn span(&self) -> Range<usize> {
        self.sb.start..self.sum + 1
    }
}

/// The `K*`-dimensional coordinate map of `f*` plus the decomposition
/// constants and the exact centring `E f*_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointLayout {
    pub k_star: usize,
    pub triples: Vec<TripleRange>,
    pub min_chain: usize,
    pub blocks: usize,
    pub chain: usize,
    pub stride: usize,
    /// `E f*_j` under the battery's moment constants.
    pub centering: Vec<f64>,
    /// Per quadratic statistic, the triples with a nonzero coefficient.
    pub quad_support: Vec<Vec<usize>>,
}

pub fn build_layout(battery: &ValidatedBattery) -> JointLayout {
    let config = battery.config();
    let h = config.stride as f64;
    let mut triples = Vec::with_capacity(config.triples.len());
    let mut centering = Vec::with_capacity(battery.k_star());
    let mut start = 0;
    for t in &config.triples {
        let cells = t.sb.cells.len();
        let per_block = (config.stride / t.sb.block_len()) as f64;
        centering.extend(t.sb.cells.iter().map(|e| per_block * e.sqrt()));
        centering.push(h * t.lb.mean / t.lb.sigma);
        centering.push(h * t.sum.mean / t.sum.sigma);
        triples.push(TripleRange {
            sb: start..start + cells,
            lb: start + cells,
            sum: start + cells + 1,
            sb_block_len: t.sb.block_len(),
            lb_blocks: t.lb.blocks,
        });
        start += cells + 2;
    }
    debug_assert_eq!(start, battery.k_star());
    let quad_support = config
        .quads
        .iter()
        .map(|quad| {
            let mut support: Vec<usize> = (0..config.triples.len())
                .filter(|&q| (0..quad.rows()).any(|i| quad.coefficient(i, q) != 0.0))
                .collect();
            support.dedup();
            support
        })
        .collect();
    JointLayout {
        k_star: start,
        triples,
        min_chain: battery.min_chain(),
        blocks: config.blocks,
        chain: config.chain,
        stride: config.stride,
        centering,
        quad_support,
    }
}

/// Writes `f*(theta_1..theta_s*)` built with stride `span` into `out`.
/// Coordinates of triples whose short block does not divide `span` are
/// left untouched.
fn fill_f_star(
    battery: &ValidatedBattery,
    layout: &JointLayout,
    span: usize,
    window: &[f64],
    out: &mut [f64],
) -> bool {
    let mut finite = true;
    for (t, r) in battery.triples().iter().zip(&layout.triples) {
        let block = r.sb_block_len;
        if span.is_multiple_of(block) {
            let cells = &mut out[r.sb.clone()];
            cells.iter_mut().for_each(|c| *c = 0.0);
            for b in window[..span].chunks_exact(block) {
                cells[t.sb.classifier.classify(b)] += 1.0;
            }
            for (c, e) in cells.iter_mut().zip(&t.sb.cells) {
                *c /= e.sqrt();
            }
        }
        let mut lb = CompensatedSum::new();
        let mut sum = CompensatedSum::new();
        for u in 0..span {
            lb.add(t.lb.f.call(&window[u..]));
            sum.add(t.sum.f.call(&window[u..]));
        }
        out[r.lb] = lb.value() / t.lb.sigma;
        out[r.sum] = sum.value() / t.sum.sigma;
        finite &= out[r.lb].is_finite() && out[r.sum].is_finite();
    }
    finite
}

/// `f*` on a window of at least `s*` elements.
pub fn eval_f_star(
    layout: &JointLayout,
    battery: &ValidatedBattery,
    window: &[f64],
) -> Result<Vec<f64>, JointError> {
    if window.len() < layout.min_chain {
        return Err(JointError::WindowTooShort {
            len: window.len(),
            required: layout.min_chain,
        });
    }
    let mut out = vec![0.0; layout.k_star];
    if !fill_f_star(battery, layout, layout.stride, window, &mut out) {
        return Err(JointError::NonFiniteValue);
    }
    Ok(out)
}

/// Finite-`n` block vectors: `x[k]` is `X*_{k+1}`, `y[q][k]` is `Y^[q]_{k+1}`
/// (block-`q` coordinates only, in layout order).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSums {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<Vec<f64>>>,
}

pub fn compute_block_sums(
    layout: &JointLayout,
    battery: &ValidatedBattery,
    seq: &Sequence,
) -> Result<BlockSums, JointError> {
    let n = seq.len();
    let (big_n, h, s) = (layout.blocks, layout.stride, layout.chain);
    if n < big_n * s {
        return Err(JointError::SequenceTooShort {
            needed: big_n * s,
            got: n,
        });
    }
    let data = seq.data();
    let len = n / big_n;
    let scale = (n as f64).sqrt().recip();
    let mut z = vec![0.0; layout.k_star];
    let mut x = Vec::with_capacity(big_n);
    for k in 1..=big_n {
        let first = (len * (k - 1)).div_ceil(h);
        let end = len * k - s; // s <= len, so no underflow
        let last = end / h;
        let mut acc = vec![CompensatedSum::new(); layout.k_star];
        for i in first..=last {
            let start = h * i;
            if !fill_f_star(
                battery,
                layout,
                h,
                &data[start..start + layout.min_chain],
                &mut z,
            ) {
                return Err(JointError::NonFiniteValue);
            }
            for ((a, v), c) in acc.iter_mut().zip(&z).zip(&layout.centering) {
                a.add(v - c);
            }
        }
        x.push(acc.iter().map(|a| a.value() * scale).collect());
    }
    let y = group_blocks(layout, &x);
    Ok(BlockSums { x, y })
}

/// Regroups `N` stacked vectors into per-triple sums over
/// `N / N_lb` consecutive vectors: the `Y` (or `zeta`) construction.
pub fn group_blocks(layout: &JointLayout, x: &[Vec<f64>]) -> Vec<Vec<Vec<f64>>> {
    layout
        .triples
        .iter()
        .map(|r| {
            let per = layout.blocks / r.lb_blocks;
            (0..r.lb_blocks)
                .map(|k| {
                    r.span()
                        .map(|j| {
                            x[per * k..per * (k + 1)]
                                .iter()
                                .map(|v| v[j])
                                .collect::<CompensatedSum>()
                                .value()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// The linear and quadratic forms applied to grouped block vectors:
/// `sum_k y_k(sum)`, `N_lb sum_k y_k(lb)^2`, `L_sb sum_j (sum_k y_k(j))^2`
/// per triple, then each quadratic form of the summing values. Applied to
/// `Y` this gives the finite-`n` skeleton of the statistics, applied to
/// `zeta` the limit vector.
pub fn limit_statistics(
    layout: &JointLayout,
    battery: &ValidatedBattery,
    grouped: &[Vec<Vec<f64>>],
) -> Vec<f64> {
    let mut out = Vec::with_capacity(battery.statistic_count());
    let mut sums = Vec::with_capacity(layout.triples.len());
    for (r, ys) in layout.triples.iter().zip(grouped) {
        let cells = r.sb.len();
        let sum: f64 = ys
            .iter()
            .map(|y| y[cells + 1])
            .collect::<CompensatedSum>()
            .value();
        let lb: f64 = ys
            .iter()
            .map(|y| y[cells] * y[cells])
            .collect::<CompensatedSum>()
            .value();
        let sb: f64 = (0..cells)
            .map(|j| {
                let t: f64 = ys.iter().map(|y| y[j]).collect::<CompensatedSum>().value();
                t * t
            })
            .collect::<CompensatedSum>()
            .value();
        sums.push(sum);
        out.push(sum);
        out.push(r.lb_blocks as f64 * lb);
        out.push(r.sb_block_len as f64 * sb);
    }
    for quad in battery.quads() {
        let theta = (0..quad.rows())
            .map(|i| {
                let lin: f64 = quad
                    .sum_refs
                    .iter()
                    .zip(&quad.coeffs[i])
                    .map(|(&q, d)| d * sums[q])
                    .collect::<CompensatedSum>()
                    .value();
                lin * lin
            })
            .collect::<CompensatedSum>()
            .value();
        out.push(theta);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum PhiMethod {
    /// Enumerate all windows of span `h floor((s-1)/h) + s*`.
    ExactEnumeration {
        cap: u64,
    },
    MonteCarlo {
        replicates: usize,
        seed: u64,
    },
    /// Block formulas inside each triple, super-block enumeration for the
    /// remaining entries. Requires `m_sum = m_lb = 1` and `s = h`.
    ClosedForm {
        cap: u64,
    },
}

impl Default for PhiMethod {
    fn default() -> Self {
        PhiMethod::ExactEnumeration {
            cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

impl PhiMethod {
    pub fn name(&self) -> &'static str {
        match self {
            PhiMethod::ExactEnumeration { .. } => "exact_enumeration",
            PhiMethod::MonteCarlo { .. } => "monte_carlo",
            PhiMethod::ClosedForm { .. } => "closed_form",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixMeta {
    pub method: String,
    /// Enumerated windows or Monte-Carlo replicates.
    pub samples: u64,
    /// Number of cross-window lags `floor((s-1)/h)`.
    pub lag_terms: usize,
    pub projected: bool,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
}

/// Estimated `Phi*` with optional per-entry standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiMatrix {
    pub matrix: DMatrix<f64>,
    pub std_errors: Option<DMatrix<f64>>,
    pub meta: MatrixMeta,
}

/// `G* = Phi* / (N h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GMatrix {
    pub matrix: DMatrix<f64>,
    pub std_errors: Option<DMatrix<f64>>,
    pub blocks: usize,
    pub stride: usize,
    pub meta: MatrixMeta,
}

impl PhiMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

impl GMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Lags `1..=floor((s-1)/h)`: the cross-window terms of `Phi*`.
pub fn lag_terms(layout: &JointLayout) -> usize {
    (layout.chain - 1) / layout.stride
}

/// Window span needed for `Z*_1..Z*_{1+lags}`.
pub fn phi_span(layout: &JointLayout) -> usize {
    layout.stride * lag_terms(layout) + layout.min_chain
}

pub fn estimate_phi(
    layout: &JointLayout,
    battery: &ValidatedBattery,
    method: &PhiMethod,
) -> Result<PhiMatrix, JointError> {
    let (matrix, std_errors, samples) = match method {
        PhiMethod::ExactEnumeration { cap } => {
            let (m, samples) = phi_exact(layout, battery, *cap)?;
            (m, None, samples)
        }
        PhiMethod::MonteCarlo { replicates, seed } => {
            let (m, se) = phi_monte_carlo(layout, battery, *replicates, *seed)?;
            (m, Some(se), *replicates as u64)
        }
        PhiMethod::ClosedForm { cap } => {
            let (m, samples) = phi_closed_form(layout, battery, *cap)?;
            (m, None, samples)
        }
    };
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(JointError::NonFiniteValue);
    }
    let (matrix, min, max, projected) = psd_check(matrix)?;
    Ok(PhiMatrix {
        matrix,
        std_errors,
        meta: MatrixMeta {
            method: method.name().to_string(),
            samples,
            lag_terms: if matches!(method, PhiMethod::ClosedForm { .. }) {
                0
            } else {
                lag_terms(layout)
            },
            projected,
            min_eigenvalue: min,
            max_eigenvalue: max,
        },
    })
}

/// Rejects clearly indefinite matrices and projects ones that are negative
/// beyond rounding onto the PSD cone. Matrices whose negative eigenvalues
/// are at rounding level are returned unchanged.
fn psd_check(matrix: DMatrix<f64>) -> Result<(DMatrix<f64>, f64, f64, bool), JointError> {
    let eig = SymmetricEigen::new(matrix.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if max <= 0.0 {
        return Ok((matrix, min, max, false));
    }
    if min < -PSD_TOLERANCE * max {
        return Err(JointError::IndefiniteEstimate { min, max });
    }
    let rounding = 64.0 * f64::EPSILON * max * matrix.nrows() as f64;
    if min >= -rounding {
        return Ok((matrix, min, max, false));
    }
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    let projected = v * DMatrix::from_diagonal(&clamped) * v.transpose();
    let symmetric = (&projected + projected.transpose()) * 0.5;
    Ok((symmetric, min, max, true))
}

fn require_finite(null: &NullModel) -> Result<(), JointError> {
    match null {
        NullModel::Finite { .. } => Ok(()),
        NullModel::Uniform => Err(JointError::UnsupportedMethod(
            "exact covariance needs a finite alphabet; use monte_carlo".into(),
        )),
    }
}

/// Evaluates `Z*_1..Z*_{1+lags}` on a window of span [`phi_span`].
fn fill_lagged(
    layout: &JointLayout,
    battery: &ValidatedBattery,
    window: &[f64],
    z: &mut [Vec<f64>],
) -> bool {
    let mut ok = true;
    for (lag, zl) in z.iter_mut().enumerate() {
        let start = lag * layout.stride;
        ok &= fill_f_star(
            battery,
            layout,
            layout.stride,
            &window[start..start + layout.min_chain],
            zl,
        );
    }
    ok
}

/// Accumulates `(Z1-mu)(Z1-mu)^T + sum_l [(Z1-mu)(Z_{1+l}-mu)^T + transpose]`
/// (upper triangle, weight `w`).
fn accumulate_phi_terms(
    z: &[Vec<f64>],
    mu: &[f64],
    w: f64,
    acc: &mut [CompensatedSum],
    sq: Option<&mut [CompensatedSum]>,
) {
    let k = mu.len();
    let d0: Vec<f64> = z[0].iter().zip(mu).map(|(a, b)| a - b).collect();
    let mut sq = sq;
    for u in 0..k {
        for v in u..k {
            let mut g = d0[u] * d0[v];
            for zl in &z[1..] {
                g += d0[u] * (zl[v] - mu[v]) + d0[v] * (zl[u] - mu[u]);
            }
            acc[u * k + v].add(w * g);
            if let Some(sq) = sq.as_deref_mut() {
                sq[u * k + v].add(g * g);
            }
        }
    }
}

fn symmetric_from_upper(k: usize, upper: impl Fn(usize, usize) -> f64) -> DMatrix<f64> {
    DMatrix::from_fn(k, k, |i, j| if i <= j { upper(i, j) } else { upper(j, i) })
}

fn phi_exact(
    layout: &JointLayout,
    battery: &ValidatedBattery,
    cap: u64,
) -> Result<(DMatrix<f64>, u64), JointError> {
    require_finite(battery.null())?;
    let k = layout.k_star;
    let span = phi_span(layout);
    let lags = lag_terms(layout);
    let mut z = vec![vec![0.0; k]; lags + 1];
    let mut mean = vec![CompensatedSum::new(); k];
    let mut ok = true;
    let mut samples = 0u64;
    enumerate_tuples(battery.null(), span, cap, |w, p| {
        ok &= fill_f_star(
            battery,
            layout,
            layout.stride,
            &w[..layout.min_chain],
            &mut z[0],
        );
        for (m, v) in mean.iter_mut().zip(&z[0]) {
            m.add(p * v);
        }
        samples += 1;
    })?;
    if !ok {
        return Err(JointError::NonFiniteValue);
    }
    let mu: Vec<f64> = mean.iter().map(CompensatedSum::value).collect();
    let mut acc = vec![CompensatedSum::new(); k * k];
    enumerate_tuples(battery.null(), span, cap, |w, p| {
        fill_lagged(layout, battery, w, &mut z);
        accumulate_phi_terms(&z, &mu, p, &mut acc, None);
    })?;
    Ok((
        symmetric_from_upper(k, |i, j| acc[i * k + j].value()),
        samples,
    ))
}

fn phi_monte_carlo(
    layout: &JointLayout,
    battery: &ValidatedBattery,
    replicates: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>), JointError> {
    if replicates < 2 {
        return Err(JointError::UnsupportedMethod(
            "Monte-Carlo covariance needs at least two replicates".into(),
        ));
    }
    let k = layout.k_star;
    let span = phi_span(layout);
    let lags = lag_terms(layout);
    let null = battery.null();
    let draw = |rng: &mut rand_chacha::ChaCha8Rng, buf: &mut [f64], z: &mut [Vec<f64>]| {
        for x in buf.iter_mut() {
            *x = null.sample(rng);
        }
        fill_lagged(layout, battery, buf, z)
    };
    let means = chunked(replicates, seed, |rng, count| {
        let mut buf = vec![0.0; span];
        let mut z = vec![vec![0.0; k]; lags + 1];
        let mut acc = vec![CompensatedSum::new(); k];
        let mut ok = true;
        for _ in 0..count {
            ok &= draw(rng, &mut buf, &mut z);
            for (a, v) in acc.iter_mut().zip(&z[0]) {
                a.add(*v);
            }
        }
        (acc, ok)
    });
    let mut mean = vec![CompensatedSum::new(); k];
    for (part, ok) in &means {
        if !ok {
            return Err(JointError::NonFiniteValue);
        }
        mean.iter_mut().zip(part).for_each(|(m, p)| m.merge(p));
    }
    let r = replicates as f64;
    let mu: Vec<f64> = mean.iter().map(|m| m.value() / r).collect();
    let parts = chunked(replicates, seed, |rng, count| {
        let mut buf = vec![0.0; span];
        let mut z = vec![vec![0.0; k]; lags + 1];
        let mut acc = vec![CompensatedSum::new(); k * k];
        let mut sq = vec![CompensatedSum::new(); k * k];
        for _ in 0..count {
            draw(rng, &mut buf, &mut z);
            accumulate_phi_terms(&z, &mu, 1.0, &mut acc, Some(&mut sq));
        }
        (acc, sq)
    });
    let mut acc = vec![CompensatedSum::new(); k * k];
    let mut sq = vec![CompensatedSum::new(); k * k];
    for (a, s) in &parts {
        acc.iter_mut().zip(a).for_each(|(x, y)| x.merge(y));
        sq.iter_mut().zip(s).for_each(|(x, y)| x.merge(y));
    }
    let est = symmetric_from_upper(k, |i, j| acc[i * k + j].value() / r);
    let se = symmetric_from_upper(k, |i, j| {
        let m = acc[i * k + j].value() / r;
        let var = (sq[i * k + j].value() / r - m * m).max(0.0) * r / (r - 1.0);
        (var / r).sqrt()
    });
    Ok((est, se))
}

fn phi_closed_form(
    layout: &JointLayout,
    battery: &ValidatedBattery,
    cap: u64,
) -> Result<(DMatrix<f64>, u64), JointError> {
    if layout.chain != layout.stride {
        return Err(JointError::UnsupportedMethod(
            "closed form covariance needs s = h".into(),
        ));
    }
    if battery
        .triples()
        .iter()
        .any(|t| t.sum.window() != 1 || t.lb.window() != 1)
    {
        return Err(JointError::UnsupportedMethod(
            "closed form covariance needs m_sum = m_lb = 1".into(),
        ));
    }
    require_finite(battery.null())?;
    let k = layout.k_star;
    let h = layout.stride as f64;
    let mut phi = DMatrix::zeros(k, k);
    let mut analytic = DMatrix::from_element(k, k, false);
    // same-kind blocks inside a triple
    for (t, r) in battery.triples().iter().zip(&layout.triples) {
        let per_block = h / r.sb_block_len as f64;
        for (a, ea) in r.sb.clone().zip(&t.sb.cells) {
            for (b, eb) in r.sb.clone().zip(&t.sb.cells) {
                let delta = if a == b { 1.0 } else { 0.0 };
                phi[(a, b)] = per_block * (delta - (ea * eb).sqrt());
                analytic[(a, b)] = true;
            }
        }
        for c in [r.lb, r.sum] {
            phi[(c, c)] = h;
            analytic[(c, c)] = true;
        }
    }
    // remaining entries: h / l times the covariance over one super-block of
    // length l = lcm of the two coordinates' block lengths
    let block_len = |c: usize| {
        layout
            .triples
            .iter()
            .find(|r| r.sb.contains(&c))
            .map_or(1, |r| r.sb_block_len)
    };
    let mut spans: Vec<usize> = Vec::new();
    for u in 0..k {
        for v in u..k {
            if !analytic[(u, v)] {
                let l = lcm(block_len(u), block_len(v));
                if !spans.contains(&l) {
                    spans.push(l);
                }
            }
        }
    }
    spans.sort_unstable();
    let mut samples = 0u64;
    for l in spans {
        let members: Vec<usize> = (0..k).filter(|&c| l % block_len(c) == 0).collect();
        let mut z = vec![0.0; k];
        let mut mean = vec![CompensatedSum::new(); k];
        let mut ok = true;
        enumerate_tuples(battery.null(), l, cap, |w, p| {
            ok &= fill_f_star(battery, layout, l, w, &mut z);
            for &c in &members {
                mean[c].add(p * z[c]);
            }
            samples += 1;
        })?;
        if !ok {
            return Err(JointError::NonFiniteValue);
        }
        let mu: Vec<f64> = mean.iter().map(CompensatedSum::value).collect();
        let mut acc = vec![CompensatedSum::new(); k * k];
        enumerate_tuples(battery.null(), l, cap, |w, p| {
            fill_f_star(battery, layout, l, w, &mut z);
            for (i, &u) in members.iter().enumerate() {
                for &v in &members[i..] {
                    acc[u * k + v].add(p * (z[u] - mu[u]) * (z[v] - mu[v]));
                }
            }
        })?;
        for (i, &u) in members.iter().enumerate() {
            for &v in &members[i..] {
                if !analytic[(u, v)] && lcm(block_len(u), block_len(v)) == l {
                    let value = h / l as f64 * acc[u * k + v].value();
                    phi[(u, v)] = value;
                    phi[(v, u)] = value;
                }
            }
        }
    }
    Ok((phi, samples))
}

pub fn compute_g(phi: &PhiMatrix, blocks: usize, stride: usize) -> GMatrix {
    let scale = (blocks * stride) as f64;
    GMatrix {
        matrix: phi.matrix.map(|v| v / scale),
        std_errors: phi.std_errors.as_ref().map(|se| se.map(|v| v / scale)),
        blocks,
        stride,
        meta: phi.meta.clone(),
    }
}

/// Draws from the joint limit law, one row per draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitSampleSet {
    pub labels: Vec<String>,
    pub draws: Vec<Vec<f64>>,
    pub seed: u64,
}

impl LimitSampleSet {
    pub fn column(&self, i: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[i]).collect()
    }
}

/// Symmetric square root factor `V diag(sqrt(lambda))` with small
/// eigenvalues clamped to zero.
pub fn gaussian_factor(g: &DMatrix<f64>) -> Result<DMatrix<f64>, JointError> {
    let eig = SymmetricEigen::new(g.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min < -PSD_TOLERANCE * max.max(0.0) {
        return Err(JointError::NotPSD { min, max });
    }
    let roots: DVector<f64> = eig.eigenvalues.map(|l| {
        if l < CLAMP_THRESHOLD * max {
            0.0
        } else {
            l.sqrt()
        }
    });
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

pub fn sample_limit(
    g: &GMatrix,
    layout: &JointLayout,
    battery: &ValidatedBattery,
    draws: usize,
    seed: u64,
) -> Result<LimitSampleSet, JointError> {
    let factor = gaussian_factor(&g.matrix)?;
    let k = layout.k_star;
    let chunks = chunked(draws, seed, |rng, count| {
        let mut out = Vec::with_capacity(count);
        let mut normals = DVector::zeros(k);
        for _ in 0..count {
            let eta: Vec<Vec<f64>> = (0..layout.blocks)
                .map(|_| {
                    for v in normals.iter_mut() {
                        *v = StandardNormal.sample(rng);
                    }
                    (&factor * &normals).iter().copied().collect()
                })
                .collect();
            let zeta = group_blocks(layout, &eta);
            out.push(limit_statistics(layout, battery, &zeta));
        }
        out
    });
    Ok(LimitSampleSet {
        labels: crate::statistics::statistic_labels(battery),
        draws: chunks.into_iter().flatten().collect(),
        seed,
    })
}

/// A statistic of a battery (zero-based indices).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StatRef {
    Sum(usize),
    LongBlock(usize),
    ShortBlock(usize),
    Quad(usize),
}

impl fmt::Display for StatRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StatRef::Sum(q) => write!(f, "sum[{}]", q + 1),
            StatRef::LongBlock(q) => write!(f, "lb[{}]", q + 1),
            StatRef::ShortBlock(q) => write!(f, "sb[{}]", q + 1),
            StatRef::Quad(j) => write!(f, "quad[{}]", j + 1),
        }
    }
}

impl FromStr for StatRef {
    type Err = JointError;

    /// Parses labels such as `sum[1]` (one-based).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || JointError::UnknownStatistic(s.to_string());
        let (kind, rest) = s.split_once('[').ok_or_else(bad)?;
        let index: usize = rest
            .strip_suffix(']')
            .ok_or_else(bad)?
            .parse()
            .map_err(|_| bad())?;
        let index = index.checked_sub(1).ok_or_else(bad)?;
        match kind {
            "sum" => Ok(StatRef::Sum(index)),
            "lb" => Ok(StatRef::LongBlock(index)),
            "sb" => Ok(StatRef::ShortBlock(index)),
            "quad" => Ok(StatRef::Quad(index)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for StatRef {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StatRef {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Coordinates of `f*` that a statistic depends on.
pub fn alpha_set(layout: &JointLayout, stat: StatRef) -> Result<Vec<usize>, JointError> {
    let unknown = || JointError::UnknownStatistic(stat.to_string());
    let triple = |q: usize| layout.triples.get(q).ok_or_else(unknown);
    Ok(match stat {
        StatRef::Sum(q) => vec![triple(q)?.sum],
        StatRef::LongBlock(q) => vec![triple(q)?.lb],
        StatRef::ShortBlock(q) => triple(q)?.sb.clone().collect(),
        StatRef::Quad(j) => layout
            .quad_support
            .get(j)
            .ok_or_else(unknown)?
            .iter()
            .map(|&q| layout.triples[q].sum)
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Tolerance {
    /// Zero (up to rounding of the exact computation) for exact matrices,
    /// five standard errors for Monte-Carlo ones.
    Default,
    Absolute {
        value: f64,
    },
}

/// Relative size of rounding noise tolerated around an exact zero.
pub const EXACT_ZERO_RELATIVE: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub u: usize,
    pub v: usize,
    pub value: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairVerdict {
    pub first: usize,
    pub second: usize,
    pub independent: bool,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndependenceReport {
    pub independent: bool,
    pub pairs: Vec<PairVerdict>,
    pub note: String,
}

/// Declares groups of statistics asymptotically independent iff `G*`
/// vanishes on the cross product of their coordinate sets. The verdict
/// assumes the block vectors are asymptotically Gaussian with covariance
/// `G*`, which holds under H0.
pub fn check_independence(
    g: &GMatrix,
    layout: &JointLayout,
    groups: &[Vec<StatRef>],
    tol: Tolerance,
) -> Result<IndependenceReport, JointError> {
    let sets: Vec<Vec<usize>> = groups
        .iter()
        .map(|group| {
            let mut set = Vec::new();
            for &stat in group {
                set.extend(alpha_set(layout, stat)?);
            }
            set.sort_unstable();
            set.dedup();
            Ok(set)
        })
        .collect::<Result<_, JointError>>()?;
    let scale = g.matrix.amax();
    let threshold = |u: usize, v: usize| match (tol, &g.std_errors) {
        (Tolerance::Absolute { value }, _) => value,
        (Tolerance::Default, Some(se)) => 5.0 * se[(u, v)],
        (Tolerance::Default, None) => EXACT_ZERO_RELATIVE * scale,
    };
    let mut pairs = Vec::new();
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let mut violations = Vec::new();
            for &u in &sets[i] {
                for &v in &sets[j] {
                    let value = g.matrix[(u, v)];
                    let limit = threshold(u, v);
                    if value.abs() > limit {
                        violations.push(Violation {
                            u,
                            v,
                            value,
                            threshold: limit,
                        });
                    }
                }
            }
            pairs.push(PairVerdict {
                first: i,
                second: j,
                independent: violations.is_empty(),
                violations,
            });
        }
    }
    Ok(IndependenceReport {
        independent: pairs.iter().all(|p| p.independent),
        pairs,
        note: "verdict assumes Gaussian block vectors with covariance G* (holds under H0)".into(),
    })
}
