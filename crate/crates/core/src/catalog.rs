//! Concrete test instances: NIST/TestU01-style summing, long-block and
//! short-block statistics, bit extraction, GF(2) rank and the serial-over
//! statistic with its quadratic-form twin.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    compute_sum_moments, Classifier, LongBlockSpec, ModelError, MomentMethod, Moments, NullModel,
    SampleSpace, ShortBlockSpec, SumSpec, Triple, WindowFn,
};
use crate::statistics::Sequence;

/// Largest dense count table for the serial-over statistic.
pub const SERIAL_CAP: usize = 1 << 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CatalogError {
    #[error("value {0} is out of range")]
    OutOfRange(f64),
    #[error("unknown test {0}")]
    UnknownTest(String),
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("test {test} does not apply to the null model: {reason}")]
    SpaceMismatch { test: &'static str, reason: String },
    #[error("count table of {size} cells exceeds the cap {cap}")]
    CapExceeded { size: u128, cap: usize },
    #[error("sequence of length {got} is shorter than the tuple length {needed}")]
    SequenceTooShort { needed: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// The `r_bits` leading binary digits of `theta`: bit `i` is
/// `floor(theta 2^i) mod 2`, most significant first; `theta = 1` gives all ones.
pub fn g_bits(theta: f64, r_bits: u32) -> Result<Vec<u8>, CatalogError> {
    let v = g_value(theta, r_bits)?;
    Ok((0..r_bits).rev().map(|i| ((v >> i) & 1) as u8).collect())
}

/// [`g_bits`] packed into an integer symbol in `0..2^r_bits`.
pub fn g_value(theta: f64, r_bits: u32) -> Result<u64, CatalogError> {
    if !(1..=52).contains(&r_bits) {
        return Err(CatalogError::BadParams(format!(
            "r_bits = {r_bits} outside 1..=52"
        )));
    }
    if !(0.0..=1.0).contains(&theta) {
        return Err(CatalogError::OutOfRange(theta));
    }
    let top = (1u64 << r_bits) - 1;
    Ok(((theta * (1u64 << r_bits) as f64) as u64).min(top))
}

#[inline]
fn symbol(theta: f64, r_bits: u32) -> u64 {
    let top = (1u64 << r_bits) - 1;
    ((theta * (1u64 << r_bits) as f64) as u64).min(top)
}

/// Rank over GF(2) of a matrix given as rows of 0/1 entries.
pub fn gf2_rank(rows: &[Vec<u8>]) -> usize {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let words = cols.div_ceil(64).max(1);
    let mut packed: Vec<Vec<u64>> = rows
        .iter()
        .map(|row| {
            let mut w = vec![0u64; words];
            for (j, &b) in row.iter().enumerate() {
                if b & 1 == 1 {
                    w[j / 64] |= 1 << (j % 64);
                }
            }
            w
        })
        .collect();
    gf2_rank_packed(&mut packed, cols)
}

/// Gaussian elimination on bitset rows; destroys the input.
pub fn gf2_rank_packed(rows: &mut [Vec<u64>], cols: usize) -> usize {
    let mut rank = 0;
    for c in 0..cols {
        let (word, bit) = (c / 64, 1u64 << (c % 64));
        let Some(pivot) = (rank..rows.len()).find(|&r| rows[r][word] & bit != 0) else {
            continue;
        };
        rows.swap(rank, pivot);
        let (head, tail) = rows.split_at_mut(rank + 1);
        let pivot_row = &head[rank];
        for row in tail.iter_mut() {
            if row[word] & bit != 0 {
                row.iter_mut().zip(pivot_row).for_each(|(a, b)| *a ^= b);
            }
        }
        rank += 1;
        if rank == rows.len() {
            break;
        }
    }
    rank
}

/// `P(rank = k)` for a `v1 x v2` matrix of independent fair bits.
pub fn rank_probability(v1: usize, v2: usize, k: usize) -> f64 {
    if k > v1.min(v2) {
        return 0.0;
    }
    let mut p = 2f64.powi((k * (v1 + v2 - k)) as i32 - (v1 * v2) as i32);
    for i in 0..k {
        let a = 1.0 - 2f64.powi(i as i32 - v1 as i32);
        let b = 1.0 - 2f64.powi(i as i32 - v2 as i32);
        let c = 1.0 - 2f64.powi(i as i32 - k as i32);
        p *= a * b / c;
    }
    p
}

/// Stable identifiers of the catalog tests with their parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "test", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestId {
    /// Summing statistic of the bits themselves.
    Monobit,
    /// Long-block statistic of the bits over `n_lb` blocks.
    BlockFrequency { n_lb: usize },
    /// Short-block statistic of the number of ones in blocks of `l_sb` bits.
    OnesCount { l_sb: usize },
    /// Summing statistic of `theta` under the uniform law.
    MeanUniform,
    /// Summing statistic of `(theta - 1/2)^2` under the uniform law.
    CenteredSquare,
    /// Long-block statistic of `theta` under the uniform law.
    UniformLbMean { n_lb: usize },
    /// Lag-`k` products `theta_i theta_{i+k}`.
    SampleCorr { k: usize },
    /// Number of values in `[alpha, beta)` per block, grouped by `classes`.
    WeightDistrib {
        alpha: f64,
        beta: f64,
        l_sb: usize,
        classes: Vec<Vec<usize>>,
    },
    /// Ordering pattern of `l_sb` consecutive values.
    Permutation { l_sb: usize },
    /// GF(2) rank of a `v1 x v2` matrix filled from `g_bits`.
    MatrixRank {
        v1: usize,
        v2: usize,
        r_bits: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        classes: Option<Vec<Vec<usize>>>,
    },
    /// Long-block statistic of the sum of set-bit positions of `g_bits`.
    HammingWeight2 { r_bits: u32, n_lb: usize },
}

impl TestId {
    pub fn name(&self) -> &'static str {
        match self {
            TestId::Monobit => "monobit",
            TestId::BlockFrequency { .. } => "block_frequency",
            TestId::OnesCount { .. } => "ones_count",
            TestId::MeanUniform => "mean_uniform",
            TestId::CenteredSquare => "centered_square",
            TestId::UniformLbMean { .. } => "uniform_lb_mean",
            TestId::SampleCorr { .. } => "sample_corr",
            TestId::WeightDistrib { .. } => "weight_distrib",
            TestId::Permutation { .. } => "permutation",
            TestId::MatrixRank { .. } => "matrix_rank",
            TestId::HammingWeight2 { .. } => "hamming_weight2",
        }
    }
}

/// A single populated statistic specification.
#[derive(Debug, Clone)]
pub enum StatisticSpec {
    Sum(SumSpec),
    LongBlock(LongBlockSpec),
    ShortBlock(ShortBlockSpec),
}

impl StatisticSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            StatisticSpec::Sum(_) => "sum",
            StatisticSpec::LongBlock(_) => "lb",
            StatisticSpec::ShortBlock(_) => "sb",
        }
    }
}

fn binary_p(test: &'static str, null: &NullModel) -> Result<f64, CatalogError> {
    match null {
        NullModel::Finite { pmf } if pmf.len() == 2 => Ok(pmf[1]),
        _ => Err(CatalogError::SpaceMismatch {
            test,
            reason: "needs a binary alphabet".into(),
        }),
    }
}

fn require_uniform(test: &'static str, null: &NullModel) -> Result<(), CatalogError> {
    match null {
        NullModel::Uniform => Ok(()),
        _ => Err(CatalogError::SpaceMismatch {
            test,
            reason: "needs the uniform law on [0, 1]".into(),
        }),
    }
}

fn binomial_pmf(n: usize, p: f64) -> Vec<f64> {
    let mut pmf = Vec::with_capacity(n + 1);
    let mut choose = 1.0;
    for k in 0..=n {
        if k > 0 {
            choose = choose * (n - k + 1) as f64 / k as f64;
        }
        pmf.push(choose * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32));
    }
    pmf
}

/// Maps every value in `0..=max` to its class; classes must partition it.
fn partition_map(classes: &[Vec<usize>], max: usize) -> Result<Vec<usize>, CatalogError> {
    let mut map = vec![usize::MAX; max + 1];
    for (c, class) in classes.iter().enumerate() {
        if class.is_empty() {
            return Err(CatalogError::BadParams(format!("class {c} is empty")));
        }
        for &v in class {
            if v > max {
                return Err(CatalogError::BadParams(format!(
                    "class value {v} exceeds {max}"
                )));
            }
            if map[v] != usize::MAX {
                return Err(CatalogError::BadParams(format!(
                    "value {v} is in two classes"
                )));
            }
            map[v] = c;
        }
    }
    if let Some(v) = map.iter().position(|c| *c == usize::MAX) {
        return Err(CatalogError::BadParams(format!("value {v} is in no class")));
    }
    Ok(map)
}

fn aggregate(pmf: &[f64], classes: &[Vec<usize>]) -> Vec<f64> {
    classes
        .iter()
        .map(|c| c.iter().map(|&v| pmf[v]).sum())
        .collect()
}

/// Index of the ordering pattern of `block` in `0..len!`; ties are broken
/// by position.
pub fn permutation_index(block: &[f64]) -> usize {
    let len = block.len();
    let mut index = 0;
    for i in 0..len {
        // Lehmer digit: later elements ranked below element i
        let smaller = (i + 1..len)
            .filter(|&j| block[j] < block[i] || (block[j] == block[i] && j < i))
            .count();
        index = index * (len - i) + smaller;
    }
    index
}

fn factorial(n: usize) -> usize {
    (1..=n).product()
}

/// Default rank classes `{<= min-2}, {min-1}, {min}` (empty ones dropped).
pub fn default_rank_classes(v1: usize, v2: usize) -> Vec<Vec<usize>> {
    let top = v1.min(v2);
    let mut classes = Vec::new();
    if top >= 2 {
        classes.push((0..=top - 2).collect());
    }
    if top >= 1 {
        classes.push(vec![top - 1]);
    }
    classes.push(vec![top]);
    classes
}

/// Builds the statistic named by `test` for the given null model, with
/// closed-form moments or cell probabilities where they are known.
pub fn instantiate_test(test: &TestId, null: &NullModel) -> Result<StatisticSpec, CatalogError> {
    let name = test.name();
    let spec = match test {
        TestId::Monobit => {
            binary_p(name, null)?;
            let f = WindowFn::new(name, 1, |w| w[0]);
            let m = compute_sum_moments(&f, null, &MomentMethod::default())?;
            StatisticSpec::Sum(SumSpec::new(f, m).with_bound(1.0))
        }
        TestId::BlockFrequency { n_lb } => {
            binary_p(name, null)?;
            positive(*n_lb, "n_lb")?;
            let f = WindowFn::new(name, 1, |w| w[0]);
            let m = compute_sum_moments(&f, null, &MomentMethod::default())?;
            StatisticSpec::LongBlock(LongBlockSpec::new(f, *n_lb, m).with_bound(1.0))
        }
        TestId::OnesCount { l_sb } => {
            let p = binary_p(name, null)?;
            positive(*l_sb, "l_sb")?;
            let cls = Classifier::new(name, *l_sb, l_sb + 1, |b| {
                b.iter().filter(|x| **x == 1.0).count()
            });
            StatisticSpec::ShortBlock(ShortBlockSpec::new(cls, binomial_pmf(*l_sb, p)))
        }
        TestId::MeanUniform => {
            require_uniform(name, null)?;
            let f = WindowFn::new(name, 1, |w| w[0]);
            StatisticSpec::Sum(
                SumSpec::new(f, Moments::exact(0.5, (1.0f64 / 12.0).sqrt())).with_bound(1.0),
            )
        }
        TestId::CenteredSquare => {
            require_uniform(name, null)?;
            let f = WindowFn::new(name, 1, |w| (w[0] - 0.5) * (w[0] - 0.5));
            StatisticSpec::Sum(
                SumSpec::new(f, Moments::exact(1.0 / 12.0, (1.0f64 / 180.0).sqrt()))
                    .with_bound(0.25),
            )
        }
        TestId::UniformLbMean { n_lb } => {
            require_uniform(name, null)?;
            positive(*n_lb, "n_lb")?;
            let f = WindowFn::new(name, 1, |w| w[0]);
            StatisticSpec::LongBlock(
                LongBlockSpec::new(f, *n_lb, Moments::exact(0.5, (1.0f64 / 12.0).sqrt()))
                    .with_bound(1.0),
            )
        }
        TestId::SampleCorr { k } => {
            require_uniform(name, null)?;
            positive(*k, "k")?;
            let lag = *k;
            let f = WindowFn::new(name, lag + 1, move |w| w[0] * w[lag]);
            // Var(t1 t_{k+1}) = 7/144, plus 2 cov with the window sharing t_{k+1}
            StatisticSpec::Sum(
                SumSpec::new(f, Moments::exact(0.25, 13f64.sqrt() / 12.0)).with_bound(1.0),
            )
        }
        TestId::WeightDistrib {
            alpha,
            beta,
            l_sb,
            classes,
        } => {
            require_uniform(name, null)?;
            positive(*l_sb, "l_sb")?;
            if !(0.0 <= *alpha && alpha < beta && *beta <= 1.0) {
                return Err(CatalogError::BadParams(format!(
                    "need 0 <= alpha < beta <= 1, got [{alpha}, {beta})"
                )));
            }
            let map = partition_map(classes, *l_sb)?;
            let (a, b) = (*alpha, *beta);
            let cls = Classifier::new(name, *l_sb, classes.len(), move |blk| {
                map[blk.iter().filter(|x| a <= **x && **x < b).count()]
            });
            let cells = aggregate(&binomial_pmf(*l_sb, beta - alpha), classes);
            StatisticSpec::ShortBlock(ShortBlockSpec::new(cls, cells))
        }
        TestId::Permutation { l_sb } => {
            require_uniform(name, null)?;
            if !(2..=10).contains(l_sb) {
                return Err(CatalogError::BadParams(format!(
                    "l_sb = {l_sb} outside 2..=10"
                )));
            }
            let count = factorial(*l_sb);
            let cls = Classifier::new(name, *l_sb, count, permutation_index);
            StatisticSpec::ShortBlock(ShortBlockSpec::new(cls, vec![1.0 / count as f64; count]))
        }
        TestId::MatrixRank {
            v1,
            v2,
            r_bits,
            classes,
        } => matrix_rank(name, *v1, *v2, *r_bits, classes.as_deref(), null)?,
        TestId::HammingWeight2 { r_bits, n_lb } => {
            require_uniform(name, null)?;
            positive(*n_lb, "n_lb")?;
            let r = *r_bits;
            if !(1..=52).contains(&r) {
                return Err(CatalogError::BadParams(format!(
                    "r_bits = {r} outside 1..=52"
                )));
            }
            let f = WindowFn::new(name, 1, move |w| {
                let v = symbol(w[0], r);
                (1..=r)
                    .filter(|i| (v >> (r - i)) & 1 == 1)
                    .map(f64::from)
                    .sum()
            });
            let rf = f64::from(r);
            let mean = rf * (rf + 1.0) / 4.0;
            let var = rf * (rf + 1.0) * (2.0 * rf + 1.0) / 24.0;
            StatisticSpec::LongBlock(
                LongBlockSpec::new(f, *n_lb, Moments::exact(mean, var.sqrt()))
                    .with_bound(rf * (rf + 1.0) / 2.0),
            )
        }
    };
    Ok(spec)
}

/// Completes a triple from whichever members are given. A missing summing
/// member mirrors the long-block function (or is the identity with its H0
/// moments), a missing long-block member mirrors the summing function over
/// one block, and a missing short-block member is the trivial one-cell
/// classifier. Filled members are marked auxiliary.
pub fn assemble_triple(
    sum: Option<SumSpec>,
    lb: Option<LongBlockSpec>,
    sb: Option<ShortBlockSpec>,
    null: &NullModel,
) -> Result<Triple, CatalogError> {
    let sum = match (sum, &lb) {
        (Some(sum), _) => sum,
        (None, Some(lb)) => {
            let mut s = SumSpec::new(lb.f.clone(), Moments::exact(lb.mean, lb.sigma));
            s.bound = lb.bound;
            s.auxiliary = true;
            s
        }
        (None, None) => {
            let f = WindowFn::new("identity", 1, |w| w[0]);
            let moments = match null {
                NullModel::Uniform => Moments::exact(0.5, (1.0f64 / 12.0).sqrt()),
                NullModel::Finite { .. } => {
                    compute_sum_moments(&f, null, &MomentMethod::default())?
                }
            };
            let mut s = SumSpec::new(f, moments);
            s.auxiliary = true;
            s
        }
    };
    let lb = lb.unwrap_or_else(|| {
        let mut lb = LongBlockSpec::new(sum.f.clone(), 1, Moments::exact(sum.mean, sum.sigma));
        lb.bound = sum.bound;
        lb.auxiliary = true;
        lb
    });
    Ok(Triple::new(
        sum,
        lb,
        sb.unwrap_or_else(ShortBlockSpec::trivial),
    ))
}

fn positive(v: usize, what: &str) -> Result<(), CatalogError> {
    if v == 0 {
        Err(CatalogError::BadParams(format!("{what} must be positive")))
    } else {
        Ok(())
    }
}

fn matrix_rank(
    name: &'static str,
    v1: usize,
    v2: usize,
    r_bits: u32,
    classes: Option<&[Vec<usize>]>,
    null: &NullModel,
) -> Result<StatisticSpec, CatalogError> {
    if v1 == 0 || v2 == 0 || v2 > 64 {
        return Err(CatalogError::BadParams(format!(
            "matrix shape {v1}x{v2} unsupported (1 <= v2 <= 64)"
        )));
    }
    let bits_from_symbol = match null {
        NullModel::Uniform => {
            if !(1..=52).contains(&r_bits) {
                return Err(CatalogError::BadParams(format!(
                    "r_bits = {r_bits} outside 1..=52"
                )));
            }
            false
        }
        NullModel::Finite { pmf } if pmf.len() == 2 && pmf[0] == 0.5 && r_bits == 1 => true,
        _ => {
            return Err(CatalogError::SpaceMismatch {
                test: name,
                reason: "needs uniform values or fair bits with r_bits = 1".into(),
            })
        }
    };
    let default_classes = default_rank_classes(v1, v2);
    let classes = classes.unwrap_or(&default_classes);
    let top = v1.min(v2);
    let map = partition_map(classes, top)?;
    let per_row = v2.div_ceil(r_bits as usize);
    let block_len = v1 * per_row;
    let pmf: Vec<f64> = (0..=top).map(|k| rank_probability(v1, v2, k)).collect();
    let cells = aggregate(&pmf, classes);
    let r = r_bits as usize;
    let cls = Classifier::new(name, block_len, classes.len(), move |blk| {
        let mut rows: Vec<Vec<u64>> = blk
            .chunks_exact(per_row)
            .map(|chunk| {
                let mut row = 0u64;
                let mut filled = 0;
                for &theta in chunk {
                    let v = if bits_from_symbol {
                        theta as u64
                    } else {
                        symbol(theta, r_bits)
                    };
                    for i in (0..r).rev() {
                        if filled == v2 {
                            break;
                        }
                        row |= ((v >> i) & 1) << filled;
                        filled += 1;
                    }
                }
                vec![row]
            })
            .collect();
        map[gf2_rank_packed(&mut rows, v2)]
    });
    Ok(StatisticSpec::ShortBlock(ShortBlockSpec::new(cls, cells)))
}

/// Tuple counts of the symbolised sequence `kappa_i = g_bits(e_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerialCounts {
    pub r_bits: u32,
    /// Alphabet size `R = 2^r_bits`.
    pub alphabet: usize,
    pub m: usize,
    pub n: usize,
    /// Cyclic counts of `m`-tuples over `kappa_1..kappa_n, kappa_1..kappa_{m-1}`.
    pub nu_m: Vec<u64>,
    /// Cyclic counts of `(m-1)`-tuples.
    pub nu_m1: Vec<u64>,
    /// Non-cyclic counts of `m`-tuples over windows `1..n-m+1`.
    pub nu_open: Vec<u64>,
}

/// Counts `m`-tuples (cyclically and non-cyclically) and `(m-1)`-tuples.
/// Unit-interval sequences are symbolised with [`g_value`]; finite
/// sequences over `2^r_bits` symbols are used as they are.
pub fn serial_over_counts(
    seq: &Sequence,
    r_bits: u32,
    m: usize,
) -> Result<SerialCounts, CatalogError> {
    if m < 2 {
        return Err(CatalogError::BadParams(
            "tuple length m must be at least 2".into(),
        ));
    }
    if !(1..=24).contains(&r_bits) {
        return Err(CatalogError::BadParams(format!(
            "r_bits = {r_bits} outside 1..=24"
        )));
    }
    let alphabet = 1usize << r_bits;
    let size = (alphabet as u128).pow(m as u32);
    if size > SERIAL_CAP as u128 {
        return Err(CatalogError::CapExceeded {
            size,
            cap: SERIAL_CAP,
        });
    }
    let n = seq.len();
    if n < m {
        return Err(CatalogError::SequenceTooShort { needed: m, got: n });
    }
    let kappa: Vec<usize> = match seq.space() {
        SampleSpace::UnitInterval => seq
            .data()
            .iter()
            .map(|&x| symbol(x, r_bits) as usize)
            .collect(),
        SampleSpace::Finite { alphabet: a } if a == alphabet => {
            seq.data().iter().map(|&x| x as usize).collect()
        }
        SampleSpace::Finite { alphabet: a } => {
            return Err(CatalogError::BadParams(format!(
                "alphabet {a} differs from 2^r_bits = {alphabet}"
            )))
        }
    };
    let size = size as usize;
    let small = size / alphabet;
    let mut nu_m = vec![0u64; size];
    let mut nu_m1 = vec![0u64; small];
    let mut nu_open = vec![0u64; size];
    // rolling tuple index over the cyclic extension
    let mut index = 0usize;
    for &k in kappa.iter().take(m - 1) {
        index = index * alphabet + k;
    }
    for i in 0..n {
        let next = kappa[(i + m - 1) % n];
        let prefix = index % small;
        nu_m1[prefix] += 1;
        index = prefix * alphabet + next;
        nu_m[index] += 1;
        if i + m <= n {
            nu_open[index] += 1;
        }
    }
    Ok(SerialCounts {
        r_bits,
        alphabet,
        m,
        n,
        nu_m,
        nu_m1,
        nu_open,
    })
}

impl SerialCounts {
    /// `sum_{i_m} nu(i_1..i_m)` for every prefix.
    pub fn marginal(&self) -> Vec<u64> {
        self.nu_m
            .chunks_exact(self.alphabet)
            .map(|c| c.iter().sum())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SerialVariant {
    /// Cyclic counts, the usual overlapping serial statistic.
    Classic,
    /// Non-cyclic counts through the same quadratic form.
    Tilde,
}

/// `sum_prefix R^m sum_{i_m} (z - zbar)^2` with
/// `z = (nu - w/R^m)/sqrt(w)`, `w` the number of counted windows.
/// With cyclic counts this equals
/// `(R^m/n) sum (nu_m - n/R^m)^2 - (R^{m-1}/n) sum (nu_{m-1} - n/R^{m-1})^2`.
pub fn eval_t_so(counts: &SerialCounts, variant: SerialVariant) -> f64 {
    let (nu, windows) = match variant {
        SerialVariant::Classic => (&counts.nu_m, counts.n),
        SerialVariant::Tilde => (&counts.nu_open, counts.n - counts.m + 1),
    };
    let cells = nu.len() as f64;
    let expected = windows as f64 / cells;
    let scale = (windows as f64).sqrt();
    let r = counts.alphabet as f64;
    let mut total = crate::numeric::CompensatedSum::new();
    for group in nu.chunks_exact(counts.alphabet) {
        let z: Vec<f64> = group
            .iter()
            .map(|&c| (c as f64 - expected) / scale)
            .collect();
        let mean = z.iter().sum::<f64>() / r;
        for v in z {
            total.add(cells * (v - mean) * (v - mean));
        }
    }
    total.value()
}

/// The classic statistic through its two-sum display, for cross-checking.
pub fn eval_t_so_direct(counts: &SerialCounts) -> f64 {
    let n = counts.n as f64;
    let big = counts.nu_m.len() as f64;
    let small = counts.nu_m1.len() as f64;
    let first: f64 = counts
        .nu_m
        .iter()
        .map(|&c| (c as f64 - n / big).powi(2))
        .sum();
    let second: f64 = counts
        .nu_m1
        .iter()
        .map(|&c| (c as f64 - n / small).powi(2))
        .sum();
    big / n * first - small / n * second
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statistics::eval_short_block;
    use proptest::prelude::*;

    #[test]
    fn g_bits_examples() {
        assert_eq!(g_bits(0.625, 3).unwrap(), vec![1, 0, 1]);
        assert_eq!(g_bits(1.0, 3).unwrap(), vec![1, 1, 1]);
        assert_eq!(g_bits(1.0 / 3.0, 2).unwrap(), vec![0, 1]);
        assert!(matches!(g_bits(1.5, 3), Err(CatalogError::OutOfRange(_))));
        assert!(g_bits(0.5, 53).is_err());
    }

    #[test]
    fn dyadic_rationals_map_to_their_expansion() {
        for k in 0..16u64 {
            let bits = g_bits(k as f64 / 16.0, 4).unwrap();
            let back = bits.iter().fold(0u64, |acc, b| acc * 2 + *b as u64);
            assert_eq!(back, k);
        }
    }

    #[test]
    fn gf2_rank_examples() {
        let id = vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]];
        assert_eq!(gf2_rank(&id), 3);
        assert_eq!(gf2_rank(&[vec![0u8; 3], vec![0; 3], vec![0; 3]]), 0);
        assert_eq!(gf2_rank(&[vec![1, 1, 0], vec![0, 1, 1], vec![1, 0, 1]]), 2);
    }

    #[test]
    fn rank_probabilities_sum_to_one() {
        for (v1, v2) in [(3, 3), (2, 5), (6, 4), (32, 32)] {
            let total: f64 = (0..=v1.min(v2)).map(|k| rank_probability(v1, v2, k)).sum();
            assert!((total - 1.0).abs() < 1e-12, "{v1}x{v2}: {total}");
        }
        assert_eq!(rank_probability(3, 3, 3), 168.0 / 512.0);
    }

    #[test]
    fn permutation_index_is_a_bijection() {
        let perms = [
            [0.1, 0.2, 0.3],
            [0.1, 0.3, 0.2],
            [0.2, 0.1, 0.3],
            [0.2, 0.3, 0.1],
            [0.3, 0.1, 0.2],
            [0.3, 0.2, 0.1],
        ];
        let mut seen: Vec<usize> = perms.iter().map(|p| permutation_index(p)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
        // ties resolve as if the earlier element were smaller
        assert_eq!(
            permutation_index(&[0.5, 0.5, 0.5]),
            permutation_index(&[0.1, 0.2, 0.3])
        );
    }

    #[test]
    fn permutation_on_repeated_pattern() {
        let StatisticSpec::ShortBlock(spec) =
            instantiate_test(&TestId::Permutation { l_sb: 3 }, &NullModel::Uniform).unwrap()
        else {
            panic!()
        };
        assert_eq!(spec.dof(), 5);
        let data: Vec<f64> = [0.1, 0.2, 0.3].repeat(7);
        let seq = Sequence::new(SampleSpace::UnitInterval, data).unwrap();
        assert!((eval_short_block(&spec, &seq).unwrap() - 35.0).abs() < 1e-12);
    }

    #[test]
    fn sample_corr_instance() {
        let StatisticSpec::Sum(spec) =
            instantiate_test(&TestId::SampleCorr { k: 1 }, &NullModel::Uniform).unwrap()
        else {
            panic!()
        };
        assert_eq!(spec.window(), 2);
        assert_eq!(spec.mean, 0.25);
        assert!((spec.sigma - 13f64.sqrt() / 12.0).abs() < 1e-15);
    }

    #[test]
    fn weight_distrib_cells_and_errors() {
        let test = TestId::WeightDistrib {
            alpha: 0.0,
            beta: 0.5,
            l_sb: 4,
            classes: vec![vec![0, 1], vec![2], vec![3, 4]],
        };
        let StatisticSpec::ShortBlock(spec) = instantiate_test(&test, &NullModel::Uniform).unwrap()
        else {
            panic!()
        };
        assert_eq!(spec.cells, vec![5.0 / 16.0, 6.0 / 16.0, 5.0 / 16.0]);
        let bad = TestId::WeightDistrib {
            alpha: 0.5,
            beta: 0.5,
            l_sb: 4,
            classes: vec![vec![0, 1, 2, 3, 4]],
        };
        assert!(matches!(
            instantiate_test(&bad, &NullModel::Uniform),
            Err(CatalogError::BadParams(_))
        ));
        let overlap = TestId::WeightDistrib {
            alpha: 0.0,
            beta: 0.5,
            l_sb: 2,
            classes: vec![vec![0, 1], vec![1, 2]],
        };
        assert!(matches!(
            instantiate_test(&overlap, &NullModel::Uniform),
            Err(CatalogError::BadParams(_))
        ));
    }

    #[test]
    fn hamming_weight2_moments() {
        let StatisticSpec::LongBlock(spec) = instantiate_test(
            &TestId::HammingWeight2 { r_bits: 2, n_lb: 1 },
            &NullModel::Uniform,
        )
        .unwrap() else {
            panic!()
        };
        assert_eq!(spec.mean, 1.5);
        // bit pairs 00, 01, 10, 11 give 0, 2, 1, 3
        let values: Vec<f64> = [0.1, 0.3, 0.6, 0.9]
            .iter()
            .map(|&t| spec.f.call(&[t]))
            .collect();
        assert_eq!(values, vec![0.0, 2.0, 1.0, 3.0]);
        assert!((spec.sigma * spec.sigma - 1.25).abs() < 1e-15);
    }

    #[test]
    fn tests_reject_wrong_space() {
        assert!(matches!(
            instantiate_test(&TestId::Monobit, &NullModel::Uniform),
            Err(CatalogError::SpaceMismatch { .. })
        ));
        assert!(matches!(
            instantiate_test(&TestId::SampleCorr { k: 1 }, &NullModel::fair_bits()),
            Err(CatalogError::SpaceMismatch { .. })
        ));
    }

    #[test]
    fn test_id_json_names() {
        let id: TestId = serde_json::from_str(r#"{"test":"ones_count","l_sb":2}"#).unwrap();
        assert_eq!(id, TestId::OnesCount { l_sb: 2 });
        assert!(serde_json::from_str::<TestId>(r#"{"test":"bogus"}"#).is_err());
    }

    #[test]
    fn serial_counts_examples() {
        let seq = Sequence::new(
            SampleSpace::Finite { alphabet: 2 },
            vec![0.0, 1.0, 0.0, 1.0],
        )
        .unwrap();
        let c = serial_over_counts(&seq, 1, 2).unwrap();
        assert_eq!(c.nu_m, vec![0, 2, 2, 0]);
        let seq = Sequence::new(SampleSpace::UnitInterval, vec![0.3; 9]).unwrap();
        let c = serial_over_counts(&seq, 2, 2).unwrap();
        assert_eq!(c.nu_m[5], 9);
        assert_eq!(c.nu_m1[1], 9);
        assert!(matches!(
            serial_over_counts(&seq, 12, 3),
            Err(CatalogError::CapExceeded { .. })
        ));
    }

    #[test]
    fn uniform_counts_give_zero() {
        // de Bruijn sequence 0011 over bits: each pair once cyclically
        let seq = Sequence::new(
            SampleSpace::Finite { alphabet: 2 },
            vec![0.0, 0.0, 1.0, 1.0],
        )
        .unwrap();
        let c = serial_over_counts(&seq, 1, 2).unwrap();
        assert_eq!(eval_t_so(&c, SerialVariant::Classic), 0.0);
    }

    proptest! {
        #[test]
        fn serial_count_invariants(v in prop::collection::vec(0.0f64..1.0, 3..200), m in 2usize..4) {
            let seq = Sequence::new(SampleSpace::UnitInterval, v.clone()).unwrap();
            let c = serial_over_counts(&seq, 2, m).unwrap();
            prop_assert_eq!(c.marginal(), c.nu_m1.clone());
            prop_assert_eq!(c.nu_m.iter().sum::<u64>(), v.len() as u64);
            prop_assert_eq!(c.nu_open.iter().sum::<u64>(), (v.len() - m + 1) as u64);
            for (a, b) in c.nu_m.iter().zip(&c.nu_open) {
                prop_assert!(a.abs_diff(*b) <= (m - 1) as u64);
            }
            let t = eval_t_so(&c, SerialVariant::Classic);
            prop_assert!(t >= 0.0);
            prop_assert!(eval_t_so(&c, SerialVariant::Tilde) >= 0.0);
            let direct = eval_t_so_direct(&c);
            prop_assert!((t - direct).abs() <= 1e-9 * (1.0 + direct.abs()));
        }

        #[test]
        fn rank_invariances(rows in prop::collection::vec(prop::collection::vec(0u8..2, 5), 4), ops in prop::collection::vec((0usize..4, 0usize..4, any::<bool>()), 0..12)) {
            let rank = gf2_rank(&rows);
            let transpose: Vec<Vec<u8>> = (0..5).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
            prop_assert_eq!(gf2_rank(&transpose), rank);
            let mut m = rows.clone();
            for (a, b, swap) in ops {
                if a == b { continue; }
                if swap {
                    m.swap(a, b);
                } else {
                    let src = m[b].clone();
                    m[a].iter_mut().zip(src).for_each(|(x, y)| *x ^= y);
                }
            }
            prop_assert_eq!(gf2_rank(&m), rank);
        }
    }
}
