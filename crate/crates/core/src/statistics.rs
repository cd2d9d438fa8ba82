//! Evaluation of the summing, long-block, short-block and quadratic
//! statistics on a concrete sequence.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    LongBlockSpec, QuadSpec, SampleSpace, ShortBlockSpec, SumSpec, ValidatedBattery,
};
use crate::numeric::CompensatedSum;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatError {
    #[error("sequence of length {got} is too short (need {needed})")]
    SequenceTooShort { needed: usize, got: usize },
    #[error("expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("window function returned a non-finite value at window {position}")]
    NonFiniteValue { position: usize },
    #[error("element {value} at position {position} is outside the sample space")]
    OutOfSpace { position: usize, value: f64 },
    #[error("sequence length {got} differs from the battery length {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("{label}: {source}")]
    InStatistic {
        label: String,
        #[source]
        source: Box<StatError>,
    },
}

/// A tested sequence `e_1..e_n` together with its sample space.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    space: SampleSpace,
    data: Vec<f64>,
}

impl Sequence {
    pub fn new(space: SampleSpace, data: Vec<f64>) -> Result<Self, StatError> {
        if data.is_empty() {
            return Err(StatError::SequenceTooShort { needed: 1, got: 0 });
        }
        if let Some((position, &value)) =
            data.iter().enumerate().find(|(_, x)| !space.contains(**x))
        {
            return Err(StatError::OutOfSpace { position, value });
        }
        Ok(Sequence { space, data })
    }

    /// Binary sequence from 0/1 values.
    pub fn from_bits(bits: &[u8]) -> Result<Self, StatError> {
        Self::new(
            SampleSpace::Finite { alphabet: 2 },
            bits.iter().map(|&b| b as f64).collect(),
        )
    }

    /// Skips the membership check; callers guarantee every element is in `space`.
    pub(crate) fn trusted(space: SampleSpace, data: Vec<f64>) -> Self {
        debug_assert!(data.iter().all(|x| space.contains(*x)));
        Sequence { space, data }
    }

    pub fn space(&self) -> SampleSpace {
        self.space
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Values of all statistics of a battery in battery order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatVector {
    pub labels: Vec<String>,
    pub values: Vec<f64>,
}

impl StatVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, label: &str) -> Option<f64> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.values[i])
    }
}

/// Labels of a battery's statistics, e.g. `sum[1]`, `lb[1]`, `sb[1]`, `quad[1]`.
pub fn statistic_labels(battery: &ValidatedBattery) -> Vec<String> {
    let mut labels = Vec::with_capacity(battery.statistic_count());
    for q in 1..=battery.triples().len() {
        labels.push(format!("sum[{q}]"));
        labels.push(format!("lb[{q}]"));
        labels.push(format!("sb[{q}]"));
    }
    for j in 1..=battery.quads().len() {
        labels.push(format!("quad[{j}]"));
    }
    labels
}

fn checked(value: f64, position: usize) -> Result<f64, StatError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(StatError::NonFiniteValue { position })
    }
}

/// `sum_{i=1}^{n-m+1} (f(e_i..e_{i+m-1}) - E) / (sigma sqrt(n-m+1))`.
pub fn eval_sum(spec: &SumSpec, seq: &Sequence) -> Result<f64, StatError> {
    let m = spec.window();
    let data = seq.data();
    if data.len() < m {
        return Err(StatError::SequenceTooShort {
            needed: m,
            got: data.len(),
        });
    }
    let windows = data.len() - m + 1;
    let mut acc = CompensatedSum::new();
    for (i, w) in data.windows(m).enumerate() {
        acc.add(checked(spec.f.call(w), i)? - spec.mean);
    }
    Ok(acc.value() / (spec.sigma * (windows as f64).sqrt()))
}

/// Centred long-block sums `W_k - (L_lb - m_lb + 1) E_lb` for `k = 1..N_lb`.
pub fn long_block_deviations(spec: &LongBlockSpec, seq: &Sequence) -> Result<Vec<f64>, StatError> {
    let m = spec.window();
    let data = seq.data();
    let len = data.len() / spec.blocks;
    if len < m {
        return Err(StatError::SequenceTooShort {
            needed: spec.blocks * m,
            got: data.len(),
        });
    }
    let per_block = len - m + 1;
    (0..spec.blocks)
        .map(|k| {
            let block = &data[k * len..(k + 1) * len];
            let mut w = CompensatedSum::new();
            for (i, win) in block.windows(m).enumerate() {
                w.add(checked(spec.f.call(win), k * len + i)?);
            }
            Ok(w.value() - per_block as f64 * spec.mean)
        })
        .collect()
}

/// `sum_k (W_k - (L_lb - m_lb + 1) E_lb)^2 / (L_lb sigma_lb^2)` over
/// `N_lb` disjoint blocks of length `L_lb = floor(n / N_lb)`.
pub fn eval_long_block(spec: &LongBlockSpec, seq: &Sequence) -> Result<f64, StatError> {
    let len = (seq.len() / spec.blocks) as f64;
    let dev = long_block_deviations(spec, seq)?;
    let mut acc = CompensatedSum::new();
    for d in dev {
        acc.add(d * d);
    }
    Ok(acc.value() / (len * spec.sigma * spec.sigma))
}

/// Class counts `w(j)` over the `floor(n / L_sb)` disjoint short blocks.
pub fn short_block_counts(spec: &ShortBlockSpec, seq: &Sequence) -> Result<Vec<u64>, StatError> {
    let len = spec.block_len();
    if seq.len() < len {
        return Err(StatError::SequenceTooShort {
            needed: len,
            got: seq.len(),
        });
    }
    let mut counts = vec![0u64; spec.cells.len()];
    for block in seq.data().chunks_exact(len) {
        counts[spec.classifier.classify(block)] += 1;
    }
    Ok(counts)
}

/// Pearson statistic `sum_j (w(j) - N_sb E(j))^2 / (N_sb E(j))`.
pub fn eval_short_block(spec: &ShortBlockSpec, seq: &Sequence) -> Result<f64, StatError> {
    let counts = short_block_counts(spec, seq)?;
    let blocks = (seq.len() / spec.block_len()) as f64;
    let mut acc = CompensatedSum::new();
    for (w, e) in counts.iter().zip(&spec.cells) {
        let expected = blocks * e;
        let d = *w as f64 - expected;
        acc.add(d * d / expected);
    }
    Ok(acc.value())
}

/// `sum_i (sum_q d(i,q) sums[q])^2`, `sums` ordered as `spec.sum_refs`.
pub fn eval_quadratic(spec: &QuadSpec, sums: &[f64]) -> Result<f64, StatError> {
    if sums.len() != spec.sum_refs.len() {
        return Err(StatError::DimensionMismatch {
            expected: spec.sum_refs.len(),
            got: sums.len(),
        });
    }
    let mut total = CompensatedSum::new();
    for row in &spec.coeffs {
        let mut lin = CompensatedSum::new();
        for (d, x) in row.iter().zip(sums) {
            lin.add(d * x);
        }
        let v = lin.value();
        total.add(v * v);
    }
    Ok(total.value())
}

/// Evaluates all `3Q + J` statistics in battery order.
pub fn eval_battery(battery: &ValidatedBattery, seq: &Sequence) -> Result<StatVector, StatError> {
    if seq.len() != battery.n() {
        return Err(StatError::LengthMismatch {
            expected: battery.n(),
            got: seq.len(),
        });
    }
    let labels = statistic_labels(battery);
    let tag = |i: usize| {
        let label = labels[i].clone();
        move |e: StatError| StatError::InStatistic {
            label,
            source: Box::new(e),
        }
    };
    let mut values = Vec::with_capacity(labels.len());
    let mut sums = Vec::with_capacity(battery.triples().len());
    for (q, t) in battery.triples().iter().enumerate() {
        let sum = eval_sum(&t.sum, seq).map_err(tag(3 * q))?;
        sums.push(sum);
        values.push(sum);
        values.push(eval_long_block(&t.lb, seq).map_err(tag(3 * q + 1))?);
        values.push(eval_short_block(&t.sb, seq).map_err(tag(3 * q + 2))?);
    }
    let offset = values.len();
    for (j, quad) in battery.quads().iter().enumerate() {
        let picked: Vec<f64> = quad.sum_refs.iter().map(|&q| sums[q]).collect();
        values.push(eval_quadratic(quad, &picked).map_err(tag(offset + j))?);
    }
    Ok(StatVector { labels, values })
}
