//! Sequence generators, Monte-Carlo runs and the statistical studies built
//! on them: marginal goodness of fit, joint comparison with the limit law,
//! divergence under alternatives and empirical convergence rates.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{
    chi2_cdf, energy_distance, ks_distance, ks_one_sample, ks_two_distance, ks_two_sample,
    normal_cdf,
};
use crate::joint::{build_layout, compute_block_sums, GMatrix, JointError, LimitSampleSet};
use crate::model::{ModelError, NullModel, SampleSpace, ValidatedBattery};
use crate::numeric::{median, CompensatedSum};
use crate::rng::stream_rng;
use crate::statistics::{eval_battery, Sequence, StatError};

/// Minimum replicate count for asymptotic KS p-values.
pub const MIN_GOF_REPLICAS: usize = 100;
/// Rows used by the energy distance (the cost is quadratic).
pub const ENERGY_CAP: usize = 2000;
/// Mean of the Kolmogorov distribution: `E sqrt(M) D_M -> 0.8687`.
pub const KS_MEAN: f64 = 0.868_731_160_636_159;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("generator produces {generator:?} but the battery expects {battery:?}")]
    SpaceMismatch {
        generator: SampleSpace,
        battery: SampleSpace,
    },
    #[error("replica {replica}: {source}")]
    Replica {
        replica: usize,
        #[source]
        source: StatError,
    },
    #[error("at least {needed} replicas are needed, got {got}")]
    TooFewReplicas { needed: usize, got: usize },
    #[error("expected {expected} statistics, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Joint(#[from] JointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stat(#[from] StatError),
}

/// Sequence sources: the null model itself or alternatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    H0 {
        null: NullModel,
    },
    Bernoulli {
        p: f64,
    },
    /// Binary chain with `rows[a][b] = P(next = b | current = a)`.
    MarkovBinary {
        rows: [[f64; 2]; 2],
        init: [f64; 2],
    },
    Uniform01,
}

impl Generator {
    pub fn space(&self) -> SampleSpace {
        match self {
            Generator::H0 { null } => null.space(),
            Generator::Bernoulli { .. } | Generator::MarkovBinary { .. } => {
                SampleSpace::Finite { alphabet: 2 }
            }
            Generator::Uniform01 => SampleSpace::UnitInterval,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let law = |v: &[f64; 2]| prob(v[0]) && prob(v[1]) && (v[0] + v[1] - 1.0).abs() <= 1e-12;
        match self {
            Generator::H0 { null } => null
                .validate()
                .map_err(|e| SimError::BadParams(e.to_string())),
            Generator::Bernoulli { p } if !prob(*p) => {
                Err(SimError::BadParams(format!("p = {p} outside [0, 1]")))
            }
            Generator::MarkovBinary { rows, init }
                if !(law(&rows[0]) && law(&rows[1]) && law(init)) =>
            {
                Err(SimError::BadParams(
                    "Markov rows and initial law must be probability vectors".into(),
                ))
            }
            _ => Ok(()),
        }
    }

    /// Fills `out` with one realisation.
    pub fn fill<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match self {
            Generator::H0 { null } => out.iter_mut().for_each(|x| *x = null.sample(rng)),
            Generator::Bernoulli { p } => out
                .iter_mut()
                .for_each(|x| *x = (rng.random::<f64>() < *p) as u8 as f64),
            Generator::Uniform01 => out.iter_mut().for_each(|x| *x = rng.random::<f64>()),
            Generator::MarkovBinary { rows, init } => {
                let mut state = (rng.random::<f64>() < init[1]) as usize;
                for x in out.iter_mut() {
                    *x = state as f64;
                    state = (rng.random::<f64>() < rows[state][1]) as usize;
                }
            }
        }
    }
}

/// Deterministic sequence of length `n` for `(gen, seed)`.
pub fn generate(gen: &Generator, n: usize, seed: u64) -> Result<Sequence, SimError> {
    if n == 0 {
        return Err(SimError::BadParams("n must be positive".into()));
    }
    gen.validate()?;
    let mut rng = stream_rng(seed, 0);
    Ok(generate_with(gen, n, &mut rng))
}

fn generate_with(gen: &Generator, n: usize, rng: &mut ChaCha8Rng) -> Sequence {
    let mut data = vec![0.0; n];
    gen.fill(rng, &mut data);
    Sequence::trusted(gen.space(), data)
}

/// Seed of sub-experiment `index` (splitmix64 of the combined value).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-replica statistic vectors of a Monte-Carlo run. Replica `r` draws
/// from ChaCha8 stream `r` of `master_seed`, so results do not depend on
/// the thread schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub battery: String,
    pub generator: Generator,
    pub n: usize,
    pub replicas: usize,
    pub master_seed: u64,
    pub labels: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    /// `sum_k X*_k` per replica, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_totals: Option<Vec<Vec<f64>>>,
}

impl McReport {
    pub fn column(&self, i: usize) -> Vec<f64> {
        self.vectors.iter().map(|v| v[i]).collect()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

#[derive(Debug, Clone, Default)]
pub struct McOptions {
    /// Identifier echoed into the report.
    pub battery_id: String,
    /// Also record `sum_k X*_k` (needs `n >= N s`).
    pub block_totals: bool,
}

pub fn run_monte_carlo(
    battery: &ValidatedBattery,
    gen: &Generator,
    replicas: usize,
    master_seed: u64,
    options: &McOptions,
) -> Result<McReport, SimError> {
    if replicas == 0 {
        return Err(SimError::BadParams(
            "at least one replica is required".into(),
        ));
    }
    gen.validate()?;
    let space = battery.null().space();
    if gen.space() != space {
        return Err(SimError::SpaceMismatch {
            generator: gen.space(),
            battery: space,
        });
    }
    let layout = options.block_totals.then(|| build_layout(battery));
    let results: Vec<Result<(Vec<f64>, Option<Vec<f64>>), SimError>> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(master_seed, r as u64);
            let seq = generate_with(gen, battery.n(), &mut rng);
            let stats = eval_battery(battery, &seq)
                .map_err(|source| SimError::Replica { replica: r, source })?;
            let totals = match &layout {
                Some(layout) => {
                    let sums = compute_block_sums(layout, battery, &seq)?;
                    Some(
                        (0..layout.k_star)
                            .map(|j| {
                                sums.x
                                    .iter()
                                    .map(|x| x[j])
                                    .collect::<CompensatedSum>()
                                    .value()
                            })
                            .collect(),
                    )
                }
                None => None,
            };
            Ok((stats.values, totals))
        })
        .collect();
    let mut vectors = Vec::with_capacity(replicas);
    let mut totals = options.block_totals.then(|| Vec::with_capacity(replicas));
    for res in results {
        let (v, t) = res?;
        vectors.push(v);
        if let (Some(all), Some(t)) = (totals.as_mut(), t) {
            all.push(t);
        }
    }
    Ok(McReport {
        battery: options.battery_id.clone(),
        generator: gen.clone(),
        n: battery.n(),
        replicas,
        master_seed,
        labels: crate::statistics::statistic_labels(battery),
        vectors,
        block_totals: totals,
    })
}

/// One goodness-of-fit verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofResult {
    pub label: String,
    pub reference: String,
    pub distance: f64,
    pub p_value: f64,
}

/// Marginal reference laws of the battery's statistics: `N(0,1)` for
/// summing, `chi2(N_lb)` for long-block and `chi2(K_sb)` for short-block
/// statistics. Auxiliary members and quadratic statistics have none.
fn marginal_references(
    battery: &ValidatedBattery,
) -> Vec<Option<(String, Box<dyn Fn(f64) -> f64 + Sync>)>> {
    let mut refs: Vec<Option<(String, Box<dyn Fn(f64) -> f64 + Sync>)>> = Vec::new();
    for t in battery.triples() {
        if t.sum.auxiliary {
            refs.push(None);
        } else {
            refs.push(Some(("normal(0,1)".to_string(), Box::new(normal_cdf))));
        }
        if t.lb.auxiliary {
            refs.push(None);
        } else {
            let df = t.lb.blocks as f64;
            refs.push(Some((
                format!("chi2({})", t.lb.blocks),
                Box::new(move |x| chi2_cdf(x, df)),
            )));
        }
        if t.sb.auxiliary {
            refs.push(None);
        } else {
            let df = t.sb.dof() as f64;
            refs.push(Some((
                format!("chi2({})", t.sb.dof()),
                Box::new(move |x| chi2_cdf(x, df)),
            )));
        }
    }
    for _ in battery.quads() {
        refs.push(None);
    }
    refs
}

/// Kolmogorov-Smirnov tests of every statistic against its marginal limit;
/// quadratic statistics are compared with `limit` draws (two-sample) when
/// given.
pub fn gof_marginals(
    report: &McReport,
    battery: &ValidatedBattery,
    limit: Option<&LimitSampleSet>,
) -> Result<Vec<GofResult>, SimError> {
    if report.replicas < MIN_GOF_REPLICAS {
        return Err(SimError::TooFewReplicas {
            needed: MIN_GOF_REPLICAS,
            got: report.replicas,
        });
    }
    let expected = battery.statistic_count();
    if report.labels.len() != expected {
        return Err(SimError::DimensionMismatch {
            expected,
            got: report.labels.len(),
        });
    }
    let quad_start = 3 * battery.triples().len();
    let mut out = Vec::new();
    for (i, reference) in marginal_references(battery).into_iter().enumerate() {
        let column = report.column(i);
        match reference {
            Some((name, cdf)) => {
                let ks = ks_one_sample(&column, cdf);
                out.push(GofResult {
                    label: report.labels[i].clone(),
                    reference: name,
                    distance: ks.distance,
                    p_value: ks.p_value,
                });
            }
            None if i >= quad_start => {
                if let Some(limit) = limit {
                    let ks = ks_two_sample(&column, &limit.column(i));
                    out.push(GofResult {
                        label: report.labels[i].clone(),
                        reference: "limit sample".into(),
                        distance: ks.distance,
                        p_value: ks.p_value,
                    });
                }
            }
            None => {}
        }
    }
    Ok(out)
}

/// Number of failures allowed among `checks` tests at level 0.001: one per
/// started group of twenty.
pub fn failure_budget(checks: usize) -> usize {
    checks.div_ceil(20)
}

/// Counts p-values below `alpha`.
pub fn count_failures(results: &[GofResult], alpha: f64) -> usize {
    results.iter().filter(|r| r.p_value <= alpha).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceCheck {
    pub u: usize,
    pub v: usize,
    pub empirical: f64,
    pub expected: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointComparison {
    pub ks: Vec<GofResult>,
    pub energy_distance: f64,
    /// Empirical covariance of `sum_k X*_k` against `N G*`.
    pub covariance: Vec<CovarianceCheck>,
}

/// Compares Monte-Carlo statistics with limit draws coordinate by
/// coordinate and jointly; with block totals and `G*`, also checks their
/// covariance.
pub fn compare_joint(
    report: &McReport,
    limit: &LimitSampleSet,
    g: Option<&GMatrix>,
) -> Result<JointComparison, SimError> {
    if report.vectors.is_empty() || limit.draws.is_empty() {
        return Err(SimError::BadParams("both samples must be nonempty".into()));
    }
    if report.labels.len() != limit.labels.len() {
        return Err(SimError::DimensionMismatch {
            expected: limit.labels.len(),
            got: report.labels.len(),
        });
    }
    let ks = (0..report.labels.len())
        .map(|i| {
            let r = ks_two_sample(&report.column(i), &limit.column(i));
            GofResult {
                label: report.labels[i].clone(),
                reference: "limit sample".into(),
                distance: r.distance,
                p_value: r.p_value,
            }
        })
        .collect();
    let energy = energy_distance(&report.vectors, &limit.draws, ENERGY_CAP);
    let covariance = match (g, &report.block_totals) {
        (Some(g), Some(totals)) => covariance_checks(totals, g),
        _ => Vec::new(),
    };
    Ok(JointComparison {
        ks,
        energy_distance: energy,
        covariance,
    })
}

fn covariance_checks(totals: &[Vec<f64>], g: &GMatrix) -> Vec<CovarianceCheck> {
    let k = g.dim();
    let m = totals.len() as f64;
    let means: Vec<f64> = (0..k)
        .map(|j| {
            totals
                .iter()
                .map(|t| t[j])
                .collect::<CompensatedSum>()
                .value()
                / m
        })
        .collect();
    let mut out = Vec::new();
    for u in 0..k {
        for v in u..k {
            let prods: Vec<f64> = totals
                .iter()
                .map(|t| (t[u] - means[u]) * (t[v] - means[v]))
                .collect();
            let (mean, var) = crate::numeric::mean_var(&prods);
            out.push(CovarianceCheck {
                u,
                v,
                empirical: mean * m / (m - 1.0),
                expected: g.blocks as f64 * g.matrix[(u, v)],
                std_error: (var / m).sqrt(),
            });
        }
    }
    out
}

/// Medians and drift estimates of the statistics across a grid of sample
/// sizes under one generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceProbe {
    pub grid: Vec<usize>,
    pub labels: Vec<String>,
    /// `medians[g][i]`: median of statistic `i` at `grid[g]`.
    pub medians: Vec<Vec<f64>>,
    /// `median |T_sum^[q]|` per grid point and triple.
    pub median_abs_sum: Vec<Vec<f64>>,
    /// Least-squares `a` in `median(T_sum^[q]) = a sqrt(n)` per triple.
    pub drift: Vec<f64>,
    /// Whether each statistic's median is nondecreasing along the grid
    /// (absolute value for summing statistics).
    pub monotone: Vec<bool>,
    /// Normalized block-sum limits at the largest `n`, per triple.
    pub limits: Vec<BlockLimits>,
}

/// Estimates of `y_k(j)` (mean of `Y_k(j)/sqrt(n)`), and
/// `c_sum = sum_k y_k(sum)`, `c_lb = sum_k y_k(lb)^2`,
/// `c_sb = sum_j (sum_k y_k(j))^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockLimits {
    pub y: Vec<Vec<f64>>,
    pub c_sum: f64,
    pub c_lb: f64,
    pub c_sb: f64,
}

pub fn divergence_probe(
    battery: &ValidatedBattery,
    gen: &Generator,
    grid: &[usize],
    replicas: usize,
    seed: u64,
) -> Result<DivergenceProbe, SimError> {
    if grid.len() < 3 {
        return Err(SimError::BadParams(
            "the grid needs at least three sample sizes".into(),
        ));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SimError::BadParams(
            "the grid must be strictly increasing".into(),
        ));
    }
    let q_count = battery.triples().len();
    let mut medians = Vec::new();
    let mut median_abs_sum = Vec::new();
    let mut labels = Vec::new();
    let mut last = None;
    for (g, &n) in grid.iter().enumerate() {
        let b = battery.with_len(n)?;
        let report = run_monte_carlo(
            &b,
            gen,
            replicas,
            derive_seed(seed, g as u64),
            &McOptions {
                battery_id: String::new(),
                block_totals: false,
            },
        )?;
        medians.push(
            (0..report.labels.len())
                .map(|i| median(&report.column(i)))
                .collect::<Vec<_>>(),
        );
        median_abs_sum.push(
            (0..q_count)
                .map(|q| {
                    median(
                        &report
                            .column(3 * q)
                            .iter()
                            .map(|x| x.abs())
                            .collect::<Vec<_>>(),
                    )
                })
                .collect::<Vec<_>>(),
        );
        labels = report.labels.clone();
        if g + 1 == grid.len() {
            last = Some((b, report));
        }
    }
    let drift = (0..q_count)
        .map(|q| {
            let num: f64 = grid
                .iter()
                .zip(&medians)
                .map(|(&n, m)| (n as f64).sqrt() * m[3 * q])
                .sum();
            let den: f64 = grid.iter().map(|&n| n as f64).sum();
            num / den
        })
        .collect();
    let monotone = (0..labels.len())
        .map(|i| {
            let series: Vec<f64> = if i < 3 * q_count && i % 3 == 0 {
                median_abs_sum.iter().map(|m| m[i / 3]).collect()
            } else {
                medians.iter().map(|m| m[i]).collect()
            };
            series.windows(2).all(|w| w[1] >= w[0])
        })
        .collect();
    let (b, report) = last.expect("grid is nonempty");
    let limits = block_limits(&b, &report)?;
    Ok(DivergenceProbe {
        grid: grid.to_vec(),
        labels,
        medians,
        median_abs_sum,
        drift,
        monotone,
        limits,
    })
}

fn block_limits(
    battery: &ValidatedBattery,
    report: &McReport,
) -> Result<Vec<BlockLimits>, SimError> {
    // regenerate the replicas from their streams to get per-block Y
    let layout = build_layout(battery);
    let scale = (battery.n() as f64).sqrt().recip();
    let reps = report.replicas;
    let ys: Vec<Vec<Vec<Vec<f64>>>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(report.master_seed, r as u64);
            let seq = generate_with(&report.generator, battery.n(), &mut rng);
            compute_block_sums(&layout, battery, &seq).map(|s| s.y)
        })
        .collect::<Result<_, JointError>>()?;
    Ok(layout
        .triples
        .iter()
        .enumerate()
        .map(|(q, tr)| {
            let width = tr.span().len();
            let y: Vec<Vec<f64>> = (0..tr.lb_blocks)
                .map(|k| {
                    (0..width)
                        .map(|j| {
                            ys.iter()
                                .map(|y| y[q][k][j])
                                .collect::<CompensatedSum>()
                                .value()
                                * scale
                                / reps as f64
                        })
                        .collect()
                })
                .collect();
            let cells = tr.sb.len();
            let c_sum = y.iter().map(|v| v[cells + 1]).sum();
            let c_lb = y.iter().map(|v| v[cells] * v[cells]).sum();
            let c_sb = (0..cells)
                .map(|j| y.iter().map(|v| v[j]).sum::<f64>().powi(2))
                .sum();
            BlockLimits {
                y,
                c_sum,
                c_lb,
                c_sb,
            }
        })
        .collect())
}

/// Empirical distance to the limit law across a grid of sample sizes and
/// the fitted log-log slope per statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRate {
    pub grid: Vec<usize>,
    pub labels: Vec<String>,
    /// `distances[g][i]`: sup distance of statistic `i` at `grid[g]`.
    pub distances: Vec<Vec<f64>>,
    /// Slope of `log(distance)` against `log(n)` per statistic.
    pub slopes: Vec<f64>,
    /// Typical sup distance of an exact fit at this replica count.
    pub noise_floor: f64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Sup distance between the H0 distribution of each statistic and its limit
/// (the exact marginal CDF where known, `limit` draws for quadratic
/// statistics) for every `n` in `grid`.
pub fn convergence_rate(
    battery: &ValidatedBattery,
    grid: &[usize],
    replicas: usize,
    seed: u64,
    limit: Option<&LimitSampleSet>,
) -> Result<ConvergenceRate, SimError> {
    if grid.len() < 3 {
        return Err(SimError::BadParams(
            "the grid needs at least three sample sizes".into(),
        ));
    }
    if replicas < MIN_GOF_REPLICAS {
        return Err(SimError::TooFewReplicas {
            needed: MIN_GOF_REPLICAS,
            got: replicas,
        });
    }
    let gen = Generator::H0 {
        null: battery.null().clone(),
    };
    let refs = marginal_references(battery);
    let mut distances = Vec::new();
    let mut labels = Vec::new();
    for (g, &n) in grid.iter().enumerate() {
        let b = battery.with_len(n)?;
        let report = run_monte_carlo(
            &b,
            &gen,
            replicas,
            derive_seed(seed, g as u64),
            &McOptions::default(),
        )?;
        let row: Vec<f64> = refs
            .iter()
            .enumerate()
            .map(|(i, r)| match (r, limit) {
                (Some((_, cdf)), _) => ks_distance(&report.column(i), cdf),
                (None, Some(limit)) => ks_two_distance(&report.column(i), &limit.column(i)),
                (None, None) => f64::NAN,
            })
            .collect();
        distances.push(row);
        labels = report.labels;
    }
    let xs: Vec<f64> = grid.iter().map(|&n| n as f64).collect();
    let slopes = (0..labels.len())
        .map(|i| {
            let ys: Vec<f64> = distances.iter().map(|d| d[i]).collect();
            if ys.iter().all(|y| *y > 0.0 && y.is_finite()) {
                log_log_slope(&xs, &ys)
            } else {
                f64::NAN
            }
        })
        .collect();
    Ok(ConvergenceRate {
        grid: grid.to_vec(),
        labels,
        distances,
        slopes,
        noise_floor: KS_MEAN / (replicas as f64).sqrt(),
    })
}
