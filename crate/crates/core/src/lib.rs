//! Summing, long-block, short-block and quadratic randomness-test
//! statistics, their joint Gaussian limit, and a Monte-Carlo harness that
//! checks the limit theory at finite sample sizes.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`]: sample spaces, null models, statistic specifications,
//!   moment computation and battery validation;
//! * [`statistics`]: evaluation of the four statistic families;
//! * [`joint`]: the stacked window functional, block sums, the covariance
//!   matrices `Phi*` and `G*`, the limit sampler and the independence check;
//! * [`catalog`]: concrete test instances, GF(2) rank and the serial-over
//!   statistic;
//! * [`simulate`]: generators, Monte-Carlo runs, goodness of fit, divergence
//!   and convergence studies.

pub mod catalog;
pub mod dist;
pub mod joint;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod simulate;
pub mod statistics;

pub use model::{
    validate_battery, BatteryConfig, Classifier, LongBlockSpec, ModelError, Moments, NullModel,
    QuadSpec, SampleSpace, ShortBlockSpec, SumSpec, Triple, ValidatedBattery, WindowFn,
};
pub use statistics::{eval_battery, Sequence, StatError, StatVector};
