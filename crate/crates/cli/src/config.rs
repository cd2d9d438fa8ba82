//! The declarative run configuration and its translation into a validated
//! battery.
//!
//! ```json
//! {
//!   "version": 1,
//!   "null_model": {"kind": "finite", "pmf": [0.5, 0.5]},
//!   "n": 16384, "N": 4, "h": 2, "s": 2,
//!   "triples": [
//!     {"sum": {"test": "monobit"},
//!      "lb": {"test": "block_frequency", "n_lb": 2},
//!      "sb": {"test": "ones_count", "l_sb": 2}}
//!   ],
//!   "quads": [{"name": "square", "coeffs": [[1.0]], "sum_refs": [1]}],
//!   "methods": {"phi": {"method": "exact_enumeration", "cap": 16777216}}
//! }
//! ```
//!
//! Missing triple members are filled with auxiliary statistics (see
//! [`jointstat::catalog::assemble_triple`]). `sum_refs` are one-based.

use jointstat::catalog::{assemble_triple, instantiate_test, StatisticSpec, TestId};
use jointstat::joint::PhiMethod;
use jointstat::model::{validate_battery, BatteryConfig, NullModel, QuadSpec, ValidatedBattery};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;
/// Monte-Carlo replicates for `Phi*` when the null law is continuous.
pub const DEFAULT_PHI_REPLICATES: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub null_model: NullModel,
    pub n: usize,
    #[serde(rename = "N")]
    pub blocks: usize,
    pub h: usize,
    pub s: usize,
    pub triples: Vec<TripleConfig>,
    #[serde(default)]
    pub quads: Vec<QuadConfig>,
    #[serde(default)]
    pub methods: Methods,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripleConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sum: Option<TestId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lb: Option<TestId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sb: Option<TestId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadConfig {
    pub name: String,
    pub coeffs: Vec<Vec<f64>>,
    pub sum_refs: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Methods {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<PhiMethod>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        if config.version != SCHEMA_VERSION {
            return Err(CliError::Validation(format!(
                "config version {} is not supported (expected {SCHEMA_VERSION})",
                config.version
            )));
        }
        Ok(config)
    }

    pub fn phi_method(&self) -> PhiMethod {
        match (&self.methods.phi, &self.null_model) {
            (Some(m), _) => m.clone(),
            (None, NullModel::Finite { .. }) => PhiMethod::default(),
            (None, NullModel::Uniform) => PhiMethod::MonteCarlo {
                replicates: DEFAULT_PHI_REPLICATES,
                seed: 0,
            },
        }
    }

    /// Instantiates every catalog test and validates the battery.
    pub fn battery(&self) -> Result<ValidatedBattery, CliError> {
        let null = &self.null_model;
        null.validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        let mut triples = Vec::with_capacity(self.triples.len());
        for (q, t) in self.triples.iter().enumerate() {
            let build =
                |slot: &Option<TestId>, kind: &str| -> Result<Option<StatisticSpec>, CliError> {
                    let Some(id) = slot else { return Ok(None) };
                    let spec = instantiate_test(id, null)
                        .map_err(|e| CliError::Validation(format!("triple {}: {e}", q + 1)))?;
                    if spec.kind() != kind {
                        return Err(CliError::Validation(format!(
                            "triple {}: test {} is a {} statistic, not {kind}",
                            q + 1,
                            id.name(),
                            spec.kind()
                        )));
                    }
                    Ok(Some(spec))
                };
            let sum = build(&t.sum, "sum")?.map(|s| match s {
                StatisticSpec::Sum(s) => s,
                _ => unreachable!(),
            });
            let lb = build(&t.lb, "lb")?.map(|s| match s {
                StatisticSpec::LongBlock(s) => s,
                _ => unreachable!(),
            });
            let sb = build(&t.sb, "sb")?.map(|s| match s {
                StatisticSpec::ShortBlock(s) => s,
                _ => unreachable!(),
            });
            if sum.is_none() && lb.is_none() && sb.is_none() {
                return Err(CliError::Validation(format!(
                    "triple {} has no members",
                    q + 1
                )));
            }
            triples.push(
                assemble_triple(sum, lb, sb, null)
                    .map_err(|e| CliError::Validation(e.to_string()))?,
            );
        }
        let quads = self
            .quads
            .iter()
            .map(|quad| {
                let refs = quad
                    .sum_refs
                    .iter()
                    .map(|&r| {
                        r.checked_sub(1).ok_or_else(|| {
                            CliError::Validation(format!(
                                "quadratic statistic {}: sum_refs are one-based",
                                quad.name
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(QuadSpec {
                    name: quad.name.clone(),
                    coeffs: quad.coeffs.clone(),
                    sum_refs: refs,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        validate_battery(BatteryConfig {
            null: null.clone(),
            triples,
            quads,
            blocks: self.blocks,
            stride: self.h,
            chain: self.s,
            n: self.n,
        })
        .map_err(|e| CliError::Validation(e.to_string()))
    }
}
