//! Subcommand implementations. Each returns a report and an exit status.

use std::path::Path;

use jointstat::joint::{
    build_layout, check_independence, compute_g, estimate_phi, sample_limit, GMatrix, JointLayout,
    LimitSampleSet, MatrixMeta, StatRef, Tolerance,
};
use jointstat::numeric::{mean_var, median};
use jointstat::simulate::{
    convergence_rate, count_failures, derive_seed, divergence_probe, failure_budget, gof_marginals,
    run_monte_carlo, Generator, GofResult, McOptions, MIN_GOF_REPLICAS,
};
use jointstat::{eval_battery, ValidatedBattery};
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::ingest::ingest;
use crate::report::{float, floats, format_float, Report, Table};
use crate::{
    Cli, CliError, Command, CovarianceArgs, EvalArgs, IndepArgs, LimitArgs, McArgs, ProbeArgs,
    ProbeMode, EXIT_OK, EXIT_SUITE_FAILURE,
};

pub fn dispatch(cli: &Cli) -> Result<(Report, i32), CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Validation("--config is required".into()))?;
    let config = load_config(path)?;
    let battery = config.battery()?;
    let report = match &cli.command {
        Command::Eval(a) => eval(&config, &battery, a)?,
        Command::Limit(a) => limit(&config, &battery, a)?,
        Command::Mc(a) => return mc(&config, &battery, a),
        Command::Indep(a) => indep(&config, &battery, a)?,
        Command::Covariance(a) => covariance(&config, &battery, a)?,
        Command::Probe(a) => probe(&config, &battery, a)?,
    };
    Ok((report, EXIT_OK))
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    RunConfig::parse(&text)
}

fn to_value<T: Serialize>(x: &T) -> Value {
    serde_json::to_value(x).expect("serialisable report value")
}

fn new_report(command: &str, config: &RunConfig, battery: &ValidatedBattery) -> Report {
    let mut report = Report::new(command);
    report.set("config", to_value(config));
    report.set("warnings", to_value(&battery.warnings()));
    report
}

/// Names of the `K*` coordinates of `f*`.
pub fn coordinate_labels(layout: &JointLayout) -> Vec<String> {
    let mut labels = vec![String::new(); layout.k_star];
    for (q, t) in layout.triples.iter().enumerate() {
        for (j, c) in t.sb.clone().enumerate() {
            labels[c] = format!("sb[{}].cell[{}]", q + 1, j + 1);
        }
        labels[t.lb] = format!("lb[{}]", q + 1);
        labels[t.sum] = format!("sum[{}]", q + 1);
    }
    labels
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

const SUMMARY_COLUMNS: [&str; 8] = ["label", "mean", "sd", "q01", "q05", "median", "q95", "q99"];

fn summary_row(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (mean, var) = mean_var(values);
    vec![
        mean,
        var.sqrt(),
        quantile(&sorted, 0.01),
        quantile(&sorted, 0.05),
        median(values),
        quantile(&sorted, 0.95),
        quantile(&sorted, 0.99),
    ]
}

fn summaries(name: &str, labels: &[String], columns: impl Fn(usize) -> Vec<f64>) -> (Value, Table) {
    let mut table = Table::new(name, &SUMMARY_COLUMNS);
    let mut rows = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        let row = summary_row(&columns(i));
        let mut entry = serde_json::Map::new();
        entry.insert("label".into(), label.clone().into());
        for (key, v) in SUMMARY_COLUMNS[1..].iter().zip(&row) {
            entry.insert(key.to_string(), float(*v));
        }
        rows.push(Value::Object(entry));
        table.push(label, &row);
    }
    (Value::Array(rows), table)
}

fn matrix_value(m: &DMatrix<f64>) -> Value {
    Value::Array(
        (0..m.nrows())
            .map(|i| floats(&m.row(i).iter().copied().collect::<Vec<_>>()))
            .collect(),
    )
}

fn matrix_table(
    name: &str,
    m: &DMatrix<f64>,
    labels: &[String],
    blocks: usize,
    h: usize,
    meta: &MatrixMeta,
) -> Table {
    let mut columns = vec!["label"];
    columns.extend(labels.iter().map(String::as_str));
    let mut table = Table::new(name, &columns)
        .meta("dim", m.nrows())
        .meta("N", blocks)
        .meta("h", h)
        .meta("method", &meta.method)
        .meta("samples", meta.samples)
        .meta("lag_terms", meta.lag_terms)
        .meta("projected", meta.projected);
    for (i, label) in labels.iter().enumerate() {
        table.push(label, &m.row(i).iter().copied().collect::<Vec<_>>());
    }
    table
}

fn g_matrix(
    config: &RunConfig,
    battery: &ValidatedBattery,
    layout: &JointLayout,
) -> Result<GMatrix, CliError> {
    let phi = estimate_phi(layout, battery, &config.phi_method()).map_err(CliError::validation)?;
    Ok(compute_g(&phi, config.blocks, config.h))
}

fn limit_draws(
    config: &RunConfig,
    battery: &ValidatedBattery,
    draws: usize,
    seed: u64,
) -> Result<(GMatrix, LimitSampleSet), CliError> {
    let layout = build_layout(battery);
    let g = g_matrix(config, battery, &layout)?;
    let sample = sample_limit(&g, &layout, battery, draws, seed).map_err(CliError::validation)?;
    Ok((g, sample))
}

fn parse_generator(text: Option<&str>, battery: &ValidatedBattery) -> Result<Generator, CliError> {
    let gen = match text {
        Some(t) => {
            serde_json::from_str(t).map_err(|e| CliError::Validation(format!("generator: {e}")))?
        }
        None => Generator::H0 {
            null: battery.null().clone(),
        },
    };
    gen.validate().map_err(CliError::validation)?;
    Ok(gen)
}

fn eval(
    config: &RunConfig,
    battery: &ValidatedBattery,
    args: &EvalArgs,
) -> Result<Report, CliError> {
    let path = args.input.display().to_string();
    let bytes = std::fs::read(&args.input).map_err(|source| CliError::Io {
        path: path.clone(),
        source,
    })?;
    let seq = ingest(&bytes, args.format, args.length)
        .map_err(|source| CliError::Input { path, source })?;
    let battery = battery.with_len(seq.len()).map_err(CliError::validation)?;
    let stats = eval_battery(&battery, &seq).map_err(CliError::validation)?;
    let mut report = new_report("eval", config, &battery);
    report.set(
        "input",
        json!({"format": args.format.to_string(), "elements": seq.len()}),
    );
    let auxiliary = battery
        .triples()
        .iter()
        .flat_map(|t| [t.sum.auxiliary, t.lb.auxiliary, t.sb.auxiliary])
        .chain(battery.quads().iter().map(|_| false));
    report.set(
        "statistics",
        Value::Array(
            stats
                .labels
                .iter()
                .zip(&stats.values)
                .zip(auxiliary)
                .map(|((l, &v), aux)| json!({"label": l, "value": float(v), "auxiliary": aux}))
                .collect(),
        ),
    );
    let mut table = Table::new("statistics", &["label", "value"]).meta("n", seq.len());
    for (l, &v) in stats.labels.iter().zip(&stats.values) {
        table.push(l, &[v]);
    }
    report.tables.push(table);
    Ok(report)
}

fn limit(
    config: &RunConfig,
    battery: &ValidatedBattery,
    args: &LimitArgs,
) -> Result<Report, CliError> {
    let (g, sample) = limit_draws(config, battery, args.draws, args.seed)?;
    let mut report = new_report("limit", config, battery);
    report.set("seed", args.seed);
    report.set("draws", args.draws);
    report.set("method_meta", to_value(&g.meta));
    let (value, table) = summaries("limit_summary", &sample.labels, |i| sample.column(i));
    report.set("summary", value);
    report
        .tables
        .push(table.meta("draws", args.draws).meta("seed", args.seed));
    if args.keep_draws {
        report.set("labels", to_value(&sample.labels));
        report.set(
            "samples",
            Value::Array(sample.draws.iter().map(|d| floats(d)).collect()),
        );
        let mut columns = vec!["draw"];
        columns.extend(sample.labels.iter().map(String::as_str));
        let mut t = Table::new("limit_draws", &columns);
        for (i, d) in sample.draws.iter().enumerate() {
            t.push(&i.to_string(), d);
        }
        report.tables.push(t);
    }
    Ok(report)
}

fn gof_table(name: &str, results: &[GofResult]) -> Table {
    let mut t = Table::new(name, &["label", "reference", "distance", "p_value"]);
    for r in results {
        t.rows.push(vec![
            r.label.clone(),
            r.reference.clone(),
            format_float(r.distance),
            format_float(r.p_value),
        ]);
    }
    t
}

fn mc(
    config: &RunConfig,
    battery: &ValidatedBattery,
    args: &McArgs,
) -> Result<(Report, i32), CliError> {
    let gen = parse_generator(args.generator.as_deref(), battery)?;
    if !(0.0..1.0).contains(&args.alpha) {
        return Err(CliError::Validation(format!(
            "alpha = {} outside [0, 1)",
            args.alpha
        )));
    }
    let limit = if args.limit_draws > 0 {
        Some(limit_draws(
            config,
            battery,
            args.limit_draws,
            args.limit_seed,
        )?)
    } else {
        None
    };
    let options = McOptions {
        battery_id: "config".into(),
        block_totals: limit.is_some() && config.n >= config.blocks * config.s,
    };
    let mc = run_monte_carlo(battery, &gen, args.replicas, args.seed, &options)
        .map_err(CliError::validation)?;
    let mut report = new_report("mc", config, battery);
    report.set("generator", to_value(&gen));
    report.set("replicas", args.replicas);
    report.set("seed", args.seed);
    report.set("n", mc.n);
    let (value, table) = summaries("mc_summary", &mc.labels, |i| mc.column(i));
    report.set("summary", value);
    report.tables.push(
        table
            .meta("replicas", args.replicas)
            .meta("seed", args.seed),
    );

    let mut checks: Vec<GofResult> = Vec::new();
    if args.replicas >= MIN_GOF_REPLICAS {
        let gof = gof_marginals(&mc, battery, limit.as_ref().map(|(_, s)| s))
            .map_err(CliError::validation)?;
        report.set("gof", to_value(&gof));
        report.tables.push(gof_table("gof", &gof));
        checks.extend(gof);
    } else {
        report.set("gof", Value::Array(Vec::new()));
    }
    if let Some((g, sample)) = &limit {
        let cmp = jointstat::simulate::compare_joint(&mc, sample, Some(g))
            .map_err(CliError::validation)?;
        report.set(
            "limit",
            json!({"draws": args.limit_draws, "seed": args.limit_seed, "method_meta": to_value(&g.meta)}),
        );
        report.tables.push(gof_table("joint_ks", &cmp.ks));
        // Quadratic statistics already enter the marginal checks through the
        // limit sample.
        checks.extend(
            cmp.ks
                .iter()
                .filter(|r| !r.label.starts_with("quad["))
                .cloned(),
        );
        report.set("joint", to_value(&cmp));
    }
    let failures = count_failures(&checks, args.alpha);
    let budget = failure_budget(checks.len());
    let passed = failures <= budget;
    report.set(
        "verdict",
        json!({"alpha": float(args.alpha), "checks": checks.len(), "failures": failures, "budget": budget, "passed": passed}),
    );
    if args.keep_replicas {
        report.set("labels", to_value(&mc.labels));
        report.set(
            "vectors",
            Value::Array(mc.vectors.iter().map(|v| floats(v)).collect()),
        );
        let mut columns = vec!["replica"];
        columns.extend(mc.labels.iter().map(String::as_str));
        let mut t = Table::new("replicas", &columns);
        for (i, v) in mc.vectors.iter().enumerate() {
            t.push(&i.to_string(), v);
        }
        report.tables.push(t);
    }
    let code = if args.assert && !passed {
        EXIT_SUITE_FAILURE
    } else {
        EXIT_OK
    };
    Ok((report, code))
}

fn parse_groups(
    text: Option<&str>,
    battery: &ValidatedBattery,
) -> Result<Vec<Vec<StatRef>>, CliError> {
    match text {
        Some(t) => t
            .split(';')
            .map(|group| {
                group
                    .split(',')
                    .map(|s| s.trim().parse::<StatRef>().map_err(CliError::validation))
                    .collect()
            })
            .collect(),
        None => Ok(battery
            .triples()
            .iter()
            .enumerate()
            .map(|(q, t)| {
                let mut group = Vec::new();
                if !t.sum.auxiliary {
                    group.push(StatRef::Sum(q));
                }
                if !t.lb.auxiliary {
                    group.push(StatRef::LongBlock(q));
                }
                if !t.sb.auxiliary {
                    group.push(StatRef::ShortBlock(q));
                }
                group
            })
            .collect()),
    }
}

fn indep(
    config: &RunConfig,
    battery: &ValidatedBattery,
    args: &IndepArgs,
) -> Result<Report, CliError> {
    let groups = parse_groups(args.groups.as_deref(), battery)?;
    if groups.len() < 2 {
        return Err(CliError::Validation(
            "independence needs at least two groups".into(),
        ));
    }
    let layout = build_layout(battery);
    let g = g_matrix(config, battery, &layout)?;
    let tol = match args.tol {
        Some(value) => Tolerance::Absolute { value },
        None => Tolerance::Default,
    };
    let result = check_independence(&g, &layout, &groups, tol).map_err(CliError::validation)?;
    let labels = coordinate_labels(&layout);
    let group_names: Vec<String> = groups
        .iter()
        .map(|g| {
            g.iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect();
    let mut report = new_report("indep", config, battery);
    report.set("method_meta", to_value(&g.meta));
    report.set("groups", to_value(&group_names));
    report.set(
        "verdict",
        if result.independent {
            "independent"
        } else {
            "not independent"
        },
    );
    report.set("note", result.note.clone());
    let mut table = Table::new(
        "violations",
        &["first", "second", "u", "v", "value", "threshold"],
    )
    .meta(
        "verdict",
        if result.independent {
            "independent"
        } else {
            "not_independent"
        },
    );
    let pairs: Vec<Value> = result
        .pairs
        .iter()
        .map(|p| {
            let violations: Vec<Value> = p
                .violations
                .iter()
                .map(|v| {
                    table.rows.push(vec![
                        group_names[p.first].clone(),
                        group_names[p.second].clone(),
                        labels[v.u].clone(),
                        labels[v.v].clone(),
                        format_float(v.value),
                        format_float(v.threshold),
                    ]);
                    json!({"u": labels[v.u], "v": labels[v.v], "value": float(v.value), "threshold": float(v.threshold)})
                })
                .collect();
            json!({
                "first": group_names[p.first],
                "second": group_names[p.second],
                "independent": p.independent,
                "violations": violations,
            })
        })
        .collect();
    report.set("pairs", Value::Array(pairs));
    report.tables.push(table);
    Ok(report)
}

fn covariance(
    config: &RunConfig,
    battery: &ValidatedBattery,
    _args: &CovarianceArgs,
) -> Result<Report, CliError> {
    let layout = build_layout(battery);
    let phi = estimate_phi(&layout, battery, &config.phi_method()).map_err(CliError::validation)?;
    let g = compute_g(&phi, config.blocks, config.h);
    let labels = coordinate_labels(&layout);
    let mut report = new_report("covariance", config, battery);
    report.set("coordinates", to_value(&labels));
    report.set("method_meta", to_value(&phi.meta));
    report.set("phi", matrix_value(&phi.matrix));
    report.set("g", matrix_value(&g.matrix));
    report.tables.push(matrix_table(
        "phi",
        &phi.matrix,
        &labels,
        config.blocks,
        config.h,
        &phi.meta,
    ));
    report.tables.push(matrix_table(
        "g",
        &g.matrix,
        &labels,
        config.blocks,
        config.h,
        &g.meta,
    ));
    if let (Some(phi_se), Some(g_se)) = (&phi.std_errors, &g.std_errors) {
        report.set("phi_std_errors", matrix_value(phi_se));
        report.set("g_std_errors", matrix_value(g_se));
        report.tables.push(matrix_table(
            "phi_std_errors",
            phi_se,
            &labels,
            config.blocks,
            config.h,
            &phi.meta,
        ));
        report.tables.push(matrix_table(
            "g_std_errors",
            g_se,
            &labels,
            config.blocks,
            config.h,
            &g.meta,
        ));
    }
    Ok(report)
}

fn probe(
    config: &RunConfig,
    battery: &ValidatedBattery,
    args: &ProbeArgs,
) -> Result<Report, CliError> {
    let mut report = new_report("probe", config, battery);
    report.set("grid", to_value(&args.grid));
    report.set("replicas", args.replicas);
    report.set("seed", args.seed);
    match args.mode {
        ProbeMode::Divergence => {
            let gen = parse_generator(args.generator.as_deref(), battery)?;
            let probe = divergence_probe(battery, &gen, &args.grid, args.replicas, args.seed)
                .map_err(CliError::validation)?;
            report.set("mode", "divergence");
            report.set("generator", to_value(&gen));
            let mut columns = vec!["n"];
            columns.extend(probe.labels.iter().map(String::as_str));
            let mut table = Table::new("medians", &columns);
            for (n, row) in probe.grid.iter().zip(&probe.medians) {
                table.push(&n.to_string(), row);
            }
            report.tables.push(table);
            report.set("probe", to_value(&probe));
        }
        ProbeMode::Convergence => {
            if args.generator.is_some() {
                return Err(CliError::Validation(
                    "convergence probes run under the null model".into(),
                ));
            }
            let limit = if battery.quads().is_empty() {
                None
            } else {
                let seed = derive_seed(args.seed, u64::MAX);
                report.set("limit", json!({"draws": args.limit_draws, "seed": seed}));
                Some(limit_draws(config, battery, args.limit_draws, seed)?.1)
            };
            let rate = convergence_rate(
                battery,
                &args.grid,
                args.replicas,
                args.seed,
                limit.as_ref(),
            )
            .map_err(CliError::validation)?;
            report.set("mode", "convergence");
            let mut columns = vec!["n"];
            columns.extend(rate.labels.iter().map(String::as_str));
            let mut table = Table::new("distances", &columns)
                .meta("noise_floor", format_float(rate.noise_floor));
            for (n, row) in rate.grid.iter().zip(&rate.distances) {
                table.push(&n.to_string(), row);
            }
            table.push("slope", &rate.slopes);
            report.tables.push(table);
            report.set("probe", to_value(&rate));
        }
    }
    Ok(report)
}
