//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Run with `cargo test --release -p jointstat-cli --test acceptance`.

use std::time::Instant;

use jointstat::catalog::{
    assemble_triple, eval_t_so, instantiate_test, rank_probability, serial_over_counts,
    SerialVariant, StatisticSpec, TestId,
};
use jointstat::joint::{
    build_layout, check_independence, compute_block_sums, compute_g, estimate_phi, sample_limit,
    PhiMethod, StatRef, Tolerance,
};
use jointstat::model::{
    compute_lb_moments, compute_sum_moments, MomentMethod, DEFAULT_ENUMERATION_CAP,
};
use jointstat::numeric::{correlation, mean_var, median};
use jointstat::simulate::{
    compare_joint, count_failures, derive_seed, divergence_probe, failure_budget, generate,
    gof_marginals, run_monte_carlo, Generator, McOptions,
};
use jointstat::statistics::eval_battery;
use jointstat::{
    validate_battery, BatteryConfig, LongBlockSpec, NullModel, QuadSpec, SumSpec, Triple,
    ValidatedBattery, WindowFn,
};
use jointstat_cli::run_command;
use rayon::prelude::*;

type Verdict = Result<String, String>;

fn test(id: TestId, null: &NullModel) -> StatisticSpec {
    instantiate_test(&id, null).unwrap()
}

fn triple(sum: Option<TestId>, lb: Option<TestId>, sb: Option<TestId>, null: &NullModel) -> Triple {
    let sum = sum.map(|t| match test(t, null) {
        StatisticSpec::Sum(s) => s,
        _ => panic!("not a summing test"),
    });
    let lb = lb.map(|t| match test(t, null) {
        StatisticSpec::LongBlock(s) => s,
        _ => panic!("not a long-block test"),
    });
    let sb = sb.map(|t| match test(t, null) {
        StatisticSpec::ShortBlock(s) => s,
        _ => panic!("not a short-block test"),
    });
    assemble_triple(sum, lb, sb, null).unwrap()
}

fn battery(
    null: &NullModel,
    triples: Vec<Triple>,
    quads: Vec<QuadSpec>,
    blocks: usize,
    h: usize,
    s: usize,
    n: usize,
) -> ValidatedBattery {
    validate_battery(BatteryConfig {
        null: null.clone(),
        triples,
        quads,
        blocks,
        stride: h,
        chain: s,
        n,
    })
    .unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-9)
}

fn c1_identities() -> Verdict {
    let null = NullModel::fair_bits();
    let (big_n, h, l) = (4, 2, 64);
    let n = big_n * l;
    let b = battery(
        &null,
        vec![
            triple(
                Some(TestId::Monobit),
                Some(TestId::BlockFrequency { n_lb: 4 }),
                Some(TestId::OnesCount { l_sb: 2 }),
                &null,
            ),
            triple(
                None,
                Some(TestId::BlockFrequency { n_lb: 2 }),
                Some(TestId::OnesCount { l_sb: 1 }),
                &null,
            ),
        ],
        vec![],
        big_n,
        h,
        h,
        n,
    );
    let layout = build_layout(&b);
    let gen = Generator::H0 { null: null.clone() };
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let seq = generate(&gen, n, derive_seed(101, i)).unwrap();
        let stats = eval_battery(&b, &seq).unwrap();
        let x = compute_block_sums(&layout, &b, &seq).unwrap().x;
        for (q, r) in layout.triples.iter().enumerate() {
            let m = b.triples()[q].sum.window();
            let t_sum = stats.values[3 * q];
            let t_lb = stats.values[3 * q + 1];
            let t_sb = stats.values[3 * q + 2];
            let sum_x: f64 = x.iter().map(|v| v[r.sum]).sum();
            worst = worst.max(rel_err(
                (((n - m + 1) as f64) / n as f64).sqrt() * t_sum,
                sum_x,
            ));
            let per = big_n / r.lb_blocks;
            let lb: f64 = (0..r.lb_blocks)
                .map(|k| {
                    x[per * k..per * (k + 1)]
                        .iter()
                        .map(|v| v[r.lb])
                        .sum::<f64>()
                        .powi(2)
                })
                .sum();
            worst = worst.max(rel_err(r.lb_blocks as f64 * lb, t_lb));
            let sb: f64 =
                r.sb.clone()
                    .map(|j| x.iter().map(|v| v[j]).sum::<f64>().powi(2))
                    .sum();
            worst = worst.max(rel_err(r.sb_block_len as f64 * sb, t_sb));
        }
    }
    let msg = format!("max relative error {worst:.2e} over 200 sequences (tolerance 1e-9)");
    if worst <= 1e-9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c2_phi_oracles() -> Verdict {
    let null = NullModel::fair_bits();
    let b = battery(
        &null,
        vec![triple(
            Some(TestId::Monobit),
            Some(TestId::BlockFrequency { n_lb: 2 }),
            Some(TestId::OnesCount { l_sb: 2 }),
            &null,
        )],
        vec![],
        4,
        2,
        2,
        64,
    );
    let layout = build_layout(&b);
    if layout.k_star != 5 {
        return Err(format!("K* = {}, expected 5", layout.k_star));
    }
    let exact = estimate_phi(
        &layout,
        &b,
        &PhiMethod::ExactEnumeration {
            cap: DEFAULT_ENUMERATION_CAP,
        },
    )
    .unwrap();
    let mc = estimate_phi(
        &layout,
        &b,
        &PhiMethod::MonteCarlo {
            replicates: 1_000_000,
            seed: 17,
        },
    )
    .unwrap();
    let closed = estimate_phi(
        &layout,
        &b,
        &PhiMethod::ClosedForm {
            cap: DEFAULT_ENUMERATION_CAP,
        },
    )
    .unwrap();
    let se = mc.std_errors.as_ref().unwrap();
    let mut max_z: f64 = 0.0;
    let mut max_cf: f64 = 0.0;
    let mut max_oracle: f64 = 0.0;
    // binomial(2, 1/2) cells, stride h = 2 and block length L_sb = 2
    let cells = [0.25, 0.5, 0.25];
    let (h, lsb) = (2.0, 2.0);
    let r = &layout.triples[0];
    let oracle = |u: usize, v: usize| -> f64 {
        let sb = |c: usize| r.sb.contains(&c).then(|| c - r.sb.start);
        match (sb(u), sb(v)) {
            (Some(i), Some(j)) if i == j => (h / lsb) * (1.0 - cells[i]),
            (Some(i), Some(j)) => -(h / lsb) * (cells[i] * cells[j]).sqrt(),
            // cov(S/sigma, 1{S=j}/sqrt(E_j)) over one block of two bits
            (Some(j), None) | (None, Some(j)) => 2.0 * (j as f64 - 1.0) * cells[j].sqrt(),
            (None, None) => h,
        }
    };
    for u in 0..5 {
        for v in 0..5 {
            let e = exact.matrix[(u, v)];
            let d = (mc.matrix[(u, v)] - e).abs();
            max_z = max_z.max(if se[(u, v)] > 0.0 {
                d / se[(u, v)]
            } else if d == 0.0 {
                0.0
            } else {
                f64::INFINITY
            });
            max_cf = max_cf.max((closed.matrix[(u, v)] - e).abs());
            max_oracle = max_oracle.max((oracle(u, v) - e).abs());
        }
    }
    let msg = format!("max |MC-exact|/SE = {max_z:.2} (<= 5), max |closed-exact| = {max_cf:.1e}, max |formula-exact| = {max_oracle:.1e} (<= 1e-12)");
    if max_z <= 5.0 && max_cf <= 1e-12 && max_oracle <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn gof_verdict(label: &str, results: &[jointstat::simulate::GofResult]) -> (usize, usize, String) {
    let failures = count_failures(results, 0.001);
    let min_p = results.iter().map(|r| r.p_value).fold(1.0, f64::min);
    (
        results.len(),
        failures,
        format!(
            "{label}: {} checks, {failures} failures, min p {min_p:.4}",
            results.len()
        ),
    )
}

fn c3_marginals() -> Verdict {
    let bits = NullModel::fair_bits();
    let b1 = battery(
        &bits,
        vec![triple(
            Some(TestId::Monobit),
            Some(TestId::BlockFrequency { n_lb: 8 }),
            Some(TestId::OnesCount { l_sb: 4 }),
            &bits,
        )],
        vec![],
        8,
        4,
        4,
        1 << 14,
    );
    let uni = NullModel::uniform();
    let b2 = battery(
        &uni,
        vec![
            triple(
                Some(TestId::MeanUniform),
                Some(TestId::UniformLbMean { n_lb: 4 }),
                Some(TestId::Permutation { l_sb: 3 }),
                &uni,
            ),
            triple(
                Some(TestId::SampleCorr { k: 1 }),
                Some(TestId::HammingWeight2 { r_bits: 4, n_lb: 4 }),
                Some(TestId::MatrixRank {
                    v1: 3,
                    v2: 3,
                    r_bits: 3,
                    classes: None,
                }),
                &uni,
            ),
        ],
        vec![],
        4,
        3,
        4,
        1 << 14,
    );
    let mut checks = 0;
    let mut failures = 0;
    let mut notes = Vec::new();
    for (name, b, null, seed) in [("bits", &b1, &bits, 31), ("uniform", &b2, &uni, 32)] {
        let report = run_monte_carlo(
            b,
            &Generator::H0 { null: null.clone() },
            2000,
            seed,
            &McOptions::default(),
        )
        .unwrap();
        let gof = gof_marginals(&report, b, None).unwrap();
        let (c, f, note) = gof_verdict(name, &gof);
        checks += c;
        failures += f;
        notes.push(note);
    }
    let budget = failure_budget(checks);
    let msg = format!("{}; budget {budget}", notes.join("; "));
    if failures <= budget {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c4_joint_limit() -> Verdict {
    let bits = NullModel::fair_bits();
    let t1 = triple(
        Some(TestId::Monobit),
        Some(TestId::BlockFrequency { n_lb: 2 }),
        Some(TestId::OnesCount { l_sb: 2 }),
        &bits,
    );
    let flip = WindowFn::new("flip", 2, |w| (w[0] != w[1]) as u8 as f64);
    let moments = compute_sum_moments(&flip, &bits, &MomentMethod::default()).unwrap();
    let lb_moments = compute_lb_moments(&flip, &bits, &MomentMethod::default()).unwrap();
    let sb = match test(TestId::OnesCount { l_sb: 4 }, &bits) {
        StatisticSpec::ShortBlock(s) => s,
        _ => unreachable!(),
    };
    let t2 = Triple::new(
        SumSpec::new(flip.clone(), moments).with_bound(1.0),
        LongBlockSpec::new(flip, 4, lb_moments),
        sb,
    );
    let quad = QuadSpec {
        name: "pair".into(),
        coeffs: vec![vec![1.0, 1.0], vec![1.0, -1.0]],
        sum_refs: vec![0, 1],
    };
    let b = battery(&bits, vec![t1, t2], vec![quad], 4, 4, 5, 1 << 14);
    let layout = build_layout(&b);
    let phi = estimate_phi(&layout, &b, &PhiMethod::default()).unwrap();
    let g = compute_g(&phi, 4, 4);
    let limit = sample_limit(&g, &layout, &b, 20_000, 41).unwrap();
    let report = run_monte_carlo(
        &b,
        &Generator::H0 { null: bits },
        2000,
        42,
        &McOptions::default(),
    )
    .unwrap();
    let cmp = compare_joint(&report, &limit, None).unwrap();
    let (checks, failures, note) = gof_verdict("two-sample KS", &cmp.ks);
    let budget = failure_budget(checks);
    let msg = format!(
        "{note}; budget {budget}; energy distance {:.4}",
        cmp.energy_distance
    );
    if failures <= budget {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c5_independence() -> Verdict {
    let uni = NullModel::uniform();
    let b = battery(
        &uni,
        vec![
            triple(Some(TestId::MeanUniform), None, None, &uni),
            triple(Some(TestId::CenteredSquare), None, None, &uni),
        ],
        vec![],
        4,
        1,
        1,
        1 << 14,
    );
    let layout = build_layout(&b);
    let phi = estimate_phi(
        &layout,
        &b,
        &PhiMethod::MonteCarlo {
            replicates: 1_000_000,
            seed: 51,
        },
    )
    .unwrap();
    let g = compute_g(&phi, 4, 1);
    let groups = vec![vec![StatRef::Sum(0)], vec![StatRef::Sum(1)]];
    let verdict = check_independence(&g, &layout, &groups, Tolerance::Default).unwrap();
    let (u, v) = (layout.triples[0].sum, layout.triples[1].sum);
    let z = g.matrix[(u, v)].abs() / g.std_errors.as_ref().unwrap()[(u, v)];
    let report = run_monte_carlo(
        &b,
        &Generator::H0 { null: uni },
        2000,
        52,
        &McOptions::default(),
    )
    .unwrap();
    let rho = correlation(&report.column(0), &report.column(3));
    let rho_bound = 5.0 / 2000f64.sqrt();

    let bits = NullModel::fair_bits();
    let dup = battery(
        &bits,
        vec![
            triple(Some(TestId::Monobit), None, None, &bits),
            triple(Some(TestId::Monobit), None, None, &bits),
        ],
        vec![],
        4,
        1,
        1,
        64,
    );
    let dl = build_layout(&dup);
    let dg = compute_g(
        &estimate_phi(&dl, &dup, &PhiMethod::default()).unwrap(),
        4,
        1,
    );
    let dv = check_independence(&dg, &dl, &groups, Tolerance::Default).unwrap();
    let violation = dv.pairs[0].violations.first().map(|v| v.value);
    let msg = format!(
        "theta vs (theta-1/2)^2: |G*|/SE = {z:.2}, verdict independent = {}, |rho| = {:.4} (< {rho_bound:.4}); duplicate: independent = {}, violation {violation:?} (1/N = 0.25)",
        verdict.independent,
        rho.abs(),
        dv.independent
    );
    if verdict.independent
        && z < 5.0
        && rho.abs() < rho_bound
        && !dv.independent
        && violation == Some(0.25)
    {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn t_so(n: usize, seed: u64, variant: SerialVariant) -> f64 {
    let seq = generate(&Generator::Uniform01, n, seed).unwrap();
    eval_t_so(&serial_over_counts(&seq, 2, 2).unwrap(), variant)
}

fn c6_serial_over() -> Verdict {
    let mut marginal_ok = true;
    for i in 0..60u64 {
        let n = 10 + (derive_seed(7, i) % 500) as usize;
        let seq = generate(&Generator::Uniform01, n, derive_seed(8, i)).unwrap();
        for (r, m) in [(1, 2), (2, 2), (2, 3), (3, 2), (1, 5)] {
            let c = serial_over_counts(&seq, r, m).unwrap();
            marginal_ok &= c.marginal() == c.nu_m1 && c.nu_m.iter().sum::<u64>() == n as u64;
        }
    }
    let values: Vec<f64> = (0..2000u64)
        .into_par_iter()
        .map(|i| t_so(1 << 14, derive_seed(61, i), SerialVariant::Classic))
        .collect();
    let (mean, var) = mean_var(&values);
    let se = (var / values.len() as f64).sqrt();
    let gap = |n: usize, base: u64| {
        let d: Vec<f64> = (0..400u64)
            .into_par_iter()
            .map(|i| {
                let seq = generate(&Generator::Uniform01, n, derive_seed(base, i)).unwrap();
                let c = serial_over_counts(&seq, 2, 2).unwrap();
                (eval_t_so(&c, SerialVariant::Classic) - eval_t_so(&c, SerialVariant::Tilde)).abs()
            })
            .collect();
        median(&d)
    };
    let (small, large) = (gap(1 << 10, 62), gap(1 << 16, 63));
    let msg = format!(
        "marginalization exact: {marginal_ok}; mean T_SO = {mean:.3} +- {se:.3} (target 12, |z| = {:.2}); median |T - T~|: {small:.2e} at 2^10, {large:.2e} at 2^16",
        (mean - 12.0).abs() / se
    );
    if marginal_ok && (mean - 12.0).abs() <= 5.0 * se && large < small {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Rank over GF(2) as log2 of the size of the row span.
fn span_rank(rows: [u8; 3]) -> usize {
    let mut span = std::collections::BTreeSet::new();
    for mask in 0..8u8 {
        let v = (0..3)
            .filter(|i| mask >> i & 1 == 1)
            .fold(0u8, |acc, i| acc ^ rows[i]);
        span.insert(v);
    }
    span.len().trailing_zeros() as usize
}

fn c7_catalog() -> Verdict {
    let mut counts = [0usize; 4];
    for m in 0..512u16 {
        let rows = [(m & 7) as u8, (m >> 3 & 7) as u8, (m >> 6 & 7) as u8];
        counts[span_rank(rows)] += 1;
    }
    let uni = NullModel::uniform();
    let classes = Some(vec![vec![0], vec![1], vec![2], vec![3]]);
    let cells = match test(
        TestId::MatrixRank {
            v1: 3,
            v2: 3,
            r_bits: 3,
            classes,
        },
        &uni,
    ) {
        StatisticSpec::ShortBlock(s) => s.cells,
        _ => unreachable!(),
    };
    let enumerated: Vec<f64> = counts.iter().map(|&c| c as f64 / 512.0).collect();
    let rank_ok =
        cells == enumerated && counts[3] == 168 && rank_probability(3, 3, 3) == 168.0 / 512.0;
    let perm = match test(TestId::Permutation { l_sb: 3 }, &uni) {
        StatisticSpec::ShortBlock(s) => s.cells,
        _ => unreachable!(),
    };
    let perm_ok = perm.len() == 6 && perm.iter().all(|&p| p == 1.0 / 6.0);
    let sigma = match test(TestId::SampleCorr { k: 1 }, &uni) {
        StatisticSpec::Sum(s) => s.sigma,
        _ => unreachable!(),
    };
    let sigma_err = (sigma - 13f64.sqrt() / 12.0).abs();
    let msg = format!("rank counts {counts:?} match cells: {rank_ok}; permutation cells 1/6: {perm_ok}; |sigma - sqrt(13)/12| = {sigma_err:.1e}");
    if rank_ok && perm_ok && sigma_err <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c8_divergence() -> Verdict {
    let bits = NullModel::fair_bits();
    let b = battery(
        &bits,
        vec![triple(Some(TestId::Monobit), None, None, &bits)],
        vec![],
        1,
        1,
        1,
        400,
    );
    let grid = [400, 1600, 6400];
    let alt = divergence_probe(&b, &Generator::Bernoulli { p: 0.75 }, &grid, 2000, 81).unwrap();
    let h0 = divergence_probe(&b, &Generator::H0 { null: bits }, &grid, 4000, 82).unwrap();
    let ratio = alt.medians[2][0] / alt.medians[0][0];
    let diff = (h0.medians[2][0] - h0.medians[0][0]).abs();
    let msg = format!("Bernoulli(0.75) median ratio {ratio:.3} (in [3, 5]); H0 median difference {diff:.3} (< 0.1)");
    if (3.0..=5.0).contains(&ratio) && diff < 0.1 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c9_reproducibility() -> Verdict {
    let dir = std::env::temp_dir().join(format!("jointstat-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("battery.json");
    std::fs::write(
        &cfg,
        r#"{"version":1,"null_model":{"kind":"finite","pmf":[0.5,0.5]},"n":4096,"N":4,"h":2,"s":2,
  "triples":[{"sum":{"test":"monobit"},"lb":{"test":"block_frequency","n_lb":2},"sb":{"test":"ones_count","l_sb":2}}],
  "quads":[{"name":"square","coeffs":[[1.0]],"sum_refs":[1]}]}"#,
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap().to_string();
    let cases: [&[&str]; 4] = [
        &[
            "mc",
            "--replicas",
            "500",
            "--seed",
            "3",
            "--limit-draws",
            "2000",
            "--keep-replicas",
        ],
        &["limit", "--draws", "5000", "--seed", "4"],
        &[
            "probe",
            "--grid",
            "256,1024,4096",
            "--replicas",
            "200",
            "--seed",
            "5",
            "--generator",
            r#"{"kind":"bernoulli","p":0.6}"#,
        ],
        &[
            "probe",
            "--mode",
            "convergence",
            "--grid",
            "256,1024,4096",
            "--replicas",
            "200",
            "--seed",
            "6",
            "--limit-draws",
            "2000",
        ],
    ];
    let mut identical = 0;
    for case in cases {
        let outputs: Vec<Vec<u8>> = ["1", "8", "1", "8"]
            .iter()
            .map(|w| {
                let mut argv = vec!["jointstat", "--config", &cfg, "--workers", w];
                argv.extend_from_slice(case);
                let out = run_command(argv);
                assert_eq!(out.code, 0, "{case:?}: {}", out.stderr);
                out.stdout
            })
            .collect();
        if outputs.iter().all(|o| o == &outputs[0]) {
            identical += 1;
        }
    }
    std::fs::remove_dir_all(&dir).ok();
    let msg = format!("{identical}/4 subcommands byte-identical across repeats and 1 vs 8 workers");
    if identical == 4 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() {
    let criteria: [(&str, &str, fn() -> Verdict); 9] = [
        ("C1", "exact decomposition identities", c1_identities),
        ("C2", "Phi* oracle equivalence", c2_phi_oracles),
        ("C3", "marginal limit laws", c3_marginals),
        ("C4", "joint limit", c4_joint_limit),
        ("C5", "independence criterion", c5_independence),
        ("C6", "serial-over statistic", c6_serial_over),
        ("C7", "catalog oracles", c7_catalog),
        ("C8", "divergence under alternatives", c8_divergence),
        ("C9", "reproducibility", c9_reproducibility),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        let start = Instant::now();
        let verdict = check();
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("{id} PASS {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    println!("acceptance: {} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
