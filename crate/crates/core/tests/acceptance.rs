//! Acceptance criteria 1 to 10. Each test prints one line
//! `acceptance criterion N: PASS|FAIL ...` to the real stdout (not the
//! captured test output) and then asserts the outcome.
//!
//! Criteria run one at a time so their wall-clock limits are measured
//! without interference from each other.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ehr_frailty::analysis::{
    frailty_quintiles, pearson_corr_ci, quintile_characteristics, risk_ranges, stability_frailty_table,
    write_correlations, write_plotdata, write_quintile_table, write_risk_ranges,
};
use ehr_frailty::cohort::{write_cohort, Cohort, Condition, Sex, Variable};
use ehr_frailty::imputation::{impute, pool, ImputationConfig};
use ehr_frailty::riskmodel::{linear_predictor, CoefficientTable};
use ehr_frailty::stability::{
    embed_sources, jsd, missingness_stability, stability_of, variable_stability, write_reports, DiscreteDistribution,
    StabilityOptions, Support,
};
use ehr_frailty::survival::{
    adjust_risk, fit_cox, fit_random_intercept, fit_random_slope, log_partial_likelihood, score,
    simulate_random_effect_draws, CoxOptions, DrawSpec, FrailtyOptions, SlopeOptions, SurvivalDataset,
};
use ehr_frailty::synthgen::{generate, inject_missingness, Mechanism, MissingRates, RateSpec};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn run<F: FnOnce() -> (bool, String)>(n: u8, limit: Duration, check: F) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let (ok, detail) = check();
    let elapsed = start.elapsed();
    let in_time = elapsed <= limit;
    let pass = ok && in_time;
    let line = format!(
        "acceptance criterion {n}: {} ({detail}; {:.2} s of {} s allowed)\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    let mut out = std::io::stdout();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(ok, "criterion {n}: {detail}");
    assert!(in_time, "criterion {n}: took {elapsed:?}, limit {limit:?}");
}

fn dist(p: &[f64]) -> DiscreteDistribution {
    DiscreteDistribution {
        support: Support::categories((0..p.len()).map(|i| i as f64).collect(), false),
        probabilities: p.to_vec(),
    }
}

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("S{i}")).collect()
}

fn lp_of(cohort: &Cohort, table: &CoefficientTable) -> Vec<f64> {
    cohort
        .records()
        .iter()
        .map(|r| linear_predictor(r, table).unwrap())
        .collect()
}

fn spread(spec: DrawSpec) -> (f64, f64) {
    let s = simulate_random_effect_draws(&spec).unwrap();
    (s.percentile(2.5).unwrap(), s.percentile(97.5).unwrap())
}

#[test]
fn criterion_01_frailty_adjusted_risk_table() {
    run(1, Duration::from_secs(1), || {
        let z = [0.6, 0.7, 0.9, 1.0, 1.1, 1.6, 1.7];
        let want = [6.1, 7.1, 9.0, 10.0, 10.9, 15.5, 16.4];
        let got: Vec<f64> = z
            .iter()
            .map(|&f| (adjust_risk(0.10, f).unwrap() * 1000.0).round() / 10.0)
            .collect();
        (got == want, format!("rounded risks {got:?}"))
    });
}

#[test]
fn criterion_02_intercept_only_range() {
    run(2, Duration::from_secs(30), || {
        let (lo, hi) = spread(DrawSpec {
            sigma_b: 0.03f64.sqrt(),
            sigma_u: 0.0,
            base_risk: 0.10,
            lp_scale: 1.0,
            n: 1_000_000,
            seed: 2,
        });
        // Analytic percentiles of 1 - 0.9^exp(b).
        let q = 1.959963984540054 * 0.03f64.sqrt();
        let (alo, ahi) = (1.0 - 0.9f64.powf((-q).exp()), 1.0 - 0.9f64.powf(q.exp()));
        let ok = (lo * 100.0 - 7.2).abs() <= 0.1
            && (hi * 100.0 - 13.7).abs() <= 0.1
            && (lo - alo).abs() < 5e-4
            && (hi - ahi).abs() < 5e-4;
        (
            ok,
            format!(
                "2.5%/97.5% = {:.3}%/{:.3}%, analytic {:.3}%/{:.3}%",
                lo * 100.0,
                hi * 100.0,
                alo * 100.0,
                ahi * 100.0
            ),
        )
    });
}

#[test]
fn criterion_03_quintile_cut_rule() {
    run(3, Duration::from_secs(1), || {
        let frailty: BTreeMap<String, f64> = (0..392)
            .map(|i| (format!("P{i:03}"), ((i * 7919) % 392) as f64 / 100.0))
            .collect();
        let q = frailty_quintiles(&frailty).unwrap();
        (q.sizes == [78, 78, 79, 78, 79], format!("sizes {:?}", q.sizes))
    });
}

#[test]
fn criterion_04_stability_metric_properties() {
    run(4, Duration::from_secs(10), || {
        let mut notes = Vec::new();
        let mut ok = true;

        let same: Vec<_> = (0..6).map(|_| dist(&[0.1, 0.2, 0.3, 0.4])).collect();
        let r = stability_of("same", labels(6), &same).unwrap();
        let worst_same = r.spo.iter().copied().fold(r.gpd, f64::max);
        ok &= worst_same < 1e-9;
        notes.push(format!("identical max {worst_same:.1e}"));

        let mut worst_disjoint: f64 = 0.0;
        for n in 2..=12 {
            let d: Vec<_> = (0..n)
                .map(|i| dist(&(0..n).map(|j| (i == j) as u8 as f64).collect::<Vec<_>>()))
                .collect();
            let r = stability_of("disjoint", labels(n), &d).unwrap();
            for v in r.spo.iter().chain(std::iter::once(&r.gpd)) {
                worst_disjoint = worst_disjoint.max((v - 1.0).abs());
            }
        }
        ok &= worst_disjoint < 1e-6;
        notes.push(format!("disjoint max |x-1| {worst_disjoint:.1e}"));

        let v = jsd(&dist(&[0.5, 0.5]), &dist(&[0.25, 0.75])).unwrap();
        ok &= (v - 0.048795).abs() <= 1e-6;
        notes.push(format!("jsd {v:.6}"));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut worst_mds: f64 = 0.0;
        for _ in 0..50 {
            let n = rng.random_range(2..15);
            let dim = rng.random_range(1..5);
            let pts: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let d = DMatrix::from_fn(n, n, |i, j| {
                pts[i]
                    .iter()
                    .zip(&pts[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            });
            let x = embed_sources(&d).unwrap().coordinates;
            for i in 0..n {
                for j in 0..n {
                    worst_mds = worst_mds.max(((x.row(i) - x.row(j)).norm() - d[(i, j)]).abs());
                }
            }
        }
        ok &= worst_mds < 1e-8;
        notes.push(format!("mds round trip {worst_mds:.1e}"));
        (ok, notes.join(", "))
    });
}

#[test]
fn criterion_05_cox_oracle() {
    run(5, Duration::from_secs(60), || {
        let x = DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 1.0, 0.0]);
        let data = SurvivalDataset::new(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![true; 4],
            vec![0.0; 4],
            vec!["g".into(); 4],
        )
        .unwrap()
        .with_covariates(x, vec!["x".into()])
        .unwrap();
        let beta = fit_cox(&data, &CoxOptions::default()).unwrap().beta[0];
        let closed = ((1.0 + 17f64.sqrt()) / 2.0).ln();
        // Written out by hand: risk sets {all}, {2,3,4}, {3,4}, {4}.
        let pl = |b: f64| {
            let e = b.exp();
            2.0 * b - (2.0 * e + 2.0).ln() - (e + 2.0).ln() - (e + 1.0).ln()
        };
        let grid = (0..=300_000)
            .map(|k| -1.0 + k as f64 * 1e-5)
            .max_by(|a, b| pl(*a).total_cmp(&pl(*b)))
            .unwrap();
        let mut ok = (beta - grid).abs() < 1e-3 && (beta - closed).abs() < 1e-3;

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let n = rng.random_range(5..25);
            let p = rng.random_range(1..4);
            let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
            let d = SurvivalDataset::new(
                (0..n).map(|_| rng.random_range(0.1..5.0)).collect(),
                (0..n).map(|_| rng.random_bool(0.7)).collect(),
                (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
                vec!["g".into(); n],
            )
            .unwrap()
            .with_covariates(x, (0..p).map(|k| format!("x{k}")).collect())
            .unwrap();
            let b: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = score(&d, &b).unwrap();
            let h = 1e-5;
            for k in 0..p {
                let (mut up, mut dn) = (b.clone(), b.clone());
                up[k] += h;
                dn[k] -= h;
                let fd =
                    (log_partial_likelihood(&d, &up).unwrap() - log_partial_likelihood(&d, &dn).unwrap()) / (2.0 * h);
                worst = worst.max((fd - s[k]).abs() / s[k].abs().max(1.0));
            }
        }
        ok &= worst < 1e-6;
        (
            ok,
            format!("beta {beta:.6}, grid {grid:.5}, closed form {closed:.6}; worst score error {worst:.1e}"),
        )
    });
}

fn intercept_estimate(seed: u64, sd: f64) -> f64 {
    let (cohort, truth) = generate(&common::config(seed, 200, 1000.0, sd, 0.0)).unwrap();
    let data = SurvivalDataset::from_cohort(&cohort, &lp_of(&cohort, &truth.table)).unwrap();
    fit_random_intercept(&data, &FrailtyOptions::default())
        .unwrap()
        .variance
}

#[test]
fn criterion_06_frailty_recovery() {
    run(6, Duration::from_secs(600), || {
        let mut ok = true;
        let mut notes = Vec::new();
        for sd in [0.1, 0.2, 0.3] {
            let hits = (0..5u64)
                .filter(|&s| {
                    let sigma = intercept_estimate(600 + s, sd).sqrt();
                    (sigma / sd - 1.0).abs() <= 0.25
                })
                .count();
            ok &= hits >= 4;
            notes.push(format!("sd {sd}: {hits}/5"));
        }
        let null = intercept_estimate(699, 0.0);
        ok &= null < 0.005;
        notes.push(format!("null variance {null:.2e}"));
        (ok, notes.join(", "))
    });
}

#[test]
fn criterion_07_null_slope() {
    run(7, Duration::from_secs(600), || {
        let (cohort, truth) = generate(&common::config(700, 120, 800.0, 0.2, 0.0)).unwrap();
        let data = SurvivalDataset::from_cohort(&cohort, &lp_of(&cohort, &truth.table)).unwrap();
        let opts = FrailtyOptions::default();
        let mut ok = true;
        let mut notes = Vec::new();
        let mut var_b = Vec::new();
        for frac in [0.2, 0.4, 0.5, 0.6] {
            let slope = SlopeOptions {
                subsample_frac: frac,
                repeats: 3,
                seed: 7,
            };
            let fit = fit_random_slope(&data, &slope, &opts).unwrap();
            ok &= fit.var_u < 0.005 && (fit.gamma - 1.0).abs() <= 0.05;
            notes.push(format!(
                "f {frac}: var_u {:.1e} gamma {:.3} var_b {:.4}",
                fit.var_u, fit.gamma, fit.var_b
            ));
            var_b.push(fit.var_b);
        }
        // Intercept variances agree within 50% of their mean across fractions;
        // the slope variances sit near zero, where relative agreement is
        // not meaningful, so they are held to the absolute bound above.
        let mean = var_b.iter().sum::<f64>() / var_b.len() as f64;
        ok &= var_b.iter().all(|v| (v / mean - 1.0).abs() <= 0.5);
        (ok, notes.join("; "))
    });
}

#[test]
fn criterion_08_slope_spread_is_small() {
    run(8, Duration::from_secs(120), || {
        let (lo, hi) = spread(DrawSpec {
            sigma_b: 0.03f64.sqrt(),
            sigma_u: 0.0,
            base_risk: 0.10,
            lp_scale: 1.0,
            n: 1_000_000,
            seed: 2,
        });
        let intercept = hi - lo;
        let mut widest: f64 = 0.0;
        let mut at = 0.0;
        for k in 0..=14 {
            let lp_scale = 0.9 + 0.1 * k as f64;
            let (l, h) = spread(DrawSpec {
                sigma_b: 0.0,
                sigma_u: 0.0003f64.sqrt(),
                base_risk: 0.10,
                lp_scale,
                n: 1_000_000,
                seed: 8,
            });
            if h - l > widest {
                widest = h - l;
                at = lp_scale;
            }
        }
        let ok = widest < 0.015 && 4.0 * widest <= intercept;
        (
            ok,
            format!(
                "widest slope-only spread {:.3}pp at lp_scale {at:.1}, intercept-only {:.3}pp",
                widest * 100.0,
                intercept * 100.0
            ),
        )
    });
}

fn lp_coefficient(cohort: &Cohort, table: &CoefficientTable) -> f64 {
    let lp = lp_of(cohort, table);
    let n = lp.len();
    let data = SurvivalDataset::from_cohort(cohort, &vec![0.0; n])
        .unwrap()
        .with_covariates(DMatrix::from_column_slice(n, 1, &lp), vec!["lp".into()])
        .unwrap();
    fit_cox(&data, &CoxOptions::default()).unwrap().beta[0]
}

#[test]
fn criterion_09_multiple_imputation() {
    run(9, Duration::from_secs(300), || {
        let rates: MissingRates = Variable::IMPUTABLE
            .iter()
            .map(|&v| (v, RateSpec::Uniform(0.3)))
            .collect();
        let mut hits = 0;
        let mut worst: f64 = 0.0;
        for seed in 0..20u64 {
            let (cohort, truth) = generate(&common::config(900 + seed, 40, 250.0, 0.1, 0.0)).unwrap();
            let full = lp_coefficient(&cohort, &truth.table);
            let incomplete = inject_missingness(&cohort, &rates, Mechanism::Mcar, seed).unwrap();
            let done = impute(&incomplete, &ImputationConfig { m: 5, seed, ridge: 1.0 }).unwrap();
            let per: Vec<Vec<f64>> = done
                .cohorts
                .iter()
                .map(|c| vec![lp_coefficient(c, &truth.table)])
                .collect();
            let pooled = pool(&per).unwrap()[0];
            let rel = (pooled / full - 1.0).abs();
            worst = worst.max(rel);
            hits += (rel <= 0.10) as usize;
        }
        (
            hits >= 19,
            format!("{hits}/20 seeds within 10%, worst {:.1}%", worst * 100.0),
        )
    });
}

fn header(text: &str) -> Vec<&str> {
    text.lines().next().unwrap_or("").split(',').collect()
}

/// Every row has the header's width and every numeric cell parses.
fn well_formed(text: &str, numeric: &[&str]) -> bool {
    let cols = header(text);
    let idx: Vec<usize> = numeric
        .iter()
        .filter_map(|n| cols.iter().position(|c| c == n))
        .collect();
    idx.len() == numeric.len()
        && text.lines().count() > 1
        && text.lines().skip(1).all(|l| {
            let cells: Vec<&str> = l.split(',').collect();
            cells.len() == cols.len()
                && idx
                    .iter()
                    .all(|&i| cells[i].is_empty() || cells[i].parse::<f64>().is_ok())
        })
}

#[test]
fn criterion_10_report_schemas() {
    run(10, Duration::from_secs(120), || {
        let mut cfg = common::config(1000, 30, 120.0, 0.25, 0.0);
        cfg.statin_rate = 0.01;
        cfg.random_censor_rate = 0.02;
        let (complete, truth) = generate(&cfg).unwrap();
        let rates: MissingRates = [
            (Variable::Bmi, RateSpec::Uniform(0.15)),
            (Variable::Smoking, RateSpec::Uniform(0.05)),
        ]
        .into_iter()
        .collect();
        let cohort = inject_missingness(&complete, &rates, Mechanism::Mcar, 1).unwrap();

        let mut reports = Vec::new();
        for sex in Sex::ALL {
            let sub = cohort.of_sex(sex);
            for v in [
                Variable::Age,
                Variable::Sbp,
                Variable::Smoking,
                Variable::Flag(Condition::Type2Diabetes),
            ] {
                let mut r = variable_stability(&sub, v, &StabilityOptions::default()).unwrap();
                r.stratum = Some(sex.to_string());
                reports.push(r);
            }
            let mut r = missingness_stability(&sub, Variable::Bmi).unwrap();
            r.stratum = Some(sex.to_string());
            reports.push(r);
        }
        let done = impute(
            &cohort,
            &ImputationConfig {
                m: 2,
                seed: 1,
                ridge: 1.0,
            },
        )
        .unwrap();
        let first = &done.cohorts[0];
        let mut by_sex = BTreeMap::new();
        let mut ranges = Vec::new();
        let mut characteristics = Vec::new();
        for sex in Sex::ALL {
            let sub = first.of_sex(sex);
            let data = SurvivalDataset::from_cohort(&sub, &lp_of(&sub, &truth.table)).unwrap();
            let fit = fit_random_intercept(&data, &FrailtyOptions::default()).unwrap();
            let frailty: BTreeMap<String, f64> = fit.group_ids.iter().cloned().zip(fit.frailty()).collect();
            let q = frailty_quintiles(&frailty).unwrap();
            ranges.extend(risk_ranges(&sex.to_string(), &q, &frailty, 0.10).unwrap());
            characteristics.extend(
                quintile_characteristics(&cohort.of_sex(sex), &q)
                    .unwrap()
                    .into_iter()
                    .filter(|r| r.sex == sex.to_string()),
            );
            by_sex.insert(sex.to_string(), frailty);
        }
        let table = stability_frailty_table(&reports, &by_sex, &cohort).unwrap();

        let write = |f: &dyn Fn(&mut Vec<u8>) -> ehr_frailty::Result<()>| {
            let mut buf = Vec::new();
            f(&mut buf).unwrap();
            String::from_utf8(buf).unwrap()
        };
        let files = [
            (
                "cohort",
                write(&|b| write_cohort(b, &cohort)),
                vec!["patient_id", "practice_id", "sex", "age"],
                vec!["age", "follow_up_years"],
            ),
            (
                "stability_report",
                write(&|b| write_reports(b, &reports)),
                vec![
                    "variable",
                    "source_id",
                    "spo",
                    "gpd",
                    "n_sources",
                    "clipped_mass",
                    "sex",
                ],
                vec!["spo", "gpd", "n_sources", "clipped_mass"],
            ),
            (
                "quintile_table",
                write(&|b| write_quintile_table(b, &characteristics)),
                vec!["quintile", "sex", "characteristic", "unit", "mean", "sd", "n_practices"],
                vec!["quintile", "mean", "sd", "n_practices"],
            ),
            (
                "correlations",
                write(&|b| write_correlations(b, &table.rows)),
                vec!["variable", "sex", "r", "lo", "hi", "n", "metric", "error"],
                vec!["r", "lo", "hi", "n"],
            ),
            (
                "plotdata_beeswarm",
                write(&|b| write_plotdata(b, &table)),
                vec![
                    "practice_id",
                    "variable",
                    "sex",
                    "percentile_bin",
                    "value",
                    "frailty",
                    "reference_line",
                ],
                vec!["percentile_bin", "value", "frailty", "reference_line"],
            ),
            (
                "risk_ranges",
                write(&|b| write_risk_ranges(b, &ranges)),
                vec![
                    "quintile",
                    "frailty_min",
                    "frailty_max",
                    "risk_min",
                    "risk_max",
                    "sex",
                    "n_practices",
                ],
                vec![
                    "quintile",
                    "frailty_min",
                    "frailty_max",
                    "risk_min",
                    "risk_max",
                    "n_practices",
                ],
            ),
        ];
        let mut bad = Vec::new();
        for (name, text, columns, numeric) in &files {
            let h = header(text);
            let prefix_ok = h.len() >= columns.len() && h[..columns.len()] == columns[..];
            if !(prefix_ok && well_formed(text, numeric)) {
                bad.push(*name);
            }
        }
        // Two sexes, five quintiles, per-sex frailty coverage.
        let shape_ok = ranges.len() == 10
            && ranges.iter().map(|r| r.n_practices).sum::<usize>() == 2 * cohort.n_practices()
            && table.rows.len() == 2 * reports.len()
            && pearson_corr_ci(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 0.95).is_err();
        let ok = bad.is_empty() && shape_ok;
        (
            ok,
            format!(
                "{} report files checked, schema problems {bad:?}; study-data values (registry tables, \
                 correlations, bootstrap intervals) are not reproducible without the source records",
                files.len()
            ),
        )
    });
}
