mod common;

use std::collections::BTreeMap;

use ehr_frailty::analysis::{
    frailty_quintiles, pearson_corr_ci, quintile_characteristics, risk_ranges, stability_frailty_table,
    write_correlations, write_plotdata, write_quintile_table, write_risk_ranges,
};
use ehr_frailty::cohort::{Cohort, Sex, Variable};
use ehr_frailty::stability::{variable_stability, StabilityOptions};
use ehr_frailty::synthgen::generate;
use proptest::prelude::*;

fn frailty_map(values: &[f64]) -> BTreeMap<String, f64> {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| (format!("P{i:03}"), *v))
        .collect()
}

/// `y` with sample correlation exactly `r` against `x`.
fn correlated(x: &[f64], noise: &[f64], r: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let centre = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / n;
        v.iter().map(|a| a - m).collect::<Vec<_>>()
    };
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let xc = centre(x);
    let xs: Vec<f64> = xc.iter().map(|a| a / norm(&xc)).collect();
    let ec = centre(noise);
    let proj: f64 = ec.iter().zip(&xs).map(|(a, b)| a * b).sum();
    let eo: Vec<f64> = ec.iter().zip(&xs).map(|(a, b)| a - proj * b).collect();
    let es: Vec<f64> = eo.iter().map(|a| a / norm(&eo)).collect();
    xs.iter()
        .zip(&es)
        .map(|(a, e)| r * a + (1.0 - r * r).sqrt() * e)
        .collect()
}

fn pseudo(n: usize, seed: u64) -> Vec<f64> {
    // Deterministic spread-out values; the order is scrambled by the multiplier.
    (0..n)
        .map(|i| (((i as u64 + 1) * 2654435761 + seed * 97) % 10007) as f64 / 10007.0)
        .collect()
}

#[test]
fn quintile_sizes_for_392_practices() {
    let q = frailty_quintiles(&frailty_map(&pseudo(392, 1))).unwrap();
    assert_eq!(q.sizes, [78, 78, 79, 78, 79]);
    assert!(frailty_quintiles(&frailty_map(&[1.0, 2.0, 3.0, 4.0])).is_err());
    assert!(frailty_quintiles(&frailty_map(&[1.0, 2.0, f64::NAN, 4.0, 5.0])).is_err());
}

#[test]
fn fisher_interval_hand_case() {
    let x = pseudo(392, 2);
    let y = correlated(&x, &pseudo(392, 7).iter().map(|v| v * v).collect::<Vec<_>>(), 0.46);
    let c = pearson_corr_ci(&x, &y, 0.95).unwrap();
    assert!((c.r - 0.46).abs() < 1e-12);
    assert!((c.lower - 0.3782).abs() < 5e-5, "{}", c.lower);
    assert!((c.upper - 0.5347).abs() < 5e-5, "{}", c.upper);
    // Independent check: tanh(atanh(r) -/+ 1.959964 / sqrt(n - 3)).
    let se = 1.0 / 389f64.sqrt();
    assert!((c.lower - (0.46f64.atanh() - 1.959963984540054 * se).tanh()).abs() < 1e-12);
    assert!((c.upper - (0.46f64.atanh() + 1.959963984540054 * se).tanh()).abs() < 1e-12);
}

proptest! {
    #[test]
    fn quintiles_ignore_monotone_transforms(b in proptest::collection::vec(-1.0f64..1.0, 5..80)) {
        let exp: Vec<f64> = b.iter().map(|v| v.exp()).collect();
        let qb = frailty_quintiles(&frailty_map(&b)).unwrap();
        let qe = frailty_quintiles(&frailty_map(&exp)).unwrap();
        prop_assert_eq!(&qb.quintile, &qe.quintile);
        prop_assert_eq!(qb.sizes.iter().sum::<usize>(), b.len());
        let (lo, hi) = (qb.sizes.iter().min().unwrap(), qb.sizes.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
    }

    #[test]
    fn pearson_is_symmetric_and_affine_invariant(
        pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 5..50),
        a in 0.1f64..10.0,
        c in -5.0f64..5.0,
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let Ok(xy) = pearson_corr_ci(&x, &y, 0.95) else { return Ok(()) };
        let yx = pearson_corr_ci(&y, &x, 0.95).unwrap();
        prop_assert!((xy.r - yx.r).abs() < 1e-12);
        let moved: Vec<f64> = x.iter().map(|v| a * v + c).collect();
        let m = pearson_corr_ci(&moved, &y, 0.95).unwrap();
        prop_assert!((m.r - xy.r).abs() < 1e-9);
        let flipped: Vec<f64> = x.iter().map(|v| -a * v).collect();
        prop_assert!((pearson_corr_ci(&flipped, &y, 0.95).unwrap().r + xy.r).abs() < 1e-9);
        prop_assert!(xy.lower <= xy.r && xy.r <= xy.upper);
    }
}

fn cohort_and_frailty() -> (Cohort, BTreeMap<String, f64>) {
    let (cohort, truth) = generate(&common::config(5, 23, 40.0, 0.3, 0.0)).unwrap();
    let frailty = truth.practices.iter().map(|(id, p)| (id.clone(), p.b.exp())).collect();
    (cohort, frailty)
}

#[test]
fn weighted_quintile_means_recover_overall_practice_means() {
    let (cohort, frailty) = cohort_and_frailty();
    let q = frailty_quintiles(&frailty).unwrap();
    let rows = quintile_characteristics(&cohort, &q).unwrap();
    for sex in Sex::ALL {
        let sub = cohort.of_sex(sex);
        for name in ["n_patients", "age", "events"] {
            let mine: Vec<_> = rows
                .iter()
                .filter(|r| r.sex == sex.to_string() && r.characteristic == name)
                .collect();
            assert_eq!(mine.len(), 5);
            let total: usize = mine.iter().map(|r| r.n_practices).sum();
            let grand = mine.iter().map(|r| r.mean * r.n_practices as f64).sum::<f64>() / total as f64;
            let per_practice: Vec<f64> = sub
                .practice_ids()
                .into_iter()
                .map(|id| {
                    let recs: Vec<_> = sub.practice_records(id).collect();
                    match name {
                        "n_patients" => recs.len() as f64,
                        "events" => recs.iter().filter(|r| r.event).count() as f64,
                        _ => recs.iter().map(|r| r.age).sum::<f64>() / recs.len() as f64,
                    }
                })
                .collect();
            let oracle = per_practice.iter().sum::<f64>() / per_practice.len() as f64;
            assert_eq!(total, per_practice.len());
            assert!((grand - oracle).abs() < 1e-12 * oracle.abs().max(1.0), "{sex} {name}");
        }
    }
    let mut partial = frailty.clone();
    partial.pop_first();
    assert!(quintile_characteristics(&cohort, &frailty_quintiles(&partial).unwrap()).is_err());
}

#[test]
fn stability_rows_plot_points_and_writers() {
    let (cohort, frailty) = cohort_and_frailty();
    let mut reports = Vec::new();
    for sex in Sex::ALL {
        let mut r = variable_stability(&cohort.of_sex(sex), Variable::Age, &StabilityOptions::default()).unwrap();
        r.stratum = Some(sex.to_string());
        reports.push(r);
    }
    let by_sex: BTreeMap<String, BTreeMap<String, f64>> =
        Sex::ALL.iter().map(|s| (s.to_string(), frailty.clone())).collect();
    let table = stability_frailty_table(&reports, &by_sex, &cohort).unwrap();
    assert_eq!(table.rows.len(), 4);
    assert!(table.rows.iter().all(|r| r.correlation.is_some() || r.error.is_some()));
    assert_eq!(table.reference_line, 1.0);
    assert!(table.plot.iter().all(|p| (1..=10).contains(&p.percentile_bin)));

    let q = frailty_quintiles(&frailty).unwrap();
    let ranges = risk_ranges("female", &q, &frailty, 0.1).unwrap();
    assert_eq!(ranges.len(), 5);
    for w in ranges.windows(2) {
        assert!(w[0].frailty_max <= w[1].frailty_min);
        assert!(w[0].risk_max <= w[1].risk_min);
    }

    let text = |f: &dyn Fn(&mut Vec<u8>)| {
        let mut buf = Vec::new();
        f(&mut buf);
        String::from_utf8(buf).unwrap()
    };
    let rows = quintile_characteristics(&cohort, &q).unwrap();
    assert!(text(&|b| write_quintile_table(b, &rows).unwrap())
        .starts_with("quintile,sex,characteristic,unit,mean,sd,n_practices\n"));
    assert!(text(&|b| write_correlations(b, &table.rows).unwrap()).starts_with("variable,sex,r,lo,hi,n"));
    assert!(text(&|b| write_plotdata(b, &table).unwrap())
        .starts_with("practice_id,variable,sex,percentile_bin,value,frailty,reference_line\n"));
    let rr = text(&|b| write_risk_ranges(b, &ranges).unwrap());
    assert!(rr.starts_with("quintile,frailty_min,frailty_max,risk_min,risk_max"));
    assert_eq!(rr.lines().count(), 6);
}
