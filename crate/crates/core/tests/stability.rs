mod common;

use ehr_frailty::cohort::{Cohort, Sex, Variable};
use ehr_frailty::stability::{
    embed_sources, jsd, missingness_stability, multivariate_stability, pairwise_distance, stability_of,
    variable_stability, write_reports, DiscreteDistribution, StabilityOptions, Support,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn dist(p: &[f64]) -> DiscreteDistribution {
    DiscreteDistribution {
        support: Support::categories((0..p.len()).map(|i| i as f64).collect(), false),
        probabilities: p.to_vec(),
    }
}

fn normalised(w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn arb_dist(k: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..1.0, k)
        .prop_filter("non-zero mass", |w| w.iter().sum::<f64>() > 1e-3)
        .prop_map(normalised)
}

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("S{i}")).collect()
}

/// Independent entropy-based JSD in bits.
fn jsd_oracle(p: &[f64], q: &[f64]) -> f64 {
    let h = |v: &[f64]| -v.iter().filter(|&&x| x > 0.0).map(|x| x * x.log2()).sum::<f64>();
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a + b) / 2.0).collect();
    h(&m) - (h(p) + h(q)) / 2.0
}

proptest! {
    #[test]
    fn jsd_is_symmetric_bounded_and_zero_on_equal(p in arb_dist(6), q in arb_dist(6)) {
        let a = jsd(&dist(&p), &dist(&q)).unwrap();
        let b = jsd(&dist(&q), &dist(&p)).unwrap();
        prop_assert!((a - b).abs() < 1e-15);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
        prop_assert!((a - jsd_oracle(&p, &q)).abs() < 1e-12);
        prop_assert!(jsd(&dist(&p), &dist(&p)).unwrap().abs() < 1e-15);
        if p.iter().zip(&q).any(|(x, y)| (x - y).abs() > 1e-6) {
            prop_assert!(a > 0.0);
        }
    }

    #[test]
    fn sqrt_jsd_is_a_metric(p in arb_dist(5), q in arb_dist(5), r in arb_dist(5)) {
        let d = |a: &[f64], b: &[f64]| jsd(&dist(a), &dist(b)).unwrap().sqrt();
        prop_assert!(d(&p, &r) <= d(&p, &q) + d(&q, &r) + 1e-12);
    }

    #[test]
    fn spo_and_gpd_are_bounded(sources in proptest::collection::vec(arb_dist(4), 2..9)) {
        let dists: Vec<_> = sources.iter().map(|p| dist(p)).collect();
        let r = stability_of("x", labels(dists.len()), &dists).unwrap();
        prop_assert!(r.spo.iter().all(|s| (0.0..=1.0 + 1e-9).contains(s)));
        prop_assert!((0.0..=1.0 + 1e-9).contains(&r.gpd));
    }

    #[test]
    fn permuting_sources_permutes_spo(
        sources in proptest::collection::vec(arb_dist(4), 3..8),
        shift in 1usize..7,
    ) {
        let n = sources.len();
        let dists: Vec<_> = sources.iter().map(|p| dist(p)).collect();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let permuted: Vec<_> = perm.iter().map(|&i| dists[i].clone()).collect();
        let a = stability_of("x", labels(n), &dists).unwrap();
        let b = stability_of("x", labels(n), &permuted).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((b.spo[j] - a.spo[i]).abs() < 1e-9);
        }
        prop_assert!((a.gpd - b.gpd).abs() < 1e-9);
    }

    #[test]
    fn duplicating_a_source_does_not_raise_its_rank(
        sources in proptest::collection::vec(arb_dist(4), 3..8),
        pick in 0usize..8,
    ) {
        let n = sources.len();
        let i = pick % n;
        let dists: Vec<_> = sources.iter().map(|p| dist(p)).collect();
        let before = stability_of("x", labels(n), &dists).unwrap();
        let mut more = dists.clone();
        more.push(dists[i].clone());
        let after = stability_of("x", labels(n + 1), &more).unwrap();
        // Rank position = number of other original sources strictly more outlying.
        let rank = |spo: &[f64]| (0..n).filter(|&j| j != i && spo[j] > spo[i] + 1e-7).count();
        let clipped = before.clipped_mass + after.clipped_mass;
        if clipped < 1e-9 {
            prop_assert!(rank(&after.spo) >= rank(&before.spo));
        }
    }

    #[test]
    fn mds_recovers_euclidean_distances(
        points in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 2..10),
    ) {
        let n = points.len();
        let d = DMatrix::from_fn(n, n, |i, j| {
            points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        });
        let emb = embed_sources(&d).unwrap();
        let x = &emb.coordinates;
        for i in 0..n {
            for j in 0..n {
                let r = (x.row(i) - x.row(j)).norm();
                prop_assert!((r - d[(i, j)]).abs() < 1e-8, "{} vs {}", r, d[(i, j)]);
            }
        }
    }
}

#[test]
fn hand_jsd_value() {
    let v = jsd(&dist(&[0.5, 0.5]), &dist(&[0.25, 0.75])).unwrap();
    assert!((v - 0.048795).abs() < 1e-6, "{v}");
    assert!((v - jsd_oracle(&[0.5, 0.5], &[0.25, 0.75])).abs() < 1e-15);
}

#[test]
fn identical_and_disjoint_extremes() {
    let same: Vec<_> = (0..5).map(|_| dist(&[0.2, 0.3, 0.5])).collect();
    let r = stability_of("x", labels(5), &same).unwrap();
    assert!(r.spo.iter().all(|s| s.abs() < 1e-9) && r.gpd.abs() < 1e-9);

    for n in 2..8 {
        let disjoint: Vec<_> = (0..n)
            .map(|i| dist(&(0..n).map(|j| (i == j) as u8 as f64).collect::<Vec<_>>()))
            .collect();
        let r = stability_of("x", labels(n), &disjoint).unwrap();
        assert!(r.spo.iter().all(|s| (s - 1.0).abs() < 1e-6), "{n}: {:?}", r.spo);
        assert!((r.gpd - 1.0).abs() < 1e-6);
    }
}

#[test]
fn mismatched_supports_are_rejected() {
    assert!(jsd(&dist(&[0.5, 0.5]), &dist(&[0.2, 0.3, 0.5])).is_err());
    assert!(pairwise_distance(&[dist(&[1.0]), dist(&[0.5, 0.5])]).is_err());
}

fn practices(n: usize, per: usize) -> Cohort {
    let mut records = Vec::new();
    for p in 0..n {
        for i in 0..per {
            let mut r = common::record(&format!("{p}-{i}"), &format!("P{p}"));
            r.sex = if i % 2 == 0 { Sex::Female } else { Sex::Male };
            r.age = 30.0 + ((i * 7 + p * 3) % 50) as f64;
            r.sbp = if i % 5 == p % 5 {
                None
            } else {
                Some(110.0 + ((i * 13 + p) % 40) as f64)
            };
            r.bmi = Some(20.0 + ((i * 3 + p * 11) % 15) as f64);
            records.push(r);
        }
    }
    Cohort::new(records)
}

#[test]
fn cohort_level_reports() {
    let cohort = practices(6, 40);
    let opts = StabilityOptions::default();
    let age = variable_stability(&cohort, Variable::Age, &opts).unwrap();
    assert_eq!(age.n_sources, 6);
    assert_eq!(age.sources, vec!["P0", "P1", "P2", "P3", "P4", "P5"]);
    let miss = missingness_stability(&cohort, Variable::Sbp).unwrap();
    assert_eq!(miss.variable, "missing_sbp");
    assert!(missingness_stability(&cohort, Variable::Age).is_err());
    let joint = multivariate_stability(&cohort, &[Variable::Age, Variable::Bmi, Variable::CholHdlRatio], 2, 3).unwrap();
    assert!(joint.variable.starts_with("joint("));
    assert!(joint.warnings.iter().any(|w| w.contains("chol_hdl_ratio")));
    assert!(multivariate_stability(&cohort, &[Variable::Sbp, Variable::Age], 1, 3).is_err());

    let mut buf = Vec::new();
    write_reports(&mut buf, &[age, miss]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("variable,source_id,spo,gpd,n_sources,clipped_mass"));
    assert_eq!(text.lines().count(), 13);
}

#[test]
fn a_source_without_observations_is_named() {
    let mut cohort = practices(3, 10).into_records();
    for r in cohort.iter_mut().filter(|r| r.practice_id == "P1") {
        r.bmi = None;
    }
    let err = variable_stability(&Cohort::new(cohort), Variable::Bmi, &StabilityOptions::default()).unwrap_err();
    assert!(err.to_string().contains("P1"), "{err}");
}
