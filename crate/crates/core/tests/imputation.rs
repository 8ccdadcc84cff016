mod common;

use ehr_frailty::cohort::{Cohort, Variable};
use ehr_frailty::imputation::{impute, nelson_aalen, pool, ImputationConfig};
use ehr_frailty::synthgen::{generate, inject_missingness, Mechanism, MissingRates, RateSpec};
use proptest::prelude::*;

fn incomplete(seed: u64) -> Cohort {
    let (cohort, _) = generate(&common::config(seed, 8, 60.0, 0.2, 0.0)).unwrap();
    let rates: MissingRates = [
        (Variable::Sbp, RateSpec::Uniform(0.2)),
        (Variable::Bmi, RateSpec::Uniform(0.3)),
        (Variable::Smoking, RateSpec::Uniform(0.1)),
        (Variable::Ethnicity, RateSpec::Uniform(0.25)),
    ]
    .into_iter()
    .collect();
    inject_missingness(&cohort, &rates, Mechanism::Mcar, seed + 1).unwrap()
}

fn config(m: usize, seed: u64) -> ImputationConfig {
    ImputationConfig { m, seed, ridge: 1.0 }
}

#[test]
fn observed_values_are_kept_and_gaps_filled() {
    let cohort = incomplete(1);
    let done = impute(&cohort, &config(3, 9)).unwrap();
    assert_eq!(done.cohorts.len(), 3);
    for completed in &done.cohorts {
        assert_eq!(completed.len(), cohort.len());
        for (a, b) in cohort.records().iter().zip(completed.records()) {
            assert_eq!(a.patient_id, b.patient_id);
            for v in Variable::all() {
                match a.value(v) {
                    Some(x) => assert_eq!(Some(x), b.value(v), "{}", v.name()),
                    None => assert!(b.value(v).is_some(), "{} left missing", v.name()),
                }
            }
        }
    }
    assert!(done.order.contains(&Variable::Bmi));
    assert!(!done.order.contains(&Variable::CholHdlRatio));
}

#[test]
fn passes_are_reproducible_and_distinct() {
    let cohort = incomplete(2);
    let a = impute(&cohort, &config(2, 5)).unwrap();
    let b = impute(&cohort, &config(2, 5)).unwrap();
    assert_eq!(a.cohorts, b.cohorts);
    assert_ne!(a.cohorts[0], a.cohorts[1]);
    let c = impute(&cohort, &config(2, 6)).unwrap();
    assert_ne!(a.cohorts[0], c.cohorts[0]);
    // Pass k does not depend on how many passes are requested.
    let longer = impute(&cohort, &config(3, 5)).unwrap();
    assert_eq!(longer.cohorts[..2], a.cohorts[..]);
}

#[test]
fn imputed_values_stay_in_range() {
    let done = impute(&incomplete(3), &config(2, 1)).unwrap();
    for r in done.cohorts.iter().flat_map(|c| c.records()) {
        assert!(r.bmi.unwrap().is_finite());
        assert!(r.sbp.unwrap() > 0.0);
    }
}

#[test]
fn complete_cohorts_pass_through() {
    let (cohort, _) = generate(&common::config(4, 5, 30.0, 0.0, 0.0)).unwrap();
    let done = impute(&cohort, &config(2, 1)).unwrap();
    assert!(done.order.is_empty());
    assert!(done.cohorts.iter().all(|c| *c == cohort));
    assert!(impute(&cohort, &config(0, 1)).is_err());
}

#[test]
fn save_writes_one_file_per_pass_and_a_manifest() {
    let done = impute(&incomplete(5), &config(2, 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = done.save(dir.path()).unwrap();
    assert_eq!(paths.len(), 3);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("imputations.json")).unwrap()).unwrap();
    assert_eq!(manifest["m"], 2);
    assert_eq!(manifest["files"][0], "imputed_01.csv");
}

#[test]
fn pool_is_the_element_wise_mean() {
    let p = pool(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap();
    assert_eq!(p, vec![2.0, 4.0]);
    assert!(pool(&[]).is_err());
    assert!(pool(&[vec![1.0], vec![1.0, 2.0]]).is_err());
}

#[test]
fn nelson_aalen_hand_case() {
    // Times 1,2,2,3 with events at 1, one of the 2s, and 3.
    let h = nelson_aalen(&[1.0, 2.0, 2.0, 3.0], &[true, true, false, true]).unwrap();
    assert_eq!(h.eval(0.5), 0.0);
    assert!((h.eval(1.0) - 0.25).abs() < 1e-15);
    assert!((h.eval(2.5) - (0.25 + 1.0 / 3.0)).abs() < 1e-15);
    assert!((h.eval(3.0) - (0.25 + 1.0 / 3.0 + 1.0)).abs() < 1e-15);
    assert!(nelson_aalen(&[0.0], &[true]).is_err());
}

proptest! {
    #[test]
    fn nelson_aalen_starts_at_zero_and_never_decreases(
        obs in proptest::collection::vec((0.01f64..10.0, any::<bool>()), 1..60),
    ) {
        let (t, e): (Vec<f64>, Vec<bool>) = obs.into_iter().unzip();
        let h = nelson_aalen(&t, &e).unwrap();
        prop_assert_eq!(h.eval(0.0), 0.0);
        let mut last = 0.0;
        for k in 0..200 {
            let v = h.eval(k as f64 * 0.06);
            prop_assert!(v >= last);
            last = v;
        }
        let oracle: f64 = {
            let mut times: Vec<f64> = t.iter().zip(&e).filter(|(_, &d)| d).map(|(x, _)| *x).collect();
            times.sort_by(f64::total_cmp);
            times.dedup();
            times
                .iter()
                .map(|&s| {
                    let d = t.iter().zip(&e).filter(|(x, &ev)| ev && **x == s).count() as f64;
                    let n = t.iter().filter(|x| **x >= s).count() as f64;
                    d / n
                })
                .sum()
        };
        prop_assert!((h.eval(11.0) - oracle).abs() < 1e-12);
    }
}
