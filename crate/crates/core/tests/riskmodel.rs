mod common;

use ehr_frailty::cohort::{Sex, Smoking, Variable};
use ehr_frailty::riskmodel::{
    default_table, linear_predictor, load_coefficients, read_coefficients, risk_from_lp, save_coefficients,
    write_coefficients, CoefficientTable, SexModel, Term, Transform,
};
use proptest::prelude::*;

fn model(terms: Vec<Term>) -> SexModel {
    SexModel {
        terms,
        baseline_survival_10y: 0.95,
    }
}

fn table(terms: Vec<Term>) -> CoefficientTable {
    CoefficientTable::new(model(terms.clone()), model(terms)).unwrap()
}

fn arb_term() -> impl Strategy<Value = Term> {
    prop_oneof![
        (-1.0f64..1.0, 0.0f64..60.0, 0usize..3).prop_map(|(c, m, t)| Term::Continuous {
            variable: [Variable::Age, Variable::Sbp, Variable::Bmi][t],
            transform: [Transform::Identity, Transform::Ln, Transform::Pow(0.5)][t],
            centering: m,
            coefficient: c,
        }),
        (-1.0f64..1.0, 1u8..5).prop_map(|(c, l)| Term::Categorical {
            variable: Variable::Smoking,
            level: l,
            coefficient: c,
        }),
        (-0.1f64..0.1, 30.0f64..60.0).prop_map(|(c, m)| Term::Interaction {
            factor: Variable::Sbp,
            level: None,
            age_transform: Transform::Identity,
            age_centering: m,
            coefficient: c,
        }),
    ]
}

/// Keeps the first occurrence of each term key, so tables stay valid.
fn dedup(terms: Vec<Term>) -> Vec<Term> {
    let mut seen = std::collections::BTreeSet::new();
    terms
        .into_iter()
        .filter(|t| {
            let key = match t {
                Term::Continuous { variable, .. } => format!("c{variable}"),
                Term::Categorical { level, .. } => format!("k{level}"),
                Term::Interaction { .. } => "i".into(),
            };
            seen.insert(key)
        })
        .collect()
}

proptest! {
    #[test]
    fn linear_predictor_is_additive_over_terms(
        terms in proptest::collection::vec(arb_term(), 1..8),
        split in 0usize..8,
        age in 25.0f64..84.0,
        sbp in 90.0f64..200.0,
        smoking in 0usize..5,
    ) {
        let terms = dedup(terms);
        let k = split.min(terms.len());
        let mut r = common::record("x", "P");
        r.age = age;
        r.sbp = Some(sbp);
        r.smoking = Some(Smoking::ALL[smoking]);
        let whole = linear_predictor(&r, &table(terms.clone())).unwrap();
        let left = linear_predictor(&r, &table(terms[..k].to_vec())).unwrap();
        let right = linear_predictor(&r, &table(terms[k..].to_vec())).unwrap();
        prop_assert!((whole - (left + right)).abs() < 1e-12);
    }

    #[test]
    fn risk_is_strictly_increasing_in_lp(lp in -5.0f64..3.0, step in 1e-3f64..1.0) {
        let t = default_table();
        for sex in Sex::ALL {
            let lo = risk_from_lp(lp, &t, sex);
            let hi = risk_from_lp(lp + step, &t, sex);
            prop_assert!(hi > lo);
            prop_assert!((0.0..1.0).contains(&lo));
        }
    }

    #[test]
    fn serialisation_round_trips_exactly(terms in proptest::collection::vec(arb_term(), 0..8)) {
        let t = table(dedup(terms));
        let mut buf = Vec::new();
        write_coefficients(&mut buf, &t).unwrap();
        let back = read_coefficients(buf.as_slice()).unwrap();
        prop_assert_eq!(back, t);
    }
}

#[test]
fn three_term_hand_computation() {
    let terms = vec![
        Term::Continuous {
            variable: Variable::Age,
            transform: Transform::Identity,
            centering: 50.0,
            coefficient: 0.07,
        },
        Term::Continuous {
            variable: Variable::Bmi,
            transform: Transform::Ln,
            centering: 3.0,
            coefficient: 0.5,
        },
        Term::Categorical {
            variable: Variable::Smoking,
            level: 3,
            coefficient: 0.6,
        },
    ];
    let mut r = common::record("x", "P");
    r.age = 60.0;
    r.bmi = Some(30.0);
    r.smoking = Some(Smoking::ALL[3]);
    let expected = 0.07 * 10.0 + 0.5 * (30f64.ln() - 3.0) + 0.6;
    let lp = linear_predictor(&r, &table(terms)).unwrap();
    assert!((lp - expected).abs() < 1e-14, "{lp} vs {expected}");
    assert!(
        (risk_from_lp(0.0, &default_table(), Sex::Female) - (1.0 - default_table().female.baseline_survival_10y)).abs()
            < 1e-15
    );
}

#[test]
fn default_table_survives_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("coef.csv");
    save_coefficients(&path, &default_table()).unwrap();
    assert_eq!(load_coefficients(&path).unwrap(), default_table());
}

#[test]
fn schema_errors_are_named() {
    let bad = "sex,kind,variable,transform,centering,level,coefficient\nfemale,continuous,age,cube,0,,1\n";
    let err = read_coefficients(bad.as_bytes()).unwrap_err();
    assert!(err.to_string().contains("cube"), "{err}");
    let no_baseline = "sex,kind,variable,transform,centering,level,coefficient\nfemale,continuous,age,identity,0,,1\n";
    assert!(read_coefficients(no_baseline.as_bytes()).is_err());
    assert!(CoefficientTable::new(
        SexModel {
            terms: vec![],
            baseline_survival_10y: 1.0
        },
        model(vec![])
    )
    .is_err());
}

#[test]
fn missing_inputs_are_rejected() {
    let mut r = common::record("x", "P");
    r.bmi = None;
    assert!(linear_predictor(&r, &default_table()).is_err());
}
