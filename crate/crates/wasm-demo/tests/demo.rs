use ehr_frailty::survival::DrawSpec;
use ehr_frailty_wasm::{effect_histogram, embed_counts, embed_counts_js, risk_curve, risk_curve_js};

#[test]
fn curve_passes_through_base_at_one() {
    let pts = risk_curve(0.1, 0.5, 1.5, 11).unwrap();
    assert_eq!(pts.len(), 11);
    let mid = &pts[5];
    assert!((mid.frailty - 1.0).abs() < 1e-12);
    assert!((mid.risk - 0.1).abs() < 1e-12);
    assert!(pts.windows(2).all(|w| w[1].risk > w[0].risk));
}

#[test]
fn histogram_counts_every_draw() {
    let spec = DrawSpec {
        sigma_b: 0.2,
        sigma_u: 0.0,
        base_risk: 0.1,
        lp_scale: 1.0,
        n: 5000,
        seed: 3,
    };
    let h = effect_histogram(&spec, 25).unwrap();
    assert_eq!(h.counts.iter().sum::<usize>(), 5000);
    assert_eq!(h.edges.len(), 26);
    assert!(h.p2_5 < 0.1 && h.p97_5 > 0.1);
}

#[test]
fn identical_sources_have_zero_spo() {
    let e = embed_counts(&[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0], vec![10.0, 20.0, 30.0]]).unwrap();
    assert!(e.spo.iter().all(|s| s.abs() < 1e-9));
    assert!(e.gpd.abs() < 1e-9);
}

#[test]
fn errors_come_back_as_json() {
    assert!(risk_curve_js(0.1, 2.0, 1.0, 5).contains("\"error\""));
    assert!(embed_counts_js("not json").contains("\"error\""));
    assert!(embed_counts_js("[[0, 0], [1, 1]]").contains("\"error\""));
}
