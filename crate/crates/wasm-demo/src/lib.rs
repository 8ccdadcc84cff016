//! Browser bindings for three interactive views: the frailty-adjusted risk
//! curve, the distribution of risk under practice random effects, and the
//! stability embedding of a few hand-edited source distributions.
//!
//! Each export returns a JSON string; errors come back as `{"error": "..."}`.

// `!(x > 0.0)` is used on purpose so NaN fails range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use ehr_frailty::stability::{compute_spo_gpd, embed_sources, pairwise_distance, DiscreteDistribution, Support};
use ehr_frailty::survival::{adjust_risk, random_effect_risks, DrawSpec};
use ehr_frailty::Result;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize, PartialEq)]
pub struct CurvePoint {
    pub frailty: f64,
    pub risk: f64,
}

/// Adjusted risk over an evenly spaced grid of frailty multipliers.
pub fn risk_curve(base: f64, z_min: f64, z_max: f64, steps: usize) -> Result<Vec<CurvePoint>> {
    if steps < 2 || !(z_min > 0.0 && z_max > z_min) {
        return Err(ehr_frailty::Error::Input(
            "need 0 < z_min < z_max and steps >= 2".into(),
        ));
    }
    (0..steps)
        .map(|i| {
            let frailty = z_min + (z_max - z_min) * i as f64 / (steps - 1) as f64;
            Ok(CurvePoint {
                frailty,
                risk: adjust_risk(base, frailty)?,
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub p2_5: f64,
    pub p97_5: f64,
    pub mean: f64,
}

pub fn effect_histogram(spec: &DrawSpec, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(ehr_frailty::Error::Input("bins must be >= 1".into()));
    }
    let mut risks = random_effect_risks(spec)?;
    risks.sort_by(f64::total_cmp);
    let n = risks.len();
    let q = |p: f64| risks[((p * (n - 1) as f64).round() as usize).min(n - 1)];
    let (lo, hi) = (risks[0], risks[n - 1]);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &r in &risks {
        let k = (((r - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    Ok(Histogram {
        edges: (0..=bins).map(|k| lo + width * k as f64).collect(),
        counts,
        p2_5: q(0.025),
        p97_5: q(0.975),
        mean: risks.iter().sum::<f64>() / n as f64,
    })
}

#[derive(Debug, Serialize)]
pub struct Embedding {
    /// First two coordinates of each source.
    pub points: Vec<[f64; 2]>,
    pub spo: Vec<f64>,
    pub gpd: f64,
}

/// SPO, GPD and a 2-D view of the embedding for sources given as category
/// counts over a shared set of categories.
pub fn embed_counts(counts: &[Vec<f64>]) -> Result<Embedding> {
    let k = counts.first().map_or(0, Vec::len);
    if k == 0 || counts.iter().any(|c| c.len() != k) {
        return Err(ehr_frailty::Error::Input(
            "every source needs the same number of categories".into(),
        ));
    }
    let support = Support::categories((0..k).map(|i| i as f64).collect(), false);
    let dists = counts
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let total: f64 = c.iter().sum();
            if !(total > 0.0) || c.iter().any(|&v| v < 0.0) {
                return Err(ehr_frailty::Error::Input(format!(
                    "source {} needs non-negative counts",
                    i + 1
                )));
            }
            Ok(DiscreteDistribution {
                support: support.clone(),
                probabilities: c.iter().map(|v| v / total).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let emb = embed_sources(&pairwise_distance(&dists)?)?;
    let report = compute_spo_gpd(&emb)?;
    let x = &emb.coordinates;
    let coord = |i: usize, j: usize| if j < x.ncols() { x[(i, j)] } else { 0.0 };
    Ok(Embedding {
        points: (0..x.nrows()).map(|i| [coord(i, 0), coord(i, 1)]).collect(),
        spo: report.spo,
        gpd: report.gpd,
    })
}

fn to_json<T: Serialize>(r: Result<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e.to_string()),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

#[wasm_bindgen(js_name = riskCurve)]
pub fn risk_curve_js(base: f64, z_min: f64, z_max: f64, steps: usize) -> String {
    to_json(risk_curve(base, z_min, z_max, steps))
}

#[wasm_bindgen(js_name = effectHistogram)]
pub fn effect_histogram_js(
    sigma_b: f64,
    sigma_u: f64,
    base: f64,
    lp_scale: f64,
    n: usize,
    seed: u32,
    bins: usize,
) -> String {
    let spec = DrawSpec {
        sigma_b,
        sigma_u,
        base_risk: base,
        lp_scale,
        n,
        seed: seed as u64,
    };
    to_json(effect_histogram(&spec, bins))
}

/// `counts_json` is an array of arrays, one per source.
#[wasm_bindgen(js_name = embedCounts)]
pub fn embed_counts_js(counts_json: &str) -> String {
    match serde_json::from_str::<Vec<Vec<f64>>>(counts_json) {
        Ok(c) => to_json(embed_counts(&c)),
        Err(e) => error_json(&e.to_string()),
    }
}
