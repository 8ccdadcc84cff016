use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::risk::adjust_risk;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

/// Percentiles reported by [`simulate_random_effect_draws`], in percent.
pub const PERCENTILES: [f64; 7] = [0.5, 2.5, 25.0, 50.0, 75.0, 97.5, 99.5];

const BLOCK: usize = 1 << 16;

#[derive(Debug, Clone, Serialize)]
pub struct DrawSummary {
    pub n: usize,
    pub mean: f64,
    /// `(percentile, adjusted risk)` pairs.
    pub percentiles: Vec<(f64, f64)>,
}

impl DrawSummary {
    pub fn percentile(&self, p: f64) -> Option<f64> {
        self.percentiles.iter().find(|(q, _)| *q == p).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DrawSpec {
    pub sigma_b: f64,
    pub sigma_u: f64,
    pub base_risk: f64,
    pub lp_scale: f64,
    pub n: usize,
    pub seed: u64,
}

/// Adjusted risks `1 - (1 - base)^exp(b + u * lp_scale)` with `b ~ N(0,
/// sigma_b^2)` and `u ~ N(0, sigma_u^2)`. Draws come in fixed-size blocks, each
/// from its own stream, so the result does not depend on thread count.
pub fn random_effect_risks(spec: &DrawSpec) -> Result<Vec<f64>> {
    if spec.n == 0 {
        return Err(Error::Contract("need at least one draw".into()));
    }
    if !(spec.sigma_b >= 0.0 && spec.sigma_u >= 0.0) {
        return Err(Error::Contract("standard deviations must be non-negative".into()));
    }
    adjust_risk(spec.base_risk, 1.0)?;
    let blocks = spec.n.div_ceil(BLOCK);
    let log_surv = (-spec.base_risk).ln_1p();
    let parts: Vec<Vec<f64>> = crate::par::map_indexed(blocks, |k| {
        let mut rng = stream(spec.seed, Stream::Draws, k as u64);
        let len = BLOCK.min(spec.n - k * BLOCK);
        (0..len)
            .map(|_| {
                let zb: f64 = StandardNormal.sample(&mut rng);
                let zu: f64 = StandardNormal.sample(&mut rng);
                let eff = spec.sigma_b * zb + spec.sigma_u * zu * spec.lp_scale;
                -(log_surv * eff.exp()).exp_m1()
            })
            .collect()
    });
    Ok(parts.concat())
}

pub fn simulate_random_effect_draws(spec: &DrawSpec) -> Result<DrawSummary> {
    let mut risks = random_effect_risks(spec)?;
    let mean = crate::stats::mean(&risks);
    crate::stats::sort_floats(&mut risks);
    let percentiles = PERCENTILES
        .iter()
        .map(|&p| (p, crate::stats::quantile_sorted(&risks, p / 100.0)))
        .collect();
    Ok(DrawSummary {
        n: spec.n,
        mean,
        percentiles,
    })
}
