use nalgebra::{DMatrix, DVector};

use super::data::SurvivalDataset;
use super::engine::{evaluate, Design, Layout};
use super::step::StepFunction;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct CoxOptions {
    pub max_iter: usize,
    /// Relative change in log partial likelihood.
    pub loglik_tol: f64,
    /// Max-norm of the score.
    pub gradient_tol: f64,
    /// |beta * sd(x)| beyond this is reported as monotone likelihood.
    pub separation_bound: f64,
}

impl Default for CoxOptions {
    fn default() -> Self {
        CoxOptions {
            max_iter: 60,
            loglik_tol: 1e-9,
            gradient_tol: 1e-6,
            separation_bound: 20.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoxFit {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub loglik: f64,
    pub gradient_max: f64,
    pub iterations: usize,
    /// Breslow cumulative baseline hazard at the fitted coefficients.
    pub baseline: StepFunction,
}

fn design_of(data: &SurvivalDataset) -> Result<(Design, DMatrix<f64>, Vec<String>)> {
    let (x, names) = data
        .covariates()
        .ok_or_else(|| Error::Contract("fit_cox needs at least one covariate".into()))?;
    Ok((Design::dense(x), x.clone(), names.to_vec()))
}

/// Breslow log partial likelihood at `beta` (offset included).
pub fn log_partial_likelihood(data: &SurvivalDataset, beta: &[f64]) -> Result<f64> {
    let (design, _, _) = design_of(data)?;
    let layout = Layout::new(data.time(), data.event());
    let theta = DVector::from_column_slice(beta);
    Ok(evaluate(&layout, &design, data.offset(), data.event(), &theta, false).loglik)
}

/// Analytic score vector at `beta`.
pub fn score(data: &SurvivalDataset, beta: &[f64]) -> Result<Vec<f64>> {
    let (design, _, _) = design_of(data)?;
    let layout = Layout::new(data.time(), data.event());
    let theta = DVector::from_column_slice(beta);
    Ok(evaluate(&layout, &design, data.offset(), data.event(), &theta, false)
        .gradient
        .iter()
        .copied()
        .collect())
}

/// Names the first covariate that is constant or a linear combination of
/// earlier ones (after centering; a Cox model has no intercept).
fn find_collinear(x: &DMatrix<f64>) -> Option<usize> {
    let n = x.nrows();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for c in 0..x.ncols() {
        let col = x.column(c);
        let mean = col.mean();
        let mut v = DVector::from_iterator(n, col.iter().map(|&e| e - mean));
        let scale = v.norm().max(col.norm());
        for q in &basis {
            let proj = q.dot(&v);
            v.axpy(-proj, q, 1.0);
        }
        let norm = v.norm();
        if norm <= 1e-10 * scale.max(f64::MIN_POSITIVE) || scale == 0.0 {
            return Some(c);
        }
        basis.push(v / norm);
    }
    None
}

pub fn fit_cox(data: &SurvivalDataset, opts: &CoxOptions) -> Result<CoxFit> {
    let (design, x, names) = design_of(data)?;
    if data.n_events() == 0 {
        return Err(Error::Fit("at least one event is required".into()));
    }
    if let Some(c) = find_collinear(&x) {
        return Err(Error::Fit(format!(
            "singular information matrix: covariate '{}' is collinear",
            names[c]
        )));
    }
    let sds: Vec<f64> = (0..x.ncols())
        .map(|c| crate::stats::sd(x.column(c).as_slice()))
        .collect();
    let layout = Layout::new(data.time(), data.event());
    let p = names.len();
    let mut beta = DVector::zeros(p);
    let mut cur = evaluate(&layout, &design, data.offset(), data.event(), &beta, true);
    let mut iterations = 0;
    let separated = |b: &DVector<f64>| (0..p).any(|k| (b[k] * sds[k]).abs() > opts.separation_bound);

    loop {
        if cur.gradient.amax() < opts.gradient_tol {
            break;
        }
        if iterations >= opts.max_iter {
            if separated(&beta) {
                return Err(Error::Fit("monotone likelihood".into()));
            }
            return Err(Error::Convergence(format!(
                "Cox fit: {iterations} iterations, max |score| {:.3e}",
                cur.gradient.amax()
            )));
        }
        iterations += 1;
        let info = cur.information.take().expect("information requested");
        let chol = match info.cholesky() {
            Some(c) => c,
            None if separated(&beta) || iterations > 1 => return Err(Error::Fit("monotone likelihood".into())),
            None => return Err(Error::Fit("singular information matrix".into())),
        };
        let step = chol.solve(&cur.gradient);
        let mut scale = 1.0;
        let next = loop {
            let trial = &beta + &step * scale;
            let ev = evaluate(&layout, &design, data.offset(), data.event(), &trial, true);
            if ev.loglik.is_finite() && ev.loglik >= cur.loglik - 1e-12 * cur.loglik.abs() {
                break Some((trial, ev));
            }
            scale *= 0.5;
            if scale < 1e-10 {
                break None;
            }
        };
        let Some((trial, ev)) = next else {
            return Err(Error::Convergence("Cox fit: step halving failed".into()));
        };
        let rel = (ev.loglik - cur.loglik).abs() / cur.loglik.abs().max(1e-300);
        beta = trial;
        cur = ev;
        if separated(&beta) {
            return Err(Error::Fit("monotone likelihood".into()));
        }
        if rel < opts.loglik_tol {
            break;
        }
    }

    let info = match cur.information.take() {
        Some(i) => i,
        None => evaluate(&layout, &design, data.offset(), data.event(), &beta, true)
            .information
            .expect("information requested"),
    };
    let se: Vec<f64> = match info.clone().cholesky() {
        Some(c) => c.inverse().diagonal().iter().map(|v| v.sqrt()).collect(),
        None => return Err(Error::Fit("monotone likelihood".into())),
    };
    // A log likelihood that flattens while a coefficient runs off converges
    // in value; the vanishing information gives it away.
    if (0..p).any(|k| (beta[k] * sds[k]).abs() > 5.0 && se[k] * sds[k] > 100.0) {
        return Err(Error::Fit("monotone likelihood".into()));
    }
    let baseline = breslow_baseline(data.time(), data.event(), &cur.eta);
    Ok(CoxFit {
        names,
        beta: beta.iter().copied().collect(),
        se,
        loglik: cur.loglik,
        gradient_max: cur.gradient.amax(),
        iterations,
        baseline,
    })
}

/// Breslow cumulative baseline hazard for linear predictors `eta` (offsets and
/// any random effects already added):
/// `H0(t) = sum_{t_j <= t} d_j / sum_{i at risk at t_j} exp(eta_i)`.
pub fn breslow_baseline(time: &[f64], event: &[bool], eta: &[f64]) -> StepFunction {
    let layout = Layout::new(time, event);
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shift = if shift.is_finite() { shift } else { 0.0 };
    let a: Vec<f64> = eta.iter().map(|e| (e - shift).exp()).collect();
    let sums = layout.risk_sums(&a);
    let scale = (-shift).exp();
    let mut acc = 0.0;
    let values = layout
        .deaths()
        .iter()
        .zip(&sums)
        .map(|(d, s)| {
            acc += d * scale / s;
            acc
        })
        .collect();
    StepFunction::new(layout.event_times().to_vec(), values)
}
