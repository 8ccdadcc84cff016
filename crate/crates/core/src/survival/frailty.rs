//! Random-intercept (log-normal frailty) and random-slope Cox models.
//!
//! Random effects are found by maximising the penalised partial likelihood
//! `l(theta) - sum_k theta_k^2 / (2 v_k)` with Newton's method. Variance
//! components maximise the Laplace-approximate integrated likelihood
//!
//! ```text
//! l(theta_hat) - sum_k theta_k^2 / (2 v_k) - 1/2 log det(I + V H_rr)
//! ```
//!
//! over log-variances, where `H_rr` is the random-effect block of the
//! observed information.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use serde::Serialize;

use super::cox::breslow_baseline;
use super::data::SurvivalDataset;
use super::engine::{evaluate, Design, Layout};
use super::step::StepFunction;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy)]
pub struct FrailtyOptions {
    /// Lower bound of every variance search.
    pub min_variance: f64,
    /// Upper bound for intercept variances.
    pub max_variance: f64,
    /// Upper bound for slope variances.
    pub max_slope_variance: f64,
    /// Coarse grid points per log-variance axis.
    pub grid_points: usize,
    /// Max |penalised score| for the inner Newton solve.
    pub inner_tol: f64,
    /// Width, in log-variance, at which the outer search stops.
    pub outer_tol: f64,
    pub max_inner_iter: usize,
    /// Coordinate-ascent sweeps for the two-component model.
    pub max_sweeps: usize,
}

impl Default for FrailtyOptions {
    fn default() -> Self {
        FrailtyOptions {
            min_variance: 1e-8,
            max_variance: 10.0,
            max_slope_variance: 1.0,
            grid_points: 13,
            inner_tol: 1e-6,
            outer_tol: 1e-4,
            max_inner_iter: 100,
            max_sweeps: 25,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct FitDiagnostics {
    pub outer_evaluations: usize,
    pub inner_iterations: usize,
    pub sweeps: usize,
    pub converged: bool,
    pub at_lower_bound: bool,
    pub at_upper_bound: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct FrailtyFit {
    /// Variance of the practice intercept on the log-hazard scale.
    pub variance: f64,
    pub sigma_b: f64,
    pub group_ids: Vec<String>,
    pub b: Vec<f64>,
    /// Posterior-mode standard errors of `b`.
    pub se: Vec<f64>,
    /// Log partial likelihood at the fitted effects.
    pub loglik: f64,
    pub integrated_loglik: f64,
    /// Breslow baseline with offsets plus fitted intercepts.
    pub baseline: StepFunction,
    pub diagnostics: FitDiagnostics,
}

impl FrailtyFit {
    /// Frailty multipliers `exp(b)`.
    pub fn frailty(&self) -> Vec<f64> {
        self.b.iter().map(|b| b.exp()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct MixedFit {
    pub var_b: f64,
    pub var_u: f64,
    pub sigma_b: f64,
    pub sigma_u: f64,
    /// Fixed coefficient on the linear predictor.
    pub gamma: f64,
    pub gamma_se: f64,
    pub group_ids: Vec<String>,
    pub b: Vec<f64>,
    pub u: Vec<f64>,
    pub loglik: f64,
    pub integrated_loglik: f64,
    pub diagnostics: FitDiagnostics,
    /// (var_b, var_u, gamma) per practice subsample, empty for a full fit.
    pub subsample_estimates: Vec<(f64, f64, f64)>,
}

#[derive(Debug, Clone, Copy)]
pub struct SlopeOptions {
    pub subsample_frac: f64,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for SlopeOptions {
    fn default() -> Self {
        SlopeOptions {
            subsample_frac: 1.0,
            repeats: 1,
            seed: 0,
        }
    }
}

/// Problem shared by the inner and outer solvers.
struct Problem<'a> {
    layout: Layout,
    design: Design,
    offset: &'a [f64],
    event: &'a [bool],
    /// Parameters `[0, n_fixed)` are unpenalised.
    n_fixed: usize,
}

struct InnerSolution {
    theta: DVector<f64>,
    loglik: f64,
    /// Penalised information `H + diag(precision)`.
    penalised_info: DMatrix<f64>,
    eta: Vec<f64>,
    iterations: usize,
}

impl Problem<'_> {
    fn solve(&self, precision: &[f64], start: &DVector<f64>, opts: &FrailtyOptions) -> Result<InnerSolution> {
        let p = self.design.n_params();
        let objective = |ll: f64, th: &DVector<f64>| -> f64 {
            ll - 0.5 * (0..p).map(|k| precision[k] * th[k] * th[k]).sum::<f64>()
        };
        let pen_grad = |g: &DVector<f64>, th: &DVector<f64>| DVector::from_fn(p, |k, _| g[k] - precision[k] * th[k]);
        let mut theta = start.clone();
        let mut ev = evaluate(&self.layout, &self.design, self.offset, self.event, &theta, true);
        let mut obj = objective(ev.loglik, &theta);
        let mut iterations = 0;
        loop {
            let grad = pen_grad(&ev.gradient, &theta);
            let mut info = ev.information.take().expect("information requested");
            for k in 0..p {
                info[(k, k)] += precision[k];
            }
            if grad.amax() < opts.inner_tol {
                return Ok(InnerSolution {
                    theta,
                    loglik: ev.loglik,
                    penalised_info: info,
                    eta: ev.eta,
                    iterations,
                });
            }
            if iterations >= opts.max_inner_iter {
                return Err(Error::Convergence(format!(
                    "penalised Newton: {iterations} iterations, max |score| {:.3e}",
                    grad.amax()
                )));
            }
            iterations += 1;
            let chol = info
                .cholesky()
                .ok_or_else(|| Error::Fit("penalised information is not positive definite".into()))?;
            let step = chol.solve(&grad);
            let mut scale = 1.0;
            loop {
                let trial = &theta + &step * scale;
                let tev = evaluate(&self.layout, &self.design, self.offset, self.event, &trial, true);
                let tobj = objective(tev.loglik, &trial);
                if tobj.is_finite() && tobj >= obj - 1e-12 * obj.abs() {
                    theta = trial;
                    ev = tev;
                    obj = tobj;
                    break;
                }
                scale *= 0.5;
                if scale < 1e-12 {
                    // No ascent left at machine precision: accept the point.
                    let mut info = evaluate(&self.layout, &self.design, self.offset, self.event, &theta, true)
                        .information
                        .expect("information requested");
                    for k in 0..p {
                        info[(k, k)] += precision[k];
                    }
                    return Ok(InnerSolution {
                        theta,
                        loglik: ev.loglik,
                        penalised_info: info,
                        eta: ev.eta,
                        iterations,
                    });
                }
            }
        }
    }

    /// Laplace-approximate integrated log likelihood at a solved point.
    fn integrated(&self, sol: &InnerSolution, precision: &[f64]) -> Result<f64> {
        let p = self.design.n_params();
        let r = p - self.n_fixed;
        let block = sol
            .penalised_info
            .view((self.n_fixed, self.n_fixed), (r, r))
            .into_owned();
        let chol = block
            .cholesky()
            .ok_or_else(|| Error::Fit("random-effect information is not positive definite".into()))?;
        let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let log_prec: f64 = precision[self.n_fixed..].iter().map(|v| v.ln()).sum();
        let penalty: f64 = (self.n_fixed..p)
            .map(|k| precision[k] * sol.theta[k] * sol.theta[k])
            .sum();
        Ok(sol.loglik - 0.5 * penalty - 0.5 * (log_det - log_prec))
    }
}

/// Maximise a function of one variable on `[lo, hi]`: coarse grid, then
/// golden-section search between the neighbours of the best grid point.
fn maximise_1d(
    mut f: impl FnMut(f64) -> Result<f64>,
    lo: f64,
    hi: f64,
    grid_points: usize,
    tol: f64,
) -> Result<(f64, f64)> {
    let n = grid_points.max(3);
    let step = (hi - lo) / (n - 1) as f64;
    let mut best = (lo, f64::NEG_INFINITY);
    let mut best_k = 0;
    for k in 0..n {
        let x = lo + step * k as f64;
        let v = f(x)?;
        if v > best.1 {
            best = (x, v);
            best_k = k;
        }
    }
    let a0 = lo + step * best_k.saturating_sub(1) as f64;
    let b0 = lo + step * (best_k + 1).min(n - 1) as f64;
    let refined = golden(&mut f, a0, b0, tol)?;
    Ok(if refined.1 >= best.1 { refined } else { best })
}

fn golden(f: &mut impl FnMut(f64) -> Result<f64>, mut a: f64, mut b: f64, tol: f64) -> Result<(f64, f64)> {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc >= fd { (c, fc) } else { (d, fd) })
}

fn check_groups(data: &SurvivalDataset) -> Result<()> {
    if data.n_groups() < 2 {
        return Err(Error::Input("≥2 practices required".into()));
    }
    if data.n_events() == 0 {
        return Err(Error::Fit("at least one event is required".into()));
    }
    Ok(())
}

fn event_warnings(data: &SurvivalDataset) -> Vec<String> {
    let mut with_events = vec![false; data.n_groups()];
    for (i, &g) in data.group().iter().enumerate() {
        if data.event()[i] {
            with_events[g] = true;
        }
    }
    if with_events.iter().filter(|&&e| e).count() <= 1 {
        vec!["events in at most one practice: variance is degenerate and may sit at the lower bound".into()]
    } else {
        Vec::new()
    }
}

fn intercept_problem(data: &SurvivalDataset) -> Problem<'_> {
    let design = Design::from_rows(data.n_groups(), data.group().iter().map(|&g| vec![(g, 1.0)]));
    Problem {
        layout: Layout::new(data.time(), data.event()),
        design,
        offset: data.offset(),
        event: data.event(),
        n_fixed: 0,
    }
}

fn frailty_fit_from(
    data: &SurvivalDataset,
    problem: &Problem<'_>,
    sol: InnerSolution,
    variance: f64,
    integrated_loglik: f64,
    diagnostics: FitDiagnostics,
) -> Result<FrailtyFit> {
    let se = sol
        .penalised_info
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Fit("penalised information is not positive definite".into()))?
        .inverse()
        .diagonal()
        .iter()
        .map(|v| v.sqrt())
        .collect();
    let baseline = breslow_baseline(data.time(), data.event(), &sol.eta);
    let _ = problem;
    Ok(FrailtyFit {
        variance,
        sigma_b: variance.sqrt(),
        group_ids: data.group_ids().to_vec(),
        b: sol.theta.iter().copied().collect(),
        se,
        loglik: sol.loglik,
        integrated_loglik,
        baseline,
        diagnostics,
    })
}

/// Random effects at a fixed intercept variance.
pub fn fit_random_intercept_at(data: &SurvivalDataset, variance: f64, opts: &FrailtyOptions) -> Result<FrailtyFit> {
    check_groups(data)?;
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(Error::Contract(format!("variance must be positive, got {variance}")));
    }
    let problem = intercept_problem(data);
    let precision = vec![1.0 / variance; data.n_groups()];
    let sol = problem.solve(&precision, &DVector::zeros(data.n_groups()), opts)?;
    let ilik = problem.integrated(&sol, &precision)?;
    let diagnostics = FitDiagnostics {
        outer_evaluations: 1,
        inner_iterations: sol.iterations,
        converged: true,
        warnings: event_warnings(data),
        ..Default::default()
    };
    frailty_fit_from(data, &problem, sol, variance, ilik, diagnostics)
}

/// Random-intercept Cox model with the dataset offset (coefficient fixed at 1).
pub fn fit_random_intercept(data: &SurvivalDataset, opts: &FrailtyOptions) -> Result<FrailtyFit> {
    check_groups(data)?;
    let problem = intercept_problem(data);
    let g = data.n_groups();
    let mut warm = DVector::zeros(g);
    let mut diagnostics = FitDiagnostics {
        warnings: event_warnings(data),
        ..Default::default()
    };
    let lo = opts.min_variance.ln();
    let hi = opts.max_variance.ln();

    let (best_x, _) = maximise_1d(
        |x| {
            let precision = vec![(-x).exp(); g];
            let sol = problem.solve(&precision, &warm, opts)?;
            diagnostics.outer_evaluations += 1;
            diagnostics.inner_iterations += sol.iterations;
            let v = problem.integrated(&sol, &precision)?;
            warm = sol.theta;
            Ok(v)
        },
        lo,
        hi,
        opts.grid_points,
        opts.outer_tol,
    )?;
    let variance = best_x.exp();
    let precision = vec![1.0 / variance; g];
    let sol = problem.solve(&precision, &warm, opts)?;
    let ilik = problem.integrated(&sol, &precision)?;
    diagnostics.converged = true;
    diagnostics.at_lower_bound = best_x - lo < 2.0 * opts.outer_tol;
    diagnostics.at_upper_bound = hi - best_x < 2.0 * opts.outer_tol;
    frailty_fit_from(data, &problem, sol, variance, ilik, diagnostics)
}

fn slope_problem(data: &SurvivalDataset) -> Problem<'_> {
    let g = data.n_groups();
    let lp = data.offset();
    let design = Design::from_rows(
        1 + 2 * g,
        data.group()
            .iter()
            .zip(lp)
            .map(|(&k, &x)| vec![(0, x), (1 + k, 1.0), (1 + g + k, x)]),
    );
    Problem {
        layout: Layout::new(data.time(), data.event()),
        design,
        offset: &[],
        event: data.event(),
        n_fixed: 1,
    }
}

fn slope_precision(g: usize, var_b: f64, var_u: f64) -> Vec<f64> {
    let mut p = vec![0.0];
    p.extend(std::iter::repeat_n(1.0 / var_b, g));
    p.extend(std::iter::repeat_n(1.0 / var_u, g));
    p
}

struct SlopeEstimate {
    var_b: f64,
    var_u: f64,
    sol: InnerSolution,
    ilik: f64,
    diagnostics: FitDiagnostics,
}

fn fit_slope_once(data: &SurvivalDataset, opts: &FrailtyOptions) -> Result<SlopeEstimate> {
    check_groups(data)?;
    let zeros = vec![0.0; data.len()];
    let mut problem = slope_problem(data);
    problem.offset = &zeros;
    let g = data.n_groups();
    let mut diagnostics = FitDiagnostics {
        warnings: event_warnings(data),
        ..Default::default()
    };
    let mut warm = DVector::zeros(1 + 2 * g);
    warm[0] = 1.0;

    let bounds_b = (opts.min_variance.ln(), opts.max_variance.ln());
    let bounds_u = (opts.min_variance.ln(), opts.max_slope_variance.ln());
    let eval = |xb: f64, xu: f64, warm: &mut DVector<f64>, diag: &mut FitDiagnostics| -> Result<f64> {
        let precision = slope_precision(g, xb.exp(), xu.exp());
        let sol = problem.solve(&precision, warm, opts)?;
        diag.outer_evaluations += 1;
        diag.inner_iterations += sol.iterations;
        let v = problem.integrated(&sol, &precision)?;
        *warm = sol.theta;
        Ok(v)
    };

    // Coarse grid.
    let n = opts.grid_points.clamp(3, 9);
    let axis =
        |(lo, hi): (f64, f64)| -> Vec<f64> { (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect() };
    let (grid_b, grid_u) = (axis(bounds_b), axis(bounds_u));
    let mut best = (grid_b[0], grid_u[0], f64::NEG_INFINITY);
    for &xb in &grid_b {
        for &xu in &grid_u {
            let v = eval(xb, xu, &mut warm, &mut diagnostics)?;
            if v > best.2 {
                best = (xb, xu, v);
            }
        }
    }

    // Coordinate ascent, each line search bracketed around the current point.
    let mut half_b = grid_b[1] - grid_b[0];
    let mut half_u = grid_u[1] - grid_u[0];
    let (mut xb, mut xu, mut fbest) = best;
    let mut converged = false;
    for sweep in 0..opts.max_sweeps {
        diagnostics.sweeps = sweep + 1;
        let (a, b) = ((xb - half_b).max(bounds_b.0), (xb + half_b).min(bounds_b.1));
        let (nb, vb) = golden(&mut |x| eval(x, xu, &mut warm, &mut diagnostics), a, b, opts.outer_tol)?;
        let moved_b = if vb > fbest { (nb - xb).abs() } else { 0.0 };
        if vb > fbest {
            xb = nb;
            fbest = vb;
        }
        let (a, b) = ((xu - half_u).max(bounds_u.0), (xu + half_u).min(bounds_u.1));
        let (nu, vu) = golden(&mut |x| eval(xb, x, &mut warm, &mut diagnostics), a, b, opts.outer_tol)?;
        let moved_u = if vu > fbest { (nu - xu).abs() } else { 0.0 };
        if vu > fbest {
            xu = nu;
            fbest = vu;
        }
        if moved_b < 2.0 * opts.outer_tol && moved_u < 2.0 * opts.outer_tol {
            converged = true;
            break;
        }
        half_b = (4.0 * moved_b).max(0.05).min(half_b);
        half_u = (4.0 * moved_u).max(0.05).min(half_u);
    }
    if !converged {
        return Err(Error::Convergence(format!(
            "random-slope variance search: {} sweeps; best so far var_b={:.6e} var_u={:.6e} integrated loglik={:.6}",
            diagnostics.sweeps,
            xb.exp(),
            xu.exp(),
            fbest
        )));
    }
    let (var_b, var_u) = (xb.exp(), xu.exp());
    let precision = slope_precision(g, var_b, var_u);
    let sol = problem.solve(&precision, &warm, opts)?;
    let ilik = problem.integrated(&sol, &precision)?;
    diagnostics.converged = true;
    diagnostics.at_lower_bound = xb - bounds_b.0 < 2.0 * opts.outer_tol || xu - bounds_u.0 < 2.0 * opts.outer_tol;
    diagnostics.at_upper_bound = bounds_b.1 - xb < 2.0 * opts.outer_tol || bounds_u.1 - xu < 2.0 * opts.outer_tol;
    Ok(SlopeEstimate {
        var_b,
        var_u,
        sol,
        ilik,
        diagnostics,
    })
}

fn mixed_fit_from(
    data: &SurvivalDataset,
    est: SlopeEstimate,
    gamma: f64,
    subsamples: Vec<(f64, f64, f64)>,
) -> Result<MixedFit> {
    let g = data.n_groups();
    let gamma_se = est
        .sol
        .penalised_info
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Fit("penalised information is not positive definite".into()))?
        .inverse()[(0, 0)]
        .sqrt();
    let theta = &est.sol.theta;
    Ok(MixedFit {
        var_b: est.var_b,
        var_u: est.var_u,
        sigma_b: est.var_b.sqrt(),
        sigma_u: est.var_u.sqrt(),
        gamma,
        gamma_se,
        group_ids: data.group_ids().to_vec(),
        b: theta.rows(1, g).iter().copied().collect(),
        u: theta.rows(1 + g, g).iter().copied().collect(),
        loglik: est.sol.loglik,
        integrated_loglik: est.ilik,
        diagnostics: est.diagnostics,
        subsample_estimates: subsamples,
    })
}

/// Mixed-effects Cox model `gamma * lp + b_p + u_p * lp` with the dataset
/// offset as `lp`. With `subsample_frac < 1` the variance components are the
/// averages over `repeats` random practice subsamples, and the per-practice
/// effects are then solved on the full data at those variances.
pub fn fit_random_slope(data: &SurvivalDataset, slope: &SlopeOptions, opts: &FrailtyOptions) -> Result<MixedFit> {
    check_groups(data)?;
    if !(slope.subsample_frac > 0.0 && slope.subsample_frac <= 1.0) {
        return Err(Error::Contract(format!(
            "subsample_frac must be in (0,1], got {}",
            slope.subsample_frac
        )));
    }
    if slope.subsample_frac >= 1.0 {
        let est = fit_slope_once(data, opts)?;
        let gamma = est.sol.theta[0];
        return mixed_fit_from(data, est, gamma, Vec::new());
    }
    if slope.repeats == 0 {
        return Err(Error::Contract("repeats must be >= 1".into()));
    }
    let g = data.n_groups();
    let size = ((slope.subsample_frac * g as f64).round() as usize).clamp(2, g);
    let runs: Vec<Result<(f64, f64, f64)>> = crate::par::map_indexed(slope.repeats, |r| {
        let mut rng = stream(slope.seed, Stream::Subsample, r as u64);
        let mut pick = sample(&mut rng, g, size).into_vec();
        pick.sort_unstable();
        let sub = data.subset_groups(&pick)?;
        let est = fit_slope_once(&sub, opts)?;
        Ok((est.var_b, est.var_u, est.sol.theta[0]))
    });
    let estimates: Vec<(f64, f64, f64)> = runs.into_iter().collect::<Result<_>>()?;
    let k = estimates.len() as f64;
    let var_b = estimates.iter().map(|e| e.0).sum::<f64>() / k;
    let var_u = estimates.iter().map(|e| e.1).sum::<f64>() / k;
    let gamma = estimates.iter().map(|e| e.2).sum::<f64>() / k;

    let zeros = vec![0.0; data.len()];
    let mut problem = slope_problem(data);
    problem.offset = &zeros;
    let precision = slope_precision(g, var_b, var_u);
    let mut start = DVector::zeros(1 + 2 * g);
    start[0] = gamma;
    let sol = problem.solve(&precision, &start, opts)?;
    let ilik = problem.integrated(&sol, &precision)?;
    let diagnostics = FitDiagnostics {
        outer_evaluations: estimates.len(),
        inner_iterations: sol.iterations,
        converged: true,
        warnings: event_warnings(data),
        ..Default::default()
    };
    let est = SlopeEstimate {
        var_b,
        var_u,
        sol,
        ilik,
        diagnostics,
    };
    mixed_fit_from(data, est, gamma, estimates)
}
