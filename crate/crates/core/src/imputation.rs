//! Monotone sequential-regression multiple imputation.
//!
//! Imputable variables are filled in order of increasing missingness. Each
//! one is drawn from a conditional model on the variables already complete
//! plus the auxiliaries age, sex, Nelson-Aalen cumulative hazard at exit and
//! the event flag:
//!
//! * continuous targets: Bayesian linear regression, one posterior draw of
//!   `(beta, sigma^2)` per pass, imputations clamped to the observed range;
//! * categorical targets: ridge-penalised multinomial logit, one draw from
//!   the Gaussian approximation to the posterior per pass.
//!
//! Condition flags are not used as predictors; they are always observed and
//! rarely informative about the imputable risk factors.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::Serialize;

use crate::cohort::{save_cohort, Cohort, PatientRecord, Sex, Variable, VariableKind};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::survival::{breslow_baseline, StepFunction};

/// Cumulative hazard `sum_{t_j <= t} d_j / n_j` over distinct event times.
pub fn nelson_aalen(times: &[f64], events: &[bool]) -> Result<StepFunction> {
    if times.is_empty() {
        return Err(Error::Contract("no observations".into()));
    }
    if times.len() != events.len() {
        return Err(Error::Contract("times and events differ in length".into()));
    }
    if let Some(t) = times.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(Error::Contract(format!("times must be > 0, got {t}")));
    }
    // With every linear predictor at zero the Breslow sum is d_j / n_j.
    Ok(breslow_baseline(times, events, &vec![0.0; times.len()]))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ImputationConfig {
    pub m: usize,
    pub seed: u64,
    /// Ridge penalty on the non-intercept coefficients of multinomial models
    /// (predictors are standardised).
    pub ridge: f64,
}

impl Default for ImputationConfig {
    fn default() -> Self {
        ImputationConfig {
            m: 10,
            seed: 0,
            ridge: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompletedCohorts {
    pub cohorts: Vec<Cohort>,
    pub config: ImputationConfig,
    /// Imputation order; variables with nothing missing are omitted.
    pub order: Vec<Variable>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    m: usize,
    seed: u64,
    ridge: f64,
    order: Vec<&'static str>,
    files: &'a [String],
}

impl CompletedCohorts {
    /// Writes `imputed_01.csv` .. and `imputations.json` into `dir`; returns
    /// the paths written.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let width = self.cohorts.len().to_string().len().max(2);
        let mut names = Vec::new();
        let mut paths = Vec::new();
        for (k, c) in self.cohorts.iter().enumerate() {
            let name = format!("imputed_{:0width$}.csv", k + 1);
            let path = dir.join(&name);
            save_cohort(&path, c)?;
            names.push(name);
            paths.push(path);
        }
        let manifest = Manifest {
            m: self.config.m,
            seed: self.config.seed,
            ridge: self.config.ridge,
            order: self.order.iter().map(|v| v.name()).collect(),
            files: &names,
        };
        let path = dir.join("imputations.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        paths.push(path);
        Ok(paths)
    }
}

/// Element-wise mean of per-dataset estimates.
pub fn pool(estimates: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = estimates
        .first()
        .ok_or_else(|| Error::Contract("nothing to pool".into()))?;
    if estimates.iter().any(|e| e.len() != first.len()) {
        return Err(Error::Contract("estimates differ in length".into()));
    }
    let m = estimates.len() as f64;
    Ok((0..first.len())
        .map(|k| estimates.iter().map(|e| e[k]).sum::<f64>() / m)
        .collect())
}

/// Columns of the predictor matrix, before standardisation.
fn predictor_columns(records: &[PatientRecord], aux: &[f64], complete: &[Variable]) -> Vec<Vec<f64>> {
    let mut cols = vec![
        records.iter().map(|r| r.age).collect::<Vec<_>>(),
        records.iter().map(|r| (r.sex == Sex::Male) as u8 as f64).collect(),
        aux.to_vec(),
        records.iter().map(|r| r.event as u8 as f64).collect(),
    ];
    for &v in complete {
        let values: Vec<f64> = records
            .iter()
            .map(|r| r.value(v).expect("completed variable"))
            .collect();
        match v.kind() {
            VariableKind::Categorical(levels) => {
                // Dummy coding against the first level.
                for &l in &levels[1..] {
                    cols.push(values.iter().map(|&x| (x == l as f64) as u8 as f64).collect());
                }
            }
            _ => cols.push(values),
        }
    }
    cols
}

/// Standardised design with an intercept; constant columns are dropped.
fn design(cols: &[Vec<f64>], n: usize) -> DMatrix<f64> {
    let mut kept: Vec<Vec<f64>> = Vec::new();
    for c in cols {
        let (mean, sd) = (crate::stats::mean(c), crate::stats::sd(c));
        if sd > 1e-12 * mean.abs().max(1.0) {
            kept.push(c.iter().map(|x| (x - mean) / sd).collect());
        }
    }
    DMatrix::from_fn(n, kept.len() + 1, |i, j| if j == 0 { 1.0 } else { kept[j - 1][i] })
}

fn rows_of(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), x.ncols(), |r, c| x[(idx[r], c)])
}

fn mvn_draw(rng: &mut ChaCha8Rng, mean: &DVector<f64>, chol_cov_l: &DMatrix<f64>) -> DVector<f64> {
    let z = DVector::from_fn(mean.len(), |_, _| StandardNormal.sample(rng));
    mean + chol_cov_l * z
}

fn singular(var: Variable) -> Error {
    Error::Estimation(format!("singular design imputing '{var}'"))
}

fn impute_continuous(
    rng: &mut ChaCha8Rng,
    var: Variable,
    x: &DMatrix<f64>,
    y: &[Option<f64>],
) -> Result<Vec<(usize, f64)>> {
    let obs: Vec<usize> = (0..y.len()).filter(|&i| y[i].is_some()).collect();
    let mis: Vec<usize> = (0..y.len()).filter(|&i| y[i].is_none()).collect();
    let p = x.ncols();
    if obs.len() <= p {
        return Err(Error::Estimation(format!("too few observed values to impute '{var}'")));
    }
    let xo = rows_of(x, &obs);
    let yo = DVector::from_iterator(obs.len(), obs.iter().map(|&i| y[i].unwrap()));
    let chol = xo.tr_mul(&xo).cholesky().ok_or_else(|| singular(var))?;
    let beta = chol.solve(&xo.tr_mul(&yo));
    let resid = &yo - &xo * &beta;
    let df = (obs.len() - p) as f64;
    let chi: f64 = ChiSquared::new(df).expect("df > 0").sample(rng);
    let sigma2 = resid.norm_squared() / chi;
    // Cov(beta) = sigma2 (X'X)^-1; its Cholesky factor is sqrt(sigma2) L^-T.
    let l_inv_t = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| singular(var))?
        .transpose();
    let beta_star = mvn_draw(rng, &beta, &(l_inv_t * sigma2.sqrt()));
    let (lo, hi) = obs
        .iter()
        .map(|&i| y[i].unwrap())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let sigma = sigma2.sqrt();
    Ok(mis
        .into_iter()
        .map(|i| {
            let z: f64 = StandardNormal.sample(rng);
            let v = x.row(i).dot(&beta_star.transpose()) + sigma * z;
            (i, v.clamp(lo, hi))
        })
        .collect())
}

/// Class probabilities, one row per row of `x`. Coefficients are laid out
/// class-major; the reference class 0 has zero coefficients.
fn class_probs(x: &DMatrix<f64>, beta: &DVector<f64>, k: usize) -> DMatrix<f64> {
    let p = x.ncols();
    let b = DMatrix::from_fn(p, k, |j, c| if c == 0 { 0.0 } else { beta[(c - 1) * p + j] });
    let mut pr = x * b;
    for mut row in pr.row_iter_mut() {
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let s = row.sum();
        row /= s;
    }
    pr
}

fn impute_categorical(
    rng: &mut ChaCha8Rng,
    var: Variable,
    x: &DMatrix<f64>,
    y: &[Option<f64>],
    ridge: f64,
) -> Result<Vec<(usize, f64)>> {
    let obs: Vec<usize> = (0..y.len()).filter(|&i| y[i].is_some()).collect();
    let mis: Vec<usize> = (0..y.len()).filter(|&i| y[i].is_none()).collect();
    let mut levels: Vec<f64> = obs.iter().map(|&i| y[i].unwrap()).collect();
    crate::stats::sort_floats(&mut levels);
    levels.dedup();
    if levels.len() == 1 {
        return Ok(mis.into_iter().map(|i| (i, levels[0])).collect());
    }
    let k = levels.len();
    let xo = rows_of(x, &obs);
    let n = obs.len();
    let p = x.ncols();
    let q = (k - 1) * p;
    let onehot = DMatrix::from_fn(n, k, |r, c| (y[obs[r]] == Some(levels[c])) as u8 as f64);
    let penalty = DVector::from_fn(q, |j, _| if j % p == 0 { 0.0 } else { ridge });

    let objective = |pr: &DMatrix<f64>, beta: &DVector<f64>| -> f64 {
        let ll: f64 = pr
            .component_mul(&onehot)
            .column_sum()
            .iter()
            .map(|v| v.max(f64::MIN_POSITIVE).ln())
            .sum();
        ll - 0.5 * beta.iter().zip(penalty.iter()).map(|(b, l)| l * b * b).sum::<f64>()
    };

    let mut beta = DVector::zeros(q);
    let mut pr = class_probs(&xo, &beta, k);
    let mut obj = objective(&pr, &beta);
    let mut info = DMatrix::zeros(q, q);
    for _ in 0..100 {
        let resid = &onehot - &pr;
        let score = xo.tr_mul(&resid);
        let grad = DVector::from_fn(q, |j, _| score[(j % p, j / p + 1)] - penalty[j] * beta[j]);
        info = DMatrix::from_diagonal(&penalty);
        for a in 1..k {
            for b in a..k {
                let w: Vec<f64> = (0..n)
                    .map(|r| {
                        if a == b {
                            pr[(r, a)] * (1.0 - pr[(r, a)])
                        } else {
                            -pr[(r, a)] * pr[(r, b)]
                        }
                    })
                    .collect();
                let xw = DMatrix::from_fn(n, p, |r, j| w[r] * xo[(r, j)]);
                let block = xo.tr_mul(&xw);
                let (ra, rb) = ((a - 1) * p, (b - 1) * p);
                let mut view = info.view_mut((ra, rb), (p, p));
                view += &block;
                if a != b {
                    let mut view = info.view_mut((rb, ra), (p, p));
                    view += block.transpose();
                }
            }
        }
        let chol = info.clone().cholesky().ok_or_else(|| singular(var))?;
        let step = chol.solve(&grad);
        let mut scale = 1.0;
        loop {
            let trial = &beta + &step * scale;
            let tp = class_probs(&xo, &trial, k);
            let t = objective(&tp, &trial);
            if t >= obj - 1e-12 * obj.abs() {
                beta = trial;
                pr = tp;
                obj = t;
                break;
            }
            scale *= 0.5;
            if scale < 1e-10 {
                break;
            }
        }
        if step.amax() * scale < 1e-8 {
            break;
        }
    }
    let chol = info.cholesky().ok_or_else(|| singular(var))?;
    let l_inv_t = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(q, q))
        .ok_or_else(|| singular(var))?
        .transpose();
    let beta_star = mvn_draw(rng, &beta, &l_inv_t);
    let xm = rows_of(x, &mis);
    let pm = class_probs(&xm, &beta_star, k);
    Ok(mis
        .into_iter()
        .enumerate()
        .map(|(r, i)| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = k - 1;
            for c in 0..k {
                acc += pm[(r, c)];
                if u < acc {
                    pick = c;
                    break;
                }
            }
            (i, levels[pick])
        })
        .collect())
}

fn imputation_pass(
    cohort: &Cohort,
    order: &[Variable],
    aux: &[f64],
    cfg: &ImputationConfig,
    pass: usize,
) -> Result<Cohort> {
    let mut rng = stream(cfg.seed, Stream::Imputation, pass as u64);
    let mut records = cohort.records().to_vec();
    let n = records.len();
    let mut complete: Vec<Variable> = Variable::IMPUTABLE
        .iter()
        .copied()
        .filter(|v| !order.contains(v))
        .collect();
    for &var in order {
        let x = design(&predictor_columns(&records, aux, &complete), n);
        let y: Vec<Option<f64>> = records.iter().map(|r| r.value(var)).collect();
        let fills = match var.kind() {
            VariableKind::Continuous => impute_continuous(&mut rng, var, &x, &y)?,
            _ => impute_categorical(&mut rng, var, &x, &y, cfg.ridge)?,
        };
        for (i, v) in fills {
            records[i].set_value(var, Some(v))?;
        }
        complete.push(var);
    }
    Ok(Cohort::new(records))
}

/// `m` completed copies of `cohort`. Pass `k` draws from its own stream, so
/// passes can run in any order and in parallel.
pub fn impute(cohort: &Cohort, cfg: &ImputationConfig) -> Result<CompletedCohorts> {
    if cfg.m == 0 {
        return Err(Error::Contract("m must be >= 1".into()));
    }
    if !(cfg.ridge >= 0.0) {
        return Err(Error::Contract("ridge must be >= 0".into()));
    }
    let recs = cohort.records();
    let mut counts: Vec<(usize, usize, Variable)> = Variable::IMPUTABLE
        .iter()
        .enumerate()
        .map(|(k, &v)| (recs.iter().filter(|r| r.value(v).is_none()).count(), k, v))
        .filter(|(c, _, _)| *c > 0)
        .collect();
    counts.sort();
    if let Some((_, _, v)) = counts.iter().find(|(c, _, _)| *c == recs.len()) {
        return Err(Error::Estimation(format!("'{v}' is missing for every record")));
    }
    let order: Vec<Variable> = counts.iter().map(|(_, _, v)| *v).collect();
    if order.is_empty() {
        return Ok(CompletedCohorts {
            cohorts: vec![cohort.clone(); cfg.m],
            config: *cfg,
            order,
        });
    }
    let times: Vec<f64> = recs.iter().map(|r| r.follow_up_years).collect();
    let events: Vec<bool> = recs.iter().map(|r| r.event).collect();
    let h = nelson_aalen(&times, &events)?;
    let aux: Vec<f64> = times.iter().map(|&t| h.eval(t)).collect();
    let passes: Vec<Result<Cohort>> = crate::par::map_indexed(cfg.m, |k| imputation_pass(cohort, &order, &aux, cfg, k));
    Ok(CompletedCohorts {
        cohorts: passes.into_iter().collect::<Result<_>>()?,
        config: *cfg,
        order,
    })
}
