//! Breslow partial likelihood with its gradient and information matrix.
//!
//! Subjects carry sparse design rows, so random-effect models with one column
//! per practice cost O(n * nnz * P) per Hessian instead of O(events * P^2).
//! The risk-set outer-product sum
//!
//! ```text
//! sum_j w_j s_j s_j',   s_j = sum_{i in R(t_j)} a_i x_i,   w_j = d_j / S_j^2
//! ```
//!
//! is accumulated by adding subjects in descending time order: each pair
//! (q, r) carries weight `sum_{t_j <= min(tau_q, tau_r)} w_j`, which is known
//! when the later-processed subject joins.

use nalgebra::{DMatrix, DVector};

/// Time ordering and event-time bookkeeping, fixed per dataset.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    /// Subject indices by ascending time.
    order: Vec<usize>,
    event_times: Vec<f64>,
    deaths: Vec<f64>,
    /// Position in `order` of the first subject with time >= event time j.
    start: Vec<usize>,
    /// Number of distinct event times <= the subject's time.
    k: Vec<usize>,
}

impl Layout {
    pub fn new(time: &[f64], event: &[bool]) -> Self {
        let mut order: Vec<usize> = (0..time.len()).collect();
        order.sort_by(|&a, &b| time[a].total_cmp(&time[b]).then(a.cmp(&b)));
        let mut event_times: Vec<f64> = Vec::new();
        let mut deaths: Vec<f64> = Vec::new();
        for &i in &order {
            if event[i] {
                if event_times.last() == Some(&time[i]) {
                    *deaths.last_mut().unwrap() += 1.0;
                } else {
                    event_times.push(time[i]);
                    deaths.push(1.0);
                }
            }
        }
        let start = event_times
            .iter()
            .map(|&t| order.partition_point(|&i| time[i] < t))
            .collect();
        let k = time.iter().map(|&t| event_times.partition_point(|&e| e <= t)).collect();
        Layout {
            order,
            event_times,
            deaths,
            start,
            k,
        }
    }

    pub fn event_times(&self) -> &[f64] {
        &self.event_times
    }

    pub fn deaths(&self) -> &[f64] {
        &self.deaths
    }

    pub fn n_event_times(&self) -> usize {
        self.event_times.len()
    }

    /// Risk-set sums `sum_{tau_i >= t_j} a_i` for each event time.
    pub fn risk_sums(&self, a: &[f64]) -> Vec<f64> {
        let n = self.order.len();
        let mut suffix = vec![0.0; n + 1];
        for p in (0..n).rev() {
            suffix[p] = suffix[p + 1] + a[self.order[p]];
        }
        self.start.iter().map(|&s| suffix[s]).collect()
    }
}

/// Compressed sparse rows: one design row per subject.
#[derive(Debug, Clone)]
pub(crate) struct Design {
    n_params: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Design {
    pub fn from_rows(n_params: usize, rows: impl IntoIterator<Item = Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for row in rows {
            for (c, v) in row {
                debug_assert!(c < n_params);
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Design {
            n_params,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn dense(x: &DMatrix<f64>) -> Self {
        Design::from_rows(
            x.ncols(),
            (0..x.nrows()).map(|r| (0..x.ncols()).map(|c| (c, x[(r, c)])).collect()),
        )
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.cols[a..b].iter().copied().zip(self.vals[a..b].iter().copied())
    }

    pub fn dot(&self, i: usize, theta: &DVector<f64>) -> f64 {
        self.row(i).map(|(c, v)| v * theta[c]).sum()
    }
}

pub(crate) struct Evaluation {
    pub loglik: f64,
    pub gradient: DVector<f64>,
    /// Observed information (negative Hessian of the log partial likelihood).
    pub information: Option<DMatrix<f64>>,
    /// Linear predictor per subject (offset included).
    pub eta: Vec<f64>,
}

pub(crate) fn evaluate(
    layout: &Layout,
    design: &Design,
    offset: &[f64],
    event: &[bool],
    theta: &DVector<f64>,
    with_information: bool,
) -> Evaluation {
    let n = offset.len();
    let p = design.n_params();
    let eta: Vec<f64> = (0..n).map(|i| offset[i] + design.dot(i, theta)).collect();
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shift = if shift.is_finite() { shift } else { 0.0 };
    let a: Vec<f64> = eta.iter().map(|e| (e - shift).exp()).collect();

    let sums = layout.risk_sums(&a);
    let m = layout.n_event_times();
    let mut loglik: f64 = (0..n).filter(|&i| event[i]).map(|i| eta[i]).sum();
    let mut cum_h = vec![0.0; m + 1];
    let mut cum_w = vec![0.0; m + 1];
    for j in 0..m {
        let d = layout.deaths[j];
        let s = sums[j];
        loglik -= d * (s.ln() + shift);
        cum_h[j + 1] = cum_h[j] + d / s;
        cum_w[j + 1] = cum_w[j] + d / (s * s);
    }

    let mut gradient = DVector::zeros(p);
    for i in 0..n {
        let resid = (event[i] as u8 as f64) - a[i] * cum_h[layout.k[i]];
        for (c, v) in design.row(i) {
            gradient[c] += v * resid;
        }
    }

    let information = with_information.then(|| {
        let mut first = DMatrix::<f64>::zeros(p, p);
        let mut cross_t = DMatrix::<f64>::zeros(p, p);
        let mut running = DVector::<f64>::zeros(p);
        for i in 0..n {
            let lam = a[i] * cum_h[layout.k[i]];
            for (c1, v1) in design.row(i) {
                for (c2, v2) in design.row(i) {
                    first[(c1, c2)] += lam * v1 * v2;
                }
            }
        }
        for &i in layout.order.iter().rev() {
            let head = cum_w[layout.k[i]];
            if head > 0.0 {
                let ai = a[i];
                for (c1, v1) in design.row(i) {
                    cross_t.column_mut(c1).axpy(head * ai * v1, &running, 1.0);
                    for (c2, v2) in design.row(i) {
                        first[(c1, c2)] -= head * ai * ai * v1 * v2;
                    }
                }
            }
            for (c, v) in design.row(i) {
                running[c] += a[i] * v;
            }
        }
        first - &cross_t - cross_t.transpose()
    });

    Evaluation {
        loglik,
        gradient,
        information,
        eta,
    }
}
