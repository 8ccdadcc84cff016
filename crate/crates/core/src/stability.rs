//! Cross-source stability metrics.
//!
//! Each source (practice) gets a discrete distribution on a shared support.
//! Pairwise distances are `sqrt(JSD)` with base-2 logarithms, sources are
//! embedded by classical multidimensional scaling, and each source's
//! outlyingness (SPO) is its distance from the centroid divided by
//! `sqrt((N - 1) / (2N))`, the circumradius of the unit-edge regular simplex.
//! GPD is the mean SPO.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::cohort::{Cohort, Variable, VariableKind};
use crate::error::{Error, Result};

/// Shared support of the distributions being compared.
#[derive(Debug, Clone, PartialEq)]
pub enum Support {
    /// Equal-width bins; `edges.len() == bins + 1`.
    Bins { edges: Vec<f64>, missing: bool },
    /// Category codes in order.
    Categories { codes: Vec<f64>, missing: bool },
}

impl Support {
    /// `bins` equal-width bins over the range of the pooled values. A
    /// degenerate range gives a single bin.
    pub fn equal_width(pooled: impl IntoIterator<Item = f64>, bins: usize, missing: bool) -> Result<Support> {
        if bins == 0 {
            return Err(Error::Contract("need at least one bin".into()));
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in pooled {
            if !v.is_finite() {
                return Err(Error::Estimation(format!("non-finite value {v}")));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo > hi {
            (lo, hi) = (0.0, 0.0);
        }
        let edges = if lo == hi {
            vec![lo, hi]
        } else {
            (0..=bins).map(|k| lo + (hi - lo) * k as f64 / bins as f64).collect()
        };
        Ok(Support::Bins { edges, missing })
    }

    pub fn categories(codes: Vec<f64>, missing: bool) -> Support {
        Support::Categories { codes, missing }
    }

    pub fn has_missing(&self) -> bool {
        match self {
            Support::Bins { missing, .. } | Support::Categories { missing, .. } => *missing,
        }
    }

    fn observed_cells(&self) -> usize {
        match self {
            Support::Bins { edges, .. } => edges.len() - 1,
            Support::Categories { codes, .. } => codes.len(),
        }
    }

    pub fn n_cells(&self) -> usize {
        self.observed_cells() + self.has_missing() as usize
    }

    /// Cell of a value; `None` maps to the missing cell when there is one.
    fn cell(&self, value: Option<f64>) -> Result<Option<usize>> {
        let Some(v) = value else {
            return Ok(self.has_missing().then(|| self.observed_cells()));
        };
        match self {
            Support::Bins { edges, .. } => {
                let n = edges.len() - 1;
                let (lo, hi) = (edges[0], edges[n]);
                if hi == lo {
                    return Ok(Some(0));
                }
                let k = ((v - lo) / (hi - lo) * n as f64).floor();
                Ok(Some((k.max(0.0) as usize).min(n - 1)))
            }
            Support::Categories { codes, .. } => codes
                .iter()
                .position(|c| *c == v)
                .map(Some)
                .ok_or_else(|| Error::Estimation(format!("value {v} is not a category of the support"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    pub support: Support,
    pub probabilities: Vec<f64>,
}

/// Cell frequencies of one source. Missing values count only when the
/// support has a missing cell.
pub fn estimate_distribution(source: &str, values: &[Option<f64>], support: &Support) -> Result<DiscreteDistribution> {
    let mut counts = vec![0u64; support.n_cells()];
    for v in values {
        if let Some(c) = support.cell(*v)? {
            counts[c] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Estimation(format!("source '{source}' has no observed values")));
    }
    Ok(DiscreteDistribution {
        support: support.clone(),
        probabilities: counts.iter().map(|&c| c as f64 / total as f64).collect(),
    })
}

/// Jensen-Shannon divergence in bits.
pub fn jsd(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    if p.support != q.support || p.probabilities.len() != q.probabilities.len() {
        return Err(Error::Contract("distributions have different supports".into()));
    }
    Ok(jsd_raw(&p.probabilities, &q.probabilities))
}

pub(crate) fn jsd_raw(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            acc += a * (a / m).log2();
        }
        if b > 0.0 {
            acc += b * (b / m).log2();
        }
    }
    (0.5 * acc).clamp(0.0, 1.0)
}

/// `sqrt(JSD)` between every pair of sources.
pub fn pairwise_distance(sources: &[DiscreteDistribution]) -> Result<DMatrix<f64>> {
    let n = sources.len();
    if n < 2 {
        return Err(Error::Contract("at least two sources are required".into()));
    }
    if sources.iter().any(|s| s.support != sources[0].support) {
        return Err(Error::Contract("distributions have different supports".into()));
    }
    let rows: Vec<Vec<f64>> = crate::par::map_indexed(n, |i| {
        (0..n)
            .map(|j| {
                if j <= i {
                    0.0
                } else {
                    jsd_raw(&sources[i].probabilities, &sources[j].probabilities).sqrt()
                }
            })
            .collect()
    });
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            d[(i, j)] = rows[i][j];
            d[(j, i)] = rows[i][j];
        }
    }
    Ok(d)
}

#[derive(Debug, Clone)]
pub struct EmbeddingResult {
    /// `N x (N - 1)`, one row per source.
    pub coordinates: DMatrix<f64>,
    /// All `N` eigenvalues of the double-centred matrix, descending.
    pub eigenvalues: Vec<f64>,
    /// Sum of the magnitudes of the negative eigenvalues set to zero.
    pub clipped_mass: f64,
}

/// Classical multidimensional scaling of a distance matrix.
pub fn embed_sources(d: &DMatrix<f64>) -> Result<EmbeddingResult> {
    let n = d.nrows();
    if n != d.ncols() || n < 2 {
        return Err(Error::Contract("distance matrix must be square with N >= 2".into()));
    }
    let scale = d.amax().max(1.0);
    for i in 0..n {
        if d[(i, i)].abs() > 1e-12 * scale {
            return Err(Error::Contract(format!(
                "distance matrix diagonal entry {i} is not zero"
            )));
        }
        for j in 0..n {
            let v = d[(i, j)];
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Contract(format!("distance ({i},{j}) must be finite and >= 0")));
            }
            if (v - d[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::Contract(format!(
                    "distance matrix is not symmetric at ({i},{j})"
                )));
            }
        }
    }
    let sq = d.map(|v| v * v);
    let row_means: DVector<f64> = DVector::from_fn(n, |i, _| sq.row(i).mean());
    let grand = row_means.mean();
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (sq[(i, j)] - row_means[i] - row_means[j] + grand));
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let clipped_mass = eigenvalues.iter().filter(|&&l| l < 0.0).map(|l| -l).sum();
    let coordinates = DMatrix::from_fn(n, n - 1, |i, c| {
        let k = order[c];
        eig.eigenvectors[(i, k)] * eig.eigenvalues[k].max(0.0).sqrt()
    });
    Ok(EmbeddingResult {
        coordinates,
        eigenvalues,
        clipped_mass,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    pub variable: String,
    /// Sex or other stratum label, if the report covers one.
    pub stratum: Option<String>,
    pub sources: Vec<String>,
    pub spo: Vec<f64>,
    pub gpd: f64,
    pub n_sources: usize,
    pub clipped_mass: f64,
    /// Number of values clamped into [0, 1].
    pub clamped: usize,
    pub warnings: Vec<String>,
}

/// `sqrt((N - 1) / (2N))`.
pub fn max_radius(n: usize) -> f64 {
    ((n as f64 - 1.0) / (2.0 * n as f64)).sqrt()
}

/// SPO per source and their mean (GPD). Sources are labelled by position.
pub fn compute_spo_gpd(embedding: &EmbeddingResult) -> Result<StabilityReport> {
    let x = &embedding.coordinates;
    let n = x.nrows();
    if n < 2 {
        return Err(Error::Contract("at least two sources are required".into()));
    }
    let centroid = x.row_mean();
    let r = max_radius(n);
    let mut clamped = 0;
    let spo: Vec<f64> = (0..n)
        .map(|i| {
            let s = (x.row(i) - &centroid).norm() / r;
            if s > 1.0 {
                clamped += 1;
                1.0
            } else {
                s
            }
        })
        .collect();
    let mut gpd = spo.iter().sum::<f64>() / n as f64;
    if gpd > 1.0 {
        clamped += 1;
        gpd = 1.0;
    }
    let mut warnings = Vec::new();
    if clamped > 0 {
        warnings.push(format!("{clamped} values clamped to [0, 1]"));
    }
    Ok(StabilityReport {
        variable: String::new(),
        stratum: None,
        sources: (0..n).map(|i| i.to_string()).collect(),
        spo,
        gpd,
        n_sources: n,
        clipped_mass: embedding.clipped_mass,
        clamped,
        warnings,
    })
}

/// Distance, embedding and SPO/GPD for labelled distributions.
pub fn stability_of(variable: &str, sources: Vec<String>, dists: &[DiscreteDistribution]) -> Result<StabilityReport> {
    let d = pairwise_distance(dists)?;
    let emb = embed_sources(&d)?;
    let mut report = compute_spo_gpd(&emb)?;
    report.variable = variable.to_string();
    report.sources = sources;
    Ok(report)
}

#[derive(Debug, Clone, Copy)]
pub struct StabilityOptions {
    /// Equal-width bins for continuous variables.
    pub bins: usize,
    /// Treat missing as its own category instead of dropping it.
    pub include_missing: bool,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        StabilityOptions {
            bins: 20,
            include_missing: false,
        }
    }
}

fn support_for(cohort: &Cohort, variable: Variable, opts: &StabilityOptions) -> Result<Support> {
    Ok(match variable.kind() {
        VariableKind::Continuous => Support::equal_width(
            cohort.records().iter().filter_map(|r| r.value(variable)),
            opts.bins,
            opts.include_missing,
        )?,
        VariableKind::Categorical(levels) => {
            Support::categories(levels.iter().map(|&l| l as f64).collect(), opts.include_missing)
        }
        VariableKind::Binary => Support::categories(vec![0.0, 1.0], opts.include_missing),
    })
}

/// Per-practice distributions of one variable on a pooled support.
pub fn variable_stability(cohort: &Cohort, variable: Variable, opts: &StabilityOptions) -> Result<StabilityReport> {
    let support = support_for(cohort, variable, opts)?;
    let mut ids = Vec::new();
    let mut dists = Vec::new();
    for id in cohort.practice_ids() {
        let values: Vec<Option<f64>> = cohort.practice_records(id).map(|r| r.value(variable)).collect();
        dists.push(estimate_distribution(id, &values, &support)?);
        ids.push(id.to_string());
    }
    stability_of(variable.name(), ids, &dists)
}

/// Per-practice Bernoulli distributions over {missing, observed}.
pub fn missingness_stability(cohort: &Cohort, variable: Variable) -> Result<StabilityReport> {
    if !variable.is_imputable() {
        return Err(Error::Contract(format!("'{variable}' is never missing")));
    }
    let support = Support::categories(vec![0.0, 1.0], false);
    let mut ids = Vec::new();
    let mut dists = Vec::new();
    for id in cohort.practice_ids() {
        let values: Vec<Option<f64>> = cohort
            .practice_records(id)
            .map(|r| Some(if r.value(variable).is_none() { 0.0 } else { 1.0 }))
            .collect();
        dists.push(estimate_distribution(id, &values, &support)?);
        ids.push(id.to_string());
    }
    stability_of(&format!("missing_{}", variable.name()), ids, &dists)
}

/// Joint stability over several variables: standardise on the pooled data,
/// project onto the top `k` principal components of the pooled correlation
/// matrix, cut each component into `q` equal-width bins and compare the
/// per-practice histograms over the `q^k` joint cells.
pub fn multivariate_stability(cohort: &Cohort, variables: &[Variable], k: usize, q: usize) -> Result<StabilityReport> {
    if k == 0 || q == 0 {
        return Err(Error::Contract("component count and bins must be >= 1".into()));
    }
    if k > variables.len() {
        return Err(Error::Contract(format!(
            "{k} components requested from {} variables",
            variables.len()
        )));
    }
    let n = cohort.len();
    if n < 2 {
        return Err(Error::Contract("at least two records are required".into()));
    }
    let mut warnings = Vec::new();
    let mut columns: Vec<(Variable, Vec<f64>)> = Vec::new();
    for &v in variables {
        let col: Vec<f64> = cohort
            .records()
            .iter()
            .map(|r| {
                r.value(v)
                    .ok_or_else(|| Error::Contract(format!("'{v}' has missing values; impute first")))
            })
            .collect::<Result<_>>()?;
        let (mean, sd) = (crate::stats::mean(&col), crate::stats::sd(&col));
        if !(sd > 1e-12 * mean.abs().max(1.0)) {
            warnings.push(format!("'{v}' is constant and was dropped"));
            continue;
        }
        columns.push((v, col.iter().map(|x| (x - mean) / sd).collect()));
    }
    if columns.is_empty() {
        return Err(Error::Contract("every variable is constant".into()));
    }
    let k = if k > columns.len() {
        warnings.push(format!(
            "only {} components available after dropping constants",
            columns.len()
        ));
        columns.len()
    } else {
        k
    };
    let p = columns.len();
    let z = DMatrix::from_fn(n, p, |i, j| columns[j].1[i]);
    let corr = (z.transpose() * &z) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(corr);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let loadings = DMatrix::from_fn(p, k, |r, c| eig.eigenvectors[(r, order[c])]);
    let scores = &z * loadings;

    let cells = q
        .checked_pow(k as u32)
        .ok_or_else(|| Error::Contract("too many joint cells".into()))?;
    let mut cell_of = vec![0usize; n];
    for c in 0..k {
        let support = Support::equal_width(scores.column(c).iter().copied(), q, false)?;
        for (i, cell) in cell_of.iter_mut().enumerate() {
            let b = support.cell(Some(scores[(i, c)]))?.expect("observed cell");
            *cell = *cell * q + b;
        }
    }
    let support = Support::categories((0..cells).map(|c| c as f64).collect(), false);
    let mut ids = Vec::new();
    let mut dists = Vec::new();
    for (id, idx) in cohort.practice_index() {
        let values: Vec<Option<f64>> = idx.iter().map(|&i| Some(cell_of[i] as f64)).collect();
        dists.push(estimate_distribution(id, &values, &support)?);
        ids.push(id.clone());
    }
    let name = format!(
        "joint({})",
        columns.iter().map(|(v, _)| v.name()).collect::<Vec<_>>().join("+")
    );
    let mut report = stability_of(&name, ids, &dists)?;
    report.warnings.extend(warnings);
    Ok(report)
}

/// CSV with columns variable, source_id, spo, gpd, n_sources, clipped_mass,
/// sex (empty when the report is not stratified).
pub fn write_reports<W: Write>(writer: W, reports: &[StabilityReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "variable",
        "source_id",
        "spo",
        "gpd",
        "n_sources",
        "clipped_mass",
        "sex",
    ])?;
    for r in reports {
        for (id, spo) in r.sources.iter().zip(&r.spo) {
            w.write_record([
                r.variable.clone(),
                id.clone(),
                format!("{spo:.10}"),
                format!("{:.10}", r.gpd),
                r.n_sources.to_string(),
                format!("{:.3e}", r.clipped_mass),
                r.stratum.clone().unwrap_or_default(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<stability writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(p: &[f64]) -> DiscreteDistribution {
        DiscreteDistribution {
            support: Support::categories((0..p.len()).map(|i| i as f64).collect(), false),
            probabilities: p.to_vec(),
        }
    }

    #[test]
    fn categorical_counts() {
        let s = Support::categories(vec![1.0, 2.0], false);
        let d = estimate_distribution("a", &[Some(1.0), Some(1.0), Some(2.0)], &s).unwrap();
        assert!((d.probabilities[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_source_named() {
        let s = Support::categories(vec![1.0], false);
        let err = estimate_distribution("P7", &[None], &s).unwrap_err();
        assert!(err.to_string().contains("P7"));
    }

    #[test]
    fn missing_cell() {
        let s = Support::categories(vec![1.0], true);
        let d = estimate_distribution("a", &[None, Some(1.0)], &s).unwrap();
        assert_eq!(d.probabilities, vec![0.5, 0.5]);
    }

    #[test]
    fn single_value_is_one_hot() {
        let s = Support::equal_width([3.0, 3.0], 20, false).unwrap();
        let d = estimate_distribution("a", &[Some(3.0), Some(3.0)], &s).unwrap();
        assert_eq!(d.probabilities, vec![1.0]);
    }

    #[test]
    fn mismatched_support_rejected() {
        assert!(jsd(&dist(&[1.0]), &dist(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn two_point_embedding() {
        let d = DMatrix::from_row_slice(2, 2, &[0.0, 0.6, 0.6, 0.0]);
        let e = embed_sources(&d).unwrap();
        let gap = (e.coordinates.row(0) - e.coordinates.row(1)).norm();
        assert!((gap - 0.6).abs() < 1e-12);
        let r = compute_spo_gpd(&e).unwrap();
        assert!((r.spo[0] - 0.6).abs() < 1e-12 && (r.spo[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn asymmetric_matrix_rejected() {
        let d = DMatrix::from_row_slice(2, 2, &[0.0, 0.6, 0.5, 0.0]);
        assert!(embed_sources(&d).is_err());
    }
}
