use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::cohort::Cohort;
use crate::error::{Error, Result};

/// Right-censored survival data with a fixed offset, a cluster (practice)
/// label per subject and optional extra covariates.
#[derive(Debug, Clone)]
pub struct SurvivalDataset {
    time: Vec<f64>,
    event: Vec<bool>,
    offset: Vec<f64>,
    group: Vec<usize>,
    group_ids: Vec<String>,
    covariates: Option<(DMatrix<f64>, Vec<String>)>,
}

impl SurvivalDataset {
    /// Groups are numbered in sorted order of their ids.
    pub fn new(time: Vec<f64>, event: Vec<bool>, offset: Vec<f64>, group_ids: Vec<String>) -> Result<Self> {
        let n = time.len();
        if event.len() != n || offset.len() != n || group_ids.len() != n {
            return Err(Error::Contract("survival columns differ in length".into()));
        }
        if let Some(i) = time.iter().position(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::Contract(format!(
                "time must be > 0 and finite (subject {i}: {})",
                time[i]
            )));
        }
        if let Some(i) = offset.iter().position(|o| !o.is_finite()) {
            return Err(Error::Contract(format!("offset must be finite (subject {i})")));
        }
        let mut ids: BTreeMap<&str, usize> = group_ids.iter().map(|g| (g.as_str(), 0)).collect();
        for (k, v) in ids.values_mut().enumerate() {
            *v = k;
        }
        let group = group_ids.iter().map(|g| ids[g.as_str()]).collect();
        let labels = ids.keys().map(|s| s.to_string()).collect();
        Ok(SurvivalDataset {
            time,
            event,
            offset,
            group,
            group_ids: labels,
            covariates: None,
        })
    }

    /// One subject per cohort record; `lp` supplies the offset.
    pub fn from_cohort(cohort: &Cohort, lp: &[f64]) -> Result<Self> {
        if lp.len() != cohort.len() {
            return Err(Error::Contract("one linear predictor per record required".into()));
        }
        let recs = cohort.records();
        SurvivalDataset::new(
            recs.iter().map(|r| r.follow_up_years).collect(),
            recs.iter().map(|r| r.event).collect(),
            lp.to_vec(),
            recs.iter().map(|r| r.practice_id.clone()).collect(),
        )
    }

    /// Attach an `n x p` covariate matrix.
    pub fn with_covariates(mut self, x: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if x.nrows() != self.len() || x.ncols() != names.len() {
            return Err(Error::Contract("covariate matrix shape mismatch".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("covariates must be finite".into()));
        }
        self.covariates = Some((x, names));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn time(&self) -> &[f64] {
        &self.time
    }

    pub fn event(&self) -> &[bool] {
        &self.event
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn group(&self) -> &[usize] {
        &self.group
    }

    pub fn group_ids(&self) -> &[String] {
        &self.group_ids
    }

    pub fn n_groups(&self) -> usize {
        self.group_ids.len()
    }

    pub fn n_events(&self) -> usize {
        self.event.iter().filter(|&&e| e).count()
    }

    pub fn covariates(&self) -> Option<(&DMatrix<f64>, &[String])> {
        self.covariates.as_ref().map(|(x, n)| (x, n.as_slice()))
    }

    /// Subjects of the listed groups (by index). Group labels are kept.
    pub fn subset_groups(&self, groups: &[usize]) -> Result<Self> {
        let keep: std::collections::BTreeSet<usize> = groups.iter().copied().collect();
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep.contains(&self.group[i])).collect();
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let mut out = SurvivalDataset::new(
            pick(&self.time),
            idx.iter().map(|&i| self.event[i]).collect(),
            pick(&self.offset),
            idx.iter().map(|&i| self.group_ids[self.group[i]].clone()).collect(),
        )?;
        if let Some((x, names)) = &self.covariates {
            let sub = DMatrix::from_fn(idx.len(), x.ncols(), |r, c| x[(idx[r], c)]);
            out = out.with_covariates(sub, names.clone())?;
        }
        Ok(out)
    }
}
