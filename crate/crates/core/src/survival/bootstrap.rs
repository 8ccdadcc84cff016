use rand::Rng;
use serde::Serialize;

use crate::cohort::{Cohort, PatientRecord};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapInterval {
    pub lower: f64,
    pub upper: f64,
    pub attempted: usize,
    pub failed: usize,
    /// First few failure messages, for diagnostics.
    pub failures: Vec<String>,
}

/// Share of replicates allowed to fail before the bootstrap itself fails.
pub const MAX_FAILURE_RATE: f64 = 0.05;

/// Percentile bootstrap over clusters: each replicate resamples `units` with
/// replacement (replicate `r` draws from its own stream) and passes the
/// picks, in draw order, to `statistic`.
pub fn bootstrap_clusters<T, F>(units: &[T], statistic: F, replicates: usize, seed: u64) -> Result<BootstrapInterval>
where
    T: Sync,
    F: Fn(&[&T]) -> Result<f64> + Sync,
{
    if units.is_empty() {
        return Err(Error::Contract("bootstrap needs at least one cluster".into()));
    }
    if replicates == 0 {
        return Err(Error::Contract("bootstrap needs at least one replicate".into()));
    }
    let n = units.len();
    let results: Vec<Result<f64>> = crate::par::map_indexed(replicates, |r| {
        let mut rng = stream(seed, Stream::Bootstrap, r as u64);
        let picks: Vec<&T> = (0..n).map(|_| &units[rng.random_range(0..n)]).collect();
        statistic(&picks).and_then(|v| {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Estimation("non-finite statistic".into()))
            }
        })
    });
    let mut values = Vec::with_capacity(replicates);
    let mut failures = Vec::new();
    let mut failed = 0;
    for r in results {
        match r {
            Ok(v) => values.push(v),
            Err(e) => {
                failed += 1;
                if failures.len() < 5 {
                    failures.push(e.to_string());
                }
            }
        }
    }
    if failed as f64 > MAX_FAILURE_RATE * replicates as f64 {
        return Err(Error::Estimation(format!(
            "bootstrap: {failed} of {replicates} replicates failed (first: {})",
            failures.first().map(String::as_str).unwrap_or("")
        )));
    }
    crate::stats::sort_floats(&mut values);
    Ok(BootstrapInterval {
        lower: crate::stats::quantile_sorted(&values, 0.025),
        upper: crate::stats::quantile_sorted(&values, 0.975),
        attempted: replicates,
        failed,
        failures,
    })
}

/// Practice-level bootstrap of a cohort statistic. Practices drawn more than
/// once are relabelled `"{practice_id}#{k}"` so each copy stays a separate
/// cluster.
pub fn bootstrap_risk_ci<F>(cohort: &Cohort, statistic: F, replicates: usize, seed: u64) -> Result<BootstrapInterval>
where
    F: Fn(&Cohort) -> Result<f64> + Sync,
{
    let practices: Vec<(&str, Vec<&PatientRecord>)> = cohort
        .practice_index()
        .iter()
        .map(|(id, idx)| (id.as_str(), idx.iter().map(|&i| &cohort.records()[i]).collect()))
        .collect();
    bootstrap_clusters(
        &practices,
        |picks| {
            let mut records = Vec::new();
            for (k, (id, recs)) in picks.iter().enumerate() {
                let label = format!("{id}#{k}");
                records.extend(recs.iter().map(|r| PatientRecord {
                    practice_id: label.clone(),
                    ..(*r).clone()
                }));
            }
            statistic(&Cohort::new(records))
        },
        replicates,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_statistic_gives_zero_width() {
        let units: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ci = bootstrap_clusters(&units, |_| Ok(3.0), 200, 1).unwrap();
        assert_eq!((ci.lower, ci.upper), (3.0, 3.0));
        assert_eq!(ci.attempted, 200);
    }

    #[test]
    fn too_many_failures_is_error() {
        let units = [1.0, 2.0];
        let err = bootstrap_clusters(
            &units,
            |p| {
                if *p[0] > 1.5 {
                    Err(Error::Fit("x".into()))
                } else {
                    Ok(1.0)
                }
            },
            100,
            3,
        );
        assert!(err.is_err());
    }
}
