//! Practice-level comparisons across frailty quintiles and correlations of
//! stability metrics with frailty.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::cohort::{Cohort, PatientRecord, Sex, Variable, VariableKind};
use crate::error::{Error, Result};
use crate::stability::StabilityReport;
use crate::survival::adjust_risk;

/// Cut rule recorded with every assignment.
pub const CUT_RULE: &str = "sort ascending by (frailty, practice_id); cumulative cuts at floor(N*k/5), k=1..4";

#[derive(Debug, Clone, Serialize)]
pub struct QuintileAssignment {
    /// Practice id to quintile 1..=5.
    pub quintile: BTreeMap<String, u8>,
    pub sizes: [usize; 5],
    pub rule: &'static str,
}

impl QuintileAssignment {
    pub fn members(&self, q: u8) -> impl Iterator<Item = &str> {
        self.quintile
            .iter()
            .filter(move |(_, &k)| k == q)
            .map(|(id, _)| id.as_str())
    }
}

/// Rank-based quintiles of practice frailty.
pub fn frailty_quintiles(frailty: &BTreeMap<String, f64>) -> Result<QuintileAssignment> {
    let n = frailty.len();
    if n < 5 {
        return Err(Error::Contract(format!("at least 5 practices are required, got {n}")));
    }
    if let Some((id, v)) = frailty.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Contract(format!(
            "frailty of practice '{id}' is not finite ({v})"
        )));
    }
    let mut order: Vec<(&String, f64)> = frailty.iter().map(|(k, v)| (k, *v)).collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    let cuts: Vec<usize> = (1..=5).map(|k| n * k / 5).collect();
    let mut quintile = BTreeMap::new();
    let mut sizes = [0usize; 5];
    for (pos, (id, _)) in order.into_iter().enumerate() {
        let q = cuts.iter().position(|&c| pos < c).expect("pos < n");
        sizes[q] += 1;
        quintile.insert(id.clone(), q as u8 + 1);
    }
    Ok(QuintileAssignment {
        quintile,
        sizes,
        rule: CUT_RULE,
    })
}

/// One practice-level characteristic, summarised over the practices of a
/// quintile.
#[derive(Debug, Clone, Serialize)]
pub struct CharacteristicRow {
    pub quintile: u8,
    pub sex: String,
    pub characteristic: String,
    /// "mean" for continuous values, "percent" for shares.
    pub unit: &'static str,
    pub mean: f64,
    pub sd: f64,
    /// Practices contributing a value.
    pub n_practices: usize,
}

/// Practice-level statistics, keyed by characteristic name.
fn practice_statistics(records: &[&PatientRecord]) -> Vec<(String, &'static str, Option<f64>)> {
    let mut out = Vec::new();
    out.push(("n_patients".to_string(), "mean", Some(records.len() as f64)));
    out.push((
        "events".to_string(),
        "mean",
        Some(records.iter().filter(|r| r.event).count() as f64),
    ));
    let pct = |hits: usize, of: usize| (of > 0).then(|| 100.0 * hits as f64 / of as f64);
    for var in Variable::all() {
        let values: Vec<f64> = records.iter().filter_map(|r| r.value(var)).collect();
        match var.kind() {
            VariableKind::Continuous => {
                let m = (!values.is_empty()).then(|| crate::stats::mean(&values));
                out.push((var.name().to_string(), "mean", m));
            }
            VariableKind::Categorical(levels) => {
                for &l in levels {
                    let hits = values.iter().filter(|&&v| v == l as f64).count();
                    out.push((format!("{}={l}", var.name()), "percent", pct(hits, values.len())));
                }
            }
            VariableKind::Binary => {
                let hits = values.iter().filter(|&&v| v == 1.0).count();
                out.push((var.name().to_string(), "percent", pct(hits, values.len())));
            }
        }
        if var.is_imputable() {
            let missing = records.len() - values.len();
            out.push((
                format!("missing_{}", var.name()),
                "percent",
                pct(missing, records.len()),
            ));
        }
    }
    out
}

fn check_coverage<'a>(have: impl IntoIterator<Item = &'a str>, want: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let have: BTreeSet<&str> = have.into_iter().collect();
    let want: BTreeSet<&str> = want.into_iter().collect();
    if have == want {
        return Ok(());
    }
    let extra: Vec<&str> = have.difference(&want).copied().collect();
    let absent: Vec<&str> = want.difference(&have).copied().collect();
    Err(Error::Contract(format!(
        "practice sets differ: only in cohort [{}]; only in frailty [{}]",
        extra.join(", "),
        absent.join(", ")
    )))
}

/// Table of mean (SD) of practice-level statistics per quintile and sex. Each
/// practice contributes one value per characteristic, computed over its own
/// patients of that sex.
pub fn quintile_characteristics(cohort: &Cohort, assignment: &QuintileAssignment) -> Result<Vec<CharacteristicRow>> {
    check_coverage(cohort.practice_ids(), assignment.quintile.keys().map(String::as_str))?;
    let mut rows = Vec::new();
    for sex in Sex::ALL {
        let sub = cohort.of_sex(sex);
        if sub.is_empty() {
            continue;
        }
        // characteristic -> (unit, per-quintile values)
        let mut table: Vec<(String, &'static str, [Vec<f64>; 5])> = Vec::new();
        for id in sub.practice_ids() {
            let q = assignment.quintile[id] as usize - 1;
            let recs: Vec<&PatientRecord> = sub.practice_records(id).collect();
            for (k, (name, unit, value)) in practice_statistics(&recs).into_iter().enumerate() {
                if table.len() <= k {
                    table.push((name, unit, Default::default()));
                }
                if let Some(v) = value {
                    table[k].2[q].push(v);
                }
            }
        }
        for q in 0..5 {
            for (name, unit, values) in &table {
                let v = &values[q];
                rows.push(CharacteristicRow {
                    quintile: q as u8 + 1,
                    sex: sex.to_string(),
                    characteristic: name.clone(),
                    unit,
                    mean: if v.is_empty() { f64::NAN } else { crate::stats::mean(v) },
                    sd: if v.is_empty() { f64::NAN } else { crate::stats::sd(v) },
                    n_practices: v.len(),
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Correlation {
    pub r: f64,
    pub lower: f64,
    pub upper: f64,
    pub n: usize,
}

/// Pearson correlation with a Fisher-z confidence interval.
pub fn pearson_corr_ci(x: &[f64], y: &[f64], confidence: f64) -> Result<Correlation> {
    let n = x.len();
    if y.len() != n {
        return Err(Error::Contract("x and y differ in length".into()));
    }
    if n < 4 {
        return Err(Error::Contract(format!("at least 4 pairs are required, got {n}")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Contract(format!(
            "confidence must be in (0,1), got {confidence}"
        )));
    }
    let (mx, my) = (crate::stats::mean(x), crate::stats::mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if !(sxx > 0.0) || !(syy > 0.0) {
        return Err(Error::Contract("zero variance".into()));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    if r.abs() == 1.0 {
        return Ok(Correlation {
            r,
            lower: r,
            upper: r,
            n,
        });
    }
    let z = r.atanh();
    let se = 1.0 / (n as f64 - 3.0).sqrt();
    let q = Normal::standard().inverse_cdf(0.5 + confidence / 2.0);
    Ok(Correlation {
        r,
        lower: (z - q * se).tanh(),
        upper: (z + q * se).tanh(),
        n,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrelationRow {
    pub variable: String,
    pub sex: String,
    /// "spo" or "factor".
    pub metric: &'static str,
    pub correlation: Option<Correlation>,
    /// Why the correlation is absent, for example zero variance.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlotPoint {
    pub practice_id: String,
    pub variable: String,
    pub sex: String,
    /// Decile (1..=10) of the practice's factor value among practices.
    pub percentile_bin: u8,
    pub value: f64,
    pub frailty: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityFrailtyTable {
    pub rows: Vec<CorrelationRow>,
    pub plot: Vec<PlotPoint>,
    /// Frailty of a practice with no excess hazard.
    pub reference_line: f64,
    pub percentile_basis: &'static str,
}

/// Practice-level value a stability variable is compared on: the mean for
/// continuous variables, the percentage with the flag for binary ones, the
/// percentage outside the first level for categorical ones and the
/// percentage missing for missingness reports.
fn practice_factor(variable: &str, records: &[&PatientRecord]) -> Option<f64> {
    let pct = |hits: usize, of: usize| (of > 0).then(|| 100.0 * hits as f64 / of as f64);
    if let Some(v) = variable.strip_prefix("missing_").and_then(Variable::from_name) {
        let missing = records.iter().filter(|r| r.value(v).is_none()).count();
        return pct(missing, records.len());
    }
    let var = Variable::from_name(variable)?;
    let values: Vec<f64> = records.iter().filter_map(|r| r.value(var)).collect();
    match var.kind() {
        VariableKind::Continuous => (!values.is_empty()).then(|| crate::stats::mean(&values)),
        VariableKind::Binary => pct(values.iter().filter(|&&v| v == 1.0).count(), values.len()),
        VariableKind::Categorical(levels) => {
            pct(values.iter().filter(|&&v| v != levels[0] as f64).count(), values.len())
        }
    }
}

fn deciles(values: &[f64]) -> Vec<u8> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0u8; n];
    for (rank, i) in order.into_iter().enumerate() {
        out[i] = (rank * 10 / n) as u8 + 1;
    }
    out
}

/// Correlations of SPO and of the practice-level factor with frailty, one
/// pair of rows per report. `frailty` is keyed by the report stratum (a sex
/// label, or "all" for unstratified reports) and then by practice id.
pub fn stability_frailty_table(
    reports: &[StabilityReport],
    frailty: &BTreeMap<String, BTreeMap<String, f64>>,
    cohort: &Cohort,
) -> Result<StabilityFrailtyTable> {
    let mut rows = Vec::new();
    let mut plot = Vec::new();
    for report in reports {
        let stratum = report.stratum.clone().unwrap_or_else(|| "all".into());
        let fr = frailty
            .get(&stratum)
            .ok_or_else(|| Error::Contract(format!("no frailty values for stratum '{stratum}'")))?;
        if let Some(id) = report.sources.iter().find(|id| !fr.contains_key(*id)) {
            return Err(Error::Contract(format!(
                "practice '{id}' of the '{}' report has no frailty value",
                report.variable
            )));
        }
        let y: Vec<f64> = report.sources.iter().map(|id| fr[id]).collect();

        let row = |metric, res: Result<Correlation>| CorrelationRow {
            variable: report.variable.clone(),
            sex: stratum.clone(),
            metric,
            correlation: res.as_ref().ok().copied(),
            error: res.err().map(|e| e.to_string()),
        };
        rows.push(row("spo", pearson_corr_ci(&report.spo, &y, 0.95)));

        let sub = match stratum.parse::<Sex>() {
            Ok(sex) => cohort.of_sex(sex),
            Err(_) => cohort.clone(),
        };
        let factor: Vec<Option<f64>> = report
            .sources
            .iter()
            .map(|id| practice_factor(&report.variable, &sub.practice_records(id).collect::<Vec<_>>()))
            .collect();
        if factor.iter().all(Option::is_none) {
            continue;
        }
        let pairs: Vec<(usize, f64)> = factor
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
            .collect();
        let xs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| y[p.0]).collect();
        rows.push(row("factor", pearson_corr_ci(&xs, &ys, 0.95)));
        for ((i, v), bin) in pairs.iter().zip(deciles(&xs)) {
            plot.push(PlotPoint {
                practice_id: report.sources[*i].clone(),
                variable: report.variable.clone(),
                sex: stratum.clone(),
                percentile_bin: bin,
                value: *v,
                frailty: y[*i],
            });
        }
    }
    Ok(StabilityFrailtyTable {
        rows,
        plot,
        reference_line: 1.0,
        percentile_basis: "per sex",
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RiskRange {
    pub sex: String,
    pub quintile: u8,
    pub n_practices: usize,
    pub frailty_min: f64,
    pub frailty_max: f64,
    pub risk_min: f64,
    pub risk_max: f64,
}

/// Frailty range and the adjusted risk range of each quintile at a base risk.
pub fn risk_ranges(
    sex: &str,
    assignment: &QuintileAssignment,
    frailty: &BTreeMap<String, f64>,
    base_risk: f64,
) -> Result<Vec<RiskRange>> {
    check_coverage(
        assignment.quintile.keys().map(String::as_str),
        frailty.keys().map(String::as_str),
    )?;
    (1..=5u8)
        .map(|q| {
            let values: Vec<f64> = assignment.members(q).map(|id| frailty[id]).collect();
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok(RiskRange {
                sex: sex.to_string(),
                quintile: q,
                n_practices: values.len(),
                frailty_min: lo,
                frailty_max: hi,
                risk_min: adjust_risk(base_risk, lo)?,
                risk_max: adjust_risk(base_risk, hi)?,
            })
        })
        .collect()
}

fn flush<W: Write>(mut w: csv::Writer<W>, what: &str) -> Result<()> {
    w.flush().map_err(|e| Error::io(what, e))
}

fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.6}")
    }
}

/// quintile_table.csv: quintile, sex, characteristic, unit, mean, sd, n_practices.
pub fn write_quintile_table<W: Write>(writer: W, rows: &[CharacteristicRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["quintile", "sex", "characteristic", "unit", "mean", "sd", "n_practices"])?;
    for r in rows {
        w.write_record([
            r.quintile.to_string(),
            r.sex.clone(),
            r.characteristic.clone(),
            r.unit.to_string(),
            num(r.mean),
            num(r.sd),
            r.n_practices.to_string(),
        ])?;
    }
    flush(w, "<quintile table writer>")
}

/// correlations.csv: variable, sex, r, lo, hi, n, metric, error.
pub fn write_correlations<W: Write>(writer: W, rows: &[CorrelationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["variable", "sex", "r", "lo", "hi", "n", "metric", "error"])?;
    for r in rows {
        let (rv, lo, hi, n) = match r.correlation {
            Some(c) => (num(c.r), num(c.lower), num(c.upper), c.n.to_string()),
            None => Default::default(),
        };
        w.write_record([
            r.variable.clone(),
            r.sex.clone(),
            rv,
            lo,
            hi,
            n,
            r.metric.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    flush(w, "<correlation writer>")
}

/// plotdata_beeswarm.csv: practice_id, variable, sex, percentile_bin, value,
/// frailty, reference_line.
pub fn write_plotdata<W: Write>(writer: W, table: &StabilityFrailtyTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "practice_id",
        "variable",
        "sex",
        "percentile_bin",
        "value",
        "frailty",
        "reference_line",
    ])?;
    for p in &table.plot {
        w.write_record([
            p.practice_id.clone(),
            p.variable.clone(),
            p.sex.clone(),
            p.percentile_bin.to_string(),
            num(p.value),
            num(p.frailty),
            num(table.reference_line),
        ])?;
    }
    flush(w, "<plot data writer>")
}

/// risk_ranges.csv: quintile, frailty_min, frailty_max, risk_min, risk_max,
/// sex, n_practices.
pub fn write_risk_ranges<W: Write>(writer: W, rows: &[RiskRange]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "quintile",
        "frailty_min",
        "frailty_max",
        "risk_min",
        "risk_max",
        "sex",
        "n_practices",
    ])?;
    for r in rows {
        w.write_record([
            r.quintile.to_string(),
            num(r.frailty_min),
            num(r.frailty_max),
            num(r.risk_min),
            num(r.risk_max),
            r.sex.clone(),
            r.n_practices.to_string(),
        ])?;
    }
    flush(w, "<risk range writer>")
}
