//! Synthetic multi-practice cohorts with known practice effects.
//!
//! Event times follow the hazard `h0(t) exp((1 + u_p) lp_i + b_p)` with a
//! Weibull baseline `H0(t) = (t / scale)^shape`, `b_p ~ N(0, intercept_sd^2)`
//! and `u_p ~ N(0, slope_sd^2)`. Every subject is indexed at time zero.
//!
//! Each practice draws from its own streams per purpose (sizes, factors,
//! effects, survival, censoring, missingness, flips), so switching one
//! mechanism on or off leaves the others' draws unchanged.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Exp1, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cohort::{
    resolve_censoring, CensoringCandidates, Cohort, Condition, ConditionFlags, Ethnicity, PatientRecord, Sex, Smoking,
    Variable,
};
use crate::error::{Error, Result};
use crate::riskmodel::{default_table, linear_predictor, load_coefficients, CoefficientTable, SexModel};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_practices: usize,
    pub patients_per_practice: PracticeSize,
    #[serde(default)]
    pub intercept_sd: f64,
    #[serde(default)]
    pub slope_sd: f64,
    pub baseline: Baseline,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    /// Deregistration rate per year.
    #[serde(default)]
    pub random_censor_rate: f64,
    #[serde(default)]
    pub statin_rate: f64,
    #[serde(default)]
    pub other_death_rate: f64,
    #[serde(default)]
    pub coefficients: CoefficientSource,
    #[serde(default)]
    pub factor_model: FactorModel,
    #[serde(default)]
    pub missing: MissingConfig,
    #[serde(default)]
    pub flip_prob: f64,
}

fn default_horizon() -> f64 {
    10.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PracticeSize {
    pub mean: f64,
    /// Coefficient of variation of the Gamma size distribution; 0 fixes every
    /// practice at `mean`.
    #[serde(default)]
    pub dispersion: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Baseline {
    /// Weibull shape; 1 gives an exponential baseline with rate `1 / scale`.
    pub shape: f64,
    /// Years.
    pub scale: f64,
}

impl Baseline {
    pub fn cumulative_hazard(&self, t: f64) -> f64 {
        (t / self.scale).powf(self.shape)
    }

    /// Time at which the cumulative hazard, multiplied by `m`, reaches `e`.
    pub fn inverse(&self, e: f64, m: f64) -> f64 {
        self.scale * (e / m).powf(1.0 / self.shape)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientSource {
    /// The bundled synthetic table.
    #[default]
    Default,
    /// No terms: every linear predictor is 0.
    Null,
    File {
        path: PathBuf,
    },
}

impl CoefficientSource {
    pub fn load(&self) -> Result<CoefficientTable> {
        match self {
            CoefficientSource::Default => Ok(default_table()),
            CoefficientSource::Null => CoefficientTable::new(
                SexModel {
                    terms: Vec::new(),
                    baseline_survival_10y: 0.9,
                },
                SexModel {
                    terms: Vec::new(),
                    baseline_survival_10y: 0.9,
                },
            ),
            CoefficientSource::File { path } => load_coefficients(path),
        }
    }
}

/// Truncated normal with a practice-level mean shift and an optional linear
/// dependence on age.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuousFactor {
    pub mean: f64,
    pub sd: f64,
    #[serde(default)]
    pub practice_shift_sd: f64,
    pub min: f64,
    pub max: f64,
    #[serde(default)]
    pub age_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoricalFactor {
    /// Level probabilities in code order.
    pub probs: Vec<f64>,
    /// SD of practice-level perturbations of the log-probabilities.
    #[serde(default)]
    pub practice_shift_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorModel {
    pub female_fraction: f64,
    pub age: ContinuousFactor,
    pub sbp: ContinuousFactor,
    pub sbp_sd: ContinuousFactor,
    pub bmi: ContinuousFactor,
    pub chol_hdl_ratio: ContinuousFactor,
    pub smoking: CategoricalFactor,
    pub ethnicity: CategoricalFactor,
    pub townsend: CategoricalFactor,
    /// Prevalence per condition name; unlisted conditions have prevalence 0.
    pub flags: BTreeMap<String, f64>,
    /// SD of practice-level shifts of each flag's log-odds.
    pub flag_shift_sd: f64,
}

impl Default for FactorModel {
    fn default() -> Self {
        let cont = |mean, sd, practice_shift_sd, min, max, age_slope| ContinuousFactor {
            mean,
            sd,
            practice_shift_sd,
            min,
            max,
            age_slope,
        };
        let cat = |probs: &[f64], practice_shift_sd| CategoricalFactor {
            probs: probs.to_vec(),
            practice_shift_sd,
        };
        let flags = [
            ("atrial_fibrillation", 0.01),
            ("chronic_kidney_disease", 0.01),
            ("erectile_dysfunction", 0.03),
            ("family_history_chd_lt60", 0.12),
            ("migraines", 0.08),
            ("rheumatoid_arthritis", 0.01),
            ("sle", 0.002),
            ("severe_mental_illness", 0.01),
            ("type1_diabetes", 0.005),
            ("type2_diabetes", 0.04),
            ("bp_treatment", 0.08),
            ("atypical_antipsychotic", 0.005),
            ("regular_steroids", 0.01),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        FactorModel {
            female_fraction: 0.5,
            age: cont(48.0, 14.0, 1.5, 25.0, 84.0, 0.0),
            sbp: cont(127.0, 16.0, 2.0, 80.0, 220.0, 0.5),
            sbp_sd: cont(9.0, 4.0, 0.5, 0.5, 40.0, 0.0),
            bmi: cont(27.0, 5.0, 0.7, 15.0, 60.0, 0.0),
            chol_hdl_ratio: cont(4.0, 1.2, 0.15, 1.5, 12.0, 0.0),
            smoking: cat(&[0.55, 0.2, 0.1, 0.1, 0.05], 0.2),
            ethnicity: cat(&[0.8, 0.04, 0.03, 0.02, 0.02, 0.03, 0.02, 0.02, 0.02], 0.2),
            townsend: cat(&[0.2; 5], 0.2),
            flags,
            flag_shift_sd: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    /// Missing completely at random.
    #[default]
    Mcar,
    /// Log-odds of missingness fall by [`MAR_AGE_LOGIT_PER_YEAR`] per year of
    /// age above 50 (rise below it).
    MarAge,
}

/// Change in the log-odds of missingness per year of age under
/// [`Mechanism::MarAge`].
pub const MAR_AGE_LOGIT_PER_YEAR: f64 = -0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum RateConfig {
    Fixed {
        rate: f64,
    },
    /// Per-practice rates drawn from Beta(alpha, beta).
    Beta {
        alpha: f64,
        beta: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MissingConfig {
    pub mechanism: Mechanism,
    /// Keyed by imputable variable name.
    pub rates: BTreeMap<String, RateConfig>,
}

/// Missingness rate of one variable.
#[derive(Debug, Clone, PartialEq)]
pub enum RateSpec {
    Uniform(f64),
    /// Practices not listed get rate 0.
    PerPractice(BTreeMap<String, f64>),
}

impl RateSpec {
    fn rate(&self, practice: &str) -> f64 {
        match self {
            RateSpec::Uniform(r) => *r,
            RateSpec::PerPractice(m) => m.get(practice).copied().unwrap_or(0.0),
        }
    }

    fn check(&self, var: Variable) -> Result<()> {
        let bad = |r: f64| !(0.0..=1.0).contains(&r);
        let offending = match self {
            RateSpec::Uniform(r) => bad(*r).then_some(*r),
            RateSpec::PerPractice(m) => m.values().copied().find(|&r| bad(r)),
        };
        match offending {
            Some(r) => Err(Error::Config(format!(
                "missing rate for '{var}' must be in [0,1], got {r}"
            ))),
            None => Ok(()),
        }
    }
}

pub type MissingRates = BTreeMap<Variable, RateSpec>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PracticeTruth {
    pub b: f64,
    pub u: f64,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Keyed by practice id.
    pub practices: BTreeMap<String, PracticeTruth>,
    pub table: CoefficientTable,
    pub baseline: Baseline,
    /// Per-practice missingness rates actually used, by variable.
    pub missing_rates: MissingRates,
}

impl GroundTruth {
    /// CSV with columns practice_id, b, u.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["practice_id", "b", "u"])?;
        for (id, t) in &self.practices {
            w.write_record([id.clone(), t.b.to_string(), t.u.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<ground truth writer>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

impl GeneratorConfig {
    /// A small configuration with every mechanism at a neutral setting.
    pub fn new(seed: u64, n_practices: usize, patients: f64) -> Self {
        GeneratorConfig {
            seed,
            n_practices,
            patients_per_practice: PracticeSize {
                mean: patients,
                dispersion: 0.0,
            },
            intercept_sd: 0.0,
            slope_sd: 0.0,
            baseline: Baseline {
                shape: 1.2,
                scale: 120.0,
            },
            horizon: 10.0,
            random_censor_rate: 0.0,
            statin_rate: 0.0,
            other_death_rate: 0.0,
            coefficients: CoefficientSource::Default,
            factor_model: FactorModel::default(),
            missing: MissingConfig::default(),
            flip_prob: 0.0,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: GeneratorConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.n_practices == 0 {
            return cfg("n_practices must be >= 1".into());
        }
        let size = self.patients_per_practice;
        if !(size.mean >= 1.0 && size.mean.is_finite()) || !(size.dispersion >= 0.0 && size.dispersion.is_finite()) {
            return cfg("patients_per_practice needs mean >= 1 and dispersion >= 0".into());
        }
        if !(self.intercept_sd >= 0.0 && self.intercept_sd.is_finite()) {
            return cfg(format!("intercept_sd must be >= 0, got {}", self.intercept_sd));
        }
        if !(self.slope_sd >= 0.0 && self.slope_sd.is_finite()) {
            return cfg(format!("slope_sd must be >= 0, got {}", self.slope_sd));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return cfg(format!("horizon must be > 0, got {}", self.horizon));
        }
        let b = self.baseline;
        if !(b.shape > 0.0 && b.scale > 0.0 && b.shape.is_finite() && b.scale.is_finite()) {
            return cfg("baseline shape and scale must be > 0".into());
        }
        for (name, r) in [
            ("random_censor_rate", self.random_censor_rate),
            ("statin_rate", self.statin_rate),
            ("other_death_rate", self.other_death_rate),
        ] {
            if !(r >= 0.0 && r.is_finite()) {
                return cfg(format!("{name} must be >= 0, got {r}"));
            }
        }
        if !(0.0..=0.5).contains(&self.flip_prob) {
            return cfg(format!("flip_prob must be in [0, 0.5], got {}", self.flip_prob));
        }
        let fm = &self.factor_model;
        if !(0.0..=1.0).contains(&fm.female_fraction) {
            return cfg("female_fraction must be in [0,1]".into());
        }
        for (name, f) in [
            ("age", fm.age),
            ("sbp", fm.sbp),
            ("sbp_sd", fm.sbp_sd),
            ("bmi", fm.bmi),
            ("chol_hdl_ratio", fm.chol_hdl_ratio),
        ] {
            if !(f.sd >= 0.0 && f.practice_shift_sd >= 0.0 && f.min <= f.max) || !f.mean.is_finite() {
                return cfg(format!(
                    "factor '{name}': need sd >= 0, practice_shift_sd >= 0, min <= max"
                ));
            }
        }
        if fm.age.min < 25.0 || fm.age.max > 84.0 {
            return cfg("factor 'age': bounds must lie within [25, 84]".into());
        }
        for (name, f, levels) in [
            ("smoking", &fm.smoking, Smoking::ALL.len()),
            ("ethnicity", &fm.ethnicity, Ethnicity::ALL.len()),
            ("townsend", &fm.townsend, 5),
        ] {
            if f.probs.len() != levels || f.probs.iter().any(|p| !(*p >= 0.0)) || f.probs.iter().sum::<f64>() <= 0.0 {
                return cfg(format!("factor '{name}': need {levels} non-negative probabilities"));
            }
            if !(f.practice_shift_sd >= 0.0) {
                return cfg(format!("factor '{name}': practice_shift_sd must be >= 0"));
            }
        }
        for (name, p) in &fm.flags {
            if Condition::from_name(name).is_none() {
                return cfg(format!("unknown condition '{name}'"));
            }
            if !(0.0..=1.0).contains(p) {
                return cfg(format!("prevalence of '{name}' must be in [0,1]"));
            }
        }
        if !(fm.flag_shift_sd >= 0.0) {
            return cfg("flag_shift_sd must be >= 0".into());
        }
        for (name, r) in &self.missing.rates {
            match Variable::from_name(name) {
                Some(v) if v.is_imputable() => {}
                _ => return cfg(format!("'{name}' is not an imputable variable")),
            }
            match *r {
                RateConfig::Fixed { rate } if !(0.0..=1.0).contains(&rate) => {
                    return cfg(format!("missing rate for '{name}' must be in [0,1], got {rate}"))
                }
                RateConfig::Beta { alpha, beta } if !(alpha > 0.0 && beta > 0.0) => {
                    return cfg(format!("Beta parameters for '{name}' must be > 0"))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn practice_label(p: usize, n: usize) -> String {
    let width = n.to_string().len().max(4);
    format!("P{p:0width$}")
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn truncated(rng: &mut ChaCha8Rng, mean: f64, sd: f64, min: f64, max: f64) -> f64 {
    if sd == 0.0 {
        return mean.clamp(min, max);
    }
    for _ in 0..1000 {
        let x = mean + sd * normal(rng);
        if (min..=max).contains(&x) {
            return x;
        }
    }
    mean.clamp(min, max)
}

fn categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let total: f64 = probs.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (k, p) in probs.iter().enumerate() {
        if x < *p {
            return k;
        }
        x -= p;
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Shift a probability on the log-odds scale, keeping 0 and 1 fixed.
fn shift_prob(p: f64, shift: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        p
    } else {
        logistic((p / (1.0 - p)).ln() + shift)
    }
}

struct PracticeFactors {
    shifts: [f64; 5],
    smoking: Vec<f64>,
    ethnicity: Vec<f64>,
    townsend: Vec<f64>,
    flags: Vec<f64>,
}

fn practice_factors(rng: &mut ChaCha8Rng, fm: &FactorModel) -> PracticeFactors {
    let shifts = [
        fm.age.practice_shift_sd * normal(rng),
        fm.sbp.practice_shift_sd * normal(rng),
        fm.sbp_sd.practice_shift_sd * normal(rng),
        fm.bmi.practice_shift_sd * normal(rng),
        fm.chol_hdl_ratio.practice_shift_sd * normal(rng),
    ];
    let mut perturb = |f: &CategoricalFactor| -> Vec<f64> {
        f.probs
            .iter()
            .map(|p| p * (f.practice_shift_sd * normal(rng)).exp())
            .collect()
    };
    let smoking = perturb(&fm.smoking);
    let ethnicity = perturb(&fm.ethnicity);
    let townsend = perturb(&fm.townsend);
    let flags = Condition::ALL
        .iter()
        .map(|c| {
            let p = fm.flags.get(c.name()).copied().unwrap_or(0.0);
            shift_prob(p, fm.flag_shift_sd * normal(rng))
        })
        .collect();
    PracticeFactors {
        shifts,
        smoking,
        ethnicity,
        townsend,
        flags,
    }
}

fn draw_patient(
    rng: &mut ChaCha8Rng,
    fm: &FactorModel,
    pf: &PracticeFactors,
    patient_id: String,
    practice_id: &str,
) -> PatientRecord {
    let sex = if rng.random::<f64>() < fm.female_fraction {
        Sex::Female
    } else {
        Sex::Male
    };
    let cont = |rng: &mut ChaCha8Rng, f: &ContinuousFactor, shift: f64, age: f64| {
        truncated(rng, f.mean + shift + f.age_slope * (age - 50.0), f.sd, f.min, f.max)
    };
    let age = cont(rng, &fm.age, pf.shifts[0], 50.0);
    let sbp = cont(rng, &fm.sbp, pf.shifts[1], age);
    let sbp_sd = cont(rng, &fm.sbp_sd, pf.shifts[2], age);
    let bmi = cont(rng, &fm.bmi, pf.shifts[3], age);
    let chol = cont(rng, &fm.chol_hdl_ratio, pf.shifts[4], age);
    let smoking = Smoking::ALL[categorical(rng, &pf.smoking)];
    let ethnicity = Ethnicity::ALL[categorical(rng, &pf.ethnicity)];
    let townsend = categorical(rng, &pf.townsend) as u8 + 1;
    let mut conditions = ConditionFlags::default();
    for (k, &c) in Condition::ALL.iter().enumerate() {
        let u: f64 = rng.random();
        let applies = !(c == Condition::ErectileDysfunction && sex == Sex::Female);
        conditions.set(c, applies && u < pf.flags[k]);
    }
    PatientRecord {
        patient_id,
        practice_id: practice_id.to_string(),
        sex,
        age,
        sbp: Some(sbp),
        sbp_sd: Some(sbp_sd),
        bmi: Some(bmi),
        chol_hdl_ratio: Some(chol),
        smoking: Some(smoking),
        ethnicity: Some(ethnicity),
        townsend: Some(townsend),
        conditions,
        follow_up_years: 0.0,
        event: false,
        censor_reason: crate::cohort::CensorReason::StudyEnd,
    }
}

fn practice_size(cfg: &GeneratorConfig, p: usize) -> usize {
    let PracticeSize { mean, dispersion } = cfg.patients_per_practice;
    if dispersion == 0.0 {
        return mean.round().max(1.0) as usize;
    }
    let mut rng = stream(cfg.seed, Stream::PracticeSize, p as u64);
    let shape = 1.0 / (dispersion * dispersion);
    let gamma = Gamma::new(shape, mean / shape).expect("validated parameters");
    (gamma.sample(&mut rng).round() as usize).max(1)
}

fn lp_or_generation_error(rec: &PatientRecord, table: &CoefficientTable) -> Result<f64> {
    let blame = |rec: &PatientRecord| {
        let factor = table
            .model(rec.sex)
            .terms
            .iter()
            .find(|t| t.contribution(rec).is_err())
            .map(|t| t.variable().name().to_string())
            .unwrap_or_else(|| "linear predictor".into());
        Error::Generation {
            practice: rec.practice_id.clone(),
            factor,
        }
    };
    match linear_predictor(rec, table) {
        Ok(lp) if lp.is_finite() => Ok(lp),
        _ => Err(blame(rec)),
    }
}

fn exp_time(rng: &mut ChaCha8Rng, rate: f64) -> Option<f64> {
    let e: f64 = Exp1.sample(rng);
    (rate > 0.0).then(|| e / rate)
}

fn generate_practice(
    cfg: &GeneratorConfig,
    table: &CoefficientTable,
    p: usize,
) -> Result<(String, PracticeTruth, Vec<PatientRecord>)> {
    let id = practice_label(p, cfg.n_practices);
    let unit = p as u64;
    let mut eff_rng = stream(cfg.seed, Stream::Effects, unit);
    let b = cfg.intercept_sd * normal(&mut eff_rng);
    let u = cfg.slope_sd * normal(&mut eff_rng);

    let n = practice_size(cfg, p);
    let mut fac_rng = stream(cfg.seed, Stream::Factors, unit);
    let mut surv_rng = stream(cfg.seed, Stream::Survival, unit);
    let mut cens_rng = stream(cfg.seed, Stream::Censoring, unit);
    let pf = practice_factors(&mut fac_rng, &cfg.factor_model);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let mut rec = draw_patient(&mut fac_rng, &cfg.factor_model, &pf, format!("{id}-{i:05}"), &id);
        let lp = lp_or_generation_error(&rec, table)?;
        let m = ((1.0 + u) * lp + b).exp();
        if !(m.is_finite() && m > 0.0) {
            return Err(Error::Generation {
                practice: id,
                factor: "linear predictor".into(),
            });
        }
        let e: f64 = Exp1.sample(&mut surv_rng);
        let cvd = cfg.baseline.inverse(e, m);
        let candidates = CensoringCandidates {
            cvd: Some(cvd),
            deregistration: exp_time(&mut cens_rng, cfg.random_censor_rate),
            statin: exp_time(&mut cens_rng, cfg.statin_rate),
            other_death: exp_time(&mut cens_rng, cfg.other_death_rate),
            horizon: Some(cfg.horizon),
        };
        let out = resolve_censoring(&candidates)?;
        // Exponential draws of exactly zero have probability zero; guard anyway.
        rec.follow_up_years = out.follow_up_years.max(f64::MIN_POSITIVE);
        rec.event = out.event;
        rec.censor_reason = out.censor_reason;
        records.push(rec);
    }
    Ok((id, PracticeTruth { b, u }, records))
}

/// Per-practice missingness rates for every configured variable.
fn realise_rates(cfg: &GeneratorConfig) -> MissingRates {
    let ids: Vec<String> = (0..cfg.n_practices)
        .map(|p| practice_label(p, cfg.n_practices))
        .collect();
    let mut out = MissingRates::new();
    for (k, (name, rc)) in cfg.missing.rates.iter().enumerate() {
        let var = Variable::from_name(name).expect("validated variable");
        let spec = match *rc {
            RateConfig::Fixed { rate } => RateSpec::Uniform(rate),
            RateConfig::Beta { alpha, beta } => {
                let dist = Beta::new(alpha, beta).expect("validated parameters");
                // Rate draws use their own block of the missingness stream.
                let mut rng = stream(cfg.seed, Stream::Missingness, (1 << 36) + k as u64);
                RateSpec::PerPractice(ids.iter().map(|id| (id.clone(), dist.sample(&mut rng))).collect())
            }
        };
        out.insert(var, spec);
    }
    out
}

/// Generate a cohort and the practice effects it embeds. Deterministic for
/// a fixed config.
pub fn generate(cfg: &GeneratorConfig) -> Result<(Cohort, GroundTruth)> {
    cfg.validate()?;
    let table = cfg.coefficients.load()?;
    let parts: Vec<Result<(String, PracticeTruth, Vec<PatientRecord>)>> =
        crate::par::map_indexed(cfg.n_practices, |p| generate_practice(cfg, &table, p));
    let mut practices = BTreeMap::new();
    let mut records = Vec::new();
    for part in parts {
        let (id, truth, recs) = part?;
        practices.insert(id, truth);
        records.extend(recs);
    }
    let mut cohort = Cohort::new(records);
    let missing_rates = realise_rates(cfg);
    if !missing_rates.is_empty() {
        cohort = inject_missingness(&cohort, &missing_rates, cfg.missing.mechanism, cfg.seed)?;
    }
    if cfg.flip_prob > 0.0 {
        cohort = inject_misclassification(&cohort, cfg.flip_prob, cfg.seed)?;
    }
    Ok((
        cohort,
        GroundTruth {
            practices,
            table,
            baseline: cfg.baseline,
            missing_rates,
        },
    ))
}

/// Blank each listed variable independently with its practice-specific rate.
/// Practice `k` (in sorted id order) and variable `v` draw from their own
/// stream, one uniform per record in cohort order.
pub fn inject_missingness(cohort: &Cohort, rates: &MissingRates, mechanism: Mechanism, seed: u64) -> Result<Cohort> {
    for (var, spec) in rates {
        if !var.is_imputable() {
            return Err(Error::Config(format!("'{var}' is not an imputable variable")));
        }
        spec.check(*var)?;
    }
    let mut records = cohort.records().to_vec();
    for (k, (practice, idx)) in cohort.practice_index().iter().enumerate() {
        for (var, spec) in rates {
            let rate = spec.rate(practice);
            let var_pos = Variable::IMPUTABLE.iter().position(|v| v == var).expect("imputable") as u64;
            let mut rng = stream(seed, Stream::Missingness, ((k as u64) << 4) | var_pos);
            for &i in idx {
                let draw: f64 = rng.random();
                let p = match mechanism {
                    Mechanism::Mcar => rate,
                    Mechanism::MarAge => shift_prob(rate, MAR_AGE_LOGIT_PER_YEAR * (records[i].age - 50.0)),
                };
                if draw < p {
                    records[i].set_value(*var, None)?;
                }
            }
        }
    }
    Ok(Cohort::new(records))
}

/// Flip every condition flag independently with probability `flip_prob`.
pub fn inject_misclassification(cohort: &Cohort, flip_prob: f64, seed: u64) -> Result<Cohort> {
    if !(0.0..=0.5).contains(&flip_prob) {
        return Err(Error::Config(format!("flip_prob must be in [0, 0.5], got {flip_prob}")));
    }
    let mut records = cohort.records().to_vec();
    for (k, idx) in cohort.practice_index().values().enumerate() {
        let mut rng = stream(seed, Stream::Flips, k as u64);
        for &i in idx {
            for c in Condition::ALL {
                let draw: f64 = rng.random();
                if draw < flip_prob {
                    let v = records[i].conditions.get(c);
                    records[i].conditions.set(c, !v);
                }
            }
        }
    }
    Ok(Cohort::new(records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn practice_labels_are_sortable() {
        assert_eq!(practice_label(7, 200), "P0007");
        assert_eq!(practice_label(7, 20000), "P00007");
    }

    #[test]
    fn shift_prob_keeps_endpoints() {
        assert_eq!(shift_prob(0.0, 3.0), 0.0);
        assert_eq!(shift_prob(1.0, -3.0), 1.0);
        assert!((shift_prob(0.5, 0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn weibull_inverse_round_trips() {
        let b = Baseline {
            shape: 1.7,
            scale: 30.0,
        };
        let t = b.inverse(0.4, 2.0);
        assert!((b.cumulative_hazard(t) * 2.0 - 0.4).abs() < 1e-12);
    }

    #[test]
    fn config_toml_round_trip() {
        let mut cfg = GeneratorConfig::new(5, 3, 10.0);
        cfg.missing
            .rates
            .insert("bmi".into(), RateConfig::Beta { alpha: 2.0, beta: 5.0 });
        cfg.missing.rates.insert("sbp".into(), RateConfig::Fixed { rate: 0.1 });
        let back = GeneratorConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }
}
