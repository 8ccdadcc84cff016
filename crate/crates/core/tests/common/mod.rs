#![allow(dead_code)]

use ehr_frailty::cohort::{CensorReason, ConditionFlags, Ethnicity, PatientRecord, Sex, Smoking};
use ehr_frailty::synthgen::GeneratorConfig;

/// A complete, valid record.
pub fn record(id: &str, practice: &str) -> PatientRecord {
    PatientRecord {
        patient_id: id.into(),
        practice_id: practice.into(),
        sex: Sex::Female,
        age: 50.0,
        sbp: Some(125.0),
        sbp_sd: Some(8.0),
        bmi: Some(26.0),
        chol_hdl_ratio: Some(4.0),
        smoking: Some(Smoking::NonSmoker),
        ethnicity: Some(Ethnicity::ALL[0]),
        townsend: Some(3),
        conditions: ConditionFlags::default(),
        follow_up_years: 5.0,
        event: false,
        censor_reason: CensorReason::StudyEnd,
    }
}

/// Generator settings with a fixed event-rich baseline and no censoring
/// competitors.
pub fn config(seed: u64, practices: usize, patients: f64, intercept_sd: f64, slope_sd: f64) -> GeneratorConfig {
    let mut cfg = GeneratorConfig::new(seed, practices, patients);
    cfg.intercept_sd = intercept_sd;
    cfg.slope_sd = slope_sd;
    cfg
}
