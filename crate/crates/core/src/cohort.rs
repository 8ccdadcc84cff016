//! Multi-practice cohort data model, CSV ingestion, eligibility screening and
//! censoring semantics.
//!
//! Missing values are `None` in memory and empty cells on disk. There is no
//! numeric sentinel anywhere.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub const ALL: [Sex; 2] = [Sex::Female, Sex::Male];

    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Female => "female",
            Sex::Male => "male",
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sex {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "female" | "f" => Ok(Sex::Female),
            "male" | "m" => Ok(Sex::Male),
            other => Err(format!("unknown sex '{other}'")),
        }
    }
}

/// Five-level smoking status, coded 0..=4 on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Smoking {
    NonSmoker = 0,
    ExSmoker = 1,
    Light = 2,
    Moderate = 3,
    Heavy = 4,
}

impl Smoking {
    pub const ALL: [Smoking; 5] = [
        Smoking::NonSmoker,
        Smoking::ExSmoker,
        Smoking::Light,
        Smoking::Moderate,
        Smoking::Heavy,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

/// Nine-level self-assigned ethnicity, coded 1..=9 on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Ethnicity {
    White = 1,
    Indian = 2,
    Pakistani = 3,
    Bangladeshi = 4,
    OtherAsian = 5,
    BlackCaribbean = 6,
    BlackAfrican = 7,
    Chinese = 8,
    Other = 9,
}

impl Ethnicity {
    pub const ALL: [Ethnicity; 9] = [
        Ethnicity::White,
        Ethnicity::Indian,
        Ethnicity::Pakistani,
        Ethnicity::Bangladeshi,
        Ethnicity::OtherAsian,
        Ethnicity::BlackCaribbean,
        Ethnicity::BlackAfrican,
        Ethnicity::Chinese,
        Ethnicity::Other,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        code.checked_sub(1).and_then(|i| Self::ALL.get(i as usize).copied())
    }
}

/// Coded clinical conditions. Absence of a code means `false`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Condition {
    AtrialFibrillation,
    ChronicKidneyDisease,
    ErectileDysfunction,
    FamilyHistoryChdLt60,
    Migraines,
    RheumatoidArthritis,
    Sle,
    SevereMentalIllness,
    Type1Diabetes,
    Type2Diabetes,
    BpTreatment,
    AtypicalAntipsychotic,
    RegularSteroids,
}

impl Condition {
    pub const COUNT: usize = 13;
    pub const ALL: [Condition; Self::COUNT] = [
        Condition::AtrialFibrillation,
        Condition::ChronicKidneyDisease,
        Condition::ErectileDysfunction,
        Condition::FamilyHistoryChdLt60,
        Condition::Migraines,
        Condition::RheumatoidArthritis,
        Condition::Sle,
        Condition::SevereMentalIllness,
        Condition::Type1Diabetes,
        Condition::Type2Diabetes,
        Condition::BpTreatment,
        Condition::AtypicalAntipsychotic,
        Condition::RegularSteroids,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::AtrialFibrillation => "atrial_fibrillation",
            Condition::ChronicKidneyDisease => "chronic_kidney_disease",
            Condition::ErectileDysfunction => "erectile_dysfunction",
            Condition::FamilyHistoryChdLt60 => "family_history_chd_lt60",
            Condition::Migraines => "migraines",
            Condition::RheumatoidArthritis => "rheumatoid_arthritis",
            Condition::Sle => "sle",
            Condition::SevereMentalIllness => "severe_mental_illness",
            Condition::Type1Diabetes => "type1_diabetes",
            Condition::Type2Diabetes => "type2_diabetes",
            Condition::BpTreatment => "bp_treatment",
            Condition::AtypicalAntipsychotic => "atypical_antipsychotic",
            Condition::RegularSteroids => "regular_steroids",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.name() == name)
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ConditionFlags([bool; Condition::COUNT]);

impl ConditionFlags {
    pub fn get(&self, c: Condition) -> bool {
        self.0[c.index()]
    }

    pub fn set(&mut self, c: Condition, value: bool) {
        self.0[c.index()] = value;
    }

    pub fn with(mut self, c: Condition) -> Self {
        self.set(c, true);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CensorReason {
    CvdEvent,
    StatinStart,
    Deregistration,
    OtherDeath,
    StudyEnd,
}

impl CensorReason {
    pub fn as_str(self) -> &'static str {
        match self {
            CensorReason::CvdEvent => "cvd_event",
            CensorReason::StatinStart => "statin_start",
            CensorReason::Deregistration => "deregistration",
            CensorReason::OtherDeath => "other_death",
            CensorReason::StudyEnd => "study_end",
        }
    }
}

impl FromStr for CensorReason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "cvd_event" => Ok(CensorReason::CvdEvent),
            "statin_start" => Ok(CensorReason::StatinStart),
            "deregistration" => Ok(CensorReason::Deregistration),
            "other_death" => Ok(CensorReason::OtherDeath),
            "study_end" => Ok(CensorReason::StudyEnd),
            other => Err(format!("unknown censor_reason '{other}'")),
        }
    }
}

/// Every per-patient quantity the analyses can reference by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variable {
    Age,
    Sbp,
    SbpSd,
    Bmi,
    CholHdlRatio,
    Smoking,
    Ethnicity,
    Townsend,
    Flag(Condition),
}

/// How a variable is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariableKind {
    Continuous,
    /// Integer-coded categories.
    Categorical(&'static [u8]),
    Binary,
}

const SMOKING_LEVELS: [u8; 5] = [0, 1, 2, 3, 4];
const ETHNICITY_LEVELS: [u8; 9] = [1, 2, 3, 4, 5, 6, 7, 8, 9];
const TOWNSEND_LEVELS: [u8; 5] = [1, 2, 3, 4, 5];

impl Variable {
    /// Fields that may be missing and are filled by imputation.
    pub const IMPUTABLE: [Variable; 7] = [
        Variable::Sbp,
        Variable::SbpSd,
        Variable::Bmi,
        Variable::CholHdlRatio,
        Variable::Smoking,
        Variable::Ethnicity,
        Variable::Townsend,
    ];

    pub fn all() -> Vec<Variable> {
        let mut v = vec![Variable::Age];
        v.extend(Self::IMPUTABLE);
        v.extend(Condition::ALL.iter().map(|&c| Variable::Flag(c)));
        v
    }

    pub fn name(self) -> &'static str {
        match self {
            Variable::Age => "age",
            Variable::Sbp => "sbp",
            Variable::SbpSd => "sbp_sd",
            Variable::Bmi => "bmi",
            Variable::CholHdlRatio => "chol_hdl_ratio",
            Variable::Smoking => "smoking",
            Variable::Ethnicity => "ethnicity",
            Variable::Townsend => "townsend",
            Variable::Flag(c) => c.name(),
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "age" => Some(Variable::Age),
            "sbp" => Some(Variable::Sbp),
            "sbp_sd" => Some(Variable::SbpSd),
            "bmi" => Some(Variable::Bmi),
            "chol_hdl_ratio" => Some(Variable::CholHdlRatio),
            "smoking" => Some(Variable::Smoking),
            "ethnicity" => Some(Variable::Ethnicity),
            "townsend" => Some(Variable::Townsend),
            other => Condition::from_name(other).map(Variable::Flag),
        }
    }

    pub fn kind(self) -> VariableKind {
        match self {
            Variable::Age | Variable::Sbp | Variable::SbpSd | Variable::Bmi | Variable::CholHdlRatio => {
                VariableKind::Continuous
            }
            Variable::Smoking => VariableKind::Categorical(&SMOKING_LEVELS),
            Variable::Ethnicity => VariableKind::Categorical(&ETHNICITY_LEVELS),
            Variable::Townsend => VariableKind::Categorical(&TOWNSEND_LEVELS),
            Variable::Flag(_) => VariableKind::Binary,
        }
    }

    pub fn is_imputable(self) -> bool {
        Self::IMPUTABLE.contains(&self)
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub practice_id: String,
    pub sex: Sex,
    pub age: f64,
    pub sbp: Option<f64>,
    pub sbp_sd: Option<f64>,
    pub bmi: Option<f64>,
    pub chol_hdl_ratio: Option<f64>,
    pub smoking: Option<Smoking>,
    pub ethnicity: Option<Ethnicity>,
    pub townsend: Option<u8>,
    pub conditions: ConditionFlags,
    pub follow_up_years: f64,
    pub event: bool,
    pub censor_reason: CensorReason,
}

impl PatientRecord {
    /// Numeric view of a variable: categories as their integer code, flags as 0/1.
    pub fn value(&self, var: Variable) -> Option<f64> {
        match var {
            Variable::Age => Some(self.age),
            Variable::Sbp => self.sbp,
            Variable::SbpSd => self.sbp_sd,
            Variable::Bmi => self.bmi,
            Variable::CholHdlRatio => self.chol_hdl_ratio,
            Variable::Smoking => self.smoking.map(|s| s.code() as f64),
            Variable::Ethnicity => self.ethnicity.map(|e| e.code() as f64),
            Variable::Townsend => self.townsend.map(f64::from),
            Variable::Flag(c) => Some(if self.conditions.get(c) { 1.0 } else { 0.0 }),
        }
    }

    /// Overwrite (or blank) a variable from its numeric view. Categorical
    /// codes must be valid; age and flags cannot be blanked.
    pub fn set_value(&mut self, var: Variable, value: Option<f64>) -> Result<()> {
        let bad = |v: f64| Error::Contract(format!("invalid value {v} for {var}"));
        match var {
            Variable::Age => self.age = value.ok_or_else(|| Error::Contract("age cannot be missing".into()))?,
            Variable::Sbp => self.sbp = value,
            Variable::SbpSd => self.sbp_sd = value,
            Variable::Bmi => self.bmi = value,
            Variable::CholHdlRatio => self.chol_hdl_ratio = value,
            Variable::Smoking => {
                self.smoking = match value {
                    None => None,
                    Some(v) => Some(code_of(v).and_then(Smoking::from_code).ok_or_else(|| bad(v))?),
                }
            }
            Variable::Ethnicity => {
                self.ethnicity = match value {
                    None => None,
                    Some(v) => Some(code_of(v).and_then(Ethnicity::from_code).ok_or_else(|| bad(v))?),
                }
            }
            Variable::Townsend => {
                self.townsend = match value {
                    None => None,
                    Some(v) => Some(code_of(v).filter(|c| (1..=5).contains(c)).ok_or_else(|| bad(v))?),
                }
            }
            Variable::Flag(c) => {
                let v = value.ok_or_else(|| Error::Contract(format!("flag {var} cannot be missing")))?;
                self.conditions.set(c, v != 0.0);
            }
        }
        Ok(())
    }

    pub fn missing_count(&self) -> usize {
        Variable::IMPUTABLE.iter().filter(|&&v| self.value(v).is_none()).count()
    }

    fn check_invariants(&self) -> std::result::Result<(), String> {
        if !(self.follow_up_years > 0.0) || !self.follow_up_years.is_finite() {
            return Err(format!("follow_up_years must be > 0, got {}", self.follow_up_years));
        }
        if self.event != (self.censor_reason == CensorReason::CvdEvent) {
            return Err("event must be 1 exactly when censor_reason is cvd_event".into());
        }
        if !self.age.is_finite() {
            return Err("age must be finite".into());
        }
        Ok(())
    }
}

fn code_of(v: f64) -> Option<u8> {
    (v.fract() == 0.0 && (0.0..=255.0).contains(&v)).then_some(v as u8)
}

/// An immutable collection of records with a practice index.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    records: Vec<PatientRecord>,
    practice_index: BTreeMap<String, Vec<usize>>,
}

impl Cohort {
    pub fn new(records: Vec<PatientRecord>) -> Self {
        let mut practice_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            practice_index.entry(r.practice_id.clone()).or_default().push(i);
        }
        Cohort {
            records,
            practice_index,
        }
    }

    pub fn records(&self) -> &[PatientRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<PatientRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn practice_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.practice_index
    }

    /// Practice ids in sorted order.
    pub fn practice_ids(&self) -> Vec<&str> {
        self.practice_index.keys().map(String::as_str).collect()
    }

    pub fn n_practices(&self) -> usize {
        self.practice_index.len()
    }

    /// Records of one practice, in cohort order.
    pub fn practice_records<'a>(&'a self, practice: &str) -> impl Iterator<Item = &'a PatientRecord> + 'a {
        self.practice_index
            .get(practice)
            .into_iter()
            .flatten()
            .map(move |&i| &self.records[i])
    }

    /// Sub-cohort of one sex.
    pub fn of_sex(&self, sex: Sex) -> Cohort {
        self.filter(|r| r.sex == sex)
    }

    pub fn filter(&self, keep: impl Fn(&PatientRecord) -> bool) -> Cohort {
        Cohort::new(self.records.iter().filter(|r| keep(r)).cloned().collect())
    }

    pub fn total_missing(&self) -> usize {
        self.records.iter().map(PatientRecord::missing_count).sum()
    }
}

/// Header names for each canonical cohort column. Defaults to the canonical
/// names; override entries to read files with different headers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortSchema {
    names: BTreeMap<String, String>,
}

impl Default for CohortSchema {
    fn default() -> Self {
        CohortSchema {
            names: canonical_columns().into_iter().map(|c| (c.clone(), c)).collect(),
        }
    }
}

impl CohortSchema {
    /// Map a canonical column to a different header name.
    pub fn rename(mut self, canonical: &str, header: &str) -> Result<Self> {
        match self.names.get_mut(canonical) {
            Some(h) => *h = header.to_string(),
            None => return Err(Error::Schema(format!("unknown canonical column '{canonical}'"))),
        }
        Ok(self)
    }

    fn header_for(&self, canonical: &str) -> &str {
        &self.names[canonical]
    }
}

/// Canonical column names, in the order the writer emits them.
pub fn canonical_columns() -> Vec<String> {
    let mut cols: Vec<String> = [
        "patient_id",
        "practice_id",
        "sex",
        "age",
        "sbp",
        "sbp_sd",
        "bmi",
        "chol_hdl_ratio",
        "smoking",
        "ethnicity",
        "townsend",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cols.extend(Condition::ALL.iter().map(|c| c.name().to_string()));
    cols.extend(
        ["follow_up_years", "event", "censor_reason"]
            .iter()
            .map(|s| s.to_string()),
    );
    cols
}

pub fn load_cohort(path: impl AsRef<Path>, schema: &CohortSchema) -> Result<Cohort> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_cohort(file, schema)
}

/// Parse a cohort from CSV. Row numbers in errors count data rows from 1.
pub fn read_cohort<R: Read>(reader: R, schema: &CohortSchema) -> Result<Cohort> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Input("no data rows".into()));
    }

    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, h) in headers.iter().enumerate() {
        if seen.insert(h, i).is_some() {
            return Err(Error::Schema(format!("duplicate column '{h}'")));
        }
    }
    let mut pos: BTreeMap<String, usize> = BTreeMap::new();
    for canonical in canonical_columns() {
        let header = schema.header_for(&canonical);
        match seen.get(header) {
            Some(&i) => {
                pos.insert(canonical, i);
            }
            None => return Err(Error::Schema(format!("missing column '{header}'"))),
        }
    }

    let mut records = Vec::new();
    for (n, row) in rdr.records().enumerate() {
        let row_no = n + 1;
        let row = row?;
        let cell = |name: &str| row.get(pos[name]).unwrap_or("");
        let rec = parse_row(&cell).map_err(|message| Error::Row { row: row_no, message })?;
        rec.check_invariants()
            .map_err(|message| Error::Row { row: row_no, message })?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::Input("no data rows".into()));
    }
    Ok(Cohort::new(records))
}

fn parse_row<'a>(cell: &dyn Fn(&str) -> &'a str) -> std::result::Result<PatientRecord, String> {
    fn required<'b>(cell: &dyn Fn(&str) -> &'b str, name: &str) -> std::result::Result<&'b str, String> {
        let v = cell(name);
        if v.is_empty() {
            Err(format!("column '{name}' must not be empty"))
        } else {
            Ok(v)
        }
    }
    fn num(name: &str, v: &str) -> std::result::Result<f64, String> {
        let x: f64 = v
            .parse()
            .map_err(|_| format!("column '{name}': cannot parse '{v}' as a number"))?;
        if x.is_finite() {
            Ok(x)
        } else {
            Err(format!("column '{name}': non-finite value '{v}'"))
        }
    }
    fn opt_num<'b>(cell: &dyn Fn(&str) -> &'b str, name: &str) -> std::result::Result<Option<f64>, String> {
        let v = cell(name);
        if v.is_empty() {
            Ok(None)
        } else {
            num(name, v).map(Some)
        }
    }
    fn opt_code<'b>(cell: &dyn Fn(&str) -> &'b str, name: &str) -> std::result::Result<Option<u8>, String> {
        let v = cell(name);
        if v.is_empty() {
            return Ok(None);
        }
        v.parse::<u8>()
            .map(Some)
            .map_err(|_| format!("column '{name}': cannot parse '{v}' as a category code"))
    }
    fn boolean(name: &str, v: &str) -> std::result::Result<bool, String> {
        match v {
            "0" | "false" => Ok(false),
            "1" | "true" => Ok(true),
            other => Err(format!("column '{name}': expected 0/1, got '{other}'")),
        }
    }

    let smoking = match opt_code(cell, "smoking")? {
        None => None,
        Some(c) => Some(Smoking::from_code(c).ok_or_else(|| format!("column 'smoking': invalid code {c}"))?),
    };
    let ethnicity = match opt_code(cell, "ethnicity")? {
        None => None,
        Some(c) => Some(Ethnicity::from_code(c).ok_or_else(|| format!("column 'ethnicity': invalid code {c}"))?),
    };
    let townsend = match opt_code(cell, "townsend")? {
        Some(c) if !(1..=5).contains(&c) => return Err(format!("column 'townsend': invalid quintile {c}")),
        t => t,
    };
    let mut conditions = ConditionFlags::default();
    for c in Condition::ALL {
        let v = cell(c.name());
        // Absent code means false.
        let flag = if v.is_empty() { false } else { boolean(c.name(), v)? };
        conditions.set(c, flag);
    }

    Ok(PatientRecord {
        patient_id: required(cell, "patient_id")?.to_string(),
        practice_id: required(cell, "practice_id")?.to_string(),
        sex: required(cell, "sex")?.parse()?,
        age: num("age", required(cell, "age")?)?,
        sbp: opt_num(cell, "sbp")?,
        sbp_sd: opt_num(cell, "sbp_sd")?,
        bmi: opt_num(cell, "bmi")?,
        chol_hdl_ratio: opt_num(cell, "chol_hdl_ratio")?,
        smoking,
        ethnicity,
        townsend,
        conditions,
        follow_up_years: num("follow_up_years", required(cell, "follow_up_years")?)?,
        event: boolean("event", required(cell, "event")?)?,
        censor_reason: required(cell, "censor_reason")?.parse()?,
    })
}

pub fn write_cohort<W: Write>(writer: W, cohort: &Cohort) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(canonical_columns())?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in cohort.records() {
        let mut row: Vec<String> = vec![
            r.patient_id.clone(),
            r.practice_id.clone(),
            r.sex.to_string(),
            r.age.to_string(),
            opt(r.sbp),
            opt(r.sbp_sd),
            opt(r.bmi),
            opt(r.chol_hdl_ratio),
            r.smoking.map(|s| s.code().to_string()).unwrap_or_default(),
            r.ethnicity.map(|e| e.code().to_string()).unwrap_or_default(),
            r.townsend.map(|t| t.to_string()).unwrap_or_default(),
        ];
        row.extend(
            Condition::ALL
                .iter()
                .map(|&c| if r.conditions.get(c) { "1" } else { "0" }.to_string()),
        );
        row.push(r.follow_up_years.to_string());
        row.push(if r.event { "1" } else { "0" }.to_string());
        row.push(r.censor_reason.as_str().to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<cohort writer>", e))?;
    Ok(())
}

pub fn save_cohort(path: impl AsRef<Path>, cohort: &Cohort) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_cohort(std::io::BufWriter::new(file), cohort)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EligibilityRules {
    pub min_age: f64,
    pub max_age: f64,
}

impl Default for EligibilityRules {
    fn default() -> Self {
        EligibilityRules {
            min_age: 25.0,
            max_age: 84.0,
        }
    }
}

/// A record before screening, carrying the history flags screening needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ScreeningCandidate {
    pub record: PatientRecord,
    pub prior_cvd: bool,
    pub prior_statin: bool,
}

impl From<PatientRecord> for ScreeningCandidate {
    fn from(record: PatientRecord) -> Self {
        ScreeningCandidate {
            record,
            prior_cvd: false,
            prior_statin: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ExclusionReason {
    AgeOutOfRange,
    PriorCvd,
    PriorStatin,
    /// Follow-up not positive or event/censor mismatch.
    InvalidRecord,
}

impl ExclusionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ExclusionReason::AgeOutOfRange => "age_out_of_range",
            ExclusionReason::PriorCvd => "prior_cvd",
            ExclusionReason::PriorStatin => "prior_statin",
            ExclusionReason::InvalidRecord => "invalid_record",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExclusionLog {
    pub excluded: Vec<(String, ExclusionReason)>,
    pub n_input: usize,
    pub n_retained: usize,
}

impl ExclusionLog {
    pub fn count(&self, reason: ExclusionReason) -> usize {
        self.excluded.iter().filter(|(_, r)| *r == reason).count()
    }

    pub fn is_empty(&self) -> bool {
        self.excluded.is_empty()
    }
}

/// Screen candidates. Each excluded record gets exactly one reason, checked in
/// the order age, prior CVD, prior statin, record validity.
pub fn apply_eligibility(
    candidates: impl IntoIterator<Item = ScreeningCandidate>,
    rules: &EligibilityRules,
) -> (Cohort, ExclusionLog) {
    let mut log = ExclusionLog::default();
    let mut kept = Vec::new();
    for c in candidates {
        log.n_input += 1;
        let age = c.record.age;
        let reason = if !(age >= rules.min_age && age <= rules.max_age) {
            Some(ExclusionReason::AgeOutOfRange)
        } else if c.prior_cvd {
            Some(ExclusionReason::PriorCvd)
        } else if c.prior_statin {
            Some(ExclusionReason::PriorStatin)
        } else if c.record.check_invariants().is_err() {
            Some(ExclusionReason::InvalidRecord)
        } else {
            None
        };
        match reason {
            Some(r) => log.excluded.push((c.record.patient_id, r)),
            None => kept.push(c.record),
        }
    }
    log.n_retained = kept.len();
    (Cohort::new(kept), log)
}

/// Candidate end-of-follow-up times, in years from the index date.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CensoringCandidates {
    pub cvd: Option<f64>,
    pub statin: Option<f64>,
    pub deregistration: Option<f64>,
    pub other_death: Option<f64>,
    pub horizon: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CensoringOutcome {
    pub follow_up_years: f64,
    pub event: bool,
    pub censor_reason: CensorReason,
}

/// Follow-up ends at the earliest candidate. Ties resolve as
/// cvd > statin > deregistration > other death > study end.
pub fn resolve_censoring(c: &CensoringCandidates) -> Result<CensoringOutcome> {
    let ordered = [
        (c.cvd, CensorReason::CvdEvent),
        (c.statin, CensorReason::StatinStart),
        (c.deregistration, CensorReason::Deregistration),
        (c.other_death, CensorReason::OtherDeath),
        (c.horizon, CensorReason::StudyEnd),
    ];
    let mut best: Option<(f64, CensorReason)> = None;
    for (t, reason) in ordered {
        let Some(t) = t else { continue };
        if !(t >= 0.0) {
            return Err(Error::Contract(format!(
                "{} time must be >= 0, got {t}",
                reason.as_str()
            )));
        }
        // Strict comparison keeps the higher-precedence cause on ties.
        if best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, reason));
        }
    }
    let (t, reason) = best.ok_or_else(|| Error::Contract("all censoring candidate times are absent".into()))?;
    Ok(CensoringOutcome {
        follow_up_years: t,
        event: reason == CensorReason::CvdEvent,
        censor_reason: reason,
    })
}
