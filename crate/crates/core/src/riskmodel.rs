//! Per-sex linear-predictor evaluation with a closed transform registry.
//!
//! Coefficient file schema (CSV, header required):
//!
//! ```text
//! sex,kind,variable,transform,centering,level,coefficient
//! female,baseline,,,,,0.988
//! female,continuous,age,identity,50,,0.075
//! female,categorical,smoking,,,3,0.6
//! female,interaction,type2_diabetes,identity,50,,-0.01
//! ```
//!
//! * `continuous`: `coefficient * (transform(value) - centering)`.
//! * `categorical`: `coefficient` when the value equals `level`; unlisted
//!   levels contribute 0 and at least one level must be a zero reference.
//! * `interaction`: `coefficient * (transform(age) - centering) * factor`, where
//!   the factor is the flag (0/1), the indicator of `level` for a categorical
//!   variable, or the raw value of a continuous one.
//! * `baseline`: 10-year baseline survival for the sex, in `coefficient`.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::cohort::{PatientRecord, Sex, Variable, VariableKind};
use crate::error::{Error, Result};
use crate::survival::predict_risk;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    Identity,
    Ln,
    /// `x^p`.
    Pow(f64),
    /// `x^p * ln(x)`.
    PowLn(f64),
}

const POWERS: [f64; 7] = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0, 3.0];

impl Transform {
    /// Every id in the registry.
    pub fn registry() -> Vec<Transform> {
        let mut v = vec![Transform::Identity, Transform::Ln];
        v.extend(POWERS.iter().map(|&p| Transform::Pow(p)));
        v.extend(POWERS.iter().map(|&p| Transform::PowLn(p)));
        v
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::Ln => x.ln(),
            Transform::Pow(p) => pow(x, p),
            Transform::PowLn(p) => pow(x, p) * x.ln(),
        }
    }

    pub fn id(self) -> String {
        self.to_string()
    }
}

fn pow(x: f64, p: f64) -> f64 {
    if p == 0.5 {
        x.sqrt()
    } else if p == -0.5 {
        1.0 / x.sqrt()
    } else if p.fract() == 0.0 {
        x.powi(p as i32)
    } else {
        x.powf(p)
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Identity => f.write_str("identity"),
            Transform::Ln => f.write_str("ln"),
            Transform::Pow(p) => write!(f, "p{p}"),
            Transform::PowLn(p) => write!(f, "p{p}ln"),
        }
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Transform::registry()
            .into_iter()
            .find(|t| t.id() == s)
            .ok_or_else(|| Error::Schema(format!("unknown transform '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    Continuous {
        variable: Variable,
        transform: Transform,
        centering: f64,
        coefficient: f64,
    },
    Categorical {
        variable: Variable,
        level: u8,
        coefficient: f64,
    },
    Interaction {
        factor: Variable,
        level: Option<u8>,
        age_transform: Transform,
        age_centering: f64,
        coefficient: f64,
    },
}

impl Term {
    /// This term's contribution to the linear predictor.
    pub fn contribution(&self, record: &PatientRecord) -> Result<f64> {
        let get = |v: Variable| {
            record
                .value(v)
                .ok_or_else(|| Error::Contract(format!("missing value for '{v}' in patient {}", record.patient_id)))
        };
        let out = match *self {
            Term::Continuous {
                variable,
                transform,
                centering,
                coefficient,
            } => coefficient * (transform.apply(get(variable)?) - centering),
            Term::Categorical {
                variable,
                level,
                coefficient,
            } => {
                if get(variable)? == level as f64 {
                    coefficient
                } else {
                    0.0
                }
            }
            Term::Interaction {
                factor,
                level,
                age_transform,
                age_centering,
                coefficient,
            } => {
                let x = get(factor)?;
                let f = match level {
                    Some(l) => (x == l as f64) as u8 as f64,
                    None => x,
                };
                coefficient * (age_transform.apply(record.age) - age_centering) * f
            }
        };
        if !out.is_finite() {
            return Err(Error::Contract(format!(
                "non-finite contribution from '{}' in patient {}",
                self.variable(),
                record.patient_id
            )));
        }
        Ok(out)
    }

    /// The variable the term is keyed on.
    pub fn variable(&self) -> Variable {
        match *self {
            Term::Continuous { variable, .. } | Term::Categorical { variable, .. } => variable,
            Term::Interaction { factor, .. } => factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SexModel {
    pub terms: Vec<Term>,
    pub baseline_survival_10y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTable {
    pub female: SexModel,
    pub male: SexModel,
}

impl CoefficientTable {
    pub fn new(female: SexModel, male: SexModel) -> Result<Self> {
        let table = CoefficientTable { female, male };
        table.validate()?;
        Ok(table)
    }

    pub fn model(&self, sex: Sex) -> &SexModel {
        match sex {
            Sex::Female => &self.female,
            Sex::Male => &self.male,
        }
    }

    /// Every variable some term of either sex reads.
    pub fn referenced_variables(&self) -> BTreeSet<Variable> {
        let mut out = BTreeSet::new();
        for m in [&self.female, &self.male] {
            for t in &m.terms {
                out.insert(t.variable());
                if matches!(t, Term::Interaction { .. }) {
                    out.insert(Variable::Age);
                }
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        for sex in Sex::ALL {
            let m = self.model(sex);
            let s0 = m.baseline_survival_10y;
            if !(s0 > 0.0 && s0 < 1.0) {
                return Err(Error::Schema(format!(
                    "{sex}: baseline_survival_10y must be in (0,1), got {s0}"
                )));
            }
            let mut keys = BTreeSet::new();
            for t in &m.terms {
                let key = match t {
                    Term::Continuous {
                        variable, transform, ..
                    } => format!("continuous:{variable}:{transform}"),
                    Term::Categorical { variable, level, .. } => format!("categorical:{variable}:{level}"),
                    Term::Interaction {
                        factor,
                        level,
                        age_transform,
                        ..
                    } => format!("interaction:{factor}:{level:?}:{age_transform}"),
                };
                if !keys.insert(key) {
                    return Err(Error::Schema(format!("{sex}: duplicate term for '{}'", t.variable())));
                }
                match *t {
                    Term::Categorical { variable, level, .. } => check_level(variable, level)?,
                    Term::Interaction {
                        factor, level: Some(l), ..
                    } => check_level(factor, l)?,
                    Term::Interaction {
                        factor, level: None, ..
                    } => {
                        if matches!(factor.kind(), VariableKind::Categorical(_)) {
                            return Err(Error::Schema(format!(
                                "interaction with categorical '{factor}' needs a level"
                            )));
                        }
                    }
                    _ => {}
                }
            }
            // Every categorical variable needs a zero-coefficient reference level.
            let cat_vars: BTreeSet<Variable> = m
                .terms
                .iter()
                .filter_map(|t| match t {
                    Term::Categorical { variable, .. } => Some(*variable),
                    _ => None,
                })
                .collect();
            for v in cat_vars {
                let domain = levels_of(v).unwrap_or_default();
                let has_reference = domain.iter().any(|&l| {
                    !m.terms.iter().any(|t| {
                        matches!(t, Term::Categorical { variable, level, coefficient }
                            if *variable == v && *level == l && *coefficient != 0.0)
                    })
                });
                if !has_reference {
                    return Err(Error::Schema(format!(
                        "{sex}: categorical '{v}' has no zero-coefficient reference level"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn levels_of(v: Variable) -> Option<Vec<u8>> {
    match v.kind() {
        VariableKind::Categorical(levels) => Some(levels.to_vec()),
        VariableKind::Binary => Some(vec![0, 1]),
        VariableKind::Continuous => None,
    }
}

fn check_level(v: Variable, level: u8) -> Result<()> {
    match levels_of(v) {
        None => Err(Error::Schema(format!("'{v}' is continuous and has no levels"))),
        Some(levels) if !levels.contains(&level) => Err(Error::Schema(format!("unknown level {level} for '{v}'"))),
        Some(_) => Ok(()),
    }
}

/// Sum of all term contributions for the record's sex.
pub fn linear_predictor(record: &PatientRecord, table: &CoefficientTable) -> Result<f64> {
    table
        .model(record.sex)
        .terms
        .iter()
        .try_fold(0.0, |acc, t| Ok(acc + t.contribution(record)?))
}

/// Ten-year risk from a linear predictor: `1 - S0^exp(lp)`.
pub fn risk_from_lp(lp: f64, table: &CoefficientTable, sex: Sex) -> f64 {
    predict_risk(lp, 0.0, table.model(sex).baseline_survival_10y)
}

const HEADER: [&str; 7] = [
    "sex",
    "kind",
    "variable",
    "transform",
    "centering",
    "level",
    "coefficient",
];

pub fn load_coefficients(path: impl AsRef<Path>) -> Result<CoefficientTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_coefficients(file)
}

pub fn read_coefficients<R: Read>(reader: R) -> Result<CoefficientTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
    };
    let idx: Vec<usize> = HEADER.iter().map(|h| col(h)).collect::<Result<_>>()?;

    let mut terms: [Vec<Term>; 2] = [Vec::new(), Vec::new()];
    let mut baseline: [Option<f64>; 2] = [None, None];
    for (n, row) in rdr.records().enumerate() {
        let row = row?;
        let row_no = n + 1;
        let cell = |i: usize| row.get(idx[i]).unwrap_or("");
        let row_err = |m: String| Error::Row {
            row: row_no,
            message: m,
        };
        let sex: Sex = cell(0).parse().map_err(row_err)?;
        let slot = sex as usize;
        let number = |i: usize| -> Result<f64> {
            cell(i).parse::<f64>().map_err(|_| Error::Row {
                row: row_no,
                message: format!("cannot parse {} '{}'", HEADER[i], cell(i)),
            })
        };
        let variable =
            || Variable::from_name(cell(2)).ok_or_else(|| Error::Schema(format!("unknown variable '{}'", cell(2))));
        let level = || -> Result<u8> {
            cell(5)
                .parse::<u8>()
                .map_err(|_| Error::Schema(format!("unknown level '{}' for '{}'", cell(5), cell(2))))
        };
        match cell(1) {
            "baseline" => {
                if baseline[slot].replace(number(6)?).is_some() {
                    return Err(Error::Schema(format!("{sex}: duplicate baseline row")));
                }
            }
            "continuous" => terms[slot].push(Term::Continuous {
                variable: variable()?,
                transform: cell(3).parse()?,
                centering: number(4)?,
                coefficient: number(6)?,
            }),
            "categorical" => terms[slot].push(Term::Categorical {
                variable: variable()?,
                level: level()?,
                coefficient: number(6)?,
            }),
            "interaction" => terms[slot].push(Term::Interaction {
                factor: variable()?,
                level: if cell(5).is_empty() { None } else { Some(level()?) },
                age_transform: cell(3).parse()?,
                age_centering: number(4)?,
                coefficient: number(6)?,
            }),
            other => return Err(Error::Schema(format!("unknown term kind '{other}'"))),
        }
    }
    let [female_terms, male_terms] = terms;
    let s0 = |i: usize| baseline[i].ok_or_else(|| Error::Schema(format!("{}: missing baseline row", Sex::ALL[i])));
    CoefficientTable::new(
        SexModel {
            terms: female_terms,
            baseline_survival_10y: s0(0)?,
        },
        SexModel {
            terms: male_terms,
            baseline_survival_10y: s0(1)?,
        },
    )
}

pub fn write_coefficients<W: Write>(writer: W, table: &CoefficientTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HEADER)?;
    for sex in Sex::ALL {
        let m = table.model(sex);
        let s = sex.as_str();
        w.write_record([s, "baseline", "", "", "", "", &m.baseline_survival_10y.to_string()])?;
        for t in &m.terms {
            let row: [String; 7] = match t {
                Term::Continuous {
                    variable,
                    transform,
                    centering,
                    coefficient,
                } => [
                    s.into(),
                    "continuous".into(),
                    variable.to_string(),
                    transform.id(),
                    centering.to_string(),
                    String::new(),
                    coefficient.to_string(),
                ],
                Term::Categorical {
                    variable,
                    level,
                    coefficient,
                } => [
                    s.into(),
                    "categorical".into(),
                    variable.to_string(),
                    String::new(),
                    String::new(),
                    level.to_string(),
                    coefficient.to_string(),
                ],
                Term::Interaction {
                    factor,
                    level,
                    age_transform,
                    age_centering,
                    coefficient,
                } => [
                    s.into(),
                    "interaction".into(),
                    factor.to_string(),
                    age_transform.id(),
                    age_centering.to_string(),
                    level.map(|l| l.to_string()).unwrap_or_default(),
                    coefficient.to_string(),
                ],
            };
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io("<coefficient writer>", e))?;
    Ok(())
}

pub fn save_coefficients(path: impl AsRef<Path>, table: &CoefficientTable) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_coefficients(file, table)
}

/// A synthetic table with plausible magnitudes. It is not a published
/// clinical model and must not be used as one.
pub fn default_table() -> CoefficientTable {
    use crate::cohort::Condition::*;
    use Variable::*;

    fn cont(variable: Variable, centering: f64, coefficient: f64) -> Term {
        Term::Continuous {
            variable,
            transform: Transform::Identity,
            centering,
            coefficient,
        }
    }
    fn cat(variable: Variable, level: u8, coefficient: f64) -> Term {
        Term::Categorical {
            variable,
            level,
            coefficient,
        }
    }

    let shared = |age_coef: f64| {
        let mut t = vec![
            cont(Age, 50.0, age_coef),
            cont(Sbp, 125.0, 0.012),
            cont(SbpSd, 9.0, 0.01),
            cont(Bmi, 27.0, 0.02),
            cont(CholHdlRatio, 4.0, 0.15),
            cat(Smoking, 1, 0.15),
            cat(Smoking, 2, 0.5),
            cat(Smoking, 3, 0.6),
            cat(Smoking, 4, 0.75),
            cat(Ethnicity, 2, 0.3),
            cat(Ethnicity, 3, 0.5),
            cat(Ethnicity, 4, 0.4),
            cat(Ethnicity, 6, -0.2),
            cat(Ethnicity, 7, -0.3),
            cat(Ethnicity, 8, -0.4),
            cat(Townsend, 2, 0.05),
            cat(Townsend, 3, 0.1),
            cat(Townsend, 4, 0.15),
            cat(Townsend, 5, 0.25),
        ];
        for (c, b) in [
            (AtrialFibrillation, 0.9),
            (ChronicKidneyDisease, 0.5),
            (FamilyHistoryChdLt60, 0.45),
            (Migraines, 0.2),
            (RheumatoidArthritis, 0.25),
            (Sle, 0.5),
            (SevereMentalIllness, 0.15),
            (Type1Diabetes, 1.2),
            (Type2Diabetes, 0.6),
            (BpTreatment, 0.5),
            (AtypicalAntipsychotic, 0.2),
            (RegularSteroids, 0.3),
        ] {
            t.push(cat(Flag(c), 1, b));
        }
        t.push(Term::Interaction {
            factor: Flag(Type2Diabetes),
            level: None,
            age_transform: Transform::Identity,
            age_centering: 50.0,
            coefficient: -0.01,
        });
        t
    };

    let female = SexModel {
        terms: shared(0.075),
        baseline_survival_10y: 0.988,
    };
    let mut male_terms = shared(0.065);
    male_terms.push(cat(Flag(ErectileDysfunction), 1, 0.2));
    let male = SexModel {
        terms: male_terms,
        baseline_survival_10y: 0.977,
    };
    CoefficientTable::new(female, male).expect("default table is valid")
}
