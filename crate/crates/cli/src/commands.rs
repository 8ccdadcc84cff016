use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ehr_frailty::analysis::{
    frailty_quintiles, quintile_characteristics, risk_ranges, stability_frailty_table, write_correlations,
    write_plotdata, write_quintile_table, write_risk_ranges, RiskRange,
};
use ehr_frailty::cohort::{load_cohort, save_cohort, Cohort, CohortSchema, Sex, Variable};
use ehr_frailty::imputation::{impute, pool, ImputationConfig};
use ehr_frailty::riskmodel::{linear_predictor, CoefficientTable};
use ehr_frailty::rng::derive_seed;
use ehr_frailty::stability::{
    missingness_stability, multivariate_stability, variable_stability, write_reports, StabilityOptions, StabilityReport,
};
use ehr_frailty::survival::{
    adjust_risk, bootstrap_risk_ci, fit_random_intercept, fit_random_slope, simulate_random_effect_draws, DrawSpec,
    FrailtyOptions, SlopeOptions, SurvivalDataset, PERCENTILES,
};
use ehr_frailty::synthgen::{generate, CoefficientSource, GeneratorConfig};
use ehr_frailty::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::AnalysisSettings;
use crate::manifest::RunManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

/// State shared by the stages of one invocation.
pub struct Ctx {
    pub out_dir: PathBuf,
    pub format: Format,
    pub settings: AnalysisSettings,
    pub seed: u64,
    pub generator: Option<GeneratorConfig>,
    pub coefficients: CoefficientSource,
    pub manifest: RunManifest,
}

/// Continuous variables that enter the joint stability report.
const JOINT_VARIABLES: [Variable; 5] = [
    Variable::Age,
    Variable::Sbp,
    Variable::SbpSd,
    Variable::Bmi,
    Variable::CholHdlRatio,
];

/// z for the 2.5th/97.5th percentiles of a normal random effect.
const Z_975: f64 = 1.959963984540054;

impl Ctx {
    fn stage_seed(&mut self, stage: &str) -> u64 {
        let s = derive_seed(self.seed, stage);
        self.manifest.seeds.insert(stage.to_string(), s);
        s
    }

    fn path(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        Ok(self.out_dir.join(name))
    }

    fn table_path(&self, stem: &str) -> Result<PathBuf> {
        let ext = match self.format {
            Format::Csv => "csv",
            Format::Json => "json",
        };
        self.path(&format!("{stem}.{ext}"))
    }

    fn warn(&mut self, msg: String) {
        eprintln!("warning: {msg}");
        self.manifest.warnings.push(msg);
    }

    fn write_json<T: Serialize + ?Sized>(&mut self, path: &Path, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
        self.manifest.output(path)
    }

    /// Writes rows as CSV (through `csv_writer`) or as a JSON array.
    fn write_table<T: Serialize>(
        &mut self,
        stem: &str,
        rows: &[T],
        csv_writer: impl FnOnce(std::fs::File, &[T]) -> Result<()>,
    ) -> Result<PathBuf> {
        let path = self.table_path(stem)?;
        match self.format {
            Format::Csv => {
                let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                csv_writer(f, rows)?;
                self.manifest.output(&path)?;
            }
            Format::Json => self.write_json(&path, rows)?,
        }
        Ok(path)
    }
}

fn serde_csv<T: Serialize>(f: std::fs::File, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(f);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<table writer>", e))
}

fn read_cohort_file(ctx: &mut Ctx, path: &Path) -> Result<Cohort> {
    ctx.manifest.input(path)?;
    load_cohort(path, &CohortSchema::default())
}

/// One cohort from a CSV file, or every completed cohort listed in the
/// `imputations.json` of a directory.
fn load_cohorts(ctx: &mut Ctx, path: &Path) -> Result<Vec<Cohort>> {
    if !path.is_dir() {
        return Ok(vec![read_cohort_file(ctx, path)?]);
    }
    let index = path.join("imputations.json");
    let text = std::fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
    ctx.manifest.input(&index)?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let files = v["files"]
        .as_array()
        .ok_or_else(|| Error::Input(format!("{}: no 'files' list", index.display())))?;
    files
        .iter()
        .map(|f| {
            let name = f
                .as_str()
                .ok_or_else(|| Error::Input(format!("{}: file names must be strings", index.display())))?;
            read_cohort_file(ctx, &path.join(name))
        })
        .collect()
}

fn dataset(cohort: &Cohort, table: &CoefficientTable) -> Result<SurvivalDataset> {
    let lp = cohort
        .records()
        .iter()
        .map(|r| linear_predictor(r, table))
        .collect::<Result<Vec<f64>>>()?;
    SurvivalDataset::from_cohort(cohort, &lp)
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn cmd_generate(ctx: &mut Ctx) -> Result<PathBuf> {
    let mut cfg = ctx
        .generator
        .clone()
        .ok_or_else(|| Error::Config("generate needs a [generator] section in the config".into()))?;
    cfg.seed = ctx.seed;
    ctx.manifest.seeds.insert("generate".into(), cfg.seed);
    let (cohort, truth) = generate(&cfg)?;
    let path = ctx.path("cohort.csv")?;
    save_cohort(&path, &cohort)?;
    ctx.manifest.output(&path)?;
    let truth_path = ctx.path("ground_truth.csv")?;
    truth.save_csv(&truth_path)?;
    ctx.manifest.output(&truth_path)?;
    Ok(path)
}

pub fn cmd_stability(ctx: &mut Ctx, cohort_path: &Path) -> Result<PathBuf> {
    let cohort = read_cohort_file(ctx, cohort_path)?;
    let s = &ctx.settings;
    let opts = StabilityOptions {
        bins: s.bins,
        include_missing: s.include_missing,
    };
    let (k, q) = (s.components, s.joint_bins);
    let mut reports = Vec::new();
    let mut warnings = Vec::new();
    for sex in Sex::ALL {
        let sub = cohort.of_sex(sex);
        if sub.n_practices() < 2 {
            warnings.push(format!("{sex}: fewer than two practices, no stability reports"));
            continue;
        }
        let mut push = |name: String, res: Result<StabilityReport>| match res {
            Ok(mut r) => {
                warnings.extend(r.warnings.iter().map(|w| format!("{sex} {}: {w}", r.variable)));
                r.stratum = Some(sex.to_string());
                reports.push(r);
            }
            Err(e) => warnings.push(format!("{sex} {name}: {e}")),
        };
        for v in Variable::all() {
            push(v.name().to_string(), variable_stability(&sub, v, &opts));
        }
        for v in Variable::IMPUTABLE {
            push(format!("missing_{v}"), missingness_stability(&sub, v));
        }
        let complete = sub.filter(|r| JOINT_VARIABLES.iter().all(|&v| r.value(v).is_some()));
        let res = if complete.n_practices() == sub.n_practices() {
            multivariate_stability(&complete, &JOINT_VARIABLES, k, q)
        } else {
            Err(Error::Estimation("some practices have no complete records".into()))
        };
        push("joint".into(), res);
    }
    for w in warnings {
        ctx.warn(w);
    }
    let path = ctx.path("stability_report.csv")?;
    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_reports(f, &reports)?;
    ctx.manifest.output(&path)?;
    Ok(path)
}

pub fn cmd_impute(ctx: &mut Ctx, cohort_path: &Path) -> Result<PathBuf> {
    let cohort = read_cohort_file(ctx, cohort_path)?;
    let cfg = ImputationConfig {
        m: ctx.settings.imputations,
        seed: ctx.stage_seed("impute"),
        ridge: ctx.settings.ridge,
    };
    let completed = impute(&cohort, &cfg)?;
    let dir = ctx.path("imputed")?;
    for p in completed.save(&dir)? {
        ctx.manifest.output(&p)?;
    }
    Ok(dir)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrailtyRow {
    pub practice_id: String,
    pub b: f64,
    pub exp_b: f64,
    pub shrinkage_se: f64,
    pub sex: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub replicates: usize,
    pub failed: usize,
    pub seed: u64,
    pub sigma_b_ci: [f64; 2],
    pub base_risk: f64,
    /// Interval for the 2.5th percentile of frailty-adjusted risk.
    pub risk_p2_5_ci: [f64; 2],
    pub risk_p97_5_ci: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterceptSummary {
    pub sex: String,
    pub n_records: usize,
    pub n_practices: usize,
    pub n_events: usize,
    pub imputations: usize,
    pub variance: f64,
    pub sigma_b: f64,
    pub variance_per_imputation: Vec<f64>,
    pub loglik: f64,
    pub integrated_loglik: f64,
    pub converged: bool,
    pub at_lower_bound: bool,
    pub at_upper_bound: bool,
    pub warnings: Vec<String>,
    pub bootstrap: Option<BootstrapSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub model: String,
    pub seed: u64,
    pub strata: Vec<InterceptSummary>,
}

pub fn cmd_fit_intercept(ctx: &mut Ctx, input: &Path) -> Result<PathBuf> {
    let cohorts = load_cohorts(ctx, input)?;
    let table = ctx.coefficients.load()?;
    let opts = FrailtyOptions::default();
    let mut rows = Vec::new();
    let mut strata = Vec::new();
    for sex in Sex::ALL {
        let subs: Vec<Cohort> = cohorts.iter().map(|c| c.of_sex(sex)).collect();
        if subs[0].is_empty() {
            continue;
        }
        let fits = subs
            .iter()
            .map(|s| fit_random_intercept(&dataset(s, &table)?, &opts))
            .collect::<Result<Vec<_>>>()?;
        let ids = &fits[0].group_ids;
        if fits.iter().any(|f| &f.group_ids != ids) {
            return Err(Error::Input("completed cohorts disagree on the practice list".into()));
        }
        let b = pool(&fits.iter().map(|f| f.b.clone()).collect::<Vec<_>>())?;
        let se = pool(&fits.iter().map(|f| f.se.clone()).collect::<Vec<_>>())?;
        for ((id, b), se) in ids.iter().zip(b).zip(se) {
            rows.push(FrailtyRow {
                practice_id: id.clone(),
                b,
                exp_b: b.exp(),
                shrinkage_se: se,
                sex: sex.to_string(),
            });
        }
        let variance = mean(fits.iter().map(|f| f.variance));
        let base = ctx.settings.base_risk;
        let bootstrap = if ctx.settings.bootstrap > 0 {
            let seed = ctx.stage_seed(&format!("bootstrap-{sex}"));
            let ci = bootstrap_risk_ci(
                &subs[0],
                |c: &Cohort| Ok(fit_random_intercept(&dataset(c, &table)?, &opts)?.sigma_b),
                ctx.settings.bootstrap,
                seed,
            )?;
            let risk = |s: f64| adjust_risk(base, (s * Z_975).exp());
            Some(BootstrapSummary {
                replicates: ci.attempted,
                failed: ci.failed,
                seed,
                sigma_b_ci: [ci.lower, ci.upper],
                base_risk: base,
                risk_p2_5_ci: [risk(-ci.upper)?, risk(-ci.lower)?],
                risk_p97_5_ci: [risk(ci.lower)?, risk(ci.upper)?],
            })
        } else {
            None
        };
        let d = |f: fn(&ehr_frailty::survival::FitDiagnostics) -> bool| fits.iter().any(|x| f(&x.diagnostics));
        strata.push(InterceptSummary {
            sex: sex.to_string(),
            n_records: subs[0].len(),
            n_practices: ids.len(),
            n_events: subs[0].records().iter().filter(|r| r.event).count(),
            imputations: fits.len(),
            variance,
            sigma_b: variance.sqrt(),
            variance_per_imputation: fits.iter().map(|f| f.variance).collect(),
            loglik: mean(fits.iter().map(|f| f.loglik)),
            integrated_loglik: mean(fits.iter().map(|f| f.integrated_loglik)),
            converged: fits.iter().all(|f| f.diagnostics.converged),
            at_lower_bound: d(|x| x.at_lower_bound),
            at_upper_bound: d(|x| x.at_upper_bound),
            warnings: fits.iter().flat_map(|f| f.diagnostics.warnings.clone()).collect(),
            bootstrap,
        });
    }
    if strata.is_empty() {
        return Err(Error::Input("cohort has no records".into()));
    }
    let path = ctx.path("frailty.csv")?;
    serde_csv(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, &rows)?;
    ctx.manifest.output(&path)?;
    let summary = FitSummary {
        model: "random_intercept".into(),
        seed: ctx.seed,
        strata,
    };
    let spath = ctx.path("fit_summary.json")?;
    ctx.write_json(&spath, &summary)?;
    Ok(path)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlopeSummary {
    pub sex: String,
    pub imputations: usize,
    pub var_b: f64,
    pub var_u: f64,
    pub sigma_b: f64,
    pub sigma_u: f64,
    pub gamma: f64,
    pub gamma_se: f64,
    pub subsample_frac: f64,
    pub repeats: usize,
    pub seed: u64,
    /// (var_b, var_u, gamma) of every subsample fit.
    pub subsample_estimates: Vec<(f64, f64, f64)>,
    pub loglik: f64,
    pub converged: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlopeFitSummary {
    pub model: String,
    pub seed: u64,
    pub strata: Vec<SlopeSummary>,
}

#[derive(Debug, Clone, Serialize)]
struct SlopeRow {
    practice_id: String,
    b: f64,
    u: f64,
    sex: String,
}

pub fn cmd_fit_slope(ctx: &mut Ctx, input: &Path) -> Result<PathBuf> {
    let cohorts = load_cohorts(ctx, input)?;
    let table = ctx.coefficients.load()?;
    let opts = FrailtyOptions::default();
    let mut rows = Vec::new();
    let mut strata = Vec::new();
    for sex in Sex::ALL {
        let subs: Vec<Cohort> = cohorts.iter().map(|c| c.of_sex(sex)).collect();
        if subs[0].is_empty() {
            continue;
        }
        let slope = SlopeOptions {
            subsample_frac: ctx.settings.practice_subsample_frac,
            repeats: ctx.settings.repeats,
            seed: ctx.stage_seed(&format!("fit-slope-{sex}")),
        };
        let fits = subs
            .iter()
            .map(|s| fit_random_slope(&dataset(s, &table)?, &slope, &opts))
            .collect::<Result<Vec<_>>>()?;
        let ids = &fits[0].group_ids;
        if fits.iter().any(|f| &f.group_ids != ids) {
            return Err(Error::Input("completed cohorts disagree on the practice list".into()));
        }
        let b = pool(&fits.iter().map(|f| f.b.clone()).collect::<Vec<_>>())?;
        let u = pool(&fits.iter().map(|f| f.u.clone()).collect::<Vec<_>>())?;
        for ((id, b), u) in ids.iter().zip(b).zip(u) {
            rows.push(SlopeRow {
                practice_id: id.clone(),
                b,
                u,
                sex: sex.to_string(),
            });
        }
        let var_b = mean(fits.iter().map(|f| f.var_b));
        let var_u = mean(fits.iter().map(|f| f.var_u));
        strata.push(SlopeSummary {
            sex: sex.to_string(),
            imputations: fits.len(),
            var_b,
            var_u,
            sigma_b: var_b.sqrt(),
            sigma_u: var_u.sqrt(),
            gamma: mean(fits.iter().map(|f| f.gamma)),
            gamma_se: mean(fits.iter().map(|f| f.gamma_se)),
            subsample_frac: slope.subsample_frac,
            repeats: slope.repeats,
            seed: slope.seed,
            subsample_estimates: fits.iter().flat_map(|f| f.subsample_estimates.clone()).collect(),
            loglik: mean(fits.iter().map(|f| f.loglik)),
            converged: fits.iter().all(|f| f.diagnostics.converged),
            warnings: fits.iter().flat_map(|f| f.diagnostics.warnings.clone()).collect(),
        });
    }
    if strata.is_empty() {
        return Err(Error::Input("cohort has no records".into()));
    }
    let path = ctx.path("slope_effects.csv")?;
    serde_csv(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, &rows)?;
    ctx.manifest.output(&path)?;
    let summary = SlopeFitSummary {
        model: "random_intercept_and_slope".into(),
        seed: ctx.seed,
        strata,
    };
    let spath = ctx.path("slope_summary.json")?;
    ctx.write_json(&spath, &summary)?;
    Ok(spath)
}

fn read_json<T: for<'de> Deserialize<'de>>(ctx: &mut Ctx, path: &Path) -> Result<T> {
    ctx.manifest.input(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct EffectRow {
    pub model: String,
    pub sex: String,
    pub sigma_b: f64,
    pub sigma_u: f64,
    pub base_risk: f64,
    pub lp_scale: f64,
    pub n: usize,
    pub seed: u64,
    pub mean: f64,
    pub p0_5: f64,
    pub p2_5: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p97_5: f64,
    pub p99_5: f64,
}

/// Random-effect risk draws. `sources` are (model, sex, sigma_b, sigma_u).
pub fn cmd_simulate_effects(ctx: &mut Ctx, sources: Vec<(String, String, f64, f64)>) -> Result<PathBuf> {
    let mut rows = Vec::new();
    for (model, sex, sigma_b, sigma_u) in sources {
        let label = if sex.is_empty() {
            format!("simulate-effects-{model}")
        } else {
            format!("simulate-effects-{model}-{sex}")
        };
        let spec = DrawSpec {
            sigma_b,
            sigma_u,
            base_risk: ctx.settings.base_risk,
            lp_scale: ctx.settings.lp_scale,
            n: ctx.settings.draws,
            seed: ctx.stage_seed(&label),
        };
        let s = simulate_random_effect_draws(&spec)?;
        let p: Vec<f64> = PERCENTILES.iter().map(|&q| s.percentile(q).expect("listed")).collect();
        rows.push(EffectRow {
            model,
            sex,
            sigma_b,
            sigma_u,
            base_risk: spec.base_risk,
            lp_scale: spec.lp_scale,
            n: s.n,
            seed: spec.seed,
            mean: s.mean,
            p0_5: p[0],
            p2_5: p[1],
            p25: p[2],
            p50: p[3],
            p75: p[4],
            p97_5: p[5],
            p99_5: p[6],
        });
    }
    ctx.write_table("effects", &rows, serde_csv)
}

/// Draw sources from fitted summaries: intercept-only rows from the
/// intercept fit and slope-only rows from the slope fit.
pub fn effect_sources(
    ctx: &mut Ctx,
    fit_summary: Option<&Path>,
    slope_summary: Option<&Path>,
) -> Result<Vec<(String, String, f64, f64)>> {
    let mut out = Vec::new();
    if let Some(p) = fit_summary {
        let s: FitSummary = read_json(ctx, p)?;
        out.extend(
            s.strata
                .into_iter()
                .map(|x| ("intercept".into(), x.sex, x.sigma_b, 0.0)),
        );
    }
    if let Some(p) = slope_summary {
        let s: SlopeFitSummary = read_json(ctx, p)?;
        out.extend(s.strata.into_iter().map(|x| ("slope".into(), x.sex, 0.0, x.sigma_u)));
    }
    Ok(out)
}

fn read_frailty(ctx: &mut Ctx, path: &Path) -> Result<BTreeMap<String, BTreeMap<String, f64>>> {
    ctx.manifest.input(path)?;
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let mut out: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for (i, row) in rdr.deserialize::<FrailtyRow>().enumerate() {
        let row = row.map_err(|e| Error::Row {
            row: i + 1,
            message: e.to_string(),
        })?;
        out.entry(row.sex).or_default().insert(row.practice_id, row.exp_b);
    }
    if out.is_empty() {
        return Err(Error::Input(format!("{}: no data rows", path.display())));
    }
    Ok(out)
}

#[derive(Deserialize)]
struct StabilityRow {
    variable: String,
    source_id: String,
    spo: f64,
    gpd: f64,
    n_sources: usize,
    clipped_mass: f64,
    sex: String,
}

fn read_stability(ctx: &mut Ctx, path: &Path) -> Result<Vec<StabilityReport>> {
    ctx.manifest.input(path)?;
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let mut reports: Vec<StabilityReport> = Vec::new();
    for (i, row) in rdr.deserialize::<StabilityRow>().enumerate() {
        let row = row.map_err(|e| Error::Row {
            row: i + 1,
            message: e.to_string(),
        })?;
        let stratum = (!row.sex.is_empty()).then_some(row.sex);
        let same = reports
            .last()
            .is_some_and(|r| r.variable == row.variable && r.stratum == stratum);
        if !same {
            reports.push(StabilityReport {
                variable: row.variable,
                stratum,
                sources: Vec::new(),
                spo: Vec::new(),
                gpd: row.gpd,
                n_sources: row.n_sources,
                clipped_mass: row.clipped_mass,
                clamped: 0,
                warnings: Vec::new(),
            });
        }
        let r = reports.last_mut().expect("pushed above");
        r.sources.push(row.source_id);
        r.spo.push(row.spo);
    }
    Ok(reports)
}

fn ranges(frailty: &BTreeMap<String, BTreeMap<String, f64>>, base: f64) -> Result<Vec<RiskRange>> {
    let mut out = Vec::new();
    for (sex, fr) in frailty {
        let q = frailty_quintiles(fr)?;
        out.extend(risk_ranges(sex, &q, fr, base)?);
    }
    Ok(out)
}

/// Per-quintile frailty and risk ranges from a fitted frailty file.
pub fn cmd_adjust_risk_table(ctx: &mut Ctx, frailty: &Path, base: f64) -> Result<PathBuf> {
    let fr = read_frailty(ctx, frailty)?;
    let rows = ranges(&fr, base)?;
    ctx.write_table("risk_ranges", &rows, write_risk_ranges)
}

pub fn cmd_report(ctx: &mut Ctx, cohort: &Path, frailty: &Path, stability: &Path) -> Result<Vec<PathBuf>> {
    let cohort = read_cohort_file(ctx, cohort)?;
    let fr = read_frailty(ctx, frailty)?;
    let reports = read_stability(ctx, stability)?;
    let mut characteristics = Vec::new();
    for (sex, f) in &fr {
        let s: Sex = sex.parse().map_err(Error::Input)?;
        let q = frailty_quintiles(f)?;
        characteristics.extend(
            quintile_characteristics(&cohort.of_sex(s), &q)?
                .into_iter()
                .filter(|r| r.sex == *sex),
        );
    }
    let table = stability_frailty_table(&reports, &fr, &cohort)?;
    let rr = ranges(&fr, ctx.settings.base_risk)?;
    let mut out = vec![ctx.write_table("quintile_table", &characteristics, write_quintile_table)?];
    out.push(ctx.write_table("correlations", &table.rows, write_correlations)?);
    let path = ctx.table_path("plotdata_beeswarm")?;
    match ctx.format {
        Format::Csv => {
            let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_plotdata(f, &table)?;
            ctx.manifest.output(&path)?;
        }
        Format::Json => ctx.write_json(&path, &table)?,
    }
    out.push(path);
    out.push(ctx.write_table("risk_ranges", &rr, write_risk_ranges)?);
    Ok(out)
}

/// Every stage in order: generate (unless a cohort is given), stability,
/// imputation, intercept fit, slope fit, effect draws, report.
pub fn cmd_pipeline(ctx: &mut Ctx, cohort: Option<&Path>) -> Result<()> {
    let cohort = match cohort {
        Some(p) => p.to_path_buf(),
        None => time(ctx, "generate", cmd_generate)?,
    };
    let stability = time(ctx, "stability", |c| cmd_stability(c, &cohort))?;
    let imputed = time(ctx, "impute", |c| cmd_impute(c, &cohort))?;
    let frailty = time(ctx, "fit-intercept", |c| cmd_fit_intercept(c, &imputed))?;
    let slope = time(ctx, "fit-slope", |c| cmd_fit_slope(c, &imputed))?;
    let summary = ctx.out_dir.join("fit_summary.json");
    time(ctx, "simulate-effects", |c| {
        let sources = effect_sources(c, Some(&summary), Some(&slope))?;
        cmd_simulate_effects(c, sources)
    })?;
    time(ctx, "report", |c| cmd_report(c, &cohort, &frailty, &stability))?;
    Ok(())
}

pub fn time<T>(ctx: &mut Ctx, stage: &str, f: impl FnOnce(&mut Ctx) -> Result<T>) -> Result<T> {
    let start = std::time::Instant::now();
    let out = f(ctx);
    ctx.manifest.timings.push(crate::manifest::StageTiming {
        stage: stage.to_string(),
        seconds: start.elapsed().as_secs_f64(),
    });
    out
}
