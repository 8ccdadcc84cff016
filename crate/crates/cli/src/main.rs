mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ehr_frailty::synthgen::CoefficientSource;
use ehr_frailty::{Error, ErrorKind, Result};

use commands::{Ctx, Format};
use config::RunConfig;
use manifest::RunManifest;

const SCHEMAS: &str = "\
FILES
  cohort.csv            patient_id, practice_id, sex, age, sbp, sbp_sd, bmi, chol_hdl_ratio,
                        smoking, ethnicity, townsend, one 0/1 column per condition flag,
                        follow_up_years, event (0/1), censor_reason. Blank cells are missing.
  ground_truth.csv      practice_id, b, u
  stability_report.csv  variable, source_id, spo, gpd, n_sources, clipped_mass, sex
  imputed/              imputed_01.csv .. (cohort schema) and imputations.json (m, seed,
                        ridge, order, files)
  frailty.csv           practice_id, b, exp_b, shrinkage_se, sex
  fit_summary.json      per sex: variance, sigma_b, loglik, convergence flags, bootstrap
                        interval for sigma_b and the 2.5/97.5 percentile risks
  slope_effects.csv     practice_id, b, u, sex
  slope_summary.json    per sex: var_b, var_u, gamma, subsample estimates, seeds
  effects.csv           model, sex, sigma_b, sigma_u, base_risk, lp_scale, n, seed, mean,
                        p0_5, p2_5, p25, p50, p75, p97_5, p99_5
  quintile_table.csv    quintile, sex, characteristic, unit, mean, sd, n_practices
  correlations.csv      variable, sex, r, lo, hi, n, metric, error
  plotdata_beeswarm.csv practice_id, variable, sex, percentile_bin, value, frailty,
                        reference_line (percentiles are computed per sex)
  risk_ranges.csv       quintile, frailty_min, frailty_max, risk_min, risk_max, sex,
                        n_practices
  run_manifest.json     command, config echo, stage seeds, input and output sha256
                        digests, versions, stage timings, warnings

--format json replaces the report tables (quintile_table, correlations, plotdata_beeswarm,
risk_ranges, effects) with JSON arrays. Intermediate files are always CSV.

CONFIG (TOML; every section optional; `--config @tiny` selects the bundled example)
  seed = <u64>
  [generator]   synthetic cohort: seed, n_practices, patients_per_practice {mean,
                dispersion}, intercept_sd, slope_sd, baseline {shape, scale}, horizon,
                random_censor_rate, statin_rate, other_death_rate, flip_prob,
                coefficients {source = default|null|file, path}, factor_model, missing
                {mechanism = mcar|mar_age, rates.<var> = {rate} | {alpha, beta}}
  [analysis]    bins, components, joint_bins, include_missing, imputations, ridge,
                bootstrap, practice_subsample_frac, repeats, draws, base_risk, lp_scale

EXIT CODES
  0 success, 1 input or config error, 2 convergence failure, 3 internal error.
  Failures print one line `ehrfrail: error[<kind>]: <reason>` on stderr.

ENVIRONMENT
  EHRFRAIL_OUT_DIR   default for --out-dir
  EHRFRAIL_THREADS   default for --threads";

#[derive(Parser, Debug)]
#[command(name = "ehrfrail", version, about = "Practice-level data quality and frailty analysis of multi-practice cohorts", after_long_help = SCHEMAS)]
struct Cli {
    /// Run configuration (TOML), or @tiny for the bundled example.
    #[arg(long, global = true)]
    config: Option<String>,
    /// Master seed; every stage derives its own seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, env = "EHRFRAIL_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Worker threads (outputs do not depend on this).
    #[arg(long, global = true, env = "EHRFRAIL_THREADS")]
    threads: Option<usize>,
    /// Equal-width bins for continuous stability histograms [default: 20].
    #[arg(long, global = true)]
    bins: Option<usize>,
    /// Principal components in the joint stability report [default: 2].
    #[arg(long, global = true)]
    components: Option<usize>,
    /// Bins per component in the joint stability report [default: 5].
    #[arg(long, global = true)]
    joint_bins: Option<usize>,
    /// Completed datasets [default: 10].
    #[arg(long, global = true)]
    imputations: Option<usize>,
    /// Cluster bootstrap replicates; 0 disables [default: 1000].
    #[arg(long, global = true)]
    bootstrap: Option<usize>,
    /// Practice fraction per slope-model subsample [default: 0.4].
    #[arg(long, global = true)]
    practice_subsample_frac: Option<f64>,
    /// Slope-model subsamples [default: 5].
    #[arg(long, global = true)]
    repeats: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a cohort from the [generator] section.
    Generate,
    /// Per-variable, missingness and joint stability reports by sex.
    Stability {
        #[arg(long)]
        cohort: PathBuf,
    },
    /// Multiple imputation of missing risk factors.
    Impute {
        #[arg(long)]
        cohort: PathBuf,
    },
    /// Random-intercept frailty model by sex.
    FitIntercept {
        /// Cohort CSV or a directory written by `impute`.
        #[arg(long)]
        cohort: PathBuf,
        /// Coefficient table file (defaults to the config's table).
        #[arg(long)]
        coefficients: Option<PathBuf>,
    },
    /// Random intercept and slope on the linear predictor, by sex.
    FitSlope {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        coefficients: Option<PathBuf>,
    },
    /// Frailty-adjusted risk for one multiplier, or quintile ranges from a
    /// frailty file.
    AdjustRisk {
        #[arg(long)]
        base: Option<f64>,
        #[arg(long, conflicts_with = "frailty_file", required_unless_present = "frailty_file")]
        frailty: Option<f64>,
        #[arg(long)]
        frailty_file: Option<PathBuf>,
    },
    /// Monte Carlo distribution of risk under practice random effects.
    SimulateEffects {
        #[arg(long)]
        fit_summary: Option<PathBuf>,
        #[arg(long)]
        slope_summary: Option<PathBuf>,
        #[arg(long)]
        sigma_b: Option<f64>,
        #[arg(long)]
        sigma_u: Option<f64>,
        #[arg(long)]
        base: Option<f64>,
        #[arg(long)]
        lp_scale: Option<f64>,
        /// Draws per row [default: 1000000].
        #[arg(long)]
        draws: Option<usize>,
    },
    /// Quintile, correlation, plot-data and risk-range tables.
    Report {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        frailty: PathBuf,
        #[arg(long)]
        stability: PathBuf,
        #[arg(long)]
        base: Option<f64>,
    },
    /// Every stage in order.
    Pipeline {
        /// Start from this cohort instead of generating one.
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        coefficients: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Stability { .. } => "stability",
            Command::Impute { .. } => "impute",
            Command::FitIntercept { .. } => "fit-intercept",
            Command::FitSlope { .. } => "fit-slope",
            Command::AdjustRisk { .. } => "adjust-risk",
            Command::SimulateEffects { .. } => "simulate-effects",
            Command::Report { .. } => "report",
            Command::Pipeline { .. } => "pipeline",
        }
    }

    fn coefficients(&self) -> Option<&PathBuf> {
        match self {
            Command::FitIntercept { coefficients, .. }
            | Command::FitSlope { coefficients, .. }
            | Command::Pipeline { coefficients, .. } => coefficients.as_ref(),
            _ => None,
        }
    }
}

fn context(cli: &Cli) -> Result<Ctx> {
    let cfg = match &cli.config {
        Some(spec) => RunConfig::load(spec)?,
        None => RunConfig::default(),
    };
    let mut s = cfg.analysis.clone();
    let set = |dst: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut s.bins, cli.bins);
    set(&mut s.components, cli.components);
    set(&mut s.joint_bins, cli.joint_bins);
    set(&mut s.imputations, cli.imputations);
    set(&mut s.bootstrap, cli.bootstrap);
    set(&mut s.repeats, cli.repeats);
    if let Some(f) = cli.practice_subsample_frac {
        s.practice_subsample_frac = f;
    }
    match &cli.command {
        Command::SimulateEffects {
            base, lp_scale, draws, ..
        } => {
            s.base_risk = base.unwrap_or(s.base_risk);
            s.lp_scale = lp_scale.unwrap_or(s.lp_scale);
            set(&mut s.draws, *draws);
        }
        Command::Report { base, .. } | Command::AdjustRisk { base, .. } => {
            s.base_risk = base.unwrap_or(s.base_risk);
        }
        _ => {}
    }
    let seed = cli
        .seed
        .or(cfg.seed)
        .or(cfg.generator.as_ref().map(|g| g.seed))
        .unwrap_or(0);
    let coefficients = match cli.command.coefficients() {
        Some(p) => CoefficientSource::File { path: p.clone() },
        None => cfg.coefficients(),
    };
    let echo = serde_json::json!({
        "config": cli.config,
        "seed": seed,
        "format": cli.format,
        "analysis": serde_json::to_value(&s)?,
        "generator": cfg.generator.as_ref().map(serde_json::to_value).transpose()?,
        "coefficients": serde_json::to_value(&coefficients)?,
    });
    Ok(Ctx {
        out_dir: cli.out_dir.clone(),
        format: cli.format,
        settings: s,
        seed,
        generator: cfg.generator,
        coefficients,
        manifest: RunManifest::new(cli.command.name(), echo),
    })
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Input(format!("--threads: {e}")))?;
    }
    let mut ctx = context(&cli)?;
    let name = cli.command.name();
    match &cli.command {
        Command::Generate => commands::time(&mut ctx, name, commands::cmd_generate).map(drop)?,
        Command::Stability { cohort } => {
            commands::time(&mut ctx, name, |c| commands::cmd_stability(c, cohort)).map(drop)?
        }
        Command::Impute { cohort } => commands::time(&mut ctx, name, |c| commands::cmd_impute(c, cohort)).map(drop)?,
        Command::FitIntercept { cohort, .. } => {
            commands::time(&mut ctx, name, |c| commands::cmd_fit_intercept(c, cohort)).map(drop)?
        }
        Command::FitSlope { cohort, .. } => {
            commands::time(&mut ctx, name, |c| commands::cmd_fit_slope(c, cohort)).map(drop)?
        }
        Command::AdjustRisk {
            frailty, frailty_file, ..
        } => match (frailty, frailty_file) {
            (Some(z), _) => {
                let r = ehr_frailty::survival::adjust_risk(ctx.settings.base_risk, *z)?;
                println!("{r:.4}");
            }
            (None, Some(path)) => {
                let base = ctx.settings.base_risk;
                commands::time(&mut ctx, name, |c| commands::cmd_adjust_risk_table(c, path, base)).map(drop)?
            }
            (None, None) => unreachable!("clap requires one of the two"),
        },
        Command::SimulateEffects {
            fit_summary,
            slope_summary,
            sigma_b,
            sigma_u,
            ..
        } => commands::time(&mut ctx, name, |c| {
            let mut sources = commands::effect_sources(c, fit_summary.as_deref(), slope_summary.as_deref())?;
            if sigma_b.is_some() || sigma_u.is_some() {
                sources.push((
                    "custom".into(),
                    String::new(),
                    sigma_b.unwrap_or(0.0),
                    sigma_u.unwrap_or(0.0),
                ));
            }
            if sources.is_empty() {
                return Err(Error::Input(
                    "give --fit-summary, --slope-summary, --sigma-b or --sigma-u".into(),
                ));
            }
            commands::cmd_simulate_effects(c, sources)
        })
        .map(drop)?,
        Command::Report {
            cohort,
            frailty,
            stability,
            ..
        } => commands::time(&mut ctx, name, |c| commands::cmd_report(c, cohort, frailty, stability)).map(drop)?,
        Command::Pipeline { cohort, .. } => commands::cmd_pipeline(&mut ctx, cohort.as_deref())?,
    }
    std::fs::create_dir_all(&ctx.out_dir).map_err(|e| Error::io(&ctx.out_dir, e))?;
    ctx.manifest.save(&ctx.out_dir)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("ehrfrail: error[input]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = match e.kind() {
                ErrorKind::Input => ("input", 1),
                ErrorKind::Convergence => ("convergence", 2),
                ErrorKind::Internal => ("internal", 3),
            };
            let reason = e.to_string().replace('\n', " ");
            eprintln!("ehrfrail: error[{kind}]: {reason}");
            ExitCode::from(code)
        }
    }
}
