mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use nalgebra::DVector;
use rigtune::bench::{bench_setup, bench_tracker, pipeline_pairs};
use rigtune::fitting::{augment_controls, calibrate, CalibrationConfig, ExpressionPair};
use rigtune::io::{self, expression_pairs, load_expressions, load_geometry, load_rig};
use rigtune::objective::TrainingPair;
use rigtune::optimizer::{run_pipeline, DiffConfig, PipelineReport, StageId};
use rigtune::repro::{self, ReproOptions, Target};
use rigtune::tracker::{SubprocessTracker, Tracker};
use rigtune::Rig;
use serde::Serialize;
use sha2::{Digest, Sha256};

use config::{resolve, ExperimentConfig, Source};

const SUBPROCESS_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Parser, Debug)]
#[command(
    name = "rigtune",
    version,
    about = "Rig calibration and tracker-aware fine-tuning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the seeds in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// `builtin` or `subprocess:CMD`.
    #[arg(long, global = true, default_value = "builtin")]
    tracker: TrackerSpec,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rerun one of the desk-scale experiments and check its thresholds.
    Repro { target: Target },
    /// Fit θ_R to the expression corpus named in the config.
    Calibrate,
    /// Run the staged fine-tuning pipeline named in the config.
    Finetune,
}

#[derive(Clone, Debug, PartialEq)]
enum TrackerSpec {
    Builtin,
    Subprocess(String),
}

impl std::str::FromStr for TrackerSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "builtin" {
            return Ok(TrackerSpec::Builtin);
        }
        match s.strip_prefix("subprocess:") {
            Some(cmd) if !cmd.trim().is_empty() => Ok(TrackerSpec::Subprocess(cmd.to_string())),
            _ => Err(format!("expected `builtin` or `subprocess:CMD`, got `{s}`")),
        }
    }
}

impl TrackerSpec {
    fn build(&self, rig: &Rig, lm: f64) -> Result<Box<dyn Tracker>> {
        Ok(match self {
            TrackerSpec::Builtin => Box::new(bench_tracker(rig, lm)),
            TrackerSpec::Subprocess(cmd) => Box::new(
                SubprocessTracker::spawn(cmd, rig.n_controls(), SUBPROCESS_TIMEOUT)
                    .with_context(|| format!("starting tracker `{cmd}`"))?,
            ),
        })
    }

    fn label(&self) -> String {
        match self {
            TrackerSpec::Builtin => "builtin".into(),
            TrackerSpec::Subprocess(cmd) => format!("subprocess:{cmd}"),
        }
    }
}

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    command: String,
    seed: Option<u64>,
    tracker: String,
    passed: Option<bool>,
    files: Vec<ManifestEntry>,
}

/// Collects written files for the manifest.
struct Outputs {
    dir: PathBuf,
    files: BTreeMap<String, Vec<u8>>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    fn put(&mut self, name: &str, body: Vec<u8>) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, &body).with_context(|| format!("writing {}", path.display()))?;
        self.files.insert(name.to_string(), body);
        Ok(())
    }

    fn record(&mut self, name: &str) -> Result<()> {
        let path = self.dir.join(name);
        let body = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        self.files.insert(name.to_string(), body);
        Ok(())
    }

    fn finish(
        self,
        command: String,
        seed: Option<u64>,
        tracker: &TrackerSpec,
        passed: Option<bool>,
    ) -> Result<()> {
        let files = self
            .files
            .iter()
            .map(|(path, body)| ManifestEntry {
                path: path.clone(),
                sha256: hex::encode(Sha256::digest(body)),
            })
            .collect();
        let manifest = Manifest {
            tool: "rigtune",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            tracker: tracker.label(),
            passed,
            files,
        };
        io::write_json(&self.dir.join("manifest.json"), &manifest)?;
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Result<bool> {
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .context("configuring worker pool")?;
    }
    match &cli.command {
        Command::Repro { target } => cmd_repro(cli, *target),
        Command::Calibrate => cmd_calibrate(cli).map(|_| true),
        Command::Finetune => cmd_finetune(cli).map(|_| true),
    }
}

fn load_config(cli: &Cli) -> Result<(ExperimentConfig, PathBuf)> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| anyhow!("--config is required"))?;
    ExperimentConfig::load(path)
}

fn cmd_repro(cli: &Cli, target: Target) -> Result<bool> {
    let opts = ReproOptions {
        seed: cli.seed.unwrap_or_default(),
    };
    let outcome = repro::run(target, &opts)?;
    let mut out = Outputs::new(&cli.out)?;
    for name in outcome.write(&cli.out)? {
        out.record(&name)?;
    }
    let passed = outcome.passed();
    out.finish(
        format!("repro {target}"),
        Some(opts.seed),
        &cli.tracker,
        Some(passed),
    )?;
    if passed {
        println!("{target}: pass ({:.2} s)", outcome.seconds);
    } else {
        print!("{}", outcome.diff_report());
        println!("{target}: FAIL");
    }
    Ok(passed)
}

fn rig_at(path: &Path) -> Result<Rig> {
    load_rig(path).with_context(|| format!("loading rig {}", path.display()))
}

fn corpus(rig: &Rig, expressions: &Path, geometry: &Path) -> Result<Vec<ExpressionPair>> {
    let records = load_expressions(expressions)
        .with_context(|| format!("loading expressions {}", expressions.display()))?;
    let order: Vec<String> = records.iter().map(|r| r.name.clone()).collect();
    let capture = load_geometry(geometry, &order, rig.m_geometry())
        .with_context(|| format!("loading geometry {}", geometry.display()))?;
    expression_pairs(&records, &capture, rig)
        .with_context(|| format!("pairing {}", expressions.display()))
}

fn cmd_calibrate(cli: &Cli) -> Result<()> {
    let (cfg, base) = load_config(cli)?;
    let c = cfg
        .calibrate
        .ok_or_else(|| anyhow!("config has no `calibrate` section"))?;
    let rig = rig_at(&resolve(&base, &c.rig))?;
    let pairs = corpus(
        &rig,
        &resolve(&base, &c.expressions),
        &resolve(&base, &c.geometry),
    )?;
    if let Some(bad) = c
        .augment
        .iter()
        .find(|n| !pairs.iter().any(|p| &p.name == *n))
    {
        bail!("augment names unknown expression `{bad}`");
    }
    let holdout = match (&c.holdout_expressions, &c.holdout_geometry) {
        (Some(e), Some(g)) => Some(corpus(&rig, &resolve(&base, e), &resolve(&base, g))?),
        (None, None) => None,
        _ => bail!("holdout_expressions and holdout_geometry must be given together"),
    };
    let prior = match &c.prior {
        Some(p) => rig_at(&resolve(&base, p))?.theta().clone(),
        None => rig.theta().clone(),
    };
    let tracker_rig = match &c.tracker_rig {
        Some(p) => rig_at(&resolve(&base, p))?,
        None => rig.clone(),
    };
    let tracker = if c.augment.is_empty() {
        None
    } else {
        Some(cli.tracker.build(&tracker_rig, c.tracker_lm)?)
    };
    let theta_t = tracker_rig.theta().clone();
    let fill = |p: &ExpressionPair| -> rigtune::Result<DVector<f64>> {
        match &tracker {
            Some(t) if c.augment.contains(&p.name) => t.track(&p.v, &theta_t),
            _ => Ok(p.c.clone()),
        }
    };
    let config = CalibrationConfig::new(prior).with_epsilon(c.epsilon_reg);
    let (theta, report) = calibrate(&rig, &pairs, &config, Some(&fill), holdout.as_deref())?;

    let mut out = Outputs::new(&cli.out)?;
    let fitted = rig.with_theta(theta)?;
    out.put(
        "fitted_rig.json",
        io::to_json_bytes(&io::RigFile::from_rig(&fitted))?,
    )?;
    out.put("calibration_report.json", io::to_json_bytes(&report)?)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "expression",
        "kind",
        "residual_prior",
        "residual_fit",
        "masked_rows",
        "augmented_controls",
    ])?;
    for r in &report.pairs {
        w.write_record([
            r.name.clone(),
            serde_json::to_value(r.kind)?
                .as_str()
                .unwrap_or_default()
                .to_string(),
            format!("{:e}", r.residual_prior),
            format!("{:e}", r.residual_fit),
            join(&r.masked_rows),
            join(&r.augmented_controls),
        ])?;
    }
    out.put("calibration_residuals.csv", w.into_inner()?)?;
    out.finish("calibrate".into(), cli.seed, &cli.tracker, None)?;
    println!(
        "calibrate: {} pairs, {} augmented, spans parameters: {}",
        report.pairs.len(),
        report.augmented.len(),
        report.spans_parameters
    );
    Ok(())
}

fn join(xs: &[usize]) -> String {
    xs.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

fn stage_name(id: StageId) -> Result<String> {
    Ok(serde_json::to_value(id)?
        .as_str()
        .unwrap_or_default()
        .to_string())
}

struct Prepared {
    rig: Rig,
    /// Starting θ_T.
    theta_in: DVector<f64>,
    theta_r: DVector<f64>,
    tracker: Box<dyn Tracker>,
    pairs: Vec<TrainingPair>,
}

fn cmd_finetune(cli: &Cli) -> Result<()> {
    let (cfg, base) = load_config(cli)?;
    let mut f = cfg
        .finetune
        .ok_or_else(|| anyhow!("config has no `finetune` section"))?;
    f.pipeline.validate().context("validating pipeline")?;
    f.optimizer.validate().context("validating optimizer")?;
    if let Some(seed) = cli.seed {
        f.optimizer.seed = seed;
        if let Source::Synthetic { spec } = &mut f.source {
            spec.seed = seed;
        }
    }

    let Prepared {
        rig,
        theta_in,
        theta_r,
        tracker,
        pairs,
    } = match &f.source {
        Source::Synthetic { spec } => {
            spec.validate()?;
            let setup = bench_setup(spec)?;
            let tracker = cli.tracker.build(&setup.rig, f.tracker_lm)?;
            let pairs = pipeline_pairs(&setup, tracker.as_ref(), &setup.theta_s)?;
            Prepared {
                rig: setup.rig.clone(),
                theta_in: setup.theta_s.clone(),
                theta_r: setup.theta_s.clone(),
                tracker,
                pairs,
            }
        }
        Source::Files {
            rig,
            expressions,
            geometry,
            tracker_rig,
        } => {
            let rig = rig_at(&resolve(&base, rig))?;
            let theta_in = match tracker_rig {
                Some(p) => rig_at(&resolve(&base, p))?.theta().clone(),
                None => rig.theta().clone(),
            };
            rig.check_theta(&theta_in)
                .context("tracker rig does not match the rig structure")?;
            let expr = corpus(
                &rig,
                &resolve(&base, expressions),
                &resolve(&base, geometry),
            )?;
            let tracker = cli.tracker.build(&rig, f.tracker_lm)?;
            let pairs = expr
                .iter()
                .map(|p| {
                    let t = tracker.track(&p.v, &theta_in)?;
                    Ok(TrainingPair::from_expression(p).with_c_plus(augment_controls(&p.c, &t)?))
                })
                .collect::<rigtune::Result<Vec<_>>>()?;
            let theta_r = rig.theta().clone();
            Prepared {
                rig,
                theta_in,
                theta_r,
                tracker,
                pairs,
            }
        }
    };

    let diff = match &f.directions {
        Some(d) => DiffConfig::estimate(d.clone(), f.step.clone()),
        None => DiffConfig::zero(),
    };
    let report = run_pipeline(
        &f.pipeline,
        &theta_in,
        &pairs,
        tracker.as_ref(),
        &rig,
        &theta_r,
        &f.optimizer,
        &diff,
    )?;
    write_finetune(cli, &rig, &report)?;
    for s in &report.stages {
        println!(
            "{}: primary {:.4e} -> {:.4e}, spurious {:.4e} -> {:.4e}",
            stage_name(s.stage)?,
            s.before.primary_gamma1,
            s.after.primary_gamma1,
            s.before.spurious_sum,
            s.after.spurious_sum
        );
    }
    Ok(())
}

fn write_finetune(cli: &Cli, rig: &Rig, report: &PipelineReport) -> Result<()> {
    let mut out = Outputs::new(&cli.out)?;
    let tuned = rig.with_theta(DVector::from_column_slice(&report.theta_final))?;
    out.put(
        "theta_hat_T.json",
        io::to_json_bytes(&io::RigFile::from_rig(&tuned))?,
    )?;
    out.put("pipeline_report.json", io::to_json_bytes(report)?)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "stage",
        "iterations",
        "chosen_sample",
        "primary_before",
        "primary_after",
        "spurious_before",
        "spurious_after",
    ])?;
    for s in &report.stages {
        w.write_record([
            stage_name(s.stage)?,
            s.iterations.to_string(),
            s.chosen_sample.to_string(),
            format!("{:e}", s.before.primary_gamma1),
            format!("{:e}", s.after.primary_gamma1),
            format!("{:e}", s.before.spurious_sum),
            format!("{:e}", s.after.spurious_sum),
        ])?;
    }
    out.put("stages.csv", w.into_inner()?)?;

    let mut body = Vec::new();
    report.write_summary_csv(&mut body)?;
    out.put("stage_expressions.csv", body)?;

    for s in &report.stages {
        let mut w = csv::Writer::from_writer(Vec::new());
        let n = report.theta_final.len();
        let mut header = vec!["sample".to_string(), "iteration".to_string()];
        header.extend((0..n).map(|l| format!("theta_{l}")));
        w.write_record(&header)?;
        for sample in &s.trajectory {
            let mut row = vec![sample.id.to_string(), sample.iteration.to_string()];
            row.extend(sample.theta.iter().map(|x| format!("{x:e}")));
            w.write_record(&row)?;
        }
        out.put(
            &format!("trajectory_{}.csv", stage_name(s.stage)?),
            w.into_inner()?,
        )?;
    }
    out.finish("finetune".into(), cli.seed, &cli.tracker, None)
}
