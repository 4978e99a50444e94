//! One line per acceptance criterion; exits nonzero if any fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use rayon::prelude::*;
use rigtune::bench::{
    bench_setup, bench_tracker, calibration_trial, desk_optimizer, desk_pipeline_config,
    pipeline_trial, tracker_trial, SyntheticSpec, TrackerTrialConfig,
};
use rigtune::optimizer::{PipelineMode, PipelineReport, StageId};
use rigtune::repro::{self, ReproOptions, ReproOutcome, Target};
use rigtune::tracker::AuditedTracker;

type PropertyCheck = fn(u64) -> common::Check;
type ExtraCheck = dyn Fn(&[&ReproOutcome]) -> Option<(bool, String)>;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn failures(o: &ReproOutcome) -> Vec<String> {
    o.checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} {} / {} = {:?}", o.target, c.row, c.column, c.measured))
        .collect()
}

fn repro_verdict(outcomes: &[&ReproOutcome], extra: Option<(bool, String)>) -> Verdict {
    let mut fails: Vec<String> = outcomes.iter().flat_map(|o| failures(o)).collect();
    let checks: usize = outcomes.iter().map(|o| o.checks.len()).sum();
    if let Some((ok, why)) = extra {
        if !ok {
            fails.push(why);
        }
    }
    if fails.is_empty() {
        verdict(true, format!("{checks} thresholds hold"))
    } else {
        verdict(false, fails.join("; "))
    }
}

fn property(name: &str, check: PropertyCheck) -> Result<f64, String> {
    (0..50u64)
        .into_par_iter()
        .map(|seed| check(seed).map_err(|e| format!("{name}: {e}")))
        .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))
}

fn criterion_properties() -> Verdict {
    let suites: [(&str, PropertyCheck); 5] = [
        ("secant", common::secant_equation_exact),
        ("gradients", common::gradient_matches_fd),
        ("jacobians", common::rig_jacobians_match_fd),
        ("eval-track", common::eval_after_track_is_identity),
        ("augment", common::augment_is_heaviside),
    ];
    let mut parts = Vec::new();
    for (name, check) in suites {
        match property(name, check) {
            Ok(worst) => parts.push(format!("{name} worst {worst:.1e}")),
            Err(e) => return verdict(false, e),
        }
    }
    verdict(true, parts.join(", "))
}

const SEEDS: std::ops::Range<u64> = 0..10;

fn criterion_calibration() -> Verdict {
    let trials: Result<Vec<_>, _> = SEEDS
        .into_par_iter()
        .map(|s| calibration_trial(&SyntheticSpec::desk(s)))
        .collect();
    let trials = match trials {
        Ok(t) => t,
        Err(e) => return verdict(false, e.to_string()),
    };
    let bad: Vec<u64> = trials
        .iter()
        .filter(|t| t.error_s > t.error_m)
        .map(|t| t.seed)
        .collect();
    let mean = trials.iter().map(|t| t.improvement).sum::<f64>() / trials.len() as f64;
    verdict(
        bad.is_empty() && mean >= 0.25,
        format!(
            "mean improvement {:.1}%, seeds with error(θ_S) > error(θ_M): {bad:?}",
            100.0 * mean
        ),
    )
}

fn criterion_tracker_ordering() -> Verdict {
    let cfg = TrackerTrialConfig::default();
    let trials: Result<Vec<_>, _> = SEEDS
        .into_par_iter()
        .map(|s| tracker_trial(&SyntheticSpec::desk(s), &cfg))
        .collect();
    let trials = match trials {
        Ok(t) => t,
        Err(e) => return verdict(false, e.to_string()),
    };
    let bad: Vec<u64> = trials
        .iter()
        .filter(|t| !t.ordering_holds())
        .map(|t| t.seed)
        .collect();
    let worst = trials
        .iter()
        .map(|t| t.error_s_hat / t.error_s)
        .fold(0.0, f64::max);
    verdict(
        bad.is_empty(),
        format!("ordering violated on seeds {bad:?}; worst θ̂_S/θ_S ratio {worst:.3}"),
    )
}

fn run_pipeline_once(seed: u64, mode: PipelineMode) -> Result<(PipelineReport, usize), String> {
    let setup = bench_setup(&SyntheticSpec::desk(seed)).map_err(|e| e.to_string())?;
    let tracker = AuditedTracker::new(bench_tracker(&setup.rig, 0.5));
    let report = pipeline_trial(
        &setup,
        &tracker,
        &desk_pipeline_config(mode),
        &desk_optimizer(),
    )
    .map_err(|e| e.to_string())?;
    Ok((report, tracker.decimated_calls()))
}

fn check_pipeline(seed: u64, mode: PipelineMode) -> Result<(), String> {
    let (a, decimated) = run_pipeline_once(seed, mode)?;
    let (b, _) = run_pipeline_once(seed, mode)?;
    let tag = format!("seed {seed} {mode:?}");
    if a != b {
        return Err(format!("{tag}: reruns differ"));
    }
    let expected = match mode {
        PipelineMode::OpenSource => 4,
        PipelineMode::BlackBox => 3,
    };
    if a.stages.len() != expected {
        return Err(format!("{tag}: {} stages", a.stages.len()));
    }
    for s in &a.stages {
        if s.after.primary_gamma1 > s.before.primary_gamma1 {
            return Err(format!("{tag}: primary γ1 rose in {:?}", s.stage));
        }
        let spurious_stage = matches!(
            s.stage,
            StageId::S3AddSpuriousSuppression | StageId::S4SpuriousColumns
        );
        if spurious_stage && s.after.spurious_sum >= s.before.spurious_sum {
            return Err(format!("{tag}: spurious sum did not drop in {:?}", s.stage));
        }
    }
    match mode {
        PipelineMode::BlackBox if decimated != 0 => {
            Err(format!("{tag}: {decimated} decimated calls"))
        }
        PipelineMode::OpenSource if decimated == 0 => {
            Err(format!("{tag}: decimated stage never decimated"))
        }
        _ => Ok(()),
    }
}

fn criterion_pipeline() -> Verdict {
    let runs: Vec<(u64, PipelineMode)> = (0..3)
        .flat_map(|s| [(s, PipelineMode::OpenSource), (s, PipelineMode::BlackBox)])
        .collect();
    let errs: Vec<String> = runs
        .par_iter()
        .filter_map(|&(s, m)| check_pipeline(s, m).err())
        .collect();
    if errs.is_empty() {
        verdict(
            true,
            "3 seeds x 2 modes deterministic, monotone, black-box audit clean",
        )
    } else {
        verdict(false, errs.join("; "))
    }
}

fn main() -> ExitCode {
    let started = Instant::now();
    let opts = ReproOptions::default();
    let outcomes: Vec<Result<ReproOutcome, String>> = Target::ALL
        .par_iter()
        .map(|&t| repro::run(t, &opts).map_err(|e| format!("{t}: {e}")))
        .collect();
    let mut by_target = std::collections::HashMap::new();
    let mut errors = Vec::new();
    for o in outcomes {
        match o {
            Ok(o) => {
                by_target.insert(o.target, o);
            }
            Err(e) => errors.push(e),
        }
    }
    let get = |ts: &[Target]| -> Result<Vec<&ReproOutcome>, String> {
        ts.iter()
            .map(|t| {
                by_target
                    .get(t)
                    .ok_or_else(|| format!("{t} did not run: {errors:?}"))
            })
            .collect()
    };
    let repro_criterion =
        |ts: &[Target], extra: &ExtraCheck| match get(ts) {
            Ok(os) => repro_verdict(&os, extra(&os)),
            Err(e) => verdict(false, e),
        };
    let none = |_: &[&ReproOutcome]| None;
    let figures_emit = |os: &[&ReproOutcome]| {
        let missing: Vec<String> = os
            .iter()
            .filter(|o| o.files.is_empty())
            .map(|o| o.target.to_string())
            .collect();
        Some((
            missing.is_empty(),
            format!("no trajectory CSV for {missing:?}"),
        ))
    };

    let criteria: Vec<(&str, Verdict)> = vec![
        (
            "table 1: gradient descent reaches the direct fit",
            repro_criterion(&[Target::Table1], &none),
        ),
        (
            "table 2: gamma_eps selects A among exact minimizers",
            repro_criterion(&[Target::Table2], &none),
        ),
        (
            "table 3: overdetermined rank-deficient data",
            repro_criterion(&[Target::Table3], &none),
        ),
        (
            "table 4: regularized rank-deficient data",
            repro_criterion(&[Target::Table4], &none),
        ),
        (
            "figs 1-3: degenerate and healthy trajectories",
            repro_criterion(&[Target::Fig1, Target::Fig2, Target::Fig3], &figures_emit),
        ),
        (
            "tables 5-6: dvhat term speeds up convergence",
            repro_criterion(&[Target::Table5, Target::Table6], &none),
        ),
        (
            "tables 7-8: secant estimates improve with directions",
            repro_criterion(&[Target::Table7, Target::Table8], &none),
        ),
        (
            "fig 7: difference-quotient step landscape",
            repro_criterion(&[Target::Fig7], &none),
        ),
        ("property suites", criterion_properties()),
        (
            "calibration beats the morph on 10 seeds",
            criterion_calibration(),
        ),
        (
            "fine-tuning ordering on 10 seeds",
            criterion_tracker_ordering(),
        ),
        ("pipeline smoke", criterion_pipeline()),
    ];

    let mut all = true;
    for (i, (name, v)) in criteria.iter().enumerate() {
        all &= v.passed;
        println!(
            "criterion {:>2} {}: {} ({})",
            i + 1,
            if v.passed { "PASS" } else { "FAIL" },
            name,
            v.detail
        );
    }
    println!(
        "acceptance: {} in {:.1} s",
        if all { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
