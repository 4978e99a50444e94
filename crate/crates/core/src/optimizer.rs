//! Gradient descent on θ_T with implicit tracker derivatives, staged
//! pipelines and sample supervision with the full tracker.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, RigError};
use crate::implicit::{
    estimate_dvhat_dtheta, solve_dt_dtheta, DirectionStrategy, JacobianEstimate, StepPolicy,
};
use crate::objective::solve_variant;
use crate::objective::{
    grad_from_solutions, loss_from_solutions, solve_all, ControlSelector, ExtraTerm,
    FilteredDerivative, GeometryTarget, LossBreakdown, ObjectiveConfig, PairDerivatives,
    PairSolutions, Problem, ResolvedVariant, TrackerVariant, TrainingPair,
};
use crate::rig::{ParamSet, Rig};
use crate::tracker::{BlackBoxTracker, FilterMask, Tracker};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LineSearch {
    #[default]
    None,
    Halving {
        max_halvings: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Stop once the loss decrease of one step drops below this (0 disables).
    pub loss_tol: f64,
    /// Stop once the total loss is at or below this.
    pub target_loss: Option<f64>,
    pub line_search: LineSearch,
    pub sample_every: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step_size: 1e-2,
            max_iters: 1000,
            grad_tol: 0.0,
            loss_tol: 0.0,
            target_loss: None,
            line_search: LineSearch::None,
            sample_every: 10,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(RigError::invalid("max_iters", "must be at least 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(RigError::invalid("step_size", "must be positive"));
        }
        if self.sample_every < 1 {
            return Err(RigError::invalid("sample_every", "must be at least 1"));
        }
        Ok(())
    }
}

/// `∂v̂/∂θ` supplied in closed form: `(pair index, variant, θ) → m × |θ|`.
pub type AnalyticDvhat =
    Arc<dyn Fn(usize, &ResolvedVariant, &DVector<f64>) -> Result<DMatrix<f64>> + Send + Sync>;

/// How the `∂v̂/∂θ` term of the implicit equation is obtained.
#[derive(Clone, Default)]
pub enum DvhatMode {
    /// Drop the term.
    #[default]
    Zero,
    /// Secant estimates, warm-started per expression across iterations.
    Estimate {
        strategy: DirectionStrategy,
        policy: StepPolicy,
    },
    Analytic(AnalyticDvhat),
}

impl std::fmt::Debug for DvhatMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DvhatMode::Zero => write!(f, "Zero"),
            DvhatMode::Estimate { strategy, policy } => f
                .debug_struct("Estimate")
                .field("strategy", strategy)
                .field("policy", policy)
                .finish(),
            DvhatMode::Analytic(_) => write!(f, "Analytic"),
        }
    }
}

#[derive(Clone, Default)]
pub struct DiffConfig {
    pub mode: DvhatMode,
    /// When set, the estimate error against this reference is traced.
    pub lvhat_reference: Option<AnalyticDvhat>,
}

impl std::fmt::Debug for DiffConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffConfig")
            .field("mode", &self.mode)
            .field("lvhat_reference", &self.lvhat_reference.is_some())
            .finish()
    }
}

impl DiffConfig {
    pub fn zero() -> Self {
        DiffConfig::default()
    }

    pub fn estimate(strategy: DirectionStrategy, policy: StepPolicy) -> Self {
        DiffConfig {
            mode: DvhatMode::Estimate { strategy, policy },
            lvhat_reference: None,
        }
    }

    pub fn analytic(f: AnalyticDvhat) -> Self {
        DiffConfig {
            mode: DvhatMode::Analytic(f),
            lvhat_reference: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    GradTol,
    LossTol,
    TargetLoss,
    LineSearchFailed,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub gamma_eps: f64,
    pub extra: Vec<f64>,
    pub total: f64,
    pub grad_norm: f64,
    pub lvhat: Option<f64>,
    /// `Σ_k ‖∂v̂_k/∂θ‖²` over the active columns, when the term is used.
    pub dvhat_sq: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Sample {
    pub id: usize,
    pub iteration: usize,
    pub theta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OptimizationReport {
    pub trajectory: Vec<Sample>,
    pub trace: Vec<TraceRow>,
    pub theta_final: Vec<f64>,
    pub chosen_theta: Vec<f64>,
    pub supervision_scores: Vec<f64>,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub final_loss: LossBreakdown,
    pub loss_evaluations: usize,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl OptimizationReport {
    /// Mean of the traced estimate error, if traced.
    pub fn mean_lvhat(&self) -> Option<f64> {
        let v: Vec<f64> = self.trace.iter().filter_map(|r| r.lvhat).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_dvhat_sq(&self) -> Option<f64> {
        let v: Vec<f64> = self.trace.iter().filter_map(|r| r.dvhat_sq).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// CSV rows `iteration,sample,gamma1,…,total,grad_norm`.
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "iteration",
            "sample",
            "gamma1",
            "gamma2",
            "gamma3",
            "gamma_eps",
            "total",
            "grad_norm",
        ])?;
        let mut samples = self.trajectory.iter().peekable();
        for r in &self.trace {
            let sample = match samples.peek() {
                Some(s) if s.iteration == r.iteration => {
                    let id = s.id.to_string();
                    samples.next();
                    id
                }
                _ => String::new(),
            };
            wr.write_record([
                r.iteration.to_string(),
                sample,
                format!("{:e}", r.gamma1),
                format!("{:e}", r.gamma2),
                format!("{:e}", r.gamma3),
                format!("{:e}", r.gamma_eps),
                format!("{:e}", r.total),
                format!("{:e}", r.grad_norm),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// CSV rows `sample,iteration,theta_0,…`.
    pub fn write_trajectory_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let n = self.theta_final.len();
        let mut header = vec!["sample".to_string(), "iteration".to_string()];
        header.extend((0..n).map(|i| format!("theta_{i}")));
        wr.write_record(&header)?;
        for s in &self.trajectory {
            let mut row = vec![s.id.to_string(), s.iteration.to_string()];
            row.extend(s.theta.iter().map(|x| format!("{x:e}")));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Per-pair secant estimates keyed by tracker variant.
pub type EstimateState = Vec<HashMap<ResolvedVariant, JacobianEstimate>>;

fn estimation_params(rig: &Rig, key: &ResolvedVariant, active: &ParamSet) -> ParamSet {
    match key {
        ResolvedVariant::Decimated(mask) => {
            active.intersection(&rig.reachable_params(&mask.active_set()))
        }
        _ => active.clone(),
    }
}

fn scatter_columns(local: &DMatrix<f64>, sub: &ParamSet, active: &ParamSet) -> DMatrix<f64> {
    if sub.len() == active.len() {
        return local.clone();
    }
    let mut out = DMatrix::zeros(local.nrows(), active.len());
    for (j, l) in sub.iter().enumerate() {
        let pos = active.position(l).expect("subset of active");
        out.set_column(pos, &local.column(j));
    }
    out
}

fn restrict_vector(x: &DVector<f64>, sub: &ParamSet, active: &ParamSet) -> DVector<f64> {
    DVector::from_iterator(
        sub.len(),
        sub.iter()
            .map(|l| x[active.position(l).expect("subset of active")]),
    )
}

struct DerivativeRequest<'a> {
    iteration: usize,
    update: bool,
    descent: Option<&'a DVector<f64>>,
}

/// `∂c/∂θ_active` for every pair and variant, optionally advancing the secant
/// estimates first. Returns the derivatives and the estimate error against
/// the reference, when one is configured, and `Σ ‖∂v̂/∂θ‖²`.
fn pair_derivatives(
    problem: &Problem<'_>,
    theta: &DVector<f64>,
    sols: &[PairSolutions],
    state: &mut EstimateState,
    diff: &DiffConfig,
    req: &DerivativeRequest<'_>,
) -> Result<(Vec<PairDerivatives>, Option<f64>, Option<f64>)> {
    let active = problem.active;
    let m = problem.rig.m_geometry();
    let anchor_full = theta;
    let results: Vec<Result<(PairDerivatives, f64, f64)>> = problem
        .pairs
        .par_iter()
        .zip(sols.par_iter())
        .zip(state.par_iter_mut())
        .enumerate()
        .map(|(k, ((pair, sol), est_map))| {
            let mut out = PairDerivatives::new();
            let mut lv = 0.0;
            let mut sq = 0.0;
            let masked = problem.config.filtered_derivative == FilteredDerivative::Masked;
            let derivative_key = |key: &ResolvedVariant| match key {
                ResolvedVariant::Filtered(_) if masked => ResolvedVariant::Full,
                _ => key.clone(),
            };
            let mut keys: Vec<ResolvedVariant> = sol.keys().map(derivative_key).collect();
            keys.sort_by_key(variant_order);
            keys.dedup();
            let mut by_key = PairDerivatives::new();
            for (key_idx, key) in keys.iter().enumerate() {
                let tracked;
                let c = match sol.get(key) {
                    Some(c) => c,
                    None => {
                        tracked = problem.tracker.track(&pair.v, anchor_full)?;
                        &tracked
                    }
                };
                let sub = estimation_params(problem.rig, key, active);
                let dvhat: Option<DMatrix<f64>> = match &diff.mode {
                    DvhatMode::Zero => None,
                    DvhatMode::Analytic(f) => {
                        let full = f(k, key, anchor_full)?;
                        check_dim(
                            "analytic dvhat columns",
                            problem.rig.n_params(),
                            full.ncols(),
                        )?;
                        Some(full.select_columns(active.indices()))
                    }
                    DvhatMode::Estimate { strategy, policy } => {
                        let anchor = sub.gather(anchor_full);
                        let est = if req.update && !sub.is_empty() {
                            let directions = match strategy {
                                DirectionStrategy::SteepestDescent => match req.descent {
                                    Some(d) => strategy.directions(
                                        sub.len(),
                                        0,
                                        Some(&restrict_vector(d, &sub, active)),
                                    )?,
                                    None => Vec::new(),
                                },
                                _ => {
                                    let stream = ((req.iteration as u64) << 24)
                                        ^ ((k as u64) << 8)
                                        ^ key_idx as u64;
                                    strategy.directions(sub.len(), stream, None)?
                                }
                            };
                            let u = |x: &DVector<f64>| -> Result<DVector<f64>> {
                                let mut th = anchor_full.clone();
                                sub.scatter_into(x, &mut th);
                                let c = solve_variant(problem.tracker, &pair.v, &th, key, None)?;
                                problem.rig.eval_with(&th, &c)
                            };
                            let warm = est_map.remove(key);
                            let (est, _) =
                                estimate_dvhat_dtheta(&u, &anchor, m, &directions, warm, policy)?;
                            est
                        } else {
                            match est_map.remove(key) {
                                Some(w) => w.reanchor(anchor)?,
                                None => JacobianEstimate::zeros(m, anchor),
                            }
                        };
                        let e = scatter_columns(&est.matrix, &sub, active);
                        est_map.insert(key.clone(), est);
                        Some(e)
                    }
                };
                if let Some(e) = &dvhat {
                    sq += e.norm_squared();
                }
                if let (Some(reference), Some(e)) = (&diff.lvhat_reference, &dvhat) {
                    let r = reference(k, key, anchor_full)?.select_columns(active.indices());
                    lv += (e - r).norm_squared();
                }
                let dt = solve_dt_dtheta(
                    problem.rig,
                    c,
                    anchor_full,
                    active,
                    dvhat.as_ref(),
                    problem.config.reg_eps,
                    key.mask(),
                )?;
                by_key.insert(key.clone(), dt);
            }
            for key in sol.keys() {
                let mut dt = by_key[&derivative_key(key)].clone();
                if let (ResolvedVariant::Filtered(mask), true) = (key, masked) {
                    for i in 0..dt.nrows() {
                        if !mask.is_active(i) {
                            dt.row_mut(i).fill(0.0);
                        }
                    }
                }
                out.insert(key.clone(), dt);
            }
            Ok((out, lv, sq))
        })
        .collect();
    let mut dts = Vec::with_capacity(results.len());
    let mut lv_total = 0.0;
    let mut sq_total = 0.0;
    for r in results {
        let (d, lv, sq) = r?;
        dts.push(d);
        lv_total += lv;
        sq_total += sq;
    }
    let sq = (!matches!(diff.mode, DvhatMode::Zero)).then_some(sq_total);
    Ok((dts, diff.lvhat_reference.as_ref().map(|_| lv_total), sq))
}

fn variant_order(v: &ResolvedVariant) -> (u8, Vec<bool>) {
    match v {
        ResolvedVariant::Full => (0, Vec::new()),
        ResolvedVariant::Filtered(m) => (1, m.as_slice().to_vec()),
        ResolvedVariant::Decimated(m) => (2, m.as_slice().to_vec()),
    }
}

/// Gradient descent on the active entries of θ_T; all other entries keep
/// their initial values.
pub fn fine_tune(
    problem: &Problem<'_>,
    theta_init: &DVector<f64>,
    opt: &OptimizerConfig,
    diff: &DiffConfig,
) -> Result<OptimizationReport> {
    let started = Instant::now();
    problem.check()?;
    opt.validate()?;
    problem.rig.check_theta(theta_init)?;
    let active = problem.active;
    let mut theta = theta_init.clone();
    let mut state: EstimateState = vec![HashMap::new(); problem.pairs.len()];
    let mut trace = Vec::new();
    let mut trajectory = Vec::new();
    let mut evaluations = 0usize;
    let mut stop = StopReason::MaxIters;
    let mut iterations = 0;
    let mut prev_total: Option<f64> = None;

    let mut sols = solve_all(problem, &theta).map_err(|e| e.with_context("iteration 0"))?;
    let mut loss = loss_from_solutions(problem, &theta, &sols)?;
    evaluations += 1;

    for it in 0..opt.max_iters {
        iterations = it + 1;
        let ctx = |e: RigError| e.with_context(format!("iteration {it}"));
        if it % opt.sample_every == 0 {
            trajectory.push(Sample {
                id: trajectory.len(),
                iteration: it,
                theta: theta.iter().copied().collect(),
            });
        }
        if opt.target_loss.is_some_and(|t| loss.total <= t) {
            stop = StopReason::TargetLoss;
            trace.push(trace_row(it, &loss, f64::NAN, None, None));
            break;
        }
        let steepest = matches!(
            diff.mode,
            DvhatMode::Estimate {
                strategy: DirectionStrategy::SteepestDescent,
                ..
            }
        );
        let descent = if steepest {
            let (dts0, _, _) = pair_derivatives(
                problem,
                &theta,
                &sols,
                &mut state,
                diff,
                &DerivativeRequest {
                    iteration: it,
                    update: false,
                    descent: None,
                },
            )
            .map_err(ctx)?;
            Some(-grad_from_solutions(problem, &theta, &sols, &dts0)?)
        } else {
            None
        };
        let (dts, lvhat, dvhat_sq) = pair_derivatives(
            problem,
            &theta,
            &sols,
            &mut state,
            diff,
            &DerivativeRequest {
                iteration: it,
                update: true,
                descent: descent.as_ref(),
            },
        )
        .map_err(ctx)?;
        let g = grad_from_solutions(problem, &theta, &sols, &dts)?;
        let gnorm = g.norm();
        trace.push(trace_row(it, &loss, gnorm, lvhat, dvhat_sq));
        if !gnorm.is_finite() {
            return Err(RigError::NonFinite {
                context: "gradient",
                theta: theta.iter().copied().collect(),
            });
        }
        if gnorm <= opt.grad_tol {
            stop = StopReason::GradTol;
            break;
        }
        if let Some(p) = prev_total {
            if opt.loss_tol > 0.0 && p - loss.total < opt.loss_tol {
                stop = StopReason::LossTol;
                break;
            }
        }
        prev_total = Some(loss.total);

        let mut eta = opt.step_size;
        let halvings = match opt.line_search {
            LineSearch::None => 0,
            LineSearch::Halving { max_halvings } => max_halvings,
        };
        let mut accepted = false;
        for h in 0..=halvings {
            let mut trial = theta.clone();
            for (i, l) in active.iter().enumerate() {
                trial[l] -= eta * g[i];
            }
            let trial_sols = solve_all(problem, &trial).map_err(ctx)?;
            let trial_loss = loss_from_solutions(problem, &trial, &trial_sols).map_err(ctx)?;
            evaluations += 1;
            if matches!(opt.line_search, LineSearch::None) || trial_loss.total < loss.total {
                theta = trial;
                sols = trial_sols;
                loss = trial_loss;
                accepted = true;
                break;
            }
            if h < halvings {
                eta *= 0.5;
            }
        }
        if !accepted {
            stop = StopReason::LineSearchFailed;
            break;
        }
    }
    let last = trajectory.last().map(|s| s.theta.as_slice());
    if last != Some(theta.as_slice()) {
        trajectory.push(Sample {
            id: trajectory.len(),
            iteration: iterations,
            theta: theta.iter().copied().collect(),
        });
    }
    let theta_final: Vec<f64> = theta.iter().copied().collect();
    Ok(OptimizationReport {
        trajectory,
        trace,
        chosen_theta: theta_final.clone(),
        theta_final,
        supervision_scores: Vec::new(),
        iterations,
        stop_reason: stop,
        final_loss: loss,
        loss_evaluations: evaluations,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

fn trace_row(
    it: usize,
    l: &LossBreakdown,
    gnorm: f64,
    lvhat: Option<f64>,
    dvhat_sq: Option<f64>,
) -> TraceRow {
    TraceRow {
        iteration: it,
        gamma1: l.gamma1,
        gamma2: l.gamma2,
        gamma3: l.gamma3,
        gamma_eps: l.gamma_eps,
        extra: l.extra.clone(),
        total: l.total,
        grad_norm: gnorm,
        lvhat,
        dvhat_sq,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    S1Decimated,
    S2FilteredPrimary,
    S3AddSpuriousSuppression,
    S4SpuriousColumns,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage_id: StageId,
    pub objective: ObjectiveConfig,
    pub active_theta: ParamSet,
    pub frozen_theta: ParamSet,
    pub per_expression: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageOutcome {
    pub theta_out: Vec<f64>,
    /// Full-θ snapshots; per-expression groups are merged sample by sample.
    pub samples: Vec<Sample>,
    pub iterations: usize,
    pub groups: Vec<Vec<String>>,
}

/// Parameters one pair can move under the stage objective.
fn pair_params(rig: &Rig, stage: &StageConfig, pair: &TrainingPair, active: &ParamSet) -> ParamSet {
    let primary = rig.primary_mask();
    let variant = if stage.objective.gamma1 > 0.0 {
        &stage.objective.variant1
    } else {
        &stage.objective.variant2
    };
    match variant {
        TrackerVariant::Full => active.clone(),
        TrackerVariant::Filtered { selector } | TrackerVariant::Decimated { selector } => {
            let mask = selector.resolve(pair, &primary);
            active.intersection(&rig.reachable_params(&mask.active_set()))
        }
    }
}

/// Merge expressions whose parameter sets overlap.
fn group_pairs(sets: &[ParamSet]) -> Vec<Vec<usize>> {
    let n = sets.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        p[i] = r;
        r
    }
    for i in 0..n {
        for j in i + 1..n {
            if !sets[i].is_disjoint(&sets[j]) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut root_of: HashMap<usize, usize> = HashMap::new();
    for (i, set) in sets.iter().enumerate() {
        if set.is_empty() {
            continue;
        }
        let r = find(&mut parent, i);
        let g = *root_of.entry(r).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    groups
}

#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    stage: &StageConfig,
    theta_in: &DVector<f64>,
    pairs: &[TrainingPair],
    tracker: &dyn Tracker,
    rig: &Rig,
    theta_r: &DVector<f64>,
    opt: &OptimizerConfig,
    diff: &DiffConfig,
) -> Result<StageOutcome> {
    let ctx = |e: RigError| e.with_context(format!("stage {:?}", stage.stage_id));
    if !stage.active_theta.is_disjoint(&stage.frozen_theta) {
        return Err(ctx(RigError::invalid(
            "stage parameters",
            "active and frozen sets overlap",
        )));
    }
    if (stage.stage_id == StageId::S1Decimated || stage.objective.uses_decimation())
        && !tracker.capabilities().supports_decimation
    {
        return Err(ctx(RigError::Unsupported("decimated tracking")));
    }
    rig.check_theta(theta_in)?;
    let active = stage.active_theta.difference(&stage.frozen_theta);

    let groups: Vec<Vec<usize>> = if stage.per_expression {
        let sets: Vec<ParamSet> = pairs
            .iter()
            .map(|p| pair_params(rig, stage, p, &active))
            .collect();
        group_pairs(&sets)
            .into_iter()
            .map(|g| g.into_iter().collect())
            .collect()
    } else if active.is_empty() {
        Vec::new()
    } else {
        vec![(0..pairs.len()).collect()]
    };

    let sets: Vec<ParamSet> = if stage.per_expression {
        groups
            .iter()
            .map(|g| {
                g.iter().fold(ParamSet::empty(), |acc, &k| {
                    acc.union(&pair_params(rig, stage, &pairs[k], &active))
                })
            })
            .collect()
    } else {
        groups.iter().map(|_| active.clone()).collect()
    };

    let reports: Vec<Result<OptimizationReport>> = groups
        .par_iter()
        .zip(sets.par_iter())
        .map(|(g, set)| {
            let sub: Vec<TrainingPair> = g.iter().map(|&k| pairs[k].clone()).collect();
            let problem = Problem {
                rig,
                tracker,
                pairs: &sub,
                theta_r,
                config: &stage.objective,
                active: set,
            };
            fine_tune(&problem, theta_in, opt, diff)
        })
        .collect();
    let reports: Vec<OptimizationReport> =
        reports.into_iter().collect::<Result<_>>().map_err(ctx)?;

    // every parameter may be changed by at most one group
    let mut owner: HashMap<usize, usize> = HashMap::new();
    let mut conflicts = Vec::new();
    for (gi, r) in reports.iter().enumerate() {
        for l in 0..theta_in.len() {
            if r.theta_final[l] != theta_in[l] {
                if let Some(&other) = owner.get(&l) {
                    if other != gi {
                        conflicts.push(l);
                    }
                } else {
                    owner.insert(l, gi);
                }
            }
        }
    }
    if !conflicts.is_empty() {
        conflicts.sort_unstable();
        conflicts.dedup();
        return Err(ctx(RigError::MergeConflict { params: conflicts }));
    }

    let merge = |pick: &dyn Fn(&OptimizationReport) -> &[f64]| -> DVector<f64> {
        let mut th = theta_in.clone();
        for (r, set) in reports.iter().zip(&sets) {
            let src = pick(r);
            for l in set.iter() {
                th[l] = src[l];
            }
        }
        th
    };
    let theta_out = merge(&|r| &r.theta_final);
    let n_samples = reports
        .iter()
        .map(|r| r.trajectory.len())
        .max()
        .unwrap_or(0);
    let mut samples = Vec::with_capacity(n_samples.max(1));
    for i in 0..n_samples {
        let th = merge(&|r| {
            let s = r
                .trajectory
                .get(i)
                .unwrap_or_else(|| r.trajectory.last().expect("nonempty trajectory"));
            &s.theta
        });
        let iteration = reports
            .iter()
            .filter_map(|r| r.trajectory.get(i).map(|s| s.iteration))
            .max()
            .unwrap_or(0);
        samples.push(Sample {
            id: i,
            iteration,
            theta: th.iter().copied().collect(),
        });
    }
    if samples.is_empty() {
        samples.push(Sample {
            id: 0,
            iteration: 0,
            theta: theta_in.iter().copied().collect(),
        });
    }
    Ok(StageOutcome {
        theta_out: theta_out.iter().copied().collect(),
        samples,
        iterations: reports.iter().map(|r| r.iterations).max().unwrap_or(0),
        groups: groups
            .iter()
            .map(|g| g.iter().map(|&k| pairs[k].name.clone()).collect())
            .collect(),
    })
}

/// Score every sample with the full tracker under `criterion` and return the
/// index of the best one (earliest on ties) with all scores.
pub fn select_best_sample(
    samples: &[DVector<f64>],
    pairs: &[TrainingPair],
    full_tracker: &dyn Tracker,
    rig: &Rig,
    theta_r: &DVector<f64>,
    criterion: &ObjectiveConfig,
) -> Result<(usize, Vec<f64>)> {
    if samples.is_empty() {
        return Err(RigError::invalid(
            "samples",
            "at least one sample is required",
        ));
    }
    let criterion = criterion.clone().with_variants(TrackerVariant::Full);
    let all = ParamSet::all(rig.n_params());
    let problem = Problem {
        rig,
        tracker: full_tracker,
        pairs,
        theta_r,
        config: &criterion,
        active: &all,
    };
    problem.check()?;
    let scores: Vec<f64> = samples
        .iter()
        .map(|th| {
            let sols = solve_all(&problem, th)?;
            Ok(loss_from_solutions(&problem, th, &sols)?.total)
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[best] {
            best = i;
        }
    }
    Ok((best, scores))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    OpenSource,
    BlackBox,
}

impl PipelineMode {
    pub fn default_stages(self) -> Vec<StageId> {
        match self {
            PipelineMode::OpenSource => vec![
                StageId::S1Decimated,
                StageId::S2FilteredPrimary,
                StageId::S3AddSpuriousSuppression,
                StageId::S4SpuriousColumns,
            ],
            PipelineMode::BlackBox => vec![
                StageId::S2FilteredPrimary,
                StageId::S3AddSpuriousSuppression,
                StageId::S4SpuriousColumns,
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub mode: PipelineMode,
    /// `None` uses the mode's default stage list.
    pub stages: Option<Vec<StageId>>,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma_eps: f64,
    pub spurious_weight: f64,
    pub reg_eps: f64,
    pub filtered_derivative: FilteredDerivative,
    pub geometry_target: GeometryTarget,
    pub per_expression: bool,
    pub supervise: bool,
    /// Criterion used by the supervision step.
    pub supervision: ObjectiveConfig,
    /// Score supervision candidates against the intent instead of `c⁺`.
    pub supervise_against_intent: bool,
    /// Reject candidates whose primary-control error exceeds the stage input's.
    pub monotone_primary: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: PipelineMode::OpenSource,
            stages: None,
            gamma1: 1.0,
            gamma2: 1.0,
            gamma_eps: 1e-3,
            spurious_weight: 1.0,
            reg_eps: 0.0,
            filtered_derivative: FilteredDerivative::Restricted,
            geometry_target: GeometryTarget::Recompute,
            per_expression: true,
            supervise: true,
            supervision: ObjectiveConfig::weights(1.0, 0.0, 0.0, 0.0),
            supervise_against_intent: true,
            monotone_primary: true,
        }
    }
}

impl PipelineConfig {
    pub fn stage_list(&self) -> Vec<StageId> {
        self.stages
            .clone()
            .unwrap_or_else(|| self.mode.default_stages())
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == PipelineMode::BlackBox && self.stage_list().contains(&StageId::S1Decimated)
        {
            return Err(RigError::invalid(
                "pipeline stages",
                "a black-box tracker cannot run the decimated stage",
            ));
        }
        Ok(())
    }
}

/// Parameters reachable from the primary controls each expression intends.
pub fn primary_columns(rig: &Rig, pairs: &[TrainingPair]) -> ParamSet {
    let primary = rig.primary_mask();
    pairs.iter().fold(ParamSet::empty(), |acc, p| {
        let mask = ControlSelector::IntentActivePrimary.resolve(p, &primary);
        acc.union(&rig.reachable_params(&mask.active_set()))
    })
}

/// Parameters touched by controls some expression does not intend.
pub fn spurious_columns(rig: &Rig, pairs: &[TrainingPair]) -> ParamSet {
    let primary = rig.primary_mask();
    let spurious = pairs.iter().fold(ParamSet::empty(), |acc, p| {
        acc.union(&ControlSelector::Spurious.resolve(p, &primary).active_set())
    });
    rig.touched_params(&spurious)
        .difference(&primary_columns(rig, pairs))
}

pub fn build_stage(
    id: StageId,
    cfg: &PipelineConfig,
    rig: &Rig,
    pairs: &[TrainingPair],
) -> StageConfig {
    let primary = primary_columns(rig, pairs);
    let base = ObjectiveConfig {
        gamma1: cfg.gamma1,
        gamma2: cfg.gamma2,
        gamma3: 0.0,
        gamma_eps: cfg.gamma_eps,
        reg_eps: cfg.reg_eps,
        filtered_derivative: cfg.filtered_derivative,
        geometry_target: cfg.geometry_target,
        ..Default::default()
    };
    let filtered = TrackerVariant::Filtered {
        selector: ControlSelector::IntentActivePrimary,
    };
    let suppress = ExtraTerm {
        selector: ControlSelector::Spurious,
        target_zero: true,
        weight: cfg.spurious_weight,
    };
    match id {
        StageId::S1Decimated => StageConfig {
            stage_id: id,
            objective: base.with_variants(TrackerVariant::Decimated {
                selector: ControlSelector::IntentActivePrimary,
            }),
            active_theta: primary,
            frozen_theta: ParamSet::empty(),
            per_expression: cfg.per_expression,
        },
        StageId::S2FilteredPrimary => StageConfig {
            stage_id: id,
            objective: base.with_variants(filtered),
            active_theta: primary,
            frozen_theta: ParamSet::empty(),
            per_expression: cfg.per_expression,
        },
        StageId::S3AddSpuriousSuppression => {
            let mut objective = base.with_variants(filtered);
            objective.extra_gamma1_terms.push(suppress);
            // suppression of one expression moves columns owned by others
            StageConfig {
                stage_id: id,
                objective,
                active_theta: primary,
                frozen_theta: ParamSet::empty(),
                per_expression: false,
            }
        }
        StageId::S4SpuriousColumns => {
            let mut objective = base.with_variants(filtered);
            objective.extra_gamma1_terms.push(suppress);
            StageConfig {
                stage_id: id,
                objective,
                active_theta: spurious_columns(rig, pairs),
                frozen_theta: primary,
                per_expression: false,
            }
        }
    }
}

/// Primary-control error and spurious activation for one θ_T, full tracker.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ErrorSummary {
    /// `Σ_k ‖H_p (T(v_k) − c⁺_k)‖²` over each expression's intended primary controls.
    pub primary_gamma1: f64,
    /// `Σ_k Σ_{i spurious} |T_i(v_k)|`.
    pub spurious_sum: f64,
    pub per_expression: Vec<(String, f64, f64)>,
}

pub fn summarize(
    tracker: &dyn Tracker,
    rig: &Rig,
    pairs: &[TrainingPair],
    theta: &DVector<f64>,
) -> Result<ErrorSummary> {
    let primary = rig.primary_mask();
    let rows: Vec<(String, f64, f64)> = pairs
        .par_iter()
        .map(|p| {
            let c = tracker.track(&p.v, theta)?;
            let hp: FilterMask = ControlSelector::IntentActivePrimary.resolve(p, &primary);
            let hs = ControlSelector::Spurious.resolve(p, &primary);
            let e = hp.apply(&(&c - &p.c_plus)).norm_squared();
            let s = hs.apply(&c).iter().map(|x| x.abs()).sum();
            Ok((p.name.clone(), e, s))
        })
        .collect::<Result<_>>()?;
    Ok(ErrorSummary {
        primary_gamma1: rows.iter().map(|r| r.1).sum(),
        spurious_sum: rows.iter().map(|r| r.2).sum(),
        per_expression: rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: StageId,
    pub before: ErrorSummary,
    pub after: ErrorSummary,
    pub iterations: usize,
    pub groups: Vec<Vec<String>>,
    pub chosen_sample: usize,
    pub supervision_scores: Vec<f64>,
    /// Full-θ snapshots taken during the stage.
    pub trajectory: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineReport {
    pub mode: PipelineMode,
    pub initial: ErrorSummary,
    pub stages: Vec<StageReport>,
    pub theta_final: Vec<f64>,
}

impl PipelineReport {
    /// CSV rows `stage,expression,primary_before,primary_after,spurious_before,spurious_after`.
    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "stage",
            "expression",
            "primary_before",
            "primary_after",
            "spurious_before",
            "spurious_after",
        ])?;
        for s in &self.stages {
            for (b, a) in s.before.per_expression.iter().zip(&s.after.per_expression) {
                wr.write_record([
                    format!("{:?}", s.stage),
                    b.0.clone(),
                    format!("{:e}", b.1),
                    format!("{:e}", a.1),
                    format!("{:e}", b.2),
                    format!("{:e}", a.2),
                ])?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// Run the staged pipeline from `theta_in`. In black-box mode the tracker is
/// wrapped so that only `track` is reachable.
#[allow(clippy::too_many_arguments)]
pub fn run_pipeline(
    cfg: &PipelineConfig,
    theta_in: &DVector<f64>,
    pairs: &[TrainingPair],
    tracker: &dyn Tracker,
    rig: &Rig,
    theta_r: &DVector<f64>,
    opt: &OptimizerConfig,
    diff: &DiffConfig,
) -> Result<PipelineReport> {
    cfg.validate()?;
    let boxed;
    let tracker: &dyn Tracker = match cfg.mode {
        PipelineMode::OpenSource => {
            if cfg.stage_list().contains(&StageId::S1Decimated)
                && !tracker.capabilities().supports_decimation
            {
                return Err(RigError::Unsupported("decimated tracking"));
            }
            tracker
        }
        PipelineMode::BlackBox => {
            boxed = BlackBoxTracker(tracker);
            &boxed
        }
    };
    let initial = summarize(tracker, rig, pairs, theta_in)?;
    let mut theta = theta_in.clone();
    let mut stages = Vec::new();
    for id in cfg.stage_list() {
        let stage = build_stage(id, cfg, rig, pairs);
        let before = summarize(tracker, rig, pairs, &theta)?;
        let outcome = run_stage(&stage, &theta, pairs, tracker, rig, theta_r, opt, diff)?;
        let (chosen, scores, next) = if cfg.supervise {
            let mut candidates = vec![theta.clone()];
            candidates.extend(
                outcome
                    .samples
                    .iter()
                    .map(|s| DVector::from_column_slice(&s.theta)),
            );
            candidates.push(DVector::from_column_slice(&outcome.theta_out));
            let sup_pairs: Vec<TrainingPair> = if cfg.supervise_against_intent {
                pairs
                    .iter()
                    .map(|p| p.clone().with_c_plus(p.intent.clone()))
                    .collect()
            } else {
                pairs.to_vec()
            };
            let (mut best, scores) = select_best_sample(
                &candidates,
                &sup_pairs,
                tracker,
                rig,
                theta_r,
                &cfg.supervision,
            )?;
            if cfg.monotone_primary {
                let limit = before.primary_gamma1;
                best = 0;
                for (i, th) in candidates.iter().enumerate().skip(1) {
                    if scores[i] < scores[best]
                        && summarize(tracker, rig, pairs, th)?.primary_gamma1 <= limit
                    {
                        best = i;
                    }
                }
            }
            (best, scores, candidates.swap_remove(best))
        } else {
            (
                0,
                Vec::new(),
                DVector::from_column_slice(&outcome.theta_out),
            )
        };
        theta = next;
        let after = summarize(tracker, rig, pairs, &theta)?;
        stages.push(StageReport {
            stage: id,
            before,
            after,
            iterations: outcome.iterations,
            groups: outcome.groups,
            chosen_sample: chosen,
            supervision_scores: scores,
            trajectory: outcome.samples,
        });
    }
    Ok(PipelineReport {
        mode: cfg.mode,
        initial,
        stages,
        theta_final: theta.iter().copied().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rig::LinearRig;
    use crate::tracker::{RigInverseTracker, SolveMode};

    fn diag_problem() -> (Rig, Vec<TrainingPair>) {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 2.0, -2.0 / 3.0]));
        let cols = [
            [1.0, 2.0, 3.0],
            [2.0, -1.0, -1.0],
            [3.0, 1.0, -2.0],
            [1.0, 1.0, 1.0],
        ];
        let pairs = cols
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let c = DVector::from_row_slice(c);
                TrainingPair::new(format!("p{k}"), c.clone(), &a * c)
            })
            .collect();
        (LinearRig::from_matrix(&a).into(), pairs)
    }

    #[test]
    fn stationary_start_stops_immediately() {
        let (rig, pairs) = diag_problem();
        let tracker = RigInverseTracker::new(rig.clone()).with_mode(SolveMode::Inverse);
        let cfg = ObjectiveConfig::weights(1.0, 0.0, 0.0, 0.0);
        let active = ParamSet::all(9);
        let p = Problem {
            rig: &rig,
            tracker: &tracker,
            pairs: &pairs,
            theta_r: rig.theta(),
            config: &cfg,
            active: &active,
        };
        let r = fine_tune(
            &p,
            rig.theta(),
            &OptimizerConfig::default(),
            &DiffConfig::zero(),
        )
        .unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.stop_reason, StopReason::GradTol);
    }

    #[test]
    fn frozen_entries_untouched() {
        let (rig, pairs) = diag_problem();
        let tracker = RigInverseTracker::new(rig.clone()).with_mode(SolveMode::Inverse);
        let cfg = ObjectiveConfig::weights(1.0, 0.0, 0.0, 0.0);
        let active = ParamSet::new(vec![0, 4]);
        let id = Rig::from(LinearRig::from_matrix(&DMatrix::identity(3, 3)));
        let p = Problem {
            rig: &rig,
            tracker: &tracker,
            pairs: &pairs,
            theta_r: rig.theta(),
            config: &cfg,
            active: &active,
        };
        let opt = OptimizerConfig {
            max_iters: 50,
            sample_every: 5,
            ..Default::default()
        };
        let r = fine_tune(&p, id.theta(), &opt, &DiffConfig::zero()).unwrap();
        for s in &r.trajectory {
            for l in [1, 2, 3, 5, 6, 7, 8] {
                assert_eq!(s.theta[l].to_bits(), id.theta()[l].to_bits());
            }
        }
    }

    #[test]
    fn halving_never_increases() {
        let (rig, pairs) = diag_problem();
        let tracker = RigInverseTracker::new(rig.clone()).with_mode(SolveMode::Inverse);
        let cfg = ObjectiveConfig::weights(1.0, 1.0, 0.0, 0.0);
        let active = ParamSet::all(9);
        let id = Rig::from(LinearRig::from_matrix(&DMatrix::identity(3, 3)));
        let p = Problem {
            rig: &rig,
            tracker: &tracker,
            pairs: &pairs,
            theta_r: rig.theta(),
            config: &cfg,
            active: &active,
        };
        let opt = OptimizerConfig {
            step_size: 1.0,
            max_iters: 200,
            line_search: LineSearch::Halving { max_halvings: 30 },
            ..Default::default()
        };
        let r = fine_tune(&p, id.theta(), &opt, &DiffConfig::zero()).unwrap();
        for w in r.trace.windows(2) {
            assert!(w[1].total <= w[0].total);
        }
    }

    #[test]
    fn single_sample_is_selected() {
        let (rig, pairs) = diag_problem();
        let tracker = RigInverseTracker::new(rig.clone()).with_mode(SolveMode::Inverse);
        let crit = ObjectiveConfig::weights(1.0, 0.0, 0.0, 0.0);
        let (best, _) = select_best_sample(
            &[rig.theta().clone()],
            &pairs,
            &tracker,
            &rig,
            rig.theta(),
            &crit,
        )
        .unwrap();
        assert_eq!(best, 0);
        let id = Rig::from(LinearRig::from_matrix(&DMatrix::identity(3, 3)));
        let (best, scores) = select_best_sample(
            &[id.theta().clone(), rig.theta().clone()],
            &pairs,
            &tracker,
            &rig,
            rig.theta(),
            &crit,
        )
        .unwrap();
        assert_eq!(best, 1);
        assert!(scores[1] < 1e-20);
    }

    #[test]
    fn grouping_merges_overlaps() {
        let sets = vec![
            ParamSet::new(vec![0, 1]),
            ParamSet::new(vec![2]),
            ParamSet::new(vec![1, 3]),
            ParamSet::empty(),
        ];
        assert_eq!(group_pairs(&sets), vec![vec![0, 2], vec![1]]);
    }

    #[test]
    fn black_box_rejects_decimated_stage() {
        let cfg = PipelineConfig {
            mode: PipelineMode::BlackBox,
            stages: Some(vec![StageId::S1Decimated]),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
