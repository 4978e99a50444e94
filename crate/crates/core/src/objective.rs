//! Fine-tuning objective: control error (γ1), geometry error on the animation
//! rig (γ2) and on the tracker rig (γ3), a pull toward θ_R (γ_ε), and extra
//! control-suppression terms. Gradients are assembled from per-pair `∂T/∂θ`.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, RigError};
use crate::fitting::{ExpressionPair, ACTIVATION_TOL};
use crate::linalg::pinv_solve;
use crate::rig::{ParamSet, Rig};
use crate::tracker::{FilterMask, Tracker};

/// A fine-tuning pair: tracker input `v`, target controls `c⁺` and the
/// original intent `c` (before augmentation).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub name: String,
    pub v: DVector<f64>,
    pub c_plus: DVector<f64>,
    pub intent: DVector<f64>,
    pub geometry_mask: Option<Vec<usize>>,
}

impl TrainingPair {
    pub fn new(name: impl Into<String>, c: DVector<f64>, v: DVector<f64>) -> Self {
        TrainingPair {
            name: name.into(),
            v,
            intent: c.clone(),
            c_plus: c,
            geometry_mask: None,
        }
    }

    pub fn from_expression(p: &ExpressionPair) -> Self {
        TrainingPair {
            name: p.name.clone(),
            v: p.v.clone(),
            c_plus: p.c.clone(),
            intent: p.c.clone(),
            geometry_mask: p.geometry_mask.clone(),
        }
    }

    pub fn with_c_plus(mut self, c_plus: DVector<f64>) -> Self {
        self.c_plus = c_plus;
        self
    }

    fn mask_rows(&self, r: &mut DVector<f64>) {
        if let Some(mask) = &self.geometry_mask {
            for i in 0..r.len() {
                if mask.binary_search(&i).is_err() {
                    r[i] = 0.0;
                }
            }
        }
    }
}

/// Which controls a filter or decimation keeps for a given pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ControlSelector {
    All,
    /// Nonzero in `c⁺`.
    TargetActive,
    /// Nonzero in the intent.
    IntentActive,
    /// Nonzero in the intent and primary.
    IntentActivePrimary,
    /// Zero in the intent: controls the tracker should leave alone.
    Spurious,
    Explicit {
        indices: Vec<usize>,
    },
}

impl ControlSelector {
    pub fn resolve(&self, pair: &TrainingPair, primary: &[bool]) -> FilterMask {
        let n = pair.c_plus.len();
        let on = |x: f64| x.abs() > ACTIVATION_TOL;
        match self {
            ControlSelector::All => FilterMask::all(n),
            ControlSelector::TargetActive => FilterMask::from_controls(&pair.c_plus),
            ControlSelector::IntentActive => FilterMask::from_controls(&pair.intent),
            ControlSelector::IntentActivePrimary => {
                FilterMask::new((0..n).map(|i| on(pair.intent[i]) && primary[i]).collect())
            }
            ControlSelector::Spurious => {
                FilterMask::new(pair.intent.iter().map(|&x| !on(x)).collect())
            }
            ControlSelector::Explicit { indices } => FilterMask::from_indices(n, indices),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TrackerVariant {
    #[default]
    Full,
    Filtered {
        selector: ControlSelector,
    },
    Decimated {
        selector: ControlSelector,
    },
}

/// A tracker variant with its mask resolved for one pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ResolvedVariant {
    Full,
    Filtered(FilterMask),
    Decimated(FilterMask),
}

impl ResolvedVariant {
    pub fn mask(&self) -> Option<&FilterMask> {
        match self {
            ResolvedVariant::Full => None,
            ResolvedVariant::Filtered(m) | ResolvedVariant::Decimated(m) => Some(m),
        }
    }

    pub fn is_decimated(&self) -> bool {
        matches!(self, ResolvedVariant::Decimated(_))
    }
}

impl TrackerVariant {
    pub fn resolve(&self, pair: &TrainingPair, primary: &[bool]) -> ResolvedVariant {
        match self {
            TrackerVariant::Full => ResolvedVariant::Full,
            TrackerVariant::Filtered { selector } => {
                ResolvedVariant::Filtered(selector.resolve(pair, primary))
            }
            TrackerVariant::Decimated { selector } => {
                ResolvedVariant::Decimated(selector.resolve(pair, primary))
            }
        }
    }

    pub fn is_decimated(&self) -> bool {
        matches!(self, TrackerVariant::Decimated { .. })
    }
}

/// Extra γ1-type term `w ‖H (T − target)‖²` on a control subset; the target
/// is zero when `target_zero` and `c⁺` otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtraTerm {
    pub selector: ControlSelector,
    pub target_zero: bool,
    pub weight: f64,
}

/// Geometry compared against in the γ2/γ3 terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryTarget {
    /// `v⁺ = R(c⁺; θ_R)`.
    #[default]
    Recompute,
    /// The pair's own geometry `v`.
    Input,
}

/// How `∂(H T)/∂θ` is formed for filtered trackers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilteredDerivative {
    /// Solve with only the kept controls, as for the decimated tracker.
    #[default]
    Restricted,
    /// `H ∂T/∂θ` from the full system.
    Masked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub gamma_eps: f64,
    pub variant1: TrackerVariant,
    pub variant2: TrackerVariant,
    pub variant3: TrackerVariant,
    pub extra_gamma1_terms: Vec<ExtraTerm>,
    pub geometry_target: GeometryTarget,
    /// Regularization rows in the implicit solve.
    pub reg_eps: f64,
    pub filtered_derivative: FilteredDerivative,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            gamma1: 1.0,
            gamma2: 1.0,
            gamma3: 0.0,
            gamma_eps: 1e-3,
            variant1: TrackerVariant::Full,
            variant2: TrackerVariant::Full,
            variant3: TrackerVariant::Full,
            extra_gamma1_terms: Vec::new(),
            geometry_target: GeometryTarget::Recompute,
            reg_eps: 0.0,
            filtered_derivative: FilteredDerivative::Restricted,
        }
    }
}

impl ObjectiveConfig {
    /// Only the given weights nonzero.
    pub fn weights(gamma1: f64, gamma2: f64, gamma3: f64, gamma_eps: f64) -> Self {
        ObjectiveConfig {
            gamma1,
            gamma2,
            gamma3,
            gamma_eps,
            ..Default::default()
        }
    }

    pub fn with_variants(mut self, v: TrackerVariant) -> Self {
        self.variant1 = v.clone();
        self.variant2 = v.clone();
        self.variant3 = v;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ws = [self.gamma1, self.gamma2, self.gamma3, self.gamma_eps];
        if ws.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
            || self.extra_gamma1_terms.iter().any(|t| !(t.weight >= 0.0))
        {
            return Err(RigError::invalid(
                "objective weights",
                "must be finite and nonnegative",
            ));
        }
        if ws.iter().all(|&w| w == 0.0) && self.extra_gamma1_terms.iter().all(|t| t.weight == 0.0) {
            return Err(RigError::invalid(
                "objective weights",
                "at least one weight must be positive",
            ));
        }
        if !(self.reg_eps >= 0.0) {
            return Err(RigError::invalid("reg_eps", "must be nonnegative"));
        }
        Ok(())
    }

    pub fn uses_decimation(&self) -> bool {
        (self.gamma1 > 0.0 && self.variant1.is_decimated())
            || (self.gamma2 > 0.0 && self.variant2.is_decimated())
            || (self.gamma3 > 0.0 && self.variant3.is_decimated())
    }

    /// Distinct resolved variants needed for one pair.
    pub fn variants_for(&self, pair: &TrainingPair, primary: &[bool]) -> Vec<ResolvedVariant> {
        let mut out: Vec<ResolvedVariant> = Vec::new();
        let mut push = |v: ResolvedVariant| {
            if !out.contains(&v) {
                out.push(v);
            }
        };
        if self.gamma1 > 0.0 {
            push(self.variant1.resolve(pair, primary));
        }
        if self.gamma2 > 0.0 {
            push(self.variant2.resolve(pair, primary));
        }
        if self.gamma3 > 0.0 {
            push(self.variant3.resolve(pair, primary));
        }
        for t in &self.extra_gamma1_terms {
            if t.weight > 0.0 {
                push(ResolvedVariant::Filtered(t.selector.resolve(pair, primary)));
            }
        }
        out
    }
}

/// Everything that stays fixed while θ_T moves.
#[derive(Clone, Copy)]
pub struct Problem<'a> {
    pub rig: &'a Rig,
    pub tracker: &'a dyn Tracker,
    pub pairs: &'a [TrainingPair],
    pub theta_r: &'a DVector<f64>,
    pub config: &'a ObjectiveConfig,
    pub active: &'a ParamSet,
}

impl<'a> Problem<'a> {
    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        if self.pairs.is_empty() {
            return Err(RigError::invalid(
                "training pairs",
                "at least one pair is required",
            ));
        }
        self.rig.check_theta(self.theta_r)?;
        check_dim(
            "tracker controls",
            self.rig.n_controls(),
            self.tracker.n_controls(),
        )?;
        for p in self.pairs {
            check_dim("pair controls", self.rig.n_controls(), p.c_plus.len())?;
            check_dim("pair intent", self.rig.n_controls(), p.intent.len())?;
            check_dim("pair geometry", self.rig.m_geometry(), p.v.len())?;
        }
        if self
            .active
            .max_index()
            .is_some_and(|i| i >= self.rig.n_params())
        {
            return Err(RigError::invalid("active parameters", "index out of range"));
        }
        if self.config.uses_decimation() && !self.tracker.capabilities().supports_decimation {
            return Err(RigError::Unsupported("decimated tracking"));
        }
        Ok(())
    }

    pub fn primary(&self) -> Vec<bool> {
        self.rig.primary_mask()
    }

    pub fn v_plus(&self, pair: &TrainingPair) -> Result<DVector<f64>> {
        match self.config.geometry_target {
            GeometryTarget::Recompute => self.rig.eval_with(self.theta_r, &pair.c_plus),
            GeometryTarget::Input => Ok(pair.v.clone()),
        }
    }
}

/// Tracker output for one variant, always full length.
pub fn solve_variant(
    tracker: &dyn Tracker,
    v: &DVector<f64>,
    theta_t: &DVector<f64>,
    variant: &ResolvedVariant,
    full: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    match variant {
        ResolvedVariant::Full => match full {
            Some(c) => Ok(c.clone()),
            None => tracker.track(v, theta_t),
        },
        ResolvedVariant::Filtered(mask) => match full {
            Some(c) => Ok(mask.apply(c)),
            None => Ok(mask.apply(&tracker.track(v, theta_t)?)),
        },
        ResolvedVariant::Decimated(mask) => {
            if mask.count() == 0 {
                return Ok(DVector::zeros(mask.len()));
            }
            Ok(mask.embed(&tracker.track_decimated(v, theta_t, mask)?))
        }
    }
}

/// Tracker outputs for every variant a pair needs.
pub type PairSolutions = HashMap<ResolvedVariant, DVector<f64>>;
/// `∂c/∂θ_active` for every variant a pair needs.
pub type PairDerivatives = HashMap<ResolvedVariant, DMatrix<f64>>;

pub fn solve_pair(
    problem: &Problem<'_>,
    pair: &TrainingPair,
    theta_t: &DVector<f64>,
) -> Result<PairSolutions> {
    let variants = problem.config.variants_for(pair, &problem.primary());
    let needs_full = variants.iter().any(|v| !v.is_decimated());
    let full = if needs_full {
        Some(problem.tracker.track(&pair.v, theta_t)?)
    } else {
        None
    };
    variants
        .into_iter()
        .map(|key| {
            let c = solve_variant(problem.tracker, &pair.v, theta_t, &key, full.as_ref())?;
            Ok((key, c))
        })
        .collect()
}

pub fn solve_all(problem: &Problem<'_>, theta_t: &DVector<f64>) -> Result<Vec<PairSolutions>> {
    problem
        .pairs
        .par_iter()
        .map(|p| {
            solve_pair(problem, p, theta_t)
                .map_err(|e| e.with_context(format!("expression '{}'", p.name)))
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PairLoss {
    pub name: String,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub extra: Vec<f64>,
}

/// Unweighted term sums, the weights used, and the weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub gamma_eps: f64,
    pub extra: Vec<f64>,
    pub weights: [f64; 4],
    pub extra_weights: Vec<f64>,
    pub per_expression: Vec<PairLoss>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn recompute_total(&self) -> f64 {
        let [w1, w2, w3, we] = self.weights;
        w1 * self.gamma1
            + w2 * self.gamma2
            + w3 * self.gamma3
            + we * self.gamma_eps
            + self
                .extra
                .iter()
                .zip(&self.extra_weights)
                .map(|(l, w)| l * w)
                .sum::<f64>()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

struct PairResiduals {
    r1: Option<DVector<f64>>,
    r2: Option<DVector<f64>>,
    r3: Option<DVector<f64>>,
    extra: Vec<Option<DVector<f64>>>,
}

fn control_target(variant: &ResolvedVariant, c_plus: &DVector<f64>) -> DVector<f64> {
    match variant.mask() {
        None => c_plus.clone(),
        Some(m) => m.apply(c_plus),
    }
}

fn pair_residuals(
    problem: &Problem<'_>,
    pair: &TrainingPair,
    theta_t: &DVector<f64>,
    sol: &PairSolutions,
    primary: &[bool],
) -> Result<PairResiduals> {
    let cfg = problem.config;
    let get = |v: &ResolvedVariant| {
        sol.get(v).ok_or_else(|| {
            RigError::invalid(
                "pair solutions",
                format!("missing variant for '{}'", pair.name),
            )
        })
    };
    let v_plus = if cfg.gamma2 > 0.0 || cfg.gamma3 > 0.0 {
        Some(problem.v_plus(pair)?)
    } else {
        None
    };
    let r1 = if cfg.gamma1 > 0.0 {
        let key = cfg.variant1.resolve(pair, primary);
        Some(get(&key)? - control_target(&key, &pair.c_plus))
    } else {
        None
    };
    let r2 = if cfg.gamma2 > 0.0 {
        let key = cfg.variant2.resolve(pair, primary);
        let mut r = problem.rig.eval_with(problem.theta_r, get(&key)?)? - v_plus.as_ref().unwrap();
        pair.mask_rows(&mut r);
        Some(r)
    } else {
        None
    };
    let r3 = if cfg.gamma3 > 0.0 {
        let key = cfg.variant3.resolve(pair, primary);
        let mut r = problem.rig.eval_with(theta_t, get(&key)?)? - v_plus.as_ref().unwrap();
        pair.mask_rows(&mut r);
        Some(r)
    } else {
        None
    };
    let extra = cfg
        .extra_gamma1_terms
        .iter()
        .map(|t| {
            if t.weight == 0.0 {
                return Ok(None);
            }
            let key = ResolvedVariant::Filtered(t.selector.resolve(pair, primary));
            let c = get(&key)?;
            Ok(Some(if t.target_zero {
                c.clone()
            } else {
                c - control_target(&key, &pair.c_plus)
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairResiduals { r1, r2, r3, extra })
}

fn sq(r: &Option<DVector<f64>>) -> f64 {
    r.as_ref().map_or(0.0, |r| r.norm_squared())
}

/// Loss from already computed tracker outputs.
pub fn loss_from_solutions(
    problem: &Problem<'_>,
    theta_t: &DVector<f64>,
    sols: &[PairSolutions],
) -> Result<LossBreakdown> {
    check_dim("pair solutions", problem.pairs.len(), sols.len())?;
    let cfg = problem.config;
    let primary = problem.primary();
    let per: Vec<PairLoss> = problem
        .pairs
        .par_iter()
        .zip(sols.par_iter())
        .map(|(pair, sol)| {
            let r = pair_residuals(problem, pair, theta_t, sol, &primary)?;
            Ok(PairLoss {
                name: pair.name.clone(),
                gamma1: sq(&r.r1),
                gamma2: sq(&r.r2),
                gamma3: sq(&r.r3),
                extra: r.extra.iter().map(sq).collect(),
            })
        })
        .collect::<Result<_>>()?;
    let n_extra = cfg.extra_gamma1_terms.len();
    let mut out = LossBreakdown {
        weights: [cfg.gamma1, cfg.gamma2, cfg.gamma3, cfg.gamma_eps],
        extra_weights: cfg.extra_gamma1_terms.iter().map(|t| t.weight).collect(),
        extra: vec![0.0; n_extra],
        ..Default::default()
    };
    for p in &per {
        out.gamma1 += p.gamma1;
        out.gamma2 += p.gamma2;
        out.gamma3 += p.gamma3;
        for (a, b) in out.extra.iter_mut().zip(&p.extra) {
            *a += b;
        }
    }
    if cfg.gamma_eps > 0.0 {
        out.gamma_eps = problem
            .active
            .iter()
            .map(|l| (theta_t[l] - problem.theta_r[l]).powi(2))
            .sum();
    }
    out.per_expression = per;
    out.total = out.recompute_total();
    if !out.total.is_finite() {
        return Err(RigError::NonFinite {
            context: "objective",
            theta: theta_t.iter().copied().collect(),
        });
    }
    Ok(out)
}

pub fn eval_objective(problem: &Problem<'_>, theta_t: &DVector<f64>) -> Result<LossBreakdown> {
    problem.check()?;
    problem.rig.check_theta(theta_t)?;
    let sols = solve_all(problem, theta_t)?;
    loss_from_solutions(problem, theta_t, &sols)
}

/// Gradient over the active parameters from tracker outputs and per-variant
/// `∂c/∂θ` (each `n × |active|`).
pub fn grad_from_solutions(
    problem: &Problem<'_>,
    theta_t: &DVector<f64>,
    sols: &[PairSolutions],
    dts: &[PairDerivatives],
) -> Result<DVector<f64>> {
    check_dim("pair derivatives", problem.pairs.len(), dts.len())?;
    let cfg = problem.config;
    let primary = problem.primary();
    let k = problem.active.len();
    let parts: Vec<DVector<f64>> = problem
        .pairs
        .par_iter()
        .zip(sols.par_iter().zip(dts.par_iter()))
        .map(|(pair, (sol, dt))| {
            let r = pair_residuals(problem, pair, theta_t, sol, &primary)?;
            let d = |key: &ResolvedVariant| -> Result<&DMatrix<f64>> {
                let m = dt.get(key).ok_or_else(|| {
                    RigError::invalid(
                        "pair derivatives",
                        format!("missing variant for '{}'", pair.name),
                    )
                })?;
                check_dim("dT/dtheta columns", k, m.ncols())?;
                Ok(m)
            };
            let mut g = DVector::zeros(k);
            if let Some(r1) = &r.r1 {
                let key = cfg.variant1.resolve(pair, &primary);
                g += (d(&key)?.transpose() * r1) * (2.0 * cfg.gamma1);
            }
            if let Some(r2) = &r.r2 {
                let key = cfg.variant2.resolve(pair, &primary);
                let jc = problem
                    .rig
                    .jacobian_controls_with(problem.theta_r, &sol[&key])?;
                g += (d(&key)?.transpose() * (jc.transpose() * r2)) * (2.0 * cfg.gamma2);
            }
            if let Some(r3) = &r.r3 {
                let key = cfg.variant3.resolve(pair, &primary);
                let c = &sol[&key];
                let jc = problem.rig.jacobian_controls_with(theta_t, c)?;
                let jp = problem.rig.jacobian_params(c)?;
                g += (d(&key)?.transpose() * (jc.transpose() * r3)
                    + jp.transpose_mul(r3, problem.active))
                    * (2.0 * cfg.gamma3);
            }
            for (t, re) in cfg.extra_gamma1_terms.iter().zip(&r.extra) {
                if let Some(re) = re {
                    let key = ResolvedVariant::Filtered(t.selector.resolve(pair, &primary));
                    g += (d(&key)?.transpose() * re) * (2.0 * t.weight);
                }
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut g = DVector::zeros(k);
    for p in parts {
        g += p;
    }
    if cfg.gamma_eps > 0.0 {
        for (i, l) in problem.active.iter().enumerate() {
            g[i] += 2.0 * cfg.gamma_eps * (theta_t[l] - problem.theta_r[l]);
        }
    }
    Ok(g)
}

/// Gradient given caller-supplied `∂c/∂θ` per pair and variant.
pub fn grad_objective(
    problem: &Problem<'_>,
    theta_t: &DVector<f64>,
    dts: &[PairDerivatives],
) -> Result<DVector<f64>> {
    problem.check()?;
    let sols = solve_all(problem, theta_t)?;
    grad_from_solutions(problem, theta_t, &sols, dts)
}

/// Least-squares fit of a dense rig matrix straight to the pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectFit {
    pub a_hat: DMatrix<f64>,
    pub theta: DVector<f64>,
    /// `‖Cᵀ Âᵀ − Vᵀ‖²`
    pub l_d: f64,
    pub rank_deficient: bool,
}

/// Stack the pairs as columns of `C` and `V`.
pub fn stack_pairs(pairs: &[ExpressionPair]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let first = pairs
        .first()
        .ok_or_else(|| RigError::invalid("direct fit", "at least one pair is required"))?;
    let (n, m) = (first.c.len(), first.v.len());
    let mut c = DMatrix::zeros(n, pairs.len());
    let mut v = DMatrix::zeros(m, pairs.len());
    for (k, p) in pairs.iter().enumerate() {
        check_dim("pair controls", n, p.c.len())?;
        check_dim("pair geometry", m, p.v.len())?;
        c.set_column(k, &p.c);
        v.set_column(k, &p.v);
    }
    Ok((c, v))
}

/// Solve `Cᵀ Âᵀ = Vᵀ`; minimum norm when `Cᵀ` lacks full column rank.
pub fn direct_fit(pairs: &[ExpressionPair]) -> Result<DirectFit> {
    let (c, v) = stack_pairs(pairs)?;
    let ct = c.transpose();
    let (at, rank) = pinv_solve(&ct, &v.transpose());
    let a_hat = at.transpose();
    let l_d = (&ct * &at - v.transpose()).norm_squared();
    let (m, n) = a_hat.shape();
    let theta = DVector::from_iterator(
        m * n,
        (0..m)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|ij| a_hat[ij]),
    );
    Ok(DirectFit {
        a_hat,
        theta,
        l_d,
        rank_deficient: rank < n,
    })
}

/// `Σ_k ‖est_k − analytic_k‖²_F`.
pub fn diagnostic_lvhat(estimates: &[DMatrix<f64>], analytic: &[DMatrix<f64>]) -> Result<f64> {
    check_dim("estimate count", analytic.len(), estimates.len())?;
    let mut total = 0.0;
    for (e, a) in estimates.iter().zip(analytic) {
        if e.shape() != a.shape() {
            return Err(RigError::invalid(
                "estimate shape",
                format!("{:?} vs {:?}", e.shape(), a.shape()),
            ));
        }
        total += (e - a).norm_squared();
    }
    Ok(total)
}

/// CSV header and one row per iteration: terms, total and gradient norm.
pub fn write_trace_csv<W: Write>(w: W, trace: &[(usize, LossBreakdown, f64)]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let n_extra = trace.first().map_or(0, |t| t.1.extra.len());
    let mut header: Vec<String> = ["iteration", "gamma1", "gamma2", "gamma3", "gamma_eps"]
        .map(String::from)
        .to_vec();
    header.extend((0..n_extra).map(|i| format!("extra{i}")));
    header.extend(["total".to_string(), "grad_norm".to_string()]);
    wr.write_record(&header)?;
    for (it, l, g) in trace {
        let mut row = vec![it.to_string()];
        row.extend(
            [l.gamma1, l.gamma2, l.gamma3, l.gamma_eps]
                .iter()
                .map(|x| format!("{x:e}")),
        );
        row.extend(l.extra.iter().map(|x| format!("{x:e}")));
        row.push(format!("{:e}", l.total));
        row.push(format!("{g:e}"));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rig::LinearRig;
    use crate::tracker::{RigInverseTracker, SolveMode};

    fn setup(a: &DMatrix<f64>, cols: &[[f64; 3]]) -> (Rig, Vec<TrainingPair>) {
        let rig: Rig = LinearRig::from_matrix(a).into();
        let pairs = cols
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let c = DVector::from_row_slice(c);
                TrainingPair::new(format!("p{k}"), c.clone(), a * c)
            })
            .collect();
        (rig, pairs)
    }

    const COLS: [[f64; 3]; 4] = [
        [1.0, 2.0, 3.0],
        [2.0, -1.0, -1.0],
        [3.0, 1.0, -2.0],
        [1.0, 1.0, 1.0],
    ];

    fn diag_a() -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 2.0, -2.0 / 3.0]))
    }

    #[test]
    fn perfect_inversion_is_zero_loss() {
        let a = diag_a();
        let (rig, pairs) = setup(&a, &COLS);
        let tracker = RigInverseTracker::new(rig.clone()).with_mode(SolveMode::Inverse);
        let cfg = ObjectiveConfig::weights(1.0, 1.0, 1.0, 1.0);
        let active = ParamSet::all(9);
        let p = Problem {
            rig: &rig,
            tracker: &tracker,
            pairs: &pairs,
            theta_r: rig.theta(),
            config: &cfg,
            active: &active,
        };
        let l = eval_objective(&p, rig.theta()).unwrap();
        assert!(l.total < 1e-28, "{}", l.total);
    }

    #[test]
    fn gamma_eps_unit_perturbation() {
        let a = diag_a();
        let (rig, pairs) = setup(&a, &COLS);
        let tracker = RigInverseTracker::new(rig.clone()).with_mode(SolveMode::Inverse);
        let cfg = ObjectiveConfig::weights(0.0, 0.0, 0.0, 0.25);
        let active = ParamSet::all(9);
        let p = Problem {
            rig: &rig,
            tracker: &tracker,
            pairs: &pairs,
            theta_r: rig.theta(),
            config: &cfg,
            active: &active,
        };
        let mut th = rig.theta().clone();
        th[0] += 1.0;
        let l = eval_objective(&p, &th).unwrap();
        assert!((l.total - 0.25).abs() < 1e-15);
        let dts: Vec<PairDerivatives> = pairs.iter().map(|_| HashMap::new()).collect();
        let g = grad_objective(&p, &th, &dts).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-15 && g.rows(1, 8).norm() == 0.0);
    }

    #[test]
    fn identity_start_gamma1_by_hand() {
        let a = diag_a();
        let (rig, pairs) = setup(&a, &COLS);
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
        let id = Rig::from(LinearRig::from_matrix(&DMatrix::identity(3, 3)));
        let l = eval_objective(&p, id.theta()).unwrap();
        let expected: f64 = pairs
            .iter()
            .map(|q| (&q.v - &q.c_plus).norm_squared())
            .sum();
        assert!((l.gamma1 - expected).abs() < 1e-12);
    }

    #[test]
    fn direct_fit_four_columns() {
        let a = diag_a();
        let pairs: Vec<ExpressionPair> = COLS
            .iter()
            .map(|c| {
                let c = DVector::from_row_slice(c);
                ExpressionPair::new("x", c.clone(), &a * c)
            })
            .collect();
        let f = direct_fit(&pairs).unwrap();
        assert!(f.l_d < 1e-10 && (f.a_hat - &a).norm() < 1e-8 && !f.rank_deficient);
        let f2 = direct_fit(&pairs[..2]).unwrap();
        assert!(f2.rank_deficient);
        let (c, v) = stack_pairs(&pairs[..2]).unwrap();
        let oracle = (c.transpose().pseudo_inverse(1e-12).unwrap() * v.transpose()).transpose();
        assert!((f2.a_hat - oracle).norm() < 1e-10);
    }

    #[test]
    fn lvhat_zero_for_equal() {
        let m = DMatrix::from_element(3, 9, 0.5);
        assert_eq!(
            diagnostic_lvhat(std::slice::from_ref(&m), std::slice::from_ref(&m)).unwrap(),
            0.0
        );
    }
}
