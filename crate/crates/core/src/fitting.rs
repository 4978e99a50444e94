//! Rig calibration from (control, geometry) pairs: regularized row-separable
//! least squares, control augmentation and geometry masking, plus the named
//! expression sets used for capture.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, RigError};
use crate::linalg::{null_columns, regularized_lstsq};
use crate::rig::{ParamSet, Rig};

/// Entries with magnitude at or below this are treated as exactly zero.
pub const ACTIVATION_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    #[default]
    Captured,
    Constraint,
    Surrogate,
}

/// A named `(c, v)` training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionPair {
    pub name: String,
    pub c: DVector<f64>,
    pub v: DVector<f64>,
    pub kind: PairKind,
    /// Active geometry rows (sorted); `None` means every row.
    pub geometry_mask: Option<Vec<usize>>,
    pub weight: f64,
}

impl ExpressionPair {
    pub fn new(name: impl Into<String>, c: DVector<f64>, v: DVector<f64>) -> Self {
        ExpressionPair {
            name: name.into(),
            c,
            v,
            kind: PairKind::Captured,
            geometry_mask: None,
            weight: 1.0,
        }
    }

    pub fn with_kind(mut self, kind: PairKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    pub fn row_active(&self, row: usize) -> bool {
        match &self.geometry_mask {
            None => true,
            Some(m) => m.binary_search(&row).is_ok(),
        }
    }

    /// Zero out residual entries outside the geometry mask.
    pub fn apply_mask(&self, r: &mut DVector<f64>) {
        if let Some(mask) = &self.geometry_mask {
            for i in 0..r.len() {
                if mask.binary_search(&i).is_err() {
                    r[i] = 0.0;
                }
            }
        }
    }

    pub fn check(&self, rig: &Rig) -> Result<()> {
        check_dim("pair controls", rig.n_controls(), self.c.len())?;
        check_dim("pair geometry", rig.m_geometry(), self.v.len())?;
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(RigError::invalid(
                "pair weight",
                format!("{} for '{}'", self.weight, self.name),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationConfig {
    pub epsilon_reg: f64,
    pub theta_prior: DVector<f64>,
    pub active_param_set: Option<ParamSet>,
}

impl CalibrationConfig {
    pub fn new(theta_prior: DVector<f64>) -> Self {
        CalibrationConfig {
            epsilon_reg: 0.0,
            theta_prior,
            active_param_set: None,
        }
    }

    pub fn with_epsilon(mut self, eps: f64) -> Self {
        self.epsilon_reg = eps;
        self
    }

    pub fn with_active(mut self, set: ParamSet) -> Self {
        self.active_param_set = Some(set);
        self
    }
}

/// Fit θ to the pairs. Each geometry row depends on a disjoint block of
/// parameters, so the problem splits into one small solve per row.
///
/// Parameters with no residual dependence keep their prior value. With
/// `epsilon_reg = 0` any remaining rank deficiency is an error.
pub fn fit_rig_params(
    rig: &Rig,
    pairs: &[ExpressionPair],
    config: &CalibrationConfig,
) -> Result<DVector<f64>> {
    if pairs.is_empty() {
        return Err(RigError::invalid(
            "calibration pairs",
            "at least one pair is required",
        ));
    }
    if !(config.epsilon_reg >= 0.0) {
        return Err(RigError::invalid(
            "epsilon_reg",
            format!("{} < 0", config.epsilon_reg),
        ));
    }
    check_dim("theta prior", rig.n_params(), config.theta_prior.len())?;
    for p in pairs {
        p.check(rig)?;
    }
    let m = rig.m_geometry();
    let n_params = rig.n_params();
    let active = config
        .active_param_set
        .clone()
        .unwrap_or_else(|| ParamSet::all(n_params));
    if active.max_index().is_some_and(|i| i >= n_params) {
        return Err(RigError::invalid("active_param_set", "index out of range"));
    }

    let jacobians = pairs
        .iter()
        .map(|p| rig.jacobian_params(&p.c))
        .collect::<Result<Vec<_>>>()?;
    let offsets = rig.eval_with(&DVector::zeros(n_params), &DVector::zeros(rig.n_controls()))?;

    let mut by_row: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (l, r) in rig.param_rows().into_iter().enumerate() {
        by_row[r].push(l);
    }

    let theta0 = &config.theta_prior;
    let eps = config.epsilon_reg;
    let solved: Vec<Result<Vec<(usize, f64)>>> = by_row
        .par_iter()
        .enumerate()
        .map(|(row, params)| {
            let free: Vec<usize> = params
                .iter()
                .copied()
                .filter(|&l| active.contains(l))
                .collect();
            if free.is_empty() {
                return Ok(Vec::new());
            }
            let data: Vec<usize> = (0..pairs.len())
                .filter(|&k| pairs[k].row_active(row) && pairs[k].weight > 0.0)
                .collect();
            let mut a = DMatrix::zeros(data.len(), free.len());
            let mut b = DMatrix::zeros(data.len(), 1);
            for (i, &k) in data.iter().enumerate() {
                let w = pairs[k].weight.sqrt();
                let mut target = pairs[k].v[row] - offsets[row];
                for &l in params {
                    let (_, f) = jacobians[k].entry(l);
                    if !active.contains(l) {
                        target -= theta0[l] * f;
                    }
                }
                for (j, &l) in free.iter().enumerate() {
                    a[(i, j)] = w * jacobians[k].entry(l).1;
                }
                b[(i, 0)] = w * target;
            }
            // parameters with no residual dependence stay at the prior
            let touched: Vec<usize> = (0..free.len())
                .filter(|&j| a.column(j).iter().any(|&x| x != 0.0))
                .collect();
            let mut out: Vec<(usize, f64)> = free
                .iter()
                .enumerate()
                .filter(|(j, _)| !touched.contains(j))
                .map(|(_, &l)| (l, theta0[l]))
                .collect();
            if touched.is_empty() {
                return Ok(out);
            }
            let a_t = a.select_columns(&touched);
            let prior =
                DMatrix::from_iterator(touched.len(), 1, touched.iter().map(|&j| theta0[free[j]]));
            let x = if eps == 0.0 {
                let null = null_columns(&a_t);
                if !null.is_empty() {
                    return Err(RigError::Underdetermined {
                        null_params: null.into_iter().map(|j| free[touched[j]]).collect(),
                    });
                }
                regularized_lstsq(&a_t, &b, 0.0, None, "rig fit")?
            } else {
                regularized_lstsq(&a_t, &b, eps, Some(&prior), "rig fit")?
            };
            out.extend(
                touched
                    .iter()
                    .enumerate()
                    .map(|(i, &j)| (free[j], x[(i, 0)])),
            );
            Ok(out)
        })
        .collect();

    let mut theta = theta0.clone();
    let mut null_params = Vec::new();
    for r in solved {
        match r {
            Ok(entries) => {
                for (l, val) in entries {
                    theta[l] = val;
                }
            }
            Err(RigError::Underdetermined { null_params: p }) => null_params.extend(p),
            Err(e) => return Err(e),
        }
    }
    if !null_params.is_empty() {
        null_params.sort_unstable();
        return Err(RigError::Underdetermined { null_params });
    }
    Ok(theta)
}

/// Keep the nonzero entries of `c`; fill the rest from the tracker output.
pub fn augment_controls(c: &DVector<f64>, tracker_output: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("augment controls", c.len(), tracker_output.len())?;
    Ok(c.zip_map(tracker_output, |ci, ti| {
        if ci.abs() > ACTIVATION_TOL {
            ci
        } else {
            ti
        }
    }))
}

/// Residual bookkeeping for one calibration pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairResidual {
    pub name: String,
    pub kind: PairKind,
    /// `‖R(c⁺; θ_prior) − v‖` over the kept rows.
    pub residual_prior: f64,
    /// `‖R(c⁺; θ_fit) − v‖` over the kept rows.
    pub residual_fit: f64,
    /// Geometry rows excluded by the pair's mask.
    pub masked_rows: Vec<usize>,
    /// Controls filled in from the tracker output.
    pub augmented_controls: Vec<usize>,
    /// Controls used in the fit.
    pub c_plus: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HoldoutCheck {
    pub error_prior: f64,
    pub error_fit: f64,
    /// Set when the fit is not determined by the training pairs alone, so
    /// holdout error is expected even on noise-free data.
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub epsilon_reg: f64,
    pub pairs: Vec<PairResidual>,
    /// Names of pairs whose controls were augmented.
    pub augmented: Vec<String>,
    /// Parameters the training pairs leave undetermined.
    pub null_params: Vec<usize>,
    /// Parameters no training pair depends on; they keep the prior value.
    pub untouched_params: Vec<usize>,
    pub spans_parameters: bool,
    pub holdout: Option<HoldoutCheck>,
}

/// Mean of `‖R(c; θ) − v‖` over the kept rows.
pub fn mean_residual(rig: &Rig, theta: &DVector<f64>, pairs: &[ExpressionPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for p in pairs {
        let mut r = rig.eval_with(theta, &p.c)? - &p.v;
        p.apply_mask(&mut r);
        total += r.norm();
    }
    Ok(total / pairs.len() as f64)
}

fn untouched_params(rig: &Rig, pairs: &[ExpressionPair]) -> Result<Vec<usize>> {
    let rows = rig.param_rows();
    let mut touched = vec![false; rig.n_params()];
    for p in pairs.iter().filter(|p| p.weight > 0.0) {
        let j = rig.jacobian_params(&p.c)?;
        for (l, t) in touched.iter_mut().enumerate() {
            *t |= p.row_active(rows[l]) && j.entry(l).1 != 0.0;
        }
    }
    Ok((0..touched.len()).filter(|&l| !touched[l]).collect())
}

/// Supplies tracker controls for a pair's zero entries.
pub type AugmentFn<'a> = &'a dyn Fn(&ExpressionPair) -> Result<DVector<f64>>;

/// Augment (optionally), fit and report. `augment_with` supplies controls
/// for the zero entries of each `c`; with `epsilon_reg = 0` a train set that
/// does not span the parameters is an error.
pub fn calibrate(
    rig: &Rig,
    pairs: &[ExpressionPair],
    config: &CalibrationConfig,
    augment_with: Option<AugmentFn<'_>>,
    holdout: Option<&[ExpressionPair]>,
) -> Result<(DVector<f64>, CalibrationReport)> {
    let mut fitted_pairs = Vec::with_capacity(pairs.len());
    let mut augmented_idx = Vec::with_capacity(pairs.len());
    for p in pairs {
        p.check(rig)?;
        let mut q = p.clone();
        let mut idx = Vec::new();
        if let Some(track) = augment_with {
            let t = track(p)?;
            q.c = augment_controls(&p.c, &t)?;
            idx = (0..p.c.len()).filter(|&i| q.c[i] != p.c[i]).collect();
        }
        augmented_idx.push(idx);
        fitted_pairs.push(q);
    }
    let exact = CalibrationConfig {
        epsilon_reg: 0.0,
        ..config.clone()
    };
    let null_params = match fit_rig_params(rig, &fitted_pairs, &exact) {
        Ok(_) => Vec::new(),
        Err(RigError::Underdetermined { null_params }) => null_params,
        Err(e) => return Err(e),
    };
    let theta = fit_rig_params(rig, &fitted_pairs, config)?;
    let untouched_params = untouched_params(rig, &fitted_pairs)?;
    let m = rig.m_geometry();
    let mut rows = Vec::with_capacity(pairs.len());
    for (q, idx) in fitted_pairs.iter().zip(&augmented_idx) {
        let masked_rows = match &q.geometry_mask {
            None => Vec::new(),
            Some(_) => (0..m).filter(|&r| !q.row_active(r)).collect(),
        };
        rows.push(PairResidual {
            name: q.name.clone(),
            kind: q.kind,
            residual_prior: mean_residual(rig, &config.theta_prior, std::slice::from_ref(q))?,
            residual_fit: mean_residual(rig, &theta, std::slice::from_ref(q))?,
            masked_rows,
            augmented_controls: idx.clone(),
            c_plus: q.c.iter().copied().collect(),
        });
    }
    let spans = null_params.is_empty() && untouched_params.is_empty();
    let holdout = match holdout {
        Some(h) => Some(HoldoutCheck {
            error_prior: mean_residual(rig, &config.theta_prior, h)?,
            error_fit: mean_residual(rig, &theta, h)?,
            flagged: !spans,
        }),
        None => None,
    };
    let report = CalibrationReport {
        epsilon_reg: config.epsilon_reg,
        augmented: rows
            .iter()
            .filter(|r| !r.augmented_controls.is_empty())
            .map(|r| r.name.clone())
            .collect(),
        pairs: rows,
        null_params,
        untouched_params,
        spans_parameters: spans,
        holdout,
    };
    Ok((theta, report))
}

/// Restrict a pair's residuals to the given geometry rows.
pub fn mask_geometry(pair: &ExpressionPair, mask: &[usize]) -> Result<ExpressionPair> {
    if mask.is_empty() {
        return Err(RigError::invalid(
            "geometry mask",
            format!("empty mask for '{}'", pair.name),
        ));
    }
    let m = pair.v.len();
    if let Some(&bad) = mask.iter().find(|&&i| i >= m) {
        return Err(RigError::invalid(
            "geometry mask",
            format!("row {bad} >= {m}"),
        ));
    }
    let mut rows = mask.to_vec();
    rows.sort_unstable();
    rows.dedup();
    let mut out = pair.clone();
    out.geometry_mask = Some(rows);
    Ok(out)
}

/// A named expression: control activations keyed by control name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpressionTemplate {
    pub name: String,
    pub controls: BTreeMap<String, f64>,
}

impl ExpressionTemplate {
    pub fn to_controls(&self, registry: &[String]) -> Result<DVector<f64>> {
        let mut c = DVector::zeros(registry.len());
        for (name, &val) in &self.controls {
            let i = registry.iter().position(|r| r == name).ok_or_else(|| {
                RigError::invalid(
                    "expression",
                    format!("'{}' uses unknown control '{name}'", self.name),
                )
            })?;
            c[i] = val;
        }
        Ok(c)
    }

    /// Names of the controls this template activates.
    pub fn active(&self) -> Vec<&str> {
        self.controls
            .iter()
            .filter(|(_, v)| v.abs() > ACTIVATION_TOL)
            .map(|(k, _)| k.as_str())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ExpressionSetKind {
    Person19,
    Puppet15,
    Synthetic { seed: u64 },
}

/// Control registry plus templates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpressionSet {
    pub control_names: Vec<String>,
    pub templates: Vec<ExpressionTemplate>,
}

pub const PERSON19: [&str; 19] = [
    "neutral",
    "brows down",
    "brows up",
    "eyes wide",
    "eyes close",
    "nose wrinkle",
    "cheek puff",
    "teeth grimace",
    "corner pull",
    "mouth stretch",
    "corner depress",
    "lip press",
    "pursed lips",
    "mouth funnel",
    "lip bite",
    "jaw open",
    "jaw open extreme",
    "jaw left",
    "jaw right",
];

pub const PUPPET15: [&str; 15] = [
    "neutral",
    "eyes close",
    "eyes wide",
    "brows raise",
    "brows down",
    "teeth grimace",
    "pursed smile",
    "corner depress",
    "jaw open",
    "jaw left",
    "jaw right",
    "OO",
    "CH",
    "M/B/P",
    "F/V",
];

// Activation values are stand-ins; each expression drives its own controls
// except the two jaw-open expressions, which share the jaw control.
fn named_set(names: &[&str]) -> ExpressionSet {
    let mut control_names: Vec<String> = Vec::new();
    let mut templates = Vec::new();
    let add = |n: &str, names: &mut Vec<String>| -> String {
        if !names.iter().any(|x| x == n) {
            names.push(n.to_string());
        }
        n.to_string()
    };
    for &name in names {
        let mut controls = BTreeMap::new();
        let key = name.replace(['/', ' '], "_").to_lowercase();
        match name {
            "neutral" => {}
            "jaw open" => {
                controls.insert(add("jaw_open", &mut control_names), 0.6);
            }
            "jaw open extreme" => {
                controls.insert(add("jaw_open", &mut control_names), 1.0);
                controls.insert(add("jaw_open_extreme", &mut control_names), 1.0);
            }
            _ if name.starts_with("brows")
                || name.starts_with("eyes")
                || name.starts_with("corner") =>
            {
                controls.insert(add(&format!("{key}_l"), &mut control_names), 1.0);
                controls.insert(add(&format!("{key}_r"), &mut control_names), 1.0);
            }
            _ => {
                controls.insert(add(&key, &mut control_names), 1.0);
            }
        }
        templates.push(ExpressionTemplate {
            name: name.to_string(),
            controls,
        });
    }
    ExpressionSet {
        control_names,
        templates,
    }
}

/// Synthetic set over `n_controls` controls: controls are split into groups
/// of one or two, one template per group with disjoint activations, plus an
/// extreme variant of the first group that overlaps it.
pub fn synthetic_set(seed: u64, n_controls: usize) -> ExpressionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let control_names: Vec<String> = (0..n_controls).map(|i| format!("ctrl_{i:02}")).collect();
    let groups = control_groups(&mut rng, n_controls);
    let mut templates = vec![ExpressionTemplate {
        name: "neutral".into(),
        controls: BTreeMap::new(),
    }];
    for (g, members) in groups.iter().enumerate() {
        let controls = members
            .iter()
            .map(|&i| (control_names[i].clone(), rng.random_range(0.5..1.0)))
            .collect();
        templates.push(ExpressionTemplate {
            name: format!("expr_{g:02}"),
            controls,
        });
    }
    if let Some(first) = groups.first() {
        let controls = first
            .iter()
            .map(|&i| (control_names[i].clone(), 1.0))
            .collect();
        templates.push(ExpressionTemplate {
            name: "expr_00_extreme".into(),
            controls,
        });
    }
    ExpressionSet {
        control_names,
        templates,
    }
}

/// Partition `0..n` into consecutive groups of size one or two.
pub fn control_groups(rng: &mut impl Rng, n: usize) -> Vec<Vec<usize>> {
    let mut groups = Vec::new();
    let mut i = 0;
    while i < n {
        let size = if i + 1 < n && rng.random_bool(0.5) {
            2
        } else {
            1
        };
        groups.push((i..i + size).collect());
        i += size;
    }
    groups
}

pub fn make_expression_set(kind: ExpressionSetKind) -> ExpressionSet {
    match kind {
        ExpressionSetKind::Person19 => named_set(&PERSON19),
        ExpressionSetKind::Puppet15 => named_set(&PUPPET15),
        ExpressionSetKind::Synthetic { seed } => synthetic_set(seed, 12),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rig::LinearRig;

    fn diag_a() -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 2.0, -2.0 / 3.0]))
    }

    fn pairs_from(a: &DMatrix<f64>, cols: &[[f64; 3]]) -> Vec<ExpressionPair> {
        cols.iter()
            .enumerate()
            .map(|(k, c)| {
                let c = DVector::from_row_slice(c);
                ExpressionPair::new(format!("p{k}"), c.clone(), a * c)
            })
            .collect()
    }

    const COLS: [[f64; 3]; 4] = [
        [1.0, 2.0, 3.0],
        [2.0, -1.0, -1.0],
        [3.0, 1.0, -2.0],
        [1.0, 1.0, 1.0],
    ];

    #[test]
    fn scalar_fit() {
        let rig: Rig = LinearRig::from_matrix(&DMatrix::from_element(1, 1, 0.3)).into();
        let pairs = vec![ExpressionPair::new(
            "x",
            DVector::from_element(1, 1.0),
            DVector::from_element(1, -1.0),
        )];
        let theta =
            fit_rig_params(&rig, &pairs, &CalibrationConfig::new(DVector::zeros(1))).unwrap();
        assert!((theta[0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn four_columns_recover_a() {
        let a = diag_a();
        let rig: Rig = LinearRig::from_matrix(&DMatrix::identity(3, 3)).into();
        let pairs = pairs_from(&a, &COLS);
        let theta =
            fit_rig_params(&rig, &pairs, &CalibrationConfig::new(rig.theta().clone())).unwrap();
        let err = (crate::rig::params_to_matrix(&theta, 3, 3) - a).norm();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn two_columns_need_regularization() {
        let a = diag_a();
        let rig: Rig = LinearRig::from_matrix(&DMatrix::identity(3, 3)).into();
        let pairs = pairs_from(&a, &COLS[..2]);
        let err =
            fit_rig_params(&rig, &pairs, &CalibrationConfig::new(rig.theta().clone())).unwrap_err();
        assert!(
            matches!(err, RigError::Underdetermined { ref null_params } if null_params.len() == 9)
        );
        let truth = LinearRig::from_matrix(&a);
        let cfg = CalibrationConfig::new(Rig::from(truth).theta().clone()).with_epsilon(1e-4);
        let theta = fit_rig_params(&rig, &pairs, &cfg).unwrap();
        assert!((crate::rig::params_to_matrix(&theta, 3, 3) - a).norm() < 1e-3);
    }

    #[test]
    fn row_mask_only_fits_row_zero() {
        let a = diag_a();
        let rig: Rig = LinearRig::from_matrix(&DMatrix::identity(3, 3)).into();
        let pairs: Vec<_> = pairs_from(&a, &COLS)
            .iter()
            .map(|p| mask_geometry(p, &[0]).unwrap())
            .collect();
        let theta =
            fit_rig_params(&rig, &pairs, &CalibrationConfig::new(rig.theta().clone())).unwrap();
        let fitted = crate::rig::params_to_matrix(&theta, 3, 3);
        assert!((fitted.row(0) - a.row(0)).norm() < 1e-10);
        assert_eq!(fitted.rows(1, 2), DMatrix::identity(3, 3).rows(1, 2));
    }

    #[test]
    fn empty_mask_rejected() {
        let p = ExpressionPair::new("x", DVector::zeros(1), DVector::zeros(1));
        assert!(mask_geometry(&p, &[]).is_err());
        assert!(mask_geometry(&p, &[1]).is_err());
    }

    #[test]
    fn inactive_params_stay_at_prior() {
        let a = diag_a();
        let rig: Rig = LinearRig::from_matrix(&DMatrix::identity(3, 3)).into();
        let pairs = pairs_from(&a, &COLS);
        let cfg =
            CalibrationConfig::new(rig.theta().clone()).with_active(ParamSet::new(vec![0, 1, 2]));
        let theta = fit_rig_params(&rig, &pairs, &cfg).unwrap();
        for l in 3..9 {
            assert_eq!(theta[l], rig.theta()[l]);
        }
    }

    #[test]
    fn augment_semantics() {
        let c = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let t = DVector::from_vec(vec![0.9, 0.2, -0.1]);
        assert_eq!(
            augment_controls(&c, &t).unwrap().as_slice(),
            &[1.0, 0.2, -0.1]
        );
        let full = DVector::from_vec(vec![0.5, -0.5, 2.0]);
        assert_eq!(augment_controls(&full, &t).unwrap(), full);
        assert_eq!(augment_controls(&DVector::zeros(3), &t).unwrap(), t);
    }

    #[test]
    fn expression_sets() {
        let p = make_expression_set(ExpressionSetKind::Person19);
        assert_eq!(p.templates.len(), 19);
        let names: Vec<_> = p.templates.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, PERSON19);
        let q = make_expression_set(ExpressionSetKind::Puppet15);
        for ph in ["OO", "CH", "M/B/P", "F/V"] {
            assert!(q.templates.iter().any(|t| t.name == ph));
        }
        let a = make_expression_set(ExpressionSetKind::Synthetic { seed: 7 });
        let b = make_expression_set(ExpressionSetKind::Synthetic { seed: 7 });
        assert_eq!(a, b);
    }

    #[test]
    fn person19_overlap_is_only_the_jaw_pair() {
        let set = make_expression_set(ExpressionSetKind::Person19);
        for (i, a) in set.templates.iter().enumerate() {
            for b in &set.templates[i + 1..] {
                let shared = a.active().iter().any(|k| b.active().contains(k));
                let jaw = a.name.starts_with("jaw open") && b.name.starts_with("jaw open");
                assert_eq!(shared, jaw, "{} / {}", a.name, b.name);
            }
        }
    }

    #[test]
    fn calibrate_flags_non_spanning_train() {
        let a = diag_a();
        let rig: Rig = LinearRig::from_matrix(&DMatrix::identity(3, 3)).into();
        let train = pairs_from(&a, &COLS[..2]);
        let holdout = pairs_from(&a, &COLS[2..]);
        let cfg = CalibrationConfig::new(rig.theta().clone()).with_epsilon(1e-3);
        let (_, report) = calibrate(&rig, &train, &cfg, None, Some(&holdout)).unwrap();
        assert!(!report.spans_parameters);
        assert!(!report.null_params.is_empty());
        let h = report.holdout.unwrap();
        assert!(h.flagged && h.error_fit > 0.0);
        assert!(report.augmented.is_empty());

        let exact = CalibrationConfig::new(rig.theta().clone());
        assert!(calibrate(&rig, &train, &exact, None, None).is_err());
        let (_, report) =
            calibrate(&rig, &pairs_from(&a, &COLS), &exact, None, Some(&holdout)).unwrap();
        let h = report.holdout.unwrap();
        assert!(!h.flagged && h.error_fit < 1e-8);
    }

    #[test]
    fn calibrate_reports_masks_and_augmentation() {
        let a = diag_a();
        let rig: Rig = LinearRig::from_matrix(&DMatrix::identity(3, 3)).into();
        let mut pairs = pairs_from(&a, &COLS);
        pairs[0].c[1] = 0.0;
        pairs[1] = mask_geometry(&pairs[1], &[0, 1]).unwrap();
        let fill =
            |_: &ExpressionPair| -> Result<DVector<f64>> { Ok(DVector::from_element(3, 2.0)) };
        let cfg = CalibrationConfig::new(rig.theta().clone());
        let (_, report) = calibrate(&rig, &pairs, &cfg, Some(&fill), None).unwrap();
        assert_eq!(report.augmented, vec!["p0".to_string()]);
        assert_eq!(report.pairs[0].augmented_controls, vec![1]);
        assert_eq!(report.pairs[1].masked_rows, vec![2]);
        assert!(report.pairs[2].masked_rows.is_empty());
    }
}
