//! Derivative of a black-box tracker with respect to θ_T.
//!
//! With `v̂(θ) = R(T(v; θ); θ)` the chain rule gives
//! `∂R/∂c · ∂T/∂θ = ∂v̂/∂θ − ∂R/∂θ`. The tracker is never differentiated; the
//! matrix `∂v̂/∂θ` is either dropped or estimated by Broyden-style secant
//! updates along chosen directions.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, RigError};
use crate::linalg::{full_rank_lstsq, regularized_lstsq};
use crate::rig::{ParamSet, Rig};
use crate::tracker::FilterMask;

/// `u(x)` over the active parameter coordinates.
pub type UEval<'a> = &'a (dyn Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync);

/// Running estimate of `∂u/∂θ` over the active coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianEstimate {
    pub matrix: DMatrix<f64>,
    pub anchor_theta: DVector<f64>,
    pub update_count: usize,
    /// Last step chosen by the adaptive policy.
    pub last_s: Option<f64>,
}

impl JacobianEstimate {
    pub fn zeros(m: usize, anchor: DVector<f64>) -> Self {
        JacobianEstimate {
            matrix: DMatrix::zeros(m, anchor.len()),
            anchor_theta: anchor,
            update_count: 0,
            last_s: None,
        }
    }

    /// Keep the matrix, move the anchor.
    pub fn reanchor(mut self, anchor: DVector<f64>) -> Result<Self> {
        check_dim("estimate anchor", self.anchor_theta.len(), anchor.len())?;
        self.anchor_theta = anchor;
        Ok(self)
    }
}

fn eval_checked(u: UEval<'_>, x: &DVector<f64>) -> Result<DVector<f64>> {
    let y = u(x)?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(RigError::NonFinite {
            context: "u evaluation",
            theta: x.iter().copied().collect(),
        });
    }
    Ok(y)
}

fn check_unit(d: &DVector<f64>) -> Result<()> {
    let n = d.norm();
    if (n - 1.0).abs() > 1e-10 {
        return Err(RigError::invalid(
            "secant direction",
            format!("norm {n}, expected 1"),
        ));
    }
    Ok(())
}

/// Rank-one update `E += (q − E d) dᵀ` with the forward difference
/// `q = (u(θ + s d) − u(θ)) / s`, given `u(θ)`.
pub fn secant_update_from(
    est: &JacobianEstimate,
    u0: &DVector<f64>,
    u: UEval<'_>,
    direction: &DVector<f64>,
    s: f64,
) -> Result<JacobianEstimate> {
    check_unit(direction)?;
    check_dim("secant direction", est.anchor_theta.len(), direction.len())?;
    if !(s > 0.0 && s.is_finite()) {
        return Err(RigError::invalid("secant step", format!("{s}")));
    }
    let u1 = eval_checked(u, &(&est.anchor_theta + direction * s))?;
    check_dim("u output", est.matrix.nrows(), u1.len())?;
    let q = (u1 - u0) / s;
    Ok(apply_secant(est, &q, direction))
}

fn apply_secant(est: &JacobianEstimate, q: &DVector<f64>, d: &DVector<f64>) -> JacobianEstimate {
    let resid = q - &est.matrix * d;
    JacobianEstimate {
        matrix: &est.matrix + resid * d.transpose(),
        anchor_theta: est.anchor_theta.clone(),
        update_count: est.update_count + 1,
        last_s: est.last_s,
    }
}

pub fn secant_update(
    est: &JacobianEstimate,
    u: UEval<'_>,
    direction: &DVector<f64>,
    s: f64,
) -> Result<JacobianEstimate> {
    let u0 = eval_checked(u, &est.anchor_theta)?;
    secant_update_from(est, &u0, u, direction, s)
}

/// Decade grid 1e-7 … 1e2.
pub fn default_grid() -> Vec<f64> {
    (-7..=2).map(|e| 10f64.powi(e)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepSelection {
    pub s_grid: Vec<f64>,
    /// `L_Δ` at each interior grid point (`s_grid[1..len-1]`).
    pub l_delta_profile: Vec<f64>,
    pub chosen_s: f64,
    /// Forward-difference quotient at the chosen step.
    #[serde(skip)]
    pub quotient: DVector<f64>,
}

/// Forward-difference quotients `(u(a + s d) − u(a)) / s` for each grid step.
pub fn difference_quotients(
    u: UEval<'_>,
    anchor: &DVector<f64>,
    u0: &DVector<f64>,
    direction: &DVector<f64>,
    grid: &[f64],
) -> Result<Vec<DVector<f64>>> {
    grid.par_iter()
        .map(|&s| {
            let y = u(&(anchor + direction * s))?;
            Ok((y - u0) / s)
        })
        .collect()
}

/// `L_Δ(s) = ‖FD(s) − FD(s⁻)‖ + ‖FD(s) − FD(s⁺)‖` over the interior of the
/// grid. `FD(s) = q(s) dᵀ` with unit `d`, so the Frobenius distance reduces
/// to the distance between quotients.
pub fn l_delta_profile(quotients: &[DVector<f64>]) -> Vec<f64> {
    (1..quotients.len().saturating_sub(1))
        .map(|i| {
            (&quotients[i] - &quotients[i - 1]).norm() + (&quotients[i] - &quotients[i + 1]).norm()
        })
        .collect()
}

pub fn select_step(
    u: UEval<'_>,
    anchor: &DVector<f64>,
    direction: &DVector<f64>,
    grid: &[f64],
) -> Result<StepSelection> {
    let u0 = eval_checked(u, anchor)?;
    select_step_from(u, anchor, &u0, direction, grid)
}

fn select_step_from(
    u: UEval<'_>,
    anchor: &DVector<f64>,
    u0: &DVector<f64>,
    direction: &DVector<f64>,
    grid: &[f64],
) -> Result<StepSelection> {
    if grid.len() < 3 {
        return Err(RigError::invalid("step grid", "needs at least 3 entries"));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1] && w[0] > 0.0)) {
        return Err(RigError::invalid(
            "step grid",
            "must be positive and increasing",
        ));
    }
    let q = difference_quotients(u, anchor, u0, direction, grid)?;
    let profile = l_delta_profile(&q);
    let mut best: Option<usize> = None;
    for (i, &l) in profile.iter().enumerate() {
        if l.is_nan() {
            continue;
        }
        // strict comparison keeps the smallest s on ties
        if best.is_none_or(|b| l < profile[b]) {
            best = Some(i);
        }
    }
    let b =
        best.ok_or_else(|| RigError::invalid("step selection", "every L_delta value is NaN"))?;
    Ok(StepSelection {
        s_grid: grid.to_vec(),
        l_delta_profile: profile,
        chosen_s: grid[b + 1],
        quotient: q[b + 1].clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum StepPolicy {
    Fixed {
        s: f64,
    },
    /// Select on the grid for every direction.
    Adaptive {
        grid: Vec<f64>,
    },
    /// Select once, then reuse the chosen step.
    Frozen {
        grid: Vec<f64>,
    },
}

impl Default for StepPolicy {
    fn default() -> Self {
        StepPolicy::Fixed { s: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DirectionStrategy {
    Random { k: usize, seed: u64 },
    SteepestDescent,
    Fixed { directions: Vec<Vec<f64>> },
}

impl DirectionStrategy {
    /// Unit directions in a `dim`-dimensional space. `stream` decorrelates
    /// draws across iterations and expressions; `descent` is the search
    /// direction used by the steepest-descent mode.
    pub fn directions(
        &self,
        dim: usize,
        stream: u64,
        descent: Option<&DVector<f64>>,
    ) -> Result<Vec<DVector<f64>>> {
        match self {
            DirectionStrategy::Random { k, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(stream);
                Ok((0..*k).map(|_| random_unit(&mut rng, dim)).collect())
            }
            DirectionStrategy::SteepestDescent => {
                let d = descent.ok_or_else(|| {
                    RigError::invalid("direction strategy", "steepest descent needs a gradient")
                })?;
                check_dim("descent direction", dim, d.len())?;
                let n = d.norm();
                if n == 0.0 || !n.is_finite() {
                    return Ok(Vec::new());
                }
                Ok(vec![d / n])
            }
            DirectionStrategy::Fixed { directions } => directions
                .iter()
                .map(|d| {
                    check_dim("fixed direction", dim, d.len())?;
                    let v = DVector::from_column_slice(d);
                    let n = v.norm();
                    if n == 0.0 {
                        return Err(RigError::invalid("fixed direction", "zero vector"));
                    }
                    Ok(v / n)
                })
                .collect(),
        }
    }

    pub fn needs_gradient(&self) -> bool {
        matches!(self, DirectionStrategy::SteepestDescent)
    }
}

pub fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    loop {
        let d = DVector::from_iterator(dim, (0..dim).map(|_| StandardNormal.sample(rng)));
        let n: f64 = d.norm();
        if n > 0.0 {
            return d / n;
        }
    }
}

/// One secant update, for diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UpdateRecord {
    pub direction_index: usize,
    pub s: f64,
    pub l_delta: Option<f64>,
    /// `‖E_new d − q‖ / max(‖q‖, 1)` after the update.
    pub secant_residual: f64,
}

/// Apply one secant update per direction, starting from `warm` (re-anchored)
/// or from zero.
pub fn estimate_dvhat_dtheta(
    u: UEval<'_>,
    anchor: &DVector<f64>,
    m: usize,
    directions: &[DVector<f64>],
    warm: Option<JacobianEstimate>,
    policy: &StepPolicy,
) -> Result<(JacobianEstimate, Vec<UpdateRecord>)> {
    let mut est = match warm {
        Some(w) => {
            check_dim("warm estimate rows", m, w.matrix.nrows())?;
            w.reanchor(anchor.clone())?
        }
        None => JacobianEstimate::zeros(m, anchor.clone()),
    };
    if directions.is_empty() {
        return Ok((est, Vec::new()));
    }
    let u0 = eval_checked(u, anchor)?;
    check_dim("u output", m, u0.len())?;
    let mut records = Vec::with_capacity(directions.len());
    for (i, d) in directions.iter().enumerate() {
        check_unit(d)?;
        let (q, s, l) = match policy {
            StepPolicy::Fixed { s } => (fd(u, anchor, &u0, d, *s)?, *s, None),
            StepPolicy::Frozen { grid } if est.last_s.is_some() => {
                let s = est.last_s.unwrap();
                let _ = grid;
                (fd(u, anchor, &u0, d, s)?, s, None)
            }
            StepPolicy::Adaptive { grid } | StepPolicy::Frozen { grid } => {
                let sel = select_step_from(u, anchor, &u0, d, grid)?;
                let idx = sel.s_grid.iter().position(|&g| g == sel.chosen_s).unwrap();
                (
                    sel.quotient,
                    sel.chosen_s,
                    Some(sel.l_delta_profile[idx - 1]),
                )
            }
        };
        est = apply_secant(&est, &q, d);
        est.last_s = Some(s);
        let residual = (&est.matrix * d - &q).norm() / q.norm().max(1.0);
        records.push(UpdateRecord {
            direction_index: i,
            s,
            l_delta: l,
            secant_residual: residual,
        });
    }
    Ok((est, records))
}

fn fd(
    u: UEval<'_>,
    anchor: &DVector<f64>,
    u0: &DVector<f64>,
    d: &DVector<f64>,
    s: f64,
) -> Result<DVector<f64>> {
    if !(s > 0.0) {
        return Err(RigError::invalid("secant step", format!("{s}")));
    }
    let u1 = eval_checked(u, &(anchor + d * s))?;
    Ok((u1 - u0) / s)
}

/// Solve `∂R/∂c · X = −∂R/∂θ + ∂v̂/∂θ` for `X = ∂T/∂θ` over the parameter
/// columns `params`, using only the controls in `controls` (all if `None`);
/// rows for inactive controls are zero. `dvhat` is `m × |params|`; `None`
/// drops the term. With `reg_eps > 0` the rows `ε X = 0` are appended.
pub fn solve_dt_dtheta(
    rig: &Rig,
    c: &DVector<f64>,
    theta_t: &DVector<f64>,
    params: &ParamSet,
    dvhat: Option<&DMatrix<f64>>,
    reg_eps: f64,
    controls: Option<&FilterMask>,
) -> Result<DMatrix<f64>> {
    let n = rig.n_controls();
    let jc = rig.jacobian_controls_with(theta_t, c)?;
    let mut rhs = -rig.jacobian_params(c)?.dense_columns(params);
    if let Some(e) = dvhat {
        check_dim("dvhat rows", rhs.nrows(), e.nrows())?;
        check_dim("dvhat columns", rhs.ncols(), e.ncols())?;
        rhs += e;
    }
    let (jc, active) = match controls {
        Some(mask) => {
            check_dim("control mask", n, mask.len())?;
            let idx = mask.active_indices();
            (jc.select_columns(&idx), idx)
        }
        None => (jc, (0..n).collect()),
    };
    if active.is_empty() {
        return Ok(DMatrix::zeros(n, params.len()));
    }
    let x = if reg_eps > 0.0 {
        regularized_lstsq(&jc, &rhs, reg_eps, None, "implicit tracker derivative")?
    } else {
        full_rank_lstsq(&jc, &rhs, "implicit tracker derivative")?
    };
    let mut out = DMatrix::zeros(n, params.len());
    for (k, &i) in active.iter().enumerate() {
        out.row_mut(i).copy_from(&x.row(k));
    }
    Ok(out)
}

/// CSV rows `expression,direction,s,l_delta,secant_residual`.
pub fn write_update_csv<W: Write>(w: W, rows: &[(String, UpdateRecord)]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["expression", "direction", "s", "l_delta", "secant_residual"])?;
    for (name, r) in rows {
        wr.write_record([
            name.clone(),
            r.direction_index.to_string(),
            format!("{:e}", r.s),
            r.l_delta.map(|x| format!("{x:e}")).unwrap_or_default(),
            format!("{:e}", r.secant_residual),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rig::LinearRig;

    #[test]
    fn scalar_secant() {
        let u = |x: &DVector<f64>| Ok(DVector::from_element(1, x[0] * x[0]));
        let est = JacobianEstimate::zeros(1, DVector::from_element(1, 1.0));
        let new = secant_update(&est, &u, &DVector::from_element(1, 1.0), 0.1).unwrap();
        assert!((new.matrix[(0, 0)] - 2.1).abs() < 1e-12);
    }

    #[test]
    fn constant_u_zeroes_direction() {
        let u = |_: &DVector<f64>| Ok(DVector::from_vec(vec![1.0, 2.0]));
        let mut est = JacobianEstimate::zeros(2, DVector::zeros(3));
        est.matrix = DMatrix::from_fn(2, 3, |i, j| (i + j) as f64);
        let d = DVector::from_vec(vec![0.6, 0.8, 0.0]);
        let new = secant_update(&est, &u, &d, 1e-3).unwrap();
        assert!((&new.matrix * &d).norm() < 1e-14);
        let expected = &est.matrix - &est.matrix * &d * d.transpose();
        assert!((new.matrix - expected).norm() < 1e-14);
    }

    #[test]
    fn non_unit_direction_rejected() {
        let u = |x: &DVector<f64>| Ok(x.clone());
        let est = JacobianEstimate::zeros(2, DVector::zeros(2));
        assert!(secant_update(&est, &u, &DVector::from_vec(vec![1.0, 1.0]), 0.1).is_err());
    }

    #[test]
    fn nan_output_carries_theta() {
        let u = |x: &DVector<f64>| {
            Ok(DVector::from_element(
                1,
                if x[0] > 0.5 { f64::NAN } else { 0.0 },
            ))
        };
        let est = JacobianEstimate::zeros(1, DVector::zeros(1));
        let err = secant_update(&est, &u, &DVector::from_element(1, 1.0), 1.0).unwrap_err();
        assert!(matches!(err, RigError::NonFinite { ref theta, .. } if theta == &vec![1.0]));
    }

    #[test]
    fn zero_directions_keep_warm() {
        let u = |x: &DVector<f64>| Ok(x.clone());
        let mut warm = JacobianEstimate::zeros(2, DVector::zeros(2));
        warm.matrix[(0, 1)] = 3.0;
        let (est, rec) = estimate_dvhat_dtheta(
            &u,
            &DVector::zeros(2),
            2,
            &[],
            Some(warm.clone()),
            &StepPolicy::default(),
        )
        .unwrap();
        assert!(rec.is_empty());
        assert_eq!(est.matrix, warm.matrix);
    }

    #[test]
    fn quadratic_argmin_above_roundoff() {
        let u = |x: &DVector<f64>| Ok(DVector::from_element(1, x[0] * x[0]));
        let sel = select_step(
            &u,
            &DVector::from_element(1, 1.0),
            &DVector::from_element(1, 1.0),
            &default_grid(),
        )
        .unwrap();
        assert_eq!(sel.l_delta_profile.len(), 8);
        assert!(
            sel.chosen_s < 1e-2 && sel.chosen_s > 1e-7,
            "{}",
            sel.chosen_s
        );
    }

    #[test]
    fn one_by_one_implicit_solve() {
        let rig: Rig = LinearRig::from_matrix(&DMatrix::from_element(1, 1, 2.0)).into();
        let c = DVector::from_element(1, 2.0);
        let x = solve_dt_dtheta(&rig, &c, rig.theta(), &ParamSet::all(1), None, 0.0, None).unwrap();
        assert!((x[(0, 0)] + 1.0).abs() < 1e-15);
        let full = rig.jacobian_params(&c).unwrap().to_dense();
        let x = solve_dt_dtheta(
            &rig,
            &c,
            rig.theta(),
            &ParamSet::all(1),
            Some(&full),
            0.0,
            None,
        )
        .unwrap();
        assert_eq!(x[(0, 0)], 0.0);
    }

    #[test]
    fn singular_system_without_regularization() {
        let rig: Rig =
            LinearRig::from_matrix(&DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])).into();
        let c = DVector::from_vec(vec![1.0, 0.0]);
        let err =
            solve_dt_dtheta(&rig, &c, rig.theta(), &ParamSet::all(4), None, 0.0, None).unwrap_err();
        assert!(matches!(err, RigError::Singular { .. }));
        assert!(
            solve_dt_dtheta(&rig, &c, rig.theta(), &ParamSet::all(4), None, 1e-3, None).is_ok()
        );
    }

    #[test]
    fn random_directions_are_unit_and_seeded() {
        let s = DirectionStrategy::Random { k: 5, seed: 3 };
        let a = s.directions(9, 1, None).unwrap();
        let b = s.directions(9, 1, None).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, s.directions(9, 2, None).unwrap());
        for d in a {
            assert!((d.norm() - 1.0).abs() < 1e-14);
        }
    }
}
