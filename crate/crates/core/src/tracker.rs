//! Trackers: black-box maps from geometry to controls, evaluated with a
//! tracker-side rig parameter vector θ_T.
//!
//! Fine-tuning code only ever calls [`Tracker::track`] and, when the
//! capability is advertised, [`Tracker::track_decimated`].

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use nalgebra::{DMatrix, DVector, RealField};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, RigError};
use crate::fitting::ACTIVATION_TOL;
use crate::linalg::pinv_solve;
use crate::rig::{ParamSet, Rig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    Inverse,
    LeastSquares,
    MinNorm,
    Lm(f64),
}

impl Default for SolveMode {
    fn default() -> Self {
        SolveMode::Lm(1e-8)
    }
}

/// Arithmetic used for the tracker's inner linear solve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Capabilities {
    pub supports_decimation: bool,
    pub exposes_internals: bool,
}

/// Diagonal 0/1 selector over controls.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FilterMask {
    active: Vec<bool>,
}

impl FilterMask {
    pub fn new(active: Vec<bool>) -> Self {
        FilterMask { active }
    }

    pub fn all(n: usize) -> Self {
        FilterMask {
            active: vec![true; n],
        }
    }

    /// Active where `|c_i|` exceeds the activation tolerance.
    pub fn from_controls(c: &DVector<f64>) -> Self {
        FilterMask {
            active: c.iter().map(|x| x.abs() > ACTIVATION_TOL).collect(),
        }
    }

    pub fn from_indices(n: usize, indices: &[usize]) -> Self {
        let mut active = vec![false; n];
        for &i in indices {
            active[i] = true;
        }
        FilterMask { active }
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.active[i]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.active
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&i| self.active[i]).collect()
    }

    pub fn active_set(&self) -> ParamSet {
        ParamSet::new(self.active_indices())
    }

    pub fn complement(&self) -> FilterMask {
        FilterMask {
            active: self.active.iter().map(|a| !a).collect(),
        }
    }

    pub fn and(&self, other: &FilterMask) -> FilterMask {
        FilterMask {
            active: self
                .active
                .iter()
                .zip(&other.active)
                .map(|(a, b)| *a && *b)
                .collect(),
        }
    }

    /// `H c`.
    pub fn apply(&self, c: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            c.len(),
            c.iter()
                .zip(&self.active)
                .map(|(x, &a)| if a { *x } else { 0.0 }),
        )
    }

    /// `H_D c`: the active entries only.
    pub fn decimate(&self, c: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.count(),
            self.active_indices().into_iter().map(|i| c[i]),
        )
    }

    /// `H_Dᵀ c_D`: scatter back to full length with zeros elsewhere.
    pub fn embed(&self, c_d: &DVector<f64>) -> DVector<f64> {
        let mut c = DVector::zeros(self.active.len());
        for (k, i) in self.active_indices().into_iter().enumerate() {
            c[i] = c_d[k];
        }
        c
    }

    pub fn h_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(
            self.active.len(),
            self.active.iter().map(|&a| if a { 1.0 } else { 0.0 }),
        ))
    }

    pub fn hd_matrix(&self) -> DMatrix<f64> {
        let idx = self.active_indices();
        let mut h = DMatrix::zeros(idx.len(), self.active.len());
        for (k, i) in idx.into_iter().enumerate() {
            h[(k, i)] = 1.0;
        }
        h
    }
}

/// Geometry in, controls out.
pub trait Tracker: Send + Sync {
    fn n_controls(&self) -> usize;

    fn capabilities(&self) -> Capabilities;

    fn track(&self, v: &DVector<f64>, theta_t: &DVector<f64>) -> Result<DVector<f64>>;

    /// Solve using only the active controls; returns the decimated vector `c_D`.
    fn track_decimated(
        &self,
        _v: &DVector<f64>,
        _theta_t: &DVector<f64>,
        _mask: &FilterMask,
    ) -> Result<DVector<f64>> {
        Err(RigError::Unsupported("decimated tracking"))
    }
}

impl<T: Tracker + ?Sized> Tracker for &T {
    fn n_controls(&self) -> usize {
        (**self).n_controls()
    }

    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }

    fn track(&self, v: &DVector<f64>, theta_t: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).track(v, theta_t)
    }

    fn track_decimated(
        &self,
        v: &DVector<f64>,
        theta_t: &DVector<f64>,
        mask: &FilterMask,
    ) -> Result<DVector<f64>> {
        (**self).track_decimated(v, theta_t, mask)
    }
}

impl<T: Tracker + ?Sized> Tracker for Arc<T> {
    fn n_controls(&self) -> usize {
        (**self).n_controls()
    }

    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }

    fn track(&self, v: &DVector<f64>, theta_t: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).track(v, theta_t)
    }

    fn track_decimated(
        &self,
        v: &DVector<f64>,
        theta_t: &DVector<f64>,
        mask: &FilterMask,
    ) -> Result<DVector<f64>> {
        (**self).track_decimated(v, theta_t, mask)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationMode {
    /// `Â†v + c̃(v)`
    Additive,
    /// `Â†v + Â c̃(v)`
    RigScaled,
}

type ControlFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Deliberate tracker error `c̃(v)`.
#[derive(Clone)]
pub struct ControlPerturbation {
    pub mode: PerturbationMode,
    c_tilde: ControlFn,
}

impl std::fmt::Debug for ControlPerturbation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlPerturbation")
            .field("mode", &self.mode)
            .finish_non_exhaustive()
    }
}

impl ControlPerturbation {
    pub fn new(
        mode: PerturbationMode,
        f: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        ControlPerturbation {
            mode,
            c_tilde: Arc::new(f),
        }
    }

    pub fn constant(mode: PerturbationMode, c: DVector<f64>) -> Self {
        ControlPerturbation::new(mode, move |_| c.clone())
    }

    /// `c̃` tabulated per geometry; the nearest stored geometry wins.
    pub fn lookup(mode: PerturbationMode, table: Vec<(DVector<f64>, DVector<f64>)>) -> Self {
        ControlPerturbation::new(mode, move |v| {
            table
                .iter()
                .min_by(|a, b| (&a.0 - v).norm().total_cmp(&(&b.0 - v).norm()))
                .map(|(_, c)| c.clone())
                .expect("lookup table is nonempty")
        })
    }

    pub fn eval(&self, v: &DVector<f64>) -> DVector<f64> {
        (self.c_tilde)(v)
    }
}

/// Gauss–Newton settings for nonlinear rig inversion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussNewtonConfig {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub max_halvings: usize,
}

impl Default for GaussNewtonConfig {
    fn default() -> Self {
        GaussNewtonConfig {
            max_iters: 200,
            grad_tol: 1e-10,
            max_halvings: 30,
        }
    }
}

fn solve_dense<T: RealField + Copy>(
    a: DMatrix<T>,
    b: DVector<T>,
    mode: SolveMode,
) -> Result<DVector<T>> {
    let n = a.ncols();
    match mode {
        SolveMode::Inverse => {
            if a.nrows() != n {
                return Err(RigError::invalid(
                    "inverse solve",
                    format!("rig matrix is {}x{}, not square", a.nrows(), n),
                ));
            }
            a.lu().solve(&b).ok_or(RigError::Singular {
                context: "tracker inverse solve",
            })
        }
        SolveMode::LeastSquares | SolveMode::MinNorm => {
            let (m, _) = a.shape();
            let svd = a.svd(true, true);
            let smax = svd
                .singular_values
                .iter()
                .copied()
                .fold(T::zero(), |x, y| x.max(y));
            let tol = smax * nalgebra::convert::<f64, T>(m.max(n) as f64) * T::default_epsilon();
            let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
            if mode == SolveMode::LeastSquares && rank < n {
                return Err(RigError::Singular {
                    context: "tracker least-squares solve",
                });
            }
            svd.solve(&b, tol.max(T::min_value().unwrap_or(T::zero())))
                .map_err(|e| RigError::Tracker(e.to_string()))
        }
        SolveMode::Lm(eps) => {
            let e2: T = nalgebra::convert(eps * eps);
            let mut normal = a.transpose() * &a;
            for i in 0..n {
                normal[(i, i)] += e2;
            }
            let rhs = a.transpose() * b;
            normal
                .cholesky()
                .map(|ch| ch.solve(&rhs))
                .ok_or(RigError::Singular {
                    context: "tracker regularized solve",
                })
        }
    }
}

/// Solve `R(c; θ) = v` for the rig's controls.
pub fn solve_rig(
    rig: &Rig,
    theta: &DVector<f64>,
    v: &DVector<f64>,
    mode: SolveMode,
    precision: Precision,
    gn: &GaussNewtonConfig,
) -> Result<DVector<f64>> {
    check_dim("tracker geometry", rig.m_geometry(), v.len())?;
    rig.check_theta(theta)?;
    match rig {
        Rig::Linear(r) => {
            let a = r.matrix_with(theta);
            let b = v - r.neutral_offset();
            match precision {
                Precision::F64 => solve_dense(a, b, mode),
                Precision::F32 => {
                    Ok(solve_dense(a.cast::<f32>(), b.cast::<f32>(), mode)?.cast::<f64>())
                }
            }
        }
        Rig::JointPsd(_) => gauss_newton(rig, theta, v, mode, gn),
    }
}

fn gauss_newton(
    rig: &Rig,
    theta: &DVector<f64>,
    v: &DVector<f64>,
    mode: SolveMode,
    gn: &GaussNewtonConfig,
) -> Result<DVector<f64>> {
    let eps = match mode {
        SolveMode::Lm(e) => e,
        _ => 0.0,
    };
    let e2 = eps * eps;
    let n = rig.n_controls();
    let objective = |c: &DVector<f64>| -> Result<f64> {
        let r = rig.eval_with(theta, c)? - v;
        Ok(0.5 * r.norm_squared() + 0.5 * e2 * c.norm_squared())
    };
    let mut c = DVector::zeros(n);
    let mut f = objective(&c)?;
    for _ in 0..gn.max_iters {
        let r = rig.eval_with(theta, &c)? - v;
        let j = rig.jacobian_controls_with(theta, &c)?;
        let g = j.transpose() * &r + &c * e2;
        if g.norm() < gn.grad_tol {
            break;
        }
        let step = if eps > 0.0 {
            let mut normal = j.transpose() * &j;
            for i in 0..n {
                normal[(i, i)] += e2;
            }
            normal
                .cholesky()
                .ok_or(RigError::Singular {
                    context: "Gauss-Newton step",
                })?
                .solve(&(-&g))
        } else {
            let rhs = DMatrix::from_column_slice(r.len(), 1, (-&r).as_slice());
            pinv_solve(&j, &rhs).0.column(0).into_owned()
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=gn.max_halvings {
            let trial = &c + &step * t;
            let ft = objective(&trial)?;
            if ft < f {
                c = trial;
                f = ft;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(c)
}

/// Direct inversion of the rig at its own θ.
pub fn track_direct(rig: &Rig, v: &DVector<f64>, mode: SolveMode) -> Result<DVector<f64>> {
    solve_rig(
        rig,
        rig.theta(),
        v,
        mode,
        Precision::F64,
        &GaussNewtonConfig::default(),
    )
}

/// Inversion followed by the deliberate error `c̃`.
pub fn track_perturbed(
    rig: &Rig,
    v: &DVector<f64>,
    perturbation: &ControlPerturbation,
    mode: SolveMode,
) -> Result<DVector<f64>> {
    RigInverseTracker::new(rig.clone())
        .with_mode(mode)
        .with_perturbation(perturbation.clone())
        .track(v, rig.theta())
}

/// Reference tracker that inverts a rig whose structure it knows, evaluated at
/// whatever θ_T it is handed.
#[derive(Clone, Debug)]
pub struct RigInverseTracker {
    rig: Rig,
    mode: SolveMode,
    precision: Precision,
    perturbation: Option<ControlPerturbation>,
    gn: GaussNewtonConfig,
}

impl RigInverseTracker {
    pub fn new(rig: Rig) -> Self {
        RigInverseTracker {
            rig,
            mode: SolveMode::default(),
            precision: Precision::F64,
            perturbation: None,
            gn: GaussNewtonConfig::default(),
        }
    }

    pub fn with_mode(mut self, mode: SolveMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn with_perturbation(mut self, p: ControlPerturbation) -> Self {
        self.perturbation = Some(p);
        self
    }

    pub fn with_gauss_newton(mut self, gn: GaussNewtonConfig) -> Self {
        self.gn = gn;
        self
    }

    fn perturb(
        &self,
        rig: &Rig,
        theta: &DVector<f64>,
        v: &DVector<f64>,
        c: DVector<f64>,
        mask: Option<&FilterMask>,
    ) -> Result<DVector<f64>> {
        let Some(p) = &self.perturbation else {
            return Ok(c);
        };
        let mut ct = p.eval(v);
        check_dim("perturbation", self.rig.n_controls(), ct.len())?;
        if let Some(m) = mask {
            ct = m.decimate(&ct);
        }
        Ok(match p.mode {
            PerturbationMode::Additive => c + ct,
            PerturbationMode::RigScaled => {
                let a = rig.jacobian_controls_with(theta, &c)?;
                match self.precision {
                    Precision::F64 => c + a * ct,
                    Precision::F32 => c + (a.cast::<f32>() * ct.cast::<f32>()).cast::<f64>(),
                }
            }
        })
    }
}

impl Tracker for RigInverseTracker {
    fn n_controls(&self) -> usize {
        self.rig.n_controls()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_decimation: true,
            exposes_internals: true,
        }
    }

    fn track(&self, v: &DVector<f64>, theta_t: &DVector<f64>) -> Result<DVector<f64>> {
        let c = solve_rig(&self.rig, theta_t, v, self.mode, self.precision, &self.gn)?;
        self.perturb(&self.rig, theta_t, v, c, None)
    }

    fn track_decimated(
        &self,
        v: &DVector<f64>,
        theta_t: &DVector<f64>,
        mask: &FilterMask,
    ) -> Result<DVector<f64>> {
        let problem = decimate_problem(&self.rig, mask)?;
        let theta_d = problem.restrict_theta(theta_t);
        let c = solve_rig(
            &problem.rig,
            &theta_d,
            v,
            self.mode,
            self.precision,
            &self.gn,
        )?;
        self.perturb(&problem.rig, &theta_d, v, c, Some(mask))
    }
}

/// `T_H = H·T`. The inner tracker still solves the full problem.
#[derive(Clone)]
pub struct FilteredTracker<T> {
    inner: T,
    mask: FilterMask,
}

impl<T: Tracker> FilteredTracker<T> {
    pub fn new(inner: T, mask: FilterMask) -> Result<Self> {
        check_dim("filter mask", inner.n_controls(), mask.len())?;
        Ok(FilteredTracker { inner, mask })
    }
}

pub fn filter_tracker<T: Tracker>(t: T, mask: FilterMask) -> Result<FilteredTracker<T>> {
    FilteredTracker::new(t, mask)
}

impl<T: Tracker> Tracker for FilteredTracker<T> {
    fn n_controls(&self) -> usize {
        self.inner.n_controls()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_decimation: false,
            exposes_internals: false,
        }
    }

    fn track(&self, v: &DVector<f64>, theta_t: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.mask.apply(&self.inner.track(v, theta_t)?))
    }
}

/// Hides everything but `track`, the way a closed tracker would.
#[derive(Clone)]
pub struct BlackBoxTracker<T>(pub T);

impl<T: Tracker> Tracker for BlackBoxTracker<T> {
    fn n_controls(&self) -> usize {
        self.0.n_controls()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::default()
    }

    fn track(&self, v: &DVector<f64>, theta_t: &DVector<f64>) -> Result<DVector<f64>> {
        self.0.track(v, theta_t)
    }
}

/// Counts every call that reaches the wrapped tracker.
pub struct AuditedTracker<T> {
    inner: T,
    track_calls: AtomicUsize,
    decimated_calls: AtomicUsize,
}

impl<T: Tracker> AuditedTracker<T> {
    pub fn new(inner: T) -> Self {
        AuditedTracker {
            inner,
            track_calls: AtomicUsize::new(0),
            decimated_calls: AtomicUsize::new(0),
        }
    }

    pub fn track_calls(&self) -> usize {
        self.track_calls.load(Ordering::Relaxed)
    }

    pub fn decimated_calls(&self) -> usize {
        self.decimated_calls.load(Ordering::Relaxed)
    }
}

impl<T: Tracker> Tracker for AuditedTracker<T> {
    fn n_controls(&self) -> usize {
        self.inner.n_controls()
    }

    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn track(&self, v: &DVector<f64>, theta_t: &DVector<f64>) -> Result<DVector<f64>> {
        self.track_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.track(v, theta_t)
    }

    fn track_decimated(
        &self,
        v: &DVector<f64>,
        theta_t: &DVector<f64>,
        mask: &FilterMask,
    ) -> Result<DVector<f64>> {
        self.decimated_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.track_decimated(v, theta_t, mask)
    }
}

/// Sub-problem over the active controls.
#[derive(Clone, Debug)]
pub struct DecimatedProblem {
    pub rig: Rig,
    /// Full-θ index of every sub-rig parameter.
    pub theta_map: Vec<usize>,
    pub theta_d: ParamSet,
    pub mask: FilterMask,
}

impl DecimatedProblem {
    pub fn restrict_theta(&self, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.theta_map.len(),
            self.theta_map.iter().map(|&l| theta[l]),
        )
    }
}

pub fn decimate_problem(rig: &Rig, mask: &FilterMask) -> Result<DecimatedProblem> {
    check_dim("decimation mask", rig.n_controls(), mask.len())?;
    let controls = mask.active_indices();
    if controls.is_empty() {
        return Err(RigError::invalid("decimation mask", "no active controls"));
    }
    let (sub, theta_map) = rig.sub_rig(&controls)?;
    if theta_map.is_empty() {
        return Err(RigError::invalid(
            "decimation",
            "no rig parameters reachable from the active controls",
        ));
    }
    let theta_d = ParamSet::new(theta_map.clone());
    Ok(DecimatedProblem {
        rig: sub,
        theta_map,
        theta_d,
        mask: mask.clone(),
    })
}

pub type GeometryCorrection<'a> = &'a (dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Sync);

/// `v̂ = R(T(v; θ_T); θ_T)`, minus the optional correction `ṽ_T(v; θ_T)`.
pub fn tracker_rig_eval(
    t: &dyn Tracker,
    rig: &Rig,
    v: &DVector<f64>,
    theta_t: &DVector<f64>,
    correction: Option<GeometryCorrection<'_>>,
) -> Result<DVector<f64>> {
    let c = t.track(v, theta_t)?;
    let mut vhat = rig.eval_with(theta_t, &c)?;
    if let Some(f) = correction {
        vhat -= f(v, theta_t);
    }
    Ok(vhat)
}

#[derive(Serialize)]
struct Request<'a> {
    #[serde(rename = "theta_T")]
    theta_t: &'a [f64],
    v: &'a [f64],
}

#[derive(Deserialize)]
struct Response {
    c: Vec<f64>,
}

struct Process {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

/// External tracker speaking one JSON request/response per line.
pub struct SubprocessTracker {
    command: String,
    n_controls: usize,
    timeout: Duration,
    process: Mutex<Process>,
}

impl SubprocessTracker {
    pub fn spawn(command: &str, n_controls: usize, timeout: Duration) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped");
        let stdout = child.stdout.take().expect("piped");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(SubprocessTracker {
            command: command.to_string(),
            n_controls,
            timeout,
            process: Mutex::new(Process {
                child,
                stdin,
                lines: rx,
            }),
        })
    }

    fn fail(&self, what: &str, excerpt: &str) -> RigError {
        let mut excerpt = excerpt.to_string();
        excerpt.truncate(200);
        RigError::Tracker(format!(
            "subprocess `{}`: {what} (transcript: {excerpt:?})",
            self.command
        ))
    }
}

impl Tracker for SubprocessTracker {
    fn n_controls(&self) -> usize {
        self.n_controls
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::default()
    }

    fn track(&self, v: &DVector<f64>, theta_t: &DVector<f64>) -> Result<DVector<f64>> {
        let request = serde_json::to_string(&Request {
            theta_t: theta_t.as_slice(),
            v: v.as_slice(),
        })?;
        let mut p = self
            .process
            .lock()
            .map_err(|_| self.fail("lock poisoned", ""))?;
        writeln!(p.stdin, "{request}")
            .and_then(|_| p.stdin.flush())
            .map_err(|e| self.fail(&format!("write failed: {e}"), &request))?;
        let line = match p.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(self.fail(&format!("read failed: {e}"), &request)),
            Err(RecvTimeoutError::Timeout) => return Err(self.fail("timed out", &request)),
            Err(RecvTimeoutError::Disconnected) => {
                return Err(self.fail("process exited", &request))
            }
        };
        let resp: Response = serde_json::from_str(&line)
            .map_err(|e| self.fail(&format!("malformed response: {e}"), &line))?;
        if resp.c.len() != self.n_controls {
            return Err(self.fail(
                &format!(
                    "expected {} controls, got {}",
                    self.n_controls,
                    resp.c.len()
                ),
                &line,
            ));
        }
        if resp.c.iter().any(|x| !x.is_finite()) {
            return Err(self.fail("non-finite controls", &line));
        }
        Ok(DVector::from_vec(resp.c))
    }
}

impl Drop for SubprocessTracker {
    fn drop(&mut self) {
        if let Ok(p) = self.process.get_mut() {
            let _ = p.child.kill();
            let _ = p.child.wait();
        }
    }
}
