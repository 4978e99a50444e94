//! Desk-scale linear experiments: gradient descent on a 3×3 (or 2×2, 1×1)
//! tracker matrix with embedded data, labeled result tables and pass/fail
//! thresholds.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Result, RigError};
use crate::fitting::ExpressionPair;
use crate::implicit::{
    difference_quotients, l_delta_profile, random_unit, DirectionStrategy, StepPolicy,
};
use crate::linalg::pinv_solve;
use crate::objective::{direct_fit, GeometryTarget, ObjectiveConfig, Problem, TrainingPair};
use crate::optimizer::{
    fine_tune, AnalyticDvhat, DiffConfig, OptimizationReport, OptimizerConfig, StopReason,
};
use crate::rig::{params_to_matrix, LinearRig, ParamSet, Rig};
use crate::tracker::{
    ControlPerturbation, PerturbationMode, Precision, RigInverseTracker, SolveMode, Tracker,
};

/// Bumped whenever a threshold changes.
pub const THRESHOLDS_VERSION: u32 = 1;

pub mod data {
    use nalgebra::DMatrix;

    /// Controls, one pair per column.
    pub fn c4() -> DMatrix<f64> {
        DMatrix::from_row_slice(
            3,
            4,
            &[
                1.0, 2.0, 3.0, 1.0, 2.0, -1.0, 1.0, 1.0, 3.0, -1.0, -2.0, 1.0,
            ],
        )
    }

    pub fn v4() -> DMatrix<f64> {
        DMatrix::from_row_slice(
            3,
            4,
            &[
                -1.0,
                -2.0,
                -3.0,
                -1.0,
                4.0,
                -2.0,
                2.0,
                2.0,
                -2.0,
                2.0 / 3.0,
                4.0 / 3.0,
                -2.0 / 3.0,
            ],
        )
    }

    /// Geometry with roughly 1% noise, as printed to three digits.
    pub fn v4_hat() -> DMatrix<f64> {
        DMatrix::from_row_slice(
            3,
            4,
            &[
                -0.990, -2.00, -2.97, -1.00, 3.97, -1.98, 1.98, 2.01, -1.98, 0.667, 1.33, -0.667,
            ],
        )
    }

    pub fn a_true() -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-1.0, 2.0, -2.0 / 3.0]))
    }

    pub fn first_columns(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
        m.columns(0, k).into_owned()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Table1,
    Table2,
    Table3,
    Table4,
    Table5,
    Table6,
    Table7,
    Table8,
    Fig1,
    Fig2,
    Fig3,
    Fig7,
}

impl Target {
    pub const ALL: [Target; 12] = [
        Target::Table1,
        Target::Table2,
        Target::Table3,
        Target::Table4,
        Target::Table5,
        Target::Table6,
        Target::Table7,
        Target::Table8,
        Target::Fig1,
        Target::Fig2,
        Target::Fig3,
        Target::Fig7,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Target::Table1 => "table1",
            Target::Table2 => "table2",
            Target::Table3 => "table3",
            Target::Table4 => "table4",
            Target::Table5 => "table5",
            Target::Table6 => "table6",
            Target::Table7 => "table7",
            Target::Table8 => "table8",
            Target::Fig1 => "fig1",
            Target::Fig2 => "fig2",
            Target::Fig3 => "fig3",
            Target::Fig7 => "fig7",
        }
    }
}

impl FromStr for Target {
    type Err = RigError;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| RigError::invalid("repro target", format!("unknown target '{s}'")))
    }
}

impl std::fmt::Display for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Bound {
    AtMost {
        value: f64,
    },
    Below {
        value: f64,
    },
    AtLeast {
        value: f64,
    },
    Above {
        value: f64,
    },
    /// Open interval.
    Between {
        lo: f64,
        hi: f64,
    },
    /// Closed interval.
    Within {
        lo: f64,
        hi: f64,
    },
    Relative {
        target: f64,
        rel: f64,
    },
}

impl Bound {
    pub fn holds(&self, x: f64) -> bool {
        match *self {
            Bound::AtMost { value } => x <= value,
            Bound::Below { value } => x < value,
            Bound::AtLeast { value } => x >= value,
            Bound::Above { value } => x > value,
            Bound::Between { lo, hi } => x > lo && x < hi,
            Bound::Within { lo, hi } => x >= lo && x <= hi,
            Bound::Relative { target, rel } => ((x - target) / target).abs() <= rel,
        }
    }
}

impl std::fmt::Display for Bound {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Bound::AtMost { value } => write!(f, "<= {value:e}"),
            Bound::Below { value } => write!(f, "< {value:e}"),
            Bound::AtLeast { value } => write!(f, ">= {value:e}"),
            Bound::Above { value } => write!(f, "> {value:e}"),
            Bound::Between { lo, hi } => write!(f, "in ({lo:e}, {hi:e})"),
            Bound::Within { lo, hi } => write!(f, "in [{lo:e}, {hi:e}]"),
            Bound::Relative { target, rel } => write!(f, "within {}% of {target:e}", rel * 100.0),
        }
    }
}

pub struct Threshold {
    pub target: Target,
    pub row: &'static str,
    pub column: &'static str,
    pub bound: Bound,
}

const fn th(target: Target, row: &'static str, column: &'static str, bound: Bound) -> Threshold {
    Threshold {
        target,
        row,
        column,
        bound,
    }
}

const fn at_most(value: f64) -> Bound {
    Bound::AtMost { value }
}

const fn below(value: f64) -> Bound {
    Bound::Below { value }
}

const fn above(value: f64) -> Bound {
    Bound::Above { value }
}

const fn at_least(value: f64) -> Bound {
    Bound::AtLeast { value }
}

pub const L_D: &str = "L_D";
pub const L_SUM: &str = "L_gamma1+L_gamma2+L_gamma3";
pub const L_G1: &str = "L_gamma1";
pub const L_G2: &str = "L_gamma2";
pub const D_A: &str = "|A_hat-A|_F^2";
pub const D_A2: &str = "|A_hat-A_2|_F^2";
pub const D_A4: &str = "|A_hat-A_hat_4|_F^2";
pub const D_A2S: &str = "|A_hat-A_hat_2*|_F^2";
pub const ITERS: &str = "iters";
pub const MU_DV: &str = "mu(sum_k |dvhat_k/dtheta|_F^2)";
pub const MU_LV: &str = "mu(L_vhat')";
pub const RATIO: &str = "ratio";
pub const SECONDS: &str = "seconds";

pub const DIRECT: &str = "Direct";
pub const G1: &str = "gamma1 only";
pub const G2: &str = "gamma2 only";
pub const G1E: &str = "gamma1 & gamma_eps";
pub const G2E: &str = "gamma2 & gamma_eps";
pub const G1DV: &str = "gamma1 & dvhat/dtheta";
pub const R1: &str = "1 random";
pub const R10: &str = "10 random";
pub const R100: &str = "100 random";
pub const AUTO: &str = "auto-diff";
pub const SD: &str = "steepest descent";

/// Pass/fail thresholds for every target.
pub const THRESHOLDS: &[Threshold] = &[
    th(Target::Table1, DIRECT, L_D, at_most(1e-10)),
    th(Target::Table1, G1, L_D, at_most(1e-6)),
    th(Target::Table1, G1, L_SUM, at_most(1e-6)),
    th(Target::Table1, G1, D_A, at_most(1e-6)),
    th(Target::Table1, G2, L_D, at_most(1e-6)),
    th(Target::Table1, G2, L_SUM, at_most(1e-6)),
    th(Target::Table1, G2, D_A, at_most(1e-6)),
    th(Target::Table1, "run", SECONDS, below(10.0)),
    th(Target::Table2, G1, L_G1, at_most(1e-6)),
    th(Target::Table2, G1, D_A, above(1.0)),
    th(Target::Table2, G2, L_G2, at_most(1e-6)),
    th(Target::Table2, G2, D_A, above(1.0)),
    th(Target::Table2, G1E, D_A, at_most(1e-6)),
    th(Target::Table2, G2E, D_A, at_most(1e-6)),
    th(
        Target::Table3,
        DIRECT,
        L_D,
        Bound::Relative {
            target: 6.60e-4,
            rel: 0.02,
        },
    ),
    th(Target::Table3, G1, D_A4, at_most(1e-6)),
    th(Target::Table3, G2, L_G2, at_most(1e-6)),
    th(Target::Table3, G2, D_A, at_most(1e-6)),
    th(Target::Table4, G1E, D_A2S, at_most(1e-3)),
    th(Target::Table4, G2E, D_A, at_most(1e-6)),
    th(Target::Table5, G1, L_G1, at_most(1e-7)),
    th(Target::Table5, G1DV, L_G1, at_most(1e-7)),
    th(Target::Table5, "with/without", RATIO, at_most(1.2)),
    th(Target::Table6, G1, L_G1, at_most(1e-7)),
    th(Target::Table6, G1DV, L_G1, at_most(1e-7)),
    th(Target::Table6, "with/without", RATIO, at_most(0.5)),
    th(Target::Table7, "10 random/1 random", MU_LV, below(1.0)),
    th(Target::Table7, "100 random/10 random", MU_LV, below(1.0)),
    th(
        Target::Table7,
        "steepest descent/1 random",
        ITERS,
        below(1.0),
    ),
    th(Target::Table8, "10 random/1 random", MU_LV, below(1.0)),
    th(Target::Table8, "100 random/10 random", MU_LV, below(1.0)),
    th(Target::Table8, R100, MU_LV, at_most(1e-4)),
    th(Target::Fig1, "final", "|A_hat|", above(1e3)),
    th(
        Target::Fig1,
        "final",
        "C",
        Bound::Between { lo: -1e-2, hi: 0.0 },
    ),
    th(Target::Fig1, "trajectory max", "C", below(0.0)),
    th(Target::Fig2, "final", "min |A_hat_ij|", at_least(10.0)),
    th(Target::Fig2, "final", "max |C_ij|", below(0.1)),
    th(Target::Fig2, "trajectory", "C sign changes", at_most(0.0)),
    th(Target::Fig3, "final", "|C-C_true|_F", below(1e-3)),
    th(Target::Fig7, "T1", "L(1e-6)/min", at_least(10.0)),
    th(Target::Fig7, "T2", "L(1e-6)/min", at_least(10.0)),
    th(Target::Fig7, "T1", "L(1e1)/min", below(10.0)),
    th(Target::Fig7, "T2", "L(1e1)/min", at_least(10.0)),
    th(
        Target::Fig7,
        "T1",
        "argmin s",
        Bound::Within { lo: 1e-5, hi: 1e1 },
    ),
    th(
        Target::Fig7,
        "T2",
        "argmin s",
        Bound::Within { lo: 1e-5, hi: 1.0 },
    ),
    th(Target::Fig7, "T1", "min L[1e-5..1e0]/min", at_most(10.0)),
    th(Target::Fig7, "T2", "min L[1e-5..1e0]/min", at_most(10.0)),
];

/// Values printed for the tables, for side-by-side reporting.
pub const PRINTED: &[(Target, &str, &str, f64)] = &[
    (Target::Table1, DIRECT, L_D, 4.58e-12),
    (Target::Table1, DIRECT, L_SUM, 4.85e-12),
    (Target::Table1, DIRECT, D_A, 4.26e-13),
    (Target::Table1, G1, L_D, 2.05e-8),
    (Target::Table1, G1, L_SUM, 2.58e-8),
    (Target::Table1, G1, D_A, 1.31e-8),
    (Target::Table1, G2, L_D, 1.54e-9),
    (Target::Table1, G2, L_SUM, 4.15e-9),
    (Target::Table1, G2, D_A, 9.82e-10),
    (Target::Table2, DIRECT, L_D, 1.71e-12),
    (Target::Table2, DIRECT, L_SUM, 6.89e-13),
    (Target::Table2, DIRECT, D_A2, 0.0),
    (Target::Table2, DIRECT, D_A, 2.77),
    (Target::Table2, G1, L_D, 4.228e-9),
    (Target::Table2, G1, L_SUM, 4.90e-12),
    (Target::Table2, G1, D_A2, 7.72e1),
    (Target::Table2, G1, D_A, 6.75e1),
    (Target::Table2, G2, L_D, 2.56e-8),
    (Target::Table2, G2, L_SUM, 1.66e-7),
    (Target::Table2, G2, D_A2, 1.62e2),
    (Target::Table2, G2, D_A, 1.46e2),
    (Target::Table2, G1E, L_D, 1.43e-12),
    (Target::Table2, G1E, L_SUM, 7.33e-12),
    (Target::Table2, G1E, D_A2, 2.77),
    (Target::Table2, G1E, D_A, 5.74e-9),
    (Target::Table2, G2E, L_D, 9.94e-14),
    (Target::Table2, G2E, L_SUM, 2.13e-12),
    (Target::Table2, G2E, D_A2, 2.77),
    (Target::Table2, G2E, D_A, 2.05e-10),
    (Target::Table3, DIRECT, L_D, 6.60e-4),
    (Target::Table3, DIRECT, L_G1, 3.47e-4),
    (Target::Table3, DIRECT, L_G2, 2.55e-3),
    (Target::Table3, DIRECT, D_A4, 0.0),
    (Target::Table3, DIRECT, D_A, 5.57e-4),
    (Target::Table3, G1, L_D, 6.60e-4),
    (Target::Table3, G1, L_G1, 3.47e-4),
    (Target::Table3, G1, L_G2, 2.54e-3),
    (Target::Table3, G1, D_A4, 9.25e-10),
    (Target::Table3, G1, D_A, 5.57e-4),
    (Target::Table3, G2, L_D, 3.21e-3),
    (Target::Table3, G2, L_G1, 2.38e-3),
    (Target::Table3, G2, L_G2, 5.65e-9),
    (Target::Table3, G2, D_A4, 5.58e-4),
    (Target::Table3, G2, D_A, 3.63e-9),
    (Target::Table4, DIRECT, L_D, 1.71e-12),
    (Target::Table4, DIRECT, L_G1, 1.20e-12),
    (Target::Table4, DIRECT, L_G2, 1.80e-3),
    (Target::Table4, DIRECT, D_A2S, 2.77),
    (Target::Table4, DIRECT, D_A, 2.77),
    (Target::Table4, G1, L_D, 9.89e-9),
    (Target::Table4, G1, L_G1, 8.56e-9),
    (Target::Table4, G1, L_G2, 1.80e-3),
    (Target::Table4, G1, D_A2S, 6.66e1),
    (Target::Table4, G1, D_A, 6.66e1),
    (Target::Table4, G2, L_D, 1.13e-2),
    (Target::Table4, G2, L_G1, 1.33e-3),
    (Target::Table4, G2, L_G2, 8.24e-9),
    (Target::Table4, G2, D_A2S, 1.13e2),
    (Target::Table4, G2, D_A, 1.13e2),
    (Target::Table4, G1E, L_D, 7.19e-5),
    (Target::Table4, G1E, L_G1, 1.97e-5),
    (Target::Table4, G1E, L_G2, 1.24e-3),
    (Target::Table4, G1E, D_A2S, 7.23e-6),
    (Target::Table4, G1E, D_A, 9.26e-5),
    (Target::Table4, G2E, L_D, 1.80e-3),
    (Target::Table4, G2E, L_G1, 1.33e-3),
    (Target::Table4, G2E, L_G2, 7.62e-11),
    (Target::Table4, G2E, D_A2S, 1.39e-4),
    (Target::Table4, G2E, D_A, 8.44e-9),
    (Target::Table5, G1, T1_METRIC, 3.86e-8),
    (Target::Table5, G1, ITERS, 13868.0),
    (Target::Table5, G1DV, T1_METRIC, 3.82e-8),
    (Target::Table5, G1DV, ITERS, 12960.0),
    (Target::Table6, G1, T2_METRIC, 3.82e-8),
    (Target::Table6, G1, ITERS, 29083.0),
    (Target::Table6, G1DV, T2_METRIC, 3.79e-8),
    (Target::Table6, G1DV, ITERS, 5329.0),
    (Target::Table7, R1, ITERS, 12781.0),
    (Target::Table7, R1, MU_DV, 7.04e-3),
    (Target::Table7, R1, MU_LV, 4.57e-6),
    (Target::Table7, R10, ITERS, 12921.0),
    (Target::Table7, R10, MU_DV, 7.05e-3),
    (Target::Table7, R10, MU_LV, 2.86e-7),
    (Target::Table7, R100, ITERS, 12964.0),
    (Target::Table7, R100, MU_DV, 7.05e-3),
    (Target::Table7, R100, MU_LV, 4.63e-8),
    (Target::Table7, AUTO, ITERS, 12960.0),
    (Target::Table7, AUTO, MU_DV, 7.05e-3),
    (Target::Table7, AUTO, MU_LV, 1.74e-11),
    (Target::Table7, SD, ITERS, 9089.0),
    (Target::Table7, SD, MU_DV, 2.09e-3),
    (Target::Table7, SD, MU_LV, 6.41e-3),
    (Target::Table8, R1, ITERS, 4763.0),
    (Target::Table8, R1, MU_DV, 1.71e-1),
    (Target::Table8, R1, MU_LV, 3.50e-4),
    (Target::Table8, R10, ITERS, 5307.0),
    (Target::Table8, R10, MU_DV, 1.93e-1),
    (Target::Table8, R10, MU_LV, 6.32e-6),
    (Target::Table8, R100, ITERS, 5329.0),
    (Target::Table8, R100, MU_DV, 1.94e-1),
    (Target::Table8, R100, MU_LV, 1.24e-6),
    (Target::Table8, AUTO, ITERS, 5329.0),
    (Target::Table8, AUTO, MU_DV, 1.94e-1),
    (Target::Table8, AUTO, MU_LV, 2.57e-10),
    (Target::Table8, SD, ITERS, 4825.0),
    (Target::Table8, SD, MU_DV, 7.28e-2),
    (Target::Table8, SD, MU_LV, 1.93e-1),
];

pub const T1_METRIC: &str = "|V-A_hat C+A_hat C_tilde|_F^2";
pub const T2_METRIC: &str = "|V-A_hat C+A_hat^2 C_tilde|_F^2";

pub fn printed(target: Target, row: &str, column: &str) -> Option<f64> {
    PRINTED
        .iter()
        .find(|(t, r, c, _)| *t == target && *r == row && *c == column)
        .map(|p| p.3)
}

/// Rows × columns of numbers with labels.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabeledTable {
    pub corner: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl LabeledTable {
    pub fn new(corner: &str, columns: &[&str]) -> Self {
        LabeledTable {
            corner: corner.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: &str, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push((row.to_string(), values));
    }

    pub fn get(&self, row: &str, column: &str) -> Option<f64> {
        let j = self.columns.iter().position(|c| c == column)?;
        self.rows.iter().find(|(r, _)| r == row).map(|(_, v)| v[j])
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![self.corner.clone()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for (label, values) in &self.rows {
            let mut rec = vec![label.clone()];
            rec.extend(
                values
                    .iter()
                    .zip(&self.columns)
                    .map(|(x, c)| format_cell(c, *x)),
            );
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| RigError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn format_cell(column: &str, x: f64) -> String {
    if (column == ITERS || column == "iteration") && x.fract() == 0.0 {
        format!("{x}")
    } else {
        format!("{x:.6e}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub row: String,
    pub column: String,
    pub measured: Option<f64>,
    pub bound: Bound,
    pub printed: Option<f64>,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReproOutcome {
    pub target: Target,
    /// The reference-layout table, for table targets.
    pub table: Option<LabeledTable>,
    /// Derived quantities the thresholds refer to.
    pub derived: LabeledTable,
    /// Extra CSV files: `(file name, contents)`.
    #[serde(skip)]
    pub files: Vec<(String, String)>,
    pub checks: Vec<CheckResult>,
    pub seconds: f64,
}

impl ReproOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn lookup(&self, row: &str, column: &str) -> Option<f64> {
        if (row, column) == ("run", SECONDS) {
            return Some(self.seconds);
        }
        self.table
            .as_ref()
            .and_then(|t| t.get(row, column))
            .or_else(|| self.derived.get(row, column))
    }

    fn evaluate(&mut self) {
        self.checks = THRESHOLDS
            .iter()
            .filter(|t| t.target == self.target)
            .map(|t| {
                let measured = self.lookup(t.row, t.column);
                CheckResult {
                    row: t.row.to_string(),
                    column: t.column.to_string(),
                    measured,
                    bound: t.bound,
                    printed: printed(self.target, t.row, t.column),
                    passed: measured.is_some_and(|x| t.bound.holds(x)),
                }
            })
            .collect();
    }

    /// One line per threshold; failures are marked.
    pub fn diff_report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} (thresholds v{THRESHOLDS_VERSION})", self.target);
        for c in &self.checks {
            let measured = c
                .measured
                .map_or("missing".to_string(), |x| format!("{x:.4e}"));
            let printed = c
                .printed
                .map_or(String::new(), |x| format!(" [printed {x:.3e}]"));
            let _ = writeln!(
                s,
                "  {} {} / {}: {} (need {}){}",
                if c.passed { "ok  " } else { "FAIL" },
                c.row,
                c.column,
                measured,
                c.bound,
                printed
            );
        }
        if let Some(t) = &self.table {
            for (row, values) in &t.rows {
                for (col, x) in t.columns.iter().zip(values) {
                    if let Some(p) = printed(self.target, row, col) {
                        let _ = writeln!(s, "  cell {row} / {col}: {x:.4e} vs printed {p:.3e}");
                    }
                }
            }
        }
        s
    }

    /// Writes `<target>.csv` (table targets), `<target>_derived.csv` and any
    /// extra files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<String>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut put = |name: String, body: &str| -> Result<()> {
            std::fs::write(dir.join(&name), body)?;
            written.push(name);
            Ok(())
        };
        if let Some(t) = &self.table {
            put(format!("{}.csv", self.target), &t.to_csv()?)?;
        }
        if !self.derived.columns.is_empty() {
            put(
                format!("{}_derived.csv", self.target),
                &self.derived.to_csv()?,
            )?;
        }
        for (name, body) in &self.files {
            put(name.clone(), body)?;
        }
        Ok(written)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ReproOptions {
    /// Seed for the random secant directions.
    pub seed: u64,
}

pub fn run(target: Target, opts: &ReproOptions) -> Result<ReproOutcome> {
    let started = Instant::now();
    let (table, derived, files) = match target {
        Target::Table1 => table1()?,
        Target::Table2 => table2()?,
        Target::Table3 => table3()?,
        Target::Table4 => table4()?,
        Target::Table5 => table56(Setup::T1)?,
        Target::Table6 => table56(Setup::T2)?,
        Target::Table7 => table78(Setup::T1, opts.seed)?,
        Target::Table8 => table78(Setup::T2, opts.seed)?,
        Target::Fig1 => fig1()?,
        Target::Fig2 => fig23(Target::Fig2)?,
        Target::Fig3 => fig23(Target::Fig3)?,
        Target::Fig7 => fig7(opts.seed)?,
    };
    let seconds = started.elapsed().as_secs_f64();
    let mut out = ReproOutcome {
        target,
        table,
        derived,
        files,
        checks: Vec::new(),
        seconds,
    };
    out.evaluate();
    Ok(out)
}

type Produced = (Option<LabeledTable>, LabeledTable, Vec<(String, String)>);

fn row_major(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        a.len(),
        (0..a.nrows()).flat_map(|i| (0..a.ncols()).map(move |j| a[(i, j)])),
    )
}

fn pairs_of(c: &DMatrix<f64>, v: &DMatrix<f64>) -> Vec<TrainingPair> {
    (0..c.ncols())
        .map(|k| {
            TrainingPair::new(
                format!("pair{k}"),
                c.column(k).into_owned(),
                v.column(k).into_owned(),
            )
        })
        .collect()
}

fn expression_pairs(c: &DMatrix<f64>, v: &DMatrix<f64>) -> Vec<ExpressionPair> {
    (0..c.ncols())
        .map(|k| {
            ExpressionPair::new(
                format!("pair{k}"),
                c.column(k).into_owned(),
                v.column(k).into_owned(),
            )
        })
        .collect()
}

struct LinearRun {
    a_hat: DMatrix<f64>,
    report: OptimizationReport,
}

struct GdSpec<'a> {
    c: &'a DMatrix<f64>,
    v: &'a DMatrix<f64>,
    tracker: &'a dyn Tracker,
    objective: ObjectiveConfig,
    theta_r: DVector<f64>,
    theta0: DVector<f64>,
    step: f64,
    max_iters: usize,
    target_loss: Option<f64>,
    sample_every: usize,
    diff: DiffConfig,
}

fn gradient_descent(spec: GdSpec<'_>) -> Result<LinearRun> {
    let n = spec.c.nrows();
    let rig: Rig = LinearRig::new(spec.v.nrows(), n, spec.theta_r.clone())?.into();
    let pairs = pairs_of(spec.c, spec.v);
    let active = ParamSet::all(rig.n_params());
    let problem = Problem {
        rig: &rig,
        tracker: spec.tracker,
        pairs: &pairs,
        theta_r: &spec.theta_r,
        config: &spec.objective,
        active: &active,
    };
    let opt = OptimizerConfig {
        step_size: spec.step,
        max_iters: spec.max_iters,
        target_loss: spec.target_loss,
        sample_every: spec.sample_every,
        ..Default::default()
    };
    let report = fine_tune(&problem, &spec.theta0, &opt, &spec.diff)?;
    let theta = DVector::from_column_slice(&report.theta_final);
    Ok(LinearRun {
        a_hat: params_to_matrix(&theta, spec.v.nrows(), n),
        report,
    })
}

/// Gradient steps taken (the convergence check happens before a step).
fn steps_taken(r: &OptimizationReport) -> usize {
    if r.stop_reason == StopReason::TargetLoss {
        r.iterations - 1
    } else {
        r.iterations
    }
}

fn inverse_tracker(a: &DMatrix<f64>) -> RigInverseTracker {
    RigInverseTracker::new(LinearRig::from_matrix(a).into()).with_mode(SolveMode::Inverse)
}

/// Loss terms of a tracker matrix `Â` on `(C, V)` with the tracker
/// `T = Â⁺ V` (minimum norm when `Â` is singular) and animation rig `A`.
struct Metrics {
    l_d: f64,
    l1: f64,
    l2: f64,
    l3: f64,
}

fn metrics(a_hat: &DMatrix<f64>, a: &DMatrix<f64>, c: &DMatrix<f64>, v: &DMatrix<f64>) -> Metrics {
    let t = pinv_solve(a_hat, v).0;
    Metrics {
        l_d: (a_hat * c - v).norm_squared(),
        l1: (&t - c).norm_squared(),
        l2: (a * &t - v).norm_squared(),
        l3: (a_hat * &t - v).norm_squared(),
    }
}

fn direct(c: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(direct_fit(&expression_pairs(c, v))?.a_hat)
}

struct Weights {
    g1: f64,
    g2: f64,
    ge: f64,
}

const GAMMA_EPS: f64 = 1e-2;

fn run_weights(
    c: &DMatrix<f64>,
    v: &DMatrix<f64>,
    w: &Weights,
    max_iters: usize,
    target_loss: Option<f64>,
) -> Result<LinearRun> {
    let a = data::a_true();
    let n = c.nrows();
    let tracker = inverse_tracker(&a);
    let objective = ObjectiveConfig {
        geometry_target: GeometryTarget::Input,
        ..ObjectiveConfig::weights(w.g1, w.g2, 0.0, w.ge)
    };
    gradient_descent(GdSpec {
        c,
        v,
        tracker: &tracker,
        objective,
        theta_r: row_major(&a),
        theta0: row_major(&DMatrix::identity(n, n)),
        step: 1e-2,
        max_iters,
        target_loss,
        sample_every: max_iters,
        diff: DiffConfig::zero(),
    })
}

const G1_ONLY: Weights = Weights {
    g1: 1.0,
    g2: 0.0,
    ge: 0.0,
};
const G2_ONLY: Weights = Weights {
    g1: 0.0,
    g2: 1.0,
    ge: 0.0,
};
const G1_EPS: Weights = Weights {
    g1: 1.0,
    g2: 0.0,
    ge: GAMMA_EPS,
};
const G2_EPS: Weights = Weights {
    g1: 0.0,
    g2: 1.0,
    ge: GAMMA_EPS,
};

fn table1() -> Result<Produced> {
    let (c, v, a) = (data::c4(), data::v4(), data::a_true());
    let mut t = LabeledTable::new("", &[L_D, L_SUM, D_A]);
    let mut row = |label: &str, a_hat: &DMatrix<f64>| {
        let m = metrics(a_hat, &a, &c, &v);
        t.push(
            label,
            vec![m.l_d, m.l1 + m.l2 + m.l3, (a_hat - &a).norm_squared()],
        );
    };
    row(DIRECT, &direct(&c, &v)?);
    let runs: Vec<LinearRun> = [G1_ONLY, G2_ONLY]
        .par_iter()
        .map(|w| run_weights(&c, &v, w, 200_000, Some(1e-12)))
        .collect::<Result<_>>()?;
    row(G1, &runs[0].a_hat);
    row(G2, &runs[1].a_hat);
    let mut d = LabeledTable::new("", &[ITERS]);
    d.push(G1, vec![steps_taken(&runs[0].report) as f64]);
    d.push(G2, vec![steps_taken(&runs[1].report) as f64]);
    Ok((Some(t), d, Vec::new()))
}

fn table2() -> Result<Produced> {
    let (c, v, a) = (
        data::first_columns(&data::c4(), 2),
        data::first_columns(&data::v4(), 2),
        data::a_true(),
    );
    let a2 = direct(&c, &v)?;
    let mut t = LabeledTable::new("", &[L_D, L_SUM, D_A2, D_A]);
    let mut d = LabeledTable::new("", &[L_G1, L_G2, ITERS]);
    let mut row = |label: &str, a_hat: &DMatrix<f64>, iters: f64| {
        let m = metrics(a_hat, &a, &c, &v);
        t.push(
            label,
            vec![
                m.l_d,
                m.l1 + m.l2 + m.l3,
                (a_hat - &a2).norm_squared(),
                (a_hat - &a).norm_squared(),
            ],
        );
        d.push(label, vec![m.l1, m.l2, iters]);
    };
    row(DIRECT, &a2, 0.0);
    let specs = [(G1, G1_ONLY), (G2, G2_ONLY), (G1E, G1_EPS), (G2E, G2_EPS)];
    let runs: Vec<LinearRun> = specs
        .par_iter()
        .map(|(_, w)| run_weights(&c, &v, w, 400_000, Some(1e-14)))
        .collect::<Result<_>>()?;
    for ((label, _), r) in specs.iter().zip(&runs) {
        row(label, &r.a_hat, steps_taken(&r.report) as f64);
    }
    Ok((Some(t), d, Vec::new()))
}

fn table3() -> Result<Produced> {
    let (c, v, a) = (data::c4(), data::v4_hat(), data::a_true());
    let a4 = direct(&c, &v)?;
    let mut t = LabeledTable::new("", &[L_D, L_G1, L_G2, D_A4, D_A]);
    let mut row = |label: &str, a_hat: &DMatrix<f64>| {
        let m = metrics(a_hat, &a, &c, &v);
        t.push(
            label,
            vec![
                m.l_d,
                m.l1,
                m.l2,
                (a_hat - &a4).norm_squared(),
                (a_hat - &a).norm_squared(),
            ],
        );
    };
    row(DIRECT, &a4);
    let runs: Vec<LinearRun> = [G1_ONLY, G2_ONLY]
        .par_iter()
        .map(|w| run_weights(&c, &v, w, 200_000, None))
        .collect::<Result<_>>()?;
    row(G1, &runs[0].a_hat);
    row(G2, &runs[1].a_hat);
    Ok((Some(t), LabeledTable::new("", &[]), Vec::new()))
}

/// Minimum-norm fit on two columns completed by a third column `x ⟂ C` with
/// geometry `A x`.
pub fn a_hat_2_star(
    c2: &DMatrix<f64>,
    v2: &DMatrix<f64>,
    a: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let x = c2.column(0).cross(&c2.column(1));
    let mut cs = DMatrix::zeros(3, 3);
    let mut vs = DMatrix::zeros(3, 3);
    cs.columns_mut(0, 2).copy_from(c2);
    vs.columns_mut(0, 2).copy_from(v2);
    cs.set_column(2, &x);
    vs.set_column(2, &(a * &x));
    let sol = cs
        .transpose()
        .lu()
        .solve(&vs.transpose())
        .ok_or(RigError::Singular {
            context: "completed pair system",
        })?;
    Ok(sol.transpose())
}

fn table4() -> Result<Produced> {
    let (c, v, a) = (
        data::first_columns(&data::c4(), 2),
        data::first_columns(&data::v4_hat(), 2),
        data::a_true(),
    );
    let a2s = a_hat_2_star(&c, &v, &a)?;
    let mut t = LabeledTable::new("", &[L_D, L_G1, L_G2, D_A2S, D_A]);
    let mut row = |label: &str, a_hat: &DMatrix<f64>| {
        let m = metrics(a_hat, &a, &c, &v);
        t.push(
            label,
            vec![
                m.l_d,
                m.l1,
                m.l2,
                (a_hat - &a2s).norm_squared(),
                (a_hat - &a).norm_squared(),
            ],
        );
    };
    row(DIRECT, &direct(&c, &v)?);
    let specs = [(G1, G1_ONLY), (G2, G2_ONLY), (G1E, G1_EPS), (G2E, G2_EPS)];
    let runs: Vec<LinearRun> = specs
        .par_iter()
        .map(|(_, w)| run_weights(&c, &v, w, 400_000, None))
        .collect::<Result<_>>()?;
    for ((label, _), r) in specs.iter().zip(&runs) {
        row(label, &r.a_hat);
    }
    Ok((Some(t), LabeledTable::new("", &[]), Vec::new()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Setup {
    /// `T = Â⁻¹v + c̃`
    T1,
    /// `T = Â⁻¹v + Â c̃`
    T2,
}

impl Setup {
    fn mode(self) -> PerturbationMode {
        match self {
            Setup::T1 => PerturbationMode::Additive,
            Setup::T2 => PerturbationMode::RigScaled,
        }
    }
}

/// Three-column data with tracker error `C̃ = A⁻¹(V̂ − V)`.
pub struct PerturbedData {
    pub c: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub c_tilde: DMatrix<f64>,
}

pub fn perturbed_data() -> PerturbedData {
    let a = data::a_true();
    let v = data::first_columns(&data::v4(), 3);
    let vh = data::first_columns(&data::v4_hat(), 3);
    let c_tilde = a.lu().solve(&(vh - &v)).expect("A is invertible");
    PerturbedData {
        c: data::first_columns(&data::c4(), 3),
        v,
        c_tilde,
    }
}

/// Block matrix with `t` repeated along the diagonal: `∂(Â x)/∂θ` at fixed `x`
/// for row-major θ.
pub fn block_row(t: &DVector<f64>, m: usize) -> DMatrix<f64> {
    let n = t.len();
    let mut b = DMatrix::zeros(m, m * n);
    for i in 0..m {
        for j in 0..n {
            b[(i, i * n + j)] = t[j];
        }
    }
    b
}

pub fn perturbed_tracker(
    setup: Setup,
    d: &PerturbedData,
    precision: Precision,
) -> RigInverseTracker {
    let table = (0..d.v.ncols())
        .map(|k| (d.v.column(k).into_owned(), d.c_tilde.column(k).into_owned()))
        .collect();
    RigInverseTracker::new(LinearRig::from_matrix(&data::a_true()).into())
        .with_mode(SolveMode::Inverse)
        .with_precision(precision)
        .with_perturbation(ControlPerturbation::lookup(setup.mode(), table))
}

/// Closed-form `∂v̂_k/∂θ` for the perturbed trackers.
pub fn analytic_dvhat(setup: Setup, c_tilde: &DMatrix<f64>) -> AnalyticDvhat {
    let ct = c_tilde.clone();
    Arc::new(move |k, _, theta| {
        let m = ct.nrows();
        let a_hat = params_to_matrix(theta, m, m);
        let c = ct.column(k).into_owned();
        Ok(match setup {
            Setup::T1 => block_row(&c, m),
            Setup::T2 => &a_hat * block_row(&c, m) + block_row(&(&a_hat * &c), m),
        })
    })
}

fn perturbed_run(setup: Setup, d: &PerturbedData, diff: DiffConfig) -> Result<LinearRun> {
    let a = data::a_true();
    let tracker = perturbed_tracker(setup, d, Precision::F64);
    gradient_descent(GdSpec {
        c: &d.c,
        v: &d.v,
        tracker: &tracker,
        objective: ObjectiveConfig::weights(1.0, 0.0, 0.0, 0.0),
        theta_r: row_major(&a),
        theta0: row_major(&DMatrix::identity(3, 3)),
        step: 1e-2,
        max_iters: 200_000,
        target_loss: Some(1e-7),
        sample_every: 200_000,
        diff,
    })
}

fn setup_metric(setup: Setup, a_hat: &DMatrix<f64>, d: &PerturbedData) -> f64 {
    match setup {
        Setup::T1 => (&d.v - a_hat * &d.c + a_hat * &d.c_tilde).norm_squared(),
        Setup::T2 => (&d.v - a_hat * &d.c + a_hat * a_hat * &d.c_tilde).norm_squared(),
    }
}

fn table56(setup: Setup) -> Result<Produced> {
    let d = perturbed_data();
    let metric = match setup {
        Setup::T1 => T1_METRIC,
        Setup::T2 => T2_METRIC,
    };
    let analytic = analytic_dvhat(setup, &d.c_tilde);
    let diffs = [DiffConfig::zero(), DiffConfig::analytic(analytic)];
    let runs: Vec<LinearRun> = diffs
        .into_par_iter()
        .map(|diff| perturbed_run(setup, &d, diff))
        .collect::<Result<_>>()?;
    let mut t = LabeledTable::new("", &[metric, ITERS]);
    let mut derived = LabeledTable::new("", &[L_G1, RATIO]);
    for (label, r) in [G1, G1DV].iter().zip(&runs) {
        t.push(
            label,
            vec![
                setup_metric(setup, &r.a_hat, &d),
                steps_taken(&r.report) as f64,
            ],
        );
        derived.push(label, vec![r.report.final_loss.gamma1, f64::NAN]);
    }
    let ratio = steps_taken(&runs[1].report) as f64 / steps_taken(&runs[0].report) as f64;
    derived.push("with/without", vec![f64::NAN, ratio]);
    Ok((Some(t), derived, Vec::new()))
}

fn table78(setup: Setup, seed: u64) -> Result<Produced> {
    let d = perturbed_data();
    let analytic = analytic_dvhat(setup, &d.c_tilde);
    let policy = StepPolicy::Fixed { s: 1e-4 };
    let with_ref = |mut diff: DiffConfig| {
        diff.lvhat_reference = Some(analytic.clone());
        diff
    };
    let rows: Vec<(&str, DiffConfig)> = vec![
        (
            R1,
            with_ref(DiffConfig::estimate(
                DirectionStrategy::Random { k: 1, seed },
                policy.clone(),
            )),
        ),
        (
            R10,
            with_ref(DiffConfig::estimate(
                DirectionStrategy::Random { k: 10, seed },
                policy.clone(),
            )),
        ),
        (
            R100,
            with_ref(DiffConfig::estimate(
                DirectionStrategy::Random { k: 100, seed },
                policy.clone(),
            )),
        ),
        (AUTO, with_ref(DiffConfig::analytic(analytic.clone()))),
        (
            SD,
            with_ref(DiffConfig::estimate(
                DirectionStrategy::SteepestDescent,
                policy,
            )),
        ),
    ];
    let runs: Vec<LinearRun> = rows
        .par_iter()
        .map(|(_, diff)| perturbed_run(setup, &d, diff.clone()))
        .collect::<Result<_>>()?;
    let mut t = LabeledTable::new(
        match setup {
            Setup::T1 => "T1",
            Setup::T2 => "T2",
        },
        &[ITERS, MU_DV, MU_LV],
    );
    for ((label, _), r) in rows.iter().zip(&runs) {
        t.push(
            label,
            vec![
                steps_taken(&r.report) as f64,
                r.report.mean_dvhat_sq().unwrap_or(f64::NAN),
                r.report.mean_lvhat().unwrap_or(f64::NAN),
            ],
        );
    }
    let get = |row: &str, col: &str| t.get(row, col).unwrap_or(f64::NAN);
    let mut derived = LabeledTable::new("", &[MU_LV, ITERS, L_G1]);
    derived.push(
        "10 random/1 random",
        vec![get(R10, MU_LV) / get(R1, MU_LV), f64::NAN, f64::NAN],
    );
    derived.push(
        "100 random/10 random",
        vec![get(R100, MU_LV) / get(R10, MU_LV), f64::NAN, f64::NAN],
    );
    derived.push(
        "steepest descent/1 random",
        vec![f64::NAN, get(SD, ITERS) / get(R1, ITERS), f64::NAN],
    );
    for ((label, _), r) in rows.iter().zip(&runs) {
        derived.push(label, vec![f64::NAN, f64::NAN, r.report.final_loss.gamma1]);
    }
    Ok((Some(t), derived, Vec::new()))
}

/// `(iteration, Â entries, C entries)` rows for each trajectory sample.
fn trajectory_csv(
    r: &OptimizationReport,
    c_of: impl Fn(&DMatrix<f64>) -> DMatrix<f64>,
    n: usize,
) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["iteration".to_string()];
    header.extend((0..n * n).map(|l| format!("A_hat_{}{}", l / n, l % n)));
    let probe = c_of(&DMatrix::identity(n, n));
    header
        .extend((0..probe.len()).map(|l| format!("C_{}{}", l / probe.ncols(), l % probe.ncols())));
    w.write_record(&header)?;
    for s in &r.trajectory {
        let a_hat = params_to_matrix(&DVector::from_column_slice(&s.theta), n, n);
        let c = c_of(&a_hat);
        let mut rec = vec![s.iteration.to_string()];
        rec.extend(s.theta.iter().map(|x| format!("{x:.9e}")));
        rec.extend(row_major(&c).iter().map(|x| format!("{x:.9e}")));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| RigError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn tracked(a_hat: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    a_hat
        .clone()
        .lu()
        .solve(v)
        .unwrap_or_else(|| DMatrix::from_element(v.nrows(), v.ncols(), f64::NAN))
}

/// Scalar example: `c = 1`, `v = −1`, start at `Â = 1`. The step size is
/// large so that the slow drift toward infinity is visible within the budget.
pub const FIG1_STEP: f64 = 100.0;
pub const FIG1_ITERS: usize = 3_000_000;

fn fig1() -> Result<Produced> {
    let c = DMatrix::from_element(1, 1, 1.0);
    let v = DMatrix::from_element(1, 1, -1.0);
    let tracker = inverse_tracker(&DMatrix::from_element(1, 1, 1.0));
    let r = gradient_descent(GdSpec {
        c: &c,
        v: &v,
        tracker: &tracker,
        objective: ObjectiveConfig::weights(1.0, 0.0, 0.0, 0.0),
        theta_r: DVector::from_element(1, 1.0),
        theta0: DVector::from_element(1, 1.0),
        step: FIG1_STEP,
        max_iters: FIG1_ITERS,
        target_loss: None,
        sample_every: FIG1_ITERS / 1000,
        diff: DiffConfig::zero(),
    })?;
    let c_final = tracked(&r.a_hat, &v)[(0, 0)];
    let c_max = r
        .report
        .trajectory
        .iter()
        .map(|s| -1.0 / s.theta[0])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut derived = LabeledTable::new("", &["|A_hat|", "C"]);
    derived.push("final", vec![r.a_hat[(0, 0)].abs(), c_final]);
    derived.push("trajectory max", vec![f64::NAN, c_max]);
    let traj = trajectory_csv(&r.report, |a| tracked(a, &v), 1)?;
    Ok((
        None,
        derived,
        vec![("fig1_trajectory.csv".to_string(), traj)],
    ))
}

fn fig23(target: Target) -> Result<Produced> {
    let c = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 1.0]);
    let v = -&c;
    let start = match target {
        Target::Fig2 => DMatrix::identity(2, 2),
        _ => DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
    };
    let tracker = inverse_tracker(&DMatrix::identity(2, 2));
    let iters = 200_000;
    let r = gradient_descent(GdSpec {
        c: &c,
        v: &v,
        tracker: &tracker,
        objective: ObjectiveConfig::weights(1.0, 0.0, 0.0, 0.0),
        theta_r: row_major(&DMatrix::identity(2, 2)),
        theta0: row_major(&start),
        step: 1e-2,
        max_iters: iters,
        target_loss: None,
        sample_every: 200,
        diff: DiffConfig::zero(),
    })?;
    let c_final = tracked(&r.a_hat, &v);
    let traj = trajectory_csv(&r.report, |a| tracked(a, &v), 2)?;
    let name = format!("{target}_trajectory.csv");
    let derived = if target == Target::Fig2 {
        let start_c = tracked(&start, &v);
        let mut sign_changes = 0usize;
        let mut prev = start_c.clone();
        for s in &r.report.trajectory {
            let cur = tracked(
                &params_to_matrix(&DVector::from_column_slice(&s.theta), 2, 2),
                &v,
            );
            sign_changes += cur
                .iter()
                .zip(prev.iter())
                .filter(|(a, b)| a.signum() != b.signum())
                .count();
            prev = cur;
        }
        let mut d = LabeledTable::new("", &["min |A_hat_ij|", "max |C_ij|", "C sign changes"]);
        d.push(
            "final",
            vec![r.a_hat.abs().min(), c_final.abs().max(), f64::NAN],
        );
        d.push("trajectory", vec![f64::NAN, f64::NAN, sign_changes as f64]);
        d
    } else {
        let mut d = LabeledTable::new("", &["|C-C_true|_F", "|A_hat+I|_F"]);
        let neg_i = -DMatrix::<f64>::identity(2, 2);
        d.push(
            "final",
            vec![(&c_final - &c).norm(), (&r.a_hat - neg_i).norm()],
        );
        d
    };
    Ok((None, derived, vec![(name, traj)]))
}

/// Parameter points where the landscape is sampled: `I`, `0.2A + 0.8I`, `A`.
fn landscape_points() -> Vec<DVector<f64>> {
    let a = row_major(&data::a_true());
    let i = row_major(&DMatrix::identity(3, 3));
    vec![i.clone(), &a * 0.2 + &i * 0.8, a]
}

pub const FIG7_DIRECTIONS: usize = 20;

/// `L_Δ` profiles for every point, direction and pair, in that order.
pub fn landscape_profiles(setup: Setup, seed: u64) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let d = perturbed_data();
    let tracker = perturbed_tracker(setup, &d, Precision::F32);
    let rig: Rig = LinearRig::from_matrix(&data::a_true()).into();
    let grid = crate::implicit::default_grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs = Vec::new();
    for theta in landscape_points() {
        for _ in 0..FIG7_DIRECTIONS {
            let dir = random_unit(&mut rng, theta.len());
            for k in 0..d.v.ncols() {
                jobs.push((theta.clone(), dir.clone(), k));
            }
        }
    }
    let profiles = jobs
        .par_iter()
        .map(|(theta, dir, k)| {
            let v = d.v.column(*k).into_owned();
            let u = |th: &DVector<f64>| -> Result<DVector<f64>> {
                let c = tracker.track(&v, th)?;
                rig.eval_with(th, &c)
            };
            let u0 = u(theta)?;
            let q = difference_quotients(&u, theta, &u0, dir, &grid)?;
            Ok(l_delta_profile(&q))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((grid, profiles))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn fig7(seed: u64) -> Result<Produced> {
    let mut derived = LabeledTable::new(
        "",
        &[
            "L(1e-6)/min",
            "L(1e1)/min",
            "argmin s",
            "min L[1e-5..1e0]/min",
        ],
    );
    let mut files = Vec::new();
    for (label, setup) in [("T1", Setup::T1), ("T2", Setup::T2)] {
        let (grid, profiles) = landscape_profiles(setup, seed)?;
        let interior: Vec<f64> = grid[1..grid.len() - 1].to_vec();
        let med: Vec<f64> = (0..interior.len())
            .map(|i| median(profiles.iter().map(|p| p[i]).collect()))
            .collect();
        let (imin, lmin) = med
            .iter()
            .copied()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("grid has interior points");
        let at = |s: f64| {
            let i = interior
                .iter()
                .position(|&x| (x / s - 1.0).abs() < 1e-9)
                .expect("grid point");
            med[i] / lmin
        };
        let band = interior
            .iter()
            .zip(&med)
            .filter(|(s, _)| (1e-5 * (1.0 - 1e-9)..=1.0 + 1e-9).contains(*s))
            .map(|(_, l)| l / lmin)
            .fold(f64::INFINITY, f64::min);
        derived.push(label, vec![at(1e-6), at(1e1), interior[imin], band]);

        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["profile".to_string()];
        header.extend(interior.iter().map(|s| format!("{s:e}")));
        w.write_record(&header)?;
        let mut rec = vec!["median".to_string()];
        rec.extend(med.iter().map(|x| format!("{x:.6e}")));
        w.write_record(&rec)?;
        for (i, p) in profiles.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(p.iter().map(|x| format!("{x:.6e}")));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| RigError::Io(e.into_error()))?;
        files.push((
            format!("fig7_{}.csv", label.to_lowercase()),
            String::from_utf8(bytes).expect("utf-8"),
        ));
    }
    Ok((None, derived, files))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedded_pairs_are_consistent_with_the_rig() {
        let residual = data::a_true() * data::c4() - data::v4();
        assert!(residual.norm() < 1e-15);
    }

    #[test]
    fn noisy_geometry_is_within_one_and_a_half_percent() {
        let (v, vh) = (data::v4(), data::v4_hat());
        for (a, b) in v.iter().zip(vh.iter()) {
            assert!(((a - b) / a).abs() <= 0.015, "{a} vs {b}");
        }
    }

    #[test]
    fn direct_fit_on_noisy_geometry_matches_printed_residual() {
        let (c, v) = (data::c4(), data::v4_hat());
        let a4 = direct(&c, &v).unwrap();
        let l_d = (&a4 * &c - &v).norm_squared();
        assert!((l_d / 6.60e-4 - 1.0).abs() < 0.02, "{l_d}");
    }

    #[test]
    fn completed_fit_agrees_with_a_off_the_data_span() {
        let c2 = data::first_columns(&data::c4(), 2);
        let v2 = data::first_columns(&data::v4_hat(), 2);
        let a = data::a_true();
        let a2s = a_hat_2_star(&c2, &v2, &a).unwrap();
        assert!((&a2s * &c2 - &v2).norm() < 1e-12);
        let x = c2.column(0).cross(&c2.column(1));
        assert!((&a2s * &x - &a * &x).norm() < 1e-12);
    }

    #[test]
    fn analytic_dvhat_matches_finite_differences() {
        let d = perturbed_data();
        let theta = row_major(&(data::a_true() * 0.3 + DMatrix::identity(3, 3) * 0.7));
        let rig: Rig = LinearRig::from_matrix(&data::a_true()).into();
        for setup in [Setup::T1, Setup::T2] {
            let tracker = perturbed_tracker(setup, &d, Precision::F64);
            let f = analytic_dvhat(setup, &d.c_tilde);
            for k in 0..3 {
                let v = d.v.column(k).into_owned();
                let u =
                    |th: &DVector<f64>| rig.eval_with(th, &tracker.track(&v, th).unwrap()).unwrap();
                let j = f(k, &crate::objective::ResolvedVariant::Full, &theta).unwrap();
                for l in 0..9 {
                    let h = 1e-6;
                    let mut tp = theta.clone();
                    tp[l] += h;
                    let mut tm = theta.clone();
                    tm[l] -= h;
                    let fd = (u(&tp) - u(&tm)) / (2.0 * h);
                    assert!((fd - j.column(l)).norm() < 1e-6, "{setup:?} k={k} l={l}");
                }
            }
        }
    }

    #[test]
    fn target_names_round_trip() {
        for t in Target::ALL {
            assert_eq!(t.name().parse::<Target>().unwrap(), t);
        }
        assert!("table9".parse::<Target>().is_err());
    }

    #[test]
    fn every_threshold_names_a_printed_or_derived_cell() {
        for t in THRESHOLDS {
            assert!(!t.row.is_empty() && !t.column.is_empty());
        }
    }

    #[test]
    fn bounds() {
        assert!(Bound::Relative {
            target: 6.6e-4,
            rel: 0.02
        }
        .holds(6.5953e-4));
        assert!(!Bound::Between { lo: -1e-2, hi: 0.0 }.holds(0.0));
        assert!(Bound::Within { lo: 1e-5, hi: 1.0 }.holds(1.0));
        assert!(!below(1.0).holds(1.0));
        assert!(!at_most(1.0).holds(f64::NAN));
    }
}
