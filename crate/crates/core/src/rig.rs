//! Parametric rigs `R(c; θ)`: a dense linear rig and a sparse joint-matrix rig
//! driven by pose-space (PSD) products of controls.
//!
//! Both rig types are linear in θ and every parameter touches exactly one
//! geometry row, so `∂R/∂θ` is stored as one `(row, value)` pair per parameter
//! ([`ParamJacobian`]).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, RigError};

/// Sorted, deduplicated set of indices into a parameter (or control) vector.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamSet(Vec<usize>);

impl ParamSet {
    pub fn new(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        ParamSet(indices)
    }

    pub fn all(n: usize) -> Self {
        ParamSet((0..n).collect())
    }

    pub fn empty() -> Self {
        ParamSet(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    /// Position of `i` inside the set, if present.
    pub fn position(&self, i: usize) -> Option<usize> {
        self.0.binary_search(&i).ok()
    }

    pub fn max_index(&self) -> Option<usize> {
        self.0.last().copied()
    }

    pub fn union(&self, other: &ParamSet) -> ParamSet {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        ParamSet::new(v)
    }

    pub fn intersection(&self, other: &ParamSet) -> ParamSet {
        ParamSet(
            self.0
                .iter()
                .copied()
                .filter(|&i| other.contains(i))
                .collect(),
        )
    }

    pub fn difference(&self, other: &ParamSet) -> ParamSet {
        ParamSet(
            self.0
                .iter()
                .copied()
                .filter(|&i| !other.contains(i))
                .collect(),
        )
    }

    pub fn is_disjoint(&self, other: &ParamSet) -> bool {
        self.0.iter().all(|&i| !other.contains(i))
    }

    /// Gather `full[i]` for every `i` in the set.
    pub fn gather(&self, full: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.0.iter().map(|&i| full[i]))
    }

    /// Write `local[k]` into `full[self[k]]`.
    pub fn scatter_into(&self, local: &DVector<f64>, full: &mut DVector<f64>) {
        for (k, &i) in self.0.iter().enumerate() {
            full[i] = local[k];
        }
    }
}

/// Compressed-column sparsity pattern. Parameter `ℓ` is the ℓ-th stored entry
/// in column-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsityPattern {
    n_rows: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    entry_col: Vec<usize>,
}

impl SparsityPattern {
    /// Build from per-entry (row, col) coordinates. Entries are sorted into
    /// column-major order; the returned permutation maps new positions to the
    /// input positions.
    pub fn from_coords(
        n_rows: usize,
        n_cols: usize,
        rows: &[usize],
        cols: &[usize],
    ) -> Result<(Self, Vec<usize>)> {
        check_dim("sparsity coordinates", rows.len(), cols.len())?;
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by_key(|&k| (cols[k], rows[k]));
        for w in order.windows(2) {
            if rows[w[0]] == rows[w[1]] && cols[w[0]] == cols[w[1]] {
                return Err(RigError::invalid(
                    "sparsity",
                    format!("duplicate entry ({}, {})", rows[w[0]], cols[w[0]]),
                ));
            }
        }
        let mut col_ptr = vec![0usize; n_cols + 1];
        let mut row_idx = Vec::with_capacity(rows.len());
        let mut entry_col = Vec::with_capacity(rows.len());
        for &k in &order {
            let (r, c) = (rows[k], cols[k]);
            if r >= n_rows || c >= n_cols {
                return Err(RigError::invalid(
                    "sparsity",
                    format!("entry ({r}, {c}) outside {n_rows}x{n_cols}"),
                ));
            }
            col_ptr[c + 1] += 1;
            row_idx.push(r);
            entry_col.push(c);
        }
        for c in 0..n_cols {
            col_ptr[c + 1] += col_ptr[c];
        }
        Ok((
            SparsityPattern {
                n_rows,
                col_ptr,
                row_idx,
                entry_col,
            },
            order,
        ))
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.col_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn col_range(&self, col: usize) -> std::ops::Range<usize> {
        self.col_ptr[col]..self.col_ptr[col + 1]
    }

    pub fn row_of(&self, entry: usize) -> usize {
        self.row_idx[entry]
    }

    pub fn col_of(&self, entry: usize) -> usize {
        self.entry_col[entry]
    }

    pub fn rows(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn cols(&self) -> &[usize] {
        &self.entry_col
    }
}

/// Dense rig `v = A(θ) c + offset` with θ the row-major entries of `A`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearRig {
    n_controls: usize,
    m_geometry: usize,
    theta: DVector<f64>,
    neutral_offset: DVector<f64>,
    control_names: Vec<String>,
}

impl LinearRig {
    pub fn new(m_geometry: usize, n_controls: usize, theta: DVector<f64>) -> Result<Self> {
        check_dim("linear rig theta", m_geometry * n_controls, theta.len())?;
        check_finite("linear rig theta", &theta)?;
        Ok(LinearRig {
            n_controls,
            m_geometry,
            theta,
            neutral_offset: DVector::zeros(m_geometry),
            control_names: default_names(n_controls),
        })
    }

    /// Rig whose θ is the row-major flattening of `a`.
    pub fn from_matrix(a: &DMatrix<f64>) -> Self {
        let (m, n) = a.shape();
        let theta =
            DVector::from_iterator(m * n, (0..m).flat_map(|i| (0..n).map(move |j| a[(i, j)])));
        LinearRig::new(m, n, theta).expect("dimensions agree by construction")
    }

    pub fn with_neutral_offset(mut self, offset: DVector<f64>) -> Result<Self> {
        check_dim("neutral offset", self.m_geometry, offset.len())?;
        self.neutral_offset = offset;
        Ok(self)
    }

    pub fn with_control_names(mut self, names: Vec<String>) -> Result<Self> {
        check_dim("control names", self.n_controls, names.len())?;
        self.control_names = names;
        Ok(self)
    }

    pub fn neutral_offset(&self) -> &DVector<f64> {
        &self.neutral_offset
    }

    /// `A(θ)` for an arbitrary parameter vector.
    pub fn matrix_with(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        params_to_matrix(theta, self.m_geometry, self.n_controls)
    }
}

/// Row-major parameter vector to an `m × n` matrix.
pub fn params_to_matrix(theta: &DVector<f64>, m: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(m, n, theta.as_slice())
}

/// Sparse joint rig: geometry = joint_matrix · psd_expand(c).
#[derive(Clone, Debug, PartialEq)]
pub struct JointPsdRig {
    n_controls: usize,
    pattern: SparsityPattern,
    theta: DVector<f64>,
    psd_spec: Vec<Vec<usize>>,
    primary_mask: Vec<bool>,
    control_names: Vec<String>,
}

impl JointPsdRig {
    /// `theta[ℓ]` is the value of the ℓ-th entry of `pattern` (column-major).
    pub fn new(
        n_controls: usize,
        pattern: SparsityPattern,
        theta: DVector<f64>,
        psd_spec: Vec<Vec<usize>>,
    ) -> Result<Self> {
        check_dim("joint rig theta", pattern.nnz(), theta.len())?;
        check_dim("psd spec", pattern.n_cols(), psd_spec.len())?;
        check_finite("joint rig theta", &theta)?;
        validate_psd_spec(n_controls, &psd_spec)?;
        Ok(JointPsdRig {
            n_controls,
            pattern,
            theta,
            primary_mask: vec![true; n_controls],
            psd_spec,
            control_names: default_names(n_controls),
        })
    }

    pub fn with_primary_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        check_dim("primary mask", self.n_controls, mask.len())?;
        self.primary_mask = mask;
        Ok(self)
    }

    pub fn with_control_names(mut self, names: Vec<String>) -> Result<Self> {
        check_dim("control names", self.n_controls, names.len())?;
        self.control_names = names;
        Ok(self)
    }

    pub fn pattern(&self) -> &SparsityPattern {
        &self.pattern
    }

    pub fn psd_spec(&self) -> &[Vec<usize>] {
        &self.psd_spec
    }

    pub fn p_psd(&self) -> usize {
        self.psd_spec.len()
    }

    pub fn primary_mask(&self) -> &[bool] {
        &self.primary_mask
    }
}

fn validate_psd_spec(n_controls: usize, spec: &[Vec<usize>]) -> Result<()> {
    if spec.len() < n_controls {
        return Err(RigError::invalid(
            "psd spec",
            format!("{} entries but {} controls", spec.len(), n_controls),
        ));
    }
    for (j, subset) in spec.iter().enumerate() {
        if subset.is_empty() {
            return Err(RigError::invalid("psd spec", format!("entry {j} is empty")));
        }
        if let Some(&bad) = subset.iter().find(|&&i| i >= n_controls) {
            return Err(RigError::invalid(
                "psd spec",
                format!("entry {j} references control {bad} >= {n_controls}"),
            ));
        }
        if j < n_controls && subset.as_slice() != [j] {
            return Err(RigError::invalid(
                "psd spec",
                format!("entry {j} must be the identity entry [{j}]"),
            ));
        }
    }
    Ok(())
}

/// PSD values: entry `j` is the product of the controls in `spec[j]`.
pub fn psd_expand(spec: &[Vec<usize>], c: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        spec.len(),
        spec.iter().map(|s| s.iter().map(|&i| c[i]).product()),
    )
}

/// `∂psd/∂c` (p × n) by the product rule.
pub fn psd_jacobian(spec: &[Vec<usize>], c: &DVector<f64>) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(spec.len(), c.len());
    for (j, subset) in spec.iter().enumerate() {
        for (a, &i) in subset.iter().enumerate() {
            let others: f64 = subset
                .iter()
                .enumerate()
                .filter(|&(b, _)| b != a)
                .map(|(_, &k)| c[k])
                .product();
            d[(j, i)] += others;
        }
    }
    d
}

/// `∂R/∂θ` for rigs linear in θ: column ℓ has the single nonzero
/// `values[ℓ]` at geometry row `rows[ℓ]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamJacobian {
    m_geometry: usize,
    rows: Vec<usize>,
    values: Vec<f64>,
}

impl ParamJacobian {
    pub fn n_params(&self) -> usize {
        self.rows.len()
    }

    pub fn m_geometry(&self) -> usize {
        self.m_geometry
    }

    pub fn entry(&self, param: usize) -> (usize, f64) {
        (self.rows[param], self.values[param])
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.dense_columns(&ParamSet::all(self.n_params()))
    }

    /// Dense `m × |set|` block of the selected parameter columns.
    pub fn dense_columns(&self, set: &ParamSet) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.m_geometry, set.len());
        for (k, l) in set.iter().enumerate() {
            out[(self.rows[l], k)] = self.values[l];
        }
        out
    }

    /// `rᵀ ∂R/∂θ` restricted to `set`.
    pub fn transpose_mul(&self, r: &DVector<f64>, set: &ParamSet) -> DVector<f64> {
        DVector::from_iterator(
            set.len(),
            set.iter().map(|l| r[self.rows[l]] * self.values[l]),
        )
    }
}

/// A rig of either supported kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Rig {
    Linear(LinearRig),
    JointPsd(JointPsdRig),
}

impl From<LinearRig> for Rig {
    fn from(r: LinearRig) -> Self {
        Rig::Linear(r)
    }
}

impl From<JointPsdRig> for Rig {
    fn from(r: JointPsdRig) -> Self {
        Rig::JointPsd(r)
    }
}

impl Rig {
    pub fn n_controls(&self) -> usize {
        match self {
            Rig::Linear(r) => r.n_controls,
            Rig::JointPsd(r) => r.n_controls,
        }
    }

    pub fn m_geometry(&self) -> usize {
        match self {
            Rig::Linear(r) => r.m_geometry,
            Rig::JointPsd(r) => r.pattern.n_rows(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.theta().len()
    }

    pub fn theta(&self) -> &DVector<f64> {
        match self {
            Rig::Linear(r) => &r.theta,
            Rig::JointPsd(r) => &r.theta,
        }
    }

    pub fn control_names(&self) -> &[String] {
        match self {
            Rig::Linear(r) => &r.control_names,
            Rig::JointPsd(r) => &r.control_names,
        }
    }

    /// Primary controls; every control of a linear rig is primary.
    pub fn primary_mask(&self) -> Vec<bool> {
        match self {
            Rig::Linear(r) => vec![true; r.n_controls],
            Rig::JointPsd(r) => r.primary_mask.clone(),
        }
    }

    /// Copy of the rig carrying a different parameter vector.
    pub fn with_theta(&self, theta: DVector<f64>) -> Result<Rig> {
        self.check_theta(&theta)?;
        let mut out = self.clone();
        match &mut out {
            Rig::Linear(r) => r.theta = theta,
            Rig::JointPsd(r) => r.theta = theta,
        }
        Ok(out)
    }

    pub fn check_theta(&self, theta: &DVector<f64>) -> Result<()> {
        check_dim("rig parameters", self.n_params(), theta.len())?;
        check_finite("rig parameters", theta)
    }

    pub fn check_controls(&self, c: &DVector<f64>) -> Result<()> {
        check_dim("controls", self.n_controls(), c.len())?;
        check_finite("controls", c)
    }

    pub fn eval(&self, c: &DVector<f64>) -> Result<DVector<f64>> {
        self.eval_with(self.theta(), c)
    }

    /// `R(c; θ)` with an explicit θ.
    pub fn eval_with(&self, theta: &DVector<f64>, c: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("rig parameters", self.n_params(), theta.len())?;
        check_dim("controls", self.n_controls(), c.len())?;
        Ok(match self {
            Rig::Linear(r) => {
                let mut v = r.neutral_offset.clone();
                for i in 0..r.m_geometry {
                    let row = &theta.as_slice()[i * r.n_controls..(i + 1) * r.n_controls];
                    v[i] += row.iter().zip(c.iter()).map(|(a, b)| a * b).sum::<f64>();
                }
                v
            }
            Rig::JointPsd(r) => {
                let psd = psd_expand(&r.psd_spec, c);
                let mut v = DVector::zeros(r.pattern.n_rows());
                for j in 0..r.pattern.n_cols() {
                    let pj = psd[j];
                    if pj == 0.0 {
                        continue;
                    }
                    for l in r.pattern.col_range(j) {
                        v[r.pattern.row_of(l)] += theta[l] * pj;
                    }
                }
                v
            }
        })
    }

    /// `∂R/∂c` (m × n) at θ.
    pub fn jacobian_controls_with(
        &self,
        theta: &DVector<f64>,
        c: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        check_dim("rig parameters", self.n_params(), theta.len())?;
        check_dim("controls", self.n_controls(), c.len())?;
        Ok(match self {
            Rig::Linear(r) => r.matrix_with(theta),
            Rig::JointPsd(r) => {
                let mut jac = DMatrix::zeros(r.pattern.n_rows(), r.n_controls);
                for (j, subset) in r.psd_spec.iter().enumerate() {
                    for (a, &i) in subset.iter().enumerate() {
                        let others: f64 = subset
                            .iter()
                            .enumerate()
                            .filter(|&(b, _)| b != a)
                            .map(|(_, &k)| c[k])
                            .product();
                        if others == 0.0 {
                            continue;
                        }
                        for l in r.pattern.col_range(j) {
                            jac[(r.pattern.row_of(l), i)] += theta[l] * others;
                        }
                    }
                }
                jac
            }
        })
    }

    pub fn jacobian_controls(&self, c: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.jacobian_controls_with(self.theta(), c)
    }

    /// `∂R/∂θ` at controls `c`; independent of θ.
    pub fn jacobian_params(&self, c: &DVector<f64>) -> Result<ParamJacobian> {
        check_dim("controls", self.n_controls(), c.len())?;
        Ok(match self {
            Rig::Linear(r) => {
                let n = r.n_controls;
                ParamJacobian {
                    m_geometry: r.m_geometry,
                    rows: (0..r.theta.len()).map(|l| l / n).collect(),
                    values: (0..r.theta.len()).map(|l| c[l % n]).collect(),
                }
            }
            Rig::JointPsd(r) => {
                let psd = psd_expand(&r.psd_spec, c);
                ParamJacobian {
                    m_geometry: r.pattern.n_rows(),
                    rows: r.pattern.rows().to_vec(),
                    values: r.pattern.cols().iter().map(|&j| psd[j]).collect(),
                }
            }
        })
    }

    /// Geometry row each parameter writes to.
    pub fn param_rows(&self) -> Vec<usize> {
        match self {
            Rig::Linear(r) => (0..r.theta.len()).map(|l| l / r.n_controls).collect(),
            Rig::JointPsd(r) => r.pattern.rows().to_vec(),
        }
    }

    /// Controls that must all be nonzero for parameter `l` to have an effect.
    pub fn param_controls(&self, l: usize) -> Vec<usize> {
        match self {
            Rig::Linear(r) => vec![l % r.n_controls],
            Rig::JointPsd(r) => r.psd_spec[r.pattern.col_of(l)].clone(),
        }
    }

    /// Parameters whose multiplying factor depends only on controls in
    /// `controls` (a PSD column is reachable when its whole subset is active).
    pub fn reachable_params(&self, controls: &ParamSet) -> ParamSet {
        match self {
            Rig::Linear(r) => ParamSet::new(
                (0..r.theta.len())
                    .filter(|l| controls.contains(l % r.n_controls))
                    .collect(),
            ),
            Rig::JointPsd(r) => {
                let mut out = Vec::new();
                for (j, subset) in r.psd_spec.iter().enumerate() {
                    if subset.iter().all(|&i| controls.contains(i)) {
                        out.extend(r.pattern.col_range(j));
                    }
                }
                ParamSet::new(out)
            }
        }
    }

    /// Parameters whose factor involves at least one control in `controls`.
    pub fn touched_params(&self, controls: &ParamSet) -> ParamSet {
        match self {
            Rig::Linear(_) => self.reachable_params(controls),
            Rig::JointPsd(r) => {
                let mut out = Vec::new();
                for (j, subset) in r.psd_spec.iter().enumerate() {
                    if subset.iter().any(|&i| controls.contains(i)) {
                        out.extend(r.pattern.col_range(j));
                    }
                }
                ParamSet::new(out)
            }
        }
    }

    /// Sub-rig over `controls` (in the given order). Returns the rig and, for
    /// each of its parameters, the index of the parameter in `self`.
    pub fn sub_rig(&self, controls: &[usize]) -> Result<(Rig, Vec<usize>)> {
        let set = ParamSet::new(controls.to_vec());
        if set.len() != controls.len() {
            return Err(RigError::invalid(
                "sub-rig controls",
                "duplicate control index",
            ));
        }
        if let Some(&bad) = controls.iter().find(|&&i| i >= self.n_controls()) {
            return Err(RigError::invalid(
                "sub-rig controls",
                format!("control {bad} out of range"),
            ));
        }
        let local_of = |i: usize| controls.iter().position(|&k| k == i);
        match self {
            Rig::Linear(r) => {
                let n = r.n_controls;
                let k = controls.len();
                let mut map = Vec::with_capacity(r.m_geometry * k);
                for i in 0..r.m_geometry {
                    for &j in controls {
                        map.push(i * n + j);
                    }
                }
                let theta = DVector::from_iterator(map.len(), map.iter().map(|&l| r.theta[l]));
                let names = controls
                    .iter()
                    .map(|&j| r.control_names[j].clone())
                    .collect();
                let sub = LinearRig::new(r.m_geometry, k, theta)?
                    .with_neutral_offset(r.neutral_offset.clone())?
                    .with_control_names(names)?;
                Ok((Rig::Linear(sub), map))
            }
            Rig::JointPsd(r) => {
                // identity prefix first, then the reachable combination columns
                let mut cols: Vec<usize> = controls.to_vec();
                let mut spec: Vec<Vec<usize>> = (0..controls.len()).map(|a| vec![a]).collect();
                for (j, subset) in r.psd_spec.iter().enumerate().skip(r.n_controls) {
                    if subset.iter().all(|&i| set.contains(i)) {
                        cols.push(j);
                        spec.push(subset.iter().map(|&i| local_of(i).unwrap()).collect());
                    }
                }
                let mut rows = Vec::new();
                let mut new_cols = Vec::new();
                let mut map = Vec::new();
                for (new_j, &j) in cols.iter().enumerate() {
                    for l in r.pattern.col_range(j) {
                        rows.push(r.pattern.row_of(l));
                        new_cols.push(new_j);
                        map.push(l);
                    }
                }
                let (pattern, order) =
                    SparsityPattern::from_coords(r.pattern.n_rows(), cols.len(), &rows, &new_cols)?;
                let map: Vec<usize> = order.iter().map(|&k| map[k]).collect();
                let theta = DVector::from_iterator(map.len(), map.iter().map(|&l| r.theta[l]));
                let primary = controls.iter().map(|&j| r.primary_mask[j]).collect();
                let names = controls
                    .iter()
                    .map(|&j| r.control_names[j].clone())
                    .collect();
                let sub = JointPsdRig::new(controls.len(), pattern, theta, spec)?
                    .with_primary_mask(primary)?
                    .with_control_names(names)?;
                Ok((Rig::JointPsd(sub), map))
            }
        }
    }
}

fn default_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i}")).collect()
}

pub(crate) fn check_finite(context: &'static str, v: &DVector<f64>) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(RigError::NonFinite {
            context,
            theta: v.iter().copied().collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_rig() -> Rig {
        LinearRig::from_matrix(&DMatrix::from_diagonal(&DVector::from_vec(vec![
            -1.0,
            2.0,
            -2.0 / 3.0,
        ])))
        .into()
    }

    fn small_psd() -> Rig {
        // 3 geometry rows, psd [{0},{1},{0,1}]
        let rows = [0, 1, 1, 2, 0, 2];
        let cols = [0, 0, 1, 1, 2, 2];
        let (pattern, order) = SparsityPattern::from_coords(3, 3, &rows, &cols).unwrap();
        let raw = [1.0, 0.5, 2.0, -1.0, 3.0, 0.25];
        let theta = DVector::from_iterator(6, order.iter().map(|&k| raw[k]));
        JointPsdRig::new(2, pattern, theta, vec![vec![0], vec![1], vec![0, 1]])
            .unwrap()
            .into()
    }

    #[test]
    fn eval_linear_matches_columns() {
        let rig = diag_rig();
        let v = rig.eval(&DVector::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(v.as_slice(), &[-1.0, 4.0, -2.0]);
        let v = rig.eval(&DVector::from_vec(vec![1.0, 1.0, 1.0])).unwrap();
        assert_eq!(v.as_slice(), &[-1.0, 2.0, -2.0 / 3.0]);
    }

    #[test]
    fn zero_controls_give_neutral_offset() {
        let rig: Rig = LinearRig::from_matrix(&DMatrix::from_element(2, 2, 3.0))
            .with_neutral_offset(DVector::from_vec(vec![0.5, -0.5]))
            .unwrap()
            .into();
        assert_eq!(
            rig.eval(&DVector::zeros(2)).unwrap().as_slice(),
            &[0.5, -0.5]
        );
        assert_eq!(
            small_psd().eval(&DVector::zeros(2)).unwrap(),
            DVector::zeros(3)
        );
    }

    #[test]
    fn psd_expand_products() {
        let spec = vec![vec![0], vec![1], vec![0, 1]];
        let p = psd_expand(&spec, &DVector::from_vec(vec![0.5, 0.4]));
        assert_eq!(p.as_slice(), &[0.5, 0.4, 0.5 * 0.4]);
        let id = vec![vec![0], vec![1]];
        let c = DVector::from_vec(vec![0.3, -7.0]);
        assert_eq!(psd_expand(&id, &c), c);
        assert_eq!(psd_expand(&spec, &DVector::zeros(2)), DVector::zeros(3));
    }

    #[test]
    fn psd_jacobian_product_rule() {
        let spec = vec![vec![0], vec![1], vec![0, 1]];
        let d = psd_jacobian(&spec, &DVector::from_vec(vec![0.5, 0.4]));
        let expected = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.4, 0.5]);
        assert_eq!(d, expected);
    }

    #[test]
    fn joint_jacobian_is_joint_matrix_times_psd_jacobian() {
        let rig = small_psd();
        let c = DVector::from_vec(vec![0.5, 0.4]);
        let Rig::JointPsd(r) = &rig else {
            unreachable!()
        };
        let mut dense = DMatrix::zeros(3, 3);
        for l in 0..r.pattern.nnz() {
            dense[(r.pattern.row_of(l), r.pattern.col_of(l))] = r.theta[l];
        }
        let expected = &dense * psd_jacobian(r.psd_spec(), &c);
        let got = rig.jacobian_controls(&c).unwrap();
        assert!((got - expected).norm() < 1e-15);
    }

    #[test]
    fn linear_param_jacobian_is_block_diagonal_of_c() {
        let rig = diag_rig();
        let c = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let j = rig.jacobian_params(&c).unwrap().to_dense();
        let mut expected = DMatrix::zeros(3, 9);
        for i in 0..3 {
            for k in 0..3 {
                expected[(i, 3 * i + k)] = c[k];
            }
        }
        assert_eq!(j, expected);
        assert_eq!(
            rig.jacobian_params(&DVector::zeros(3)).unwrap().to_dense(),
            DMatrix::zeros(3, 9)
        );
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let rig = diag_rig();
        assert!(matches!(
            rig.eval(&DVector::zeros(2)),
            Err(RigError::Dimension { .. })
        ));
        assert!(rig.with_theta(DVector::zeros(8)).is_err());
    }

    #[test]
    fn psd_spec_validation() {
        let (pattern, _) = SparsityPattern::from_coords(1, 2, &[0, 0], &[0, 1]).unwrap();
        let err = JointPsdRig::new(2, pattern.clone(), DVector::zeros(2), vec![vec![0], vec![]]);
        assert!(err.is_err());
        let err = JointPsdRig::new(2, pattern, DVector::zeros(2), vec![vec![1], vec![0]]);
        assert!(err.is_err());
    }

    #[test]
    fn sub_rig_linear_selects_columns() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let rig: Rig = LinearRig::from_matrix(&a).into();
        let (sub, map) = rig.sub_rig(&[0, 1]).unwrap();
        assert_eq!(map, vec![0, 1, 3, 4, 6, 7]);
        assert_eq!(sub.theta().as_slice(), &[1.0, 2.0, 4.0, 5.0, 7.0, 8.0]);
    }

    #[test]
    fn reachable_params_follow_psd_subsets() {
        let rig = small_psd();
        let only0 = rig.reachable_params(&ParamSet::new(vec![0]));
        // column 0 holds the entries at rows 0 and 1
        assert_eq!(only0.len(), 2);
        let both = rig.reachable_params(&ParamSet::new(vec![0, 1]));
        assert_eq!(both.len(), 6);
        let touched = rig.touched_params(&ParamSet::new(vec![1]));
        assert_eq!(touched.len(), 4);
    }
}
