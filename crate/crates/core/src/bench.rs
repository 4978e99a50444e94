//! Synthetic ground-truth rigs, morph-like perturbations and expression
//! corpora, plus the calibration and tracker validation protocols run on them.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, RigError};
use crate::fitting::{
    augment_controls, fit_rig_params, CalibrationConfig, ExpressionPair, ExpressionTemplate,
};
use crate::objective::{FilteredDerivative, ObjectiveConfig, Problem, TrainingPair};
use crate::optimizer::{
    fine_tune, run_pipeline, DiffConfig, LineSearch, OptimizerConfig, PipelineConfig, PipelineMode,
    PipelineReport,
};
use crate::rig::{JointPsdRig, ParamSet, Rig, SparsityPattern};
use crate::tracker::{RigInverseTracker, SolveMode, Tracker};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_controls: usize,
    pub p_psd: usize,
    pub m_geometry: usize,
    pub sparsity_per_column: usize,
    pub primary_fraction: f64,
    pub perturb_magnitude: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec::desk(0)
    }
}

impl SyntheticSpec {
    pub fn desk(seed: u64) -> Self {
        SyntheticSpec {
            n_controls: 12,
            p_psd: 20,
            m_geometry: 60,
            sparsity_per_column: 6,
            primary_fraction: 0.75,
            perturb_magnitude: 0.15,
            seed,
        }
    }

    /// Production-shaped dimensions with roughly 745k joint-matrix nonzeros.
    pub fn production(seed: u64) -> Self {
        SyntheticSpec {
            n_controls: 174,
            p_psd: 814,
            m_geometry: 7830,
            sparsity_per_column: 916,
            primary_fraction: 0.75,
            perturb_magnitude: 0.15,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_controls == 0 {
            return Err(RigError::invalid(
                "synthetic spec",
                "n_controls must be positive",
            ));
        }
        if self.p_psd < self.n_controls {
            return Err(RigError::invalid(
                "synthetic spec",
                format!("p_psd {} < n_controls {}", self.p_psd, self.n_controls),
            ));
        }
        if self.sparsity_per_column == 0 || self.sparsity_per_column > self.m_geometry {
            return Err(RigError::invalid(
                "synthetic spec",
                format!(
                    "sparsity {} infeasible for {} geometry rows",
                    self.sparsity_per_column, self.m_geometry
                ),
            ));
        }
        let pairs = self.n_controls * (self.n_controls - 1) / 2;
        if self.p_psd - self.n_controls > pairs {
            return Err(RigError::invalid(
                "synthetic spec",
                format!(
                    "{} corrective entries but only {pairs} control pairs",
                    self.p_psd - self.n_controls
                ),
            ));
        }
        if !(self.primary_fraction > 0.0 && self.primary_fraction <= 1.0) {
            return Err(RigError::invalid(
                "synthetic spec",
                "primary_fraction must be in (0, 1]",
            ));
        }
        if !(self.perturb_magnitude >= 0.0) {
            return Err(RigError::invalid(
                "synthetic spec",
                "perturb_magnitude must be >= 0",
            ));
        }
        Ok(())
    }
}

fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Ground-truth joint rig. Corrective entries are products of two distinct
/// controls; joint-matrix values have magnitude in [0.5, 1.5).
pub fn generate_rig(spec: &SyntheticSpec) -> Result<JointPsdRig> {
    spec.validate()?;
    let mut rng = sub_rng(spec.seed, 1);
    let n = spec.n_controls;
    let mut psd: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut all_pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
        .collect();
    all_pairs.shuffle(&mut rng);
    let mut chosen: Vec<(usize, usize)> = all_pairs[..spec.p_psd - n].to_vec();
    chosen.sort_unstable();
    psd.extend(chosen.into_iter().map(|(a, b)| vec![a, b]));

    let k = spec.sparsity_per_column;
    let mut rows = Vec::with_capacity(spec.p_psd * k);
    let mut cols = Vec::with_capacity(spec.p_psd * k);
    let mut values = Vec::with_capacity(spec.p_psd * k);
    for j in 0..spec.p_psd {
        let mut picked = rand::seq::index::sample(&mut rng, spec.m_geometry, k).into_vec();
        picked.sort_unstable();
        for r in picked {
            rows.push(r);
            cols.push(j);
            let mag: f64 = rng.random_range(0.5..1.5);
            values.push(if rng.random_bool(0.5) { mag } else { -mag });
        }
    }
    let (pattern, order) = SparsityPattern::from_coords(spec.m_geometry, spec.p_psd, &rows, &cols)?;
    let theta = DVector::from_iterator(order.len(), order.iter().map(|&i| values[i]));

    let n_primary = ((spec.primary_fraction * n as f64).round() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let mut primary = vec![false; n];
    for &i in &idx[..n_primary] {
        primary[i] = true;
    }
    JointPsdRig::new(n, pattern, theta, psd)?.with_primary_mask(primary)
}

/// `θ_M = θ ⊙ (1 + magnitude·ξ)` with seeded standard-normal `ξ`.
pub fn perturb_rig(theta: &DVector<f64>, magnitude: f64, seed: u64) -> Result<DVector<f64>> {
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(RigError::invalid(
            "perturbation magnitude",
            format!("{magnitude}"),
        ));
    }
    let mut rng = sub_rng(seed, 2);
    Ok(theta.map(|t| {
        let xi: f64 = rng.sample(StandardNormal);
        t * (1.0 + magnitude * xi)
    }))
}

/// Hex sha256 of the little-endian bytes of θ.
pub fn theta_fingerprint(theta: &DVector<f64>) -> String {
    let mut h = Sha256::new();
    for x in theta.iter() {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Holdout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub split: Split,
    pub seed: u64,
    pub theta_fingerprint: String,
    pub n_pairs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub pairs: Vec<ExpressionPair>,
    pub templates: Vec<ExpressionTemplate>,
    pub meta: CorpusMeta,
}

/// Evaluate every template on `rig` at `theta_source`.
pub fn generate_corpus(
    rig: &Rig,
    theta_source: &DVector<f64>,
    templates: &[ExpressionTemplate],
    split: Split,
    seed: u64,
) -> Result<Corpus> {
    if templates.is_empty() {
        return Err(RigError::invalid(
            "corpus templates",
            "at least one template is required",
        ));
    }
    rig.check_theta(theta_source)?;
    let pairs = templates
        .iter()
        .map(|t| {
            let c = t.to_controls(rig.control_names())?;
            let v = rig.eval_with(theta_source, &c)?;
            Ok(ExpressionPair::new(t.name.clone(), c, v))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        meta: CorpusMeta {
            split,
            seed,
            theta_fingerprint: theta_fingerprint(theta_source),
            n_pairs: pairs.len(),
        },
        pairs,
        templates: templates.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemplateSplit {
    pub train: Vec<ExpressionTemplate>,
    pub holdout: Vec<ExpressionTemplate>,
    /// Corrective entries no training template reaches.
    pub unused_psd: Vec<usize>,
}

fn template(name: String, names: &[String], values: &[(usize, f64)]) -> ExpressionTemplate {
    ExpressionTemplate {
        name,
        controls: values.iter().map(|&(i, x)| (names[i].clone(), x)).collect(),
    }
}

/// Training templates: neutral, one per control and one per covered
/// corrective pair. A third of the corrective entries (at least one) is left
/// uncovered. Holdout templates blend two or three training templates and
/// switch on one uncovered corrective entry.
pub fn bench_templates(rig: &JointPsdRig, n_holdout: usize, seed: u64) -> Result<TemplateSplit> {
    let mut rng = sub_rng(seed, 3);
    let names = Rig::JointPsd(rig.clone()).control_names().to_vec();
    let n = names.len();
    let correctives: Vec<usize> = (n..rig.p_psd()).collect();
    let n_unused = if correctives.is_empty() {
        0
    } else {
        (correctives.len() / 3).max(1)
    };
    let mut shuffled = correctives.clone();
    shuffled.shuffle(&mut rng);
    let mut unused: Vec<usize> = shuffled[..n_unused].to_vec();
    unused.sort_unstable();

    let mut train = vec![ExpressionTemplate {
        name: "neutral".into(),
        controls: BTreeMap::new(),
    }];
    for i in 0..n {
        train.push(template(
            format!("single_{i:02}"),
            &names,
            &[(i, rng.random_range(0.6..1.0))],
        ));
    }
    for &j in correctives.iter().filter(|j| !unused.contains(j)) {
        let vals: Vec<(usize, f64)> = rig.psd_spec()[j]
            .iter()
            .map(|&i| (i, rng.random_range(0.5..1.0)))
            .collect();
        train.push(template(format!("combo_{j:03}"), &names, &vals));
    }

    let mut holdout = Vec::with_capacity(n_holdout);
    if unused.is_empty() {
        return Err(RigError::invalid(
            "bench templates",
            "rig has no corrective entries to hold out",
        ));
    }
    let base: Vec<&ExpressionTemplate> = train.iter().skip(1).collect();
    for h in 0..n_holdout {
        let k = rng.random_range(2..=3);
        let picks = rand::seq::index::sample(&mut rng, base.len(), k).into_vec();
        let mut weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let mut controls: BTreeMap<String, f64> = BTreeMap::new();
        for (&p, w) in picks.iter().zip(&weights) {
            for (name, &x) in &base[p].controls {
                *controls.entry(name.clone()).or_insert(0.0) += w * x;
            }
        }
        let j = unused[rng.random_range(0..unused.len())];
        for &i in &rig.psd_spec()[j] {
            let e = controls.entry(names[i].clone()).or_insert(0.0);
            *e = e.max(rng.random_range(0.2..0.4));
        }
        holdout.push(ExpressionTemplate {
            name: format!("holdout_{h:02}"),
            controls,
        });
    }
    Ok(TemplateSplit {
        train,
        holdout,
        unused_psd: unused,
    })
}

/// Mean Euclidean geometry error of `θ` over the pairs.
pub fn geometry_error(rig: &Rig, theta: &DVector<f64>, pairs: &[ExpressionPair]) -> Result<f64> {
    let errs = pairs
        .iter()
        .map(|p| Ok((rig.eval_with(theta, &p.c)? - &p.v).norm()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len().max(1) as f64)
}

/// Mean Euclidean control error of the tracker at `θ_T` over the pairs.
pub fn control_error(
    tracker: &dyn Tracker,
    theta_t: &DVector<f64>,
    pairs: &[ExpressionPair],
) -> Result<f64> {
    let errs = pairs
        .par_iter()
        .map(|p| Ok((tracker.track(&p.v, theta_t)? - &p.c).norm()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len().max(1) as f64)
}

/// Everything one trial needs: ground truth, morph, fitted rig and corpora.
#[derive(Clone, Debug)]
pub struct BenchSetup {
    pub spec: SyntheticSpec,
    pub rig: Rig,
    pub theta_gt: DVector<f64>,
    pub theta_m: DVector<f64>,
    pub theta_s: DVector<f64>,
    pub train: Corpus,
    pub holdout: Corpus,
    pub unused_psd: Vec<usize>,
}

pub const DEFAULT_HOLDOUT: usize = 10;

pub fn bench_setup(spec: &SyntheticSpec) -> Result<BenchSetup> {
    let jr = generate_rig(spec)?;
    let split = bench_templates(&jr, DEFAULT_HOLDOUT, spec.seed)?;
    let rig = Rig::JointPsd(jr);
    let theta_gt = rig.theta().clone();
    let theta_m = perturb_rig(&theta_gt, spec.perturb_magnitude, spec.seed)?;
    let train = generate_corpus(&rig, &theta_gt, &split.train, Split::Train, spec.seed)?;
    let holdout = generate_corpus(&rig, &theta_gt, &split.holdout, Split::Holdout, spec.seed)?;
    let theta_s = fit_rig_params(&rig, &train.pairs, &CalibrationConfig::new(theta_m.clone()))?;
    Ok(BenchSetup {
        spec: spec.clone(),
        rig,
        theta_gt,
        theta_m,
        theta_s,
        train,
        holdout,
        unused_psd: split.unused_psd,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationTrial {
    pub seed: u64,
    pub error_m: f64,
    pub error_s: f64,
    /// `1 − error_s / error_m`.
    pub improvement: f64,
}

/// Holdout geometry error of the morphed rig against the Simon-Says fit.
pub fn calibration_trial(spec: &SyntheticSpec) -> Result<CalibrationTrial> {
    let s = bench_setup(spec)?;
    let error_m = geometry_error(&s.rig, &s.theta_m, &s.holdout.pairs)?;
    let error_s = geometry_error(&s.rig, &s.theta_s, &s.holdout.pairs)?;
    Ok(CalibrationTrial {
        seed: spec.seed,
        error_m,
        error_s,
        improvement: if error_m > 0.0 {
            1.0 - error_s / error_m
        } else {
            0.0
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerTrialConfig {
    /// Regularization weight of the bench tracker's solve.
    pub tracker_lm: f64,
    pub objective: ObjectiveConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for TrackerTrialConfig {
    fn default() -> Self {
        TrackerTrialConfig {
            tracker_lm: 0.5,
            objective: ObjectiveConfig::weights(1.0, 0.0, 0.0, 1e-3),
            optimizer: OptimizerConfig {
                step_size: 0.5,
                max_iters: 60,
                line_search: LineSearch::Halving { max_halvings: 12 },
                sample_every: 10,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrackerTrial {
    pub seed: u64,
    pub error_m: f64,
    pub error_s: f64,
    pub error_s_hat: f64,
    pub error_gt: f64,
    pub error_gt_hat: f64,
}

impl TrackerTrial {
    pub fn ordering_holds(&self) -> bool {
        self.error_s_hat <= self.error_s
            && self.error_s <= self.error_m
            && self.error_gt_hat <= self.error_gt
    }
}

/// The bench tracker: a regularized inverse of the rig structure.
pub fn bench_tracker(rig: &Rig, lm: f64) -> RigInverseTracker {
    RigInverseTracker::new(rig.clone()).with_mode(SolveMode::Lm(lm))
}

/// Fine-tune θ_T on the training corpus.
pub fn fine_tune_tracker_rig(
    setup: &BenchSetup,
    tracker: &dyn Tracker,
    theta_start: &DVector<f64>,
    config: &ObjectiveConfig,
    opt: &OptimizerConfig,
) -> Result<DVector<f64>> {
    let pairs: Vec<TrainingPair> = setup
        .train
        .pairs
        .iter()
        .map(TrainingPair::from_expression)
        .collect();
    let active = ParamSet::all(setup.rig.n_params());
    let problem = Problem {
        rig: &setup.rig,
        tracker,
        pairs: &pairs,
        theta_r: &setup.theta_s,
        config,
        active: &active,
    };
    let report = fine_tune(&problem, theta_start, opt, &DiffConfig::zero())?;
    Ok(DVector::from_vec(report.theta_final))
}

/// Holdout control error of the bench tracker for θ_M, θ_S, θ̂_S, θ_GT, θ̂_GT.
pub fn tracker_trial(spec: &SyntheticSpec, cfg: &TrackerTrialConfig) -> Result<TrackerTrial> {
    let s = bench_setup(spec)?;
    let tracker = bench_tracker(&s.rig, cfg.tracker_lm);
    let s_hat = fine_tune_tracker_rig(&s, &tracker, &s.theta_s, &cfg.objective, &cfg.optimizer)?;
    let gt_hat = fine_tune_tracker_rig(&s, &tracker, &s.theta_gt, &cfg.objective, &cfg.optimizer)?;
    let h = &s.holdout.pairs;
    Ok(TrackerTrial {
        seed: spec.seed,
        error_m: control_error(&tracker, &s.theta_m, h)?,
        error_s: control_error(&tracker, &s.theta_s, h)?,
        error_s_hat: control_error(&tracker, &s_hat, h)?,
        error_gt: control_error(&tracker, &s.theta_gt, h)?,
        error_gt_hat: control_error(&tracker, &gt_hat, h)?,
    })
}

/// Training pairs for the staged pipeline: `c⁺` augments each intent with
/// the tracker's output at `θ_T`.
pub fn pipeline_pairs(
    setup: &BenchSetup,
    tracker: &dyn Tracker,
    theta_t: &DVector<f64>,
) -> Result<Vec<TrainingPair>> {
    setup
        .train
        .pairs
        .iter()
        .map(|p| {
            let t = tracker.track(&p.v, theta_t)?;
            Ok(TrainingPair::from_expression(p).with_c_plus(augment_controls(&p.c, &t)?))
        })
        .collect()
}

/// Pipeline settings for the desk bench: γ1-only stages with a light
/// spurious-suppression weight and the masked filtered derivative.
pub fn desk_pipeline_config(mode: PipelineMode) -> PipelineConfig {
    PipelineConfig {
        mode,
        gamma2: 0.0,
        spurious_weight: 0.1,
        filtered_derivative: FilteredDerivative::Masked,
        ..Default::default()
    }
}

pub fn desk_optimizer() -> OptimizerConfig {
    OptimizerConfig {
        step_size: 0.5,
        max_iters: 40,
        line_search: LineSearch::Halving { max_halvings: 12 },
        sample_every: 5,
        ..Default::default()
    }
}

/// Run the staged pipeline from θ_S with the bench tracker.
pub fn pipeline_trial(
    setup: &BenchSetup,
    tracker: &dyn Tracker,
    cfg: &PipelineConfig,
    opt: &OptimizerConfig,
) -> Result<PipelineReport> {
    let pairs = pipeline_pairs(setup, tracker, &setup.theta_s)?;
    run_pipeline(
        cfg,
        &setup.theta_s,
        &pairs,
        tracker,
        &setup.rig,
        &setup.theta_s,
        opt,
        &DiffConfig::zero(),
    )
}
