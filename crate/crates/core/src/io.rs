//! File formats: rig JSON, expression sets, geometry captures and corpus
//! sidecars.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{Corpus, CorpusMeta, Split, SyntheticSpec};
use crate::error::{Result, RigError};
use crate::fitting::{ExpressionPair, ExpressionTemplate, PairKind};
use crate::rig::{JointPsdRig, LinearRig, Rig, SparsityPattern};

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.with_context(path.display().to_string()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    with_path(
        path,
        (|| Ok(serde_json::from_slice(&std::fs::read(path)?)?))(),
    )
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    with_path(
        path,
        (|| Ok(std::fs::write(path, to_json_bytes(value)?)?))(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RigType {
    Linear,
    JointPsd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsityCoords {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

/// On-disk rig. For joint rigs, `theta[ℓ]` belongs to entry
/// `(sparsity.rows[ℓ], sparsity.cols[ℓ])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigFile {
    #[serde(rename = "type")]
    pub kind: RigType,
    pub n_controls: usize,
    pub m_geometry: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_psd: Option<usize>,
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<SparsityCoords>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psd_spec: Option<Vec<Vec<usize>>>,
    pub control_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primary_mask: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neutral_offset: Option<Vec<f64>>,
}

impl RigFile {
    pub fn from_rig(rig: &Rig) -> Self {
        let theta = rig.theta().iter().copied().collect();
        let control_names = rig.control_names().to_vec();
        match rig {
            Rig::Linear(r) => {
                let offset = r.neutral_offset();
                RigFile {
                    kind: RigType::Linear,
                    n_controls: rig.n_controls(),
                    m_geometry: rig.m_geometry(),
                    p_psd: None,
                    theta,
                    sparsity: None,
                    psd_spec: None,
                    control_names,
                    primary_mask: None,
                    neutral_offset: (offset.iter().any(|&x| x != 0.0))
                        .then(|| offset.iter().copied().collect()),
                }
            }
            Rig::JointPsd(r) => RigFile {
                kind: RigType::JointPsd,
                n_controls: rig.n_controls(),
                m_geometry: rig.m_geometry(),
                p_psd: Some(r.p_psd()),
                theta,
                sparsity: Some(SparsityCoords {
                    rows: r.pattern().rows().to_vec(),
                    cols: r.pattern().cols().to_vec(),
                }),
                psd_spec: Some(r.psd_spec().to_vec()),
                control_names,
                primary_mask: Some(r.primary_mask().to_vec()),
                neutral_offset: None,
            },
        }
    }

    pub fn to_rig(&self) -> Result<Rig> {
        match self.kind {
            RigType::Linear => {
                if self.sparsity.is_some()
                    || self.psd_spec.is_some()
                    || self.p_psd.is_some()
                    || self.primary_mask.is_some()
                {
                    return Err(RigError::invalid(
                        "rig file",
                        "linear rigs take no sparsity, psd_spec, p_psd or primary_mask",
                    ));
                }
                let mut r = LinearRig::new(
                    self.m_geometry,
                    self.n_controls,
                    DVector::from_vec(self.theta.clone()),
                )?
                .with_control_names(self.control_names.clone())?;
                if let Some(o) = &self.neutral_offset {
                    r = r.with_neutral_offset(DVector::from_vec(o.clone()))?;
                }
                Ok(r.into())
            }
            RigType::JointPsd => {
                let (Some(sp), Some(spec)) = (&self.sparsity, &self.psd_spec) else {
                    return Err(RigError::invalid(
                        "rig file",
                        "joint_psd rigs need sparsity and psd_spec",
                    ));
                };
                if self.neutral_offset.is_some() {
                    return Err(RigError::invalid(
                        "rig file",
                        "joint_psd rigs take no neutral_offset",
                    ));
                }
                if let Some(p) = self.p_psd {
                    if p != spec.len() {
                        return Err(RigError::invalid(
                            "rig file",
                            format!("p_psd {p} but psd_spec has {} entries", spec.len()),
                        ));
                    }
                }
                if sp.rows.len() != self.theta.len() {
                    return Err(RigError::invalid(
                        "rig file",
                        format!(
                            "{} sparsity entries but {} theta values",
                            sp.rows.len(),
                            self.theta.len()
                        ),
                    ));
                }
                let (pattern, order) =
                    SparsityPattern::from_coords(self.m_geometry, spec.len(), &sp.rows, &sp.cols)?;
                let theta =
                    DVector::from_iterator(order.len(), order.iter().map(|&k| self.theta[k]));
                let mut r = JointPsdRig::new(self.n_controls, pattern, theta, spec.clone())?
                    .with_control_names(self.control_names.clone())?;
                if let Some(mask) = &self.primary_mask {
                    r = r.with_primary_mask(mask.clone())?;
                }
                Ok(r.into())
            }
        }
    }
}

pub fn save_rig(path: &Path, rig: &Rig) -> Result<()> {
    write_json(path, &RigFile::from_rig(rig))
}

pub fn load_rig(path: &Path) -> Result<Rig> {
    let f: RigFile = read_json(path)?;
    with_path(path, f.to_rig())
}

/// One entry of an expression-set file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpressionRecord {
    pub name: String,
    pub controls: BTreeMap<String, f64>,
    #[serde(default)]
    pub kind: PairKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry_mask: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

impl ExpressionRecord {
    pub fn from_template(t: &ExpressionTemplate) -> Self {
        ExpressionRecord {
            name: t.name.clone(),
            controls: t.controls.clone(),
            kind: PairKind::Captured,
            geometry_mask: None,
            weight: None,
        }
    }

    pub fn template(&self) -> ExpressionTemplate {
        ExpressionTemplate {
            name: self.name.clone(),
            controls: self.controls.clone(),
        }
    }
}

pub fn load_expressions(path: &Path) -> Result<Vec<ExpressionRecord>> {
    let records: Vec<ExpressionRecord> = read_json(path)?;
    let mut seen = std::collections::BTreeSet::new();
    for r in &records {
        if !seen.insert(r.name.as_str()) {
            return with_path(
                path,
                Err(RigError::invalid(
                    "expression set",
                    format!("duplicate name '{}'", r.name),
                )),
            );
        }
    }
    Ok(records)
}

pub fn save_expressions(path: &Path, records: &[ExpressionRecord]) -> Result<()> {
    write_json(path, &records)
}

pub type GeometryCapture = BTreeMap<String, Vec<f64>>;

/// Geometry keyed by expression name. A `.bin` file holds little-endian f64
/// vectors of length `m_geometry`, one per expression in `order`.
pub fn load_geometry(path: &Path, order: &[String], m_geometry: usize) -> Result<GeometryCapture> {
    if path.extension().is_some_and(|e| e == "bin") {
        let bytes = with_path(path, std::fs::read(path).map_err(RigError::from))?;
        let want = order.len() * m_geometry * 8;
        if bytes.len() != want {
            return with_path(
                path,
                Err(RigError::invalid(
                    "geometry file",
                    format!("{} bytes, expected {want}", bytes.len()),
                )),
            );
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect();
        return Ok(order
            .iter()
            .zip(values.chunks(m_geometry.max(1)))
            .map(|(n, v)| (n.clone(), v.to_vec()))
            .collect());
    }
    read_json(path)
}

pub fn save_geometry(path: &Path, capture: &GeometryCapture) -> Result<()> {
    write_json(path, capture)
}

/// Training pairs from an expression set and its geometry, against the
/// rig's control registry.
pub fn expression_pairs(
    records: &[ExpressionRecord],
    geometry: &GeometryCapture,
    rig: &Rig,
) -> Result<Vec<ExpressionPair>> {
    records
        .iter()
        .map(|r| {
            let c = r.template().to_controls(rig.control_names())?;
            let v = geometry.get(&r.name).ok_or_else(|| {
                RigError::invalid("geometry capture", format!("no geometry for '{}'", r.name))
            })?;
            if v.len() != rig.m_geometry() {
                return Err(RigError::invalid(
                    "geometry capture",
                    format!(
                        "'{}' has {} values, rig has {} rows",
                        r.name,
                        v.len(),
                        rig.m_geometry()
                    ),
                ));
            }
            let mut p = ExpressionPair::new(r.name.clone(), c, DVector::from_vec(v.clone()))
                .with_kind(r.kind);
            if let Some(mask) = &r.geometry_mask {
                p = crate::fitting::mask_geometry(&p, mask)?;
            }
            if let Some(w) = r.weight {
                if !(w > 0.0 && w.is_finite()) {
                    return Err(RigError::invalid(
                        "expression weight",
                        format!("'{}' has weight {w}", r.name),
                    ));
                }
                p.weight = w;
            }
            Ok(p)
        })
        .collect()
}

/// Sidecar describing how a corpus was generated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSidecar {
    pub split: Split,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SyntheticSpec>,
    /// sha256 of the generating θ.
    pub theta_fingerprint: String,
    pub n_pairs: usize,
    /// sha256 of the expression-set and geometry files, in that order.
    pub content_sha256: String,
}

/// Paths of the three corpus files for a stem such as `out/train`.
pub struct CorpusPaths {
    pub expressions: PathBuf,
    pub geometry: PathBuf,
    pub meta: PathBuf,
}

impl CorpusPaths {
    pub fn new(stem: &Path) -> Self {
        let with = |suffix: &str| {
            let mut s = stem.as_os_str().to_owned();
            s.push(suffix);
            PathBuf::from(s)
        };
        CorpusPaths {
            expressions: with(".expressions.json"),
            geometry: with(".geometry.json"),
            meta: with(".meta.json"),
        }
    }
}

fn content_hash(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    hex::encode(h.finalize())
}

pub fn write_corpus(
    stem: &Path,
    corpus: &Corpus,
    spec: Option<&SyntheticSpec>,
) -> Result<CorpusPaths> {
    let paths = CorpusPaths::new(stem);
    let records: Vec<ExpressionRecord> = corpus
        .pairs
        .iter()
        .zip(&corpus.templates)
        .map(|(p, t)| ExpressionRecord {
            kind: p.kind,
            geometry_mask: p.geometry_mask.clone(),
            weight: (p.weight != 1.0).then_some(p.weight),
            ..ExpressionRecord::from_template(t)
        })
        .collect();
    let geometry: GeometryCapture = corpus
        .pairs
        .iter()
        .map(|p| (p.name.clone(), p.v.iter().copied().collect()))
        .collect();
    let expr_bytes = to_json_bytes(&records)?;
    let geo_bytes = to_json_bytes(&geometry)?;
    with_path(
        &paths.expressions,
        std::fs::write(&paths.expressions, &expr_bytes).map_err(RigError::from),
    )?;
    with_path(
        &paths.geometry,
        std::fs::write(&paths.geometry, &geo_bytes).map_err(RigError::from),
    )?;
    let sidecar = CorpusSidecar {
        split: corpus.meta.split,
        seed: corpus.meta.seed,
        spec: spec.cloned(),
        theta_fingerprint: corpus.meta.theta_fingerprint.clone(),
        n_pairs: corpus.meta.n_pairs,
        content_sha256: content_hash(&[&expr_bytes, &geo_bytes]),
    };
    write_json(&paths.meta, &sidecar)?;
    Ok(paths)
}

/// Reads a corpus and checks the sidecar's content hash.
pub fn read_corpus(stem: &Path, rig: &Rig) -> Result<(Corpus, CorpusSidecar)> {
    let paths = CorpusPaths::new(stem);
    let sidecar: CorpusSidecar = read_json(&paths.meta)?;
    let expr_bytes = with_path(
        &paths.expressions,
        std::fs::read(&paths.expressions).map_err(RigError::from),
    )?;
    let geo_bytes = with_path(
        &paths.geometry,
        std::fs::read(&paths.geometry).map_err(RigError::from),
    )?;
    if content_hash(&[&expr_bytes, &geo_bytes]) != sidecar.content_sha256 {
        return with_path(
            &paths.meta,
            Err(RigError::invalid(
                "corpus",
                "content hash does not match the files",
            )),
        );
    }
    let records = load_expressions(&paths.expressions)?;
    let geometry: GeometryCapture = read_json(&paths.geometry)?;
    let pairs = expression_pairs(&records, &geometry, rig)?;
    let corpus = Corpus {
        templates: records.iter().map(|r| r.template()).collect(),
        meta: CorpusMeta {
            split: sidecar.split,
            seed: sidecar.seed,
            theta_fingerprint: sidecar.theta_fingerprint.clone(),
            n_pairs: pairs.len(),
        },
        pairs,
    };
    Ok((corpus, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{generate_rig, SyntheticSpec};

    #[test]
    fn joint_rig_round_trip_is_bit_exact() {
        let rig: Rig = generate_rig(&SyntheticSpec::desk(3)).unwrap().into();
        let text = serde_json::to_string(&RigFile::from_rig(&rig)).unwrap();
        let back = serde_json::from_str::<RigFile>(&text)
            .unwrap()
            .to_rig()
            .unwrap();
        assert_eq!(back, rig);
        let bits = |r: &Rig| r.theta().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&rig));
    }

    #[test]
    fn awkward_floats_survive() {
        let theta = DVector::from_vec(vec![
            0.1 + 0.2,
            1.0 / 3.0,
            5e-324,
            -1.7976931348623157e308,
            2.2250738585072014e-308,
            1e-7,
        ]);
        let rig: Rig = LinearRig::new(2, 3, theta.clone()).unwrap().into();
        let text = serde_json::to_string(&RigFile::from_rig(&rig)).unwrap();
        let back = serde_json::from_str::<RigFile>(&text)
            .unwrap()
            .to_rig()
            .unwrap();
        for (a, b) in back.theta().iter().zip(theta.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn unknown_rig_fields_are_rejected() {
        let text = r#"{"type":"linear","n_controls":1,"m_geometry":1,"theta":[1.0],"control_names":["a"],"colour":1}"#;
        assert!(serde_json::from_str::<RigFile>(text).is_err());
    }

    #[test]
    fn shuffled_sparsity_entries_are_reordered_with_theta() {
        let text = r#"{"type":"joint_psd","n_controls":1,"m_geometry":2,"theta":[2.0,1.0],
            "sparsity":{"rows":[1,0],"cols":[0,0]},"psd_spec":[[0]],"control_names":["a"]}"#;
        let rig = serde_json::from_str::<RigFile>(text)
            .unwrap()
            .to_rig()
            .unwrap();
        let v = rig.eval(&DVector::from_vec(vec![1.0])).unwrap();
        assert_eq!(v.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn expression_record_defaults() {
        let text = r#"[{"name":"smile","controls":{"c0":0.5}}]"#;
        let r: Vec<ExpressionRecord> = serde_json::from_str(text).unwrap();
        assert_eq!(r[0].kind, PairKind::Captured);
        assert!(r[0].geometry_mask.is_none() && r[0].weight.is_none());
    }
}
