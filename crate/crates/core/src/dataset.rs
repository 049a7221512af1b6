//! Paired (grasps, FEM solution) samples and their on-disk format.
//!
//! A dataset directory holds `manifest.json`, `records.idx.json`,
//! `features.f32`, `targets.f32` (row-major little-endian f32) and a copy of
//! the mesh as `mesh.json`, whose SHA-256 is recorded in the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fem::{self, BoundaryConditions, MaterialModel, MaterialParams};
use crate::field::{DisplacementField, Vec3};
use crate::kelvinlet::Grasp;
use crate::mesh::io::MeshJson;
use crate::mesh::TetMesh;
use crate::sampling::{sample_displacement_p, sample_rng, SamplingConfig, SourceSampler};

pub const FORMAT_VERSION: u32 = 1;
pub const FEATURE_DIM: usize = 7;
pub const MAX_RETRIES: usize = 3;
pub const MAX_FAILURE_RATE: f64 = 0.2;
const MESH_FILE: &str = "mesh.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataRegime {
    Linear,
    Nonlinear,
}

impl DataRegime {
    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Nonlinear => "nonlinear",
        }
    }

    pub fn model(self) -> MaterialModel {
        match self {
            Self::Linear => MaterialModel::Linear,
            Self::Nonlinear => MaterialModel::MooneyRivlin,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub grasps: Vec<Grasp>,
    /// `N × 7` rows of `[x; u_s; a]`.
    pub features: Vec<f32>,
    /// `N × 3` FEM displacement.
    pub target: Vec<f32>,
    pub regime: DataRegime,
    /// RNG stream the grasps were drawn from.
    pub stream: u64,
    pub report_digest: String,
}

impl Sample {
    pub fn node_count(&self) -> usize {
        self.target.len() / 3
    }

    pub fn target_field(&self) -> DisplacementField {
        DisplacementField::from_f32(&self.target).expect("target length is a multiple of 3")
    }
}

/// Per-node features `[x; u_s; a]`: `u_s` and `a = 1` only at grasp nodes.
pub fn encode_features(mesh: &TetMesh, grasps: &[Grasp]) -> Result<Vec<f32>> {
    let n = mesh.node_count();
    let mut f = vec![0f32; n * FEATURE_DIM];
    for (i, p) in mesh.nodes().iter().enumerate() {
        f[i * FEATURE_DIM] = p.x as f32;
        f[i * FEATURE_DIM + 1] = p.y as f32;
        f[i * FEATURE_DIM + 2] = p.z as f32;
    }
    for (k, g) in grasps.iter().enumerate() {
        let node = g
            .node
            .ok_or_else(|| Error::InvalidParam(format!("grasp {k} has no node index")))?;
        if node >= n {
            return Err(Error::IndexOutOfRange { index: node, len: n });
        }
        let row = &mut f[node * FEATURE_DIM..(node + 1) * FEATURE_DIM];
        row[3] = g.displacement.x as f32;
        row[4] = g.displacement.y as f32;
        row[5] = g.displacement.z as f32;
        row[6] = 1.0;
    }
    Ok(f)
}

/// A failed solve attempt that was re-drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedAttempt {
    pub sample: usize,
    pub attempt: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub mesh_file: String,
    pub mesh_sha256: String,
    pub node_count: usize,
    pub sampling: SamplingConfig,
    pub material: MaterialParams,
    pub regime: DataRegime,
    pub arity: usize,
    /// Sample count per `"<regime>-<arity>"`.
    pub counts: BTreeMap<String, usize>,
    #[serde(default)]
    pub failed_attempts: Vec<FailedAttempt>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub mesh: TetMesh,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Rounds to the nearest f32 so stored features reproduce the solved BCs.
fn f32_exact(v: Vec3) -> Vec3 {
    v.map(|c| c as f32 as f64)
}

fn draw_grasps(mesh: &TetMesh, cfg: &SamplingConfig, sampler: &SourceSampler, arity: usize, stream: u64) -> Result<Vec<Grasp>> {
    let mut rng = sample_rng(cfg.seed, stream);
    let nodes = match arity {
        1 => vec![sampler.sample(&mut rng)?],
        2 => {
            let (a, b) = sampler.sample_pair(&mut rng)?;
            vec![a, b]
        }
        _ => return Err(Error::InvalidParam(format!("arity must be 1 or 2, got {arity}"))),
    };
    nodes
        .into_iter()
        .map(|n| Grasp::at_node(mesh, n, f32_exact(sample_displacement_p(cfg, &mut rng))))
        .collect()
}

/// Draws and solves `count` samples. Sample `i`, attempt `a` uses RNG stream
/// `i · (MAX_RETRIES + 1) + a`, so output does not depend on thread count.
pub fn generate(
    mesh: &TetMesh,
    mat: &MaterialParams,
    cfg: &SamplingConfig,
    count: usize,
    arity: usize,
    regime: DataRegime,
) -> Result<Dataset> {
    cfg.validate()?;
    mat.validate()?;
    if mat.model != regime.model() {
        return Err(Error::InvalidParam(format!(
            "{} regime needs the {:?} material model",
            regime.name(),
            regime.model()
        )));
    }
    if !(1..=2).contains(&arity) {
        return Err(Error::InvalidParam(format!("arity must be 1 or 2, got {arity}")));
    }
    let sampler = SourceSampler::new(mesh, cfg)?;
    let results: Vec<(Result<Sample>, Vec<FailedAttempt>)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut failures = Vec::new();
            for attempt in 0..=MAX_RETRIES {
                let stream = (i * (MAX_RETRIES + 1) + attempt) as u64;
                let outcome = draw_grasps(mesh, cfg, &sampler, arity, stream).and_then(|grasps| {
                    let bc = BoundaryConditions::from_grasps(mesh, &grasps)?;
                    let sol = fem::solve(mesh, mat, &bc)?;
                    Ok(Sample {
                        features: encode_features(mesh, &grasps)?,
                        target: sol.field.to_f32(),
                        grasps,
                        regime,
                        stream,
                        report_digest: sol.report.digest(),
                    })
                });
                match outcome {
                    Ok(s) => return (Ok(s), failures),
                    Err(e @ (Error::NoConvergence(_) | Error::InvertedElement { .. } | Error::SingularSystem(_))) => {
                        failures.push(FailedAttempt {
                            sample: i,
                            attempt,
                            error: e.to_string(),
                        })
                    }
                    Err(e) => return (Err(e), failures),
                }
            }
            let last = failures.last().map(|f| f.error.clone()).unwrap_or_default();
            (
                Err(Error::Dataset(format!(
                    "sample {i}: retry budget exhausted after {} attempts, last error: {last}",
                    MAX_RETRIES + 1
                ))),
                failures,
            )
        })
        .collect();
    let failed: Vec<FailedAttempt> = results.iter().flat_map(|r| r.1.iter().cloned()).collect();
    let attempts = count + failed.len();
    if attempts > 0 && failed.len() as f64 / attempts as f64 > MAX_FAILURE_RATE {
        return Err(Error::Dataset(format!(
            "solver failure rate {}/{attempts} exceeds {MAX_FAILURE_RATE}; first failure: {}",
            failed.len(),
            failed[0].error
        )));
    }
    let samples = results.into_iter().map(|r| r.0).collect::<Result<Vec<_>>>()?;
    let mesh_json = mesh_bytes(mesh)?;
    let mut counts = BTreeMap::new();
    counts.insert(format!("{}-{arity}", regime.name()), count);
    Ok(Dataset {
        manifest: DatasetManifest {
            version: FORMAT_VERSION,
            mesh_file: MESH_FILE.into(),
            mesh_sha256: sha256_hex(&mesh_json),
            node_count: mesh.node_count(),
            sampling: cfg.clone(),
            material: mat.clone(),
            regime,
            arity,
            counts,
            failed_attempts: failed,
        },
        mesh: mesh.clone(),
        samples,
    })
}

fn mesh_bytes(mesh: &TetMesh) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec(&MeshJson::from_mesh(mesh))?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    fem::hex(&Sha256::digest(bytes))
}

/// Location of one array in its binary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayRef {
    /// Byte offset.
    pub offset: u64,
    pub shape: [usize; 2],
}

impl ArrayRef {
    fn byte_len(&self) -> u64 {
        (self.shape[0] * self.shape[1] * 4) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordIndex {
    pub grasps: Vec<Grasp>,
    pub regime: DataRegime,
    pub stream: u64,
    pub report_digest: String,
    pub features: ArrayRef,
    pub targets: ArrayRef,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn push_f32(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = dataset.mesh.node_count();
    let mut features = Vec::new();
    let mut targets = Vec::new();
    let mut index = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.features.len() != n * FEATURE_DIM || s.target.len() != n * 3 {
            return Err(Error::Shape(format!("sample {i} does not match the {n}-node mesh")));
        }
        index.push(RecordIndex {
            grasps: s.grasps.clone(),
            regime: s.regime,
            stream: s.stream,
            report_digest: s.report_digest.clone(),
            features: ArrayRef {
                offset: features.len() as u64,
                shape: [n, FEATURE_DIM],
            },
            targets: ArrayRef {
                offset: targets.len() as u64,
                shape: [n, 3],
            },
        });
        push_f32(&mut features, &s.features);
        push_f32(&mut targets, &s.target);
    }
    write_file(&dir.join(MESH_FILE), &mesh_bytes(&dataset.mesh)?)?;
    write_file(&dir.join("features.f32"), &features)?;
    write_file(&dir.join("targets.f32"), &targets)?;
    write_file(&dir.join("records.idx.json"), &serde_json::to_vec_pretty(&index)?)?;
    write_file(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&dataset.manifest)?)?;
    Ok(())
}

fn slice_f32(bytes: &[u8], r: &ArrayRef, index: usize, what: &str) -> Result<Vec<f32>> {
    let start = r.offset as usize;
    let end = r.offset.checked_add(r.byte_len()).map(|e| e as usize);
    match end {
        Some(end) if end <= bytes.len() => Ok(bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()),
        _ => Err(Error::TruncatedRecord {
            index,
            detail: format!(
                "{what} needs bytes {start}..{} but file has {}",
                start as u64 + r.byte_len(),
                bytes.len()
            ),
        }),
    }
}

pub fn read(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest = serde_json::from_slice(&read_file(&dir.join("manifest.json"))?)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: manifest.version,
        });
    }
    let mesh_raw = read_file(&dir.join(&manifest.mesh_file))?;
    let found = sha256_hex(&mesh_raw);
    if found != manifest.mesh_sha256 {
        return Err(Error::MeshMismatch {
            expected: manifest.mesh_sha256.clone(),
            found,
        });
    }
    let mesh = serde_json::from_slice::<MeshJson>(&mesh_raw)?.into_mesh(1.0)?;
    let index: Vec<RecordIndex> = serde_json::from_slice(&read_file(&dir.join("records.idx.json"))?)?;
    let total: usize = manifest.counts.values().sum();
    if total != index.len() {
        return Err(Error::Dataset(format!(
            "manifest counts {total} samples, index has {}",
            index.len()
        )));
    }
    let features = read_file(&dir.join("features.f32"))?;
    let targets = read_file(&dir.join("targets.f32"))?;
    let n = mesh.node_count();
    let samples = index
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            if r.features.shape != [n, FEATURE_DIM] || r.targets.shape != [n, 3] {
                return Err(Error::Shape(format!("record {i} shape does not match the {n}-node mesh")));
            }
            Ok(Sample {
                features: slice_f32(&features, &r.features, i, "features")?,
                target: slice_f32(&targets, &r.targets, i, "targets")?,
                grasps: r.grasps,
                regime: r.regime,
                stream: r.stream,
                report_digest: r.report_digest,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest,
        mesh,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::synth;
    use crate::sampling::DEFAULT_CUBOID;

    fn small_organ() -> (TetMesh, SamplingConfig) {
        let shape = synth::OrganShape {
            cells: [5, 3, 4],
            ..synth::OrganShape::desk()
        };
        let (mesh, specs) = synth::organ(shape);
        (mesh, SamplingConfig::new(specs, DEFAULT_CUBOID, 7))
    }

    #[test]
    fn empty_dataset_is_valid() {
        let (mesh, cfg) = small_organ();
        let ds = generate(&mesh, &MaterialParams::linear_liver(), &cfg, 0, 1, DataRegime::Linear).unwrap();
        assert!(ds.is_empty());
        let dir = tempfile::tempdir().unwrap();
        write(&ds, dir.path()).unwrap();
        let back = read(dir.path()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.manifest, ds.manifest);
    }

    #[test]
    fn single_grasp_samples_honor_bcs() {
        let (mesh, cfg) = small_organ();
        let ds = generate(&mesh, &MaterialParams::linear_liver(), &cfg, 5, 1, DataRegime::Linear).unwrap();
        assert_eq!(ds.len(), 5);
        for s in &ds.samples {
            let active: Vec<usize> = (0..mesh.node_count())
                .filter(|&i| s.features[i * FEATURE_DIM + 6] == 1.0)
                .collect();
            assert_eq!(active, vec![s.grasps[0].node.unwrap()]);
            for i in 0..mesh.node_count() {
                if !active.contains(&i) {
                    assert!(s.features[i * FEATURE_DIM + 3..i * FEATURE_DIM + 7].iter().all(|&v| v == 0.0));
                }
            }
            let t = s.target_field();
            let g = &s.grasps[0];
            assert!((t.u[g.node.unwrap()] - g.displacement).amax() <= 1e-8);
        }
    }

    #[test]
    fn pair_samples_use_distinct_regions() {
        let (mesh, cfg) = small_organ();
        let ds = generate(&mesh, &MaterialParams::linear_liver(), &cfg, 4, 2, DataRegime::Linear).unwrap();
        for s in &ds.samples {
            let flags = (0..mesh.node_count()).filter(|&i| s.features[i * FEATURE_DIM + 6] == 1.0).count();
            assert_eq!(flags, 2);
            let [a, b] = [s.grasps[0].node.unwrap(), s.grasps[1].node.unwrap()];
            assert_ne!(mesh.region(a), mesh.region(b));
        }
    }

    #[test]
    fn round_trip_is_bit_exact_and_deterministic() {
        let (mesh, cfg) = small_organ();
        let mat = MaterialParams::linear_liver();
        let ds = generate(&mesh, &mat, &cfg, 3, 1, DataRegime::Linear).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write(&ds, a.path()).unwrap();
        let back = read(a.path()).unwrap();
        assert_eq!(back.samples, ds.samples);
        assert_eq!(back.manifest, ds.manifest);
        assert_eq!(back.mesh.nodes(), mesh.nodes());
        let again = generate(&mesh, &mat, &cfg, 3, 1, DataRegime::Linear).unwrap();
        write(&again, b.path()).unwrap();
        for f in ["manifest.json", "records.idx.json", "features.f32", "targets.f32", "mesh.json"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn altered_hash_is_a_mesh_mismatch() {
        let (mesh, cfg) = small_organ();
        let mut ds = generate(&mesh, &MaterialParams::linear_liver(), &cfg, 1, 1, DataRegime::Linear).unwrap();
        ds.manifest.mesh_sha256 = "00".repeat(32);
        let dir = tempfile::tempdir().unwrap();
        write(&ds, dir.path()).unwrap();
        let err = read(dir.path()).unwrap_err();
        assert!(err.to_string().contains("mesh mismatch"), "{err}");
    }

    #[test]
    fn truncated_last_record_named() {
        let (mesh, cfg) = small_organ();
        let ds = generate(&mesh, &MaterialParams::linear_liver(), &cfg, 3, 1, DataRegime::Linear).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write(&ds, dir.path()).unwrap();
        let path = dir.path().join("targets.f32");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        match read(dir.path()).unwrap_err() {
            Error::TruncatedRecord { index, .. } => assert_eq!(index, 2),
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn version_checked() {
        let (mesh, cfg) = small_organ();
        let mut ds = generate(&mesh, &MaterialParams::linear_liver(), &cfg, 0, 1, DataRegime::Linear).unwrap();
        ds.manifest.version = 99;
        let dir = tempfile::tempdir().unwrap();
        write(&ds, dir.path()).unwrap();
        assert!(matches!(read(dir.path()), Err(Error::VersionMismatch { found: 99, .. })));
    }

    #[test]
    fn regime_must_match_material() {
        let (mesh, cfg) = small_organ();
        assert!(generate(&mesh, &MaterialParams::linear_liver(), &cfg, 1, 1, DataRegime::Nonlinear).is_err());
        assert!(generate(&mesh, &MaterialParams::linear_liver(), &cfg, 1, 3, DataRegime::Linear).is_err());
    }
}
