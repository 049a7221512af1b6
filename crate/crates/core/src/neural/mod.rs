//! Per-node neural surrogate trained in three regimes: plain regression,
//! residual on top of the Kelvinlet field, and regression regularized toward
//! Kelvinlet fields of auxiliary grasps.

mod network;
mod train;

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataset::{encode_features, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::field::{DisplacementField, Vec3};
use crate::kelvinlet::{deform, Grasp, KelvinletParams};
use crate::mesh::TetMesh;

pub use network::{param_count, Network, Tape, HIDDEN, IN_DIM, LAYERS, OUT_DIM};
pub use train::{
    calibrate_epsilon, loss_base, loss_regularized, loss_residual, split, train, weighted_mse_and_grad, Adam, EpochLog, QTerm,
    TrainConfig, TrainOutcome, EPSILON_GRID,
};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Base,
    Residual,
    Regularized,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Base, Regime::Residual, Regime::Regularized];

    pub fn name(self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Residual => "residual",
            Self::Regularized => "regularized",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }
}

/// Fixed affine maps around the network: `x̃ = (x − shift) / scale` per
/// feature column, output multiplied by `out_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub in_shift: [f64; IN_DIM],
    pub in_scale: [f64; IN_DIM],
    pub out_scale: f64,
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            in_shift: [0.0; IN_DIM],
            in_scale: [1.0; IN_DIM],
            out_scale: 1.0,
        }
    }

    /// Per-column standardization over all rows of `features`, and the RMS
    /// of `targets` as output scale. Zero spreads fall back to 1.
    pub fn fit<'a>(features: impl Iterator<Item = &'a [f32]>, targets: impl Iterator<Item = &'a [f64]>) -> Self {
        let mut sum = [0.0; IN_DIM];
        let mut sq = [0.0; IN_DIM];
        let mut rows = 0usize;
        for f in features {
            for row in f.chunks_exact(FEATURE_DIM) {
                for c in 0..IN_DIM {
                    sum[c] += row[c] as f64;
                    sq[c] += (row[c] as f64).powi(2);
                }
                rows += 1;
            }
        }
        let mut norm = Self::identity();
        if rows > 0 {
            for c in 0..IN_DIM {
                let mean = sum[c] / rows as f64;
                let var = (sq[c] / rows as f64 - mean * mean).max(0.0);
                norm.in_shift[c] = mean;
                norm.in_scale[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
            }
        }
        let (mut tsq, mut tn) = (0.0, 0usize);
        for t in targets {
            tsq += t.iter().map(|v| v * v).sum::<f64>();
            tn += t.len();
        }
        if tn > 0 && tsq > 0.0 {
            norm.out_scale = (tsq / tn as f64).sqrt();
        }
        norm
    }

    pub fn apply(&self, features: &[f32]) -> Result<Array2<f64>> {
        if features.len() % FEATURE_DIM != 0 {
            return Err(Error::Shape(format!(
                "feature length {} is not a multiple of {FEATURE_DIM}",
                features.len()
            )));
        }
        let n = features.len() / FEATURE_DIM;
        Ok(Array2::from_shape_fn((n, IN_DIM), |(i, c)| {
            (features[i * FEATURE_DIM + c] as f64 - self.in_shift[c]) / self.in_scale[c]
        }))
    }
}

/// A trained surrogate with everything needed to predict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub network: Network,
    pub regime: Regime,
    pub lambda_reg: f64,
    pub arity: usize,
    pub kelvinlet: KelvinletParams,
    pub norm: Normalization,
    pub seed: u64,
}

/// Network output as a field, scaled back to meters.
pub(crate) fn to_field(y: ArrayView2<f64>, out_scale: f64) -> DisplacementField {
    DisplacementField::new(
        y.rows()
            .into_iter()
            .map(|r| Vec3::new(r[0], r[1], r[2]) * out_scale)
            .collect(),
    )
}

impl Model {
    /// Network part of the prediction for encoded features.
    pub fn network_field(&self, features: &[f32]) -> Result<DisplacementField> {
        let x = self.norm.apply(features)?;
        Ok(to_field(self.network.forward(x.view())?.view(), self.norm.out_scale))
    }

    /// Displacement field for `grasps`; the Kelvinlet field is added in the
    /// residual regime.
    pub fn predict(&self, mesh: &TetMesh, grasps: &[Grasp]) -> Result<DisplacementField> {
        if grasps.len() != self.arity {
            return Err(Error::ArityMismatch {
                expected: self.arity,
                found: grasps.len(),
            });
        }
        let net = self.network_field(&encode_features(mesh, grasps)?)?;
        match self.regime {
            Regime::Residual => net.add(&deform(mesh, grasps, &self.kelvinlet)?),
            _ => Ok(net),
        }
    }
}

pub fn predict(model: &Model, mesh: &TetMesh, grasps: &[Grasp]) -> Result<DisplacementField> {
    model.predict(mesh, grasps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    layers: Vec<(usize, usize)>,
    param_count: usize,
    model: Model,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<TrainConfig>,
}

/// Writes a one-line JSON header followed by the weights as little-endian
/// f32. Weights must be f32-representable for an exact round trip.
pub fn save_checkpoint(model: &Model, config: Option<&TrainConfig>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        layers: LAYERS.to_vec(),
        param_count: param_count(),
        model: model.clone(),
        config: config.cloned(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    for &p in &model.network.params {
        bytes.extend_from_slice(&(p as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, Option<TrainConfig>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Parse("checkpoint has no header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: header.version,
        });
    }
    if header.layers != LAYERS.to_vec() || header.param_count != param_count() {
        return Err(Error::Shape(format!("checkpoint layers {:?} do not match {:?}", header.layers, LAYERS)));
    }
    let blob = &bytes[nl + 1..];
    if blob.len() != 4 * param_count() {
        return Err(Error::Parse(format!(
            "checkpoint blob has {} bytes, expected {}",
            blob.len(),
            4 * param_count()
        )));
    }
    let mut model = header.model;
    model.network.params = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((model, header.config))
}
