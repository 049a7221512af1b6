//! Losses, optimizer, and the training loop.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{encode_features, DataRegime, Dataset};
use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::kelvinlet::{deform, Grasp, KelvinletParams};
use crate::metrics::{dcm, dcm_terms};
use crate::sampling::{sample_rng, QSampler};

use super::network::{param_count, Network, LAYERS};
use super::{to_field, Model, Normalization, Regime};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub lambda_reg: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Auxiliary grasps per step (regularized regime only).
    pub q_batch: usize,
    /// Standardize input columns and scale outputs by the target RMS.
    pub normalize: bool,
    pub kelvinlet: KelvinletParams,
}

impl TrainConfig {
    /// Defaults: λ_reg = 1 for linear data and 0.1 for nonlinear, batch 8,
    /// step 1e-3, 4 auxiliary grasps per step, no normalization.
    pub fn new(regime: Regime, data: DataRegime, seed: u64) -> Self {
        Self {
            regime,
            lambda_reg: match data {
                DataRegime::Linear => 1.0,
                DataRegime::Nonlinear => 0.1,
            },
            epochs: 100,
            batch_size: 8,
            lr: 1e-3,
            seed,
            q_batch: 4,
            normalize: false,
            kelvinlet: KelvinletParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_reg >= 0.0) || !self.lambda_reg.is_finite() {
            return Err(Error::InvalidParam(format!("lambda_reg must be >= 0, got {}", self.lambda_reg)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidParam("lr must be positive".into()));
        }
        self.kelvinlet.validate()
    }
}

/// Adaptive-moment optimizer (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

pub(crate) fn field_array(f: &DisplacementField) -> Array2<f64> {
    Array2::from_shape_fn((f.len(), 3), |(i, c)| f.u[i][c])
}

/// `Σ w ‖s·net(x) − target‖² / Σ w`; with `grad`, adds `factor ×` its
/// gradient.
pub fn weighted_mse_and_grad(
    net: &Network,
    out_scale: f64,
    x: ArrayView2<f64>,
    target: ArrayView2<f64>,
    weights: &[f64],
    factor: f64,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    if target.dim() != (x.nrows(), 3) || weights.len() != x.nrows() {
        return Err(Error::Shape(format!(
            "{} feature rows, target {:?}, {} weights",
            x.nrows(),
            target.dim(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    let (y, tape) = net.forward_tape(x)?;
    let mut r = y * out_scale;
    r -= &target;
    let mut loss = 0.0;
    for (row, &w) in r.rows().into_iter().zip(weights) {
        loss += w * row.dot(&row);
    }
    loss /= total;
    if let Some(g) = grad {
        for (mut row, &w) in r.rows_mut().into_iter().zip(weights) {
            row *= factor * 2.0 * w * out_scale / total;
        }
        net.backward(&tape, r.view(), g);
    }
    Ok(loss)
}

/// Plain regression loss.
pub fn loss_base(net: &Network, out_scale: f64, x: ArrayView2<f64>, u_true: ArrayView2<f64>, w: &[f64]) -> Result<f64> {
    weighted_mse_and_grad(net, out_scale, x, u_true, w, 1.0, None)
}

/// Loss of the corrected field `u_ε + r̂` against `u_true`.
pub fn loss_residual(
    net: &Network,
    out_scale: f64,
    x: ArrayView2<f64>,
    u_true: ArrayView2<f64>,
    u_eps: ArrayView2<f64>,
    w: &[f64],
) -> Result<f64> {
    let target = &u_true - &u_eps;
    weighted_mse_and_grad(net, out_scale, x, target.view(), w, 1.0, None)
}

/// Encoded auxiliary grasp and its Kelvinlet field.
#[derive(Debug, Clone)]
pub struct QTerm {
    pub x: Array2<f64>,
    pub u_eps: Array2<f64>,
}

/// Data loss plus `λ ×` the mean auxiliary loss against Kelvinlet fields.
pub fn loss_regularized(
    net: &Network,
    out_scale: f64,
    x: ArrayView2<f64>,
    u_true: ArrayView2<f64>,
    q: &[QTerm],
    w: &[f64],
    lambda: f64,
) -> Result<f64> {
    let data = weighted_mse_and_grad(net, out_scale, x, u_true, w, 1.0, None)?;
    if lambda == 0.0 || q.is_empty() {
        return Ok(data);
    }
    let mut reg = 0.0;
    for t in q {
        reg += weighted_mse_and_grad(net, out_scale, t.x.view(), t.u_eps.view(), w, 1.0, None)?;
    }
    Ok(data + lambda * reg / q.len() as f64)
}

/// Seeded 80/20 split into (train, test) sample indices.
pub fn split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut sample_rng(seed, 0));
    let test = idx.split_off(n - n / 5);
    (idx, test)
}

/// Candidate regularization radii (meters) for [`calibrate_epsilon`].
pub const EPSILON_GRID: [f64; 8] = [0.005, 0.0075, 0.01, 0.015, 0.02, 0.03, 0.05, 0.075];

/// Picks the ε from `grid` whose Kelvinlet fields best match the targets of
/// the samples in `idx` (highest DCM, first on ties). Only pass training
/// indices: the choice then carries no information about held-out data.
pub fn calibrate_epsilon(ds: &Dataset, idx: &[usize], base: &KelvinletParams, grid: &[f64]) -> Result<KelvinletParams> {
    if idx.is_empty() || grid.is_empty() {
        return Err(Error::InvalidParam("calibration needs samples and candidates".into()));
    }
    let w = ds.mesh.lumped_volumes();
    let truth: Vec<DisplacementField> = idx.iter().map(|&i| ds.samples[i].target_field()).collect();
    let mut best: Option<(f64, KelvinletParams)> = None;
    for &epsilon in grid {
        let params = KelvinletParams { epsilon, ..base.clone() };
        params.validate()?;
        let pred = idx
            .iter()
            .map(|&i| deform(&ds.mesh, &ds.samples[i].grasps, &params))
            .collect::<Result<Vec<_>>>()?;
        let score = dcm(&pred, &truth, w)?;
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, params));
        }
    }
    Ok(best.expect("grid is nonempty").1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_dcm: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl TrainOutcome {
    /// Training log as JSON lines.
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|l| serde_json::to_string(l).expect("log serializes") + "\n")
            .collect()
    }
}

struct Prepared {
    x: Array2<f64>,
    /// Regression target of the regime (`u_true − u_ε` for residual).
    target: Array2<f64>,
    truth: DisplacementField,
    kelvinlet: Option<DisplacementField>,
}

/// `arity` auxiliary grasps at distinct nodes.
fn draw_q(q: &QSampler, ds: &Dataset, arity: usize, rng: &mut impl rand::Rng) -> Vec<Grasp> {
    let mut out: Vec<Grasp> = Vec::with_capacity(arity);
    while out.len() < arity {
        let g = q.sample(&ds.mesh, rng);
        if out.iter().all(|o| o.node != g.node) {
            out.push(g);
        }
    }
    out
}

/// Trains one model. Deterministic for a given config and dataset.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    let mesh = &ds.mesh;
    let w = mesh.lumped_volumes();
    let arity = ds.manifest.arity;
    let (train_idx, test_idx) = split(ds.len(), cfg.seed);

    let mut raw: Vec<(DisplacementField, Option<DisplacementField>, Array2<f64>)> = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let truth = s.target_field();
        let kel = if cfg.regime == Regime::Residual {
            Some(deform(mesh, &s.grasps, &cfg.kelvinlet)?)
        } else {
            None
        };
        let target = match &kel {
            Some(k) => field_array(&truth.sub(k)?),
            None => field_array(&truth),
        };
        raw.push((truth, kel, target));
    }
    let norm = if cfg.normalize {
        Normalization::fit(
            train_idx.iter().map(|&i| ds.samples[i].features.as_slice()),
            train_idx.iter().map(|&i| raw[i].2.as_slice().expect("standard layout")),
        )
    } else {
        Normalization::identity()
    };
    let prepared: Vec<Prepared> = raw
        .into_iter()
        .zip(&ds.samples)
        .map(|((truth, kelvinlet, target), s)| {
            Ok(Prepared {
                x: norm.apply(&s.features)?,
                target,
                truth,
                kelvinlet,
            })
        })
        .collect::<Result<_>>()?;

    let mut net = Network::init(cfg.seed);
    // Zero output layer: training starts from the zero prediction (the
    // Kelvinlet field itself in the residual regime).
    let last = param_count() - LAYERS[3].0 * (LAYERS[3].1 + 1);
    net.params[last..].fill(0.0);
    let mut adam = Adam::new(param_count(), cfg.lr);
    let regularize = cfg.regime == Regime::Regularized && cfg.lambda_reg > 0.0 && cfg.q_batch > 0;
    let q_sampler = if regularize {
        Some(QSampler::new(mesh, &ds.manifest.sampling)?)
    } else {
        None
    };
    let mut shuffle_rng = sample_rng(cfg.seed, 1);
    let mut q_rng = sample_rng(cfg.seed, 2);
    let mut order = train_idx.clone();
    let mut grad = vec![0.0; param_count()];
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut steps = 0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            grad.fill(0.0);
            let bf = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            for &i in batch {
                let p = &prepared[i];
                loss += bf
                    * weighted_mse_and_grad(&net, norm.out_scale, p.x.view(), p.target.view(), w, bf, Some(&mut grad))?;
            }
            if let Some(q) = &q_sampler {
                let qf = cfg.lambda_reg / cfg.q_batch as f64;
                for _ in 0..cfg.q_batch {
                    let grasps = draw_q(q, ds, arity, &mut q_rng);
                    let x = norm.apply(&encode_features(mesh, &grasps)?)?;
                    let u_eps = field_array(&deform(mesh, &grasps, &cfg.kelvinlet)?);
                    loss += qf * weighted_mse_and_grad(&net, norm.out_scale, x.view(), u_eps.view(), w, qf, Some(&mut grad))?;
                }
            }
            if !loss.is_finite() || !grad.iter().all(|g| g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            adam.step(&mut net.params, &grad);
            total += loss;
            steps += 1;
        }
        let test_dcm = if test_idx.is_empty() {
            None
        } else {
            let mut pred = Vec::with_capacity(test_idx.len());
            let mut truth = Vec::with_capacity(test_idx.len());
            for &i in &test_idx {
                let p = &prepared[i];
                let y = to_field(net.forward(p.x.view())?.view(), norm.out_scale);
                pred.push(match &p.kelvinlet {
                    Some(k) => y.add(k)?,
                    None => y,
                });
                truth.push(p.truth.clone());
            }
            crate::metrics::dcm_from_terms(&dcm_terms(&pred, &truth, w)?).ok().map(|d| d.0)
        };
        log.push(EpochLog {
            epoch,
            train_loss: total / steps.max(1) as f64,
            test_dcm,
        });
    }
    // Checkpoints store f32; round now so saved and in-memory models agree.
    for p in &mut net.params {
        *p = *p as f32 as f64;
    }
    Ok(TrainOutcome {
        model: Model {
            network: net,
            regime: cfg.regime,
            lambda_reg: if cfg.regime == Regime::Regularized { cfg.lambda_reg } else { 0.0 },
            arity,
            kelvinlet: cfg.kelvinlet,
            norm,
            seed: cfg.seed,
        },
        log,
        train_idx,
        test_idx,
    })
}
