//! Volume-weighted field norms and the Deformation Capture Mean.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DisplacementField;

/// `sqrt(Σ w_n ‖u_n‖²)`, the discrete L2(Ω) norm with lumped volumes `w`.
pub fn field_norm(field: &DisplacementField, weights: &[f64]) -> Result<f64> {
    Ok(weighted_sq(field, weights)?.sqrt())
}

fn weighted_sq(field: &DisplacementField, weights: &[f64]) -> Result<f64> {
    if field.len() != weights.len() {
        return Err(Error::Shape(format!(
            "field has {} nodes, weights {}",
            field.len(),
            weights.len()
        )));
    }
    let mut s = 0.0;
    for (u, &w) in field.u.iter().zip(weights) {
        if w < 0.0 || !w.is_finite() {
            return Err(Error::InvalidParam(format!("negative or non-finite weight {w}")));
        }
        s += w * u.norm_squared();
    }
    Ok(s)
}

/// Volume-weighted mean squared error, `Σ w ‖a − b‖² / Σ w`.
pub fn weighted_mse(a: &DisplacementField, b: &DisplacementField, weights: &[f64]) -> Result<f64> {
    let total: f64 = weights.iter().sum();
    Ok(weighted_sq(&a.sub(b)?, weights)? / total)
}

/// Per-sample DCM terms: `Some(‖u_true − û‖ / ‖u_true‖)`, or `None` when
/// `‖u_true‖ = 0`.
pub fn dcm_terms(
    pred: &[DisplacementField],
    truth: &[DisplacementField],
    weights: &[f64],
) -> Result<Vec<Option<f64>>> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground-truth fields",
            pred.len(),
            truth.len()
        )));
    }
    pred.iter()
        .zip(truth)
        .map(|(p, t)| {
            let nt = field_norm(t, weights)?;
            if nt == 0.0 {
                return Ok(None);
            }
            Ok(Some(field_norm(&t.sub(p)?, weights)? / nt))
        })
        .collect()
}

/// `100 (1 − mean ratio)` over samples with nonzero ground truth.
pub fn dcm(pred: &[DisplacementField], truth: &[DisplacementField], weights: &[f64]) -> Result<f64> {
    dcm_from_terms(&dcm_terms(pred, truth, weights)?).map(|(d, _)| d)
}

/// DCM and the number of excluded zero-norm samples.
pub fn dcm_from_terms(terms: &[Option<f64>]) -> Result<(f64, usize)> {
    let kept: Vec<f64> = terms.iter().flatten().copied().collect();
    if kept.is_empty() {
        return Err(Error::InvalidParam("DCM undefined: every ground-truth field is zero".into()));
    }
    let mean = kept.iter().sum::<f64>() / kept.len() as f64;
    Ok((100.0 * (1.0 - mean), terms.len() - kept.len()))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub nodes: usize,
    pub count: usize,
}

impl LatencyStats {
    pub fn from_samples(ms: &[f64], nodes: usize) -> Self {
        if ms.is_empty() {
            return Self {
                nodes,
                ..Self::default()
            };
        }
        let mut sorted = ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = ((0.95 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        Self {
            mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
            p95_ms: sorted[rank - 1],
            nodes,
            count: ms.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub regime: String,
    /// Error ratio per sample; `None` for excluded zero-norm samples.
    pub terms: Vec<Option<f64>>,
    pub dcm: f64,
    pub excluded: usize,
    pub latency: LatencyStats,
}

impl EvalReport {
    pub fn new(model_id: &str, regime: &str, terms: Vec<Option<f64>>, latency: LatencyStats) -> Result<Self> {
        let (dcm, excluded) = dcm_from_terms(&terms)?;
        Ok(Self {
            model_id: model_id.into(),
            regime: regime.into(),
            terms,
            dcm,
            excluded,
            latency,
        })
    }

    /// `sample,ratio,dcm_term` rows; excluded samples have empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,ratio,dcm_term\n");
        for (i, t) in self.terms.iter().enumerate() {
            match t {
                Some(r) => writeln!(out, "{i},{r},{}", 100.0 * (1.0 - r)),
                None => writeln!(out, "{i},,"),
            }
            .expect("write to string");
        }
        out
    }
}
