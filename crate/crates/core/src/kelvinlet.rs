//! Regularized Kelvinlets and the multi-grasp coefficient solve.
//!
//! A single grasp dragging the point `x_s` by `u_s` produces the displacement
//!
//! ```text
//! u(x) = ε / (5 − 6ν) · [ (3 − 4ν) / r_ε · I + (x − x_s)(x − x_s)ᵀ / r_ε³ ] u_s
//! r_ε  = sqrt(|x − x_s|² + ε²)
//! ```
//!
//! which is the rescaled point-load Green's function of an infinite
//! linear-elastic medium, independent of the shear modulus. Several grasps
//! are superposed as `u(x) = Σ_j k_j u_j(x)` with scalar weights `k` chosen by
//! ridge-regularized least squares so that every grasp point lands close to
//! its prescribed displacement.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{serde_vec3, DisplacementField, Vec3};
use crate::mesh::TetMesh;

/// Material and solve parameters of the Kelvinlet model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KelvinletParams {
    /// Poisson ratio, in (0, 0.5).
    pub nu: f64,
    /// Regularization radius (m).
    pub epsilon: f64,
    /// Ridge weight on the coefficients.
    pub lambda: f64,
}

impl Default for KelvinletParams {
    fn default() -> Self {
        Self {
            nu: 0.45,
            epsilon: 0.05,
            lambda: 0.001,
        }
    }
}

impl KelvinletParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu < 0.5) {
            return Err(Error::InvalidParam(format!("nu must be in (0, 0.5), got {}", self.nu)));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidParam(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidParam(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Ratio `|u(x_s)| / |u_s|` of a single Kelvinlet at its own source:
    /// `(3 − 4ν) / (5 − 6ν)`.
    pub fn source_gain(&self) -> f64 {
        (3.0 - 4.0 * self.nu) / (5.0 - 6.0 * self.nu)
    }
}

/// A grasp point and its prescribed displacement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grasp {
    #[serde(with = "serde_vec3")]
    pub source: Vec3,
    #[serde(with = "serde_vec3")]
    pub displacement: Vec3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<usize>,
}

impl Grasp {
    pub fn new(source: Vec3, displacement: Vec3) -> Self {
        Self {
            source,
            displacement,
            node: None,
        }
    }

    /// Grasp attached to a mesh node.
    pub fn at_node(mesh: &TetMesh, node: usize, displacement: Vec3) -> Result<Self> {
        if node >= mesh.node_count() {
            return Err(Error::IndexOutOfRange {
                index: node,
                len: mesh.node_count(),
            });
        }
        Ok(Self {
            source: mesh.node(node),
            displacement,
            node: Some(node),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.source.iter().chain(self.displacement.iter()).all(|c| c.is_finite())
    }
}

/// Displacement at `x` of a single regularized Kelvinlet.
#[inline]
pub fn eval_kelvinlet(x: &Vec3, grasp: &Grasp, params: &KelvinletParams) -> Vec3 {
    kelvinlet_raw(x, &grasp.source, &grasp.displacement, params)
}

#[inline]
fn kelvinlet_raw(x: &Vec3, source: &Vec3, u_s: &Vec3, params: &KelvinletParams) -> Vec3 {
    let d = x - source;
    let eps = params.epsilon;
    let r2 = d.norm_squared() + eps * eps;
    let r = r2.sqrt();
    let iso = (3.0 - 4.0 * params.nu) / r;
    let aniso = d.dot(u_s) / (r2 * r);
    (u_s * iso + d * aniso) * (eps / (5.0 - 6.0 * params.nu))
}

/// Grasps with their superposition weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KelvinletSolution {
    pub grasps: Vec<Grasp>,
    pub coefficients: Vec<f64>,
    pub params: KelvinletParams,
}

impl KelvinletSolution {
    /// Superposed displacement at an arbitrary point.
    #[inline]
    pub fn eval(&self, x: &Vec3) -> Vec3 {
        let mut u = Vec3::zeros();
        for (g, k) in self.grasps.iter().zip(&self.coefficients) {
            u += eval_kelvinlet(x, g, &self.params) * *k;
        }
        u
    }

    pub fn eval_points(&self, points: &[Vec3]) -> Vec<Vec3> {
        points.iter().map(|p| self.eval(p)).collect()
    }
}

/// Relative pivot below which the normal matrix is treated as singular.
const PIVOT_TOL: f64 = 1e-14;

/// Solves for the scalar weights `k` of the grasp Kelvinlets.
///
/// With `A` the `3m × m` matrix whose column `j` stacks `u_j(x_i)` over the
/// grasp points and `b` the stacked prescribed displacements, this returns
/// the minimizer of `|A k − b|² / s² + λ |k|²`, where `s` is the largest
/// prescribed displacement magnitude. Dividing by `s²` makes `λ` unit-free.
pub fn solve_coefficients(grasps: &[Grasp], params: &KelvinletParams) -> Result<KelvinletSolution> {
    params.validate()?;
    if grasps.is_empty() {
        return Err(Error::InvalidParam("at least one grasp is required".into()));
    }
    if let Some(bad) = grasps.iter().position(|g| !g.is_finite()) {
        return Err(Error::InvalidParam(format!("grasp {bad} is not finite")));
    }
    let m = grasps.len();
    let scale = grasps
        .iter()
        .map(|g| g.displacement.norm())
        .fold(0.0, f64::max);
    if scale == 0.0 {
        // Every column of A vanishes; the field is zero for any k.
        return Ok(KelvinletSolution {
            grasps: grasps.to_vec(),
            coefficients: vec![0.0; m],
            params: *params,
        });
    }
    // columns[j][i] = u_j(x_i) / s
    let columns: Vec<Vec<Vec3>> = grasps
        .iter()
        .map(|gj| {
            grasps
                .iter()
                .map(|gi| eval_kelvinlet(&gi.source, gj, params) / scale)
                .collect()
        })
        .collect();
    let mut normal = vec![0.0; m * m];
    let mut rhs = vec![0.0; m];
    for a in 0..m {
        for b in 0..m {
            normal[a * m + b] = (0..m).map(|i| columns[a][i].dot(&columns[b][i])).sum();
        }
        normal[a * m + a] += params.lambda;
        rhs[a] = (0..m)
            .map(|i| columns[a][i].dot(&(grasps[i].displacement / scale)))
            .sum();
    }
    let coefficients = cholesky_solve(&mut normal, &rhs, m)?;
    Ok(KelvinletSolution {
        grasps: grasps.to_vec(),
        coefficients,
        params: *params,
    })
}

fn cholesky_solve(a: &mut [f64], b: &[f64], m: usize) -> Result<Vec<f64>> {
    let max_diag = (0..m).map(|i| a[i * m + i].abs()).fold(0.0, f64::max);
    for j in 0..m {
        let mut d = a[j * m + j];
        for k in 0..j {
            d -= a[j * m + k] * a[j * m + k];
        }
        if !(d > PIVOT_TOL * max_diag) {
            return Err(Error::SingularSystem(format!(
                "normal matrix pivot {d:e} at column {j} (coincident or degenerate grasps)"
            )));
        }
        let d = d.sqrt();
        a[j * m + j] = d;
        for i in (j + 1)..m {
            let mut s = a[i * m + j];
            for k in 0..j {
                s -= a[i * m + k] * a[j * m + k];
            }
            a[i * m + j] = s / d;
        }
    }
    let mut y = vec![0.0; m];
    for i in 0..m {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * m + k] * y[k];
        }
        y[i] = s / a[i * m + i];
    }
    let mut x = vec![0.0; m];
    for i in (0..m).rev() {
        let mut s = y[i];
        for k in (i + 1)..m {
            s -= a[k * m + i] * x[k];
        }
        x[i] = s / a[i * m + i];
    }
    Ok(x)
}

/// Superposed field at every mesh node.
pub fn eval_field(mesh: &TetMesh, solution: &KelvinletSolution) -> DisplacementField {
    DisplacementField::new(solution.eval_points(mesh.nodes()))
}

/// Parallel [`eval_field`]; the per-node summation order is fixed, so the
/// result is bit-identical to the sequential version.
pub fn eval_field_par(mesh: &TetMesh, solution: &KelvinletSolution) -> DisplacementField {
    DisplacementField::new(
        mesh.nodes()
            .par_iter()
            .with_min_len(1024)
            .map(|p| solution.eval(p))
            .collect(),
    )
}

/// Solve and evaluate in one go.
pub fn deform(mesh: &TetMesh, grasps: &[Grasp], params: &KelvinletParams) -> Result<DisplacementField> {
    let sol = solve_coefficients(grasps, params)?;
    Ok(eval_field(mesh, &sol))
}
