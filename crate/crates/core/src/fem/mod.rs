//! Quasi-static tetrahedral FEM used as ground truth.
//!
//! Two constitutive models are supported on 4-node constant-strain tets:
//! small-strain linear elasticity (no gravity) and a compressible
//! Mooney-Rivlin solid loaded by gravity. Grasps enter as Dirichlet
//! displacements; the mesh's `fixed` region is clamped.

mod dirichlet;
pub mod hyper;
mod linear;
mod nonlinear;
pub mod sparse;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::{DisplacementField, Vec3};
use crate::kelvinlet::Grasp;
use crate::mesh::{Region, TetMesh};

pub use dirichlet::{apply_dirichlet, LinearSystem, ReducedSystem};
pub use hyper::{energy_gradient, energy_hessian, mooney_rivlin_energy};
pub use linear::{assemble_linear_system, element_stiffness, solve_linear};
pub use nonlinear::solve_nonlinear;
pub use sparse::BlockCsr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaterialModel {
    Linear,
    MooneyRivlin,
}

/// Material constants that may vary by region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    /// Shear modulus (Pa), linear model.
    pub mu: f64,
    /// Poisson ratio. Also sets the Mooney-Rivlin bulk penalty.
    pub nu: f64,
    /// Mooney-Rivlin constants (Pa).
    pub c10: f64,
    pub c01: f64,
}

impl Constants {
    /// Bulk modulus of the Mooney-Rivlin volumetric penalty,
    /// `2 (C10 + C01)(1 + ν) / (3 (1 − 2ν))`.
    pub fn mr_bulk(&self) -> f64 {
        2.0 * (self.c10 + self.c01) * (1.0 + self.nu) / (3.0 * (1.0 - 2.0 * self.nu))
    }

    /// Poisson ratio of the linear solid whose shear and bulk moduli equal
    /// the small-strain moduli of the Mooney-Rivlin model.
    pub fn mr_equivalent_nu(&self) -> f64 {
        let r = 3.0 * self.mr_bulk() / (4.0 * (self.c10 + self.c01));
        (r - 1.0) / (1.0 + 2.0 * r)
    }

    /// Lamé first parameter of the linear model.
    pub fn lame_lambda(&self) -> f64 {
        2.0 * self.mu * self.nu / (1.0 - 2.0 * self.nu)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    pub model: MaterialModel,
    #[serde(flatten)]
    pub constants: Constants,
    /// Density (kg/m³).
    pub rho: f64,
    /// Gravitational acceleration (m/s²).
    pub gravity: [f64; 3],
    /// Per-region constants, keyed by surface region id. A tet takes the
    /// override of the first (by id) region any of its nodes belongs to.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<String, Constants>,
}

impl MaterialParams {
    /// Linear liver tissue: μ = 0.69 kPa, ν = 0.45, no gravity.
    pub fn linear_liver() -> Self {
        Self {
            model: MaterialModel::Linear,
            constants: Constants {
                mu: 690.0,
                nu: 0.45,
                c10: 1620.0,
                c01: 1970.0,
            },
            rho: 1000.0,
            gravity: [0.0; 3],
            overrides: BTreeMap::new(),
        }
    }

    /// Porcine-liver Mooney-Rivlin constants with gravity along −y.
    pub fn mooney_rivlin_liver() -> Self {
        Self {
            model: MaterialModel::MooneyRivlin,
            gravity: [0.0, -9.81, 0.0],
            ..Self::linear_liver()
        }
    }

    pub fn gravity_vec(&self) -> Vec3 {
        Vec3::new(self.gravity[0], self.gravity[1], self.gravity[2])
    }

    pub fn validate(&self) -> Result<()> {
        let check = |c: &Constants, what: &str| -> Result<()> {
            if !(c.nu > 0.0 && c.nu < 0.5) {
                return Err(Error::InvalidParam(format!("{what}: nu must be in (0, 0.5)")));
            }
            match self.model {
                MaterialModel::Linear if !(c.mu > 0.0) => {
                    Err(Error::InvalidParam(format!("{what}: mu must be positive")))
                }
                MaterialModel::MooneyRivlin if !(c.c10 > 0.0 && c.c01 > 0.0) => {
                    Err(Error::InvalidParam(format!("{what}: C10 and C01 must be positive")))
                }
                _ => Ok(()),
            }
        };
        check(&self.constants, "material")?;
        for (k, c) in &self.overrides {
            check(c, &format!("override {k}"))?;
        }
        if !(self.rho >= 0.0) || !self.gravity.iter().all(|g| g.is_finite()) {
            return Err(Error::InvalidParam("rho must be >= 0 and gravity finite".into()));
        }
        Ok(())
    }

    /// Constants of every tet, after region overrides.
    pub fn per_tet(&self, mesh: &TetMesh) -> Vec<Constants> {
        if self.overrides.is_empty() {
            return vec![self.constants; mesh.tets().len()];
        }
        let by_region: Vec<Option<Constants>> = mesh
            .region_names()
            .iter()
            .map(|n| self.overrides.get(n).copied())
            .collect();
        mesh.tets()
            .iter()
            .map(|t| {
                let mut best: Option<(&str, Constants)> = None;
                for &v in t {
                    if let Region::Surface(r) = mesh.region(v) {
                        if let Some(c) = by_region[r] {
                            let name = mesh.region_names()[r].as_str();
                            if best.is_none_or(|(b, _)| name < b) {
                                best = Some((name, c));
                            }
                        }
                    }
                }
                best.map(|b| b.1).unwrap_or(self.constants)
            })
            .collect()
    }
}

/// Dirichlet data: clamped nodes and prescribed node displacements.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundaryConditions {
    pub fixed: Vec<usize>,
    #[serde(with = "prescribed_serde")]
    pub prescribed: BTreeMap<usize, Vec3>,
}

mod prescribed_serde {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::field::Vec3;

    pub fn serialize<S: Serializer>(m: &BTreeMap<usize, Vec3>, s: S) -> Result<S::Ok, S::Error> {
        let out: BTreeMap<String, [f64; 3]> =
            m.iter().map(|(k, v)| (k.to_string(), [v.x, v.y, v.z])).collect();
        out.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, Vec3>, D::Error> {
        let raw = BTreeMap::<String, [f64; 3]>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, v)| {
                let idx = k
                    .parse::<usize>()
                    .map_err(|_| serde::de::Error::custom(format!("bad node index {k:?}")))?;
                Ok((idx, Vec3::new(v[0], v[1], v[2])))
            })
            .collect()
    }
}

impl BoundaryConditions {
    /// Clamps the mesh's `fixed` region and prescribes each grasp node.
    pub fn from_grasps(mesh: &TetMesh, grasps: &[Grasp]) -> Result<Self> {
        let mut prescribed = BTreeMap::new();
        for (i, g) in grasps.iter().enumerate() {
            let node = g
                .node
                .ok_or_else(|| Error::InvalidParam(format!("grasp {i} has no node index")))?;
            prescribed.insert(node, g.displacement);
        }
        let fixed = mesh
            .fixed_nodes()
            .into_iter()
            .filter(|n| !prescribed.contains_key(n))
            .collect();
        let bc = Self { fixed, prescribed };
        bc.validate(mesh.node_count())?;
        Ok(bc)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for &f in &self.fixed {
            if f >= n {
                return Err(Error::IndexOutOfRange { index: f, len: n });
            }
            if self.prescribed.contains_key(&f) {
                return Err(Error::InvalidParam(format!(
                    "node {f} is both fixed and prescribed"
                )));
            }
        }
        for (&p, v) in &self.prescribed {
            if p >= n {
                return Err(Error::IndexOutOfRange { index: p, len: n });
            }
            if !v.iter().all(|c| c.is_finite()) {
                return Err(Error::InvalidParam(format!("prescribed value at {p} not finite")));
            }
        }
        Ok(())
    }

    /// Fails when the constrained nodes leave a rigid motion free, i.e. when
    /// they are empty or all lie on one line (a free node set must exist).
    pub fn check_rigid_modes(&self, mesh: &TetMesh) -> Result<()> {
        let n = mesh.node_count();
        let c = self.is_constrained(n);
        if c.iter().all(|&x| x) {
            return Ok(());
        }
        let pts: Vec<Vec3> = (0..n).filter(|&i| c[i]).map(|i| mesh.node(i)).collect();
        let scale = mesh.mean_edge_length().max(f64::MIN_POSITIVE);
        let spans_plane = pts.first().is_some_and(|&p0| {
            let far = pts.iter().map(|p| p - p0).max_by(|a, b| a.norm().total_cmp(&b.norm()));
            match far {
                Some(e) if e.norm() > 1e-9 * scale => {
                    let e = e.normalize();
                    pts.iter().any(|p| e.cross(&(p - p0)).norm() > 1e-9 * scale)
                }
                _ => false,
            }
        });
        if spans_plane {
            Ok(())
        } else {
            Err(Error::SingularSystem(
                "insufficient constraints: constrained nodes do not span a plane".into(),
            ))
        }
    }

    pub fn is_constrained(&self, n: usize) -> Vec<bool> {
        let mut c = vec![false; n];
        for &f in &self.fixed {
            c[f] = true;
        }
        for &p in self.prescribed.keys() {
            c[p] = true;
        }
        c
    }

    /// Full-length vector holding the prescribed values (zero elsewhere).
    pub fn values(&self, n: usize) -> Vec<Vec3> {
        let mut v = vec![Vec3::zeros(); n];
        for (&p, u) in &self.prescribed {
            v[p] = *u;
        }
        v
    }
}

/// Summary of one FEM solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub model: MaterialModel,
    /// CG iterations (linear) or total inner CG iterations (nonlinear).
    pub iterations: usize,
    pub newton_steps: usize,
    pub load_steps: usize,
    /// Linear: relative residual of the reduced system. Nonlinear: projected
    /// gradient norm (N).
    pub residual: f64,
    pub tolerance: f64,
    /// Total potential energy (J); linear solves report the strain energy.
    pub energy: f64,
    /// Energy after every accepted Newton step, per load step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub energy_history: Vec<Vec<f64>>,
    /// Bulk modulus of the added Mooney-Rivlin volumetric term (Pa).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volumetric_bulk: Option<f64>,
    pub wall_ms: f64,
}

impl SolverReport {
    /// SHA-256 over the deterministic fields (everything but wall time).
    pub fn digest(&self) -> String {
        let mut r = self.clone();
        r.wall_ms = 0.0;
        let bytes = serde_json::to_vec(&r).expect("report serializes");
        hex(&Sha256::digest(&bytes))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A solved displacement field and how it was obtained.
#[derive(Debug, Clone)]
pub struct FemSolution {
    pub field: DisplacementField,
    pub report: SolverReport,
}

/// Shape-function gradients of a tet in its reference configuration.
pub(crate) fn shape_gradients(p: &[Vec3; 4]) -> Result<[Vec3; 4]> {
    let dm = nalgebra::Matrix3::from_columns(&[p[1] - p[0], p[2] - p[0], p[3] - p[0]]);
    let inv = dm
        .try_inverse()
        .ok_or_else(|| Error::SingularSystem("degenerate tet Jacobian".into()))?;
    let g1 = inv.row(0).transpose();
    let g2 = inv.row(1).transpose();
    let g3 = inv.row(2).transpose();
    Ok([-(g1 + g2 + g3), g1, g2, g3])
}

pub(crate) fn tet_points(mesh: &TetMesh, t: &[usize; 4]) -> [Vec3; 4] {
    [mesh.node(t[0]), mesh.node(t[1]), mesh.node(t[2]), mesh.node(t[3])]
}

/// Solves the requested model for the given boundary conditions.
pub fn solve(mesh: &TetMesh, mat: &MaterialParams, bc: &BoundaryConditions) -> Result<FemSolution> {
    match mat.model {
        MaterialModel::Linear => solve_linear(mesh, mat, bc),
        MaterialModel::MooneyRivlin => solve_nonlinear(mesh, mat, bc),
    }
}
