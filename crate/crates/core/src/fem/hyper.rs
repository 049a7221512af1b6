//! Compressible Mooney-Rivlin solid on constant-strain tets.
//!
//! Strain energy density, with `C = FᵀF`, `J = det F`, `I₃ = J²`:
//!
//! ```text
//! W = C01 (I₁ I₃^(-1/3) − 3) + C10 (I₂ I₃^(-2/3) − 3) + κ/2 (J − 1)²
//! ```
//!
//! The total potential adds the gravity work `−Σ ρ V g·ū` with `ū` the
//! tet-average displacement.

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::field::{DisplacementField, Vec3};
use crate::mesh::TetMesh;

use super::sparse::BlockCsr;
use super::{shape_gradients, tet_points, MaterialParams};

/// Constants entering the energy density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MrConstants {
    pub c10: f64,
    pub c01: f64,
    /// Bulk modulus of the volumetric penalty.
    pub kappa: f64,
}

impl MrConstants {
    /// Small-strain shear modulus `2 (C10 + C01)`.
    pub fn shear_modulus(&self) -> f64 {
        2.0 * (self.c10 + self.c01)
    }
}

/// Energy density at deformation gradient `f`, or `None` if `det F ≤ 0`.
pub fn energy_density(f: &Matrix3<f64>, c: &MrConstants) -> Option<f64> {
    let j = f.determinant();
    if !(j > 0.0) {
        return None;
    }
    let cg = f.transpose() * f;
    let i1 = cg.trace();
    let i2 = 0.5 * (i1 * i1 - cg.component_mul(&cg).sum());
    let j23 = j.powf(-2.0 / 3.0);
    let j43 = j23 * j23;
    Some(c.c01 * (i1 * j23 - 3.0) + c.c10 * (i2 * j43 - 3.0) + 0.5 * c.kappa * (j - 1.0).powi(2))
}

/// First Piola-Kirchhoff stress `∂W/∂F`. Requires `det F > 0`.
pub fn stress(f: &Matrix3<f64>, c: &MrConstants) -> Matrix3<f64> {
    let j = f.determinant();
    let finv_t = f.try_inverse().expect("det F > 0").transpose();
    let cg = f.transpose() * f;
    let i1 = cg.trace();
    let i2 = 0.5 * (i1 * i1 - cg.component_mul(&cg).sum());
    let j23 = j.powf(-2.0 / 3.0);
    let j43 = j23 * j23;
    let p_a = (f * 2.0 - finv_t * (2.0 * i1 / 3.0)) * j23;
    let p_b = ((f * i1 - f * cg) * 2.0 - finv_t * (4.0 * i2 / 3.0)) * j43;
    let p_v = finv_t * (c.kappa * (j - 1.0) * j);
    p_a * c.c01 + p_b * c.c10 + p_v
}

/// Directional derivative of [`stress`] along `df`.
pub fn stress_differential(f: &Matrix3<f64>, df: &Matrix3<f64>, c: &MrConstants) -> Matrix3<f64> {
    let j = f.determinant();
    let finv = f.try_inverse().expect("det F > 0");
    let finv_t = finv.transpose();
    let cg = f.transpose() * f;
    let i1 = cg.trace();
    let i2 = 0.5 * (i1 * i1 - cg.component_mul(&cg).sum());
    let j23 = j.powf(-2.0 / 3.0);
    let j43 = j23 * j23;

    let tr = (finv * df).trace();
    let dj = j * tr;
    let dj23 = -2.0 / 3.0 * j23 * tr;
    let dj43 = -4.0 / 3.0 * j43 * tr;
    let di1 = 2.0 * f.dot(df);
    let d_i2_df = (f * i1 - f * cg) * 2.0;
    let di2 = d_i2_df.dot(df);
    let dc = df.transpose() * f + f.transpose() * df;
    let dfinv_t = -(finv_t * df.transpose() * finv_t);

    let a = (f * 2.0 - finv_t * (2.0 * i1 / 3.0)) * dj23
        + (df * 2.0 - finv_t * (2.0 * di1 / 3.0) - dfinv_t * (2.0 * i1 / 3.0)) * j23;
    let b = (d_i2_df - finv_t * (4.0 * i2 / 3.0)) * dj43
        + ((f * di1 + df * i1 - df * cg - f * dc) * 2.0
            - finv_t * (4.0 * di2 / 3.0)
            - dfinv_t * (4.0 * i2 / 3.0))
            * j43;
    let v = finv_t * (c.kappa * (2.0 * j - 1.0) * dj) + dfinv_t * (c.kappa * (j * j - j));
    a * c.c01 + b * c.c10 + v
}

/// Per-tet reference data and constants, built once per mesh and material.
#[derive(Debug, Clone)]
pub struct HyperModel {
    grads: Vec<[Vec3; 4]>,
    volumes: Vec<f64>,
    constants: Vec<MrConstants>,
    tets: Vec<[usize; 4]>,
    n: usize,
    body: Vec3,
}

impl HyperModel {
    pub fn new(mesh: &TetMesh, mat: &MaterialParams) -> Result<Self> {
        mat.validate()?;
        let grads = mesh
            .tets()
            .iter()
            .map(|t| shape_gradients(&tet_points(mesh, t)))
            .collect::<Result<Vec<_>>>()?;
        let constants = mat
            .per_tet(mesh)
            .iter()
            .map(|c| MrConstants {
                c10: c.c10,
                c01: c.c01,
                kappa: c.mr_bulk(),
            })
            .collect();
        Ok(Self {
            grads,
            volumes: mesh.tet_volumes().to_vec(),
            constants,
            tets: mesh.tets().to_vec(),
            n: mesh.node_count(),
            body: mat.gravity_vec() * mat.rho,
        })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Body force density `ρ g` (N/m³).
    pub fn body_force(&self) -> Vec3 {
        self.body
    }

    fn deformation_gradient(&self, t: usize, u: &[Vec3]) -> Matrix3<f64> {
        let mut f = Matrix3::identity();
        for (a, &node) in self.tets[t].iter().enumerate() {
            f += u[node] * self.grads[t][a].transpose();
        }
        f
    }

    fn check_len(&self, u: &[Vec3]) -> Result<()> {
        if u.len() != self.n {
            return Err(Error::Shape(format!(
                "field has {} nodes, mesh has {}",
                u.len(),
                self.n
            )));
        }
        Ok(())
    }

    /// Total potential energy with gravity scaled by `load`.
    pub fn energy(&self, u: &[Vec3], load: f64) -> Result<f64> {
        self.check_len(u)?;
        let mut total = 0.0;
        for t in 0..self.tets.len() {
            let f = self.deformation_gradient(t, u);
            let w = energy_density(&f, &self.constants[t]).ok_or(Error::InvertedElement {
                tet: t,
                det: f.determinant(),
            })?;
            let ubar = self.tets[t].iter().map(|&v| u[v]).sum::<Vec3>() / 4.0;
            total += self.volumes[t] * (w - load * self.body.dot(&ubar));
        }
        Ok(total)
    }

    /// Gradient of [`energy`](Self::energy) with respect to node displacements.
    pub fn gradient(&self, u: &[Vec3], load: f64) -> Result<Vec<Vec3>> {
        self.check_len(u)?;
        let mut g = vec![Vec3::zeros(); self.n];
        for t in 0..self.tets.len() {
            let f = self.deformation_gradient(t, u);
            let det = f.determinant();
            if !(det > 0.0) {
                return Err(Error::InvertedElement { tet: t, det });
            }
            let p = stress(&f, &self.constants[t]) * self.volumes[t];
            let grav = self.body * (load * self.volumes[t] / 4.0);
            for (a, &node) in self.tets[t].iter().enumerate() {
                g[node] += p * self.grads[t][a] - grav;
            }
        }
        Ok(g)
    }

    /// Exact Hessian of the strain energy (gravity is linear in `u`).
    pub fn hessian_into(&self, u: &[Vec3], h: &mut BlockCsr) -> Result<()> {
        self.check_len(u)?;
        h.clear();
        for t in 0..self.tets.len() {
            let f = self.deformation_gradient(t, u);
            let det = f.determinant();
            if !(det > 0.0) {
                return Err(Error::InvertedElement { tet: t, det });
            }
            let g = &self.grads[t];
            let vol = self.volumes[t];
            let mut blocks = [[Matrix3::zeros(); 4]; 4];
            for b in 0..4 {
                for j in 0..3 {
                    // dF for a unit displacement of node b along axis j.
                    let mut df = Matrix3::zeros();
                    df.set_row(j, &g[b].transpose());
                    let dp = stress_differential(&f, &df, &self.constants[t]) * vol;
                    for a in 0..4 {
                        let col = dp * g[a];
                        blocks[a][b].set_column(j, &col);
                    }
                }
            }
            for a in 0..4 {
                for b in 0..4 {
                    h.add_block(self.tets[t][a], self.tets[t][b], &blocks[a][b]);
                }
            }
        }
        Ok(())
    }

    pub fn hessian(&self, u: &[Vec3]) -> Result<BlockCsr> {
        let mut h = BlockCsr::from_tets(self.n, &self.tets);
        self.hessian_into(u, &mut h)?;
        Ok(h)
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }
}

/// Total potential energy (J) of the Mooney-Rivlin body with gravity.
pub fn mooney_rivlin_energy(mesh: &TetMesh, mat: &MaterialParams, u: &DisplacementField) -> Result<f64> {
    HyperModel::new(mesh, mat)?.energy(&u.u, 1.0)
}

/// Gradient of [`mooney_rivlin_energy`], one 3-vector per node (N).
pub fn energy_gradient(mesh: &TetMesh, mat: &MaterialParams, u: &DisplacementField) -> Result<Vec<Vec3>> {
    HyperModel::new(mesh, mat)?.gradient(&u.u, 1.0)
}

/// Hessian of [`mooney_rivlin_energy`].
pub fn energy_hessian(mesh: &TetMesh, mat: &MaterialParams, u: &DisplacementField) -> Result<BlockCsr> {
    HyperModel::new(mesh, mat)?.hessian(&u.u)
}

#[cfg(test)]
mod tests {
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::mesh::synth;

    fn mat(gravity: bool) -> MaterialParams {
        let mut m = MaterialParams::mooney_rivlin_liver();
        if !gravity {
            m.gravity = [0.0; 3];
        }
        m
    }

    fn unit_tet() -> TetMesh {
        TetMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(0.0, 0.0, 1.0),
            ],
            vec![[0, 1, 2, 3]],
            &Default::default(),
        )
        .unwrap()
    }

    fn random_field(n: usize, scale: f64, seed: u64) -> DisplacementField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DisplacementField::new(
            (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-scale..scale),
                        rng.random_range(-scale..scale),
                        rng.random_range(-scale..scale),
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn identity_has_zero_energy_and_gradient() {
        let mesh = synth::box_grid([2, 2, 2], [0.1, 0.1, 0.1]);
        let u = DisplacementField::zeros(mesh.node_count());
        assert_eq!(mooney_rivlin_energy(&mesh, &mat(false), &u).unwrap(), 0.0);
        let g = energy_gradient(&mesh, &mat(false), &u).unwrap();
        assert!(g.iter().all(|v| *v == Vec3::zeros()));
    }

    #[test]
    fn rigid_rotation_has_zero_energy() {
        let mesh = synth::box_grid([2, 2, 2], [0.1, 0.1, 0.1]);
        let r = Rotation3::from_euler_angles(0.4, -1.2, 0.9);
        let u = DisplacementField::new(mesh.nodes().iter().map(|x| r * x - x).collect());
        let m = mat(false);
        let e = mooney_rivlin_energy(&mesh, &m, &u).unwrap();
        let scale = (m.constants.c10 + m.constants.c01) * mesh.total_volume();
        assert!(e.abs() <= 1e-9 * scale, "{e:e}");
    }

    #[test]
    fn incompressible_uniaxial_stretch() {
        let mesh = unit_tet();
        let s = 1.1f64;
        let f = Matrix3::from_diagonal(&Vec3::new(s, 1.0 / s.sqrt(), 1.0 / s.sqrt()));
        let u = DisplacementField::new(mesh.nodes().iter().map(|x| f * x - x).collect());
        let e = mooney_rivlin_energy(&mesh, &mat(false), &u).unwrap();
        // Independent high-precision evaluation: W = C01 (I1 − 3) + C10 (I2 − 3), V = 1/6.
        let want = 16.393_526_170_798_898;
        assert!((e - want).abs() <= 1e-9 * want, "{e} vs {want}");
    }

    #[test]
    fn gravity_gradient_at_rest() {
        let mesh = synth::box_grid([2, 1, 1], [0.2, 0.1, 0.1]);
        let m = mat(true);
        let g = energy_gradient(&mesh, &m, &DisplacementField::zeros(mesh.node_count())).unwrap();
        let mut want = vec![Vec3::zeros(); mesh.node_count()];
        for (t, v) in mesh.tets().iter().zip(mesh.tet_volumes()) {
            for &a in t {
                want[a] -= m.gravity_vec() * (m.rho * v / 4.0);
            }
        }
        for (a, b) in g.iter().zip(&want) {
            assert!((a - b).norm() <= 1e-12 * b.norm().max(1e-12));
        }
    }

    #[test]
    fn inverted_element_reported() {
        let mesh = unit_tet();
        let mut u = DisplacementField::zeros(4);
        u.u[3] = Vec3::new(0.0, 0.0, -2.0);
        let err = mooney_rivlin_energy(&mesh, &mat(false), &u).unwrap_err();
        assert!(matches!(err, Error::InvertedElement { tet: 0, .. }));
    }

    fn fd_gradient_check(mesh: &TetMesh, m: &MaterialParams, u: &DisplacementField) {
        let model = HyperModel::new(mesh, m).unwrap();
        let g = model.gradient(&u.u, 1.0).unwrap();
        let h = 1e-6;
        let gmax = g.iter().map(|v| v.amax()).fold(0.0, f64::max);
        for node in 0..mesh.node_count() {
            for k in 0..3 {
                let mut up = u.u.clone();
                let mut dn = u.u.clone();
                up[node][k] += h;
                dn[node][k] -= h;
                let fd = (model.energy(&up, 1.0).unwrap() - model.energy(&dn, 1.0).unwrap()) / (2.0 * h);
                let err = (fd - g[node][k]).abs() / g[node][k].abs().max(1e-2 * gmax);
                assert!(err <= 1e-4, "node {node} axis {k}: fd {fd:e} vs {:e}", g[node][k]);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_single_tet() {
        let mesh = unit_tet();
        for seed in 0..5 {
            fd_gradient_check(&mesh, &mat(true), &random_field(4, 0.05, seed));
        }
    }

    #[test]
    fn gradient_matches_finite_differences_small_mesh() {
        let mesh = synth::box_grid([3, 2, 2], [0.06, 0.04, 0.04]);
        assert!(mesh.node_count() <= 50);
        for seed in 10..13 {
            fd_gradient_check(&mesh, &mat(true), &random_field(mesh.node_count(), 0.003, seed));
        }
    }

    #[test]
    fn hessian_matches_gradient_differences() {
        let mesh = synth::box_grid([2, 1, 1], [0.04, 0.02, 0.02]);
        let m = mat(true);
        let model = HyperModel::new(&mesh, &m).unwrap();
        let u = random_field(mesh.node_count(), 0.002, 3);
        let hess = model.hessian(&u.u).unwrap().to_dense();
        let h = 1e-7;
        let n = mesh.node_count();
        let scale = hess.amax();
        for node in 0..n {
            for k in 0..3 {
                let mut up = u.u.clone();
                let mut dn = u.u.clone();
                up[node][k] += h;
                dn[node][k] -= h;
                let gp = model.gradient(&up, 1.0).unwrap();
                let gm = model.gradient(&dn, 1.0).unwrap();
                for row in 0..n {
                    for i in 0..3 {
                        let fd = (gp[row][i] - gm[row][i]) / (2.0 * h);
                        let an = hess[(3 * row + i, 3 * node + k)];
                        assert!((fd - an).abs() <= 1e-5 * scale, "H[{row},{i}][{node},{k}]");
                    }
                }
            }
        }
        assert!((&hess - hess.transpose()).amax() <= 1e-9 * scale);
    }

    #[test]
    fn energy_is_frame_invariant() {
        let mesh = synth::box_grid([2, 2, 1], [0.05, 0.05, 0.03]);
        let m = mat(false);
        let u = random_field(mesh.node_count(), 0.003, 9);
        let r = Rotation3::from_euler_angles(-0.3, 0.8, 2.0);
        let t = Vec3::new(0.1, -0.2, 0.05);
        // x + u → R (x + u) + t
        let moved = DisplacementField::new(
            mesh.nodes()
                .iter()
                .zip(&u.u)
                .map(|(x, ui)| r * (x + ui) + t - x)
                .collect(),
        );
        let e0 = mooney_rivlin_energy(&mesh, &m, &u).unwrap();
        let e1 = mooney_rivlin_energy(&mesh, &m, &moved).unwrap();
        assert!((e0 - e1).abs() <= 1e-8 * e0.abs(), "{e0:e} vs {e1:e}");
    }

    #[test]
    fn small_strain_tangent_matches_linear_stiffness() {
        use crate::fem::{assemble_linear_system, Constants, MaterialModel};
        let mesh = synth::box_grid([2, 1, 1], [0.04, 0.02, 0.02]);
        let m = mat(false);
        let h0 = energy_hessian(&mesh, &m, &DisplacementField::zeros(mesh.node_count()))
            .unwrap()
            .to_dense();
        let lin = MaterialParams {
            model: MaterialModel::Linear,
            constants: Constants {
                mu: 2.0 * (m.constants.c10 + m.constants.c01),
                nu: m.constants.mr_equivalent_nu(),
                ..m.constants
            },
            ..m.clone()
        };
        let k = assemble_linear_system(&mesh, &lin).unwrap().k.to_dense();
        assert!((&h0 - &k).amax() <= 1e-9 * k.amax());
    }
}
