use std::time::Instant;

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::field::Vec3;
use crate::mesh::TetMesh;

use super::dirichlet::{apply_dirichlet, LinearSystem};
use super::sparse::{self, BlockCsr, CgStatus};
use super::{
    shape_gradients, tet_points, BoundaryConditions, Constants, FemSolution, MaterialModel,
    MaterialParams, SolverReport,
};

/// Relative residual target of the reduced linear solve, two orders below
/// the solution accuracy the dense comparison expects.
pub const LINEAR_REL_TOL: f64 = 1e-10;

/// 4×4 grid of 3×3 blocks of the constant-strain tet stiffness.
///
/// Block `(a, b)` is `V [λ g_a g_bᵀ + μ g_b g_aᵀ + μ (g_a·g_b) I]` with `g`
/// the shape-function gradients, from `W = λ/2 tr(ε)² + μ ε:ε`.
pub fn element_stiffness(p: &[Vec3; 4], c: &Constants) -> Result<[[Matrix3<f64>; 4]; 4]> {
    let g = shape_gradients(p)?;
    let vol = (p[1] - p[0]).cross(&(p[2] - p[0])).dot(&(p[3] - p[0])).abs() / 6.0;
    let lambda = c.lame_lambda();
    let mu = c.mu;
    let mut k = [[Matrix3::zeros(); 4]; 4];
    for a in 0..4 {
        for b in 0..4 {
            let gab = g[a].dot(&g[b]);
            k[a][b] = (g[a] * g[b].transpose() * lambda
                + g[b] * g[a].transpose() * mu
                + Matrix3::identity() * (mu * gab))
                * vol;
        }
    }
    Ok(k)
}

/// Assembles the small-strain stiffness and the gravity load.
pub fn assemble_linear_system(mesh: &TetMesh, mat: &MaterialParams) -> Result<LinearSystem> {
    if mat.model != MaterialModel::Linear {
        return Err(Error::InvalidParam("linear assembly needs the linear model".into()));
    }
    mat.validate()?;
    let n = mesh.node_count();
    let mut k = BlockCsr::from_tets(n, mesh.tets());
    let mut f = vec![Vec3::zeros(); n];
    let body = mat.gravity_vec() * mat.rho;
    let constants = mat.per_tet(mesh);
    for (ti, t) in mesh.tets().iter().enumerate() {
        let ke = element_stiffness(&tet_points(mesh, t), &constants[ti])?;
        for a in 0..4 {
            for b in 0..4 {
                k.add_block(t[a], t[b], &ke[a][b]);
            }
            f[t[a]] += body * (mesh.tet_volumes()[ti] / 4.0);
        }
    }
    Ok(LinearSystem { k, f })
}

/// Solves `K u = f` with the given Dirichlet data.
pub fn solve_linear(mesh: &TetMesh, mat: &MaterialParams, bc: &BoundaryConditions) -> Result<FemSolution> {
    let start = Instant::now();
    let system = assemble_linear_system(mesh, mat)?;
    bc.validate(mesh.node_count())?;
    bc.check_rigid_modes(mesh)?;
    let reduced = apply_dirichlet(&system, bc)?;
    let nf = reduced.free.len();
    let mut u_free = vec![Vec3::zeros(); nf];
    let max_iter = 20 * reduced.dofs().max(1);
    let out = sparse::cg(&reduced.k, &reduced.rhs, &mut u_free, LINEAR_REL_TOL, max_iter);
    match out.status {
        CgStatus::Converged => {}
        CgStatus::NegativeCurvature => {
            return Err(Error::SingularSystem(
                "reduced stiffness is not positive definite (insufficient constraints)".into(),
            ))
        }
        CgStatus::MaxIterations => {
            return Err(Error::NoConvergence(format!(
                "CG stopped after {} iterations at relative residual {:e}",
                out.iterations, out.rel_residual
            )))
        }
    }
    let field = reduced.reconstruct(&u_free);
    let ku = system.k.mul_vec(&field.u);
    let energy = 0.5 * sparse::dot(&field.u, &ku) - sparse::dot(&system.f, &field.u);
    Ok(FemSolution {
        field,
        report: SolverReport {
            model: MaterialModel::Linear,
            iterations: out.iterations,
            newton_steps: 0,
            load_steps: 1,
            residual: out.rel_residual,
            tolerance: LINEAR_REL_TOL,
            energy,
            energy_history: Vec::new(),
            volumetric_bulk: None,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        },
    })
}
