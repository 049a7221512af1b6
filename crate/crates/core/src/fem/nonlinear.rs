//! Newton solver for the Mooney-Rivlin body.
//!
//! Loading happens in two stages. Gravity is applied first with only the
//! clamped nodes held, which gives the preloaded state. The grasp nodes are
//! then moved linearly from their preloaded position to their prescribed
//! displacement in up to [`MAX_INCREMENTS`] increments. Every increment starts
//! with a linearized predictor for the free nodes and then runs Newton
//! iterations with backtracking on the total potential energy.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::field::{DisplacementField, Vec3};
use crate::mesh::TetMesh;

use super::hyper::HyperModel;
use super::sparse::{self, BlockCsr, CgStatus};
use super::{BoundaryConditions, FemSolution, MaterialModel, MaterialParams, SolverReport};

pub const MAX_NEWTON_STEPS: usize = 200;
pub const MAX_INCREMENTS: usize = 10;
const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;
const INNER_REL_TOL: f64 = 1e-10;

struct Newton<'a> {
    model: &'a HyperModel,
    /// Constrained flag per node for the current stage.
    constrained: Vec<bool>,
    free_map: Vec<Option<usize>>,
    free: Vec<usize>,
    hess: BlockCsr,
    tol: f64,
    steps: usize,
    cg_iterations: usize,
}

enum StepOutcome {
    Converged,
    Failed(Error),
}

impl<'a> Newton<'a> {
    fn new(model: &'a HyperModel, tol: f64) -> Self {
        let n = model.node_count();
        Self {
            model,
            constrained: vec![false; n],
            free_map: vec![None; n],
            free: Vec::new(),
            hess: BlockCsr::from_tets(n, model.tets()),
            tol,
            steps: 0,
            cg_iterations: 0,
        }
    }

    fn set_constrained(&mut self, constrained: Vec<bool>) {
        self.free.clear();
        for (i, c) in constrained.iter().enumerate() {
            self.free_map[i] = if *c {
                None
            } else {
                self.free.push(i);
                Some(self.free.len() - 1)
            };
        }
        self.constrained = constrained;
    }

    fn project(&self, g: &[Vec3]) -> Vec<Vec3> {
        self.free.iter().map(|&i| g[i]).collect()
    }

    /// Solves `H_ff d = rhs` and falls back to `rhs` itself (a steepest
    /// descent direction for `rhs = −g`) when `H_ff` is not positive definite.
    fn solve_free(&mut self, rhs: &[Vec3]) -> Vec<Vec3> {
        let h_ff = self.hess.restrict(&self.free_map, self.free.len());
        let mut d = vec![Vec3::zeros(); self.free.len()];
        let max_iter = 20 * 3 * self.free.len().max(1);
        let out = sparse::cg(&h_ff, rhs, &mut d, INNER_REL_TOL, max_iter);
        self.cg_iterations += out.iterations;
        match out.status {
            CgStatus::NegativeCurvature if out.iterations == 0 => rhs.to_vec(),
            _ => d,
        }
    }

    /// Linearized predictor: free-node response to moving the constrained
    /// nodes by `delta`.
    fn predictor(&mut self, u: &[Vec3], delta: &[Vec3], load: f64) -> Result<Vec<Vec3>> {
        self.model.hessian_into(u, &mut self.hess)?;
        let g = self.model.gradient(u, load)?;
        let h_delta = self.hess.mul_vec(delta);
        let rhs: Vec<Vec3> = self.free.iter().map(|&i| -(g[i] + h_delta[i])).collect();
        let d = self.solve_free(&rhs);
        let mut next: Vec<Vec3> = u.iter().zip(delta).map(|(a, b)| a + b).collect();
        for (k, &i) in self.free.iter().enumerate() {
            next[i] += d[k];
        }
        Ok(next)
    }

    /// Newton iterations with the constrained nodes held at their current
    /// values. Appends accepted energies to `history`.
    fn run(&mut self, u: &mut [Vec3], load: f64, history: &mut Vec<f64>) -> StepOutcome {
        let mut energy = match self.model.energy(u, load) {
            Ok(e) => e,
            Err(e) => return StepOutcome::Failed(e),
        };
        loop {
            let g = match self.model.gradient(u, load) {
                Ok(g) => g,
                Err(e) => return StepOutcome::Failed(e),
            };
            let gf = self.project(&g);
            let gnorm = sparse::norm(&gf);
            if gnorm <= self.tol {
                return StepOutcome::Converged;
            }
            if self.steps >= MAX_NEWTON_STEPS {
                return StepOutcome::Failed(Error::NoConvergence(format!(
                    "{MAX_NEWTON_STEPS} Newton steps reached, gradient norm {gnorm:e} > {:e}",
                    self.tol
                )));
            }
            if let Err(e) = self.model.hessian_into(u, &mut self.hess) {
                return StepOutcome::Failed(e);
            }
            let neg: Vec<Vec3> = gf.iter().map(|v| -v).collect();
            let mut d = self.solve_free(&neg);
            let mut slope = sparse::dot(&gf, &d);
            if !(slope < 0.0) {
                d = neg;
                slope = -gnorm * gnorm;
            }
            self.steps += 1;
            let mut alpha = 1.0;
            let mut accepted = false;
            let mut trial = u.to_vec();
            for _ in 0..MAX_BACKTRACKS {
                for (k, &i) in self.free.iter().enumerate() {
                    trial[i] = u[i] + d[k] * alpha;
                }
                if let Ok(e) = self.model.energy(&trial, load) {
                    if e <= energy + ARMIJO * alpha * slope {
                        u.copy_from_slice(&trial);
                        energy = e;
                        history.push(e);
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                // Energy differences below round-off: the iterate is as good
                // as double precision allows.
                if (alpha * slope).abs() <= 1e-14 * energy.abs().max(f64::MIN_POSITIVE) {
                    return StepOutcome::Converged;
                }
                return StepOutcome::Failed(Error::NoConvergence(format!(
                    "line search failed at gradient norm {gnorm:e}"
                )));
            }
        }
    }
}

/// Minimizes the total potential energy subject to `bc`.
pub fn solve_nonlinear(mesh: &TetMesh, mat: &MaterialParams, bc: &BoundaryConditions) -> Result<FemSolution> {
    if mat.model != MaterialModel::MooneyRivlin {
        return Err(Error::InvalidParam("nonlinear solve needs the Mooney-Rivlin model".into()));
    }
    let start = Instant::now();
    let n = mesh.node_count();
    bc.validate(n)?;
    bc.check_rigid_modes(mesh)?;
    let model = HyperModel::new(mesh, mat)?;
    let tol = 1e-6 * (mat.rho * mat.gravity_vec().norm() * mesh.total_volume() + 1.0);
    let mut newton = Newton::new(&model, tol);
    let mut history: Vec<Vec<f64>> = Vec::new();
    let mut u = vec![Vec3::zeros(); n];
    let mut load_steps = 0;

    // Stage 1: gravity preload, grasp nodes free.
    let mut clamped = vec![false; n];
    for &f in &bc.fixed {
        clamped[f] = true;
    }
    let has_gravity = mat.rho > 0.0 && mat.gravity_vec().norm() > 0.0;
    if has_gravity {
        newton.set_constrained(clamped.clone());
        let mut ramp = 1;
        loop {
            let mut trial = vec![Vec3::zeros(); n];
            let mut stage_hist = Vec::new();
            let mut failed = None;
            for k in 1..=ramp {
                let load = k as f64 / ramp as f64;
                let mut h = Vec::new();
                match newton.run(&mut trial, load, &mut h) {
                    StepOutcome::Converged => {}
                    StepOutcome::Failed(e) => {
                        failed = Some(e);
                        break;
                    }
                }
                stage_hist.push(h);
            }
            match failed {
                None => {
                    u = trial;
                    load_steps += ramp;
                    history.extend(stage_hist);
                    break;
                }
                Some(e) if ramp >= MAX_INCREMENTS || newton.steps >= MAX_NEWTON_STEPS => return Err(e),
                Some(_) => ramp = (ramp * 2).min(MAX_INCREMENTS),
            }
        }
    }
    let load = if has_gravity { 1.0 } else { 0.0 };

    // Stage 2: move grasp nodes to their targets.
    if !bc.prescribed.is_empty() {
        newton.set_constrained(bc.is_constrained(n));
        let preload = u.clone();
        let max_move = bc
            .prescribed
            .iter()
            .map(|(&i, v)| (v - preload[i]).norm())
            .fold(0.0, f64::max);
        let h = mesh.mean_edge_length();
        let mut increments = ((max_move / (0.5 * h)).ceil() as usize).clamp(1, MAX_INCREMENTS);
        loop {
            let mut state = preload.clone();
            let mut stage_hist = Vec::new();
            let mut failed = None;
            for k in 1..=increments {
                let t = k as f64 / increments as f64;
                let mut delta = vec![Vec3::zeros(); n];
                for (&i, target) in &bc.prescribed {
                    delta[i] = preload[i] + (target - preload[i]) * t - state[i];
                }
                let mut next = match newton.predictor(&state, &delta, load) {
                    Ok(p) => p,
                    Err(e) => {
                        failed = Some(e);
                        break;
                    }
                };
                if model.energy(&next, load).is_err() {
                    // Predictor inverted an element: move only the grasp nodes.
                    next = state.iter().zip(&delta).map(|(a, b)| a + b).collect();
                }
                let mut h = Vec::new();
                match newton.run(&mut next, load, &mut h) {
                    StepOutcome::Converged => {
                        state = next;
                        stage_hist.push(h);
                    }
                    StepOutcome::Failed(e) => {
                        failed = Some(e);
                        break;
                    }
                }
            }
            match failed {
                None => {
                    u = state;
                    load_steps += increments;
                    history.extend(stage_hist);
                    break;
                }
                Some(e) if increments >= MAX_INCREMENTS || newton.steps >= MAX_NEWTON_STEPS => {
                    return Err(e)
                }
                Some(_) => increments = (increments * 2).min(MAX_INCREMENTS),
            }
        }
        // Exact Dirichlet values (the ramp reaches t = 1 up to round-off).
        for (&i, v) in &bc.prescribed {
            u[i] = *v;
        }
    }

    let g = model.gradient(&u, load)?;
    let constrained = bc.is_constrained(n);
    let gnorm = g
        .iter()
        .zip(&constrained)
        .filter(|(_, c)| !**c)
        .map(|(v, _)| v.norm_squared())
        .sum::<f64>()
        .sqrt();
    if gnorm > tol {
        return Err(Error::NoConvergence(format!(
            "final gradient norm {gnorm:e} above tolerance {tol:e}"
        )));
    }
    let final_energy = model.energy(&u, load)?;
    Ok(FemSolution {
        field: DisplacementField::new(u),
        report: SolverReport {
            model: MaterialModel::MooneyRivlin,
            iterations: newton.cg_iterations,
            newton_steps: newton.steps,
            load_steps,
            residual: gnorm,
            tolerance: tol,
            energy: final_energy,
            energy_history: history,
            volumetric_bulk: Some(mat.constants.mr_bulk()),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        },
    })
}
