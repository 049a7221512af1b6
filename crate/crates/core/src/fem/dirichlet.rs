use crate::error::{Error, Result};
use crate::field::{DisplacementField, Vec3};

use super::sparse::BlockCsr;
use super::BoundaryConditions;

/// `K u = f` over all nodes.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub k: BlockCsr,
    pub f: Vec<Vec3>,
}

/// System restricted to the unconstrained nodes:
/// `K_ff u_f = f_f − K_fp u_p`.
#[derive(Debug, Clone)]
pub struct ReducedSystem {
    pub k: BlockCsr,
    pub rhs: Vec<Vec3>,
    /// Original index of every free node.
    pub free: Vec<usize>,
    /// Full-length vector of prescribed values (zero at free nodes).
    pub prescribed: Vec<Vec3>,
}

impl ReducedSystem {
    pub fn dofs(&self) -> usize {
        3 * self.free.len()
    }

    /// Embeds a free-node solution back into a full field.
    pub fn reconstruct(&self, u_free: &[Vec3]) -> DisplacementField {
        let mut u = self.prescribed.clone();
        for (i, &node) in self.free.iter().enumerate() {
            u[node] = u_free[i];
        }
        DisplacementField::new(u)
    }
}

/// Eliminates constrained nodes, moving their contribution to the right side.
pub fn apply_dirichlet(system: &LinearSystem, bc: &BoundaryConditions) -> Result<ReducedSystem> {
    let n = system.k.n();
    if system.f.len() != n {
        return Err(Error::Shape(format!(
            "load vector has {} entries for {n} nodes",
            system.f.len()
        )));
    }
    bc.validate(n)?;
    let constrained = bc.is_constrained(n);
    let prescribed = bc.values(n);
    let mut map = vec![None; n];
    let mut free = Vec::new();
    for i in 0..n {
        if !constrained[i] {
            map[i] = Some(free.len());
            free.push(i);
        }
    }
    let kp = system.k.mul_vec(&prescribed);
    let rhs = free.iter().map(|&i| system.f[i] - kp[i]).collect();
    let k = system.k.restrict(&map, free.len());
    Ok(ReducedSystem {
        k,
        rhs,
        free,
        prescribed,
    })
}
