//! Block CSR matrices with 3×3 node blocks and a Jacobi-preconditioned CG.

use nalgebra::{DMatrix, Matrix3};

use crate::field::Vec3;

/// Symmetric-pattern sparse matrix over nodes, one dense 3×3 block per
/// nonzero node pair. Column indices within a row are sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCsr {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    blocks: Vec<Matrix3<f64>>,
}

impl BlockCsr {
    /// Zero matrix with the node-adjacency pattern of `tets` (diagonal included).
    pub fn from_tets(n: usize, tets: &[[usize; 4]]) -> Self {
        let mut adj: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for t in tets {
            for &a in t {
                for &b in t {
                    adj[a].push(b);
                }
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for row in &mut adj {
            row.sort_unstable();
            row.dedup();
            cols.extend_from_slice(row);
            row_ptr.push(cols.len());
        }
        let nnz = cols.len();
        Self {
            n,
            row_ptr,
            cols,
            blocks: vec![Matrix3::zeros(); nnz],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz_blocks(&self) -> usize {
        self.cols.len()
    }

    pub fn clear(&mut self) {
        self.blocks.iter_mut().for_each(|b| *b = Matrix3::zeros());
    }

    fn find(&self, r: usize, c: usize) -> Option<usize> {
        let row = &self.cols[self.row_ptr[r]..self.row_ptr[r + 1]];
        row.binary_search(&c).ok().map(|k| self.row_ptr[r] + k)
    }

    /// Adds `block` at node pair `(r, c)`. Panics if the pair is outside the pattern.
    pub fn add_block(&mut self, r: usize, c: usize, block: &Matrix3<f64>) {
        let k = self
            .find(r, c)
            .unwrap_or_else(|| panic!("block ({r}, {c}) outside sparsity pattern"));
        self.blocks[k] += block;
    }

    pub fn block(&self, r: usize, c: usize) -> Matrix3<f64> {
        self.find(r, c).map(|k| self.blocks[k]).unwrap_or_else(Matrix3::zeros)
    }

    pub fn mul_vec_into(&self, x: &[Vec3], y: &mut [Vec3]) {
        for r in 0..self.n {
            let mut acc = Vec3::zeros();
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.blocks[k] * x[self.cols[k]];
            }
            y[r] = acc;
        }
    }

    pub fn mul_vec(&self, x: &[Vec3]) -> Vec<Vec3> {
        let mut y = vec![Vec3::zeros(); self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    /// Scalar diagonal.
    pub fn diagonal(&self) -> Vec<Vec3> {
        (0..self.n)
            .map(|r| {
                let b = self.block(r, r);
                Vec3::new(b[(0, 0)], b[(1, 1)], b[(2, 2)])
            })
            .collect()
    }

    /// Rows and columns of the nodes with `map[node] = Some(new_index)`.
    pub fn restrict(&self, map: &[Option<usize>], n_new: usize) -> BlockCsr {
        let mut row_ptr = Vec::with_capacity(n_new + 1);
        let mut cols = Vec::new();
        let mut blocks = Vec::new();
        let mut rows: Vec<Option<usize>> = vec![None; n_new];
        for (old, m) in map.iter().enumerate() {
            if let Some(new) = m {
                rows[*new] = Some(old);
            }
        }
        row_ptr.push(0);
        for old in rows {
            let old = old.expect("restriction map must be onto 0..n_new");
            let mut entries: Vec<(usize, Matrix3<f64>)> = (self.row_ptr[old]..self.row_ptr[old + 1])
                .filter_map(|k| map[self.cols[k]].map(|c| (c, self.blocks[k])))
                .collect();
            entries.sort_by_key(|e| e.0);
            for (c, b) in entries {
                cols.push(c);
                blocks.push(b);
            }
            row_ptr.push(cols.len());
        }
        BlockCsr {
            n: n_new,
            row_ptr,
            cols,
            blocks,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(3 * self.n, 3 * self.n);
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.cols[k];
                for i in 0..3 {
                    for j in 0..3 {
                        d[(3 * r + i, 3 * c + j)] = self.blocks[k][(i, j)];
                    }
                }
            }
        }
        d
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.iter().map(|v| v.abs()))
            .fold(0.0, f64::max)
    }
}

pub(crate) fn dot(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

pub(crate) fn norm(a: &[Vec3]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgStatus {
    Converged,
    /// A search direction with `pᵀAp ≤ 0` was met; `x` holds the last iterate.
    NegativeCurvature,
    MaxIterations,
}

#[derive(Debug, Clone, Copy)]
pub struct CgOutcome {
    pub status: CgStatus,
    pub iterations: usize,
    /// `|b − A x| / |b|`
    pub rel_residual: f64,
}

/// Jacobi-preconditioned conjugate gradient for `A x = b`, starting from `x`.
pub fn cg(a: &BlockCsr, b: &[Vec3], x: &mut [Vec3], rel_tol: f64, max_iter: usize) -> CgOutcome {
    let n = a.n();
    let b_norm = norm(b);
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = Vec3::zeros());
        return CgOutcome {
            status: CgStatus::Converged,
            iterations: 0,
            rel_residual: 0.0,
        };
    }
    let inv_diag: Vec<Vec3> = a
        .diagonal()
        .iter()
        .map(|d| d.map(|v| if v > 0.0 { 1.0 / v } else { 1.0 }))
        .collect();
    let mut ax = vec![Vec3::zeros(); n];
    a.mul_vec_into(x, &mut ax);
    let mut r: Vec<Vec3> = b.iter().zip(&ax).map(|(b, ax)| b - ax).collect();
    let mut z: Vec<Vec3> = r.iter().zip(&inv_diag).map(|(r, d)| r.component_mul(d)).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![Vec3::zeros(); n];
    let mut rel = norm(&r) / b_norm;
    let mut it = 0;
    while rel > rel_tol {
        if it >= max_iter {
            return CgOutcome {
                status: CgStatus::MaxIterations,
                iterations: it,
                rel_residual: rel,
            };
        }
        a.mul_vec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return CgOutcome {
                status: CgStatus::NegativeCurvature,
                iterations: it,
                rel_residual: rel,
            };
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += p[i] * alpha;
            r[i] -= ap[i] * alpha;
            z[i] = r[i].component_mul(&inv_diag[i]);
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + p[i] * beta;
        }
        rel = norm(&r) / b_norm;
        it += 1;
    }
    CgOutcome {
        status: CgStatus::Converged,
        iterations: it,
        rel_residual: rel,
    }
}
