//! Shared fixtures for the backend benchmarks.

use softgrasp::kelvinlet::Grasp;
use softgrasp::mesh::synth::{self, OrganShape};
use softgrasp::mesh::Region;
use softgrasp::{TetMesh, Vec3};

pub fn organ(shape: OrganShape) -> TetMesh {
    synth::organ(shape).0
}

/// `n` grasps spread over the free surface with fixed displacements.
pub fn grasps(mesh: &TetMesh, n: usize) -> Vec<Grasp> {
    let free: Vec<usize> = mesh
        .surface_nodes()
        .iter()
        .copied()
        .filter(|&s| matches!(mesh.region(s), Region::Surface(_)))
        .collect();
    (0..n)
        .map(|k| {
            let node = free[k * free.len() / n.max(1)];
            let u = Vec3::new(0.01, -0.005 * k as f64, 0.004);
            Grasp::at_node(mesh, node, u).expect("surface node")
        })
        .collect()
}
