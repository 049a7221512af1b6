//! Procedural meshes for tests, benchmarks and desk-scale experiments.

use std::collections::HashMap;

use super::{RegionSpec, TetMesh};
use crate::field::Vec3;

/// Node index of grid point `(i, j, k)` in a [`box_grid`] with `cells` cells.
pub fn grid_index(cells: [usize; 3], i: usize, j: usize, k: usize) -> usize {
    i + (cells[0] + 1) * (j + (cells[1] + 1) * k)
}

/// Kuhn split of a hex: six tets around the 0-7 diagonal. Corner `c` has
/// offsets `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
const KUHN: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

fn grid_nodes_and_tets(cells: [usize; 3], size: [f64; 3]) -> (Vec<Vec3>, Vec<[usize; 4]>) {
    let [nx, ny, nz] = cells;
    assert!(nx > 0 && ny > 0 && nz > 0, "grid needs at least one cell per axis");
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                nodes.push(Vec3::new(
                    size[0] * i as f64 / nx as f64,
                    size[1] * j as f64 / ny as f64,
                    size[2] * k as f64 / nz as f64,
                ));
            }
        }
    }
    let mut tets = Vec::with_capacity(6 * nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let corner = |c: usize| grid_index(cells, i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
                for t in KUHN {
                    tets.push([corner(t[0]), corner(t[1]), corner(t[2]), corner(t[3])]);
                }
            }
        }
    }
    (nodes, tets)
}

/// Axis-aligned box `[0, size]` split into `cells` hexes of six tets each.
pub fn box_grid(cells: [usize; 3], size: [f64; 3]) -> TetMesh {
    let (nodes, tets) = grid_nodes_and_tets(cells, size);
    TetMesh::new(nodes, tets, &HashMap::new()).expect("box grid is valid")
}

/// Unit cube split into five tets (one central, four corners).
pub fn unit_cube_5() -> TetMesh {
    let nodes = (0..8)
        .map(|c| Vec3::new((c & 1) as f64, ((c >> 1) & 1) as f64, ((c >> 2) & 1) as f64))
        .collect();
    let tets = vec![[1, 2, 4, 7], [0, 1, 2, 4], [3, 1, 2, 7], [5, 1, 4, 7], [6, 2, 4, 7]];
    TetMesh::new(nodes, tets, &HashMap::new()).expect("cube is valid")
}

/// Ball of radius `radius`: a subdivided icosahedron coned to its center.
///
/// Every surface node lies exactly on the sphere.
pub fn icosphere_ball(subdivisions: usize, radius: f64) -> TetMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|p| Vec3::new(p[0], p[1], p[2]).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *mid.entry(key).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) / 2.0).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let center = verts.len();
    let mut nodes: Vec<Vec3> = verts.into_iter().map(|v| v * radius).collect();
    nodes.push(Vec3::zeros());
    let tets = faces.iter().map(|f| [center, f[0], f[1], f[2]]).collect();
    TetMesh::new(nodes, tets, &HashMap::new()).expect("icosphere ball is valid")
}

/// Shape parameters of the procedural organ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrganShape {
    /// Hex cells per axis before mapping.
    pub cells: [usize; 3],
    /// Ellipsoid semi-axes (m).
    pub semi_axes: [f64; 3],
    /// Upward bend of the long axis: `y += bend * semi_axes[1] * (x / semi_axes[0])²`.
    pub bend: f64,
    /// Fraction of the x-extent, from the +x end, whose surface is clamped.
    pub fixed_fraction: f64,
}

impl OrganShape {
    /// About 500 nodes.
    pub fn desk() -> Self {
        Self {
            cells: [9, 4, 9],
            semi_axes: [0.10, 0.04, 0.07],
            bend: 0.5,
            fixed_fraction: 0.3,
        }
    }

    /// 10,400 nodes, the node count of the clinical liver mesh.
    pub fn large() -> Self {
        Self {
            cells: [25, 15, 24],
            ..Self::desk()
        }
    }
}

/// Default graspable regions of the procedural organ: four directions around
/// the free (−x) end, equal prior weights.
pub fn organ_region_specs() -> Vec<RegionSpec> {
    let dirs = [
        ("tip", Vec3::new(-1.0, 0.0, 0.0)),
        ("anterior", Vec3::new(-0.5, 0.0, 0.866)),
        ("posterior", Vec3::new(-0.5, 0.0, -0.866)),
        ("dome", Vec3::new(-0.4, 0.9, 0.0)),
    ];
    dirs.iter()
        .map(|(id, d)| {
            let d = d.normalize();
            RegionSpec {
                id: (*id).to_string(),
                center: [d.x, d.y, d.z],
                kappa: 1.0,
                weight: 1.0 / dirs.len() as f64,
            }
        })
        .collect()
}

/// Flattened, bent ellipsoid resembling a liver lobe, with a clamped far end
/// and four graspable regions (see [`organ_region_specs`]).
///
/// Each region's `kappa` is set to `1 / θ²` where `θ` is the region's angular
/// radius on this mesh.
pub fn organ(shape: OrganShape) -> (TetMesh, Vec<RegionSpec>) {
    let (grid, tets) = grid_nodes_and_tets(shape.cells, [2.0, 2.0, 2.0]);
    let [ax, ay, az] = shape.semi_axes;
    let nodes: Vec<Vec3> = grid
        .iter()
        .map(|p| {
            // Cube [-1,1]³ to unit ball, then ellipsoid and bend.
            let (x, y, z) = (p.x - 1.0, p.y - 1.0, p.z - 1.0);
            let (x2, y2, z2) = (x * x, y * y, z * z);
            let bx = x * (1.0 - y2 / 2.0 - z2 / 2.0 + y2 * z2 / 3.0).sqrt();
            let by = y * (1.0 - z2 / 2.0 - x2 / 2.0 + z2 * x2 / 3.0).sqrt();
            let bz = z * (1.0 - x2 / 2.0 - y2 / 2.0 + x2 * y2 / 3.0).sqrt();
            let ex = bx * ax;
            let ey = by * ay + shape.bend * ay * bx * bx;
            let ez = bz * az;
            Vec3::new(ex, ey, ez)
        })
        .collect();
    let raw = TetMesh::new(nodes, tets, &HashMap::new()).expect("organ mesh is valid");
    let (lo, hi) = raw.bounds();
    let x_cut = hi.x - shape.fixed_fraction * (hi.x - lo.x);
    let mut specs = organ_region_specs();
    let labeled = raw
        .with_directional_regions(&specs, |_, p| p.x >= x_cut)
        .expect("organ regions");
    for (r, spec) in specs.iter_mut().enumerate() {
        let theta = labeled.region_angular_radius(r, &spec.center_vec());
        spec.kappa = if theta > 0.0 { 1.0 / (theta * theta) } else { 1.0 };
    }
    (labeled, specs)
}
