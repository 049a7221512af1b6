//! Tetrahedral meshes with derived surface, region labels and lumped volumes.

pub mod io;
pub mod synth;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Vec3;

pub use io::{load_mesh, MeshJson};

/// Tets with |signed volume| at or below this are rejected (m³).
pub const MIN_TET_VOLUME: f64 = 1e-12;

/// Region label of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Interior,
    /// Clamped far-field surface.
    Fixed,
    /// Index into [`TetMesh::region_names`].
    Surface(usize),
}

/// A graspable surface region and its sampling prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub id: String,
    /// Unit direction of the region center, seen from the mesh centroid.
    pub center: [f64; 3],
    /// Concentration of the discrete vMF kernel around `center`.
    pub kappa: f64,
    /// Prior probability of picking this region.
    pub weight: f64,
}

impl RegionSpec {
    pub fn center_vec(&self) -> Vec3 {
        Vec3::new(self.center[0], self.center[1], self.center[2])
    }

    pub fn validate(specs: &[RegionSpec]) -> Result<()> {
        if specs.is_empty() {
            return Err(Error::InvalidParam("no regions".into()));
        }
        let mut total = 0.0;
        for s in specs {
            if !(s.kappa > 0.0) || !s.kappa.is_finite() {
                return Err(Error::InvalidParam(format!(
                    "region {}: kappa must be positive, got {}",
                    s.id, s.kappa
                )));
            }
            if !(0.0..=1.0).contains(&s.weight) {
                return Err(Error::InvalidParam(format!(
                    "region {}: weight {} outside [0,1]",
                    s.id, s.weight
                )));
            }
            let n = s.center_vec().norm();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParam(format!(
                    "region {}: center is not a unit vector (norm {n})",
                    s.id
                )));
            }
            total += s.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParam(format!(
                "region weights sum to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Immutable tetrahedral mesh.
///
/// Tets are stored positively oriented. Surface triangles are wound so that
/// their normals point out of the mesh.
#[derive(Debug, Clone)]
pub struct TetMesh {
    nodes: Vec<Vec3>,
    tets: Vec<[usize; 4]>,
    tet_volume: Vec<f64>,
    surface_tris: Vec<[usize; 3]>,
    surface_nodes: Vec<usize>,
    is_surface: Vec<bool>,
    regions: Vec<Region>,
    region_names: Vec<String>,
    lumped_volume: Vec<f64>,
}

fn signed_volume(p: &[Vec3; 4]) -> f64 {
    (p[1] - p[0]).cross(&(p[2] - p[0])).dot(&(p[3] - p[0])) / 6.0
}

/// Outward faces of a positively oriented tet `[a, b, c, d]`.
fn tet_faces(t: &[usize; 4]) -> [[usize; 3]; 4] {
    let [a, b, c, d] = *t;
    [[a, c, b], [a, b, d], [a, d, c], [b, c, d]]
}

fn sorted3(f: &[usize; 3]) -> [usize; 3] {
    let mut k = *f;
    k.sort_unstable();
    k
}

impl TetMesh {
    /// Builds a mesh from raw nodes and tets.
    ///
    /// Negatively oriented tets are flipped. Surface nodes without an entry in
    /// `labels` get the default region `"surface"`; interior nodes are always
    /// [`Region::Interior`].
    pub fn new(
        nodes: Vec<Vec3>,
        tets: Vec<[usize; 4]>,
        labels: &HashMap<usize, String>,
    ) -> Result<Self> {
        if nodes.is_empty() || tets.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let n = nodes.len();
        if let Some(bad) = nodes.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh(format!("node {bad} is not finite")));
        }
        let mut tets = tets;
        let mut tet_volume = Vec::with_capacity(tets.len());
        for (ti, t) in tets.iter_mut().enumerate() {
            for &v in t.iter() {
                if v >= n {
                    return Err(Error::IndexOutOfRange { index: v, len: n });
                }
            }
            let p = [nodes[t[0]], nodes[t[1]], nodes[t[2]], nodes[t[3]]];
            let mut vol = signed_volume(&p);
            if vol < 0.0 {
                t.swap(2, 3);
                vol = -vol;
            }
            if vol <= MIN_TET_VOLUME {
                return Err(Error::DegenerateTet { tet: ti, volume: vol });
            }
            tet_volume.push(vol);
        }

        let mut face_count: HashMap<[usize; 3], u32> = HashMap::with_capacity(tets.len() * 4);
        for t in &tets {
            for f in tet_faces(t) {
                *face_count.entry(sorted3(&f)).or_insert(0) += 1;
            }
        }
        if let Some((f, c)) = face_count.iter().find(|(_, &c)| c > 2) {
            return Err(Error::InvalidMesh(format!(
                "face {f:?} shared by {c} tets"
            )));
        }
        let mut surface_tris = Vec::new();
        let mut is_surface = vec![false; n];
        for t in &tets {
            for f in tet_faces(t) {
                if face_count[&sorted3(&f)] == 1 {
                    for &v in &f {
                        is_surface[v] = true;
                    }
                    surface_tris.push(f);
                }
            }
        }
        let surface_nodes: Vec<usize> = (0..n).filter(|&i| is_surface[i]).collect();

        let mut lumped_volume = vec![0.0; n];
        for (t, &v) in tets.iter().zip(&tet_volume) {
            for &a in t {
                lumped_volume[a] += v / 4.0;
            }
        }

        let mut region_names: Vec<String> = Vec::new();
        let mut regions = vec![Region::Interior; n];
        let mut keys: Vec<&usize> = labels.keys().collect();
        keys.sort_unstable();
        for &node in keys {
            if node >= n {
                return Err(Error::IndexOutOfRange { index: node, len: n });
            }
            let name = &labels[&node];
            if !is_surface[node] {
                if name != "interior" {
                    return Err(Error::InvalidMesh(format!(
                        "interior node {node} labeled with surface region {name:?}"
                    )));
                }
                continue;
            }
            regions[node] = match name.as_str() {
                "interior" => {
                    return Err(Error::InvalidMesh(format!(
                        "surface node {node} labeled interior"
                    )))
                }
                "fixed" => Region::Fixed,
                other => Region::Surface(intern(&mut region_names, other)),
            };
        }
        for &s in &surface_nodes {
            if regions[s] == Region::Interior {
                regions[s] = Region::Surface(intern(&mut region_names, "surface"));
            }
        }

        Ok(Self {
            nodes,
            tets,
            tet_volume,
            surface_tris,
            surface_nodes,
            is_surface,
            regions,
            region_names,
            lumped_volume,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[Vec3] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> Vec3 {
        self.nodes[i]
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    pub fn tet_volumes(&self) -> &[f64] {
        &self.tet_volume
    }

    pub fn total_volume(&self) -> f64 {
        self.tet_volume.iter().sum()
    }

    pub fn surface_tris(&self) -> &[[usize; 3]] {
        &self.surface_tris
    }

    pub fn surface_nodes(&self) -> &[usize] {
        &self.surface_nodes
    }

    pub fn is_surface(&self, i: usize) -> bool {
        self.is_surface.get(i).copied().unwrap_or(false)
    }

    pub fn region(&self, i: usize) -> Region {
        self.regions[i]
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region_names(&self) -> &[String] {
        &self.region_names
    }

    pub fn region_index(&self, id: &str) -> Option<usize> {
        self.region_names.iter().position(|n| n == id)
    }

    /// Label string of a node as used in the JSON mesh format.
    pub fn region_label(&self, i: usize) -> &str {
        match self.regions[i] {
            Region::Interior => "interior",
            Region::Fixed => "fixed",
            Region::Surface(r) => &self.region_names[r],
        }
    }

    pub fn fixed_nodes(&self) -> Vec<usize> {
        (0..self.node_count())
            .filter(|&i| self.regions[i] == Region::Fixed)
            .collect()
    }

    /// Per-node lumped volume weights: each tet gives a quarter of its volume
    /// to each of its nodes.
    pub fn lumped_volumes(&self) -> &[f64] {
        &self.lumped_volume
    }

    pub fn centroid(&self) -> Vec3 {
        // Volume-weighted, so the result does not depend on node density.
        let mut c = Vec3::zeros();
        for (i, w) in self.lumped_volume.iter().enumerate() {
            c += self.nodes[i] * *w;
        }
        c / self.total_volume()
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &self.nodes {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    pub fn mean_edge_length(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for t in &self.tets {
            for i in 0..4 {
                for j in (i + 1)..4 {
                    sum += (self.nodes[t[i]] - self.nodes[t[j]]).norm();
                    count += 1;
                }
            }
        }
        sum / count as f64
    }

    /// True when every surface edge is shared by exactly two surface triangles.
    pub fn is_watertight(&self) -> bool {
        let mut edges: HashMap<(usize, usize), u32> = HashMap::new();
        for t in &self.surface_tris {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        edges.values().all(|&c| c == 2)
    }

    /// Outward unit normal of every surface node, indexed like
    /// [`surface_nodes`](Self::surface_nodes).
    ///
    /// Normals are the area-weighted average of the incident surface triangle
    /// normals.
    pub fn surface_normals(&self) -> Result<Vec<Vec3>> {
        let mut acc = vec![Vec3::zeros(); self.node_count()];
        for t in &self.surface_tris {
            let [a, b, c] = *t;
            // |cross| is twice the area, so summing cross products weights by area.
            let n = (self.nodes[b] - self.nodes[a]).cross(&(self.nodes[c] - self.nodes[a]));
            for &v in t {
                acc[v] += n;
            }
        }
        // Outwardness reference: centroid of one tet incident on each node.
        let mut ref_centroid: Vec<Option<Vec3>> = vec![None; self.node_count()];
        for t in &self.tets {
            let c = (self.nodes[t[0]] + self.nodes[t[1]] + self.nodes[t[2]] + self.nodes[t[3]])
                / 4.0;
            for &v in t {
                if ref_centroid[v].is_none() {
                    ref_centroid[v] = Some(c);
                }
            }
        }
        self.surface_nodes
            .iter()
            .map(|&s| {
                let n = acc[s];
                let len = n.norm();
                if !(len > 0.0) {
                    return Err(Error::DegenerateSurface(s));
                }
                let mut n = n / len;
                if let Some(c) = ref_centroid[s] {
                    if n.dot(&(self.nodes[s] - c)) < 0.0 {
                        n = -n;
                    }
                }
                Ok(n)
            })
            .collect()
    }

    /// Outward normal at a single surface node.
    pub fn surface_normal(&self, node: usize) -> Result<Vec3> {
        let idx = self
            .surface_nodes
            .binary_search(&node)
            .map_err(|_| Error::NotSurfaceNode(node))?;
        Ok(self.surface_normals()?[idx])
    }

    /// Unit direction of node `i` from the mesh centroid.
    pub fn direction_from_centroid(&self, i: usize, centroid: &Vec3) -> Vec3 {
        let d = self.nodes[i] - centroid;
        let n = d.norm();
        if n > 0.0 {
            d / n
        } else {
            Vec3::zeros()
        }
    }

    /// Re-labels the surface with a directional Voronoi partition.
    ///
    /// Surface nodes accepted by `is_fixed` become [`Region::Fixed`]; every
    /// other surface node joins the region whose center direction has the
    /// largest dot product with the node's direction from the centroid (ties
    /// go to the lowest index).
    pub fn with_directional_regions(
        &self,
        specs: &[RegionSpec],
        is_fixed: impl Fn(usize, &Vec3) -> bool,
    ) -> Result<TetMesh> {
        if specs.is_empty() {
            return Err(Error::InvalidParam("no regions".into()));
        }
        let centroid = self.centroid();
        let centers: Vec<Vec3> = specs.iter().map(|s| s.center_vec()).collect();
        let mut out = self.clone();
        out.region_names = specs.iter().map(|s| s.id.clone()).collect();
        for &s in &self.surface_nodes {
            if is_fixed(s, &self.nodes[s]) {
                out.regions[s] = Region::Fixed;
                continue;
            }
            let d = self.direction_from_centroid(s, &centroid);
            let mut best = 0;
            let mut best_dot = f64::NEG_INFINITY;
            for (r, c) in centers.iter().enumerate() {
                let dot = d.dot(c);
                if dot > best_dot {
                    best_dot = dot;
                    best = r;
                }
            }
            out.regions[s] = Region::Surface(best);
        }
        Ok(out)
    }

    /// Surface nodes belonging to surface region `r`.
    pub fn region_nodes(&self, r: usize) -> Vec<usize> {
        self.surface_nodes
            .iter()
            .copied()
            .filter(|&s| self.regions[s] == Region::Surface(r))
            .collect()
    }

    /// Largest angle (radians) between the region center and the direction of
    /// any of its nodes.
    pub fn region_angular_radius(&self, r: usize, center: &Vec3) -> f64 {
        let centroid = self.centroid();
        self.region_nodes(r)
            .iter()
            .map(|&s| {
                self.direction_from_centroid(s, &centroid)
                    .dot(center)
                    .clamp(-1.0, 1.0)
                    .acos()
            })
            .fold(0.0, f64::max)
    }

    /// Sampling priors for the labeled regions when none are configured:
    /// center at the mean node direction, `kappa = 1 / θ²` with `θ` the
    /// angular radius, equal weights. Empty regions are skipped.
    pub fn default_region_specs(&self) -> Vec<RegionSpec> {
        let centroid = self.centroid();
        let mut specs: Vec<RegionSpec> = (0..self.region_names.len())
            .filter_map(|r| {
                let sum: Vec3 = self
                    .region_nodes(r)
                    .iter()
                    .map(|&s| self.direction_from_centroid(s, &centroid))
                    .sum();
                let c = sum.try_normalize(1e-12)?;
                let theta = self.region_angular_radius(r, &c);
                Some(RegionSpec {
                    id: self.region_names[r].clone(),
                    center: [c.x, c.y, c.z],
                    kappa: if theta > 0.0 { 1.0 / (theta * theta) } else { 1.0 },
                    weight: 0.0,
                })
            })
            .collect();
        let w = 1.0 / specs.len().max(1) as f64;
        for s in &mut specs {
            s.weight = w;
        }
        specs
    }

    pub fn to_json(&self) -> MeshJson {
        MeshJson::from_mesh(self)
    }
}

fn intern(names: &mut Vec<String>, name: &str) -> usize {
    if let Some(i) = names.iter().position(|n| n == name) {
        i
    } else {
        names.push(name.to_string());
        names.len() - 1
    }
}
