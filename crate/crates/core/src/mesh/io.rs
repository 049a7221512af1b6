use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TetMesh;
use crate::error::{Error, Result};
use crate::field::Vec3;

/// Native JSON mesh document. Indices are 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshJson {
    pub nodes: Vec<[f64; 3]>,
    pub tets: Vec<[usize; 4]>,
    #[serde(default)]
    pub regions: BTreeMap<String, String>,
}

impl MeshJson {
    pub fn from_mesh(mesh: &TetMesh) -> Self {
        let mut regions = BTreeMap::new();
        for &s in mesh.surface_nodes() {
            regions.insert(s.to_string(), mesh.region_label(s).to_string());
        }
        Self {
            nodes: mesh.nodes().iter().map(|p| [p.x, p.y, p.z]).collect(),
            tets: mesh.tets().to_vec(),
            regions,
        }
    }

    pub fn into_mesh(self, unit_scale: f64) -> Result<TetMesh> {
        let nodes = self
            .nodes
            .iter()
            .map(|p| Vec3::new(p[0], p[1], p[2]) * unit_scale)
            .collect();
        let mut labels = HashMap::with_capacity(self.regions.len());
        for (k, v) in self.regions {
            let idx: usize = k
                .parse()
                .map_err(|_| Error::Parse(format!("region key {k:?} is not a node index")))?;
            labels.insert(idx, v);
        }
        TetMesh::new(nodes, self.tets, &labels)
    }
}

/// Loads a Gmsh MSH 2.2 ASCII file (`.msh`) or a native JSON mesh (anything
/// else). `unit_scale` converts file units to meters.
pub fn load_mesh(path: impl AsRef<Path>, unit_scale: f64) -> Result<TetMesh> {
    let path = path.as_ref();
    if !(unit_scale > 0.0) || !unit_scale.is_finite() {
        return Err(Error::InvalidParam(format!(
            "unit_scale must be positive, got {unit_scale}"
        )));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "msh") || text.trim_start().starts_with("$MeshFormat")
    {
        parse_gmsh(&text, unit_scale)
    } else {
        let doc: MeshJson = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        doc.into_mesh(unit_scale)
    }
}

/// Gmsh element types carrying no volume (points, lines, triangles, quads and
/// their higher-order versions). They are boundary annotations and skipped.
fn is_lower_dimensional(kind: u32) -> bool {
    matches!(kind, 1 | 2 | 3 | 8 | 9 | 10 | 15 | 16 | 20 | 21 | 22 | 23 | 24 | 25 | 26 | 27 | 28)
}

pub(crate) fn parse_gmsh(text: &str, unit_scale: f64) -> Result<TetMesh> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let mut nodes: Vec<Vec3> = Vec::new();
    let mut id_map: HashMap<u64, usize> = HashMap::new();
    let mut tets: Vec<[usize; 4]> = Vec::new();
    let mut raw_tets: Vec<[u64; 4]> = Vec::new();
    let mut seen_nodes = false;

    let bad = |what: &str| Error::Parse(format!("gmsh: {what}"));

    while let Some(line) = lines.next() {
        match line {
            "$MeshFormat" => {
                let header = lines.next().ok_or_else(|| bad("missing format line"))?;
                let mut it = header.split_whitespace();
                let version = it.next().ok_or_else(|| bad("missing version"))?;
                let file_type = it.next().ok_or_else(|| bad("missing file type"))?;
                if !version.starts_with("2.") {
                    return Err(bad(&format!("unsupported version {version}")));
                }
                if file_type != "0" {
                    return Err(bad("binary files are not supported"));
                }
                expect(&mut lines, "$EndMeshFormat")?;
            }
            "$Nodes" => {
                let count = parse_count(lines.next())?;
                nodes.reserve(count);
                for _ in 0..count {
                    let l = lines.next().ok_or_else(|| bad("truncated $Nodes"))?;
                    let f: Vec<&str> = l.split_whitespace().collect();
                    if f.len() < 4 {
                        return Err(bad(&format!("bad node line {l:?}")));
                    }
                    let id: u64 = f[0].parse().map_err(|_| bad("bad node id"))?;
                    let mut p = [0.0; 3];
                    for k in 0..3 {
                        p[k] = f[k + 1]
                            .parse()
                            .map_err(|_| bad(&format!("bad coordinate in {l:?}")))?;
                    }
                    id_map.insert(id, nodes.len());
                    nodes.push(Vec3::new(p[0], p[1], p[2]) * unit_scale);
                }
                expect(&mut lines, "$EndNodes")?;
                seen_nodes = true;
            }
            "$Elements" => {
                let count = parse_count(lines.next())?;
                for _ in 0..count {
                    let l = lines.next().ok_or_else(|| bad("truncated $Elements"))?;
                    let f: Vec<u64> = l
                        .split_whitespace()
                        .map(|s| s.parse::<u64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad(&format!("bad element line {l:?}")))?;
                    if f.len() < 3 {
                        return Err(bad(&format!("bad element line {l:?}")));
                    }
                    let (id, kind, ntags) = (f[0] as usize, f[1] as u32, f[2] as usize);
                    if kind == 4 {
                        let v = &f[3 + ntags..];
                        if v.len() != 4 {
                            return Err(bad(&format!("tet element {id} has {} nodes", v.len())));
                        }
                        raw_tets.push([v[0], v[1], v[2], v[3]]);
                    } else if !is_lower_dimensional(kind) {
                        return Err(Error::NonTetElement { element: id, kind });
                    }
                }
                expect(&mut lines, "$EndElements")?;
            }
            other if other.starts_with('$') && !other.starts_with("$End") => {
                // Unknown section: skip to its end marker.
                let end = format!("$End{}", &other[1..]);
                for l in lines.by_ref() {
                    if l == end {
                        break;
                    }
                }
            }
            _ => return Err(bad(&format!("unexpected line {line:?}"))),
        }
    }
    if !seen_nodes {
        return Err(Error::EmptyMesh);
    }
    for t in raw_tets {
        let mut idx = [0usize; 4];
        for k in 0..4 {
            idx[k] = *id_map
                .get(&t[k])
                .ok_or_else(|| bad(&format!("element references unknown node {}", t[k])))?;
        }
        tets.push(idx);
    }
    TetMesh::new(nodes, tets, &HashMap::new())
}

fn parse_count(line: Option<&str>) -> Result<usize> {
    line.and_then(|l| l.parse().ok())
        .ok_or_else(|| Error::Parse("gmsh: bad section count".into()))
}

fn expect<'a>(lines: &mut impl Iterator<Item = &'a str>, marker: &str) -> Result<()> {
    match lines.next() {
        Some(l) if l == marker => Ok(()),
        other => Err(Error::Parse(format!(
            "gmsh: expected {marker}, found {other:?}"
        ))),
    }
}
