//! Loading meshes, configs and checkpoints named on the command line.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use softgrasp::mesh::synth::{self, OrganShape};
use softgrasp::mesh::{load_mesh, RegionSpec, TetMesh};
use softgrasp::neural::{load_checkpoint, Model, TrainConfig};

use crate::error::{CliError, CliResult};
use crate::MeshArgs;

/// A mesh with its identifier and default sampling regions.
#[derive(Debug, Clone)]
pub struct LoadedMesh {
    pub id: String,
    pub mesh: TetMesh,
    pub regions: Vec<RegionSpec>,
}

pub fn load(args: &MeshArgs) -> CliResult<LoadedMesh> {
    if let Some(name) = args.mesh.strip_prefix("synth:") {
        let shape = match name {
            "desk" => OrganShape::desk(),
            "large" => OrganShape::large(),
            other => return Err(CliError::usage(format!("unknown synthetic mesh {other:?} (desk, large)"))),
        };
        let (mesh, regions) = synth::organ(shape);
        return Ok(LoadedMesh {
            id: args.mesh.clone(),
            mesh,
            regions,
        });
    }
    let path = Path::new(&args.mesh);
    if !path.exists() {
        return Err(CliError::input(format!("mesh file {} not found", path.display())));
    }
    let mesh = load_mesh(path, args.unit_scale)?;
    let regions = mesh.default_region_specs();
    Ok(LoadedMesh {
        id: path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_else(|| args.mesh.clone()),
        mesh,
        regions,
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::internal(e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::input(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

pub fn checkpoint(path: &Path) -> CliResult<(Model, Option<TrainConfig>)> {
    if !path.exists() {
        return Err(CliError::input(format!("checkpoint {} not found", path.display())));
    }
    Ok(load_checkpoint(path)?)
}
