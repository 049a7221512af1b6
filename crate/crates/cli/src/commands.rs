//! Subcommand implementations. Each returns the JSON summary for stdout.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use softgrasp::dataset::{self, DataRegime};
use softgrasp::fem::{self, BoundaryConditions, MaterialModel, MaterialParams};
use softgrasp::kelvinlet::{deform, Grasp, KelvinletParams};
use softgrasp::mesh::{Region, RegionSpec, TetMesh};
use softgrasp::metrics::{dcm_from_terms, dcm_terms, EvalReport, LatencyStats};
use softgrasp::neural::{
    calibrate_epsilon, save_checkpoint, split, train, Model, Network, Normalization, Regime, TrainConfig, EPSILON_GRID,
};
use softgrasp::sampling::{sample_rng, Cuboid, QSampler, SamplingConfig, DEFAULT_CUBOID};
use softgrasp::service::{Engine, GraspMsg, Mode};
use softgrasp::{DisplacementField, Vec3};

use crate::error::{CliError, CliResult};
use crate::inputs::{self, LoadedMesh};
use crate::{server, BenchArgs, Command, EvalArgs, GenArgs, MeshInfoArgs, ServeArgs, SolveArgs, SplitArg, TrainArgs};

pub fn dispatch(cmd: Command) -> CliResult<Value> {
    match cmd {
        Command::MeshInfo(a) => mesh_info(a),
        Command::Gen(a) => gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Solve(a) => solve(a),
        Command::Serve(a) => serve(a),
    }
}

fn pool(jobs: usize) -> CliResult<rayon::ThreadPool> {
    if jobs == 0 {
        return Err(CliError::usage("--jobs must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::internal(e.to_string()))
}

fn default_material(regime: DataRegime) -> MaterialParams {
    match regime {
        DataRegime::Linear => MaterialParams::linear_liver(),
        DataRegime::Nonlinear => MaterialParams::mooney_rivlin_liver(),
    }
}

fn mesh_info(a: MeshInfoArgs) -> CliResult<Value> {
    let LoadedMesh { id, mesh, regions } = inputs::load(&a.mesh)?;
    let (lo, hi) = mesh.bounds();
    let region_counts: Vec<Value> = mesh
        .region_names()
        .iter()
        .enumerate()
        .map(|(r, name)| json!({"id": name, "nodes": mesh.region_nodes(r).len()}))
        .collect();
    if let Some(path) = &a.write {
        inputs::write_json(path, &mesh.to_json())?;
    }
    Ok(json!({
        "mesh": id,
        "nodes": mesh.node_count(),
        "tets": mesh.tets().len(),
        "surface_nodes": mesh.surface_nodes().len(),
        "surface_tris": mesh.surface_tris().len(),
        "fixed_nodes": mesh.fixed_nodes().len(),
        "volume_m3": mesh.total_volume(),
        "mean_edge_m": mesh.mean_edge_length(),
        "bounds_m": [[lo.x, lo.y, lo.z], [hi.x, hi.y, hi.z]],
        "watertight": mesh.is_watertight(),
        "regions": region_counts,
        "sampling_regions": regions,
        "written": a.write,
    }))
}

/// Optional fields of a generation config file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub count: Option<usize>,
    pub arity: Option<usize>,
    pub regime: Option<DataRegime>,
    pub seed: Option<u64>,
    pub cuboid: Option<Cuboid>,
    pub alpha_max: Option<f64>,
    pub u_max: Option<f64>,
    pub regions: Option<Vec<RegionSpec>>,
    pub material: Option<MaterialParams>,
}

/// Fully resolved generation settings, echoed next to the dataset.
#[derive(Debug, Serialize)]
struct ResolvedGen<'a> {
    mesh: &'a str,
    unit_scale: f64,
    count: usize,
    arity: usize,
    regime: DataRegime,
    sampling: &'a SamplingConfig,
    material: &'a MaterialParams,
}

fn gen(a: GenArgs) -> CliResult<Value> {
    let file: GenConfig = match &a.config {
        Some(p) => inputs::read_json(p)?,
        None => GenConfig::default(),
    };
    let count = a
        .count
        .or(file.count)
        .ok_or_else(|| CliError::usage("--count is required (flag or config)"))?;
    let arity = a.arity.map(usize::from).or(file.arity).unwrap_or(1);
    let regime = a.regime.map(DataRegime::from).or(file.regime).unwrap_or(DataRegime::Linear);
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let loaded = inputs::load(&a.mesh)?;
    let mut sampling = SamplingConfig::new(
        file.regions.unwrap_or(loaded.regions),
        file.cuboid.unwrap_or(DEFAULT_CUBOID),
        seed,
    );
    if let Some(v) = file.alpha_max {
        sampling.alpha_max = v;
    }
    if let Some(v) = file.u_max {
        sampling.u_max = v;
    }
    let material = file.material.unwrap_or_else(|| default_material(regime));
    let t = Instant::now();
    let ds = pool(a.jobs)?.install(|| dataset::generate(&loaded.mesh, &material, &sampling, count, arity, regime))?;
    let elapsed = t.elapsed().as_secs_f64();
    dataset::write(&ds, &a.out)?;
    let resolved = ResolvedGen {
        mesh: &a.mesh.mesh,
        unit_scale: a.mesh.unit_scale,
        count,
        arity,
        regime,
        sampling: &sampling,
        material: &material,
    };
    inputs::write_json(&a.out.join("config.json"), &resolved)?;
    Ok(json!({
        "out": a.out,
        "samples": ds.len(),
        "nodes": ds.mesh.node_count(),
        "regime": regime,
        "arity": arity,
        "failed_attempts": ds.manifest.failed_attempts.len(),
        "seconds": elapsed,
    }))
}

/// Optional fields of a training config file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverrides {
    pub regime: Option<Regime>,
    pub lambda_reg: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub q_batch: Option<usize>,
    pub normalize: Option<bool>,
    pub kelvinlet: Option<KelvinletParams>,
}

fn read_dataset(dir: &Path) -> CliResult<dataset::Dataset> {
    if !dir.is_dir() {
        return Err(CliError::input(format!("dataset directory {} not found", dir.display())));
    }
    Ok(dataset::read(dir)?)
}

fn train_cmd(a: TrainArgs) -> CliResult<Value> {
    let file: TrainOverrides = match &a.config {
        Some(p) => inputs::read_json(p)?,
        None => TrainOverrides::default(),
    };
    let regime = a
        .regime
        .map(Regime::from)
        .or(file.regime)
        .ok_or_else(|| CliError::usage("--regime is required (flag or config)"))?;
    let ds = read_dataset(&a.data)?;
    let mut cfg = TrainConfig::new(regime, ds.manifest.regime, a.seed.or(file.seed).unwrap_or(0));
    cfg.lambda_reg = a.lambda_reg.or(file.lambda_reg).unwrap_or(cfg.lambda_reg);
    cfg.epochs = a.epochs.or(file.epochs).unwrap_or(cfg.epochs);
    cfg.batch_size = a.batch_size.or(file.batch_size).unwrap_or(cfg.batch_size);
    cfg.lr = a.lr.or(file.lr).unwrap_or(cfg.lr);
    cfg.q_batch = file.q_batch.unwrap_or(cfg.q_batch);
    cfg.normalize = a.normalize.or(file.normalize).unwrap_or(cfg.normalize);
    cfg.kelvinlet = file.kelvinlet.unwrap_or(cfg.kelvinlet);
    if a.calibrate_epsilon {
        let train_idx = split(ds.len(), cfg.seed).0;
        cfg.kelvinlet = calibrate_epsilon(&ds, &train_idx, &cfg.kelvinlet, &EPSILON_GRID)?;
    }
    let t = Instant::now();
    let outcome = train(&ds, &cfg)?;
    let elapsed = t.elapsed().as_secs_f64();
    save_checkpoint(&outcome.model, Some(&cfg), &a.out)?;
    if let Some(log) = &a.log {
        inputs::write_bytes(log, outcome.log_jsonl().as_bytes())?;
    }
    let last = outcome.log.last();
    Ok(json!({
        "out": a.out,
        "config": cfg,
        "train_samples": outcome.train_idx.len(),
        "test_samples": outcome.test_idx.len(),
        "final_train_loss": last.map(|l| l.train_loss),
        "final_test_dcm": last.and_then(|l| l.test_dcm),
        "seconds": elapsed,
    }))
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    data: String,
    ckpt: String,
    split: &'static str,
    samples: Vec<usize>,
    train_config: Option<TrainConfig>,
    rows: Vec<EvalReport>,
}

fn eval(a: EvalArgs) -> CliResult<Value> {
    let ds = read_dataset(&a.data)?;
    let (model, train_cfg) = inputs::checkpoint(&a.ckpt)?;
    if model.arity != ds.manifest.arity {
        return Err(CliError::input(format!(
            "checkpoint is for {} grasp(s), dataset has {}",
            model.arity, ds.manifest.arity
        )));
    }
    let (idx, split_name) = match a.split {
        SplitArg::Test => (split(ds.len(), train_cfg.as_ref().map_or(model.seed, |c| c.seed)).1, "test"),
        SplitArg::All => ((0..ds.len()).collect(), "all"),
    };
    if idx.is_empty() {
        return Err(CliError::input("no samples to evaluate"));
    }
    let mesh = &ds.mesh;
    let w = mesh.lumped_volumes();
    let truth: Vec<DisplacementField> = idx.iter().map(|&i| ds.samples[i].target_field()).collect();
    let timed = |f: &dyn Fn(&[Grasp]) -> softgrasp::Result<DisplacementField>| -> CliResult<(Vec<DisplacementField>, Vec<f64>)> {
        let mut out = Vec::with_capacity(idx.len());
        let mut ms = Vec::with_capacity(idx.len());
        for &i in &idx {
            let t = Instant::now();
            out.push(f(&ds.samples[i].grasps)?);
            ms.push(t.elapsed().as_secs_f64() * 1e3);
        }
        Ok((out, ms))
    };
    let (pred, model_ms) = timed(&|g| model.predict(mesh, g))?;
    let (prior, prior_ms) = timed(&|g| deform(mesh, g, &model.kelvinlet))?;
    let latency = |ms: &[f64]| {
        if a.timing {
            LatencyStats::from_samples(ms, mesh.node_count())
        } else {
            LatencyStats {
                nodes: mesh.node_count(),
                ..LatencyStats::default()
            }
        }
    };
    let model_id = a
        .ckpt
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let model_row = EvalReport::new(&model_id, model.regime.name(), dcm_terms(&pred, &truth, w)?, latency(&model_ms))?;
    let prior_row = EvalReport::new("kelvinlet", "kelvinlet", dcm_terms(&prior, &truth, w)?, latency(&prior_ms))?;
    if let Some(csv) = &a.csv {
        inputs::write_bytes(csv, model_row.to_csv().as_bytes())?;
    }
    let out = EvalOutput {
        data: a.data.display().to_string(),
        ckpt: a.ckpt.display().to_string(),
        split: split_name,
        samples: idx,
        train_config: train_cfg,
        rows: vec![model_row, prior_row],
    };
    inputs::write_json(&a.report, &out)?;
    Ok(json!({
        "report": a.report,
        "split": split_name,
        "samples": out.samples.len(),
        "rows": out.rows.iter().map(|r| json!({
            "model": r.model_id,
            "regime": r.regime,
            "dcm": r.dcm,
            "excluded": r.excluded,
            "mean_ms": LatencyStats::from_samples(if r.model_id == "kelvinlet" { &prior_ms } else { &model_ms }, mesh.node_count()).mean_ms,
        })).collect::<Vec<_>>(),
    }))
}

/// `n` grasps at distinct free surface nodes, displaced inside the outward
/// cone, drawn from stream `k`.
fn bench_grasps(mesh: &TetMesh, q: &QSampler, n: usize, seed: u64, k: usize) -> Vec<Grasp> {
    let mut rng = sample_rng(seed, k as u64);
    let mut out: Vec<Grasp> = Vec::with_capacity(n);
    while out.len() < n {
        let g = q.sample(mesh, &mut rng);
        if out.iter().all(|o| o.node != g.node) {
            out.push(g);
        }
    }
    out
}

fn bench(a: BenchArgs) -> CliResult<Value> {
    let loaded = inputs::load(&a.mesh)?;
    if a.repeat == 0 {
        return Err(CliError::usage("--repeat must be at least 1"));
    }
    let graspers = a.graspers as usize;
    let mode = Mode::from(a.mode);
    let regime = DataRegime::from(a.regime);
    let (model, model_desc) = match (&a.ckpt, mode) {
        (Some(p), _) => (Some(inputs::checkpoint(p)?.0), p.display().to_string()),
        (None, Mode::Neural) => (
            Some(Model {
                network: Network::init(a.seed),
                regime: Regime::Residual,
                lambda_reg: 0.0,
                arity: graspers,
                kelvinlet: KelvinletParams::default(),
                norm: Normalization::identity(),
                seed: a.seed,
            }),
            "untrained".into(),
        ),
        (None, _) => (None, "none".into()),
    };
    if let Some(m) = &model {
        if mode == Mode::Neural && m.arity != graspers {
            return Err(CliError::input(format!(
                "checkpoint is for {} grasp(s), --graspers is {graspers}",
                m.arity
            )));
        }
    }
    let engine = Engine {
        kelvinlet: model.as_ref().map(|m| m.kelvinlet.clone()).unwrap_or_default(),
        mesh_id: loaded.id.clone(),
        mesh: loaded.mesh,
        model,
        material: default_material(regime),
    };
    let cfg = SamplingConfig::new(loaded.regions, DEFAULT_CUBOID, a.seed);
    let q = QSampler::new(&engine.mesh, &cfg)?;
    let cases: Vec<Vec<Grasp>> = (0..a.repeat)
        .map(|k| bench_grasps(&engine.mesh, &q, graspers, a.seed, k))
        .collect();
    for k in 0..a.warmup.min(a.repeat) {
        engine.field(mode, &cases[k])?;
    }
    let mut ms = Vec::with_capacity(a.repeat);
    let mut fields = Vec::with_capacity(a.repeat);
    for g in &cases {
        let t = Instant::now();
        let f = engine.field(mode, g)?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
        fields.push(f);
    }
    let latency = LatencyStats::from_samples(&ms, engine.mesh.node_count());
    let (dcm, terms) = if a.dcm {
        let reference: Vec<DisplacementField> = if mode == Mode::Fem {
            fields.clone()
        } else {
            use rayon::prelude::*;
            pool(a.jobs)?.install(|| {
                cases
                    .par_iter()
                    .map(|g| engine.field(Mode::Fem, g))
                    .collect::<softgrasp::Result<Vec<_>>>()
            })?
        };
        let terms = dcm_terms(&fields, &reference, engine.mesh.lumped_volumes())?;
        (Some(dcm_from_terms(&terms)?.0), Some(terms))
    } else {
        (None, None)
    };
    let out = json!({
        "mesh": engine.mesh_id,
        "nodes": engine.mesh.node_count(),
        "mode": mode,
        "realtime": mode.realtime(),
        "graspers": graspers,
        "repeat": a.repeat,
        "model": model_desc,
        "reference": if a.dcm { Some(regime) } else { None },
        "latency": latency,
        "dcm": dcm,
        "samples": ms.iter().enumerate().map(|(k, t)| json!({
            "ms": t,
            "dcm_term": terms.as_ref().and_then(|v| v[k]).map(|r| 100.0 * (1.0 - r)),
        })).collect::<Vec<_>>(),
    });
    if let Some(p) = &a.out {
        inputs::write_json(p, &out)?;
    }
    Ok(out)
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(untagged)]
enum BcFile {
    Grasps { grasps: Vec<GraspMsg> },
    Explicit(BoundaryConditions),
}

fn solve(a: SolveArgs) -> CliResult<Value> {
    let loaded = inputs::load(&a.mesh)?;
    let mesh = &loaded.mesh;
    let regime = DataRegime::from(a.regime);
    let material = match &a.material {
        Some(p) => inputs::read_json::<MaterialParams>(p)?,
        None => default_material(regime),
    };
    if material.model != regime.model() {
        return Err(CliError::input(format!(
            "material model {:?} does not match regime {}",
            material.model,
            regime.name()
        )));
    }
    let bc_file: BcFile = inputs::read_json(&a.bc)?;
    let bc = match &bc_file {
        BcFile::Grasps { grasps } => {
            let gs = grasps
                .iter()
                .map(|g| {
                    if g.node < mesh.node_count() && mesh.region(g.node) == Region::Fixed {
                        return Err(CliError::input(format!("grasp node {} is clamped", g.node)));
                    }
                    Ok(Grasp::at_node(mesh, g.node, Vec3::from(g.u))?)
                })
                .collect::<CliResult<Vec<_>>>()?;
            BoundaryConditions::from_grasps(mesh, &gs)?
        }
        BcFile::Explicit(bc) => bc.clone(),
    };
    let t = Instant::now();
    let sol = fem::solve(mesh, &material, &bc)?;
    let elapsed = t.elapsed().as_secs_f64();
    if !sol.field.is_finite() {
        return Err(CliError::internal("solver returned a non-finite field"));
    }
    let out = json!({
        "config": {
            "mesh": a.mesh.mesh,
            "unit_scale": a.mesh.unit_scale,
            "regime": regime,
            "material": material,
            "bc": bc,
        },
        "report": sol.report,
        "u": sol.field.u.iter().map(|v| [v.x, v.y, v.z]).collect::<Vec<_>>(),
    });
    inputs::write_json(&a.out, &out)?;
    Ok(json!({
        "out": a.out,
        "nodes": mesh.node_count(),
        "model": match material.model {
            MaterialModel::Linear => "linear",
            MaterialModel::MooneyRivlin => "mooney_rivlin",
        },
        "report": sol.report,
        "max_displacement_m": sol.field.max_norm(),
        "seconds": elapsed,
    }))
}

fn serve(a: ServeArgs) -> CliResult<Value> {
    let loaded = inputs::load(&a.mesh)?;
    let model = match &a.ckpt {
        Some(p) => Some(inputs::checkpoint(p)?.0),
        None => None,
    };
    let engine = Engine {
        kelvinlet: model.as_ref().map(|m| m.kelvinlet.clone()).unwrap_or_default(),
        mesh_id: loaded.id,
        mesh: loaded.mesh,
        model,
        material: default_material(DataRegime::from(a.regime)),
    };
    let addr = format!("{}:{}", a.host, a.port);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::internal(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::input(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| CliError::internal(e.to_string()))?;
        println!("{}", json!({"listening": local.to_string(), "ws": format!("ws://{local}/ws")}));
        server::serve(listener, engine)
            .await
            .map_err(|e| CliError::internal(e.to_string()))?;
        Ok(json!({"stopped": local.to_string()}))
    })
}
