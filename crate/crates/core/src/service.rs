//! Interactive session protocol, independent of the transport.
//!
//! A [`Session`] turns client messages into immediate replies and at most one
//! compute [`Job`]. Jobs are coalesced by a [`Coalescer`]: a newer request
//! replaces a pending one, and a result whose sequence number is no longer
//! the newest is dropped, so only the latest grasp state is ever answered.

use std::time::Instant;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{self, BoundaryConditions, MaterialParams};
use crate::field::{DisplacementField, Vec3};
use crate::kelvinlet::{deform, Grasp, KelvinletParams};
use crate::mesh::{Region, TetMesh};
use crate::metrics::{field_norm, LatencyStats};
use crate::neural::Model;

pub const MAX_GRASPS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Kelvinlet,
    Neural,
    Fem,
}

impl Mode {
    pub fn realtime(self) -> bool {
        self != Mode::Fem
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspMsg {
    pub node: usize,
    pub u: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "snake_case")]
pub enum ClientMsg {
    Hello,
    SetMode { mode: Mode },
    SetGrasps { grasps: Vec<GraspMsg> },
    Clear,
}

/// Comparison with the previous mode's field for the same grasps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub previous_mode: Mode,
    /// `‖u_new − u_prev‖ / ‖u_prev‖`, volume-weighted; `None` if `u_prev = 0`.
    pub rel_diff: Option<f64>,
    /// `100 (1 − rel_diff)` with the previous field as reference.
    pub dcm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "snake_case")]
pub enum ServerMsg {
    Mesh {
        node_count: usize,
        /// Rest positions, little-endian f32, base64.
        positions_b64: String,
        surface_tris: Vec<[usize; 3]>,
        regions: Vec<String>,
        /// Region name per surface node, `"fixed"` for clamped ones.
        surface_regions: Vec<(usize, String)>,
        unit: String,
        modes: Vec<Mode>,
    },
    Field {
        seq: u64,
        mode: Mode,
        u_b64: String,
        compute_ms: f64,
        realtime: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        comparison: Option<ModeComparison>,
    },
    Progress {
        seq: u64,
        mode: Mode,
        stage: String,
    },
    Err {
        code: u32,
        msg: String,
    },
}

pub mod codes {
    /// Malformed message; the session is closed.
    pub const MALFORMED: u32 = 1;
    pub const INVALID_GRASP: u32 = 2;
    pub const MODE_UNAVAILABLE: u32 = 3;
    pub const COMPUTE_FAILED: u32 = 4;
}

pub fn encode_field(field: &DisplacementField) -> String {
    let mut bytes = Vec::with_capacity(field.len() * 12);
    for v in field.to_f32() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn decode_field(b64: &str) -> Result<DisplacementField> {
    let bytes = B64
        .decode(b64)
        .map_err(|e| Error::Parse(format!("bad base64 field: {e}")))?;
    if bytes.len() % 12 != 0 {
        return Err(Error::Parse(format!("field payload of {} bytes", bytes.len())));
    }
    let flat: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    DisplacementField::from_f32(&flat)
}

/// Shared, read-only compute backends.
#[derive(Debug, Clone)]
pub struct Engine {
    pub mesh: TetMesh,
    pub mesh_id: String,
    pub kelvinlet: KelvinletParams,
    pub model: Option<Model>,
    pub material: MaterialParams,
}

/// One field computation.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub seq: u64,
    pub mode: Mode,
    pub grasps: Vec<Grasp>,
}

impl Engine {
    pub fn modes(&self) -> Vec<Mode> {
        let mut m = vec![Mode::Kelvinlet];
        if self.model.is_some() {
            m.push(Mode::Neural);
        }
        m.push(Mode::Fem);
        m
    }

    /// The field a job asks for: exactly the library call for its mode.
    pub fn field(&self, mode: Mode, grasps: &[Grasp]) -> Result<DisplacementField> {
        match mode {
            Mode::Kelvinlet if grasps.is_empty() => Ok(DisplacementField::zeros(self.mesh.node_count())),
            Mode::Kelvinlet => deform(&self.mesh, grasps, &self.kelvinlet),
            Mode::Neural => {
                let model = self
                    .model
                    .as_ref()
                    .ok_or_else(|| Error::InvalidParam("no neural model loaded".into()))?;
                if grasps.is_empty() {
                    Ok(DisplacementField::zeros(self.mesh.node_count()))
                } else {
                    model.predict(&self.mesh, grasps)
                }
            }
            Mode::Fem => {
                let bc = BoundaryConditions::from_grasps(&self.mesh, grasps)?;
                Ok(fem::solve(&self.mesh, &self.material, &bc)?.field)
            }
        }
    }

    /// Runs a job. `progress` receives FEM progress messages first.
    pub fn run(&self, job: &Job, mut progress: impl FnMut(ServerMsg)) -> (Result<DisplacementField>, f64) {
        if job.mode == Mode::Fem {
            progress(ServerMsg::Progress {
                seq: job.seq,
                mode: job.mode,
                stage: "solving".into(),
            });
        }
        let t = Instant::now();
        let r = self.field(job.mode, &job.grasps);
        (r, t.elapsed().as_secs_f64() * 1e3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub mesh_id: String,
    pub grasps: Vec<Grasp>,
    pub mode: Mode,
    /// Last issued request sequence number.
    pub seq: u64,
    /// Sequence number of the last field sent.
    pub last_field_seq: Option<u64>,
    pub latency: LatencyStats,
}

/// Replies to send now, a job to schedule, and whether to close.
#[derive(Debug, Default)]
pub struct Outcome {
    pub replies: Vec<ServerMsg>,
    pub job: Option<Job>,
    pub close: bool,
}

#[derive(Debug)]
pub struct Session {
    pub state: SessionState,
    /// Last delivered field per mode with the grasps it was computed for.
    last: Vec<(Mode, Vec<Grasp>, DisplacementField)>,
    latencies: Vec<f64>,
    node_count: usize,
}

fn err(code: u32, msg: impl Into<String>) -> ServerMsg {
    ServerMsg::Err { code, msg: msg.into() }
}

impl Session {
    pub fn new(engine: &Engine) -> Self {
        Self {
            state: SessionState {
                mesh_id: engine.mesh_id.clone(),
                grasps: Vec::new(),
                mode: Mode::Kelvinlet,
                seq: 0,
                last_field_seq: None,
                latency: LatencyStats::default(),
            },
            last: Vec::new(),
            latencies: Vec::new(),
            node_count: engine.mesh.node_count(),
        }
    }

    fn schedule(&mut self) -> Job {
        self.state.seq += 1;
        Job {
            seq: self.state.seq,
            mode: self.state.mode,
            grasps: self.state.grasps.clone(),
        }
    }

    fn validate_grasps(engine: &Engine, msgs: &[GraspMsg]) -> std::result::Result<Vec<Grasp>, String> {
        if msgs.len() > MAX_GRASPS {
            return Err(format!("at most {MAX_GRASPS} grasps, got {}", msgs.len()));
        }
        let mut out: Vec<Grasp> = Vec::with_capacity(msgs.len());
        for g in msgs {
            if g.node >= engine.mesh.node_count() || !engine.mesh.is_surface(g.node) {
                return Err(format!("node {} is not a surface node", g.node));
            }
            if engine.mesh.region(g.node) == Region::Fixed {
                return Err(format!("node {} is clamped", g.node));
            }
            if !g.u.iter().all(|c| c.is_finite()) {
                return Err(format!("displacement of node {} is not finite", g.node));
            }
            if out.iter().any(|o| o.node == Some(g.node)) {
                return Err(format!("node {} grasped twice", g.node));
            }
            let u = Vec3::new(g.u[0], g.u[1], g.u[2]);
            out.push(Grasp::at_node(&engine.mesh, g.node, u).map_err(|e| e.to_string())?);
        }
        Ok(out)
    }

    /// Parses and handles one text frame. Malformed JSON closes the session.
    pub fn handle_text(&mut self, engine: &Engine, text: &str) -> Outcome {
        match serde_json::from_str::<ClientMsg>(text) {
            Ok(msg) => self.handle_message(engine, msg),
            Err(e) => Outcome {
                replies: vec![err(codes::MALFORMED, format!("malformed message: {e}"))],
                job: None,
                close: true,
            },
        }
    }

    pub fn handle_message(&mut self, engine: &Engine, msg: ClientMsg) -> Outcome {
        let mut out = Outcome::default();
        match msg {
            ClientMsg::Hello => {
                let mesh = &engine.mesh;
                let mut pos = Vec::with_capacity(mesh.node_count() * 12);
                for p in mesh.nodes() {
                    for c in p.iter() {
                        pos.extend_from_slice(&(*c as f32).to_le_bytes());
                    }
                }
                out.replies.push(ServerMsg::Mesh {
                    node_count: mesh.node_count(),
                    positions_b64: B64.encode(pos),
                    surface_tris: mesh.surface_tris().to_vec(),
                    regions: mesh.region_names().to_vec(),
                    surface_regions: mesh
                        .surface_nodes()
                        .iter()
                        .map(|&s| (s, mesh.region_label(s).to_string()))
                        .collect(),
                    unit: "m".into(),
                    modes: engine.modes(),
                });
            }
            ClientMsg::SetMode { mode } => {
                if !engine.modes().contains(&mode) {
                    out.replies.push(err(codes::MODE_UNAVAILABLE, format!("mode {mode:?} is not available")));
                } else if mode == Mode::Neural && !self.state.grasps.is_empty() && !self.arity_ok(engine, self.state.grasps.len()) {
                    out.replies.push(err(codes::MODE_UNAVAILABLE, "model arity differs from the grasp count"));
                } else {
                    self.state.mode = mode;
                    out.job = Some(self.schedule());
                }
            }
            ClientMsg::SetGrasps { grasps } => match Self::validate_grasps(engine, &grasps) {
                Err(m) => out.replies.push(err(codes::INVALID_GRASP, m)),
                Ok(g) if self.state.mode == Mode::Neural && !g.is_empty() && !self.arity_ok(engine, g.len()) => {
                    out.replies.push(err(codes::INVALID_GRASP, "model arity differs from the grasp count"))
                }
                Ok(g) => {
                    self.state.grasps = g;
                    out.job = Some(self.schedule());
                }
            },
            ClientMsg::Clear => {
                self.state.grasps.clear();
                out.job = Some(self.schedule());
            }
        }
        out
    }

    fn arity_ok(&self, engine: &Engine, n: usize) -> bool {
        engine.model.as_ref().is_some_and(|m| m.arity == n)
    }

    /// Whether `seq` is still the newest request.
    pub fn is_current(&self, seq: u64) -> bool {
        seq == self.state.seq
    }

    /// Turns a finished job into its reply, or `None` if it is stale.
    pub fn complete(&mut self, engine: &Engine, job: &Job, result: Result<DisplacementField>, compute_ms: f64) -> Option<ServerMsg> {
        if !self.is_current(job.seq) {
            return None;
        }
        let field = match result {
            Ok(f) => f,
            Err(e) => return Some(err(codes::COMPUTE_FAILED, e.to_string())),
        };
        debug_assert_eq!(field.len(), self.node_count);
        let w = engine.mesh.lumped_volumes();
        let comparison = self
            .last
            .iter()
            .find(|(m, g, _)| *m != job.mode && *g == job.grasps)
            .map(|(m, _, prev)| {
                let denom = field_norm(prev, w).unwrap_or(0.0);
                let rel = if denom > 0.0 {
                    field.sub(prev).ok().and_then(|d| field_norm(&d, w).ok()).map(|n| n / denom)
                } else {
                    None
                };
                ModeComparison {
                    previous_mode: *m,
                    rel_diff: rel,
                    dcm: rel.map(|r| 100.0 * (1.0 - r)),
                }
            })
            .filter(|_| self.state.last_field_seq.is_some());
        let u_b64 = encode_field(&field);
        self.last.retain(|(m, _, _)| *m != job.mode);
        self.last.push((job.mode, job.grasps.clone(), field));
        self.latencies.push(compute_ms);
        self.state.latency = LatencyStats::from_samples(&self.latencies, self.node_count);
        self.state.last_field_seq = Some(job.seq);
        Some(ServerMsg::Field {
            seq: job.seq,
            mode: job.mode,
            u_b64,
            compute_ms,
            realtime: job.mode.realtime(),
            comparison,
        })
    }

    /// Handles a message and runs its job inline (no coalescing needed).
    pub fn handle_sync(&mut self, engine: &Engine, msg: ClientMsg) -> Vec<ServerMsg> {
        let out = self.handle_message(engine, msg);
        let mut replies = out.replies;
        if let Some(job) = out.job {
            let (r, ms) = engine.run(&job, |p| replies.push(p));
            replies.extend(self.complete(engine, &job, r, ms));
        }
        replies
    }
}

/// Single-flight scheduling: at most one job runs, and only the newest
/// waiting job is kept.
#[derive(Debug, Default)]
pub struct Coalescer {
    pending: Option<Job>,
    busy: bool,
}

impl Coalescer {
    /// Queues a job, replacing any older waiting one. Returns the job to
    /// start now if idle.
    pub fn submit(&mut self, job: Job) -> Option<Job> {
        self.pending = Some(job);
        self.next()
    }

    /// Marks the running job done. Returns the next job to start.
    pub fn finish(&mut self) -> Option<Job> {
        self.busy = false;
        self.next()
    }

    fn next(&mut self) -> Option<Job> {
        if self.busy {
            return None;
        }
        let job = self.pending.take()?;
        self.busy = true;
        Some(job)
    }

    pub fn is_busy(&self) -> bool {
        self.busy
    }
}
