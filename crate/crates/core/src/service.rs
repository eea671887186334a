//! Planning service: newline-delimited JSON over TCP, one session per
//! connection. Every request either succeeds and commits its effect, or
//! fails with `{"type":"err"}` and leaves the session exactly as it was.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::hash::{Hash, Hasher};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, Weak};
use std::thread::JoinHandle;

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::collision::{grid_reachability, CollisionScene};
use crate::geometry::Point3;
use crate::planner::{placement_report, Classification, HeatMap, PlanError, PlanParams};
use crate::pipeline::{self, NoiseModel, PipelineConfig, PipelineError, PlanRecord, PlanSummary, PreparedVolume};

pub const DEFAULT_PORT: u16 = 7455;
/// Requests longer than this are rejected without being parsed.
pub const MAX_LINE_BYTES: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorCode {
    BadRequest,
    NoVolume,
    NoTarget,
    NoScene,
    NoHeatmap,
    NoEntry,
    TargetOutsideBody,
    NotFeasible,
    NotReachable,
    NotConfirmed,
    Io,
    Internal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceError {
    pub code: ErrorCode,
    pub message: String,
}

impl ServiceError {
    fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<PipelineError> for ServiceError {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Plan(PlanError::TargetOutsideBody) => ErrorCode::TargetOutsideBody,
            PipelineError::Plan(PlanError::InvalidParams(_)) | PipelineError::Plan(PlanError::DegenerateNeedle) => ErrorCode::BadRequest,
            PipelineError::NotFeasible(_) => ErrorCode::NotFeasible,
            PipelineError::NotReachable(_) => ErrorCode::NotReachable,
            PipelineError::Io(_) => ErrorCode::Io,
            PipelineError::Volume(_) | PipelineError::Segmentation(_) => ErrorCode::BadRequest,
            PipelineError::Collision(crate::collision::CollisionError::Io(_)) => ErrorCode::Io,
            PipelineError::Collision(crate::collision::CollisionError::Format(_)) => ErrorCode::BadRequest,
            _ => ErrorCode::Internal,
        };
        Self::new(code, e.to_string())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Request {
    Info,
    SetVolume {
        path: String,
        #[serde(default)]
        downsample: Option<bool>,
    },
    SetScene {
        path: String,
    },
    SetTarget {
        x: f64,
        y: f64,
        z: f64,
    },
    SetParams {
        params: PlanParams,
    },
    Heatmap,
    CheckReachability {
        points: Vec<[f64; 3]>,
    },
    /// Grid reachability pass over the current heat map.
    ReachGrid,
    Select {
        #[serde(default)]
        vertex: Option<usize>,
    },
    Execute {
        #[serde(default)]
        confirm_token: Option<String>,
    },
    Evaluate {
        target: [f64; 3],
        entry: [f64; 3],
        tip: [f64; 3],
    },
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub workers: usize,
    pub noise: NoiseModel,
    pub seed: u64,
    pub log_path: Option<PathBuf>,
    pub pipeline: PipelineConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { workers: 1, noise: NoiseModel::default(), seed: 0, log_path: None, pipeline: PipelineConfig::default() }
    }
}

type CacheKey = (u64, usize, String);

/// State shared by all sessions: configuration, the volume cache and the log.
pub struct Service {
    config: ServiceConfig,
    /// Loaded volumes keyed by content hash and pipeline settings; entries
    /// live as long as some session holds them.
    volumes: Mutex<HashMap<CacheKey, Weak<PreparedVolume>>>,
    log: Mutex<Option<File>>,
    sessions: std::sync::atomic::AtomicU64,
}

impl Service {
    pub fn new(config: ServiceConfig) -> io::Result<Arc<Self>> {
        config.noise.validate().map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        let log = match &config.log_path {
            Some(p) => Some(OpenOptions::new().create(true).append(true).open(p)?),
            None => None,
        };
        Ok(Arc::new(Self { config, volumes: Mutex::new(HashMap::new()), log: Mutex::new(log), sessions: 0.into() }))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    /// Fresh session; each gets its own noise stream derived from the seed.
    pub fn session(self: &Arc<Self>) -> Session {
        let n = self.sessions.fetch_add(1, Ordering::Relaxed);
        Session {
            service: self.clone(),
            state: State {
                volume: None,
                scene: None,
                target: None,
                params: PlanParams::default(),
                heatmap: None,
                entry: None,
                pending: None,
                history: Vec::new(),
                rng: ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(n)),
            },
        }
    }

    fn load_volume(&self, path: &str, cfg: &PipelineConfig) -> Result<Arc<PreparedVolume>, ServiceError> {
        let bytes = std::fs::read(path).map_err(|e| ServiceError::new(ErrorCode::Io, format!("{path}: {e}")))?;
        let mut h = DefaultHasher::new();
        bytes.hash(&mut h);
        let key = (h.finish(), bytes.len(), serde_json::to_string(cfg).expect("config serializes"));
        if let Some(v) = self.volumes.lock().expect("cache lock").get(&key).and_then(Weak::upgrade) {
            return Ok(v);
        }
        let pv = Arc::new(PreparedVolume::from_bytes(&bytes, cfg)?);
        let mut cache = self.volumes.lock().expect("cache lock");
        cache.retain(|_, w| w.strong_count() > 0);
        cache.insert(key, Arc::downgrade(&pv));
        Ok(pv)
    }

    fn append_log(&self, record: &PlanRecord) -> Result<(), ServiceError> {
        let mut guard = self.log.lock().expect("log lock");
        if let Some(f) = guard.as_mut() {
            let line = serde_json::to_string(record).expect("record serializes");
            writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| ServiceError::new(ErrorCode::Io, format!("session log: {e}")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Pending {
    token: String,
    entry: usize,
    waypoints: usize,
}

#[derive(Clone)]
struct SceneState {
    scene: Arc<CollisionScene>,
    /// The scene borrowed the session volume's skin as its body.
    uses_skin: bool,
}

#[derive(Clone)]
struct HeatState {
    /// Heat map straight from the raycast.
    base: Arc<HeatMap>,
    /// After the reachability pass, if it ran.
    current: Arc<HeatMap>,
    summary: PlanSummary,
}

#[derive(Clone)]
struct State {
    volume: Option<Arc<PreparedVolume>>,
    scene: Option<SceneState>,
    target: Option<Point3>,
    params: PlanParams,
    heatmap: Option<HeatState>,
    entry: Option<usize>,
    pending: Option<Pending>,
    history: Vec<PlanRecord>,
    rng: ChaCha8Rng,
}

/// One client's planning state.
pub struct Session {
    service: Arc<Service>,
    state: State,
}

fn ok(fields: Value) -> Value {
    let mut v = json!({"type": "ok"});
    if let (Value::Object(dst), Value::Object(src)) = (&mut v, fields) {
        dst.extend(src);
    }
    v
}

fn err_value(e: &ServiceError) -> Value {
    json!({"type": "err", "code": e.code, "message": e.message})
}

fn ply_base64(hm: &HeatMap) -> String {
    base64::engine::general_purpose::STANDARD.encode(hm.to_ply())
}

impl Session {
    pub fn history(&self) -> &[PlanRecord] {
        &self.state.history
    }

    /// Handles one request line and returns the response line (no newline).
    pub fn handle_line(&mut self, line: &str) -> String {
        let response = match serde_json::from_str::<Request>(line) {
            Ok(req) => self.handle(&req).unwrap_or_else(|e| err_value(&e)),
            Err(e) => err_value(&ServiceError::new(ErrorCode::BadRequest, e.to_string())),
        };
        response.to_string()
    }

    /// Runs `req` on a copy of the state and commits it only on success.
    pub fn handle(&mut self, req: &Request) -> Result<Value, ServiceError> {
        let mut draft = self.state.clone();
        let out = dispatch(&self.service, &mut draft, req)?;
        self.state = draft;
        Ok(out)
    }
}

fn need_volume(s: &State) -> Result<&Arc<PreparedVolume>, ServiceError> {
    s.volume.as_ref().ok_or_else(|| ServiceError::new(ErrorCode::NoVolume, "no volume loaded"))
}

fn need_target(s: &State) -> Result<Point3, ServiceError> {
    s.target.ok_or_else(|| ServiceError::new(ErrorCode::NoTarget, "no target set"))
}

fn need_scene(s: &State) -> Result<Arc<CollisionScene>, ServiceError> {
    s.scene.as_ref().map(|x| x.scene.clone()).ok_or_else(|| ServiceError::new(ErrorCode::NoScene, "no scene loaded"))
}

fn need_heatmap(s: &State) -> Result<&HeatState, ServiceError> {
    s.heatmap.as_ref().ok_or_else(|| ServiceError::new(ErrorCode::NoHeatmap, "no heat map for the current target"))
}

fn finite(p: &[f64; 3]) -> Result<Point3, ServiceError> {
    if p.iter().all(|v| v.is_finite()) {
        Ok(Point3::from(*p))
    } else {
        Err(ServiceError::new(ErrorCode::BadRequest, "coordinates must be finite"))
    }
}

fn entry_value(hm: &HeatMap, v: usize) -> Value {
    let c = &hm.candidates[v];
    json!({"vertex": v, "entry": c.position, "cost": c.cost, "distance_mm": c.distance_mm, "angle_deg": c.angle_deg})
}

fn dispatch(svc: &Service, s: &mut State, req: &Request) -> Result<Value, ServiceError> {
    let workers = svc.config.workers;
    match req {
        Request::Info => {
            let vol = s.volume.as_ref().map(|v| json!({"dims": v.volume.dims(), "spacing": v.volume.spacing(), "skin_vertices": v.skin.vertices.len()}));
            Ok(ok(json!({
                "volume": vol,
                "scene": s.scene.is_some(),
                "target": s.target,
                "params": s.params,
                "heatmap": s.heatmap.as_ref().map(|h| &h.summary),
                "entry": s.entry,
                "pending_confirmation": s.pending.is_some(),
                "executed": s.history.len(),
            })))
        }
        Request::SetVolume { path, downsample } => {
            let mut cfg = svc.config.pipeline.clone();
            if let Some(d) = downsample {
                cfg.downsample = *d;
            }
            let pv = svc.load_volume(path, &cfg)?;
            let out = ok(json!({"dims": pv.volume.dims(), "spacing": pv.volume.spacing(), "skin_vertices": pv.skin.vertices.len()}));
            s.volume = Some(pv);
            s.target = None;
            s.heatmap = None;
            s.entry = None;
            s.pending = None;
            if s.scene.as_ref().is_some_and(|x| x.uses_skin) {
                s.scene = None;
            }
            Ok(out)
        }
        Request::SetScene { path } => {
            let text = std::fs::read_to_string(path).map_err(|e| ServiceError::new(ErrorCode::Io, format!("{path}: {e}")))?;
            let base = std::path::Path::new(path).parent().unwrap_or(std::path::Path::new("."));
            let skin = s.volume.as_ref().map(|v| v.skin.clone());
            let scene = CollisionScene::from_json_str_with_body(&text, base, skin.clone()).map_err(|e| match (&e, skin.is_none()) {
                (crate::collision::CollisionError::Format(m), true) if m.contains("no body") => ServiceError::new(ErrorCode::NoVolume, "scene has no body and no volume is loaded"),
                _ => PipelineError::from(e).into(),
            })?;
            let uses_skin = skin.is_some_and(|sk| Arc::ptr_eq(&sk, scene.body.mesh()));
            s.scene = Some(SceneState { scene: Arc::new(scene), uses_skin });
            s.entry = None;
            s.pending = None;
            if let Some(h) = s.heatmap.as_mut() {
                h.current = h.base.clone();
                h.summary = PlanSummary::of(&h.base, None);
            }
            Ok(ok(json!({})))
        }
        Request::SetTarget { x, y, z } => {
            let p = finite(&[*x, *y, *z])?;
            let pv = need_volume(s)?;
            if !pv.target_inside(&p) {
                return Err(ServiceError::new(ErrorCode::TargetOutsideBody, "target is not strictly inside the body"));
            }
            s.target = Some(p);
            s.heatmap = None;
            s.entry = None;
            s.pending = None;
            Ok(ok(json!({"target": p})))
        }
        Request::SetParams { params } => {
            params.validate().map_err(|e| ServiceError::new(ErrorCode::BadRequest, e.to_string()))?;
            s.params = params.clone();
            s.heatmap = None;
            s.entry = None;
            s.pending = None;
            Ok(ok(json!({"params": s.params})))
        }
        Request::Heatmap => {
            let pv = need_volume(s)?.clone();
            let target = need_target(s)?;
            let hm = Arc::new(pv.heatmap(&target, &s.params, workers)?);
            let summary = PlanSummary::of(&hm, None);
            let out = ok(json!({"ply_payload_base64": ply_base64(&hm), "optimal": hm.optimal_index, "summary": summary}));
            s.heatmap = Some(HeatState { base: hm.clone(), current: hm, summary });
            s.entry = None;
            s.pending = None;
            Ok(out)
        }
        Request::CheckReachability { points } => {
            let scene = need_scene(s)?;
            let target = need_target(s)?;
            let pts = points.iter().map(finite).collect::<Result<Vec<_>, _>>()?;
            let verdicts = scene.check_points(&target, &pts, workers).map_err(PipelineError::from)?;
            Ok(ok(json!({"verdicts": verdicts})))
        }
        Request::ReachGrid => {
            let scene = need_scene(s)?;
            let h = need_heatmap(s)?;
            let reach = grid_reachability(&scene, &h.base, s.params.grid_mm, workers).map_err(PipelineError::from)?;
            let summary = PlanSummary::of(&reach.heatmap, Some(&reach));
            let hm = Arc::new(reach.heatmap);
            let out = ok(json!({"ply_payload_base64": ply_base64(&hm), "optimal": hm.optimal_index, "summary": summary}));
            let h = s.heatmap.as_mut().expect("checked above");
            h.current = hm;
            h.summary = summary;
            s.entry = None;
            s.pending = None;
            Ok(out)
        }
        Request::Select { vertex } => {
            let hm = need_heatmap(s)?.current.clone();
            let v = match vertex {
                Some(v) => *v,
                None => hm.optimal_index.ok_or_else(|| ServiceError::new(ErrorCode::NotFeasible, "heat map has no feasible vertex"))?,
            };
            if hm.candidates.get(v).is_none_or(|c| c.classification != Classification::Feasible) {
                return Err(ServiceError::new(ErrorCode::NotFeasible, format!("vertex {v} is not a feasible entry")));
            }
            s.entry = Some(v);
            s.pending = None;
            Ok(ok(entry_value(&hm, v)))
        }
        Request::Execute { confirm_token } => {
            let scene = need_scene(s)?;
            let hm = need_heatmap(s)?.current.clone();
            let entry = s.entry.ok_or_else(|| ServiceError::new(ErrorCode::NoEntry, "no entry selected"))?;
            match confirm_token {
                None => {
                    let check = pipeline::check_entry(&scene, &hm, entry)?;
                    if !check.reachable {
                        return Err(ServiceError::new(ErrorCode::NotReachable, pipeline::describe_failure(&check)));
                    }
                    let token = format!("{:016x}", s.rng.random::<u64>());
                    s.pending = Some(Pending { token: token.clone(), entry, waypoints: check.configs.len() });
                    Ok(json!({"type": "needs_confirm", "token": token, "waypoints": check.configs.len()}))
                }
                Some(t) => {
                    let p = match &s.pending {
                        Some(p) if p.token == *t && p.entry == entry => p.clone(),
                        _ => return Err(ServiceError::new(ErrorCode::NotConfirmed, "no matching pending execution")),
                    };
                    let (needle_entry, tip) = pipeline::simulate_needle(&hm.target, &hm.candidates[entry].position, &svc.config.noise, &mut s.rng)?;
                    let rec = pipeline::record(&hm, entry, &needle_entry, &tip, p.waypoints)?;
                    svc.append_log(&rec)?;
                    s.history.push(rec.clone());
                    s.pending = None;
                    Ok(ok(json!({"record": rec})))
                }
            }
        }
        Request::Evaluate { target, entry, tip } => {
            let r = placement_report(&finite(target)?, &finite(entry)?, &finite(tip)?).map_err(PipelineError::from)?;
            Ok(ok(json!({"dev3d": r.deviation_3d_mm, "devlat": r.deviation_lateral_mm, "biopsy_center": r.biopsy_center})))
        }
    }
}

/// Serves one connection until the peer closes it.
pub fn serve_connection(service: Arc<Service>, stream: TcpStream) -> io::Result<()> {
    let mut session = service.session();
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = Read::take(&mut reader, MAX_LINE_BYTES as u64 + 1).read_until(b'\n', &mut buf)?;
        if n == 0 {
            return Ok(());
        }
        let too_long = buf.len() > MAX_LINE_BYTES;
        let response = if too_long {
            err_value(&ServiceError::new(ErrorCode::BadRequest, "request line too long")).to_string()
        } else {
            match std::str::from_utf8(&buf) {
                Ok(text) if text.trim().is_empty() => continue,
                Ok(text) => session.handle_line(text.trim_end()),
                Err(_) => err_value(&ServiceError::new(ErrorCode::BadRequest, "request is not UTF-8")).to_string(),
            }
        };
        writer.write_all(response.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        if too_long {
            // The rest of the oversized line cannot be resynchronised.
            return Ok(());
        }
    }
}

/// Listening socket plus shared service state.
pub struct Server {
    listener: TcpListener,
    service: Arc<Service>,
    stop: Arc<AtomicBool>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, config: ServiceConfig) -> io::Result<Self> {
        Ok(Self { listener: TcpListener::bind(addr)?, service: Service::new(config)?, stop: Arc::new(AtomicBool::new(false)) })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections until stopped, one thread each.
    pub fn run(self) -> io::Result<()> {
        for conn in self.listener.incoming() {
            if self.stop.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(stream) => {
                    let svc = self.service.clone();
                    std::thread::spawn(move || {
                        if let Err(e) = serve_connection(svc, stream) {
                            log::warn!("connection ended: {e}");
                        }
                    });
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
        Ok(())
    }

    /// Runs the accept loop on a background thread.
    pub fn spawn(self) -> io::Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stop = self.stop.clone();
        let join = std::thread::spawn(move || self.run());
        Ok(ServerHandle { addr, stop, join: Some(join) })
    }
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    /// Stops accepting; open connections finish on their own.
    pub fn shutdown(mut self) -> io::Result<()> {
        self.stop_and_join()
    }

    fn stop_and_join(&mut self) -> io::Result<()> {
        let Some(join) = self.join.take() else { return Ok(()) };
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        join.join().map_err(|_| io::Error::other("server thread panicked"))?
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop_and_join();
    }
}

/// Minimal blocking client: one request line out, one response line back.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let s = TcpStream::connect(addr)?;
        Ok(Self { writer: s.try_clone()?, reader: BufReader::new(s) })
    }

    pub fn send_raw(&mut self, line: &str) -> io::Result<Value> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        let mut resp = String::new();
        if self.reader.read_line(&mut resp)? == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "server closed the connection"));
        }
        serde_json::from_str(&resp).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    pub fn send(&mut self, req: &Value) -> io::Result<Value> {
        self.send_raw(&req.to_string())
    }
}
