//! Command-line front end. Every subcommand prints one JSON document on
//! stdout; exit code 0 on success, 1 on runtime errors, 2 on usage errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::collision::{grid_reachability, CollisionScene};
use crate::geometry::{parse_point, Point3, RigidTransform};
use crate::mesh::SurfaceMesh;
use crate::phantom::{self, TorsoSpec};
use crate::pipeline::{self, NoiseModel, PipelineConfig, PlanSummary, PreparedVolume};
use crate::planner::{placement_report, sidecar_path, HeatMap, HeatMapSidecar, PlanParams};
use crate::registration::{self, PhantomModel, BALL_THRESHOLD_HU, MATCH_TOLERANCE_MM};
use crate::segmentation::{body_mask, extract_surface, DEFAULT_CLOSING_RADIUS_MM, DEFAULT_SKIN_THRESHOLD_HU};
use crate::service::{Server, ServiceConfig, DEFAULT_PORT};
use crate::synth;
use crate::volume::{load_volume, save_volume};

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Parser)]
#[command(name = "needleplan", version, about = "CT-guided needle insertion planning")]
struct Cli {
    /// Seed for every random draw (phantom poses, noise).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct SegArgs {
    /// Skin threshold in HU.
    #[arg(long, default_value_t = DEFAULT_SKIN_THRESHOLD_HU, allow_negative_numbers = true)]
    threshold: i16,
    #[arg(long, default_value_t = DEFAULT_CLOSING_RADIUS_MM)]
    closing_mm: f64,
    /// Halve the volume before segmenting.
    #[arg(long)]
    downsample: bool,
}

impl SegArgs {
    fn config(&self) -> PipelineConfig {
        PipelineConfig { skin_threshold_hu: self.threshold, closing_radius_mm: self.closing_mm, downsample: self.downsample }
    }
}

#[derive(Debug, Args)]
struct PlanArgs {
    /// Target as x,y,z in millimetres.
    #[arg(long, value_parser = point_arg, allow_hyphen_values = true)]
    target: Point3,
    /// JSON file with planning parameters.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

impl PlanArgs {
    fn params(&self) -> Result<PlanParams, BoxError> {
        Ok(match &self.params {
            Some(p) => PlanParams::load(p)?,
            None => PlanParams::default(),
        })
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print lattice geometry and intensity range.
    VolumeInfo { volume: PathBuf },
    /// Body mask and skin surface.
    Segment {
        volume: PathBuf,
        #[command(flatten)]
        seg: SegArgs,
        /// Outputs as MASK.nrrd,SKIN.ply.
        #[arg(short, long, value_parser = parse_path_pair)]
        output: (PathBuf, PathBuf),
    },
    /// Occlusion heat map of the skin for one target.
    Heatmap {
        volume: PathBuf,
        #[command(flatten)]
        plan: PlanArgs,
        #[command(flatten)]
        seg: SegArgs,
        /// Heat map PLY; a JSON sidecar is written next to it.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Grid reachability pass over an exported heat map.
    Reach {
        scene: PathBuf,
        #[arg(long)]
        heatmap: PathBuf,
        /// Overrides the sidecar target.
        #[arg(long, value_parser = point_arg, allow_hyphen_values = true)]
        target: Option<Point3>,
        #[arg(long)]
        grid_mm: Option<f64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Segment, build the heat map, check reachability and pick the entry.
    Plan {
        volume: PathBuf,
        #[command(flatten)]
        plan: PlanArgs,
        #[command(flatten)]
        seg: SegArgs,
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Also simulate the insertion (needs a scene).
        #[arg(long)]
        execute: bool,
        #[arg(long, default_value_t = 0.0)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 0.0)]
        axial_sigma: f64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    #[command(subcommand)]
    Calibrate(CalibrateCmd),
    #[command(subcommand)]
    Register(RegisterCmd),
    /// Placement deviations of an executed needle.
    Evaluate {
        #[arg(long, value_parser = point_arg, allow_hyphen_values = true)]
        target: Point3,
        #[arg(long, value_parser = point_arg, allow_hyphen_values = true)]
        entry: Point3,
        #[arg(long, value_parser = point_arg, allow_hyphen_values = true)]
        tip: Point3,
    },
    /// Run the TCP planning service.
    Serve {
        #[arg(long, default_value_t = format!("127.0.0.1:{DEFAULT_PORT}"))]
        bind: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 0.0)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 0.0)]
        axial_sigma: f64,
        /// Append one JSON line per executed plan.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        seg: SegArgs,
    },
    #[command(subcommand)]
    GenPhantom(GenCmd),
}

#[derive(Debug, Subcommand)]
enum CalibrateCmd {
    /// Solve base-from-camera and end-effector-from-marker.
    HandEye {
        samples: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum RegisterCmd {
    /// Locate the steel-ball phantom in a CT volume.
    Phantom {
        volume: PathBuf,
        /// Phantom model; the built-in layout by default.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = BALL_THRESHOLD_HU)]
        threshold: i16,
        #[arg(long, default_value_t = MATCH_TOLERANCE_MM)]
        tolerance_mm: f64,
        /// Writes sb_from_ct.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Compose base_from_ct from calibration and phantom registration.
    Chain {
        #[arg(long)]
        base_from_camera: PathBuf,
        #[arg(long)]
        camera_from_marker: PathBuf,
        #[arg(long)]
        marker_from_sb: PathBuf,
        #[arg(long)]
        sb_from_ct: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum GenCmd {
    /// Tissue ball in air at the origin.
    Sphere {
        #[arg(long, default_value_t = 100.0)]
        radius: f64,
        #[arg(long, default_value_t = 128)]
        dims: usize,
        #[arg(long, default_value_t = 2.0)]
        spacing: f64,
        #[arg(long, default_value_t = phantom::SOFT_TISSUE_HU)]
        hu: i16,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Torso with lungs, a bone shell around the target and an arm.
    Torso {
        #[arg(long, default_value_t = 128)]
        dims: usize,
        #[arg(long, default_value_t = 2.0)]
        spacing: f64,
        #[arg(long)]
        no_lungs: bool,
        #[arg(long)]
        no_bone: bool,
        #[arg(long)]
        no_arm: bool,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Steel-ball plate at a random pose; prints the true pose.
    Plate {
        #[arg(long, default_value_t = 180)]
        dims: usize,
        #[arg(long, default_value_t = 1.0)]
        spacing: f64,
        #[arg(short, long)]
        output: PathBuf,
        /// Also write the phantom model.
        #[arg(long)]
        model_output: Option<PathBuf>,
    },
    /// Hand-eye samples for random true transforms; prints the truth.
    Calibration {
        #[arg(long, default_value_t = 40)]
        samples: usize,
        #[arg(long, default_value_t = 0.0)]
        noise_mm: f64,
        #[arg(long, default_value_t = 0.0)]
        noise_deg: f64,
        #[arg(short, long)]
        output: PathBuf,
    },
}

fn point_arg(s: &str) -> Result<Point3, String> {
    parse_point(s).filter(|p| p.coords.iter().all(|v| v.is_finite())).ok_or_else(|| format!("expected x,y,z, got {s:?}"))
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn parse_path_pair(s: &str) -> Result<(PathBuf, PathBuf), String> {
    match s.split_once(',') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok((a.into(), b.into())),
        _ => Err("expected two comma-separated paths".into()),
    }
}

fn emit(out: &mut dyn Write, v: &serde_json::Value) -> Result<(), BoxError> {
    writeln!(out, "{}", serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), BoxError> {
    std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(())
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), BoxError> {
    let seed = cli.seed;
    match cli.command {
        Command::VolumeInfo { volume } => {
            let v = load_volume(&volume)?;
            let (lo, hi) = v.voxels().iter().fold((i16::MAX, i16::MIN), |(a, b), &x| (a.min(x), b.max(x)));
            let g = v.grid();
            emit(out, &json!({"dims": g.dims, "spacing": g.spacing, "origin": g.origin, "direction": g.direction, "min_hu": lo, "max_hu": hi}))
        }
        Command::Segment { volume, seg, output } => {
            let mut v = load_volume(&volume)?;
            if seg.downsample {
                v = v.downsample_half()?;
            }
            let mask = body_mask(&v, seg.threshold, seg.closing_mm)?;
            let skin = extract_surface(&mask)?;
            save_volume(&mask.to_volume(), &output.0)?;
            skin.save_ply(&output.1, None)?;
            emit(out, &json!({"body_voxels": mask.count(), "skin_vertices": skin.vertices.len(), "skin_triangles": skin.triangles.len(), "closed": skin.is_closed_oriented()}))
        }
        Command::Heatmap { volume, plan, seg, output } => {
            let pv = PreparedVolume::load(&volume, &seg.config())?;
            let hm = pv.heatmap(&plan.target, &plan.params()?, plan.workers)?;
            hm.save(&output)?;
            emit(out, &serde_json::to_value(PlanSummary::of(&hm, None))?)
        }
        Command::Reach { scene, heatmap, target, grid_mm, workers, output } => {
            let side: HeatMapSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(&heatmap)).map_err(|e| format!("heat map sidecar: {e}"))?)?;
            let (mesh, quality) = SurfaceMesh::load_ply(&heatmap)?;
            let quality = quality.ok_or("heat map PLY has no quality values")?;
            let target = target.unwrap_or(Point3::from(side.target));
            let mesh = Arc::new(mesh);
            let hm = HeatMap::from_ply((*mesh).clone(), &quality, target, side.params.clone())?;
            let scene = CollisionScene::load_with_body(&scene, Some(hm.mesh.clone()))?;
            let reach = grid_reachability(&scene, &hm, grid_mm.unwrap_or(side.params.grid_mm), workers)?;
            if let Some(o) = output {
                reach.heatmap.save(&o)?;
            }
            emit(out, &serde_json::to_value(PlanSummary::of(&reach.heatmap, Some(&reach)))?)
        }
        Command::Plan { volume, plan, seg, scene, execute, noise_sigma, axial_sigma, output } => {
            let pv = PreparedVolume::load(&volume, &seg.config())?;
            let scene = scene.map(|p| pv.load_scene(&p)).transpose()?;
            if execute && scene.is_none() {
                return Err("--execute needs --scene".into());
            }
            let p = pipeline::plan(&pv, &plan.target, &plan.params()?, scene.as_ref(), plan.workers)?;
            if let Some(o) = output {
                p.heatmap.save(&o)?;
            }
            let mut doc = json!({"plan": p.summary()});
            if execute {
                let noise = NoiseModel { lateral_sigma_mm: noise_sigma, axial_sigma_mm: axial_sigma };
                noise.validate()?;
                let entry = p.entry().ok_or("no feasible entry")?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let rec = pipeline::execute(scene.as_ref().expect("checked above"), &p.heatmap, entry, &noise, &mut rng)?;
                doc["record"] = serde_json::to_value(rec)?;
            }
            emit(out, &doc)
        }
        Command::Calibrate(CalibrateCmd::HandEye { samples, output }) => {
            let s = registration::load_samples(&samples)?;
            let r = registration::hand_eye_qr24(&s)?;
            let doc = serde_json::to_value(&r)?;
            if let Some(o) = output {
                write_text(&o, &serde_json::to_string_pretty(&doc)?)?;
            }
            emit(out, &doc)
        }
        Command::Register(RegisterCmd::Phantom { volume, model, threshold, tolerance_mm, output }) => {
            let v = load_volume(&volume)?;
            let model = match model {
                Some(p) => PhantomModel::load(&p)?,
                None => PhantomModel::reference(),
            };
            let dets = registration::detect_balls(&v, threshold)?;
            let m = registration::match_phantom(&dets, &model, tolerance_mm)?;
            let sb_from_ct = m.sb_from_ct();
            if let Some(o) = output {
                sb_from_ct.save(&o)?;
            }
            emit(out, &json!({"detections": dets.len(), "matched": m.matched(), "rms_mm": m.rms_mm, "ct_from_sb": m.ct_from_sb, "sb_from_ct": sb_from_ct, "correspondence": m.correspondence}))
        }
        Command::Register(RegisterCmd::Chain { base_from_camera, camera_from_marker, marker_from_sb, sb_from_ct, output }) => {
            let t = registration::compose_ct_registration(
                &RigidTransform::load(&base_from_camera)?,
                &RigidTransform::load(&camera_from_marker)?,
                &RigidTransform::load(&marker_from_sb)?,
                &RigidTransform::load(&sb_from_ct)?,
            );
            if let Some(o) = output {
                t.save(&o)?;
            }
            emit(out, &json!({"base_from_ct": t, "ct_in_base_origin": t.translation()}))
        }
        Command::Evaluate { target, entry, tip } => {
            let r = placement_report(&target, &entry, &tip)?;
            emit(out, &json!({"dev3d": r.deviation_3d_mm, "devlat": r.deviation_lateral_mm, "biopsy_center": r.biopsy_center}))
        }
        Command::Serve { bind, workers, noise_sigma, axial_sigma, log, seg } => {
            let config = ServiceConfig {
                workers,
                noise: NoiseModel { lateral_sigma_mm: noise_sigma, axial_sigma_mm: axial_sigma },
                seed,
                log_path: log,
                pipeline: seg.config(),
            };
            let server = Server::bind(bind.as_str(), config)?;
            writeln!(out, "listening on {}", server.local_addr()?)?;
            out.flush()?;
            server.run()?;
            Ok(())
        }
        Command::GenPhantom(g) => gen_phantom(g, seed, out),
    }
}

fn gen_phantom(cmd: GenCmd, seed: u64, out: &mut dyn Write) -> Result<(), BoxError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let check = |dims: usize, spacing: f64| -> Result<(), BoxError> {
        if dims < 8 || !(spacing > 0.0 && spacing.is_finite()) {
            return Err("dims must be at least 8 and spacing positive".into());
        }
        Ok(())
    };
    match cmd {
        GenCmd::Sphere { radius, dims, spacing, hu, output } => {
            check(dims, spacing)?;
            let half_fov = (dims as f64 - 1.0) * spacing / 2.0;
            if !(radius > 0.0 && radius < half_fov - spacing) {
                return Err(format!("radius must be positive and below {:.1} mm for this lattice", half_fov - spacing).into());
            }
            save_volume(&phantom::sphere(dims, spacing, radius, hu), &output)?;
            emit(out, &json!({"center": [0.0, 0.0, 0.0], "radius_mm": radius}))
        }
        GenCmd::Torso { dims, spacing, no_lungs, no_bone, no_arm, output } => {
            check(dims, spacing)?;
            let spec = TorsoSpec { dims, spacing_mm: spacing, lungs: !no_lungs, bone_shell: !no_bone, arm: !no_arm, ..Default::default() };
            let (v, truth) = phantom::torso(&spec);
            save_volume(&v, &output)?;
            emit(out, &serde_json::to_value(truth)?)
        }
        GenCmd::Plate { dims, spacing, output, model_output } => {
            check(dims, spacing)?;
            let model = PhantomModel::reference();
            let r = synth::random_transform(&mut rng, 5.0);
            let pose = RigidTransform::from_parts(*r.rotation(), r.translation() * spacing);
            save_volume(&phantom::ball_plate(&model, &pose, dims, spacing), &output)?;
            if let Some(m) = model_output {
                write_text(&m, &model.to_json_string())?;
            }
            emit(out, &json!({"ct_from_sb": pose, "sb_from_ct": pose.inverse()}))
        }
        GenCmd::Calibration { samples, noise_mm, noise_deg, output } => {
            if !(noise_mm >= 0.0 && noise_deg >= 0.0) {
                return Err("noise must be non-negative".into());
            }
            let x = synth::random_transform(&mut rng, 100.0);
            let z = synth::random_transform(&mut rng, 1000.0);
            let s = synth::synthetic_samples(&mut rng, &x, &z, samples, noise_mm, noise_deg);
            write_text(&output, &registration::samples_to_json_string(&s))?;
            emit(out, &json!({"ee_from_marker": x, "base_from_camera": z}))
        }
    }
}
