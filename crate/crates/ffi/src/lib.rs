//! C ABI over the planning library.
//!
//! Objects are opaque handles created by `*_load`/`*_build` and released
//! with the matching `*_free`. Every fallible call returns an [`NpStatus`];
//! on failure a description is kept per thread and can be fetched with
//! [`np_last_error_message`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use needleplan::collision::{grid_reachability, CollisionError, CollisionScene};
use needleplan::geometry::Point3;
use needleplan::pipeline::{PipelineConfig, PipelineError, PreparedVolume};
use needleplan::planner::{placement_report, HeatMap, PlanError, PlanParams};
use needleplan::segmentation::{DEFAULT_CLOSING_RADIUS_MM, DEFAULT_SKIN_THRESHOLD_HU};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    TargetOutsideBody = 5,
    NoFeasibleEntry = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

/// Segmentation settings used when a volume is loaded.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct NpSegmentOptions {
    pub skin_threshold_hu: i16,
    pub closing_radius_mm: f64,
    /// Non-zero halves the lattice first.
    pub downsample: i32,
}

/// CT volume with its body mask and skin surface.
pub struct NpVolume {
    inner: PreparedVolume,
}

/// Entry-point heat map for one target.
pub struct NpHeatMap {
    inner: HeatMap,
}

/// Arm, obstacles and base placement.
pub struct NpScene {
    inner: CollisionScene,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: NpStatus, message: impl Into<String>) -> NpStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = message.into());
    status
}

fn guard(f: impl FnOnce() -> NpStatus) -> NpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(NpStatus::Internal, "internal panic"),
    }
}

fn pipeline_status(e: &PipelineError) -> NpStatus {
    match e {
        PipelineError::Io(_) => NpStatus::Io,
        PipelineError::Plan(PlanError::TargetOutsideBody) => NpStatus::TargetOutsideBody,
        PipelineError::Plan(PlanError::InvalidParams(_)) | PipelineError::Plan(PlanError::DegenerateNeedle) => NpStatus::InvalidArgument,
        PipelineError::Collision(CollisionError::Io(_)) => NpStatus::Io,
        PipelineError::Volume(_) | PipelineError::Segmentation(_) | PipelineError::Collision(_) => NpStatus::Format,
        _ => NpStatus::Internal,
    }
}

fn from_pipeline(e: PipelineError) -> NpStatus {
    let s = pipeline_status(&e);
    fail(s, e.to_string())
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, NpStatus> {
    if p.is_null() {
        return Err(fail(NpStatus::NullPointer, "path is null"));
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => Err(fail(NpStatus::InvalidArgument, "path is not UTF-8")),
    }
}

unsafe fn point_arg(p: *const f64) -> Result<Point3, NpStatus> {
    if p.is_null() {
        return Err(fail(NpStatus::NullPointer, "point is null"));
    }
    let v = std::slice::from_raw_parts(p, 3);
    if v.iter().any(|x| !x.is_finite()) {
        return Err(fail(NpStatus::InvalidArgument, "point has non-finite coordinates"));
    }
    Ok(Point3::new(v[0], v[1], v[2]))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn np_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length
/// excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn np_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

#[no_mangle]
pub extern "C" fn np_segment_options_default() -> NpSegmentOptions {
    NpSegmentOptions { skin_threshold_hu: DEFAULT_SKIN_THRESHOLD_HU, closing_radius_mm: DEFAULT_CLOSING_RADIUS_MM, downsample: 0 }
}

/// Loads an NRRD volume and segments the body.
///
/// # Safety
/// `path` must be a NUL-terminated string, `options` null or valid, and
/// `out` a valid pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn np_volume_load(path: *const c_char, options: *const NpSegmentOptions, out: *mut *mut NpVolume) -> NpStatus {
    guard(|| {
        if out.is_null() {
            return fail(NpStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let o = if options.is_null() { np_segment_options_default() } else { *options };
        let cfg = PipelineConfig { skin_threshold_hu: o.skin_threshold_hu, closing_radius_mm: o.closing_radius_mm, downsample: o.downsample != 0 };
        match PreparedVolume::load(&path, &cfg) {
            Ok(pv) => {
                *out = Box::into_raw(Box::new(NpVolume { inner: pv }));
                NpStatus::Ok
            }
            Err(e) => from_pipeline(e),
        }
    })
}

/// Lattice size in voxels (`dims[3]`) and spacing in mm (`spacing[3]`);
/// either output may be null.
///
/// # Safety
/// `volume` must come from [`np_volume_load`]; outputs hold three values.
#[no_mangle]
pub unsafe extern "C" fn np_volume_dims(volume: *const NpVolume, dims: *mut usize, spacing: *mut f64) -> NpStatus {
    guard(|| {
        let Some(v) = volume.as_ref() else { return fail(NpStatus::NullPointer, "volume is null") };
        if !dims.is_null() {
            ptr::copy_nonoverlapping(v.inner.volume.dims().as_ptr(), dims, 3);
        }
        if !spacing.is_null() {
            ptr::copy_nonoverlapping(v.inner.volume.spacing().as_ptr(), spacing, 3);
        }
        NpStatus::Ok
    })
}

/// Number of skin surface vertices.
///
/// # Safety
/// `volume` must be null or come from [`np_volume_load`].
#[no_mangle]
pub unsafe extern "C" fn np_volume_skin_vertex_count(volume: *const NpVolume) -> usize {
    volume.as_ref().map_or(0, |v| v.inner.skin.vertices.len())
}

/// # Safety
/// `volume` must be null or come from [`np_volume_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn np_volume_free(volume: *mut NpVolume) {
    if !volume.is_null() {
        drop(Box::from_raw(volume));
    }
}

/// Builds the heat map for `target[3]`. `params_json` may be null for the
/// defaults; `workers` of 0 or 1 runs serially.
///
/// # Safety
/// Pointers must be valid as described; `out` receives the handle.
#[no_mangle]
pub unsafe extern "C" fn np_heatmap_build(
    volume: *const NpVolume,
    target: *const f64,
    params_json: *const c_char,
    workers: usize,
    out: *mut *mut NpHeatMap,
) -> NpStatus {
    guard(|| {
        if out.is_null() {
            return fail(NpStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let Some(v) = volume.as_ref() else { return fail(NpStatus::NullPointer, "volume is null") };
        let target = match point_arg(target) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let params = if params_json.is_null() {
            PlanParams::default()
        } else {
            let text = match CStr::from_ptr(params_json).to_str() {
                Ok(t) => t,
                Err(_) => return fail(NpStatus::InvalidArgument, "params are not UTF-8"),
            };
            match serde_json::from_str::<PlanParams>(text) {
                Ok(p) => p,
                Err(e) => return fail(NpStatus::InvalidArgument, format!("params: {e}")),
            }
        };
        match v.inner.heatmap(&target, &params, workers.max(1)) {
            Ok(hm) => {
                *out = Box::into_raw(Box::new(NpHeatMap { inner: hm }));
                NpStatus::Ok
            }
            Err(e) => from_pipeline(e),
        }
    })
}

/// Number of heat-map vertices.
///
/// # Safety
/// `heatmap` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn np_heatmap_vertex_count(heatmap: *const NpHeatMap) -> usize {
    heatmap.as_ref().map_or(0, |h| h.inner.len())
}

/// Per-vertex quality (normalised cost in [0, 1] or a class sentinel
/// above 1) into `out[len]`.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn np_heatmap_quality(heatmap: *const NpHeatMap, out: *mut f64, len: usize) -> NpStatus {
    guard(|| {
        let Some(h) = heatmap.as_ref() else { return fail(NpStatus::NullPointer, "heatmap is null") };
        if out.is_null() {
            return fail(NpStatus::NullPointer, "out is null");
        }
        let q = h.inner.quality();
        if len < q.len() {
            return fail(NpStatus::BufferTooSmall, format!("need {} values", q.len()));
        }
        ptr::copy_nonoverlapping(q.as_ptr(), out, q.len());
        NpStatus::Ok
    })
}

/// Optimal entry vertex and its position (`position[3]`, may be null).
///
/// # Safety
/// Pointers must be valid as described.
#[no_mangle]
pub unsafe extern "C" fn np_heatmap_optimal(heatmap: *const NpHeatMap, vertex: *mut usize, position: *mut f64) -> NpStatus {
    guard(|| {
        let Some(h) = heatmap.as_ref() else { return fail(NpStatus::NullPointer, "heatmap is null") };
        let Some(i) = h.inner.optimal_index else { return fail(NpStatus::NoFeasibleEntry, "no feasible entry point") };
        if !vertex.is_null() {
            *vertex = i;
        }
        if !position.is_null() {
            let p = h.inner.candidates[i].position;
            ptr::copy_nonoverlapping(p.coords.as_ptr(), position, 3);
        }
        NpStatus::Ok
    })
}

/// Writes the heat map as PLY plus its JSON sidecar.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn np_heatmap_save(heatmap: *const NpHeatMap, path: *const c_char) -> NpStatus {
    guard(|| {
        let Some(h) = heatmap.as_ref() else { return fail(NpStatus::NullPointer, "heatmap is null") };
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match h.inner.save(&path) {
            Ok(()) => NpStatus::Ok,
            Err(e) => from_pipeline(e.into()),
        }
    })
}

/// # Safety
/// `heatmap` must be null or a live handle, freed once.
#[no_mangle]
pub unsafe extern "C" fn np_heatmap_free(heatmap: *mut NpHeatMap) {
    if !heatmap.is_null() {
        drop(Box::from_raw(heatmap));
    }
}

/// Loads a scene file. If the file names no body mesh, the skin of
/// `volume` is used (which must then be non-null).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` receives the handle.
#[no_mangle]
pub unsafe extern "C" fn np_scene_load(path: *const c_char, volume: *const NpVolume, out: *mut *mut NpScene) -> NpStatus {
    guard(|| {
        if out.is_null() {
            return fail(NpStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let skin = volume.as_ref().map(|v| v.inner.skin.clone());
        match CollisionScene::load_with_body(&path, skin) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(NpScene { inner: s }));
                NpStatus::Ok
            }
            Err(e) => from_pipeline(e.into()),
        }
    })
}

/// # Safety
/// `scene` must be null or a live handle, freed once.
#[no_mangle]
pub unsafe extern "C" fn np_scene_free(scene: *mut NpScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Grid reachability pass: marks unreachable cells in place and moves the
/// optimum to a reachable vertex. `grid_mm <= 0` uses the heat map's own
/// grid size.
///
/// # Safety
/// Both handles must be live.
#[no_mangle]
pub unsafe extern "C" fn np_heatmap_apply_reachability(heatmap: *mut NpHeatMap, scene: *const NpScene, grid_mm: f64, workers: usize) -> NpStatus {
    guard(|| {
        let Some(h) = heatmap.as_mut() else { return fail(NpStatus::NullPointer, "heatmap is null") };
        let Some(s) = scene.as_ref() else { return fail(NpStatus::NullPointer, "scene is null") };
        let grid = if grid_mm > 0.0 { grid_mm } else { h.inner.params.grid_mm };
        match grid_reachability(&s.inner, &h.inner, grid, workers.max(1)) {
            Ok(r) => {
                h.inner = r.heatmap;
                NpStatus::Ok
            }
            Err(e) => from_pipeline(e.into()),
        }
    })
}

/// 3D and lateral deviation of a placed needle.
///
/// # Safety
/// Points hold three doubles; outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn np_placement_report(target: *const f64, entry: *const f64, tip: *const f64, dev_3d_mm: *mut f64, dev_lateral_mm: *mut f64) -> NpStatus {
    guard(|| {
        let pts = (point_arg(target), point_arg(entry), point_arg(tip));
        let (Ok(t), Ok(e), Ok(p)) = pts else {
            return [pts.0.err(), pts.1.err(), pts.2.err()].into_iter().flatten().next().expect("one failed");
        };
        match placement_report(&t, &e, &p) {
            Ok(r) => {
                if !dev_3d_mm.is_null() {
                    *dev_3d_mm = r.deviation_3d_mm;
                }
                if !dev_lateral_mm.is_null() {
                    *dev_lateral_mm = r.deviation_lateral_mm;
                }
                NpStatus::Ok
            }
            Err(e) => from_pipeline(e.into()),
        }
    })
}
