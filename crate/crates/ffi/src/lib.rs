//! C ABI over `hit-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_load` or
//! `hit_infer` and released by the matching `*_free`. Every fallible call
//! returns a [`HitStatus`]; on failure a message is available from
//! [`hit_last_error`] until the next failing call on the same thread.
//! Levels are numbered from 1, parts from 0. Point buffers are row-major
//! `n x 3` arrays of doubles.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use hit_core::checkpoint::Checkpoint;
use hit_core::encoder::PointCloud;
use hit_core::eval::snapshot;
use hit_core::geometry::{export_hierarchy, segment_points, HierarchySnapshot};
use hit_core::model::ModelConfig;
use hit_core::params::ParamStore;
use hit_core::HitError;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Checkpoint = 5,
    Dimension = 6,
    Numeric = 7,
    Config = 8,
    Panic = 9,
}

/// A trained model loaded from a checkpoint.
pub struct HitModel {
    params: ParamStore,
    config: ModelConfig,
}

/// A decoded part hierarchy.
pub struct HitHierarchy {
    snap: HierarchySnapshot,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &HitError) -> HitStatus {
    match e {
        HitError::Dimension(_) => HitStatus::Dimension,
        HitError::Numeric(_) => HitStatus::Numeric,
        HitError::InputDomain(_) => HitStatus::InvalidArgument,
        HitError::Config(_) => HitStatus::Config,
        HitError::Checkpoint(_) => HitStatus::Checkpoint,
        HitError::Format { .. } => HitStatus::Format,
        HitError::Io { .. } => HitStatus::Io,
    }
}

struct Fail(HitStatus, String);

impl From<HitError> for Fail {
    fn from(e: HitError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(HitStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(HitStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HitStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            HitStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn points_arg<'a>(p: *const f64, n: usize) -> Result<Vec<[f64; 3]>, Fail> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(null("points"));
    }
    let flat: &'a [f64] = std::slice::from_raw_parts(p, 3 * n);
    Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

unsafe fn out_slice<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn write_out<T>(p: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(v);
    Ok(())
}

fn check_level(snap: &HierarchySnapshot, level: usize) -> Result<(), Fail> {
    if level == 0 || level > snap.depth() {
        return Err(invalid(format!(
            "level {level} out of range 1..={}",
            snap.depth()
        )));
    }
    Ok(())
}

fn check_part(snap: &HierarchySnapshot, level: usize, part: usize) -> Result<(), Fail> {
    check_level(snap, level)?;
    let n = snap.levels[level - 1].convexes.len();
    if part >= n {
        return Err(invalid(format!("part {part} out of range 0..{n}")));
    }
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `hit train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hit_model_load(path: *const c_char, out: *mut *mut HitModel) -> HitStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let c = Checkpoint::load(path)?;
        let model = Box::new(HitModel {
            config: c.config.model(),
            params: c.params,
        });
        out.write(Box::into_raw(model));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`hit_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hit_model_free(model: *mut HitModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of levels the model decodes.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hit_model_num_levels(model: *const HitModel, out: *mut usize) -> HitStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        write_out(out, m.config.parts_per_level.len(), "out")
    })
}

/// Encodes `n_points` surface points and decodes their part hierarchy.
///
/// # Safety
/// `points` must hold `3 * n_points` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hit_infer(
    model: *const HitModel,
    points: *const f64,
    n_points: usize,
    out: *mut *mut HitHierarchy,
) -> HitStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cloud = PointCloud::new(points_arg(points, n_points)?);
        cloud.validate()?;
        let snap = snapshot(&m.params, &m.config, &cloud)?;
        out.write(Box::into_raw(Box::new(HitHierarchy { snap })));
        Ok(())
    })
}

/// Loads a hierarchy from a tree file written by `hit export`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hit_hierarchy_load_tree(
    path: *const c_char,
    out: *mut *mut HitHierarchy,
) -> HitStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let snap = HierarchySnapshot::load_tree(path)?;
        out.write(Box::into_raw(Box::new(HitHierarchy { snap })));
        Ok(())
    })
}

/// Releases a hierarchy. Null is ignored.
///
/// # Safety
/// `h` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hit_hierarchy_free(h: *mut HitHierarchy) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// # Safety
/// `h` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hit_hierarchy_num_levels(h: *const HitHierarchy, out: *mut usize) -> HitStatus {
    guard(|| write_out(out, ref_arg(h, "hierarchy")?.snap.depth(), "out"))
}

/// # Safety
/// `h` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hit_hierarchy_num_parts(
    h: *const HitHierarchy,
    level: usize,
    out: *mut usize,
) -> HitStatus {
    guard(|| {
        let s = &ref_arg(h, "hierarchy")?.snap;
        check_level(s, level)?;
        write_out(out, s.levels[level - 1].convexes.len(), "out")
    })
}

/// Parent index of a part, or -1 at level 1.
///
/// # Safety
/// `h` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hit_hierarchy_parent(
    h: *const HitHierarchy,
    level: usize,
    part: usize,
    out: *mut i64,
) -> HitStatus {
    guard(|| {
        let s = &ref_arg(h, "hierarchy")?.snap;
        check_part(s, level, part)?;
        let p = s.levels[level - 1].parents[part].map_or(-1, |p| p as i64);
        write_out(out, p, "out")
    })
}

/// Contained occupancy of one part at `n_points` points.
///
/// # Safety
/// `points` must hold `3 * n_points` doubles and `out` `n_points`.
#[no_mangle]
pub unsafe extern "C" fn hit_hierarchy_occupancy(
    h: *const HitHierarchy,
    level: usize,
    part: usize,
    points: *const f64,
    n_points: usize,
    out: *mut f64,
) -> HitStatus {
    guard(|| {
        let s = &ref_arg(h, "hierarchy")?.snap;
        check_part(s, level, part)?;
        let pts = points_arg(points, n_points)?;
        let dst = out_slice(out, n_points, "out")?;
        for (d, x) in dst.iter_mut().zip(&pts) {
            *d = s.contained(level, part, x);
        }
        Ok(())
    })
}

/// Occupancy of a level's union at `n_points` points.
///
/// # Safety
/// `points` must hold `3 * n_points` doubles and `out` `n_points`.
#[no_mangle]
pub unsafe extern "C" fn hit_hierarchy_union(
    h: *const HitHierarchy,
    level: usize,
    points: *const f64,
    n_points: usize,
    out: *mut f64,
) -> HitStatus {
    guard(|| {
        let s = &ref_arg(h, "hierarchy")?.snap;
        check_level(s, level)?;
        let pts = points_arg(points, n_points)?;
        let dst = out_slice(out, n_points, "out")?;
        for (d, x) in dst.iter_mut().zip(&pts) {
            *d = s.union(level, x);
        }
        Ok(())
    })
}

/// Part index with the highest contained occupancy at each point, lowest
/// index on ties.
///
/// # Safety
/// `points` must hold `3 * n_points` doubles and `out` `n_points`.
#[no_mangle]
pub unsafe extern "C" fn hit_hierarchy_segment(
    h: *const HitHierarchy,
    level: usize,
    points: *const f64,
    n_points: usize,
    out: *mut usize,
) -> HitStatus {
    guard(|| {
        let s = &ref_arg(h, "hierarchy")?.snap;
        check_level(s, level)?;
        let pts = points_arg(points, n_points)?;
        let dst = out_slice(out, n_points, "out")?;
        if pts.is_empty() {
            return Ok(());
        }
        let seg = segment_points(&s.level_contained(level, &pts))?;
        dst.copy_from_slice(&seg);
        Ok(())
    })
}

/// Writes one OBJ mesh per non-empty part and a tree file into `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hit_hierarchy_export(
    h: *const HitHierarchy,
    dir: *const c_char,
    resolution: usize,
) -> HitStatus {
    guard(|| {
        let s = &ref_arg(h, "hierarchy")?.snap;
        let dir = path_arg(dir, "dir")?;
        export_hierarchy(s, &dir, resolution, 0.5)?;
        Ok(())
    })
}
