//! C ABI over the windowed-attention core: opaque handles, integer error
//! codes, and a thread-local last-error message. The header is generated
//! into `include/t3.h` by cbindgen at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use t3_core::attn::{full_attention_forward, AttnWeights, ModelDims};
use t3_core::cost::{macs_full, macs_t3};
use t3_core::error::T3Error;
use t3_core::grid::{build_layer_schedule, default_group, GridDims, LayerBlueprint, LayerSchedule};
use t3_core::retrofit::{export_weights, import_weights};
use t3_core::t3::{t3_forward, T3Layer};
use t3_core::tensor::{Rng, Tensor};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum T3Status {
    Ok = 0,
    InvalidArgument = 1,
    PlanError = 2,
    ShapeError = 3,
    IoError = 4,
    NumericError = 5,
    ManifestError = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_of(err: &T3Error) -> T3Status {
    match err {
        T3Error::Shape(_) | T3Error::Index(_) => T3Status::ShapeError,
        T3Error::Plan(_) | T3Error::Config(_) | T3Error::Spec(_) => T3Status::PlanError,
        T3Error::Numeric(_) | T3Error::Training { .. } => T3Status::NumericError,
        T3Error::Manifest(_) | T3Error::Json(_) => T3Status::ManifestError,
        T3Error::Io(_) => T3Status::IoError,
    }
}

fn fail(err: T3Error) -> T3Status {
    set_error(&err.to_string());
    status_of(&err)
}

/// Opaque model handle: per-layer shared projection weights plus dims.
pub struct T3Model {
    layers: Vec<AttnWeights<f32>>,
    dims: ModelDims,
}

/// Opaque schedule handle: resolved layer configs for one grid.
pub struct T3Schedule {
    grid: GridDims,
    schedule: LayerSchedule,
}

/// Message for the most recent error on this thread. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn t3_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn t3_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Creates a model with seeded random weights.
#[no_mangle]
pub extern "C" fn t3_model_new_random(
    channels: usize,
    heads: usize,
    ffn_width: usize,
    depth: usize,
    seed: u64,
    out_model: *mut *mut T3Model,
) -> T3Status {
    if out_model.is_null() {
        set_error("out_model is null");
        return T3Status::InvalidArgument;
    }
    let dims = match ModelDims::new(channels, heads, ffn_width, depth) {
        Ok(d) => d,
        Err(e) => return fail(e),
    };
    let mut rng = Rng::new(seed);
    let layers = (0..depth).map(|_| AttnWeights::random(channels, &mut rng)).collect();
    unsafe {
        *out_model = Box::into_raw(Box::new(T3Model { layers, dims }));
    }
    T3Status::Ok
}

#[no_mangle]
pub extern "C" fn t3_model_free(model: *mut T3Model) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Writes the model to a `.t3w` weight manifest.
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn t3_model_save(model: *const T3Model, path: *const c_char) -> T3Status {
    let Some(model) = model.as_ref() else {
        set_error("model is null");
        return T3Status::InvalidArgument;
    };
    let Ok(path) = CStr::from_ptr(path).to_str() else {
        set_error("path is not valid UTF-8");
        return T3Status::InvalidArgument;
    };
    let bytes = match export_weights(&model.layers, &model.dims) {
        Ok(b) => b,
        Err(e) => return fail(e),
    };
    match std::fs::write(Path::new(path), bytes) {
        Ok(()) => T3Status::Ok,
        Err(e) => fail(T3Error::Io(e)),
    }
}

/// Loads a model from a `.t3w` weight manifest (f32 payload).
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn t3_model_load(
    path: *const c_char,
    out_model: *mut *mut T3Model,
) -> T3Status {
    if out_model.is_null() {
        set_error("out_model is null");
        return T3Status::InvalidArgument;
    }
    let Ok(path) = CStr::from_ptr(path).to_str() else {
        set_error("path is not valid UTF-8");
        return T3Status::InvalidArgument;
    };
    let bytes = match std::fs::read(Path::new(path)) {
        Ok(b) => b,
        Err(e) => return fail(T3Error::Io(e)),
    };
    match import_weights::<f32>(&bytes) {
        Ok((layers, dims)) => {
            *out_model = Box::into_raw(Box::new(T3Model { layers, dims }));
            T3Status::Ok
        }
        Err(e) => fail(e),
    }
}

#[no_mangle]
pub extern "C" fn t3_model_channels(model: *const T3Model) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.dims.channels)
}

#[no_mangle]
pub extern "C" fn t3_model_depth(model: *const T3Model) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.dims.depth)
}

/// Builds the default 5-layer hierarchical schedule for a grid.
#[no_mangle]
pub extern "C" fn t3_schedule_default(
    t: usize,
    h: usize,
    w: usize,
    depth: usize,
    window_t: usize,
    window_h: usize,
    window_w: usize,
    out_schedule: *mut *mut T3Schedule,
) -> T3Status {
    if out_schedule.is_null() {
        set_error("out_schedule is null");
        return T3Status::InvalidArgument;
    }
    let grid = match GridDims::new(t, h, w) {
        Ok(g) => g,
        Err(e) => return fail(e),
    };
    let group = default_group([window_t, window_h, window_w]);
    match build_layer_schedule(depth, &group, grid) {
        Ok(schedule) => {
            unsafe {
                *out_schedule = Box::into_raw(Box::new(T3Schedule { grid, schedule }));
            }
            T3Status::Ok
        }
        Err(e) => fail(e),
    }
}

/// Builds a schedule from a JSON blueprint group (same schema as the CLI
/// config's `group` field).
///
/// # Safety
/// `json` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn t3_schedule_from_json(
    t: usize,
    h: usize,
    w: usize,
    depth: usize,
    json: *const c_char,
    out_schedule: *mut *mut T3Schedule,
) -> T3Status {
    if out_schedule.is_null() {
        set_error("out_schedule is null");
        return T3Status::InvalidArgument;
    }
    let Ok(json) = CStr::from_ptr(json).to_str() else {
        set_error("json is not valid UTF-8");
        return T3Status::InvalidArgument;
    };
    let grid = match GridDims::new(t, h, w) {
        Ok(g) => g,
        Err(e) => return fail(e),
    };
    let group: Vec<LayerBlueprint> = match serde_json_parse(json) {
        Ok(g) => g,
        Err(e) => return fail(e),
    };
    match build_layer_schedule(depth, &group, grid) {
        Ok(schedule) => {
            *out_schedule = Box::into_raw(Box::new(T3Schedule { grid, schedule }));
            T3Status::Ok
        }
        Err(e) => fail(e),
    }
}

fn serde_json_parse(json: &str) -> Result<Vec<LayerBlueprint>, T3Error> {
    t3_core::config::parse_blueprint_group(json)
}

#[no_mangle]
pub extern "C" fn t3_schedule_free(schedule: *mut T3Schedule) {
    if !schedule.is_null() {
        drop(unsafe { Box::from_raw(schedule) });
    }
}

/// Full-attention forward for one layer: `x` and `out` are row-major
/// L×C buffers with `len = L·C`.
///
/// # Safety
/// `x` and `out` must point to `len` valid f32 values.
#[no_mangle]
pub unsafe extern "C" fn t3_forward_full(
    model: *const T3Model,
    layer: usize,
    tokens: usize,
    x: *const f32,
    out: *mut f32,
    len: usize,
) -> T3Status {
    let Some(model) = model.as_ref() else {
        set_error("model is null");
        return T3Status::InvalidArgument;
    };
    if layer >= model.layers.len() {
        set_error("layer index out of range");
        return T3Status::InvalidArgument;
    }
    if len != tokens * model.dims.channels || x.is_null() || out.is_null() {
        set_error("buffer length must be tokens * channels and non-null");
        return T3Status::InvalidArgument;
    }
    let data = std::slice::from_raw_parts(x, len).to_vec();
    let input = match Tensor::new(vec![tokens, model.dims.channels], data) {
        Ok(t) => t,
        Err(e) => return fail(e),
    };
    match full_attention_forward(&input, &model.layers[layer], &model.dims) {
        Ok(y) => {
            std::slice::from_raw_parts_mut(out, len).copy_from_slice(y.data());
            T3Status::Ok
        }
        Err(e) => fail(e),
    }
}

/// Windowed multi-scale forward for one layer under a schedule.
///
/// # Safety
/// `x` and `out` must point to `len` valid f32 values.
#[no_mangle]
pub unsafe extern "C" fn t3_forward_windowed(
    model: *const T3Model,
    schedule: *const T3Schedule,
    layer: usize,
    x: *const f32,
    out: *mut f32,
    len: usize,
) -> T3Status {
    let Some(model) = model.as_ref() else {
        set_error("model is null");
        return T3Status::InvalidArgument;
    };
    let Some(sched) = schedule.as_ref() else {
        set_error("schedule is null");
        return T3Status::InvalidArgument;
    };
    if layer >= model.layers.len() || layer >= sched.schedule.depth {
        set_error("layer index out of range");
        return T3Status::InvalidArgument;
    }
    let l = sched.grid.len();
    if len != l * model.dims.channels || x.is_null() || out.is_null() {
        set_error("buffer length must be L * channels and non-null");
        return T3Status::InvalidArgument;
    }
    let data = std::slice::from_raw_parts(x, len).to_vec();
    let input = match Tensor::new(vec![l, model.dims.channels], data) {
        Ok(t) => t,
        Err(e) => return fail(e),
    };
    let t3_layer = match T3Layer::new(
        model.layers[layer].clone(),
        sched.schedule.config(layer).clone(),
        model.dims,
        sched.grid,
    ) {
        Ok(l) => l,
        Err(e) => return fail(e),
    };
    match t3_forward(&input, &t3_layer) {
        Ok(y) => {
            std::slice::from_raw_parts_mut(out, len).copy_from_slice(y.data());
            T3Status::Ok
        }
        Err(e) => fail(e),
    }
}

/// Attention-component MAC counts, full vs windowed, for a schedule.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct T3MacsReport {
    pub full_attn: u64,
    pub windowed_attn: u64,
    pub speedup_attn: f64,
}

#[no_mangle]
pub extern "C" fn t3_macs_attn(
    model: *const T3Model,
    schedule: *const T3Schedule,
    out_report: *mut T3MacsReport,
) -> T3Status {
    let Some(model) = (unsafe { model.as_ref() }) else {
        set_error("model is null");
        return T3Status::InvalidArgument;
    };
    let Some(sched) = (unsafe { schedule.as_ref() }) else {
        set_error("schedule is null");
        return T3Status::InvalidArgument;
    };
    if out_report.is_null() {
        set_error("out_report is null");
        return T3Status::InvalidArgument;
    }
    let mut dims = model.dims;
    dims.depth = sched.schedule.depth;
    let full = macs_full(sched.grid.len(), &dims, 0);
    let windowed = match macs_t3(&sched.schedule, sched.grid, &dims, 0) {
        Ok(m) => m,
        Err(e) => return fail(e),
    };
    unsafe {
        *out_report = T3MacsReport {
            full_attn: full.attn as u64,
            windowed_attn: windowed.attn as u64,
            speedup_attn: full.attn as f64 / windowed.attn as f64,
        };
    }
    T3Status::Ok
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;
    use std::ptr;

    #[test]
    fn random_model_roundtrips_through_file() {
        let mut model: *mut T3Model = ptr::null_mut();
        assert_eq!(
            t3_model_new_random(8, 2, 32, 1, 7, &mut model),
            T3Status::Ok
        );
        let dir = std::env::temp_dir().join("t3_ffi_roundtrip.t3w");
        let path = CString::new(dir.to_str().unwrap()).unwrap();
        unsafe {
            assert_eq!(t3_model_save(model, path.as_ptr()), T3Status::Ok);
            let mut loaded: *mut T3Model = ptr::null_mut();
            assert_eq!(t3_model_load(path.as_ptr(), &mut loaded), T3Status::Ok);
            assert_eq!((*loaded).layers, (*model).layers);
            t3_model_free(loaded);
            t3_model_free(model);
        }
        std::fs::remove_file(dir).ok();
    }

    #[test]
    fn windowed_forward_matches_core() {
        let mut model: *mut T3Model = ptr::null_mut();
        t3_model_new_random(8, 2, 32, 5, 9, &mut model);
        let mut schedule: *mut T3Schedule = ptr::null_mut();
        assert_eq!(
            t3_schedule_default(4, 8, 8, 5, 2, 4, 4, &mut schedule),
            T3Status::Ok
        );
        let l = 4 * 8 * 8;
        let mut rng = Rng::new(1);
        let x: Tensor<f32> = rng.uniform_tensor(vec![l, 8], -1.0, 1.0);
        let mut out = vec![0.0f32; l * 8];
        unsafe {
            assert_eq!(
                t3_forward_windowed(model, schedule, 0, x.data().as_ptr(), out.as_mut_ptr(), l * 8),
                T3Status::Ok
            );
            let model_ref = &*model;
            let schedule_ref = &*schedule;
            let core_layer = T3Layer::new(
                model_ref.layers[0].clone(),
                schedule_ref.schedule.config(0).clone(),
                model_ref.dims,
                schedule_ref.grid,
            )
            .unwrap();
            let expected = t3_forward(&x, &core_layer).unwrap();
            assert_eq!(out, expected.data());
            t3_schedule_free(schedule);
            t3_model_free(model);
        }
    }

    #[test]
    fn errors_set_message_and_status() {
        let mut model: *mut T3Model = ptr::null_mut();
        let status = t3_model_new_random(7, 2, 32, 1, 0, &mut model);
        assert_eq!(status, T3Status::ShapeError);
        let msg = unsafe { CStr::from_ptr(t3_last_error_message()) };
        assert!(msg.to_str().unwrap().contains("divisible"));
    }
}
