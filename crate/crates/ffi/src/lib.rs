//! C ABI over the staingraph library.
//!
//! Conventions:
//! - Handles (`SgModel`, `SgDataset`) are opaque; C sees pointers only and
//!   releases them with the matching `sg_*_free` function.
//! - Every fallible function returns an `int32_t` status: `SG_OK` (0) on
//!   success, a negative `SG_ERR_*` code otherwise. Results come back
//!   through out-parameters.
//! - `sg_last_error()` returns a thread-local message for the most recent
//!   failure on the calling thread.
//! - Strings returned as `char*` are owned by the caller and released with
//!   `sg_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use staingraph::commands::load_or_build_graphs;
use staingraph::data::{prepare_patients, PreparedPatient};
use staingraph::error::Error;
use staingraph::explain::build_stain_report;
use staingraph::io::load_checkpoint;
use staingraph::model::{forward, ForwardMode, ModelConfig, ModelParams};
use staingraph::training::class_probabilities;

pub const SG_OK: i32 = 0;
/// Invalid configuration or arguments.
pub const SG_ERR_USAGE: i32 = -1;
/// I/O or runtime failure.
pub const SG_ERR_RUNTIME: i32 = -2;
/// A required pointer argument was null.
pub const SG_ERR_NULL: i32 = -3;
/// An out-buffer was too small.
pub const SG_ERR_BUFFER: i32 = -4;
/// An index was out of range.
pub const SG_ERR_INDEX: i32 = -5;
/// A panic was caught at the boundary.
pub const SG_ERR_PANIC: i32 = -6;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let sanitized: String = message.chars().filter(|c| *c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap();
    });
}

fn code_for(err: &Error) -> i32 {
    match err.exit_code() {
        1 => SG_ERR_USAGE,
        _ => SG_ERR_RUNTIME,
    }
}

/// Message for the most recent failure on this thread; valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn sg_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn sg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// A loaded checkpoint: configuration plus parameters.
pub struct SgModel {
    config: ModelConfig,
    params: ModelParams,
}

/// A dataset with graphs built and positional encodings precomputed for a
/// given walk length.
pub struct SgDataset {
    class_names: Vec<String>,
    patients: Vec<PreparedPatient>,
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, i32> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(SG_ERR_NULL);
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        SG_ERR_NULL
    })
}

fn guarded(body: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(code) => code,
        Err(_) => {
            set_error("internal panic");
            SG_ERR_PANIC
        }
    }
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be a valid
/// pointer. On success `*out` owns the model until `sg_model_free`.
#[no_mangle]
pub unsafe extern "C" fn sg_model_load(path: *const c_char, out: *mut *mut SgModel) -> i32 {
    guarded(|| {
        if out.is_null() {
            set_error("null out pointer");
            return SG_ERR_NULL;
        }
        let path = match unsafe { cstr_arg(path) } {
            Ok(p) => p,
            Err(code) => return code,
        };
        match load_checkpoint(Path::new(path)) {
            Ok((config, params)) => {
                unsafe { *out = Box::into_raw(Box::new(SgModel { config, params })) };
                SG_OK
            }
            Err(e) => {
                set_error(&e.to_string());
                code_for(&e)
            }
        }
    })
}

/// Releases a model handle; a null pointer is a no-op.
///
/// # Safety
/// `model` must come from `sg_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sg_model_free(model: *mut SgModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of output classes of a loaded model.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sg_model_num_classes(model: *const SgModel, out: *mut u32) -> i32 {
    guarded(|| {
        if model.is_null() || out.is_null() {
            set_error("null argument");
            return SG_ERR_NULL;
        }
        unsafe { *out = (*model).config.num_classes as u32 };
        SG_OK
    })
}

/// Loads a dataset manifest and builds (or reads back) the patient graphs
/// using the model's graph-construction parameters and walk length.
///
/// # Safety
/// `manifest` must be a valid NUL-terminated path; `model` and `out` must be
/// valid pointers. On success `*out` owns the dataset until
/// `sg_dataset_free`.
#[no_mangle]
pub unsafe extern "C" fn sg_dataset_load(
    manifest: *const c_char,
    model: *const SgModel,
    out: *mut *mut SgDataset,
) -> i32 {
    guarded(|| {
        if model.is_null() || out.is_null() {
            set_error("null argument");
            return SG_ERR_NULL;
        }
        let manifest = match unsafe { cstr_arg(manifest) } {
            Ok(p) => p,
            Err(code) => return code,
        };
        let config = unsafe { &(*model).config };
        let loaded = load_or_build_graphs(Path::new(manifest), config.knn_k).and_then(|dataset| {
            Ok((
                dataset.class_names.clone(),
                prepare_patients(&dataset, config)?,
            ))
        });
        match loaded {
            Ok((class_names, patients)) => {
                unsafe {
                    *out = Box::into_raw(Box::new(SgDataset {
                        class_names,
                        patients,
                    }))
                };
                SG_OK
            }
            Err(e) => {
                set_error(&e.to_string());
                code_for(&e)
            }
        }
    })
}

/// Releases a dataset handle; a null pointer is a no-op.
///
/// # Safety
/// `dataset` must come from `sg_dataset_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sg_dataset_free(dataset: *mut SgDataset) {
    if !dataset.is_null() {
        drop(unsafe { Box::from_raw(dataset) });
    }
}

/// Number of patients in a dataset.
///
/// # Safety
/// `dataset` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sg_dataset_len(dataset: *const SgDataset, out: *mut u32) -> i32 {
    guarded(|| {
        if dataset.is_null() || out.is_null() {
            set_error("null argument");
            return SG_ERR_NULL;
        }
        unsafe { *out = (*dataset).patients.len() as u32 };
        SG_OK
    })
}

/// Patient id at `index`, as a caller-owned string.
///
/// # Safety
/// `dataset` and `out` must be valid pointers; free the string with
/// `sg_string_free`.
#[no_mangle]
pub unsafe extern "C" fn sg_dataset_patient_id(
    dataset: *const SgDataset,
    index: u32,
    out: *mut *mut c_char,
) -> i32 {
    guarded(|| {
        if dataset.is_null() || out.is_null() {
            set_error("null argument");
            return SG_ERR_NULL;
        }
        let patients = unsafe { &(*dataset).patients };
        match patients.get(index as usize) {
            Some(p) => {
                let c = CString::new(p.id.clone()).unwrap_or_default();
                unsafe { *out = c.into_raw() };
                SG_OK
            }
            None => {
                set_error(&format!(
                    "patient index {index} out of range ({} patients)",
                    patients.len()
                ));
                SG_ERR_INDEX
            }
        }
    })
}

/// Ground-truth label index of the patient at `index`.
///
/// # Safety
/// `dataset` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sg_dataset_label(
    dataset: *const SgDataset,
    index: u32,
    out: *mut u32,
) -> i32 {
    guarded(|| {
        if dataset.is_null() || out.is_null() {
            set_error("null argument");
            return SG_ERR_NULL;
        }
        let patients = unsafe { &(*dataset).patients };
        match patients.get(index as usize) {
            Some(p) => {
                unsafe { *out = p.label as u32 };
                SG_OK
            }
            None => {
                set_error(&format!(
                    "patient index {index} out of range ({} patients)",
                    patients.len()
                ));
                SG_ERR_INDEX
            }
        }
    })
}

/// Runs one evaluation-mode forward pass and writes the class probabilities
/// into `out_probs` (length `len`, which must equal the model's class
/// count).
///
/// # Safety
/// All pointers must be valid and `out_probs` must have space for `len`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn sg_predict(
    model: *const SgModel,
    dataset: *const SgDataset,
    index: u32,
    out_probs: *mut f64,
    len: usize,
) -> i32 {
    guarded(|| {
        if model.is_null() || dataset.is_null() || out_probs.is_null() {
            set_error("null argument");
            return SG_ERR_NULL;
        }
        let model = unsafe { &*model };
        let patients = unsafe { &(*dataset).patients };
        let Some(p) = patients.get(index as usize) else {
            set_error(&format!(
                "patient index {index} out of range ({} patients)",
                patients.len()
            ));
            return SG_ERR_INDEX;
        };
        if len != model.config.num_classes {
            set_error(&format!(
                "probability buffer holds {len} values, model has {} classes",
                model.config.num_classes
            ));
            return SG_ERR_BUFFER;
        }
        match forward(
            &model.params,
            &p.graph,
            p.pe.as_ref(),
            &model.config,
            ForwardMode::Eval,
        ) {
            Ok(fwd) => {
                let probs = class_probabilities(fwd.tape.data(fwd.logits));
                unsafe { std::ptr::copy_nonoverlapping(probs.as_ptr(), out_probs, len) };
                SG_OK
            }
            Err(e) => {
                set_error(&e.to_string());
                code_for(&e)
            }
        }
    })
}

/// Runs one forward pass and returns the full explainability report as a
/// JSON document (stain attention, entropy, interactions, layer importance,
/// heatmap entries).
///
/// # Safety
/// All pointers must be valid; free the returned string with
/// `sg_string_free`.
#[no_mangle]
pub unsafe extern "C" fn sg_explain_json(
    model: *const SgModel,
    dataset: *const SgDataset,
    index: u32,
    out_json: *mut *mut c_char,
) -> i32 {
    guarded(|| {
        if model.is_null() || dataset.is_null() || out_json.is_null() {
            set_error("null argument");
            return SG_ERR_NULL;
        }
        let model = unsafe { &*model };
        let ds = unsafe { &*dataset };
        let Some(p) = ds.patients.get(index as usize) else {
            set_error(&format!(
                "patient index {index} out of range ({} patients)",
                ds.patients.len()
            ));
            return SG_ERR_INDEX;
        };
        let report = forward(
            &model.params,
            &p.graph,
            p.pe.as_ref(),
            &model.config,
            ForwardMode::Eval,
        )
        .and_then(|fwd| {
            let probs = class_probabilities(fwd.tape.data(fwd.logits));
            build_stain_report(&p.id, Some(p.label), probs, &fwd.record, &p.graph)
        });
        match report {
            Ok(report) => {
                let stains = &report.interaction.stains;
                let interaction: Vec<serde_json::Value> = (0..stains.len())
                    .flat_map(|i| {
                        let stains = stains.clone();
                        let report = &report;
                        (i..stains.len()).map(move |j| {
                            serde_json::json!({
                                "a": stains[i],
                                "b": stains[j],
                                "mean_attention": report.interaction.get(i, j),
                            })
                        })
                    })
                    .collect();
                let heatmap: Vec<serde_json::Value> = report
                    .heatmap
                    .iter()
                    .map(|e| serde_json::json!({ "slide": e.slide_id, "x": e.x, "y": e.y, "score": e.score }))
                    .collect();
                let value = serde_json::json!({
                    "patient": report.patient_id,
                    "label": report.label,
                    "class_names": ds.class_names,
                    "class_probabilities": report.class_probabilities,
                    "per_layer_alpha": report.per_layer_alpha,
                    "aggregate_alpha": report.aggregate_alpha,
                    "per_layer_entropy": report.per_layer_entropy,
                    "aggregate_entropy": report.aggregate_entropy,
                    "interaction": interaction,
                    "layer_importance": report.layer_importance,
                    "heatmap": heatmap,
                });
                let text = serde_json::to_string(&value).unwrap_or_default();
                unsafe { *out_json = CString::new(text).unwrap_or_default().into_raw() };
                SG_OK
            }
            Err(e) => {
                set_error(&e.to_string());
                code_for(&e)
            }
        }
    })
}

/// Releases a string returned by this library; a null pointer is a no-op.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn sg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}
