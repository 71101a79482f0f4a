//! Exercises the C ABI end to end from Rust: checkpoint + manifest on disk,
//! then load, predict, and explain through the extern "C" surface.

use std::ffi::{CStr, CString};
use std::ptr;

use staingraph::commands::write_raw_dataset;
use staingraph::io::save_checkpoint;
use staingraph::model::{ModelConfig, ModelParams};
use staingraph::synth::{generate_patients, SynthSpec};

use staingraph_ffi::*;

fn setup() -> (tempfile::TempDir, CString, CString) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        patients_per_class: 3,
        nodes_per_slide: (4, 6),
        feature_dim: 4,
        grid_size: 8,
        seed: 5,
        ..SynthSpec::default()
    };
    let raw = generate_patients(&spec).unwrap();
    let manifest = write_raw_dataset(&raw, &dir.path().join("data")).unwrap();

    let config = ModelConfig {
        layers: 2,
        hidden_dim: 4,
        pe_dim: 3,
        pool_ratio: 0.7,
        gat_heads: 2,
        mhsa_heads: 2,
        dropout: 0.2,
        num_classes: 2,
        knn_k: 3,
        seed: 7,
        input_dim: 4,
        leaky_slope: 0.2,
    };
    let params = ModelParams::init(&config, 7).unwrap();
    let ckpt = dir.path().join("model.bxc");
    save_checkpoint(&ckpt, &config, &params).unwrap();

    let manifest_c = CString::new(manifest.to_str().unwrap()).unwrap();
    let ckpt_c = CString::new(ckpt.to_str().unwrap()).unwrap();
    (dir, manifest_c, ckpt_c)
}

#[test]
fn version_is_non_empty() {
    let v = unsafe { CStr::from_ptr(sg_version()) };
    assert!(!v.to_str().unwrap().is_empty());
}

#[test]
fn full_scoring_flow() {
    let (_dir, manifest, ckpt) = setup();

    let mut model: *mut SgModel = ptr::null_mut();
    assert_eq!(unsafe { sg_model_load(ckpt.as_ptr(), &mut model) }, SG_OK);
    assert!(!model.is_null());

    let mut classes = 0u32;
    assert_eq!(unsafe { sg_model_num_classes(model, &mut classes) }, SG_OK);
    assert_eq!(classes, 2);

    let mut dataset: *mut SgDataset = ptr::null_mut();
    assert_eq!(
        unsafe { sg_dataset_load(manifest.as_ptr(), model, &mut dataset) },
        SG_OK
    );

    let mut len = 0u32;
    assert_eq!(unsafe { sg_dataset_len(dataset, &mut len) }, SG_OK);
    assert_eq!(len, 6);

    let mut id_ptr: *mut std::ffi::c_char = ptr::null_mut();
    assert_eq!(
        unsafe { sg_dataset_patient_id(dataset, 0, &mut id_ptr) },
        SG_OK
    );
    let id = unsafe { CStr::from_ptr(id_ptr) }
        .to_str()
        .unwrap()
        .to_string();
    assert_eq!(id, "p0000");
    unsafe { sg_string_free(id_ptr) };

    let mut label = 99u32;
    assert_eq!(unsafe { sg_dataset_label(dataset, 0, &mut label) }, SG_OK);
    assert_eq!(label, 0);

    let mut probs = [0.0f64; 2];
    assert_eq!(
        unsafe { sg_predict(model, dataset, 0, probs.as_mut_ptr(), 2) },
        SG_OK
    );
    assert!((probs[0] + probs[1] - 1.0).abs() < 1e-12);
    assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));

    // Same patient scored twice gives identical probabilities.
    let mut probs2 = [0.0f64; 2];
    assert_eq!(
        unsafe { sg_predict(model, dataset, 0, probs2.as_mut_ptr(), 2) },
        SG_OK
    );
    assert_eq!(probs, probs2);

    let mut json_ptr: *mut std::ffi::c_char = ptr::null_mut();
    assert_eq!(
        unsafe { sg_explain_json(model, dataset, 0, &mut json_ptr) },
        SG_OK
    );
    let json = unsafe { CStr::from_ptr(json_ptr) }
        .to_str()
        .unwrap()
        .to_string();
    unsafe { sg_string_free(json_ptr) };
    let value: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(value["patient"], "p0000");
    let alpha = value["aggregate_alpha"].as_object().unwrap();
    let total: f64 = alpha.values().map(|v| v.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert!(value["heatmap"].as_array().unwrap().len() >= 4);

    unsafe { sg_dataset_free(dataset) };
    unsafe { sg_model_free(model) };
}

#[test]
fn error_paths_set_codes_and_messages() {
    let (_dir, manifest, ckpt) = setup();

    // Missing checkpoint: runtime error with a message.
    let missing = CString::new("/nonexistent/model.bxc").unwrap();
    let mut model: *mut SgModel = ptr::null_mut();
    assert_eq!(
        unsafe { sg_model_load(missing.as_ptr(), &mut model) },
        SG_ERR_RUNTIME
    );
    let msg = unsafe { CStr::from_ptr(sg_last_error()) }.to_str().unwrap();
    assert!(!msg.is_empty());

    // Null arguments.
    assert_eq!(
        unsafe { sg_model_load(ptr::null(), &mut model) },
        SG_ERR_NULL
    );
    assert_eq!(
        unsafe { sg_model_num_classes(ptr::null(), &mut 0u32) },
        SG_ERR_NULL
    );

    // Wrong buffer size and bad index.
    assert_eq!(unsafe { sg_model_load(ckpt.as_ptr(), &mut model) }, SG_OK);
    let mut dataset: *mut SgDataset = ptr::null_mut();
    assert_eq!(
        unsafe { sg_dataset_load(manifest.as_ptr(), model, &mut dataset) },
        SG_OK
    );
    let mut probs = [0.0f64; 3];
    assert_eq!(
        unsafe { sg_predict(model, dataset, 0, probs.as_mut_ptr(), 3) },
        SG_ERR_BUFFER
    );
    assert_eq!(
        unsafe { sg_predict(model, dataset, 999, probs.as_mut_ptr(), 2) },
        SG_ERR_INDEX
    );

    unsafe { sg_dataset_free(dataset) };
    unsafe { sg_model_free(model) };

    // Frees of null are harmless.
    unsafe { sg_dataset_free(ptr::null_mut()) };
    unsafe { sg_model_free(ptr::null_mut()) };
    unsafe { sg_string_free(ptr::null_mut()) };
}

#[test]
fn generated_header_exists_with_expected_symbols() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/staingraph.h");
    let text = std::fs::read_to_string(header).expect("header generated by build script");
    for symbol in [
        "sg_model_load",
        "sg_dataset_load",
        "sg_predict",
        "sg_explain_json",
        "sg_last_error",
        "sg_string_free",
        "typedef struct SgModel SgModel;",
        "typedef struct SgDataset SgDataset;",
    ] {
        assert!(text.contains(symbol), "header missing {symbol}");
    }
}
