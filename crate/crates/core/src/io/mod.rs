//! On-disk artifact formats: feature/coordinate files, dataset manifests,
//! cached patient graphs, and model checkpoints.

pub mod checkpoint;
pub mod features;
pub mod graphfile;
pub mod manifest;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use features::{read_coords_file, read_feature_file, write_coords_file, write_feature_file};
pub use graphfile::{read_patient_graph, write_patient_graph};
pub use manifest::{
    load_raw_dataset, read_manifest, write_manifest, Manifest, ManifestPatient, ManifestSlide,
};
