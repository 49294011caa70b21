//! File formats, sample manifests, and run configuration.

mod cache;
mod config;
mod manifest;
mod ply;
mod sequence;

pub use cache::{read_view_cache, write_view_cache};
pub use config::{apply_override, EvalConfig, PathsConfig, RunConfig, SynthConfig};
pub use manifest::{
    list_sample_dirs, read_registration_poses, read_registration_record, read_sample_manifest,
    sample_dir_name, similarity_to_rigid, view_file_name, write_registration,
    write_sample_manifest, ManifestMeta, RegistrationRecord,
};
pub use ply::{read_point_cloud, write_ply_ascii, write_ply_binary, write_point_cloud};
pub use sequence::read_sequence;
