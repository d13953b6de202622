//! On-disk formats: raw video containers, dataset manifests, checkpoints.

pub mod checkpoint;
pub mod container;
pub mod manifest;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint};
pub use container::{decode_container, encode_container, read_container, write_container};
pub use manifest::{load_manifest, save_manifest, Manifest, ManifestItem, Split};
