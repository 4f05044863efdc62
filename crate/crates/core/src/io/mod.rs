//! On-disk formats: 8-bit PPM/PGM images, dataset manifests and model
//! checkpoints.

mod checkpoint;
mod manifest;
mod pnm;

pub use checkpoint::{Checkpoint, StoredTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use manifest::{load_dataset, read_manifest, write_manifest, Manifest, ManifestRecord};
pub use pnm::{decode_pnm, encode_pnm, read_image, write_image};
