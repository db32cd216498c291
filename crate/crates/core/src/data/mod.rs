//! Point-cloud text files, a minimal OBJ importer, synthetic datasets and
//! binary checkpoints.

mod checkpoint;
mod dataset;
mod obj;
mod xyz;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, RawCheckpoint, MAGIC,
    VERSION,
};
pub use dataset::{
    format_manifest, generate_dataset, generate_sample, load_dataset, parse_manifest, sample_rng,
    write_dataset, ManifestEntry, SampleRecord, MANIFEST_FILE, OVERSAMPLE,
};
pub use obj::{parse_obj, read_obj};
pub use xyz::{format_coord, format_xyz, parse_xyz, read_xyz, write_xyz};
