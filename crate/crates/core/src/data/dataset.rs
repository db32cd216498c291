use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::xyz::{format_xyz, read_xyz};
use crate::error::{Error, Result};
use crate::geometry::{fps, PointCloud};
use crate::metrics::SurfaceRef;

/// Oversampling factor for the dense uniform draw that FPS thins out.
pub const OVERSAMPLE: usize = 20;

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub sparse: PointCloud,
    pub dense: PointCloud,
    pub surface: SurfaceRef,
}

fn kind_name(surface: &SurfaceRef) -> &'static str {
    match surface {
        SurfaceRef::Sphere { .. } => "sphere",
        SurfaceRef::Torus { .. } => "torus",
        SurfaceRef::Cylinder { .. } => "cylinder",
        SurfaceRef::HeightField { .. } => "heightfield",
        SurfaceRef::Mesh(_) => "mesh",
    }
}

/// Random generator for sample `index`: one ChaCha stream per sample, so
/// samples can be produced in any order.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// One sparse/dense pair drawn from `surface`.
pub fn generate_sample(
    surface: &SurfaceRef,
    n_in: usize,
    ratio: usize,
    seed: u64,
    index: usize,
) -> Result<SampleRecord> {
    surface.validate()?;
    if n_in == 0 || ratio == 0 {
        return Err(Error::Argument("n_in and ratio must be positive".into()));
    }
    let n_dense = n_in * ratio;
    let mut rng = sample_rng(seed, index);
    let raw = PointCloud::new(surface.sample_uniform(OVERSAMPLE * n_dense, &mut rng))?;
    let dense = raw.select(&fps(&raw, n_dense, 0)?)?;
    let sparse = dense.select(&fps(&dense, n_in, 0)?)?;
    Ok(SampleRecord {
        id: format!("{index:05}_{}", kind_name(surface)),
        sparse,
        dense,
        surface: surface.clone(),
    })
}

/// `count` samples cycling through `shapes`.
pub fn generate_dataset(
    shapes: &[SurfaceRef],
    n_in: usize,
    ratio: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    if count == 0 {
        return Err(Error::Argument("count must be at least 1".into()));
    }
    if shapes.is_empty() {
        return Err(Error::EmptySet("generate_dataset shapes"));
    }
    (0..count)
        .map(|i| generate_sample(&shapes[i % shapes.len()], n_in, ratio, seed, i))
        .collect()
}

/// One line of `manifest.txt`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub sparse: String,
    pub dense: String,
    pub surface: String,
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let _ = writeln!(out, "{} {} {} {}", e.id, e.sparse, e.dense, e.surface);
    }
    out
}

/// Parses manifest text. Blank and `#` lines are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, sparse, dense, surface] = fields[..] else {
            return Err(Error::Parse {
                line: n + 1,
                msg: format!("expected 4 fields, found {}", fields.len()),
            });
        };
        out.push(ManifestEntry {
            id: id.into(),
            sparse: sparse.into(),
            dense: dense.into(),
            surface: surface.into(),
        });
    }
    Ok(out)
}

/// Writes `<id>_sparse.xyz`, `<id>_dense.xyz` per record plus the manifest.
pub fn write_dataset(dir: impl AsRef<Path>, records: &[SampleRecord]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        let entry = ManifestEntry {
            id: r.id.clone(),
            sparse: format!("{}_sparse.xyz", r.id),
            dense: format!("{}_dense.xyz", r.id),
            surface: r.surface.to_string(),
        };
        for (file, cloud) in [(&entry.sparse, &r.sparse), (&entry.dense, &r.dense)] {
            let path = dir.join(file);
            std::fs::write(&path, format_xyz(cloud)).map_err(|e| Error::io(&path, e))?;
        }
        entries.push(entry);
    }
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, format_manifest(&entries)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads every record listed in `dir/manifest.txt`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let entries = parse_manifest(&text)?;
    if entries.is_empty() {
        return Err(Error::EmptySet("dataset manifest"));
    }
    entries
        .into_iter()
        .map(|e| {
            Ok(SampleRecord {
                sparse: read_xyz(dir.join(&e.sparse))?,
                dense: read_xyz(dir.join(&e.dense))?,
                surface: SurfaceRef::parse(&e.surface, Some(dir))?,
                id: e.id,
            })
        })
        .collect()
}
