//! Library persistence.
//!
//! A library directory holds `manifest.json` plus one blob per matrix under
//! `blobs/`, named `<id>.<A|B|A_star|B_star>.f32`. Blobs are raw
//! little-endian `f32`, row-major, with no header. The manifest is JSON with
//! sorted keys, UTF-8, LF line endings:
//!
//! ```json
//! {
//!   "entries": [
//!     {
//!       "aligned": true,
//!       "blobs": { "a": "blobs/x.A_star.f32", "b": "blobs/x.B_star.f32" },
//!       "degenerate": false,
//!       "id": "x",
//!       "layer": "layers.0.q_proj",
//!       "m": 64,
//!       "n": 64,
//!       "r": 6,
//!       "singular_values": [1.5, 0.25]
//!     }
//!   ],
//!   "format_version": 1,
//!   "tag": "task"
//! }
//! ```
//!
//! `a` is the `r×n` input-side factor (`A` or `A*`) and `b` the `m×r`
//! output-side factor (`B` or `B*`). Raw entries have `aligned: false` and
//! `singular_values: null`. Degenerate aligned entries have `r: 0` and
//! `blobs: null`.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::linalg::row_gram_deviation;
use crate::parallel::Exec;
use crate::types::{AdapterLibrary, AlignedAdapter, LayerId, LibraryTag, Matrix, RawAdapter, SkippedAdapter};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_DIR: &str = "blobs";
/// Max deviation of an aligned entry's row Gram matrix from the identity.
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobPaths {
    pub a: String,
    pub b: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub layer: LayerId,
    pub m: usize,
    pub n: usize,
    /// Rank for raw entries, effective rank for aligned ones.
    pub r: usize,
    pub aligned: bool,
    pub degenerate: bool,
    pub blobs: Option<BlobPaths>,
    /// Stored widened to `f64` so they round-trip exactly.
    pub singular_values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryManifest {
    pub format_version: u32,
    pub tag: LibraryTag,
    pub entries: Vec<ManifestEntry>,
}

impl LibraryManifest {
    pub fn is_aligned(&self) -> bool {
        self.entries.iter().any(|e| e.aligned)
    }

    /// Canonical text: sorted keys, two-space indent, trailing LF.
    pub fn to_canonical_json(&self) -> Result<String> {
        let value = serde_json::to_value(self).map_err(|e| Error::Manifest(e.to_string()))?;
        let mut text = serde_json::to_string_pretty(&sort_keys(value))
            .map_err(|e| Error::Manifest(e.to_string()))?;
        text.push('\n');
        Ok(text)
    }
}

fn sort_keys(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut pairs: Vec<(String, Value)> = map.into_iter().collect();
            pairs.sort_by(|a, b| a.0.cmp(&b.0));
            let mut out = Map::new();
            for (k, v) in pairs {
                out.insert(k, sort_keys(v));
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

/// What a library directory contained.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadedLibrary {
    /// No entries; usable as either kind.
    Empty(LibraryTag),
    Raw(LibraryTag, Vec<RawAdapter>),
    Aligned(AdapterLibrary),
}

impl LoadedLibrary {
    pub fn tag(&self) -> LibraryTag {
        match self {
            LoadedLibrary::Empty(t) | LoadedLibrary::Raw(t, _) => *t,
            LoadedLibrary::Aligned(lib) => lib.tag,
        }
    }

    pub fn into_aligned(self) -> Result<AdapterLibrary> {
        match self {
            LoadedLibrary::Empty(t) => Ok(AdapterLibrary::empty(t)),
            LoadedLibrary::Aligned(lib) => Ok(lib),
            LoadedLibrary::Raw(..) => Err(Error::Usage("library is not aligned".into())),
        }
    }

    pub fn into_raw(self) -> Result<(LibraryTag, Vec<RawAdapter>)> {
        match self {
            LoadedLibrary::Empty(t) => Ok((t, Vec::new())),
            LoadedLibrary::Raw(t, adapters) => Ok((t, adapters)),
            LoadedLibrary::Aligned(_) => Err(Error::Usage("library is already aligned".into())),
        }
    }
}

fn check_id(id: &str) -> Result<()> {
    let bad = id.is_empty()
        || id == "."
        || id == ".."
        || id.chars().any(|c| c == '/' || c == '\\' || c.is_control());
    if bad {
        return Err(Error::Load {
            entry: id.into(),
            reason: "id is not usable as a file name".into(),
        });
    }
    Ok(())
}

fn blob_bytes(m: &Matrix) -> Vec<u8> {
    m.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn prepare_dir(dir: &Path) -> Result<PathBuf> {
    let blobs = dir.join(BLOB_DIR);
    fs::create_dir_all(&blobs).map_err(|e| Error::io(&blobs, e))?;
    Ok(blobs)
}

fn write_pair(dir: &Path, id: &str, suffix: (&str, &str), a: &Matrix, b: &Matrix) -> Result<BlobPaths> {
    check_id(id)?;
    let a_rel = format!("{BLOB_DIR}/{id}.{}.f32", suffix.0);
    let b_rel = format!("{BLOB_DIR}/{id}.{}.f32", suffix.1);
    write_file(&dir.join(&a_rel), &blob_bytes(a))?;
    write_file(&dir.join(&b_rel), &blob_bytes(b))?;
    Ok(BlobPaths { a: a_rel, b: b_rel })
}

fn write_manifest(dir: &Path, manifest: &LibraryManifest) -> Result<PathBuf> {
    let ids: HashSet<&str> = manifest.entries.iter().map(|e| e.id.as_str()).collect();
    if ids.len() != manifest.entries.len() {
        return Err(Error::Usage("adapter ids must be unique within a library".into()));
    }
    let path = dir.join(MANIFEST_FILE);
    write_atomic(&path, manifest.to_canonical_json()?.as_bytes())?;
    Ok(path)
}

/// Saves an aligned library, including degenerate entries from its skip
/// report. Returns the manifest path.
pub fn save_library(lib: &AdapterLibrary, dir: &Path) -> Result<PathBuf> {
    prepare_dir(dir)?;
    let mut entries = Vec::with_capacity(lib.len() + lib.skipped().len());
    for a in lib.adapters() {
        let blobs = write_pair(dir, &a.id, ("A_star", "B_star"), &a.a_star, &a.b_star)?;
        entries.push(ManifestEntry {
            id: a.id.clone(),
            layer: a.layer.clone(),
            m: a.m(),
            n: a.n(),
            r: a.r_eff(),
            aligned: true,
            degenerate: false,
            blobs: Some(blobs),
            singular_values: Some(a.singular_values.iter().map(|&s| f64::from(s)).collect()),
        });
    }
    for s in lib.skipped() {
        check_id(&s.id)?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            layer: s.layer.clone(),
            m: s.m,
            n: s.n,
            r: 0,
            aligned: true,
            degenerate: true,
            blobs: None,
            singular_values: Some(Vec::new()),
        });
    }
    write_manifest(
        dir,
        &LibraryManifest {
            format_version: FORMAT_VERSION,
            tag: lib.tag,
            entries,
        },
    )
}

/// Saves unaligned adapters. Returns the manifest path.
pub fn save_raw_library(tag: LibraryTag, adapters: &[RawAdapter], dir: &Path) -> Result<PathBuf> {
    prepare_dir(dir)?;
    let mut entries = Vec::with_capacity(adapters.len());
    for a in adapters {
        if a.tag != tag {
            return Err(Error::Usage(format!(
                "adapter `{}` is tagged {} in a {tag} library",
                a.id, a.tag
            )));
        }
        let d = a.dims();
        let blobs = write_pair(dir, &a.id, ("A", "B"), &a.a, &a.b)?;
        entries.push(ManifestEntry {
            id: a.id.clone(),
            layer: a.layer.clone(),
            m: d.m,
            n: d.n,
            r: d.r,
            aligned: false,
            degenerate: false,
            blobs: Some(blobs),
            singular_values: None,
        });
    }
    write_manifest(
        dir,
        &LibraryManifest {
            format_version: FORMAT_VERSION,
            tag,
            entries,
        },
    )
}

pub fn read_manifest(dir: &Path) -> Result<LibraryManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: LibraryManifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

fn load_error(entry: &ManifestEntry, reason: impl Into<String>) -> Error {
    Error::Load {
        entry: entry.id.clone(),
        reason: reason.into(),
    }
}

fn read_blob(dir: &Path, entry: &ManifestEntry, rel: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let rel_path = Path::new(rel);
    if !rel_path
        .components()
        .all(|c| matches!(c, Component::Normal(_)))
    {
        return Err(load_error(entry, format!("blob path `{rel}` must be relative and stay inside the library")));
    }
    let path = dir.join(rel_path);
    let bytes = fs::read(&path).map_err(|e| load_error(entry, format!("cannot read `{rel}`: {e}")))?;
    let expected = rows * cols * 4;
    if bytes.len() != expected {
        return Err(load_error(
            entry,
            format!("`{rel}` has {} bytes, expected {expected} for {rows}x{cols}", bytes.len()),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if !data.iter().all(|v| v.is_finite()) {
        return Err(load_error(entry, format!("`{rel}` contains non-finite values")));
    }
    Matrix::from_vec(rows, cols, data)
}

enum Loaded {
    Raw(RawAdapter),
    Aligned(AlignedAdapter),
    Skipped(SkippedAdapter),
}

fn load_entry(dir: &Path, tag: LibraryTag, entry: &ManifestEntry) -> Result<Loaded> {
    check_id(&entry.id)?;
    if entry.degenerate {
        if !entry.aligned || entry.r != 0 || entry.blobs.is_some() {
            return Err(load_error(entry, "degenerate entries must be aligned with r = 0 and no blobs"));
        }
        return Ok(Loaded::Skipped(SkippedAdapter {
            id: entry.id.clone(),
            layer: entry.layer.clone(),
            m: entry.m,
            n: entry.n,
            reason: "zero effective rank".into(),
        }));
    }
    let blobs = entry.blobs.as_ref().ok_or_else(|| load_error(entry, "missing blobs"))?;
    if entry.m == 0 || entry.n == 0 || entry.r == 0 || entry.r > entry.m.min(entry.n) {
        return Err(load_error(
            entry,
            format!("invalid shape m={} n={} r={}", entry.m, entry.n, entry.r),
        ));
    }
    let a = read_blob(dir, entry, &blobs.a, entry.r, entry.n)?;
    let b = read_blob(dir, entry, &blobs.b, entry.m, entry.r)?;
    if !entry.aligned {
        let adapter = RawAdapter::new(entry.id.clone(), entry.layer.clone(), tag, b, a)
            .map_err(|e| load_error(entry, e.to_string()))?;
        return Ok(Loaded::Raw(adapter));
    }

    let sv = entry
        .singular_values
        .as_ref()
        .ok_or_else(|| load_error(entry, "aligned entry without singular values"))?;
    if sv.len() != entry.r {
        return Err(load_error(
            entry,
            format!("{} singular values for effective rank {}", sv.len(), entry.r),
        ));
    }
    let singular_values: Vec<f32> = sv.iter().map(|&s| s as f32).collect();
    if !singular_values.iter().all(|s| s.is_finite() && *s > 0.0)
        || singular_values.windows(2).any(|w| w[0] < w[1])
    {
        return Err(load_error(entry, "singular values must be positive and descending"));
    }
    let deviation = row_gram_deviation(&a);
    if deviation > ORTHONORMAL_TOLERANCE {
        return Err(load_error(
            entry,
            format!("A_star rows are not orthonormal (Gram deviation {deviation:.3e})"),
        ));
    }
    Ok(Loaded::Aligned(AlignedAdapter {
        id: entry.id.clone(),
        layer: entry.layer.clone(),
        tag,
        a_star: a,
        b_star: b,
        singular_values,
    }))
}

/// Loads and validates a library directory.
pub fn load_library(dir: &Path) -> Result<LoadedLibrary> {
    let manifest = read_manifest(dir)?;
    let tag = manifest.tag;
    if manifest.entries.is_empty() {
        return Ok(LoadedLibrary::Empty(tag));
    }
    let aligned = manifest.entries[0].aligned;
    if let Some(odd) = manifest.entries.iter().find(|e| e.aligned != aligned) {
        return Err(load_error(odd, "library mixes raw and aligned entries"));
    }
    let mut ids = HashSet::new();
    for e in &manifest.entries {
        if !ids.insert(e.id.as_str()) {
            return Err(load_error(e, "duplicate id"));
        }
    }

    let loaded = Exec::default().try_map(&manifest.entries, |e| load_entry(dir, tag, e))?;
    if aligned {
        let mut adapters = Vec::new();
        let mut skipped = Vec::new();
        for l in loaded {
            match l {
                Loaded::Aligned(a) => adapters.push(a),
                Loaded::Skipped(s) => skipped.push(s),
                Loaded::Raw(_) => unreachable!("aligned flag checked above"),
            }
        }
        Ok(LoadedLibrary::Aligned(AdapterLibrary::from_aligned(tag, adapters, skipped)?))
    } else {
        let adapters = loaded
            .into_iter()
            .map(|l| match l {
                Loaded::Raw(a) => a,
                _ => unreachable!("aligned flag checked above"),
            })
            .collect();
        Ok(LoadedLibrary::Raw(tag, adapters))
    }
}

/// Total bytes of the blobs referenced by a library's manifest.
pub fn blob_bytes_on_disk(dir: &Path) -> Result<u64> {
    let manifest = read_manifest(dir)?;
    let mut total = 0;
    for blobs in manifest.entries.iter().filter_map(|e| e.blobs.as_ref()) {
        for rel in [&blobs.a, &blobs.b] {
            let path = dir.join(rel);
            total += fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
        }
    }
    Ok(total)
}
