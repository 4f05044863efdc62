//! Dataset manifests: UTF-8 text, one `clear<TAB>blurry<TAB>edge` record per
//! line. Relative paths are resolved against the manifest's directory; blank
//! lines are ignored.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::pnm::read_image;
use crate::error::{Error, Result};
use crate::SamplePair;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub clear: PathBuf,
    pub blurry: PathBuf,
    pub edge: PathBuf,
}

/// Ordered records with absolute (resolved) paths.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let err = |line: usize, reason: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(
                line_no,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let resolved: Vec<PathBuf> = fields.iter().map(|f| base.join(f)).collect();
        for p in &resolved {
            if !p.is_file() {
                return Err(err(line_no, format!("file {} does not exist", p.display())));
            }
        }
        if !seen.insert(resolved[0].clone()) {
            return Err(err(line_no, format!("duplicate clear image {}", fields[0])));
        }
        let [clear, blurry, edge]: [PathBuf; 3] = resolved.try_into().expect("three fields");
        records.push(ManifestRecord {
            clear,
            blurry,
            edge,
        });
    }
    Ok(Manifest { records })
}

/// Writes records, storing paths relative to the manifest's directory when
/// they lie beneath it.
pub fn write_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| -> Result<String> {
        let shown = p.strip_prefix(base).unwrap_or(p);
        let s = shown
            .to_str()
            .ok_or_else(|| Error::config(format!("path {} is not valid UTF-8", p.display())))?;
        if s.contains('\t') || s.contains('\n') {
            return Err(Error::config(format!(
                "path {s:?} contains a tab or newline"
            )));
        }
        Ok(s.to_string())
    };
    let mut text = String::new();
    for r in &manifest.records {
        text.push_str(&format!(
            "{}\t{}\t{}\n",
            rel(&r.clear)?,
            rel(&r.blurry)?,
            rel(&r.edge)?
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads every image of a manifest, checking that each triple is consistent.
pub fn load_dataset(manifest: &Manifest) -> Result<Vec<SamplePair>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let clear = read_image(&r.clear)?;
            let blurry = read_image(&r.blurry)?;
            let edge = read_image(&r.edge)?;
            let bad = |reason: String| Error::Image {
                path: r.blurry.clone(),
                reason,
            };
            if clear.shape()[0] != 3 || blurry.shape() != clear.shape() {
                return Err(bad(format!(
                    "clear {:?} and blurry {:?} must be RGB images of equal size",
                    clear.shape(),
                    blurry.shape()
                )));
            }
            if edge.shape() != [1, clear.shape()[1], clear.shape()[2]] {
                return Err(Error::Image {
                    path: r.edge.clone(),
                    reason: format!(
                        "edge map {:?} must be a gray image of size {:?}",
                        edge.shape(),
                        &clear.shape()[1..]
                    ),
                });
            }
            // Edge maps are binary; anything at or above one half counts as edge.
            let edge = edge.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
            Ok(SamplePair {
                clear,
                blurry,
                edge,
            })
        })
        .collect()
}
