//! Dataset manifest: labeled vehicle crops with identity, camera and split
//! assignment, stored as a plain CSV with header
//! `image_id,path,vehicle_id,camera_id,split`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which retrieval role an image plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "query" => Some(Split::Query),
            "gallery" => Some(Split::Gallery),
            _ => None,
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One labeled vehicle crop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    /// Path to an 8-bit RGB image; relative paths are resolved against the
    /// manifest's directory by consumers that load pixels.
    pub path: PathBuf,
    pub vehicle_id: String,
    pub camera_id: String,
    pub split: Split,
}

/// An ordered, validated set of image records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub dataset_name: String,
    pub records: Vec<ImageRecord>,
}

impl Manifest {
    /// Builds a manifest and checks every invariant: unique image ids, known
    /// splits (enforced by the type), identity-disjoint train vs. query, and
    /// every query identity present in the gallery.
    pub fn new(dataset_name: impl Into<String>, records: Vec<ImageRecord>) -> Result<Manifest> {
        let manifest = Manifest {
            dataset_name: dataset_name.into(),
            records,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for rec in &self.records {
            if rec.image_id.is_empty() {
                return Err(Error::Validation("empty image_id".into()));
            }
            if !seen.insert(rec.image_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate image_id `{}`",
                    rec.image_id
                )));
            }
        }

        let ids_of = |split: Split| -> BTreeSet<&str> {
            self.records
                .iter()
                .filter(|r| r.split == split)
                .map(|r| r.vehicle_id.as_str())
                .collect()
        };
        let train_ids = ids_of(Split::Train);
        let query_ids = ids_of(Split::Query);
        let gallery_ids = ids_of(Split::Gallery);

        if let Some(id) = train_ids.intersection(&query_ids).next() {
            return Err(Error::Validation(format!(
                "vehicle_id `{id}` appears in both train and query splits"
            )));
        }
        if let Some(id) = query_ids.difference(&gallery_ids).next() {
            return Err(Error::Validation(format!(
                "query vehicle_id `{id}` has no gallery image"
            )));
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&ImageRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Distinct vehicle identities in a split, in first-appearance order.
    pub fn identities(&self, split: Split) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| r.split == split)
            .filter(|r| seen.insert(r.vehicle_id.as_str()))
            .map(|r| r.vehicle_id.as_str())
            .collect()
    }

    /// Records of a split grouped by vehicle identity, in first-appearance order.
    pub fn by_identity(&self, split: Split) -> Vec<(&str, Vec<&ImageRecord>)> {
        let mut order = Vec::new();
        let mut groups: BTreeMap<&str, Vec<&ImageRecord>> = BTreeMap::new();
        for rec in self.records.iter().filter(|r| r.split == split) {
            if !groups.contains_key(rec.vehicle_id.as_str()) {
                order.push(rec.vehicle_id.as_str());
            }
            groups.entry(rec.vehicle_id.as_str()).or_default().push(rec);
        }
        order
            .into_iter()
            .map(|id| (id, groups.remove(id).unwrap()))
            .collect()
    }

    /// Lookup table from image_id to record.
    pub fn index(&self) -> HashMap<&str, &ImageRecord> {
        self.records
            .iter()
            .map(|r| (r.image_id.as_str(), r))
            .collect()
    }
}

const HEADER: [&str; 5] = ["image_id", "path", "vehicle_id", "camera_id", "split"];

/// Loads and validates a manifest from CSV.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::parse(
            path,
            format!("expected header `{}`", HEADER.join(",")),
        ));
    }

    let mut records = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::parse(path, e.to_string()))?;
        if row.len() != 5 {
            return Err(Error::parse(
                path,
                format!("row {}: expected 5 fields, got {}", line + 2, row.len()),
            ));
        }
        let split = Split::parse(&row[4]).ok_or_else(|| {
            Error::parse(
                path,
                format!("row {}: unknown split `{}`", line + 2, &row[4]),
            )
        })?;
        records.push(ImageRecord {
            image_id: row[0].to_string(),
            path: PathBuf::from(&row[1]),
            vehicle_id: row[2].to_string(),
            camera_id: row[3].to_string(),
            split,
        });
    }
    if records.is_empty() {
        return Err(Error::parse(path, "manifest has no records"));
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Manifest::new(name, records)
}

/// Serializes a manifest to CSV bytes (UTF-8, `\n` line endings).
pub fn manifest_to_csv(manifest: &Manifest) -> Vec<u8> {
    let mut out = String::new();
    out.push_str(&HEADER.join(","));
    out.push('\n');
    for rec in &manifest.records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            rec.image_id,
            rec.path.display(),
            rec.vehicle_id,
            rec.camera_id,
            rec.split
        ));
    }
    out.into_bytes()
}

/// Writes a manifest as CSV (atomically: write to a temp file, then rename).
pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    crate::imgio::write_atomic(path, &manifest_to_csv(manifest))
}
