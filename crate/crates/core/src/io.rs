//! Output helpers: JSON and CSV files, content hashes, manifests.

use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// CSV with a header row and numeric rows in shortest round-trip form.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ManifestEntry {
    pub file: String,
    pub size: u64,
    pub sha256: String,
}

/// Hashes `files` (relative to `dir`) and writes `dir/manifest.txt`, one
/// `name<TAB>size<TAB>sha256` line per file in the given order.
pub fn write_manifest(dir: &Path, files: &[String]) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::with_capacity(files.len());
    let mut text = String::new();
    for name in files {
        let bytes = fs::read(dir.join(name))?;
        let entry = ManifestEntry {
            file: name.clone(),
            size: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        };
        text.push_str(&format!("{}\t{}\t{}\n", entry.file, entry.size, entry.sha256));
        entries.push(entry);
    }
    fs::write(dir.join("manifest.txt"), text)?;
    Ok(entries)
}
