//! Dataset manifests: one row per submap,
//! `id,easting_m,northing_m,relative_cloud_path`, paths relative to the
//! manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use super::SubmapRecord;
use crate::error::{Error, Result};
use crate::pointcloud::{load_pointcloud, save_pointcloud};

pub const MANIFEST_FILE: &str = "manifest.csv";
const HEADER: [&str; 4] = ["id", "easting_m", "northing_m", "relative_cloud_path"];

/// A directory resolves to its `manifest.csv`; anything else is taken as-is.
pub fn resolve_manifest_path(path: impl AsRef<Path>) -> PathBuf {
    let path = path.as_ref();
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn cloud_rel_path(id: u64) -> String {
    format!("clouds/{id:06}.bin")
}

/// Writes every record's cloud under `dir/clouds/` and the manifest to
/// `dir/manifest.csv`.
pub fn write_manifest(dir: impl AsRef<Path>, records: &[SubmapRecord]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let clouds = dir.join("clouds");
    fs::create_dir_all(&clouds).map_err(|e| Error::io(&clouds, e))?;
    for r in records {
        save_pointcloud(&r.cloud, dir.join(cloud_rel_path(r.id)))?;
    }
    let path = dir.join(MANIFEST_FILE);
    write_manifest_rows(&path, records)?;
    Ok(path)
}

/// Writes only the manifest table for `records`, pointing at the
/// conventional cloud paths next to it.
pub fn write_manifest_rows(path: impl AsRef<Path>, records: &[SubmapRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(HEADER).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.write_record([
            r.id.to_string(),
            r.coord[0].to_string(),
            r.coord[1].to_string(),
            cloud_rel_path(r.id),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<SubmapRecord>> {
    let path = resolve_manifest_path(path);
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&path)
        .map_err(|e| csv_err(&path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(&path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::MalformedHeader(format!(
            "{}: expected header `{}`",
            path.display(),
            HEADER.join(",")
        )));
    }
    let mut records = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| csv_err(&path, e))?;
        let field = |k: usize| row.get(k).unwrap_or("");
        let bad = |what: &str| Error::MalformedHeader(format!("{} row {}: bad {what}", path.display(), line + 1));
        let id: u64 = field(0).parse().map_err(|_| bad("id"))?;
        let e: f64 = field(1).parse().map_err(|_| bad("easting"))?;
        let n: f64 = field(2).parse().map_err(|_| bad("northing"))?;
        let cloud = load_pointcloud(base.join(field(3)))?.with_source(id);
        records.push(SubmapRecord::new(id, cloud, [e, n]));
    }
    Ok(records)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::MalformedHeader(format!("{}: {e}", path.display()))
}
