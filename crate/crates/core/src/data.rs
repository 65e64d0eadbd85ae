//! Item catalog, user-bundle interactions, the leave-one-out split and a
//! synthetic corpus generator.

mod catalog;
mod interactions;
mod split;
mod synthetic;

pub use catalog::{load_catalog, write_catalog, Catalog, ItemRecord};
pub use interactions::{
    frequency_filter, load_interactions, parse_interactions, write_interactions, Bundle,
    Interactions, UserHistory,
};
pub use split::{load_split, split_leave_one_out, write_split, DatasetSplit, Partition};
pub use synthetic::{generate_synthetic, synthetic_user_type, SyntheticConfig};

use crate::error::{Error, Result};
use std::io::BufRead;
use std::path::Path;

/// Reads a line-delimited JSON file, skipping blank lines. Each callback gets
/// the 1-based line number.
pub(crate) fn read_records<T, F>(path: &Path, mut f: F) -> Result<()>
where
    T: serde::de::DeserializeOwned,
    F: FnMut(usize, T) -> Result<()>,
{
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        f(i + 1, rec)?;
    }
    Ok(())
}

pub(crate) fn write_lines<T: serde::Serialize>(
    path: &Path,
    records: impl IntoIterator<Item = T>,
) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
