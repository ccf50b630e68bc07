use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{AppError, AppResult};

/// Writes via a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> AppResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| AppError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| AppError::io(&tmp, e))?;
        f.sync_all().map_err(|e| AppError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| AppError::io(path, e))
}

/// Serializes each record as one JSON line.
pub fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> AppResult<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| AppError::Data(e.to_string()))?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Parses every non-empty line; errors name the 1-based line number.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> AppResult<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| AppError::Data(format!("{}: line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}
