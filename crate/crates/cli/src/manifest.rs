//! Content hashes recorded in manifests.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub fn hash_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Hash over a checkpoint's parameter files, in name order.
pub fn checkpoint_hash(dir: &Path) -> CliResult<String> {
    let params = dir.join("params");
    let mut names: Vec<_> = fs::read_dir(&params)
        .map_err(|e| CliError::io(&params, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name())
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for name in names {
        let path = params.join(&name);
        h.update(name.to_string_lossy().as_bytes());
        h.update(fs::read(&path).map_err(|e| CliError::io(&path, e))?);
    }
    Ok(hex::encode(h.finalize()))
}
