//! Checkpoints: one AVHT file per named tensor plus a `manifest.tsv` listing
//! `name \t extents` (comma separated) in name order.

use std::fs;
use std::path::Path;

use super::avht::{read_tensor, write_tensor, Dtype};
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.tsv";

pub fn save(dir: impl AsRef<Path>, store: &ParamStore) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (name, t) in store.iter() {
        let dims: Vec<String> = t.dims().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{name}\t{}\n", dims.join(",")));
        write_tensor(dir.join(format!("{name}.avht")), t, Dtype::F64)?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

pub fn load(dir: impl AsRef<Path>) -> Result<ParamStore> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut store = ParamStore::new();
    for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let (name, dims) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!("{}:{}: malformed line", path.display(), lineno + 1))
        })?;
        let dims = dims
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        let t = read_tensor(dir.join(format!("{name}.avht")))?;
        if t.dims() != dims.as_slice() {
            return Err(Error::Data(format!(
                "{name}: manifest says {dims:?} but file holds {:?}",
                t.dims()
            )));
        }
        store.insert(name, t);
    }
    Ok(store)
}
