//! Parameter checkpoints: a versioned binary tensor archive (shape table +
//! row-major 64-bit values, little endian) plus a human-readable text
//! manifest listing names and shapes.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::neural::{ParamStore, ParamId};

const MAGIC: &[u8; 4] = b"QNCP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint/store mismatch: {0}")]
    Mismatch(String),
}

/// One named tensor in an archive.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// Serializes tensors into the binary archive format.
pub fn write_archive<W: Write>(mut out: W, tensors: &[NamedTensor]) -> Result<(), CheckpointError> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&(t.rows as u32).to_le_bytes())?;
        out.write_all(&(t.cols as u32).to_le_bytes())?;
        for v in &t.values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Parses the binary archive format.
pub fn read_archive<R: Read>(mut input: R) -> Result<Vec<NamedTensor>, CheckpointError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    input.read_exact(&mut word)?;
    let count = u32::from_le_bytes(word) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        input.read_exact(&mut word)?;
        let name_len = u32::from_le_bytes(word) as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Corrupt("tensor name is not utf-8".into()))?;
        input.read_exact(&mut word)?;
        let rows = u32::from_le_bytes(word) as usize;
        input.read_exact(&mut word)?;
        let cols = u32::from_le_bytes(word) as usize;
        let mut values = vec![0.0; rows * cols];
        let mut buf = [0u8; 8];
        for v in values.iter_mut() {
            input.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        tensors.push(NamedTensor { name, rows, cols, values });
    }
    Ok(tensors)
}

/// Text manifest: one `name rows x cols` line per tensor.
pub fn manifest(tensors: &[NamedTensor]) -> String {
    let mut out = String::new();
    for t in tensors {
        out.push_str(&format!("{} {}x{}\n", t.name, t.rows, t.cols));
    }
    out
}

/// Flattens parameter stores (with a namespace prefix each) into archive
/// tensors.
pub fn tensors_from_stores(stores: &[(&str, &ParamStore)]) -> Vec<NamedTensor> {
    let mut tensors = Vec::new();
    for (prefix, store) in stores {
        for e in store.entries() {
            tensors.push(NamedTensor {
                name: format!("{prefix}{}", e.name),
                rows: e.rows,
                cols: e.cols,
                values: e.values.clone(),
            });
        }
    }
    tensors
}

/// Writes `params.bin` and `manifest.txt` under `dir`.
pub fn save(dir: &Path, tensors: &[NamedTensor]) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir)?;
    let file = fs::File::create(dir.join("params.bin"))?;
    write_archive(io::BufWriter::new(file), tensors)?;
    fs::write(dir.join("manifest.txt"), manifest(tensors))?;
    Ok(())
}

/// Reads `params.bin` from `dir`.
pub fn load(dir: &Path) -> Result<Vec<NamedTensor>, CheckpointError> {
    let file = fs::File::open(dir.join("params.bin"))?;
    read_archive(io::BufReader::new(file))
}

/// Overwrites a store's entries from prefixed archive tensors. Every store
/// entry must be present with matching shape.
pub fn load_into_store(
    tensors: &[NamedTensor],
    prefix: &str,
    store: &mut ParamStore,
) -> Result<(), CheckpointError> {
    for i in 0..store.len() {
        let id = ParamId::from_index(i);
        let (name, rows, cols) = {
            let e = store.entry(id);
            (format!("{prefix}{}", e.name), e.rows, e.cols)
        };
        let t = tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CheckpointError::Mismatch(format!("missing tensor {name}")))?;
        if (t.rows, t.cols) != (rows, cols) {
            return Err(CheckpointError::Mismatch(format!(
                "{name}: checkpoint {}x{}, store {rows}x{cols}",
                t.rows, t.cols
            )));
        }
        store.entry_mut(id).values.copy_from_slice(&t.values);
    }
    Ok(())
}
