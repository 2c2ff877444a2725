//! Flat binary parameter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "GSGATCKP"
//! version  u32
//! algo     u8
//! count    u32
//! count x  { name_len u32, name utf-8, rows u32, cols u32 }
//! count x  rows*cols f64, in manifest order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{Matrix, ParamStore};

use super::config::Algorithm;

const MAGIC: &[u8; 8] = b"GSGATCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub algorithm: Algorithm,
    pub params: Vec<(String, Matrix)>,
}

pub fn save_checkpoint(path: &Path, algorithm: Algorithm, store: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&[algorithm.tag()])?;
    let manifest = store.manifest();
    w.write_all(&(manifest.len() as u32).to_le_bytes())?;
    for (name, rows, cols) in &manifest {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(*rows as u32).to_le_bytes())?;
        w.write_all(&(*cols as u32).to_le_bytes())?;
    }
    for id in store.ids() {
        for v in store.value(id).as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    inner: BufReader<File>,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            message: message.into(),
        }
    }

    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| self.fail(format!("truncated file: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
        path,
    };
    if &r.bytes::<8>()? != MAGIC {
        return Err(r.fail("not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let [tag] = r.bytes::<1>()?;
    let algorithm = Algorithm::from_tag(tag).ok_or_else(|| r.fail(format!("unknown algorithm tag {tag}")))?;
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        if len > 4096 {
            return Err(r.fail("parameter name too long"));
        }
        let mut name = vec![0u8; len];
        r.inner
            .read_exact(&mut name)
            .map_err(|e| r.fail(format!("truncated file: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| r.fail("parameter name is not utf-8"))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        manifest.push((name, rows, cols));
    }
    let mut params = Vec::with_capacity(manifest.len());
    for (name, rows, cols) in manifest {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(r.bytes()?));
        }
        let m = Matrix::from_vec(rows, cols, data).map_err(|e| r.fail(format!("{name}: {e}")))?;
        params.push((name, m));
    }
    let mut rest = Vec::new();
    r.inner.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(r.fail(format!("{} trailing bytes", rest.len())));
    }
    Ok(Checkpoint { algorithm, params })
}

/// Loads `path` into `store` after checking that algorithm and manifest
/// match exactly.
pub fn restore_checkpoint(path: &Path, algorithm: Algorithm, store: &mut ParamStore) -> Result<()> {
    let ckpt = load_checkpoint(path)?;
    let fail = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    if ckpt.algorithm != algorithm {
        return Err(fail(format!("written by {}, expected {algorithm}", ckpt.algorithm)));
    }
    let manifest = store.manifest();
    if manifest.len() != ckpt.params.len() {
        return Err(fail(format!("{} arrays, expected {}", ckpt.params.len(), manifest.len())));
    }
    for ((name, rows, cols), (cname, m)) in manifest.iter().zip(&ckpt.params) {
        if name != cname || (*rows, *cols) != m.shape() {
            return Err(fail(format!(
                "{cname} {:?} does not match {name} {:?}",
                m.shape(),
                (rows, cols)
            )));
        }
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, (_, m)) in ids.into_iter().zip(ckpt.params) {
        *store.value_mut(id) = m;
    }
    Ok(())
}
