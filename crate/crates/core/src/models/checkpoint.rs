//! Checkpoint blob: magic "GMILCKPT", version u32, tensor count u32, then per
//! tensor name_len u16 + utf-8 name, rows u32, cols u32, rows·cols f64
//! row-major (all little-endian). The ModelSpec lives in a JSON sidecar
//! next to the blob (`<path>.json`).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::models::{Model, ModelSpec, Params};

const MAGIC: &[u8; 8] = b"GMILCKPT";
const VERSION: u32 = 1;

pub fn write_params<W: Write>(params: &Params, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &params.tensors {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.nrows() as u32).to_le_bytes())?;
        w.write_all(&(t.ncols() as u32).to_le_bytes())?;
        for v in t.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|_| Error::Truncated("checkpoint".into()))?;
    Ok(b)
}

pub fn read_params<R: Read>(mut r: R) -> Result<Params> {
    if &take::<8, _>(&mut r)? != MAGIC {
        return Err(Error::Validation("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = u32::from_le_bytes(take(&mut r)?);
    let mut params = Params::default();
    for _ in 0..count {
        let len = u16::from_le_bytes(take(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Truncated("checkpoint tensor name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Validation("tensor name is not utf-8".into()))?;
        let rows = u32::from_le_bytes(take(&mut r)?) as usize;
        let cols = u32::from_le_bytes(take(&mut r)?) as usize;
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            values.push(f64::from_le_bytes(take(&mut r)?));
        }
        let t = Matrix::from_shape_vec((rows, cols), values).map_err(|e| Error::Dimension(e.to_string()))?;
        params.insert(name, t);
    }
    Ok(params)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_params(&model.params, BufWriter::new(File::create(path)?))?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&model.spec)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let spec: ModelSpec = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let params = read_params(BufReader::new(File::open(path)?))?;
    Model::from_parts(spec, params)
}
