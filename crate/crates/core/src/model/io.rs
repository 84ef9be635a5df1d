//! `CMDL` model files.
//!
//! Layout (little-endian): magic `CMDL`, u8 version (1), u16 layer count;
//! per layer u32 rows (outputs), u32 cols (inputs), the weights row-major
//! as f64, then the biases as f64; footer u32 CAV layer index, u32 latent
//! dimension, u32 frame count. Layers are stored encoder, decoder, per-frame
//! head, post-concatenation stack. Frame dimensions are not stored; readers
//! supply them from the dataset the model is applied to.

use super::{Dense, ModelParams};
use crate::error::{Error, Result};
use crate::phantom::Dims;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"CMDL";
const VERSION: u8 = 1;

fn u32_of(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Parameter(format!("{what} {v} does not fit in u32")))
}

pub fn write_model<W: Write>(mut w: W, params: &ModelParams) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    let n = u16::try_from(params.layers.len()).map_err(|_| Error::Parameter("too many layers".into()))?;
    w.write_all(&n.to_le_bytes())?;
    for l in &params.layers {
        w.write_all(&u32_of(l.outputs, "layer rows")?)?;
        w.write_all(&u32_of(l.inputs, "layer cols")?)?;
        for o in 0..l.outputs {
            for i in 0..l.inputs {
                w.write_all(&l.weight(o, i).to_le_bytes())?;
            }
        }
        for b in &l.b {
            w.write_all(&b.to_le_bytes())?;
        }
    }
    w.write_all(&u32_of(params.cav_index, "CAV index")?)?;
    w.write_all(&u32_of(params.latent, "latent size")?)?;
    w.write_all(&u32_of(params.frames, "frame count")?)?;
    w.flush()?;
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated CMDL stream".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn take_u32<R: Read>(r: &mut R) -> Result<usize> {
    Ok(u32::from_le_bytes(take(r)?) as usize)
}

fn take_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_le_bytes(take(r)?))
}

pub fn read_model<R: Read>(mut r: R, dims: Dims) -> Result<ModelParams> {
    if &take::<4, _>(&mut r)? != MAGIC {
        return Err(Error::Format("not a CMDL file".into()));
    }
    let [version] = take::<1, _>(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported CMDL version {version}")));
    }
    let n = u16::from_le_bytes(take(&mut r)?) as usize;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let rows = take_u32(&mut r)?;
        let cols = take_u32(&mut r)?;
        let len = rows.checked_mul(cols).filter(|&l| l <= 1 << 28).ok_or_else(|| Error::Format("layer too large".into()))?;
        let mut layer = Dense::zeros(cols, rows);
        for k in 0..len {
            let (o, i) = (k / cols, k % cols);
            layer.w[i * rows + o] = take_f64(&mut r)?;
        }
        for b in layer.b.iter_mut() {
            *b = take_f64(&mut r)?;
        }
        layers.push(layer);
    }
    let cav_index = take_u32(&mut r)?;
    let latent = take_u32(&mut r)?;
    let frames = take_u32(&mut r)?;
    if r.read(&mut [0u8])? != 0 {
        return Err(Error::Format("trailing bytes after CMDL footer".into()));
    }
    ModelParams::from_layers(layers, cav_index, latent, frames, dims)
}

pub fn write_model_file(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    write_model(BufWriter::new(File::create(path)?), params)
}

pub fn read_model_file(path: impl AsRef<Path>, dims: Dims) -> Result<ModelParams> {
    read_model(BufReader::new(File::open(path)?), dims)
}
