use std::fs;
use std::path::Path;

use super::{HeadKind, Layer, ModelParams};
use crate::distributions::{CORNERS, DIM};
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::math::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"DMUQCP1";

/// Layout: magic, head tag, head widths (cls, reg, cov), layer directory
/// (name, rank, dims), then every weight as little-endian f64 in directory order.
pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(CHECKPOINT_MAGIC);
    let head = params.head();
    w.u32(head.tag());
    for width in [1, CORNERS * DIM, head.cov_width()] {
        w.u32(width as u32);
    }
    w.u32(params.layers().len() as u32);
    for l in params.layers() {
        w.str(&l.name);
        w.u32(l.tensor.shape().len() as u32);
        l.tensor.shape().iter().for_each(|d| w.u32(*d as u32));
    }
    w.u64(params.num_params() as u64);
    for l in params.layers() {
        l.tensor.data().iter().for_each(|v| w.f64(*v));
    }
    w.finish()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let head = HeadKind::from_tag(r.u32()?)?;
    let widths = [r.u32()?, r.u32()?, r.u32()?];
    if widths != [1, (CORNERS * DIM) as u32, head.cov_width() as u32] {
        return Err(Error::Format(format!("head widths {widths:?} do not match {head:?}")));
    }
    let n_layers = r.u32()? as usize;
    let mut dir = Vec::with_capacity(n_layers.min(64));
    for _ in 0..n_layers {
        let name = r.str()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        dir.push((name, shape));
    }
    let total = r.u64()? as usize;
    let expected: usize = dir.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if total != expected {
        return Err(Error::Format(format!("payload holds {total} values, directory needs {expected}")));
    }
    let layers = dir
        .into_iter()
        .map(|(name, shape)| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            Ok(Layer { name, tensor: Tensor::new(shape, data)? })
        })
        .collect::<Result<Vec<_>>>()?;
    r.end()?;
    ModelParams::from_layers(head, layers)
}

pub fn write_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    decode_checkpoint(&fs::read(path)?)
}
