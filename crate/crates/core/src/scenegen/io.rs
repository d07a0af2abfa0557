use std::fs;
use std::path::Path;

use super::{BevGrid, Dataset, Frame, GroundTruthBox, SceneConfig};
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};

pub const DATASET_MAGIC: &[u8; 7] = b"DMUQDS1";

pub fn write_dataset(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    fs::write(path, encode(data)?)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode(&fs::read(path)?)
}

pub(crate) fn encode(data: &Dataset) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    w.bytes(DATASET_MAGIC);
    let cfg = serde_json::to_vec(&data.config).map_err(|e| Error::Format(e.to_string()))?;
    w.u64(cfg.len() as u64);
    w.bytes(&cfg);
    w.u64(data.frames.len() as u64);
    for f in &data.frames {
        let rec = encode_frame(f);
        w.u64(rec.len() as u64);
        w.bytes(&rec);
    }
    Ok(w.finish())
}

fn encode_frame(f: &Frame) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.u32(f.scene);
    w.u32(f.index);
    w.u32(f.poses.len() as u32);
    for p in &f.poses {
        w.f64(p[0]);
        w.f64(p[1]);
    }
    w.u32(f.grids.len() as u32);
    for g in &f.grids {
        w.u32(g.agent);
        w.u32(g.width as u32);
        w.u32(g.length as u32);
        let runs = run_lengths(g.cells());
        w.u32(runs.len() as u32);
        runs.into_iter().for_each(|r| w.u32(r));
    }
    w.u32(f.boxes.len() as u32);
    for b in &f.boxes {
        w.u32(b.object_id);
        w.u32(b.class);
        for c in &b.corners {
            w.f64(c[0]);
            w.f64(c[1]);
        }
    }
    w.finish()
}

/// Alternating run lengths, starting with a (possibly empty) run of zeros.
fn run_lengths(cells: &[u8]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = 0u8;
    let mut n = 0u32;
    for &c in cells {
        if c != current {
            runs.push(n);
            current = c;
            n = 0;
        }
        n += 1;
    }
    runs.push(n);
    runs
}

fn expand_runs(runs: &[u32], total: usize) -> Result<Vec<u8>> {
    let mut cells = Vec::with_capacity(total);
    for (k, &r) in runs.iter().enumerate() {
        cells.extend(std::iter::repeat_n((k % 2) as u8, r as usize));
    }
    if cells.len() != total {
        return Err(Error::Format(format!("run lengths cover {} of {total} cells", cells.len())));
    }
    Ok(cells)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let n = r.u64()? as usize;
    let config: SceneConfig =
        serde_json::from_slice(r.take(n)?).map_err(|e| Error::Format(format!("config echo: {e}")))?;
    let count = r.u64()? as usize;
    let mut frames = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = r.u64()? as usize;
        let mut fr = ByteReader::new(r.take(len)?);
        frames.push(decode_frame(&mut fr)?);
        fr.end()?;
    }
    r.end()?;
    Ok(Dataset { config, frames })
}

fn decode_frame(r: &mut ByteReader) -> Result<Frame> {
    let scene = r.u32()?;
    let index = r.u32()?;
    let poses = (0..r.u32()?).map(|_| Ok([r.f64()?, r.f64()?])).collect::<Result<Vec<_>>>()?;
    let grids = (0..r.u32()?)
        .map(|_| {
            let agent = r.u32()?;
            let width = r.u32()? as usize;
            let length = r.u32()? as usize;
            let runs = (0..r.u32()?).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            BevGrid::from_cells(agent, width, length, expand_runs(&runs, width * length)?)
                .map_err(|e| Error::Format(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let boxes = (0..r.u32()?)
        .map(|_| {
            let object_id = r.u32()?;
            let class = r.u32()?;
            let mut corners = [[0.0; 2]; 4];
            for c in &mut corners {
                *c = [r.f64()?, r.f64()?];
            }
            Ok(GroundTruthBox { object_id, class, corners })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Frame { scene, index, poses, grids, boxes })
}
