use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scenegen::Dataset;

/// Overlapping length-`l` windows, never crossing a scene boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockCollection {
    /// Total frames across scenes.
    pub k: usize,
    pub l: usize,
    pub blocks: Vec<Range<usize>>,
}

impl BlockCollection {
    /// Blocks over consecutive scene ranges of one frame sequence.
    pub fn from_scenes(scenes: &[Range<usize>], l: usize) -> Result<Self> {
        if l == 0 {
            return Err(Error::Config("block length must be at least 1".into()));
        }
        let mut blocks = Vec::new();
        for s in scenes {
            if l > s.len() {
                return Err(Error::Config(format!("block length {l} exceeds scene length {}", s.len())));
            }
            blocks.extend((s.start..=s.end - l).map(|b| b..b + l));
        }
        let k = scenes.iter().map(|s| s.len()).sum();
        Ok(Self { k, l, blocks })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Blocks drawn per resample: `⌊K/l⌋`.
    pub fn draws_per_sample(&self) -> usize {
        self.k / self.l
    }
}

pub fn build_blocks(data: &Dataset, l: usize) -> Result<BlockCollection> {
    if data.is_empty() {
        return Err(Error::InsufficientData("empty dataset".into()));
    }
    BlockCollection::from_scenes(&data.scene_ranges(), l)
}

/// One moving-block resample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resample {
    /// Indices into `BlockCollection::blocks`, in draw order.
    pub draws: Vec<usize>,
    /// Frame indices: the drawn blocks concatenated.
    pub frames: Vec<usize>,
}

/// Draws `⌊K/l⌋` blocks uniformly with replacement.
pub fn sample_bootstrap<R: Rng + ?Sized>(blocks: &BlockCollection, rng: &mut R) -> Result<Resample> {
    if blocks.is_empty() {
        return Err(Error::InsufficientData("no blocks to resample".into()));
    }
    let draws: Vec<usize> = (0..blocks.draws_per_sample()).map(|_| rng.random_range(0..blocks.len())).collect();
    let frames = draws.iter().flat_map(|&b| blocks.blocks[b].clone()).collect();
    Ok(Resample { draws, frames })
}
