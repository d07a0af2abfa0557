use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::detector::HeadKind;
use crate::distributions::{estimate_sigma_e, estimate_sigma_e_diagonal, Variant, CORNERS, DIM};
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::math::linalg::CovMatrix;

pub const UQSTATS_MAGIC: &[u8; 7] = b"DMUQST1";

/// Global aleatoric and epistemic covariances from bootstrap validation.
#[derive(Debug, Clone, PartialEq)]
pub struct UqStats {
    /// Head the statistics were collected with.
    pub head: HeadKind,
    pub sigma_a: CovMatrix,
    pub sigma_e: CovMatrix,
    pub n_bootstraps: usize,
    pub n_residuals: usize,
    pub block_length: usize,
}

impl UqStats {
    /// Matrix dimension implied by a head.
    pub fn dim_for(head: HeadKind) -> usize {
        head.variant().map_or(DIM, Variant::stat_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = Self::dim_for(self.head);
        for (name, m) in [("sigma_a", &self.sigma_a), ("sigma_e", &self.sigma_e)] {
            if m.dim() != dim {
                return Err(Error::Format(format!("{name} is {}x{0}, expected {dim}x{dim}", m.dim())));
            }
            if !m.is_psd() {
                return Err(Error::NotPositiveDefinite(format!("{name} not PSD")));
            }
        }
        Ok(())
    }
}

pub fn encode_uqstats(s: &UqStats) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(UQSTATS_MAGIC);
    w.u32(s.head.tag());
    w.u64(s.block_length as u64);
    w.u64(s.n_bootstraps as u64);
    w.u64(s.n_residuals as u64);
    for m in [&s.sigma_a, &s.sigma_e] {
        m.entries().iter().for_each(|v| w.f64(*v));
    }
    w.finish()
}

pub fn decode_uqstats(bytes: &[u8]) -> Result<UqStats> {
    let mut r = ByteReader::new(bytes);
    r.magic(UQSTATS_MAGIC)?;
    let head = HeadKind::from_tag(r.u32()?)?;
    let block_length = r.u64()? as usize;
    let n_bootstraps = r.u64()? as usize;
    let n_residuals = r.u64()? as usize;
    let dim = UqStats::dim_for(head);
    let mut read_mat = || -> Result<CovMatrix> {
        let e = (0..dim * dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        CovMatrix::new(dim, e).map_err(|e| Error::Format(e.to_string()))
    };
    let sigma_a = read_mat()?;
    let sigma_e = read_mat()?;
    r.end()?;
    let s = UqStats { head, sigma_a, sigma_e, n_bootstraps, n_residuals, block_length };
    s.validate()?;
    Ok(s)
}

pub fn write_uqstats(path: impl AsRef<Path>, s: &UqStats) -> Result<()> {
    fs::write(path, encode_uqstats(s))?;
    Ok(())
}

pub fn read_uqstats(path: impl AsRef<Path>) -> Result<UqStats> {
    decode_uqstats(&fs::read(path)?)
}

/// One corner residual `y − ŷ` of a matched validation detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    /// Bootstrap iteration, from 1.
    pub iteration: usize,
    /// Validation frame index.
    pub frame: usize,
    pub object: u32,
    pub corner: usize,
    pub e: [f64; DIM],
}

/// Residuals pooled over every bootstrap iteration, in harvest order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResidualSet {
    pub residuals: Vec<Residual>,
}

impl ResidualSet {
    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }

    /// Residual vectors at the dimension `head` works in: one per corner,
    /// or the four corners of a box stacked for the joint variant.
    pub fn vectors(&self, head: HeadKind) -> Vec<Vec<f64>> {
        if head == HeadKind::Gaussian(Variant::Dmg) {
            self.residuals.chunks(CORNERS).map(|ch| ch.iter().flat_map(|r| r.e).collect()).collect()
        } else {
            self.residuals.iter().map(|r| r.e.to_vec()).collect()
        }
    }

    /// Epistemic covariance: full for 2-D and joint heads, diagonal for ISG.
    pub fn sigma_e(&self, head: HeadKind) -> Result<CovMatrix> {
        let v = self.vectors(head);
        if v.is_empty() {
            return Err(Error::Estimation("no residuals collected; no detection matched".into()));
        }
        match head {
            HeadKind::Gaussian(Variant::Isg) => estimate_sigma_e_diagonal(&v),
            _ => estimate_sigma_e(&v),
        }
    }

    /// Tab-separated log: header, then `n k j i e1 e2` per residual.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("n\tk\tj\ti\te1\te2\n");
        for r in &self.residuals {
            writeln!(s, "{}\t{}\t{}\t{}\t{:?}\t{:?}", r.iteration, r.frame, r.object, r.corner, r.e[0], r.e[1])
                .expect("write to string");
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("n\tk\tj\ti\te1\te2") {
            return Err(Error::Format("residual log header missing".into()));
        }
        let bad = |l: &str| Error::Format(format!("bad residual line {l:?}"));
        let residuals = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                if f.len() != 6 {
                    return Err(bad(l));
                }
                let int = |s: &str| s.parse::<usize>().map_err(|_| bad(l));
                let real = |s: &str| s.parse::<f64>().map_err(|_| bad(l));
                Ok(Residual {
                    iteration: int(f[0])?,
                    frame: int(f[1])?,
                    object: int(f[2])? as u32,
                    corner: int(f[3])?,
                    e: [real(f[4])?, real(f[5])?],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { residuals })
    }
}
