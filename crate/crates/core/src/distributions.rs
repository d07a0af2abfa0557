//! Corner-location uncertainty representations, their densities and
//! regression losses, and the aleatoric/epistemic covariance estimators.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::linalg::{logdet, mahalanobis_sq, CovMatrix};
use crate::math::{Graph, Var};

/// Corners per box.
pub const CORNERS: usize = 4;
/// Spatial dimensions of a corner.
pub const DIM: usize = 2;

/// How box corner uncertainty is represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Independent per-corner 2-D Gaussians.
    Img,
    /// Independent univariate Gaussians per corner coordinate.
    Isg,
    /// One joint Gaussian over all corner coordinates.
    Dmg,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Img, Variant::Isg, Variant::Dmg];

    /// Dimension of the covariance matrices this variant estimates.
    pub fn stat_dim(self) -> usize {
        match self {
            Variant::Img | Variant::Isg => DIM,
            Variant::Dmg => CORNERS * DIM,
        }
    }

    /// Raw covariance-head outputs per box.
    pub fn head_width(self) -> usize {
        match self {
            Variant::Img => CORNERS * DIM * (DIM + 1) / 2,
            Variant::Isg => CORNERS * DIM,
            Variant::Dmg => {
                let n = CORNERS * DIM;
                n * (n + 1) / 2
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Img => "img",
            Variant::Isg => "isg",
            Variant::Dmg => "dmg",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "img" => Ok(Variant::Img),
            "isg" => Ok(Variant::Isg),
            "dmg" => Ok(Variant::Dmg),
            other => Err(Error::Config(format!("unknown distribution variant '{other}'"))),
        }
    }
}

/// A Gaussian over one corner location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CornerGaussian {
    pub mean: Vec<f64>,
    pub cov: CovMatrix,
}

impl CornerGaussian {
    pub fn new(mean: Vec<f64>, cov: CovMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::Usage(format!(
                "mean has {} entries but covariance is {}x{}",
                mean.len(),
                cov.dim(),
                cov.dim()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite mean".into()));
        }
        Ok(Self { mean, cov })
    }
}

/// Log density of `y` under `N(corner.mean, corner.cov)`, using the
/// `(2π)^(D/2)·|Σ|^(1/2)` normalizer.
pub fn log_pdf(corner: &CornerGaussian, y: &[f64]) -> Result<f64> {
    let d = corner.cov.dim();
    let e = residual(y, &corner.mean)?;
    let q = mahalanobis_sq(&corner.cov, &e)?;
    let ld = logdet(&corner.cov)?;
    Ok(-0.5 * d as f64 * (2.0 * PI).ln() - 0.5 * ld - 0.5 * q)
}

fn residual(y: &[f64], mean: &[f64]) -> Result<Vec<f64>> {
    if y.len() != mean.len() {
        return Err(Error::Usage(format!("vector length {} does not match mean length {}", y.len(), mean.len())));
    }
    Ok(y.iter().zip(mean).map(|(a, b)| a - b).collect())
}

/// `½ (y − ŷ)ᵀ Σ̂⁻¹ (y − ŷ) + ½ log|Σ̂|`, the parameter-dependent part of the
/// KL divergence from a point-mass target to the predicted Gaussian.
pub fn kl_regression_loss(y: &[f64], y_hat: &[f64], cov: &CovMatrix) -> Result<f64> {
    let e = residual(y, y_hat)?;
    Ok(0.5 * mahalanobis_sq(cov, &e)? + 0.5 * logdet(cov)?)
}

/// Differentiable batched KL regression loss: residuals `[n, D]`, covariances `[n, D, D]`.
pub fn kl_regression_loss_var(g: &Graph, residuals: Var, covs: Var) -> Result<Var> {
    let q = g.quad_form(residuals, covs)?;
    let ld = g.logdet(covs)?;
    let total = g.add(q, ld)?;
    Ok(g.scale(g.sum(total), 0.5))
}

/// Sum of univariate KL terms `½ e_d²/σ_d² + ½ ln σ_d²` over every coordinate.
pub fn loss_isg(y: &[f64], y_hat: &[f64], variances: &[f64]) -> Result<f64> {
    let e = residual(y, y_hat)?;
    if variances.len() != e.len() {
        return Err(Error::Usage(format!("{} variances for {} coordinates", variances.len(), e.len())));
    }
    if let Some(v) = variances.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("variance {v} must be positive")));
    }
    Ok(e.iter().zip(variances).map(|(r, v)| 0.5 * r * r / v + 0.5 * v.ln()).sum())
}

/// KL regression loss applied once to the stacked corner vector.
pub fn loss_dmg(y_all: &[f64], y_hat_all: &[f64], cov: &CovMatrix) -> Result<f64> {
    kl_regression_loss(y_all, y_hat_all, cov)
}

/// `Σ̄ = Σ_e + ½Σ_a + ½Σ̂`.
pub fn combine_covariance(sigma_e: &CovMatrix, sigma_a: &CovMatrix, sigma_hat: &CovMatrix) -> Result<CovMatrix> {
    sigma_e.add_scaled(sigma_a, 0.5)?.add_scaled(sigma_hat, 0.5)
}

/// Elementwise mean of predicted covariances.
pub fn estimate_sigma_a(covs: &[CovMatrix]) -> Result<CovMatrix> {
    let Some(first) = covs.first() else {
        return Err(Error::InsufficientData("no predicted covariances collected".into()));
    };
    let dim = first.dim();
    let mut sum = vec![0.0; dim * dim];
    for c in covs {
        if c.dim() != dim {
            return Err(Error::Usage(format!("mixed covariance dims {} and {dim}", c.dim())));
        }
        sum.iter_mut().zip(c.entries()).for_each(|(s, v)| *s += v);
    }
    let n = covs.len() as f64;
    CovMatrix::new(dim, sum.into_iter().map(|s| s / n).collect())
}

/// Population covariance (divisor `n`) of residual vectors about their mean.
pub fn estimate_sigma_e(residuals: &[Vec<f64>]) -> Result<CovMatrix> {
    let Some(first) = residuals.first() else {
        return Err(Error::InsufficientData("no residuals collected".into()));
    };
    let dim = first.len();
    if residuals.len() < dim + 1 {
        return Err(Error::InsufficientData(format!("{} residuals, need at least {}", residuals.len(), dim + 1)));
    }
    if residuals.iter().any(|r| r.len() != dim) {
        return Err(Error::Usage("residual vectors of mixed length".into()));
    }
    let n = residuals.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in residuals {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![0.0; dim * dim];
    for r in residuals {
        for a in 0..dim {
            let da = r[a] - mean[a];
            for b in a..dim {
                cov[a * dim + b] += da * (r[b] - mean[b]);
            }
        }
    }
    for a in 0..dim {
        for b in a..dim {
            let v = cov[a * dim + b] / n;
            cov[a * dim + b] = v;
            cov[b * dim + a] = v;
        }
    }
    CovMatrix::new(dim, cov)
}

/// Per-dimension variances only: the diagonal of [`estimate_sigma_e`].
pub fn estimate_sigma_e_diagonal(residuals: &[Vec<f64>]) -> Result<CovMatrix> {
    CovMatrix::diagonal(&estimate_sigma_e(residuals)?.diag())
}

/// Location uncertainty of one predicted box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BoxUncertainty {
    /// One Gaussian per corner.
    Img(Vec<CornerGaussian>),
    /// `(mean, variance)` per corner coordinate, ordered corner-major.
    Isg(Vec<(f64, f64)>),
    /// Joint Gaussian over the corner-major stacked coordinates.
    Dmg { mean: Vec<f64>, cov: CovMatrix },
}

impl BoxUncertainty {
    pub fn variant(&self) -> Variant {
        match self {
            BoxUncertainty::Img(_) => Variant::Img,
            BoxUncertainty::Isg(_) => Variant::Isg,
            BoxUncertainty::Dmg { .. } => Variant::Dmg,
        }
    }

    /// Same covariance `cov` on every corner.
    pub fn isotropic_img(corners: &[[f64; DIM]; CORNERS], cov: &CovMatrix) -> Result<Self> {
        corners
            .iter()
            .map(|c| CornerGaussian::new(c.to_vec(), cov.clone()))
            .collect::<Result<Vec<_>>>()
            .map(BoxUncertainty::Img)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BoxUncertainty::Img(cs) => {
                if cs.len() != CORNERS {
                    return Err(Error::InvalidParameter(format!("{} corners", cs.len())));
                }
                for c in cs {
                    if c.cov.dim() != DIM || !c.cov.is_psd() {
                        return Err(Error::NotPositiveDefinite("corner covariance".into()));
                    }
                }
            }
            BoxUncertainty::Isg(vs) => {
                if vs.len() != CORNERS * DIM {
                    return Err(Error::InvalidParameter(format!("{} coordinates", vs.len())));
                }
                if vs.iter().any(|(_, v)| !(*v > 0.0)) {
                    return Err(Error::InvalidParameter("non-positive variance".into()));
                }
            }
            BoxUncertainty::Dmg { mean, cov } => {
                if mean.len() != CORNERS * DIM || cov.dim() != CORNERS * DIM || !cov.is_psd() {
                    return Err(Error::NotPositiveDefinite("joint covariance".into()));
                }
            }
        }
        Ok(())
    }

    /// Corner means in the fixed corner order.
    pub fn corner_means(&self) -> [[f64; DIM]; CORNERS] {
        let mut out = [[0.0; DIM]; CORNERS];
        for (i, corner) in out.iter_mut().enumerate() {
            for (d, v) in corner.iter_mut().enumerate() {
                *v = match self {
                    BoxUncertainty::Img(cs) => cs[i].mean[d],
                    BoxUncertainty::Isg(vs) => vs[i * DIM + d].0,
                    BoxUncertainty::Dmg { mean, .. } => mean[i * DIM + d],
                };
            }
        }
        out
    }

    /// Covariance blocks in the variant's own representation: one 2×2 per
    /// corner for IMG, one diagonal 2×2 per corner for ISG, one 8×8 for DMG.
    pub fn covariances(&self) -> Vec<CovMatrix> {
        match self {
            BoxUncertainty::Img(cs) => cs.iter().map(|c| c.cov.clone()).collect(),
            BoxUncertainty::Isg(vs) => vs
                .chunks(DIM)
                .map(|ch| {
                    let d: Vec<f64> = ch.iter().map(|(_, v)| *v).collect();
                    CovMatrix::diagonal(&d).expect("finite variances")
                })
                .collect(),
            BoxUncertainty::Dmg { cov, .. } => vec![cov.clone()],
        }
    }

    /// Replaces every covariance by `Σ_e + ½Σ_a + ½Σ̂` at the variant's dimension.
    pub fn combined(&self, sigma_e: &CovMatrix, sigma_a: &CovMatrix) -> Result<Self> {
        self.map_covariances(|c| combine_covariance(sigma_e, sigma_a, c))
    }

    fn map_covariances(&self, f: impl Fn(&CovMatrix) -> Result<CovMatrix>) -> Result<Self> {
        Ok(match self {
            BoxUncertainty::Img(cs) => BoxUncertainty::Img(
                cs.iter().map(|c| CornerGaussian::new(c.mean.clone(), f(&c.cov)?)).collect::<Result<_>>()?,
            ),
            BoxUncertainty::Isg(vs) => {
                let mut out = Vec::with_capacity(vs.len());
                for ch in vs.chunks(DIM) {
                    let d: Vec<f64> = ch.iter().map(|(_, v)| *v).collect();
                    let c = f(&CovMatrix::diagonal(&d)?)?;
                    for (k, (m, _)) in ch.iter().enumerate() {
                        out.push((*m, c.get(k, k)));
                    }
                }
                BoxUncertainty::Isg(out)
            }
            BoxUncertainty::Dmg { mean, cov } => BoxUncertainty::Dmg { mean: mean.clone(), cov: f(cov)? },
        })
    }

    /// Negative log density of the ground-truth corners, one value per corner.
    ///
    /// ISG sums the univariate terms of a corner's coordinates; DMG spreads
    /// the joint value evenly over the corners so the units match IMG.
    pub fn corner_nlls(&self, gt: &[[f64; DIM]; CORNERS]) -> Result<[f64; CORNERS]> {
        let mut out = [0.0; CORNERS];
        match self {
            BoxUncertainty::Img(cs) => {
                for (i, c) in cs.iter().enumerate() {
                    out[i] = -log_pdf(c, &gt[i])?;
                }
            }
            BoxUncertainty::Isg(vs) => {
                for (i, o) in out.iter_mut().enumerate() {
                    for d in 0..DIM {
                        let (m, v) = vs[i * DIM + d];
                        if !(v > 0.0) {
                            return Err(Error::InvalidParameter(format!("variance {v}")));
                        }
                        let r = gt[i][d] - m;
                        *o += 0.5 * (2.0 * PI).ln() + 0.5 * v.ln() + 0.5 * r * r / v;
                    }
                }
            }
            BoxUncertainty::Dmg { mean, cov } => {
                let y: Vec<f64> = gt.iter().flatten().copied().collect();
                let joint = -log_pdf(&CornerGaussian::new(mean.clone(), cov.clone())?, &y)?;
                out = [joint / CORNERS as f64; CORNERS];
            }
        }
        Ok(out)
    }
}
