//! Sparse supervised L1 and the Laplacian likelihoods of both branches.

use ndarray::{Array2, Zip};

use crate::error::{ensure_shape, Error, Result};
use crate::types::{clamp_log_sigma, DepthMap, LogUncertaintyMap, SparseDepthTarget};

/// A scalar loss with its gradients with respect to a depth map and a
/// log-uncertainty map. Maps the loss does not depend on are all-zero.
#[derive(Clone, Debug)]
pub struct DepthSigmaLoss {
    pub value: f64,
    pub d_depth: Array2<f64>,
    pub d_log_sigma: Array2<f64>,
}

#[inline]
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute error over the labelled pixels `Omega_D`.
pub fn supervised_l1(depth: &DepthMap, gt: &SparseDepthTarget) -> Result<DepthSigmaLoss> {
    ensure_shape(&[depth.shape().0, depth.shape().1], &[gt.shape().0, gt.shape().1])?;
    let n = gt.num_valid();
    if n == 0 {
        return Err(Error::NoSupervision);
    }
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut d_depth = Array2::zeros(depth.shape());
    Zip::from(&mut d_depth)
        .and(depth.data())
        .and(gt.values())
        .and(gt.valid())
        .for_each(|g, &d, &t, &ok| {
            if ok {
                value += (d - t).abs();
                *g = sign(d - t) * inv_n;
            }
        });
    Ok(DepthSigmaLoss {
        value: value * inv_n,
        d_depth,
        d_log_sigma: Array2::zeros(depth.shape()),
    })
}

/// Contributions of `residual / sigma + mu * log(sigma)` for one pixel:
/// `(value, d/d residual, d/d s)` with `sigma = clamp(exp(s))`.
#[inline]
fn laplace_term(residual: f64, s: f64, mu: f64) -> (f64, f64, f64) {
    let (sc, active) = clamp_log_sigma(s);
    let inv_sigma = (-sc).exp();
    let value = residual * inv_sigma + mu * sc;
    let d_s = if active { -residual * inv_sigma + mu } else { 0.0 };
    (value, inv_sigma, d_s)
}

/// Laplacian negative log-likelihood on labelled pixels, optionally plus the
/// unprojected-point filtering term that drives the uncertainty of
/// unlabelled pixels towards `m / mu_s`.
pub fn supervised_uncertainty_loss(
    depth: &DepthMap,
    log_sigma: &LogUncertaintyMap,
    gt: &SparseDepthTarget,
    mu_s: f64,
    m: f64,
    filtering: bool,
) -> Result<DepthSigmaLoss> {
    let shape = [depth.shape().0, depth.shape().1];
    ensure_shape(&shape, &[gt.shape().0, gt.shape().1])?;
    ensure_shape(&shape, &[log_sigma.shape().0, log_sigma.shape().1])?;
    let n_labelled = gt.num_valid();
    if n_labelled == 0 {
        return Err(Error::NoSupervision);
    }
    let n_unlabelled = gt.num_invalid();
    let inv_l = 1.0 / n_labelled as f64;
    let inv_u = if filtering && n_unlabelled > 0 {
        1.0 / n_unlabelled as f64
    } else {
        0.0
    };

    let mut labelled = 0.0;
    let mut unlabelled = 0.0;
    let mut d_depth = Array2::zeros(depth.shape());
    let mut d_log_sigma = Array2::zeros(depth.shape());
    Zip::from(&mut d_depth)
        .and(&mut d_log_sigma)
        .and(depth.data())
        .and(log_sigma.data())
        .and(gt.values())
        .and(gt.valid())
        .for_each(|gd, gs, &d, &s, &t, &ok| {
            if ok {
                let (v, inv_sigma, d_s) = laplace_term((d - t).abs(), s, mu_s);
                labelled += v;
                *gd = sign(d - t) * inv_sigma * inv_l;
                *gs = d_s * inv_l;
            } else if inv_u > 0.0 {
                let (v, _, d_s) = laplace_term(m, s, mu_s);
                unlabelled += v;
                *gs = d_s * inv_u;
            }
        });
    Ok(DepthSigmaLoss {
        value: labelled * inv_l + unlabelled * inv_u,
        d_depth,
        d_log_sigma,
    })
}

/// Likelihood of the photometric error with gradients with respect to the
/// per-pixel error and the log-uncertainty.
#[derive(Clone, Debug)]
pub struct PhotometricNll {
    pub value: f64,
    /// Chain this through [`crate::losses::Reprojection::depth_vjp`] to
    /// reach depth.
    pub d_pe: Array2<f64>,
    pub d_log_sigma: Array2<f64>,
}

/// Laplacian negative log-likelihood of the photometric error, averaged over
/// `valid` pixels.
pub fn unsupervised_uncertainty_loss(
    pe: &Array2<f64>,
    valid: &Array2<bool>,
    log_sigma: &LogUncertaintyMap,
    mu_u: f64,
) -> Result<PhotometricNll> {
    ensure_shape(pe.shape(), valid.shape())?;
    ensure_shape(pe.shape(), log_sigma.data().shape())?;
    let n = valid.iter().filter(|v| **v).count();
    if n == 0 {
        return Err(Error::DegenerateBatch("no pixel has a valid warp".into()));
    }
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut d_pe = Array2::zeros(pe.dim());
    let mut d_log_sigma = Array2::zeros(pe.dim());
    Zip::from(&mut d_pe)
        .and(&mut d_log_sigma)
        .and(pe)
        .and(valid)
        .and(log_sigma.data())
        .for_each(|gp, gs, &e, &ok, &s| {
            if ok {
                let (v, inv_sigma, d_s) = laplace_term(e, s, mu_u);
                value += v;
                *gp = inv_sigma * inv_n;
                *gs = d_s * inv_n;
            }
        });
    Ok(PhotometricNll {
        value: value * inv_n,
        d_pe,
        d_log_sigma,
    })
}
