//! Every training objective, each returning its value together with
//! analytic gradients.
//!
//! Losses are pure functions of their inputs. Stop-gradient on teacher
//! tensors is the caller's decision: distillation losses report gradients
//! for teacher inputs as well, and the training loop discards them.

mod distill;
mod photometric;
mod smoothness;
mod supervised;

pub use distill::{
    confidence_threshold_weight, distillation_loss, distillation_weight, mutual_distillation_loss,
    weighted_distillation, DistillLoss, DistillMode,
};
pub use photometric::{
    photometric_error, ssim, unsupervised_photometric_loss, PhotometricLoss, PhotometricReduce, Reprojection,
    ReprojectionOptions, SSIM_C1, SSIM_C2,
};
pub use smoothness::{smoothness_loss, SmoothnessLoss};
pub use supervised::{
    supervised_l1, supervised_uncertainty_loss, unsupervised_uncertainty_loss, DepthSigmaLoss, PhotometricNll,
};

use serde::{Deserialize, Serialize};

use crate::types::LossWeights;

/// Named scalar losses of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Sparse supervised L1.
    pub l_s: f64,
    /// Unweighted photometric reprojection loss.
    pub l_u: f64,
    pub l_smooth: f64,
    /// Supervised likelihood, including the filtering term when enabled.
    pub l_su: f64,
    /// Photometric likelihood.
    pub l_uu: f64,
    /// Distillation into the supervised branch.
    pub l_sd: f64,
    /// Distillation into the unsupervised branch.
    pub l_ud: f64,
    pub total_s: f64,
    pub total_u: f64,
    /// Single-network combined objective.
    pub baseline: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,l_s,l_u,l_smooth,l_su,l_uu,l_sd,l_ud,total_s,total_u";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{},{},{},{}",
            self.l_s, self.l_u, self.l_smooth, self.l_su, self.l_uu, self.l_sd, self.l_ud, self.total_s, self.total_u
        )
    }

    /// Named fields in report order, for diagnostics.
    pub fn terms(&self) -> [(&'static str, f64); 10] {
        [
            ("l_s", self.l_s),
            ("l_u", self.l_u),
            ("l_smooth", self.l_smooth),
            ("l_su", self.l_su),
            ("l_uu", self.l_uu),
            ("l_sd", self.l_sd),
            ("l_ud", self.l_ud),
            ("total_s", self.total_s),
            ("total_u", self.total_u),
            ("baseline", self.baseline),
        ]
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            l_s: self.l_s * k,
            l_u: self.l_u * k,
            l_smooth: self.l_smooth * k,
            l_su: self.l_su * k,
            l_uu: self.l_uu * k,
            l_sd: self.l_sd * k,
            l_ud: self.l_ud * k,
            total_s: self.total_s * k,
            total_u: self.total_u * k,
            baseline: self.baseline * k,
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        Self {
            l_s: self.l_s + o.l_s,
            l_u: self.l_u + o.l_u,
            l_smooth: self.l_smooth + o.l_smooth,
            l_su: self.l_su + o.l_su,
            l_uu: self.l_uu + o.l_uu,
            l_sd: self.l_sd + o.l_sd,
            l_ud: self.l_ud + o.l_ud,
            total_s: self.total_s + o.total_s,
            total_u: self.total_u + o.total_u,
            baseline: self.baseline + o.baseline,
        }
    }
}

/// Branch totals and the single-network objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Totals {
    pub total_s: f64,
    pub total_u: f64,
    pub baseline: f64,
}

/// `total_s = l_su + lambda_s l_sd`,
/// `total_u = l_uu + lambda_u l_ud + lambda_smooth l_smooth`,
/// `baseline = l_s + lambda_u l_u + lambda_smooth l_smooth`.
pub fn total_losses(parts: &LossReport, weights: &LossWeights) -> Totals {
    Totals {
        total_s: parts.l_su + weights.lambda_s * parts.l_sd,
        total_u: parts.l_uu + weights.lambda_u * parts.l_ud + weights.lambda_smooth * parts.l_smooth,
        baseline: parts.l_s + weights.lambda_u * parts.l_u + weights.lambda_smooth * parts.l_smooth,
    }
}
