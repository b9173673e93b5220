//! Uncertainty-weighted mutual distillation.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::losses::supervised::sign;
use crate::types::{clamp_log_sigma, DepthMap, LogUncertaintyMap};

/// How the teacher's uncertainty turns into per-pixel distillation weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillMode {
    /// `w = 1 / sigma`.
    #[default]
    Uw,
    /// `w = 1` where `sigma < tau`, else 0.
    Ut,
    /// `w = 1 / sigma` where `sigma < tau`, else 0.
    Uwt,
}

impl DistillMode {
    pub const ALL: [DistillMode; 3] = [DistillMode::Uw, DistillMode::Ut, DistillMode::Uwt];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Uw => "uw",
            Self::Ut => "ut",
            Self::Uwt => "uwt",
        }
    }
}

impl std::str::FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uw" => Ok(Self::Uw),
            "ut" => Ok(Self::Ut),
            "uwt" => Ok(Self::Uwt),
            other => Err(Error::Config(format!("distill mode must be uw|ut|uwt, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for DistillMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[inline]
fn weight_and_slope(mode: DistillMode, sigma: f64, tau: f64) -> (f64, f64) {
    // Returns (w, dw/dsigma).
    match mode {
        DistillMode::Uw => (1.0 / sigma, -1.0 / (sigma * sigma)),
        DistillMode::Ut => (if sigma < tau { 1.0 } else { 0.0 }, 0.0),
        DistillMode::Uwt => {
            if sigma < tau {
                (1.0 / sigma, -1.0 / (sigma * sigma))
            } else {
                (0.0, 0.0)
            }
        }
    }
}

/// Per-pixel distillation weights from a (positive) uncertainty grid.
pub fn distillation_weight(mode: DistillMode, sigma: &Array2<f64>, tau: f64) -> Result<Array2<f64>> {
    if let Some(bad) = sigma.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::Validation(format!("sigma must be positive and finite, found {bad}")));
    }
    Ok(sigma.mapv(|s| weight_and_slope(mode, s, tau).0))
}

/// Weights from an external confidence grid: 1 where `confidence >= tau`.
pub fn confidence_threshold_weight(confidence: &Array2<f64>, tau: f64) -> Array2<f64> {
    confidence.mapv(|c| if c >= tau { 1.0 } else { 0.0 })
}

#[derive(Clone, Debug)]
pub struct DistillLoss {
    pub value: f64,
    pub d_student: Array2<f64>,
    /// Gradient with respect to the teacher depth; training discards it.
    pub d_teacher: Array2<f64>,
    /// Gradient with respect to the teacher log-uncertainty; training
    /// discards it.
    pub d_teacher_log_sigma: Array2<f64>,
}

/// `sum(w |student - teacher|) / sum(w)` for explicit weights. Returns zero
/// (with zero gradients) when every weight is zero.
pub fn weighted_distillation(student: &DepthMap, teacher: &DepthMap, weights: &Array2<f64>) -> Result<DistillLoss> {
    let shape = [student.shape().0, student.shape().1];
    ensure_shape(&shape, &[teacher.shape().0, teacher.shape().1])?;
    ensure_shape(&shape, weights.shape())?;
    let total: f64 = weights.sum();
    let zeros = Array2::zeros(student.shape());
    if total <= 0.0 {
        return Ok(DistillLoss {
            value: 0.0,
            d_student: zeros.clone(),
            d_teacher: zeros.clone(),
            d_teacher_log_sigma: zeros,
        });
    }
    let mut value = 0.0;
    let mut d_student = zeros.clone();
    Zip::from(&mut d_student)
        .and(student.data())
        .and(teacher.data())
        .and(weights)
        .for_each(|g, &s, &t, &w| {
            value += w * (s - t).abs();
            *g = w * sign(s - t) / total;
        });
    let d_teacher = d_student.mapv(|g| -g);
    Ok(DistillLoss {
        value: value / total,
        d_student,
        d_teacher,
        d_teacher_log_sigma: zeros,
    })
}

/// Distills `teacher` into `student`, weighting pixels by the teacher's
/// uncertainty according to `mode`.
pub fn distillation_loss(
    student: &DepthMap,
    teacher: &DepthMap,
    teacher_log_sigma: &LogUncertaintyMap,
    mode: DistillMode,
    tau: f64,
) -> Result<DistillLoss> {
    ensure_shape(&[student.shape().0, student.shape().1], &[teacher_log_sigma.shape().0, teacher_log_sigma.shape().1])?;
    let clamped = teacher_log_sigma.data().mapv(clamp_log_sigma);
    let sigma = clamped.mapv(|(s, _)| s.exp());
    let weights = distillation_weight(mode, &sigma, tau)?;
    let mut out = weighted_distillation(student, teacher, &weights)?;
    let total: f64 = weights.sum();
    if total > 0.0 {
        // dL/dw_i = (|r_i| - L) / W, dsigma/ds = sigma inside the clamp.
        Zip::from(&mut out.d_teacher_log_sigma)
            .and(student.data())
            .and(teacher.data())
            .and(&clamped)
            .for_each(|g, &s, &t, &(sc, active)| {
                if active {
                    let sigma = sc.exp();
                    let (_, slope) = weight_and_slope(mode, sigma, tau);
                    *g = ((s - t).abs() - out.value) / total * slope * sigma;
                }
            });
    }
    Ok(out)
}

/// Uncertainty-weighted distillation (`w = 1 / sigma_teacher`).
pub fn mutual_distillation_loss(
    student: &DepthMap,
    teacher: &DepthMap,
    teacher_log_sigma: &LogUncertaintyMap,
) -> Result<DistillLoss> {
    distillation_loss(student, teacher, teacher_log_sigma, DistillMode::Uw, f64::INFINITY)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn hand_example() {
        let student = DepthMap::new(array![[1e-9, 1e-9]]).unwrap();
        let teacher = DepthMap::new(array![[1.0, 2.0]]).unwrap();
        let s = LogUncertaintyMap::new(array![[0.0, 2f64.ln()]]).unwrap();
        let l = mutual_distillation_loss(&student, &teacher, &s).unwrap();
        assert_relative_eq!(l.value, (1.0 + 1.0) / 1.5, max_relative = 1e-8);
    }

    #[test]
    fn identical_depths_give_zero() {
        let d = DepthMap::new(array![[1.0, 4.0], [2.0, 3.0]]).unwrap();
        let s = LogUncertaintyMap::new(array![[0.3, -1.0], [2.0, 0.0]]).unwrap();
        assert_eq!(mutual_distillation_loss(&d, &d, &s).unwrap().value, 0.0);
    }

    #[test]
    fn weight_modes() {
        let sigma = array![[1.0, 2.0]];
        assert_eq!(distillation_weight(DistillMode::Uw, &sigma, 0.1).unwrap(), array![[1.0, 0.5]]);
        let sigma = array![[0.05, 0.2]];
        assert_eq!(distillation_weight(DistillMode::Ut, &sigma, 0.1).unwrap(), array![[1.0, 0.0]]);
        assert_eq!(distillation_weight(DistillMode::Uwt, &sigma, 0.1).unwrap(), array![[20.0, 0.0]]);
        assert!(distillation_weight(DistillMode::Uw, &array![[0.0]], 0.1).is_err());
    }

    #[test]
    fn all_zero_weights_report_zero() {
        let a = DepthMap::new(array![[1.0, 4.0]]).unwrap();
        let b = DepthMap::new(array![[2.0, 3.0]]).unwrap();
        let s = LogUncertaintyMap::new(array![[1.0, 1.0]]).unwrap();
        let l = distillation_loss(&a, &b, &s, DistillMode::Ut, 0.1).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.d_student.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("UWT".parse::<DistillMode>().unwrap(), DistillMode::Uwt);
        assert!("ct".parse::<DistillMode>().is_err());
    }
}
