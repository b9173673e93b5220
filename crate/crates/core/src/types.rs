//! Shared domain types and the disparity/depth parameterization.
//!
//! Every grid type validates its contents on construction and is immutable
//! afterwards. Grids are stored row-major as `[height, width]` (or
//! `[channel, height, width]` for images).

use nalgebra::{Matrix3, Rotation3, Vector3};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};

/// Lower clamp applied to `exp(log_sigma)` whenever a loss consumes it.
pub const SIGMA_MIN: f64 = 1e-3;
/// Upper clamp applied to `exp(log_sigma)` whenever a loss consumes it.
pub const SIGMA_MAX: f64 = 1e3;

/// Clamps a predicted log-scale into the admissible range.
///
/// Returns the clamped value and whether the input was inside the range
/// (the derivative of the clamp is 1 there and 0 outside).
#[inline]
pub fn clamp_log_sigma(s: f64) -> (f64, bool) {
    let lo = SIGMA_MIN.ln();
    let hi = SIGMA_MAX.ln();
    if s < lo {
        (lo, false)
    } else if s > hi {
        (hi, false)
    } else {
        (s, true)
    }
}

fn all_finite<'a>(mut values: impl Iterator<Item = &'a f64>) -> bool {
    values.all(|v| v.is_finite())
}

/// Depth bounds used by the decoder parameterization and by evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub min: f64,
    pub max: f64,
}

impl Default for DepthRange {
    fn default() -> Self {
        Self {
            min: 0.1,
            max: 100.0,
        }
    }
}

impl DepthRange {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && 0.0 < min && min < max) {
            return Err(Error::Validation(format!(
                "depth range requires 0 < min < max, got [{min}, {max}]"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn clamp(&self, d: f64) -> f64 {
        d.clamp(self.min, self.max)
    }

    pub fn contains(&self, d: f64) -> bool {
        d >= self.min && d <= self.max
    }

    /// Maps a squashed network output in `[0, 1]` to metric depth.
    #[inline]
    pub fn depth_from_disparity(&self, raw: f64) -> f64 {
        let near = 1.0 / self.min;
        let far = 1.0 / self.max;
        1.0 / (raw * near + (1.0 - raw) * far)
    }

    /// Derivative of [`Self::depth_from_disparity`] with respect to `raw`.
    #[inline]
    pub fn depth_from_disparity_grad(&self, raw: f64) -> f64 {
        let d = self.depth_from_disparity(raw);
        -(1.0 / self.min - 1.0 / self.max) * d * d
    }
}

/// Converts a grid of squashed disparities in `[0, 1]` to a depth map whose
/// values lie in `[range.min, range.max]`.
pub fn disparity_to_depth(raw: &Array2<f64>, range: &DepthRange) -> Result<DepthMap> {
    if let Some(bad) = raw.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
        return Err(Error::Validation(format!(
            "disparity must be finite and in [0, 1], found {bad}"
        )));
    }
    // Rounding can push 1/(1/d_min) a hair outside the bounds; clamp it back.
    Ok(DepthMap {
        data: raw.mapv(|r| range.clamp(range.depth_from_disparity(r))),
    })
}

/// Three-channel image with values in `[0, 1]`, shape `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 {
            return Err(Error::Validation(format!("image must have 3 channels, got {c}")));
        }
        if h < 2 || w < 2 {
            return Err(Error::Validation(format!("image must be at least 2x2, got {h}x{w}")));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Validation(format!(
                "image values must be finite and in [0, 1], found {bad}"
            )));
        }
        Ok(Self { data })
    }

    /// Builds an image from values that may have drifted outside `[0, 1]`,
    /// clamping them. Non-finite values are still rejected.
    pub fn from_clamped(mut data: Array3<f64>) -> Result<Self> {
        data.mapv_inplace(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { v });
        Self::new(data)
    }

    pub fn constant(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::new(Array3::from_shape_fn((3, height, width), |(c, _, _)| rgb[c]))
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.data
    }

    pub fn flipped(&self) -> Self {
        let mut data = self.data.clone();
        data.invert_axis(Axis(2));
        Self {
            data: data.as_standard_layout().to_owned(),
        }
    }
}

/// Per-pixel depth in meters, shape `[H, W]`. Values are finite and positive.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    data: Array2<f64>,
}

impl DepthMap {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v <= 0.0) {
            return Err(Error::Validation(format!(
                "depth must be finite and positive, found {bad}"
            )));
        }
        Ok(Self { data })
    }

    /// Like [`DepthMap::new`] but additionally requires every value to lie
    /// inside `range`.
    pub fn within(data: Array2<f64>, range: &DepthRange) -> Result<Self> {
        let map = Self::new(data)?;
        if let Some(bad) = map.data.iter().find(|v| !range.contains(**v)) {
            return Err(Error::Validation(format!(
                "depth {bad} outside [{}, {}]",
                range.min, range.max
            )));
        }
        Ok(map)
    }

    pub fn constant(height: usize, width: usize, depth: f64) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), depth))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    pub fn flipped(&self) -> Self {
        Self {
            data: flip_grid(&self.data),
        }
    }
}

/// Per-pixel `s = log(sigma)` of the Laplacian scale, shape `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogUncertaintyMap {
    data: Array2<f64>,
}

impl LogUncertaintyMap {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if !all_finite(data.iter()) {
            return Err(Error::Validation("log-uncertainty contains NaN/Inf".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array2::zeros((height, width)),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    /// `exp(s)` clamped to `[SIGMA_MIN, SIGMA_MAX]`.
    pub fn sigma(&self) -> Array2<f64> {
        self.data.mapv(|s| clamp_log_sigma(s).0.exp())
    }
}

/// Sparse metric ground truth with its validity mask `Omega_D`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDepthTarget {
    values: Array2<f64>,
    valid: Array2<bool>,
}

impl SparseDepthTarget {
    pub fn new(values: Array2<f64>, valid: Array2<bool>) -> Result<Self> {
        ensure_shape(values.shape(), valid.shape())?;
        for (v, ok) in values.iter().zip(valid.iter()) {
            if !v.is_finite() {
                return Err(Error::Validation("sparse depth contains NaN/Inf".into()));
            }
            if *ok && *v <= 0.0 {
                return Err(Error::Validation(format!(
                    "valid sparse depth must be positive, found {v}"
                )));
            }
        }
        Ok(Self { values, valid })
    }

    /// Treats zero entries as missing, following the 16-bit depth PNG convention.
    pub fn from_zero_invalid(values: Array2<f64>) -> Result<Self> {
        let valid = values.mapv(|v| v > 0.0);
        Self::new(values, valid)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn valid(&self) -> &Array2<bool> {
        &self.valid
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// `N_D`, the number of labelled pixels.
    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// `N_{D/}`, the number of unlabelled pixels.
    pub fn num_invalid(&self) -> usize {
        self.valid.len() - self.num_valid()
    }

    pub fn density(&self) -> f64 {
        self.num_valid() as f64 / self.valid.len() as f64
    }

    pub fn flipped(&self) -> Self {
        Self {
            values: flip_grid(&self.values),
            valid: flip_grid(&self.valid),
        }
    }
}

/// Pinhole intrinsics. Pixel `(u, v)` sits at continuous coordinate `(u, v)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraModel {
    /// Validates the intrinsics against an image of `height x width` pixels.
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, height: usize, width: usize) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy };
        cam.validate(height, width)?;
        Ok(cam)
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Validation(format!("invalid focal lengths in {self:?}")));
        }
        if !(0.0..width as f64).contains(&self.cx) || !(0.0..height as f64).contains(&self.cy) {
            return Err(Error::Validation(format!(
                "principal point ({}, {}) outside {height}x{width} image",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    /// Intrinsics of the horizontally mirrored image.
    pub fn flipped(&self, width: usize) -> Self {
        Self {
            cx: (width as f64 - 1.0) - self.cx,
            ..*self
        }
    }
}

/// Rigid transform mapping points from the reference camera frame into the
/// source camera frame: `p' = R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::Validation("pose contains NaN/Inf".into()));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "rotation is not a proper rotation (|R^T R - I| = {ortho:e}, det = {det})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation given as an axis-angle vector (radians), then translation.
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::new(axis_angle).into_inner(),
            translation,
        }
    }

    pub fn translation_only(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self * other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// The same motion expressed in horizontally mirrored camera frames.
    pub fn flipped(&self) -> RigidPose {
        let f = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        RigidPose {
            rotation: f * self.rotation * f,
            translation: f * self.translation,
        }
    }

    /// Row-major 3x4 `[R | t]`.
    pub fn to_matrix_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
        ]
    }

    pub fn from_matrix_3x4(m: &[f64; 12]) -> Result<Self> {
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        // Text round trips lose a few ulps; re-orthonormalize before validating.
        let rotation = Rotation3::from_matrix_eps(&rotation, f64::EPSILON, 20, Rotation3::from_matrix_unchecked(rotation))
            .into_inner();
        Self::new(rotation, Vector3::new(m[3], m[7], m[11]))
    }

    pub fn max_abs_diff(&self, other: &RigidPose) -> f64 {
        (self.rotation - other.rotation)
            .abs()
            .max()
            .max((self.translation - other.translation).abs().max())
    }
}

/// A neighbouring frame `J` and the pose taking reference points into it.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceFrame {
    pub image: ImageTensor,
    pub pose: RigidPose,
}

/// One training/evaluation sample: the reference frame, its neighbours, and
/// every target the losses need.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSample {
    pub target: ImageTensor,
    pub sources: Vec<SourceFrame>,
    pub camera: CameraModel,
    pub sparse_gt: SparseDepthTarget,
    pub dense_gt: Option<DepthMap>,
    /// `true` marks pixels that belong to an object instance.
    pub instance_mask: Array2<bool>,
}

impl FrameSample {
    pub fn new(
        target: ImageTensor,
        sources: Vec<SourceFrame>,
        camera: CameraModel,
        sparse_gt: SparseDepthTarget,
        dense_gt: Option<DepthMap>,
        instance_mask: Array2<bool>,
    ) -> Result<Self> {
        let sample = Self {
            target,
            sources,
            camera,
            sparse_gt,
            dense_gt,
            instance_mask,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.target.shape();
        if self.sources.is_empty() {
            return Err(Error::Validation("sample needs at least one source frame".into()));
        }
        for s in &self.sources {
            ensure_shape(&[h, w], &[s.image.height(), s.image.width()])?;
        }
        ensure_shape(&[h, w], self.sparse_gt.values().shape())?;
        ensure_shape(&[h, w], self.instance_mask.shape())?;
        if let Some(d) = &self.dense_gt {
            ensure_shape(&[h, w], d.data().shape())?;
        }
        self.camera.validate(h, w)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.target.shape()
    }

    /// Horizontally mirrors every grid and remaps intrinsics and poses so the
    /// sample describes the mirrored scene.
    pub fn flipped(&self) -> Self {
        let (_, w) = self.shape();
        Self {
            target: self.target.flipped(),
            sources: self
                .sources
                .iter()
                .map(|s| SourceFrame {
                    image: s.image.flipped(),
                    pose: s.pose.flipped(),
                })
                .collect(),
            camera: self.camera.flipped(w),
            sparse_gt: self.sparse_gt.flipped(),
            dense_gt: self.dense_gt.as_ref().map(DepthMap::flipped),
            instance_mask: flip_grid(&self.instance_mask),
        }
    }
}

/// Mirrors a grid along its last (width) axis.
pub fn flip_grid<T: Clone>(grid: &Array2<T>) -> Array2<T> {
    let mut g = grid.clone();
    g.invert_axis(Axis(1));
    g.as_standard_layout().to_owned()
}

/// Weights of every loss term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the distillation term in the supervised total.
    pub lambda_s: f64,
    /// Weight of the distillation term in the unsupervised total; also the
    /// photometric weight of the single-network baseline.
    pub lambda_u: f64,
    pub lambda_smooth: f64,
    /// Weight of `log(sigma)` in the supervised likelihood.
    pub mu_s: f64,
    /// Weight of `log(sigma)` in the unsupervised likelihood.
    pub mu_u: f64,
    /// Pseudo-residual assigned to unlabelled pixels.
    pub m: f64,
    /// SSIM/L1 balance of the photometric error.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_s: 1.0,
            lambda_u: 0.05,
            lambda_smooth: 0.001,
            mu_s: 3.0,
            mu_u: 0.03,
            m: 2.0,
            alpha: 0.85,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_s", self.lambda_s),
            ("lambda_u", self.lambda_u),
            ("lambda_smooth", self.lambda_smooth),
            ("mu_s", self.mu_s),
            ("mu_u", self.mu_u),
            ("m", self.m),
            ("alpha", self.alpha),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Validation(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.alpha > 1.0 {
            return Err(Error::Validation(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn disparity_endpoints_and_midpoint() {
        let range = DepthRange::default();
        let d = disparity_to_depth(&array![[0.0, 1.0, 0.5]], &range).unwrap();
        assert_relative_eq!(d.data()[[0, 0]], 100.0, max_relative = 1e-12);
        assert_relative_eq!(d.data()[[0, 1]], 0.1, max_relative = 1e-12);
        assert_relative_eq!(d.data()[[0, 2]], 1.0 / (0.5 * 10.0 + 0.5 * 0.01), max_relative = 1e-12);
        assert_relative_eq!(d.data()[[0, 2]], 0.199_800_199_800_199_8, max_relative = 1e-12);
    }

    #[test]
    fn disparity_rejects_non_finite() {
        let range = DepthRange::default();
        assert!(disparity_to_depth(&array![[f64::NAN]], &range).is_err());
        assert!(disparity_to_depth(&array![[f64::INFINITY]], &range).is_err());
        assert!(disparity_to_depth(&array![[1.5]], &range).is_err());
    }

    #[test]
    fn disparity_gradient_matches_difference() {
        let range = DepthRange::default();
        for &r in &[0.1, 0.37, 0.9] {
            let h = 1e-6;
            let fd = (range.depth_from_disparity(r + h) - range.depth_from_disparity(r - h)) / (2.0 * h);
            assert_relative_eq!(range.depth_from_disparity_grad(r), fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn constructors_reject_nan() {
        let mut img = Array3::from_elem((3, 4, 4), 0.5);
        img[[1, 2, 2]] = f64::NAN;
        assert!(ImageTensor::new(img).is_err());
        assert!(DepthMap::new(array![[1.0, f64::INFINITY]]).is_err());
        assert!(LogUncertaintyMap::new(array![[f64::NAN]]).is_err());
        assert!(SparseDepthTarget::new(array![[f64::NAN]], array![[false]]).is_err());
        assert!(SparseDepthTarget::new(array![[0.0]], array![[true]]).is_err());
        assert!(ImageTensor::new(Array3::from_elem((3, 1, 4), 0.5)).is_err());
    }

    #[test]
    fn pose_inverse_and_compose() {
        let a = RigidPose::from_axis_angle(Vector3::new(0.1, -0.2, 0.05), Vector3::new(1.0, 2.0, -0.5));
        let b = RigidPose::from_axis_angle(Vector3::new(-0.3, 0.0, 0.2), Vector3::new(0.0, -1.0, 0.3));
        let c = RigidPose::from_axis_angle(Vector3::new(0.0, 0.4, 0.1), Vector3::new(0.2, 0.1, 0.0));
        assert!(a.compose(&a.inverse()).max_abs_diff(&RigidPose::identity()) < 1e-12);
        let left = a.compose(&b).compose(&c);
        let right = a.compose(&b.compose(&c));
        assert!(left.max_abs_diff(&right) < 1e-12);
        assert!(RigidPose::new(*a.rotation(), *a.translation()).is_ok());
        assert!(RigidPose::new(Matrix3::from_diagonal_element(2.0), Vector3::zeros()).is_err());
        let reflection = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        assert!(RigidPose::new(reflection, Vector3::zeros()).is_err());
    }

    #[test]
    fn pose_matrix_round_trip() {
        let a = RigidPose::from_axis_angle(Vector3::new(0.3, 0.2, -0.1), Vector3::new(1.0, 2.0, 3.0));
        let b = RigidPose::from_matrix_3x4(&a.to_matrix_3x4()).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn camera_validation_and_flip() {
        assert!(CameraModel::new(10.0, 10.0, 3.0, 2.0, 4, 8).is_ok());
        assert!(CameraModel::new(-1.0, 10.0, 3.0, 2.0, 4, 8).is_err());
        assert!(CameraModel::new(10.0, 10.0, 8.0, 2.0, 4, 8).is_err());
        let cam = CameraModel::new(10.0, 10.0, 3.0, 2.0, 4, 8).unwrap();
        assert_eq!(cam.flipped(8).cx, 4.0);
        assert_eq!(cam.flipped(8).flipped(8), cam);
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.lambda_s, w.lambda_u, w.lambda_smooth), (1.0, 0.05, 0.001));
        assert_eq!((w.mu_s, w.mu_u, w.alpha), (3.0, 0.03, 0.85));
        assert!(w.validate().is_ok());
        assert!(LossWeights { alpha: 1.2, ..w }.validate().is_err());
    }

    #[test]
    fn sigma_clamp() {
        let s = LogUncertaintyMap::new(array![[-100.0, 0.0, 100.0]]).unwrap();
        let sigma = s.sigma();
        assert_relative_eq!(sigma[[0, 0]], SIGMA_MIN, max_relative = 1e-12);
        assert_eq!(sigma[[0, 1]], 1.0);
        assert_relative_eq!(sigma[[0, 2]], SIGMA_MAX, max_relative = 1e-12);
    }
}
