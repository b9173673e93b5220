//! View synthesis: back-projection, rigid projection and bilinear sampling,
//! with the vector-Jacobian products needed to push photometric gradients
//! back onto depth.

use nalgebra::Vector3;
use ndarray::{Array2, Array3};

use crate::error::{ensure_shape, Result};
use crate::types::{CameraModel, DepthMap, ImageTensor, RigidPose};

/// Points at or behind this depth (meters, in the source frame) are masked.
pub const Z_EPS: f64 = 1e-3;

/// Lifts every pixel to a 3-D point in the camera frame, shape `[H, W, 3]`.
pub fn backproject(depth: &DepthMap, camera: &CameraModel) -> Array3<f64> {
    let (h, w) = depth.shape();
    let d = depth.data();
    Array3::from_shape_fn((h, w, 3), |(v, u, k)| {
        let z = d[[v, u]];
        match k {
            0 => z * (u as f64 - camera.cx) / camera.fx,
            1 => z * (v as f64 - camera.cy) / camera.fy,
            _ => z,
        }
    })
}

/// Pixel coordinates of points after moving them into another camera.
#[derive(Clone, Debug)]
pub struct Projection {
    /// `[H, W, 2]` holding `(u, v)` per input point.
    pub coords: Array3<f64>,
    /// `false` where the transformed point lies at `z <= Z_EPS`.
    pub in_front: Array2<bool>,
}

/// Applies `pose` to every point and projects with `camera`.
///
/// Points behind the camera get coordinates `(-1, -1)` (never sampled) and
/// `in_front = false`.
pub fn project(points: &Array3<f64>, pose: &RigidPose, camera: &CameraModel) -> Projection {
    let (h, w, _) = points.dim();
    let mut coords = Array3::from_elem((h, w, 2), -1.0);
    let mut in_front = Array2::from_elem((h, w), false);
    for v in 0..h {
        for u in 0..w {
            let p = Vector3::new(points[[v, u, 0]], points[[v, u, 1]], points[[v, u, 2]]);
            let q = pose.transform(&p);
            if q.z > Z_EPS {
                coords[[v, u, 0]] = camera.fx * q.x / q.z + camera.cx;
                coords[[v, u, 1]] = camera.fy * q.y / q.z + camera.cy;
                in_front[[v, u]] = true;
            }
        }
    }
    Projection { coords, in_front }
}

#[inline]
fn in_bounds(x: f64, y: f64, h: usize, w: usize) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64
}

/// Corner indices and fractional offsets of a bilinear lookup.
#[derive(Clone, Copy)]
struct Taps {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    fx: f64,
    fy: f64,
}

impl Taps {
    fn new(x: f64, y: f64, h: usize, w: usize) -> Self {
        let x0 = (x.floor() as usize).min(w - 1);
        let y0 = (y.floor() as usize).min(h - 1);
        Self {
            x0,
            y0,
            x1: (x0 + 1).min(w - 1),
            y1: (y0 + 1).min(h - 1),
            fx: x - x0 as f64,
            fy: y - y0 as f64,
        }
    }
}

/// Bilinearly samples `image` at `coords` (`[H', W', 2]`, `(u, v)` order).
///
/// Samples outside `[0, W-1] x [0, H-1]` (or with non-finite coordinates)
/// are zero and flagged invalid.
pub fn bilinear_sample(image: &ImageTensor, coords: &Array3<f64>) -> (ImageTensor, Array2<bool>) {
    let (out, valid) = sample_raw(image.data(), coords);
    // Convex combinations of [0,1] values stay in [0,1].
    (ImageTensor::from_clamped(out).expect("bilinear sample is finite"), valid)
}

fn sample_raw(img: &Array3<f64>, coords: &Array3<f64>) -> (Array3<f64>, Array2<bool>) {
    let (c, h, w) = img.dim();
    let (oh, ow, _) = coords.dim();
    let mut out = Array3::zeros((c, oh, ow));
    let mut valid = Array2::from_elem((oh, ow), false);
    for v in 0..oh {
        for u in 0..ow {
            let (x, y) = (coords[[v, u, 0]], coords[[v, u, 1]]);
            if !in_bounds(x, y, h, w) {
                continue;
            }
            valid[[v, u]] = true;
            let t = Taps::new(x, y, h, w);
            for ch in 0..c {
                let top = img[[ch, t.y0, t.x0]] * (1.0 - t.fx) + img[[ch, t.y0, t.x1]] * t.fx;
                let bot = img[[ch, t.y1, t.x0]] * (1.0 - t.fx) + img[[ch, t.y1, t.x1]] * t.fx;
                out[[ch, v, u]] = top * (1.0 - t.fy) + bot * t.fy;
            }
        }
    }
    (out, valid)
}

/// Vector-Jacobian product of [`bilinear_sample`].
///
/// Given `grad_out` (`[C, H', W']`), returns the gradient with respect to the
/// sampled image (`[C, H, W]`) and with respect to the coordinates
/// (`[H', W', 2]`). Invalid samples contribute nothing.
pub fn bilinear_sample_vjp(
    image: &ImageTensor,
    coords: &Array3<f64>,
    grad_out: &Array3<f64>,
) -> (Array3<f64>, Array3<f64>) {
    let img = image.data();
    let (c, h, w) = img.dim();
    let (oh, ow, _) = coords.dim();
    let mut g_img = Array3::zeros((c, h, w));
    let mut g_xy = Array3::zeros((oh, ow, 2));
    for v in 0..oh {
        for u in 0..ow {
            let (x, y) = (coords[[v, u, 0]], coords[[v, u, 1]]);
            if !in_bounds(x, y, h, w) {
                continue;
            }
            let t = Taps::new(x, y, h, w);
            let (mut gx, mut gy) = (0.0, 0.0);
            for ch in 0..c {
                let g = grad_out[[ch, v, u]];
                if g == 0.0 {
                    continue;
                }
                let i00 = img[[ch, t.y0, t.x0]];
                let i01 = img[[ch, t.y0, t.x1]];
                let i10 = img[[ch, t.y1, t.x0]];
                let i11 = img[[ch, t.y1, t.x1]];
                gx += g * ((1.0 - t.fy) * (i01 - i00) + t.fy * (i11 - i10));
                gy += g * ((1.0 - t.fx) * (i10 - i00) + t.fx * (i11 - i01));
                g_img[[ch, t.y0, t.x0]] += g * (1.0 - t.fx) * (1.0 - t.fy);
                g_img[[ch, t.y0, t.x1]] += g * t.fx * (1.0 - t.fy);
                g_img[[ch, t.y1, t.x0]] += g * (1.0 - t.fx) * t.fy;
                g_img[[ch, t.y1, t.x1]] += g * t.fx * t.fy;
            }
            g_xy[[v, u, 0]] = gx;
            g_xy[[v, u, 1]] = gy;
        }
    }
    (g_img, g_xy)
}

/// The reference image re-synthesized from a source frame, together with
/// what is needed to differentiate it with respect to depth.
#[derive(Clone, Debug)]
pub struct Warp {
    /// `I'`, shape `[3, H, W]`; zero where invalid.
    pub image: Array3<f64>,
    /// In front of the source camera and inside its image bounds.
    pub valid: Array2<bool>,
    pub coords: Array3<f64>,
    /// Derivative of the sampling coordinates with respect to the depth of
    /// the same pixel, `[H, W, 2]`.
    pub coords_depth_grad: Array3<f64>,
}

impl Warp {
    pub fn to_image(&self) -> ImageTensor {
        ImageTensor::from_clamped(self.image.clone()).expect("warped image is finite")
    }

    /// Pulls a gradient on the warped image back to the reference depth.
    pub fn depth_vjp(&self, source: &ImageTensor, grad_image: &Array3<f64>) -> Array2<f64> {
        let (_, g_xy) = bilinear_sample_vjp(source, &self.coords, grad_image);
        let (h, w) = self.valid.dim();
        Array2::from_shape_fn((h, w), |(v, u)| {
            if self.valid[[v, u]] {
                g_xy[[v, u, 0]] * self.coords_depth_grad[[v, u, 0]]
                    + g_xy[[v, u, 1]] * self.coords_depth_grad[[v, u, 1]]
            } else {
                0.0
            }
        })
    }
}

/// Synthesizes the reference view `I' = J<proj(D, T, K)>` by sampling
/// `source` at the projection of every reference pixel.
pub fn synthesize_view(
    source: &ImageTensor,
    depth: &DepthMap,
    pose: &RigidPose,
    camera: &CameraModel,
) -> Result<Warp> {
    let (h, w) = depth.shape();
    ensure_shape(&[h, w], &[source.height(), source.width()])?;
    let points = backproject(depth, camera);
    let mut proj = project(&points, pose, camera);
    if *pose == RigidPose::identity() {
        // Back-projection followed by projection is the identity only up to
        // rounding; snap to the lattice so the identity warp is exact.
        for ((v, u, k), c) in proj.coords.indexed_iter_mut() {
            *c = if k == 0 { u as f64 } else { v as f64 };
        }
    }
    // Behind-camera points carry coordinates (-1, -1), so they are never
    // sampled and come back zero and invalid.
    let (image, valid) = sample_raw(source.data(), &proj.coords);

    let r = pose.rotation();
    let t = pose.translation();
    let d = depth.data();
    let mut coords_depth_grad = Array3::zeros((h, w, 2));
    for v in 0..h {
        for u in 0..w {
            if !valid[[v, u]] {
                continue;
            }
            let ray = Vector3::new(
                (u as f64 - camera.cx) / camera.fx,
                (v as f64 - camera.cy) / camera.fy,
                1.0,
            );
            let a = r * ray;
            let q = a * d[[v, u]] + t;
            let z2 = q.z * q.z;
            coords_depth_grad[[v, u, 0]] = camera.fx * (a.x * q.z - q.x * a.z) / z2;
            coords_depth_grad[[v, u, 1]] = camera.fy * (a.y * q.z - q.y * a.z) / z2;
        }
    }
    Ok(Warp {
        image,
        valid,
        coords: proj.coords,
        coords_depth_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    #[test]
    fn backproject_examples() {
        let cam = CameraModel { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0 };
        let mut d = Array2::from_elem((5, 5), 1.0);
        d[[3, 2]] = 4.0;
        let p = backproject(&DepthMap::new(d).unwrap(), &cam);
        assert_eq!([p[[3, 2, 0]], p[[3, 2, 1]], p[[3, 2, 2]]], [8.0, 12.0, 4.0]);

        let cam = CameraModel { fx: 100.0, fy: 100.0, cx: 32.0, cy: 24.0 };
        let mut d = Array2::from_elem((48, 64), 1.0);
        d[[24, 42]] = 2.0;
        d[[24, 32]] = 7.0;
        let p = backproject(&DepthMap::new(d).unwrap(), &cam);
        assert_relative_eq!(p[[24, 42, 0]], 0.2, epsilon = 1e-15);
        assert_eq!(p[[24, 42, 1]], 0.0);
        assert_eq!(p[[24, 42, 2]], 2.0);
        assert_eq!([p[[24, 32, 0]], p[[24, 32, 1]], p[[24, 32, 2]]], [0.0, 0.0, 7.0]);
    }

    #[test]
    fn on_axis_translation() {
        let cam = CameraModel { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0 };
        let pts = Array3::from_shape_vec((1, 1, 3), vec![0.0, 0.0, 2.0]).unwrap();
        let pose = RigidPose::translation_only(Vector3::new(0.0, 0.0, -1.0));
        let proj = project(&pts, &pose, &cam);
        assert_eq!([proj.coords[[0, 0, 0]], proj.coords[[0, 0, 1]]], [0.0, 0.0]);
        assert!(proj.in_front[[0, 0]]);

        let behind = RigidPose::translation_only(Vector3::new(0.0, 0.0, -2.5));
        assert!(!project(&pts, &behind, &cam).in_front[[0, 0]]);
    }

    #[test]
    fn sample_lattice_and_midpoint() {
        let img = ImageTensor::new(Array3::from_shape_fn((3, 2, 2), |(_, _, x)| x as f64)).unwrap();
        let coords = Array3::from_shape_vec((2, 3, 2), vec![0.5, 0.0, 0.0, 0.0, 1.0, 0.0, 0.5, 1.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let (out, valid) = bilinear_sample(&img, &coords);
        assert_eq!(out.data()[[0, 0, 0]], 0.5);
        assert_eq!(out.data()[[1, 0, 1]], 0.0);
        assert_eq!(out.data()[[2, 0, 2]], 1.0);
        assert!(valid.iter().all(|v| *v));

        let outside = Array3::from_shape_vec((2, 2, 2), vec![-0.1, 0.0, 1.2, 0.0, 0.0, 1.5, 0.0, -2.0]).unwrap();
        let (out, valid) = bilinear_sample(&img, &outside);
        assert_eq!(valid, array![[false, false], [false, false]]);
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = ImageTensor::new(Array3::from_shape_fn((3, 6, 7), |(c, y, x)| {
            ((c * 31 + y * 7 + x * 3) % 17) as f64 / 16.0
        }))
        .unwrap();
        let depth = DepthMap::new(Array2::from_shape_fn((6, 7), |(y, x)| 1.0 + (x * y) as f64)).unwrap();
        let cam = CameraModel { fx: 5.0, fy: 4.0, cx: 3.2, cy: 2.7 };
        let warp = synthesize_view(&img, &depth, &RigidPose::identity(), &cam).unwrap();
        assert!(warp.valid.iter().all(|v| *v));
        assert_eq!(&warp.image, img.data());
    }

    #[test]
    fn constant_source_stays_constant() {
        let img = ImageTensor::constant(8, 10, [0.25, 0.5, 0.75]).unwrap();
        let depth = DepthMap::new(Array2::from_shape_fn((8, 10), |(y, x)| 2.0 + 0.3 * x as f64 + 0.1 * y as f64)).unwrap();
        let cam = CameraModel { fx: 8.0, fy: 8.0, cx: 4.5, cy: 3.5 };
        let pose = RigidPose::from_axis_angle(Vector3::new(0.0, 0.05, 0.0), Vector3::new(0.3, 0.0, 0.2));
        let warp = synthesize_view(&img, &depth, &pose, &cam).unwrap();
        assert!(warp.valid.iter().any(|v| *v));
        for v in 0..8 {
            for u in 0..10 {
                if warp.valid[[v, u]] {
                    for (c, expected) in [0.25, 0.5, 0.75].iter().enumerate() {
                        assert_relative_eq!(warp.image[[c, v, u]], *expected, epsilon = 1e-12);
                    }
                } else {
                    assert_eq!(warp.image[[0, v, u]], 0.0);
                }
            }
        }
    }
}
