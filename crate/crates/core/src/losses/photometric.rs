//! SSIM + L1 photometric error and the reprojection loss built on it.

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::geometry::{synthesize_view, Warp};
use crate::types::{CameraModel, DepthMap, ImageTensor, SourceFrame};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// How per-source photometric errors are merged at each pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhotometricReduce {
    /// Average over the sources that see the pixel.
    Mean,
    /// Keep the smallest error among the sources that see the pixel.
    Min,
}

impl std::str::FromStr for PhotometricReduce {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "min" => Ok(Self::Min),
            other => Err(Error::Config(format!("photometric.reduce must be mean|min, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for PhotometricReduce {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Min => "min",
        })
    }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

/// 3x3 mean filter with reflection padding.
fn box3(x: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((h, w), |(v, u)| {
        let mut acc = 0.0;
        for dy in -1..=1 {
            for dx in -1..=1 {
                acc += x[[reflect(v as isize + dy, h), reflect(u as isize + dx, w)]];
            }
        }
        acc / 9.0
    })
}

/// Adjoint of [`box3`].
fn box3_adjoint(g: &Array2<f64>) -> Array2<f64> {
    let (h, w) = g.dim();
    let mut out = Array2::zeros((h, w));
    for v in 0..h {
        for u in 0..w {
            let gv = g[[v, u]] / 9.0;
            if gv == 0.0 {
                continue;
            }
            for dy in -1..=1 {
                for dx in -1..=1 {
                    out[[reflect(v as isize + dy, h), reflect(u as isize + dx, w)]] += gv;
                }
            }
        }
    }
    out
}

/// Local statistics of one channel pair, kept for the backward pass.
struct SsimChannel {
    ssim: Array2<f64>,
    mu_x: Array2<f64>,
    mu_y: Array2<f64>,
    a: Array2<f64>,
    b: Array2<f64>,
    c: Array2<f64>,
    d: Array2<f64>,
}

fn ssim_channel(x: &Array2<f64>, y: &Array2<f64>) -> SsimChannel {
    let mu_x = box3(x);
    let mu_y = box3(y);
    let sxx = box3(&(x * x)) - &mu_x * &mu_x;
    let syy = box3(&(y * y)) - &mu_y * &mu_y;
    let sxy = box3(&(x * y)) - &mu_x * &mu_y;
    let a = 2.0 * &mu_x * &mu_y + SSIM_C1;
    let b = 2.0 * &sxy + SSIM_C2;
    let c = &mu_x * &mu_x + &mu_y * &mu_y + SSIM_C1;
    let d = &sxx + &syy + SSIM_C2;
    let ssim = (&a * &b) / (&c * &d);
    SsimChannel { ssim, mu_x, mu_y, a, b, c, d }
}

/// Per-pixel SSIM of each channel, averaged over channels.
pub fn ssim(x: &ImageTensor, y: &ImageTensor) -> Result<Array2<f64>> {
    ensure_shape(&[x.height(), x.width()], &[y.height(), y.width()])?;
    let (h, w) = x.shape();
    let mut acc = Array2::zeros((h, w));
    for c in 0..3 {
        let xc = x.data().index_axis(ndarray::Axis(0), c).to_owned();
        let yc = y.data().index_axis(ndarray::Axis(0), c).to_owned();
        acc += &ssim_channel(&xc, &yc).ssim;
    }
    Ok(acc / 3.0)
}

/// Per-pixel photometric error
/// `alpha * (1 - SSIM) / 2 + (1 - alpha) * |I - I'|`, channel-averaged.
pub fn photometric_error(i: &ImageTensor, i_prime: &ImageTensor, alpha: f64) -> Result<Array2<f64>> {
    ensure_shape(&[i.height(), i.width()], &[i_prime.height(), i_prime.width()])?;
    Ok(photometric_error_raw(i.data(), i_prime.data(), alpha))
}

pub(crate) fn photometric_error_raw(x: &Array3<f64>, y: &Array3<f64>, alpha: f64) -> Array2<f64> {
    let (_, h, w) = x.dim();
    let mut pe = Array2::zeros((h, w));
    for c in 0..3 {
        let xc = x.index_axis(ndarray::Axis(0), c);
        let yc = y.index_axis(ndarray::Axis(0), c);
        let s = ssim_channel(&xc.to_owned(), &yc.to_owned()).ssim;
        Zip::from(&mut pe).and(&s).and(&xc).and(&yc).for_each(|p, &s, &a, &b| {
            *p += alpha * (1.0 - s) / 2.0 / 3.0 + (1.0 - alpha) * (a - b).abs() / 3.0;
        });
    }
    pe
}

/// Gradient of `sum(grad_pe * pe(x, y))` with respect to `y`.
pub(crate) fn photometric_error_vjp_y(
    x: &Array3<f64>,
    y: &Array3<f64>,
    alpha: f64,
    grad_pe: &Array2<f64>,
) -> Array3<f64> {
    let (_, h, w) = x.dim();
    let mut out = Array3::zeros((3, h, w));
    let g_ssim = grad_pe * (-alpha / 6.0);
    for c in 0..3 {
        let xc = x.index_axis(ndarray::Axis(0), c).to_owned();
        let yc = y.index_axis(ndarray::Axis(0), c).to_owned();
        let st = ssim_channel(&xc, &yc);
        // Derivatives of SSIM with respect to the windowed raw moments
        // E[y], E[xy] and E[y^2].
        let mut g_my = Array2::zeros((h, w));
        let mut g_mxy = Array2::zeros((h, w));
        let mut g_myy = Array2::zeros((h, w));
        for v in 0..h {
            for u in 0..w {
                let g = g_ssim[[v, u]];
                if g == 0.0 {
                    continue;
                }
                let s = st.ssim[[v, u]];
                let (mx, my) = (st.mu_x[[v, u]], st.mu_y[[v, u]]);
                let (a, b, cc, d) = (st.a[[v, u]], st.b[[v, u]], st.c[[v, u]], st.d[[v, u]]);
                g_my[[v, u]] = g * s * (2.0 * mx / a - 2.0 * my / cc - 2.0 * mx / b + 2.0 * my / d);
                g_mxy[[v, u]] = g * s * 2.0 / b;
                g_myy[[v, u]] = -g * s / d;
            }
        }
        let p_my = box3_adjoint(&g_my);
        let p_mxy = box3_adjoint(&g_mxy);
        let p_myy = box3_adjoint(&g_myy);
        let l1_scale = (1.0 - alpha) / 3.0;
        for v in 0..h {
            for u in 0..w {
                let (xv, yv) = (xc[[v, u]], yc[[v, u]]);
                let diff = xv - yv;
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                out[[c, v, u]] = p_my[[v, u]] + xv * p_mxy[[v, u]] + 2.0 * yv * p_myy[[v, u]]
                    - l1_scale * sign * grad_pe[[v, u]];
            }
        }
    }
    out
}

/// Options of the reprojection term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReprojectionOptions {
    pub alpha: f64,
    pub reduce: PhotometricReduce,
    /// Drop pixels whose unwarped source already matches better than the
    /// warped one (static-pixel masking).
    pub automask: bool,
}

impl Default for ReprojectionOptions {
    fn default() -> Self {
        Self {
            alpha: 0.85,
            reduce: PhotometricReduce::Min,
            automask: false,
        }
    }
}

struct SourceTerm {
    warp: Warp,
    filled: Array3<f64>,
    pe: Array2<f64>,
}

/// Per-pixel photometric error of a depth map against its source frames.
pub struct Reprojection {
    /// Reduced error per pixel; zero where `valid` is false.
    pub pe: Array2<f64>,
    /// Pixels seen by at least one source (and kept by the automask).
    pub valid: Array2<bool>,
    terms: Vec<SourceTerm>,
    /// Per-source share of each pixel's reduced error.
    selection: Vec<Array2<f64>>,
    alpha: f64,
}

impl Reprojection {
    pub fn compute(
        target: &ImageTensor,
        sources: &[SourceFrame],
        depth: &DepthMap,
        camera: &CameraModel,
        opts: &ReprojectionOptions,
    ) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Validation("reprojection needs at least one source".into()));
        }
        let (h, w) = target.shape();
        ensure_shape(&[h, w], &[depth.shape().0, depth.shape().1])?;
        let mut terms = Vec::with_capacity(sources.len());
        for src in sources {
            let warp = synthesize_view(&src.image, depth, &src.pose, camera)?;
            // Invalid samples borrow the target's colour so that SSIM windows
            // straddling the border of the valid region are not polluted by
            // the zero fill.
            let mut filled = warp.image.clone();
            for v in 0..h {
                for u in 0..w {
                    if !warp.valid[[v, u]] {
                        for c in 0..3 {
                            filled[[c, v, u]] = target.data()[[c, v, u]];
                        }
                    }
                }
            }
            let pe = photometric_error_raw(target.data(), &filled, opts.alpha);
            terms.push(SourceTerm { warp, filled, pe });
        }

        let mut pe = Array2::zeros((h, w));
        let mut valid = Array2::from_elem((h, w), false);
        let mut selection = vec![Array2::zeros((h, w)); terms.len()];
        for v in 0..h {
            for u in 0..w {
                let seen: Vec<usize> = (0..terms.len()).filter(|&j| terms[j].warp.valid[[v, u]]).collect();
                if seen.is_empty() {
                    continue;
                }
                valid[[v, u]] = true;
                match opts.reduce {
                    PhotometricReduce::Min => {
                        let best = seen
                            .iter()
                            .copied()
                            .min_by(|&a, &b| terms[a].pe[[v, u]].total_cmp(&terms[b].pe[[v, u]]))
                            .expect("nonempty");
                        pe[[v, u]] = terms[best].pe[[v, u]];
                        selection[best][[v, u]] = 1.0;
                    }
                    PhotometricReduce::Mean => {
                        let share = 1.0 / seen.len() as f64;
                        for &j in &seen {
                            pe[[v, u]] += share * terms[j].pe[[v, u]];
                            selection[j][[v, u]] = share;
                        }
                    }
                }
            }
        }

        if opts.automask {
            let mut identity = Array2::from_elem((h, w), f64::INFINITY);
            for src in sources {
                let e = photometric_error_raw(target.data(), src.image.data(), opts.alpha);
                Zip::from(&mut identity).and(&e).for_each(|m, &e| *m = m.min(e));
            }
            for v in 0..h {
                for u in 0..w {
                    if valid[[v, u]] && identity[[v, u]] < pe[[v, u]] {
                        valid[[v, u]] = false;
                        pe[[v, u]] = 0.0;
                        for s in selection.iter_mut() {
                            s[[v, u]] = 0.0;
                        }
                    }
                }
            }
        }

        Ok(Self {
            pe,
            valid,
            terms,
            selection,
            alpha: opts.alpha,
        })
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Gradient of `sum(grad_pe * pe)` with respect to the depth map.
    pub fn depth_vjp(&self, target: &ImageTensor, sources: &[SourceFrame], grad_pe: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(grad_pe.dim());
        for ((term, sel), src) in self.terms.iter().zip(&self.selection).zip(sources) {
            let g = grad_pe * sel;
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let mut g_img = photometric_error_vjp_y(target.data(), &term.filled, self.alpha, &g);
            // Filled pixels are constants.
            for ((c, v, u), gv) in g_img.indexed_iter_mut() {
                let _ = c;
                if !term.warp.valid[[v, u]] {
                    *gv = 0.0;
                }
            }
            out += &term.warp.depth_vjp(&src.image, &g_img);
        }
        out
    }
}

/// Mean reduced photometric error over pixels with a valid warp, with its
/// gradient with respect to depth.
pub struct PhotometricLoss {
    pub value: f64,
    pub d_depth: Array2<f64>,
    pub reprojection: Reprojection,
}

pub fn unsupervised_photometric_loss(
    target: &ImageTensor,
    sources: &[SourceFrame],
    depth: &DepthMap,
    camera: &CameraModel,
    opts: &ReprojectionOptions,
) -> Result<PhotometricLoss> {
    let reprojection = Reprojection::compute(target, sources, depth, camera, opts)?;
    let n = reprojection.num_valid();
    if n == 0 {
        return Err(Error::DegenerateBatch("no pixel has a valid warp".into()));
    }
    let value = reprojection.pe.sum() / n as f64;
    let grad_pe = reprojection.valid.mapv(|ok| if ok { 1.0 / n as f64 } else { 0.0 });
    let d_depth = reprojection.depth_vjp(target, sources, &grad_pe);
    Ok(PhotometricLoss {
        value,
        d_depth,
        reprojection,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::RigidPose;
    use approx::assert_relative_eq;

    fn pattern(h: usize, w: usize, phase: f64) -> ImageTensor {
        ImageTensor::new(Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            0.5 + 0.4 * ((x as f64 * 0.7 + y as f64 * 0.3 + c as f64 + phase).sin())
        }))
        .unwrap()
    }

    #[test]
    fn identical_images_have_zero_error() {
        let img = pattern(6, 9, 0.0);
        let pe = photometric_error(&img, &img, 0.85).unwrap();
        assert!(pe.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn constant_black_vs_white() {
        let black = ImageTensor::constant(4, 4, [0.0; 3]).unwrap();
        let white = ImageTensor::constant(4, 4, [1.0; 3]).unwrap();
        // Scalar SSIM of two constants: variances vanish, leaving
        // (2*0*1 + C1)(C2) / ((0 + 1 + C1)(C2)).
        let ssim_const = SSIM_C1 / (1.0 + SSIM_C1);
        let expected = 0.85 * (1.0 - ssim_const) / 2.0 + 0.15;
        let pe = photometric_error(&black, &white, 0.85).unwrap();
        for v in pe.iter() {
            assert_relative_eq!(*v, expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn alpha_zero_is_mean_abs_difference() {
        let a = pattern(5, 7, 0.0);
        let b = pattern(5, 7, 1.3);
        let pe = photometric_error(&a, &b, 0.0).unwrap();
        for v in 0..5 {
            for u in 0..7 {
                let l1: f64 = (0..3).map(|c| (a.data()[[c, v, u]] - b.data()[[c, v, u]]).abs()).sum::<f64>() / 3.0;
                assert_relative_eq!(pe[[v, u]], l1, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(photometric_error(&pattern(4, 4, 0.0), &pattern(4, 5, 0.0), 0.85).is_err());
    }

    #[test]
    fn identity_source_gives_zero_loss() {
        let img = pattern(8, 10, 0.2);
        let depth = DepthMap::constant(8, 10, 3.0).unwrap();
        let cam = CameraModel { fx: 8.0, fy: 8.0, cx: 4.5, cy: 3.5 };
        let src = SourceFrame { image: img.clone(), pose: RigidPose::identity() };
        let loss = unsupervised_photometric_loss(&img, &[src.clone()], &depth, &cam, &Default::default()).unwrap();
        assert!(loss.value.abs() < 1e-12);

        let other = SourceFrame {
            image: pattern(8, 10, 2.0),
            pose: RigidPose::translation_only(nalgebra::Vector3::new(0.2, 0.0, 0.0)),
        };
        let loss = unsupervised_photometric_loss(&img, &[other, src], &depth, &cam, &Default::default()).unwrap();
        assert!(loss.value.abs() < 1e-12);
    }

    #[test]
    fn no_valid_pixel_is_degenerate() {
        let img = pattern(4, 4, 0.0);
        let depth = DepthMap::constant(4, 4, 1.0).unwrap();
        let cam = CameraModel { fx: 4.0, fy: 4.0, cx: 1.5, cy: 1.5 };
        let behind = SourceFrame {
            image: img.clone(),
            pose: RigidPose::translation_only(nalgebra::Vector3::new(0.0, 0.0, -5.0)),
        };
        assert!(matches!(
            unsupervised_photometric_loss(&img, &[behind], &depth, &cam, &Default::default()),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn box_filter_adjoint() {
        let x = Array2::from_shape_fn((5, 6), |(v, u)| ((v * 7 + u * 3) % 5) as f64 - 1.5);
        let g = Array2::from_shape_fn((5, 6), |(v, u)| ((v * 2 + u * 5) % 7) as f64 * 0.3);
        let lhs = (&box3(&x) * &g).sum();
        let rhs = (&x * &box3_adjoint(&g)).sum();
        assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
    }
}
