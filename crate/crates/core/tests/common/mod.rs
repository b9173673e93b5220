//! Central finite-difference oracles for the analytic loss gradients,
//! shared by the gradient tests and the acceptance run.

#![allow(dead_code)]

use mutualdepth::geometry::synthesize_view;
use mutualdepth::losses::{
    distillation_loss, smoothness_loss, supervised_l1, supervised_uncertainty_loss, unsupervised_photometric_loss,
    unsupervised_uncertainty_loss, DistillMode, PhotometricReduce, Reprojection, ReprojectionOptions,
};
use mutualdepth::{CameraModel, DepthMap, ImageTensor, LogUncertaintyMap, RigidPose, SourceFrame, SparseDepthTarget};
use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
const N: usize = 8;

/// Worst entrywise relative error of one analytic gradient.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub worst: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst <= TOL
    }
}

pub fn assert_all(checks: &[GradCheck]) {
    for c in checks {
        assert!(c.passed(), "{}: worst relative error {:e}", c.name, c.worst);
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((N, N), |_| r.random_range(lo..hi))
}

/// Central differences of `f` at `x`, compared with `analytic` entrywise as
/// `|a - n| / max(|n|, 1e-3 * max|n|)`. An identically zero numeric
/// gradient counts as a failure: it means the case exercises nothing.
fn check(name: &str, x: &Array2<f64>, analytic: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> GradCheck {
    let mut numeric = Array2::zeros(x.dim());
    for idx in ndarray::indices(x.dim()) {
        let mut p = x.clone();
        p[idx] += STEP;
        let up = f(&p);
        p[idx] -= 2.0 * STEP;
        let down = f(&p);
        numeric[idx] = (up - down) / (2.0 * STEP);
    }
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = if scale > 0.0 {
        analytic
            .iter()
            .zip(numeric.iter())
            .map(|(a, n)| (a - n).abs() / n.abs().max(1e-3 * scale))
            .fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };
    GradCheck {
        name: name.to_string(),
        worst,
    }
}

fn dm(x: &Array2<f64>) -> DepthMap {
    DepthMap::new(x.clone()).unwrap()
}

fn ls(x: &Array2<f64>) -> LogUncertaintyMap {
    LogUncertaintyMap::new(x.clone()).unwrap()
}

/// Sparse target whose residuals against `depth` are at least 0.1 in size.
fn target_away_from(depth: &Array2<f64>, r: &mut ChaCha8Rng) -> SparseDepthTarget {
    let values = depth.mapv(|d| {
        let off: f64 = r.random_range(0.1..1.0);
        if r.random_bool(0.5) {
            d + off
        } else {
            (d - off).max(0.05)
        }
    });
    let valid = Array2::from_shape_fn((N, N), |_| r.random_bool(0.4));
    SparseDepthTarget::new(values, valid).unwrap()
}

fn textured(seed: u64) -> ImageTensor {
    let mut r = rng(seed);
    let (a, b, c): (f64, f64, f64) = (r.random_range(0.5..0.9), r.random_range(0.3..0.7), r.random());
    ImageTensor::new(Array3::from_shape_fn((3, N, N), |(ch, y, x)| {
        let t = a * x as f64 + b * y as f64 + c + ch as f64;
        0.5 + 0.3 * t.sin() + 0.1 * (1.7 * t + 0.4 * y as f64).cos()
    }))
    .unwrap()
}

fn camera() -> CameraModel {
    CameraModel::new(7.0, 7.0, 3.6, 3.4, N, N).unwrap()
}

fn sources() -> Vec<SourceFrame> {
    vec![
        SourceFrame {
            image: textured(11),
            pose: RigidPose::from_axis_angle(Vector3::new(0.01, -0.02, 0.005), Vector3::new(0.07, 0.02, -0.05)),
        },
        SourceFrame {
            image: textured(12),
            pose: RigidPose::from_axis_angle(Vector3::new(-0.01, 0.015, 0.0), Vector3::new(-0.06, -0.01, 0.04)),
        },
    ]
}

pub fn supervised_l1_checks() -> Vec<GradCheck> {
    let mut r = rng(1);
    let d = uniform(&mut r, 1.0, 5.0);
    let gt = target_away_from(&d, &mut r);
    let g = supervised_l1(&dm(&d), &gt).unwrap().d_depth;
    vec![check("l1/depth", &d, &g, |x| supervised_l1(&dm(x), &gt).unwrap().value)]
}

pub fn supervised_likelihood_checks() -> Vec<GradCheck> {
    let mut out = Vec::new();
    for filtering in [false, true] {
        let mut r = rng(2);
        let d = uniform(&mut r, 1.0, 5.0);
        let s = uniform(&mut r, -1.0, 1.0);
        let gt = target_away_from(&d, &mut r);
        let l = supervised_uncertainty_loss(&dm(&d), &ls(&s), &gt, 3.0, 2.0, filtering).unwrap();
        let tag = if filtering { "filtered" } else { "plain" };
        out.push(check(&format!("nll_s[{tag}]/depth"), &d, &l.d_depth, |x| {
            supervised_uncertainty_loss(&dm(x), &ls(&s), &gt, 3.0, 2.0, filtering).unwrap().value
        }));
        out.push(check(&format!("nll_s[{tag}]/log_sigma"), &s, &l.d_log_sigma, |x| {
            supervised_uncertainty_loss(&dm(&d), &ls(x), &gt, 3.0, 2.0, filtering).unwrap().value
        }));
    }
    out
}

pub fn photometric_likelihood_checks() -> Vec<GradCheck> {
    let mut r = rng(3);
    let pe = uniform(&mut r, 0.05, 0.5);
    let s = uniform(&mut r, -1.5, 0.5);
    let valid = Array2::from_shape_fn((N, N), |_| r.random_bool(0.8));
    let l = unsupervised_uncertainty_loss(&pe, &valid, &ls(&s), 0.03).unwrap();
    vec![
        check("nll_u/pe", &pe, &l.d_pe, |x| unsupervised_uncertainty_loss(x, &valid, &ls(&s), 0.03).unwrap().value),
        check("nll_u/log_sigma", &s, &l.d_log_sigma, |x| {
            unsupervised_uncertainty_loss(&pe, &valid, &ls(x), 0.03).unwrap().value
        }),
    ]
}

pub fn smoothness_checks() -> Vec<GradCheck> {
    let img = textured(4);
    [false, true]
        .into_iter()
        .map(|normalized| {
            let mut r = rng(5);
            let d = uniform(&mut r, 1.0, 5.0);
            let g = smoothness_loss(&dm(&d), &img, normalized).unwrap().d_depth;
            let name = if normalized { "smoothness[normalized]/depth" } else { "smoothness[raw]/depth" };
            check(name, &d, &g, |x| smoothness_loss(&dm(x), &img, normalized).unwrap().value)
        })
        .collect()
}

pub fn distillation_checks() -> Vec<GradCheck> {
    let mut out = Vec::new();
    for (mode, tau) in [(DistillMode::Uw, 0.1), (DistillMode::Uwt, 1.5)] {
        let mut r = rng(6);
        let student = uniform(&mut r, 1.0, 5.0);
        // Residuals of varied size, none near the kink at zero.
        let teacher = student.mapv(|s| {
            let off: f64 = r.random_range(0.2..1.0);
            if r.random_bool(0.5) {
                s + off
            } else {
                s - off.min(0.9)
            }
        });
        let s = uniform(&mut r, -1.0, 1.0);
        // Keep sigma away from the UWT threshold so the weights are smooth.
        let s = s.mapv(|v| if (v.exp() - tau).abs() < 0.05 { v + 0.2 } else { v });
        let l = distillation_loss(&dm(&student), &dm(&teacher), &ls(&s), mode, tau).unwrap();
        let name = mode.name();
        out.push(check(&format!("distill[{name}]/student"), &student, &l.d_student, |x| {
            distillation_loss(&dm(x), &dm(&teacher), &ls(&s), mode, tau).unwrap().value
        }));
        out.push(check(&format!("distill[{name}]/teacher"), &teacher, &l.d_teacher, |x| {
            distillation_loss(&dm(&student), &dm(x), &ls(&s), mode, tau).unwrap().value
        }));
        out.push(check(&format!("distill[{name}]/teacher_log_sigma"), &s, &l.d_teacher_log_sigma, |x| {
            distillation_loss(&dm(&student), &dm(&teacher), &ls(x), mode, tau).unwrap().value
        }));
    }
    out
}

pub fn synthesize_view_checks() -> Vec<GradCheck> {
    let mut r = rng(7);
    let d = uniform(&mut r, 2.0, 4.0);
    let src = sources().remove(0);
    let weights = Array3::from_shape_fn((3, N, N), |_| r.random_range(-1.0..1.0));
    let objective = |x: &Array2<f64>| {
        let w = synthesize_view(&src.image, &dm(x), &src.pose, &camera()).unwrap();
        (&w.image * &weights).sum()
    };
    let warp = synthesize_view(&src.image, &dm(&d), &src.pose, &camera()).unwrap();
    assert!(warp.valid.iter().filter(|v| **v).count() > N * N / 2);
    let g = warp.depth_vjp(&src.image, &weights);
    vec![check("synthesize_view/depth", &d, &g, objective)]
}

pub fn photometric_reprojection_checks() -> Vec<GradCheck> {
    let target = textured(8);
    let srcs = sources();
    [PhotometricReduce::Mean, PhotometricReduce::Min]
        .into_iter()
        .map(|reduce| {
            let opts = ReprojectionOptions {
                alpha: 0.85,
                reduce,
                automask: false,
            };
            let mut r = rng(9);
            let d = uniform(&mut r, 2.0, 4.0);
            let l = unsupervised_photometric_loss(&target, &srcs, &dm(&d), &camera(), &opts).unwrap();
            check(&format!("photometric[{reduce:?}]/depth"), &d, &l.d_depth, |x| {
                unsupervised_photometric_loss(&target, &srcs, &dm(x), &camera(), &opts).unwrap().value
            })
        })
        .collect()
}

pub fn likelihood_through_depth_checks() -> Vec<GradCheck> {
    let target = textured(10);
    let srcs = sources();
    let opts = ReprojectionOptions::default();
    let mut r = rng(10);
    let d = uniform(&mut r, 2.0, 4.0);
    let s = uniform(&mut r, -2.0, 0.0);
    let value = |x: &Array2<f64>| {
        let rep = Reprojection::compute(&target, &srcs, &dm(x), &camera(), &opts).unwrap();
        unsupervised_uncertainty_loss(&rep.pe, &rep.valid, &ls(&s), 0.03).unwrap().value
    };
    let rep = Reprojection::compute(&target, &srcs, &dm(&d), &camera(), &opts).unwrap();
    let nll = unsupervised_uncertainty_loss(&rep.pe, &rep.valid, &ls(&s), 0.03).unwrap();
    let g = rep.depth_vjp(&target, &srcs, &nll.d_pe);
    vec![check("nll_u/depth", &d, &g, value)]
}

/// Every loss gradient check.
pub fn all_loss_checks() -> Vec<GradCheck> {
    [
        supervised_l1_checks(),
        supervised_likelihood_checks(),
        photometric_likelihood_checks(),
        smoothness_checks(),
        distillation_checks(),
        synthesize_view_checks(),
        photometric_reprojection_checks(),
        likelihood_through_depth_checks(),
    ]
    .concat()
}
