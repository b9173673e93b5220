//! Edge-aware smoothness.

use ndarray::Array2;

use crate::error::{ensure_shape, Result};
use crate::losses::supervised::sign;
use crate::types::{DepthMap, ImageTensor};

#[derive(Clone, Debug)]
pub struct SmoothnessLoss {
    pub value: f64,
    pub d_depth: Array2<f64>,
}

/// `(1/N) * sum(|dx f| exp(-|dx I|) + |dy f| exp(-|dy I|))` over forward
/// differences, where `f` is the mean-normalized inverse depth when
/// `normalized` is set and the raw depth otherwise. Image gradients are
/// channel-averaged absolute differences.
pub fn smoothness_loss(depth: &DepthMap, image: &ImageTensor, normalized: bool) -> Result<SmoothnessLoss> {
    let (h, w) = depth.shape();
    ensure_shape(&[h, w], &[image.height(), image.width()])?;
    let img = image.data();
    let n = (h * w) as f64;

    let (field, mean) = if normalized {
        let disp = depth.data().mapv(|d| 1.0 / d);
        let mean = disp.mean().expect("nonempty");
        (disp.mapv(|p| p / mean), mean)
    } else {
        (depth.data().clone(), 1.0)
    };

    let edge = |v0: usize, u0: usize, v1: usize, u1: usize| -> f64 {
        let g: f64 = (0..3).map(|c| (img[[c, v0, u0]] - img[[c, v1, u1]]).abs()).sum::<f64>() / 3.0;
        (-g).exp()
    };

    let mut value = 0.0;
    let mut d_field = Array2::<f64>::zeros((h, w));
    for v in 0..h {
        for u in 0..w {
            if u + 1 < w {
                let diff = field[[v, u + 1]] - field[[v, u]];
                let e = edge(v, u + 1, v, u);
                value += diff.abs() * e;
                let g = sign(diff) * e / n;
                d_field[[v, u + 1]] += g;
                d_field[[v, u]] -= g;
            }
            if v + 1 < h {
                let diff = field[[v + 1, u]] - field[[v, u]];
                let e = edge(v + 1, u, v, u);
                value += diff.abs() * e;
                let g = sign(diff) * e / n;
                d_field[[v + 1, u]] += g;
                d_field[[v, u]] -= g;
            }
        }
    }

    let d_depth = if normalized {
        // f_i = p_i / mean(p), p = 1 / D.
        let disp = depth.data().mapv(|d| 1.0 / d);
        let weighted: f64 = (&d_field * &disp).sum();
        let correction = weighted / (mean * mean * n);
        let mut out = Array2::zeros((h, w));
        for ((o, &g), &d) in out.iter_mut().zip(d_field.iter()).zip(depth.data().iter()) {
            let d_disp = g / mean - correction;
            *o = -d_disp / (d * d);
        }
        out
    } else {
        d_field
    };

    Ok(SmoothnessLoss {
        value: value / n,
        d_depth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn constant_depth_is_smooth() {
        let img = ImageTensor::new(Array3::from_shape_fn((3, 5, 6), |(c, y, x)| ((c + y * x) % 4) as f64 / 4.0)).unwrap();
        let d = DepthMap::constant(5, 6, 7.0).unwrap();
        for normalized in [true, false] {
            let l = smoothness_loss(&d, &img, normalized).unwrap();
            assert_eq!(l.value, 0.0);
        }
    }

    #[test]
    fn image_edges_discount_depth_steps() {
        let (h, w) = (4, 8);
        let depth = DepthMap::new(Array2::from_shape_fn((h, w), |(_, x)| if x < 4 { 2.0 } else { 10.0 })).unwrap();
        let flat = ImageTensor::constant(h, w, [0.5; 3]).unwrap();
        let edged = ImageTensor::new(Array3::from_shape_fn((3, h, w), |(_, _, x)| if x < 4 { 0.0 } else { 1.0 })).unwrap();
        for normalized in [true, false] {
            let a = smoothness_loss(&depth, &edged, normalized).unwrap().value;
            let b = smoothness_loss(&depth, &flat, normalized).unwrap().value;
            assert!(a < b, "{a} !< {b}");
        }
    }
}
