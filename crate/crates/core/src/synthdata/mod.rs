//! Synthetic street sequences with exact depth, poses and instance masks,
//! a scanline sparsifier, and KITTI-style dataset IO.

mod io;
mod lidar;
mod render;

pub use io::{load_dataset, load_sequences, save_sequences, DEPTH_SCALE};
pub use lidar::{sparse_lidar_sample, LidarParams};
pub use render::{occlusion_mask, render_view, Block, Render, Scene, SceneParams};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{CameraModel, DepthMap, DepthRange, FrameSample, ImageTensor, RigidPose, SourceFrame, SparseDepthTarget};

/// One frame of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: ImageTensor,
    /// Dense depth; absent for loaded datasets without `depth_dense/`.
    pub depth: Option<DepthMap>,
    pub sparse: SparseDepthTarget,
    /// Instance labels, 0 = background.
    pub labels: Array2<u8>,
    /// Camera-from-world.
    pub pose: RigidPose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    /// Present for generated sequences; enables exact occlusion queries.
    pub scene: Option<Scene>,
    pub camera: CameraModel,
    pub frames: Vec<Frame>,
}

impl Sequence {
    /// Pose taking points from frame `target`'s camera into frame `source`'s.
    pub fn relative_pose(&self, target: usize, source: usize) -> RigidPose {
        self.frames[source].pose.compose(&self.frames[target].pose.inverse())
    }

    /// Training sample centred on interior frame `t` with its two temporal
    /// neighbours as sources.
    pub fn sample(&self, t: usize) -> Result<FrameSample> {
        if t == 0 || t + 1 >= self.frames.len() {
            return Err(Error::Validation(format!(
                "frame {t} has no neighbour on both sides in a {}-frame sequence",
                self.frames.len()
            )));
        }
        let f = &self.frames[t];
        let sources = [t - 1, t + 1]
            .into_iter()
            .map(|s| SourceFrame {
                image: self.frames[s].image.clone(),
                pose: self.relative_pose(t, s),
            })
            .collect();
        FrameSample::new(
            f.image.clone(),
            sources,
            self.camera,
            f.sparse.clone(),
            f.depth.clone(),
            f.labels.mapv(|l| l > 0),
        )
    }

    pub fn samples(&self) -> Result<Vec<FrameSample>> {
        (1..self.frames.len().saturating_sub(1)).map(|t| self.sample(t)).collect()
    }

    /// `true` where frame `target`'s surface point is hidden from frame
    /// `source`. Requires the generating scene.
    pub fn occlusion(&self, target: usize, source: usize) -> Result<Array2<bool>> {
        let scene = self
            .scene
            .as_ref()
            .ok_or_else(|| Error::Validation("occlusion needs the generating scene".into()))?;
        let depth = self.frames[target]
            .depth
            .as_ref()
            .ok_or_else(|| Error::Validation("occlusion needs dense depth".into()))?;
        Ok(occlusion_mask(
            scene,
            &self.frames[target].pose,
            &self.frames[source].pose,
            &self.camera,
            depth.data(),
        ))
    }
}

/// Everything that determines a generated dataset besides the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub scene: SceneParams,
    pub lidar: LidarParams,
    /// Total number of frames, split into sequences of `scene.frames`.
    pub frames: usize,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            scene: SceneParams::default(),
            lidar: LidarParams::default(),
            frames: 200,
        }
    }
}

pub(crate) fn mix(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Renders one sequence: a random street, a smooth forward path, and
/// scanline samples of every frame's depth.
pub fn generate_sequence(seed: u64, params: &SceneParams, lidar: &LidarParams) -> Result<Sequence> {
    if params.frames < 3 {
        return Err(Error::Validation(format!("a sequence needs at least 3 frames, got {}", params.frames)));
    }
    if params.speed == 0.0 && params.sway == 0.0 {
        return Err(Error::Validation("camera path has zero baseline".into()));
    }
    let path = params.speed.abs() * params.frames as f64;
    if path + render::MIN_LOOKAHEAD > render::MAX_BACKDROP {
        return Err(Error::Validation(format!(
            "camera path of {path:.1} m is too long; keep speed x frames <= {}",
            render::MAX_BACKDROP - render::MIN_LOOKAHEAD
        )));
    }
    if params.height < 2 || params.width < 2 || params.supersample == 0 || params.focal <= 0.0 {
        return Err(Error::Validation(format!("invalid scene parameters {params:?}")));
    }
    lidar.validate()?;
    let mut rng = render::scene_rng(seed);
    let scene = params.scene(&mut rng);
    let camera = params.camera();
    let phase = mix(seed, 1) as f64 / u64::MAX as f64 * std::f64::consts::TAU;
    let range = DepthRange::default();
    let frames = (0..params.frames)
        .map(|i| {
            let pose = params.pose(i, phase);
            let r = render_view(&scene, &pose, &camera, params.height, params.width, params.supersample);
            let depth = DepthMap::within(r.depth, &range)?;
            let sparse = sparse_lidar_sample(&depth, lidar, mix(seed, 100 + i as u64))?;
            Ok(Frame {
                image: ImageTensor::from_clamped(r.image)?,
                depth: Some(depth),
                sparse,
                labels: r.labels,
                pose,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Sequence {
        scene: Some(scene),
        camera,
        frames,
    })
}

/// Splits `params.frames` into sequences of `params.scene.frames` frames
/// (the last one takes the remainder when it has at least 3 frames).
pub fn generate_dataset(seed: u64, params: &DatasetParams) -> Result<Vec<Sequence>> {
    let per = params.scene.frames;
    if per < 3 || params.frames < 3 {
        return Err(Error::Validation("datasets need sequences of at least 3 frames".into()));
    }
    let mut out = Vec::new();
    let mut remaining = params.frames;
    let mut k = 0;
    while remaining >= 3 {
        let n = per.min(remaining);
        let scene = SceneParams { frames: n, ..params.scene.clone() };
        out.push(generate_sequence(mix(seed, 1000 + k), &scene, &params.lidar)?);
        remaining -= n;
        k += 1;
    }
    Ok(out)
}

/// Interior-frame samples of every sequence, in order.
pub fn dataset_samples(sequences: &[Sequence]) -> Result<Vec<FrameSample>> {
    let mut out = Vec::new();
    for s in sequences {
        out.extend(s.samples()?);
    }
    Ok(out)
}
