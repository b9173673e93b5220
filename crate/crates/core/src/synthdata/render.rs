//! CPU ray caster for a street-like scene: textured ground, two facades, a
//! distant backdrop, and axis-aligned boxes standing in for vehicles.
//!
//! Colours depend only on the world-space hit point and surface normal, so
//! every frame observes the same radiance field and brightness constancy
//! holds exactly up to resampling.

use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::types::{CameraModel, RigidPose};

const HIT_EPS: f64 = 1e-9;

/// Axis-aligned box in world coordinates (`x` right, `y` down, `z` forward).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub color: [f64; 3],
    /// Object instances get their own label; street furniture does not.
    pub instance: bool,
}

/// Static world geometry and appearance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// Height of the ground plane (`y` grows downwards).
    pub ground_y: f64,
    /// Facades at `x = -wall_x` and `x = +wall_x`.
    pub wall_x: f64,
    /// Facades span `y` in `[ground_y - wall_height, ground_y]`.
    pub wall_height: f64,
    /// Backdrop plane `z = backdrop_z`.
    pub backdrop_z: f64,
    pub blocks: Vec<Block>,
    pub texture_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Surface {
    Ground,
    Wall(i8),
    Backdrop,
    Block(usize, u8),
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Hit {
    t: f64,
    surface: Surface,
}

impl Hit {
    /// Instance label: block index + 1, 0 for background.
    fn label(&self, scene: &Scene) -> u8 {
        match self.surface {
            Surface::Block(i, _) if scene.blocks[i].instance => (i + 1).min(255) as u8,
            _ => 0,
        }
    }
}

impl Scene {
    /// Nearest intersection along `origin + t * dir` with `t > t_min`.
    pub(crate) fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t_min: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |t: f64, surface: Surface| {
            if t > t_min && best.is_none_or(|b| t < b.t) {
                best = Some(Hit { t, surface });
            }
        };
        if dir.y > HIT_EPS {
            consider((self.ground_y - origin.y) / dir.y, Surface::Ground);
        }
        for side in [-1i8, 1] {
            let x = side as f64 * self.wall_x;
            if (dir.x * side as f64) > HIT_EPS {
                let t = (x - origin.x) / dir.x;
                let y = origin.y + t * dir.y;
                if y <= self.ground_y && y >= self.ground_y - self.wall_height {
                    consider(t, Surface::Wall(side));
                }
            }
        }
        if dir.z > HIT_EPS {
            consider((self.backdrop_z - origin.z) / dir.z, Surface::Backdrop);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some((t, axis)) = slab(origin, dir, b) {
                consider(t, Surface::Block(i, axis));
            }
        }
        best
    }

    fn normal(&self, hit: &Hit, dir: &Vector3<f64>) -> Vector3<f64> {
        match hit.surface {
            Surface::Ground => Vector3::new(0.0, -1.0, 0.0),
            Surface::Wall(side) => Vector3::new(-(side as f64), 0.0, 0.0),
            Surface::Backdrop => Vector3::new(0.0, 0.0, -1.0),
            Surface::Block(_, axis) => {
                let mut n = Vector3::zeros();
                n[axis as usize] = -dir[axis as usize].signum();
                n
            }
        }
    }

    /// Radiance leaving the hit point; independent of the viewer.
    fn shade(&self, hit: &Hit, p: &Vector3<f64>, dir: &Vector3<f64>) -> [f64; 3] {
        let s = self.texture_seed;
        let albedo = match hit.surface {
            Surface::Ground => {
                let n = fbm(p.x * 0.25, p.z * 0.25, s, 3);
                let mut g = 0.28 + 0.22 * n;
                // Dashed centre line and kerb stripes.
                if p.x.abs() < 0.2 && p.z.rem_euclid(8.0) < 4.0 {
                    g = 0.85;
                }
                if (p.x.abs() - 0.6 * self.wall_x).abs() < 0.15 {
                    g = 0.7;
                }
                [g, g * 0.98, g * 0.95]
            }
            Surface::Wall(side) => {
                let seg = (p.z / 9.0).floor() as i64;
                let base = palette(hash3(seg, side as i64, 11, s));
                let n = fbm(p.z * 0.35, p.y * 0.35, s ^ 0x5a5a, 3);
                let height = self.ground_y - p.y;
                let wz = p.z.rem_euclid(3.0);
                let wy = height.rem_euclid(3.2);
                let window = height > 0.8 && (0.7..2.3).contains(&wz) && (1.0..2.6).contains(&wy);
                let k = 0.75 + 0.5 * n;
                if window {
                    [0.12 * k, 0.16 * k, 0.25 * k]
                } else {
                    base.map(|c| c * k)
                }
            }
            Surface::Backdrop => {
                let elev = ((self.ground_y - p.y) / 60.0).clamp(0.0, 1.0);
                let n = fbm(p.x * 0.05, p.y * 0.05, s ^ 0xc0ffee, 2);
                let a = 0.1 * (n - 0.5);
                return [0.55 + 0.2 * elev + a, 0.7 + 0.15 * elev + a, 0.92 + a].map(|c| c.clamp(0.0, 1.0));
            }
            Surface::Block(i, axis) => {
                let b = &self.blocks[i];
                let n = fbm(p.x * 0.6 + p.y * 0.3, p.z * 0.6 + p.y * 0.2, s ^ (i as u64 + 1) * 977, 2);
                let k = 0.8 + 0.4 * n;
                let rel = (p.y - b.min[1]) / (b.max[1] - b.min[1]);
                if b.instance && axis != 1 && rel < 0.4 {
                    [0.1 * k, 0.12 * k, 0.15 * k]
                } else {
                    b.color.map(|c| c * k)
                }
            }
        };
        let normal = self.normal(hit, dir);
        let sun = Vector3::new(-0.35, -1.0, -0.25).normalize();
        let light = 0.45 + 0.55 * normal.dot(&sun).max(0.0);
        albedo.map(|c| (c * light).clamp(0.0, 1.0))
    }
}

/// Ray-box slab intersection returning the entry distance and the axis of
/// the entered face.
fn slab(o: &Vector3<f64>, d: &Vector3<f64>, b: &Block) -> Option<(f64, u8)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    let mut axis = 0u8;
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            if o[a] < b.min[a] || o[a] > b.max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let (mut ta, mut tb) = ((b.min[a] - o[a]) * inv, (b.max[a] - o[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        if ta > t0 {
            t0 = ta;
            axis = a as u8;
        }
        t1 = t1.min(tb);
    }
    (t0 <= t1 && t0 > 0.0).then_some((t0, axis))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash3(a: i64, b: i64, c: i64, seed: u64) -> u64 {
    splitmix(splitmix(splitmix(seed ^ a as u64).wrapping_add(b as u64)).wrapping_add(c as u64))
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn palette(h: u64) -> [f64; 3] {
    let r = unit(h);
    let g = unit(splitmix(h));
    let b = unit(splitmix(h ^ 1));
    [0.35 + 0.5 * r, 0.3 + 0.45 * g, 0.25 + 0.45 * b]
}

/// Smooth lattice value noise in `[0, 1]`.
fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (xf, yf) = (x.floor(), y.floor());
    let (ix, iy) = (xf as i64, yf as i64);
    let fade = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
    let (u, v) = (fade(x - xf), fade(y - yf));
    let corner = |dx: i64, dy: i64| unit(hash3(ix + dx, iy + dy, 0, seed));
    let top = corner(0, 0) * (1.0 - u) + corner(1, 0) * u;
    let bottom = corner(0, 1) * (1.0 - u) + corner(1, 1) * u;
    top * (1.0 - v) + bottom * v
}

fn fbm(x: f64, y: f64, seed: u64, octaves: u32) -> f64 {
    let mut sum = 0.0;
    let mut amp = 0.5;
    let mut norm = 0.0;
    let mut f = 1.0;
    for o in 0..octaves {
        sum += amp * value_noise(x * f, y * f, seed.wrapping_add(o as u64 * 7919));
        norm += amp;
        amp *= 0.5;
        f *= 2.03;
    }
    sum / norm
}

/// One rendered view.
#[derive(Clone, Debug, PartialEq)]
pub struct Render {
    pub image: Array3<f64>,
    /// Depth along the optical axis at each pixel centre.
    pub depth: Array2<f64>,
    /// Block index + 1 at each pixel centre, 0 for background.
    pub labels: Array2<u8>,
}

/// Renders the scene from `pose` (camera-from-world). Colours average a
/// `supersample x supersample` grid of rays per pixel; depth and labels
/// use the pixel-centre ray.
pub fn render_view(scene: &Scene, pose: &RigidPose, camera: &CameraModel, height: usize, width: usize, supersample: usize) -> Render {
    let world_from_cam = pose.inverse();
    let origin = *world_from_cam.translation();
    let r = *world_from_cam.rotation();
    let ss = supersample.max(1);
    let mut image = Array3::zeros((3, height, width));
    let mut depth = Array2::zeros((height, width));
    let mut labels = Array2::zeros((height, width));
    let ray = |u: f64, v: f64| r * Vector3::new((u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0);
    for v in 0..height {
        for u in 0..width {
            let centre = ray(u as f64, v as f64);
            let hit = scene.intersect(&origin, &centre, 0.0).expect("the backdrop closes the scene");
            // The camera-frame ray has unit z, so the ray parameter is depth.
            depth[[v, u]] = hit.t;
            labels[[v, u]] = hit.label(scene);
            let mut acc = [0.0; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let du = (sx as f64 + 0.5) / ss as f64 - 0.5;
                    let dv = (sy as f64 + 0.5) / ss as f64 - 0.5;
                    let d = ray(u as f64 + du, v as f64 + dv);
                    let h = scene.intersect(&origin, &d, 0.0).expect("the backdrop closes the scene");
                    let c = scene.shade(&h, &(origin + d * h.t), &d);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            let n = (ss * ss) as f64;
            for k in 0..3 {
                image[[k, v, u]] = acc[k] / n;
            }
        }
    }
    Render { image, depth, labels }
}

/// `true` where the surface point seen by the target pixel is hidden from
/// the source camera by nearer geometry.
pub fn occlusion_mask(
    scene: &Scene,
    target_pose: &RigidPose,
    source_pose: &RigidPose,
    camera: &CameraModel,
    target_depth: &Array2<f64>,
) -> Array2<bool> {
    let tgt_to_world = target_pose.inverse();
    let src_origin = *source_pose.inverse().translation();
    Array2::from_shape_fn(target_depth.dim(), |(v, u)| {
        let d = target_depth[[v, u]];
        let p_cam = Vector3::new((u as f64 - camera.cx) / camera.fx * d, (v as f64 - camera.cy) / camera.fy * d, d);
        let p = tgt_to_world.transform(&p_cam);
        let dir = p - src_origin;
        // Parameterised so that t = 1 lands on the point itself.
        match scene.intersect(&src_origin, &dir, 0.0) {
            Some(h) => h.t < 1.0 - 1e-6,
            None => false,
        }
    })
}

/// Camera path and scene layout parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    /// Focal length as a fraction of the image width (square pixels).
    pub focal: f64,
    /// Frames per sequence.
    pub frames: usize,
    /// Forward motion per frame (metres).
    pub speed: f64,
    /// Lateral sway amplitude (metres).
    pub sway: f64,
    /// Yaw amplitude (radians).
    pub yaw: f64,
    /// Vehicle-sized boxes per metre of street; each is an instance.
    pub block_density: f64,
    /// Thin posts along the kerbs.
    pub poles: usize,
    pub supersample: usize,
    pub camera_height: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            height: 64,
            width: 192,
            focal: 0.58,
            frames: 50,
            speed: 1.2,
            sway: 1.0,
            yaw: 0.04,
            block_density: 1.0,
            poles: 0,
            supersample: 3,
            camera_height: 1.6,
        }
    }
}

/// Farthest backdrop distance from the start of the path; keeps every depth
/// inside the default range.
pub(crate) const MAX_BACKDROP: f64 = 95.0;
/// Minimum distance from the end of the path to the backdrop.
pub(crate) const MIN_LOOKAHEAD: f64 = 20.0;

impl SceneParams {
    pub fn camera(&self) -> CameraModel {
        let f = self.focal * self.width as f64;
        CameraModel {
            fx: f,
            fy: f,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
        }
    }

    /// Camera-from-world pose of frame `i`.
    pub fn pose(&self, i: usize, phase: f64) -> RigidPose {
        let t = i as f64;
        let ang = phase + t * 0.21;
        let centre = Vector3::new(self.sway * ang.sin(), 0.0, self.speed * t);
        let yaw = self.yaw * (ang * 0.8 + 0.5).sin();
        let world_from_cam = RigidPose::from_axis_angle(Vector3::new(0.0, yaw, 0.0), centre);
        world_from_cam.inverse()
    }

    /// Random street layout for a path of `frames` frames.
    pub fn scene(&self, rng: &mut ChaCha8Rng) -> Scene {
        let path = self.speed * self.frames as f64;
        let wall_x = rng.random_range(6.0..8.0);
        let clearance = self.sway + 1.0;
        let street = path + 35.0;
        let count = (self.block_density * street).round() as usize;
        let blocks = (0..count)
            .map(|_| {
                let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let w = rng.random_range(1.6..2.1);
                let h = rng.random_range(1.3..2.2);
                let l = rng.random_range(3.2..4.8);
                let x_in = clearance + w / 2.0;
                let x_out = wall_x - w / 2.0 - 0.2;
                let cx = side * rng.random_range(x_in..x_out.max(x_in + 1e-3));
                let cz = rng.random_range(4.0..street);
                let hue: f64 = rng.random();
                Block {
                    min: [cx - w / 2.0, self.camera_height - h, cz - l / 2.0],
                    max: [cx + w / 2.0, self.camera_height, cz + l / 2.0],
                    color: hue_color(hue),
                    instance: true,
                }
            })
            .collect::<Vec<_>>();
        let mut blocks = blocks;
        for k in 0..self.poles {
            let side = if k % 2 == 0 { 1.0 } else { -1.0 };
            let cx = side * (wall_x - rng.random_range(0.6..1.2));
            let cz = (k as f64 + rng.random_range(0.0..1.0)) * street / self.poles.max(1) as f64 + 2.0;
            let r = 0.18;
            let h = rng.random_range(4.0..6.0);
            let g = rng.random_range(0.3..0.5);
            blocks.push(Block {
                min: [cx - r, self.camera_height - h, cz - r],
                max: [cx + r, self.camera_height, cz + r],
                color: [g, g, g * 1.05],
                instance: false,
            });
        }
        Scene {
            ground_y: self.camera_height,
            wall_x,
            wall_height: rng.random_range(8.0..14.0),
            backdrop_z: (path + 45.0).min(MAX_BACKDROP),
            blocks,
            texture_seed: rng.random(),
        }
    }
}

fn hue_color(h: f64) -> [f64; 3] {
    let k = |n: f64| {
        let x = (n + h * 6.0).rem_euclid(6.0);
        1.0 - (x.min(4.0 - x).clamp(0.0, 1.0))
    };
    [k(5.0), k(3.0), k(1.0)].map(|c| 0.25 + 0.65 * c)
}

pub(crate) fn scene_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
