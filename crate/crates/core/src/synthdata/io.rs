//! On-disk layout, one directory per sequence:
//!
//! ```text
//! root/seq_XXXX/image/frame_%06d.png        8-bit RGB
//! root/seq_XXXX/depth/frame_%06d.png        16-bit, metres * 256, 0 = invalid
//! root/seq_XXXX/depth_dense/frame_%06d.png  optional, same encoding
//! root/seq_XXXX/instance/frame_%06d.png     8-bit labels, 0 = background
//! root/seq_XXXX/poses.txt                   3x4 camera-from-world per line
//! root/seq_XXXX/intrinsics.txt              fx fy cx cy
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};

use super::{Frame, Sequence};
use crate::error::{Error, Result};
use crate::types::{CameraModel, DepthMap, FrameSample, ImageTensor, RigidPose, SparseDepthTarget};

/// Depth PNG value per metre.
pub const DEPTH_SCALE: f64 = 256.0;

fn frame_name(i: usize) -> String {
    format!("frame_{i:06}.png")
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn save_png<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::decode(path, format!("cannot encode png: {e}")))
}

fn encode_depth(values: &Array2<f64>, valid: impl Fn(usize, usize) -> bool) -> ImageBuffer<Luma<u16>, Vec<u16>> {
    let (h, w) = values.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        if valid(y, x) {
            Luma([(values[[y, x]] * DEPTH_SCALE).round().clamp(1.0, u16::MAX as f64) as u16])
        } else {
            Luma([0])
        }
    })
}

/// Writes sequences as `root/seq_0000`, `root/seq_0001`, ...
pub fn save_sequences(root: &Path, sequences: &[Sequence]) -> Result<()> {
    for (k, seq) in sequences.iter().enumerate() {
        let dir = root.join(format!("seq_{k:04}"));
        for sub in ["image", "depth", "instance"] {
            create_dir(&dir.join(sub))?;
        }
        let has_dense = seq.frames.iter().all(|f| f.depth.is_some());
        if has_dense {
            create_dir(&dir.join("depth_dense"))?;
        }
        let mut poses = String::new();
        for (i, f) in seq.frames.iter().enumerate() {
            let name = frame_name(i);
            let (h, w) = f.image.shape();
            let data = f.image.data();
            let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                Rgb(std::array::from_fn(|c| (data[[c, y as usize, x as usize]] * 255.0).round() as u8))
            });
            save_png(&rgb, &dir.join("image").join(&name))?;
            let valid = f.sparse.valid();
            save_png(&encode_depth(f.sparse.values(), |y, x| valid[[y, x]]), &dir.join("depth").join(&name))?;
            if let Some(d) = f.depth.as_ref().filter(|_| has_dense) {
                save_png(&encode_depth(d.data(), |_, _| true), &dir.join("depth_dense").join(&name))?;
            }
            let labels = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([f.labels[[y as usize, x as usize]]]));
            save_png(&labels, &dir.join("instance").join(&name))?;
            let m = f.pose.to_matrix_3x4();
            let line: Vec<String> = m.iter().map(|v| format!("{v:e}")).collect();
            poses.push_str(&line.join(" "));
            poses.push('\n');
        }
        write(&dir.join("poses.txt"), &poses)?;
        let c = &seq.camera;
        write(&dir.join("intrinsics.txt"), &format!("{:e} {:e} {:e} {:e}\n", c.fx, c.fy, c.cx, c.cy))?;
    }
    Ok(())
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.is_file() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "missing file")));
    }
    image::open(path).map_err(|e| Error::decode(path, e))
}

fn parse_floats(path: &Path, line: &str, n: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::decode(path, format!("bad number in `{line}`: {e}")))?;
    if vals.len() != n {
        return Err(Error::decode(path, format!("expected {n} numbers per line, got {}", vals.len())));
    }
    Ok(vals)
}

fn load_depth(path: &Path, h: usize, w: usize) -> Result<Array2<f64>> {
    let img = open(path)?.into_luma16();
    check_dims(path, img.height(), img.width(), h, w)?;
    Ok(Array2::from_shape_fn((h, w), |(y, x)| img.get_pixel(x as u32, y as u32)[0] as f64 / DEPTH_SCALE))
}

fn check_dims(path: &Path, ih: u32, iw: u32, h: usize, w: usize) -> Result<()> {
    if (ih as usize, iw as usize) != (h, w) {
        return Err(Error::decode(path, format!("expected {h}x{w}, found {ih}x{iw}")));
    }
    Ok(())
}

fn sorted_entries(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with(prefix)))
        .collect();
    out.sort();
    Ok(out)
}

fn load_sequence(dir: &Path) -> Result<Sequence> {
    let intr_path = dir.join("intrinsics.txt");
    let intr = read_to_string(&intr_path)?;
    let k = parse_floats(&intr_path, intr.trim(), 4)?;
    let poses_path = dir.join("poses.txt");
    let poses: Vec<RigidPose> = read_to_string(&poses_path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v = parse_floats(&poses_path, l, 12)?;
            RigidPose::from_matrix_3x4(&v.try_into().expect("12 values"))
                .map_err(|e| Error::decode(&poses_path, e))
        })
        .collect::<Result<_>>()?;
    let images = sorted_entries(&dir.join("image"), "frame_")?;
    if images.len() != poses.len() {
        return Err(Error::decode(
            &poses_path,
            format!("{} poses for {} images", poses.len(), images.len()),
        ));
    }
    let dense_dir = dir.join("depth_dense");
    let has_dense = dense_dir.is_dir();
    let mut frames = Vec::with_capacity(images.len());
    let mut camera = None;
    for (img_path, pose) in images.iter().zip(poses) {
        let name = img_path.file_name().expect("file entry");
        let rgb = open(img_path)?.into_rgb8();
        let (h, w) = (rgb.height() as usize, rgb.width() as usize);
        let cam = match camera {
            Some(c) => c,
            None => {
                let c = CameraModel::new(k[0], k[1], k[2], k[3], h, w).map_err(|e| Error::decode(&intr_path, e))?;
                camera = Some(c);
                c
            }
        };
        cam.validate(h, w).map_err(|e| Error::decode(img_path, e))?;
        let image = ImageTensor::new(Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        }))?;
        let sparse_path = dir.join("depth").join(name);
        let sparse = SparseDepthTarget::from_zero_invalid(load_depth(&sparse_path, h, w)?)
            .map_err(|e| Error::decode(&sparse_path, e))?;
        let depth = if has_dense {
            let p = dense_dir.join(name);
            Some(DepthMap::new(load_depth(&p, h, w)?).map_err(|e| Error::decode(&p, e))?)
        } else {
            None
        };
        let inst_path = dir.join("instance").join(name);
        let labels = if inst_path.is_file() {
            let g = open(&inst_path)?.into_luma8();
            check_dims(&inst_path, g.height(), g.width(), h, w)?;
            Array2::from_shape_fn((h, w), |(y, x)| g.get_pixel(x as u32, y as u32)[0])
        } else {
            Array2::zeros((h, w))
        };
        frames.push(Frame {
            image,
            depth,
            sparse,
            labels,
            pose,
        });
    }
    Ok(Sequence {
        scene: None,
        camera: camera.ok_or_else(|| Error::decode(dir, "sequence has no frames"))?,
        frames,
    })
}

/// Loads every `seq_*` directory under `root` in name order.
pub fn load_sequences(root: &Path) -> Result<Vec<Sequence>> {
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found")));
    }
    let dirs: Vec<PathBuf> = sorted_entries(root, "seq_")?.into_iter().filter(|p| p.is_dir()).collect();
    if dirs.is_empty() {
        return Err(Error::decode(root, "no seq_* directories"));
    }
    dirs.iter().map(|d| load_sequence(d)).collect()
}

/// Loads a dataset and expands it into interior-frame training samples.
pub fn load_dataset(root: &Path) -> Result<Vec<FrameSample>> {
    super::dataset_samples(&load_sequences(root)?)
}
