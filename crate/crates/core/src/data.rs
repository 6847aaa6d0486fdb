//! Frame images: decoding, caching and batching into `(B, 3, H, W)` tensors.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use candle_core::{Device, Tensor};
use rayon::prelude::*;

use crate::error::{Result, TasError};

/// Decoded RGB frame, row-major interleaved.
#[derive(Debug, Clone)]
pub struct Frame {
    pub size: usize,
    pub rgb: Arc<[u8]>,
}

pub fn load_frame(path: &Path, size: usize) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(source) => TasError::Io {
                context: format!("reading {}", path.display()),
                source,
            },
            other => TasError::Image(other),
        })?
        .to_rgb8();
    if img.width() as usize != size || img.height() as usize != size {
        return Err(TasError::Shape(format!(
            "{} is {}x{}, expected {size}x{size}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    Ok(Frame {
        size,
        rgb: img.into_raw().into(),
    })
}

/// Stacks frames into a `(B, 3, H, W)` f32 tensor scaled to `[0,1]`.
pub fn frames_to_tensor(frames: &[&Frame], device: &Device) -> Result<Tensor> {
    let Some(first) = frames.first() else {
        return Err(TasError::Shape("empty frame batch".into()));
    };
    let s = first.size;
    let plane = s * s;
    let mut data = vec![0f32; frames.len() * 3 * plane];
    data.par_chunks_mut(3 * plane)
        .zip(frames.par_iter())
        .for_each(|(out, f)| {
            for (p, px) in f.rgb.chunks_exact(3).enumerate() {
                for ch in 0..3 {
                    out[ch * plane + p] = f32::from(px[ch]) / 255.0;
                }
            }
        });
    Ok(Tensor::from_vec(data, (frames.len(), 3, s, s), device)?)
}

/// Loads and stacks the frames at `paths`.
pub fn load_batch<P: AsRef<Path> + Sync>(paths: &[P], size: usize, device: &Device) -> Result<Tensor> {
    let frames: Vec<Frame> = paths
        .par_iter()
        .map(|p| load_frame(p.as_ref(), size))
        .collect::<Result<_>>()?;
    frames_to_tensor(&frames.iter().collect::<Vec<_>>(), device)
}

/// Decoded frames keyed by path string, filled once up front.
#[derive(Debug, Default)]
pub struct FrameStore {
    size: usize,
    frames: HashMap<String, Frame>,
}

impl FrameStore {
    pub fn preload<'a>(paths: impl IntoIterator<Item = &'a str>, size: usize) -> Result<Self> {
        let mut unique: Vec<&str> = paths.into_iter().collect();
        unique.sort_unstable();
        unique.dedup();
        let frames = unique
            .par_iter()
            .map(|p| Ok((p.to_string(), load_frame(Path::new(p), size)?)))
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(Self { size, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn get(&self, path: &str) -> Result<&Frame> {
        self.frames
            .get(path)
            .ok_or_else(|| TasError::Validation(format!("frame {path} was not loaded")))
    }

    pub fn batch(&self, paths: &[&str], device: &Device) -> Result<Tensor> {
        let frames = paths.iter().map(|p| self.get(p)).collect::<Result<Vec<_>>>()?;
        frames_to_tensor(&frames, device)
    }

    pub fn size(&self) -> usize {
        self.size
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    #[test]
    fn tensor_layout_is_channel_first() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.png");
        let mut img = RgbImage::new(4, 4);
        img.put_pixel(1, 2, Rgb([255, 0, 51]));
        img.save(&path).unwrap();
        let t = load_batch(&[&path], 4, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 4, 4]);
        let v = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v[2 * 4 + 1], 1.0);
        assert_eq!(v[16 + 2 * 4 + 1], 0.0);
        assert!((v[32 + 2 * 4 + 1] - 0.2).abs() < 1e-6);
        assert!(matches!(load_batch(&[&path], 8, &Device::Cpu), Err(TasError::Shape(_))));
        assert!(load_batch(&[dir.path().join("missing.png")], 4, &Device::Cpu).is_err());

        let key = path.to_string_lossy().into_owned();
        let store = FrameStore::preload([key.as_str(), key.as_str()], 4).unwrap();
        assert_eq!(store.len(), 1);
        let b = store.batch(&[&key, &key], &Device::Cpu).unwrap();
        assert_eq!(b.dims(), &[2, 3, 4, 4]);
    }
}
