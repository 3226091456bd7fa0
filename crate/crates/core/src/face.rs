//! Aligned face images in the normalized `[-1, 1]` range.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::RgbImage;

use crate::error::{bail, Result};

pub const FACE_SIZE: usize = 112;
pub const CHANNELS: usize = 3;
/// 8-bit pixels map to `v / PIXEL_SCALE - 1`.
pub const PIXEL_SCALE: f64 = 127.5;

/// A 112×112 RGB face stored channel-first as `(3, 112, 112)`.
#[derive(Debug, Clone)]
pub struct FaceImage {
    pixels: Tensor,
}

impl FaceImage {
    /// Wraps a `(3, 112, 112)` tensor after checking shape, finiteness and range.
    pub fn new(pixels: Tensor) -> Result<Self> {
        if pixels.dims() != [CHANNELS, FACE_SIZE, FACE_SIZE] {
            bail!(Shape, "face image must be 3x112x112, got {:?}", pixels.dims());
        }
        let values = pixels.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        if values.iter().any(|v| !v.is_finite()) {
            bail!(Validation, "face image contains non-finite pixels");
        }
        if values.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            bail!(Validation, "face image values must lie in [-1, 1]");
        }
        Ok(Self { pixels })
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        if w as usize != FACE_SIZE || h as usize != FACE_SIZE {
            bail!(Shape, "face image must be 112x112, got {w}x{h}");
        }
        let mut data = vec![0f32; CHANNELS * FACE_SIZE * FACE_SIZE];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..CHANNELS {
                data[c * FACE_SIZE * FACE_SIZE + y as usize * FACE_SIZE + x as usize] =
                    (p.0[c] as f64 / PIXEL_SCALE - 1.0) as f32;
            }
        }
        Ok(Self { pixels: Tensor::from_vec(data, (CHANNELS, FACE_SIZE, FACE_SIZE), &Device::Cpu)? })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Self::from_rgb8(&img)
    }

    /// Inverse pixel mapping, rounding to the nearest 8-bit value.
    pub fn to_rgb8(&self) -> Result<RgbImage> {
        let values = self.pixels.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let plane = FACE_SIZE * FACE_SIZE;
        Ok(RgbImage::from_fn(FACE_SIZE as u32, FACE_SIZE as u32, |x, y| {
            let idx = y as usize * FACE_SIZE + x as usize;
            let px = |c: usize| ((values[c * plane + idx] + 1.0) * PIXEL_SCALE).round().clamp(0.0, 255.0) as u8;
            image::Rgb([px(0), px(1), px(2)])
        }))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()?.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.pixels
    }

    /// Stacks images into an `(N, 3, 112, 112)` batch of the given dtype.
    pub fn batch(images: &[&FaceImage], dtype: DType) -> Result<Tensor> {
        if images.is_empty() {
            bail!(Validation, "empty image batch");
        }
        let ts = images.iter().map(|i| i.pixels.to_dtype(dtype)).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Tensor::stack(&ts, 0)?)
    }

    /// Splits an `(N, 3, 112, 112)` batch into validated images.
    pub fn unbatch(batch: &Tensor) -> Result<Vec<FaceImage>> {
        let n = batch.dim(0)?;
        (0..n).map(|i| FaceImage::new(batch.get(i)?)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_size() {
        let t = Tensor::zeros((3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(FaceImage::new(t).is_err());
        assert!(FaceImage::from_rgb8(&RgbImage::new(112, 100)).is_err());
    }

    #[test]
    fn rejects_out_of_range_and_nan() {
        let t = Tensor::full(1.5f32, (3, 112, 112), &Device::Cpu).unwrap();
        assert!(FaceImage::new(t).is_err());
        let mut v = vec![0f32; 3 * 112 * 112];
        v[5] = f32::NAN;
        assert!(FaceImage::new(Tensor::from_vec(v, (3, 112, 112), &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn rgb_roundtrip_is_lossless() {
        let img = RgbImage::from_fn(112, 112, |x, y| image::Rgb([(x * 2) as u8, (y * 2) as u8, ((x + y) % 256) as u8]));
        let face = FaceImage::from_rgb8(&img).unwrap();
        assert_eq!(face.to_rgb8().unwrap(), img);
        let v = face.tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
    }
}
