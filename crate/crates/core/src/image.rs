//! Single-channel images with intensities in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Where an image came from in the fusion pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Infrared,
    Visible,
    PreFused,
    Fused,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGray {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    provenance: Provenance,
}

impl ImageGray {
    /// Row-major pixels; every value must lie in `[0, 1]`.
    pub fn new(
        width: usize,
        height: usize,
        pixels: Vec<f64>,
        provenance: Provenance,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("image must have nonzero width and height"));
        }
        if pixels.len() != width * height {
            return Err(Error::shape(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(ImageGray {
            width,
            height,
            pixels,
            provenance,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        provenance: Provenance,
        f: impl Fn(usize, usize) -> f64,
    ) -> Result<Self> {
        let pixels = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self::new(width, height, pixels, provenance)
    }

    pub fn constant(
        width: usize,
        height: usize,
        value: f64,
        provenance: Provenance,
    ) -> Result<Self> {
        Self::new(width, height, vec![value; width * height], provenance)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn same_size(&self, other: &ImageGray) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "image sizes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// `[1, 1, H, W]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(vec![1, 1, self.height, self.width], |i| {
            T::of(self.pixels[i])
        })
    }

    /// Image from a single-channel `[1, 1, H, W]` tensor, clamping to `[0, 1]`.
    pub fn from_tensor_clamped<T: Real>(t: &Tensor<T>, provenance: Provenance) -> Result<Self> {
        let (b, c, h, w) = t.dims4()?;
        if b != 1 || c != 1 {
            return Err(Error::shape(format!(
                "expected a [1, 1, H, W] tensor, got {:?}",
                t.shape()
            )));
        }
        let pixels = t
            .data()
            .iter()
            .map(|v| {
                let v = v.as_f64();
                if v.is_nan() {
                    0.0
                } else {
                    v.clamp(0.0, 1.0)
                }
            })
            .collect();
        Self::new(w, h, pixels, provenance)
    }

    /// 8-bit levels, `round(255 x)` with ties away from zero.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_u8(
        width: usize,
        height: usize,
        levels: &[u8],
        provenance: Provenance,
    ) -> Result<Self> {
        Self::new(
            width,
            height,
            levels.iter().map(|&l| l as f64 / 255.0).collect(),
            provenance,
        )
    }

    /// Bilinear resampling with half-pixel centers. Equal sizes return an
    /// exact copy.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape("resize target must be nonzero"));
        }
        if (width, height) == self.dims() {
            return Ok(self.clone());
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let axis = |o: usize, scale: f64, n: usize| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        };
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            let (y0, y1, fy) = axis(y, sy, self.height);
            for x in 0..width {
                let (x0, x1, fx) = axis(x, sx, self.width);
                let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
                let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
                pixels.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
        Self::new(width, height, pixels, self.provenance)
    }
}

/// `round(255 x)` clamped to `0..=255`; `f64::round` rounds ties away from
/// zero.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v).round().clamp(0.0, 255.0) as u8
}

/// ITU-R BT.601 luma of an RGB triple, each channel in `[0, 1]`.
pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    (0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(ImageGray::new(2, 1, vec![0.0, 1.5], Provenance::Visible).is_err());
        assert!(ImageGray::new(2, 1, vec![0.0, 1.0], Provenance::Visible).is_ok());
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = ImageGray::from_fn(5, 4, Provenance::Infrared, |x, y| {
            ((x * 7 + y * 3) % 11) as f64 / 10.0
        })
        .unwrap();
        assert_eq!(img.resize_bilinear(5, 4).unwrap(), img);
    }

    #[test]
    fn upsampling_constant_stays_constant() {
        let img = ImageGray::constant(3, 3, 0.25, Provenance::Visible).unwrap();
        let big = img.resize_bilinear(8, 6).unwrap();
        assert!(big.pixels().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn downsampling_by_two_averages_pairs() {
        let img =
            ImageGray::from_fn(4, 1, Provenance::Visible, |x, _| [0.0, 0.5, 1.0, 0.5][x]).unwrap();
        let small = img.resize_bilinear(2, 1).unwrap();
        assert_eq!(small.pixels(), &[0.25, 0.75]);
    }

    #[test]
    fn quantize_ties_round_away_from_zero() {
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.0), 0);
    }

    #[test]
    fn u8_roundtrip() {
        let levels: Vec<u8> = (0..=255).collect();
        let img = ImageGray::from_u8(16, 16, &levels, Provenance::Visible).unwrap();
        assert_eq!(img.to_u8(), levels);
    }

    #[test]
    fn luma_of_white_is_one() {
        assert!((luma(1.0, 1.0, 1.0) - 1.0).abs() < 1e-12);
        assert!((luma(1.0, 0.0, 0.0) - 0.299).abs() < 1e-15);
    }
}
