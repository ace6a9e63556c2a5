//! Pixel containers shared by every stage of the pipeline.

use std::path::Path;

use ndarray::{s, Array2, Array3, Zip};

use crate::error::{Error, Result};

/// Maps an 8-bit intensity to `[-1, 1]`.
pub fn normalize_u8(v: u8) -> f32 {
    v as f32 * (2.0 / 255.0) - 1.0
}

/// Inverse of [`normalize_u8`], saturating outside `[-1, 1]`.
pub fn denormalize(x: f32) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// An RGB image stored row-major as `(height, width, 3)` with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    data: Array3<f32>,
}

impl ImagePlane {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if data.dim().2 != 3 {
            return Err(Error::invalid(format!(
                "image must have 3 channels, got {}",
                data.dim().2
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((height, width, 3)),
        }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            data: Array3::from_elem((height, width, 3), value),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let mut data = Array3::zeros((h as usize, w as usize, 3));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[y as usize, x as usize, c]] = normalize_u8(px[c]);
            }
        }
        Self { data }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = self.shape();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            image::Rgb([
                denormalize(self.data[[y, x, 0]]),
                denormalize(self.data[[y, x, 1]]),
                denormalize(self.data[[y, x, 2]]),
            ])
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Channel-first copy, `(3, height, width)`, as consumed by the networks.
    pub fn to_chw(&self) -> Array3<f32> {
        self.data.view().permuted_axes([2, 0, 1]).to_owned()
    }

    pub fn from_chw(chw: &Array3<f32>) -> Result<Self> {
        Self::new(chw.view().permuted_axes([1, 2, 0]).as_standard_layout().to_owned())
    }
}

/// A binary grid of shape `(height, width)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    data: Array2<bool>,
}

/// 8-bit values at or above this threshold count as "person".
pub const MASK_THRESHOLD: u8 = 128;

impl Mask {
    pub fn new(data: Array2<bool>) -> Self {
        Self { data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array2::from_elem((height, width), false),
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            data: Array2::from_elem((height, width), true),
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl FnMut((usize, usize)) -> bool) -> Self {
        Self {
            data: Array2::from_shape_fn((height, width), f),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array2<bool> {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[[row, col]]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[[row, col]] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask::new(Zip::from(&self.data).and(&other.data).map_collect(|&a, &b| a && b))
    }

    pub fn or(&self, other: &Mask) -> Mask {
        Mask::new(Zip::from(&self.data).and(&other.data).map_collect(|&a, &b| a || b))
    }

    /// Elements set in `self` but not in `other`.
    pub fn and_not(&self, other: &Mask) -> Mask {
        Mask::new(Zip::from(&self.data).and(&other.data).map_collect(|&a, &b| a && !b))
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        Zip::from(&self.data).and(&other.data).all(|&a, &b| !a || b)
    }

    pub fn is_disjoint(&self, other: &Mask) -> bool {
        Zip::from(&self.data).and(&other.data).all(|&a, &b| !(a && b))
    }

    /// Downscales by max-pooling over `(fr, fc)` blocks.
    pub fn max_pool(&self, fr: usize, fc: usize) -> Result<Mask> {
        let (h, w) = self.shape();
        if fr == 0 || fc == 0 || h % fr != 0 || w % fc != 0 {
            return Err(Error::invalid(format!("cannot max-pool {h}x{w} mask by {fr}x{fc}")));
        }
        Ok(Mask::from_fn(h / fr, w / fc, |(r, c)| {
            self.data
                .slice(s![r * fr..(r + 1) * fr, c * fc..(c + 1) * fc])
                .iter()
                .any(|&v| v)
        }))
    }

    pub fn to_f32(&self) -> Array2<f32> {
        self.data.mapv(|v| if v { 1.0 } else { 0.0 })
    }

    pub fn from_luma8(img: &image::GrayImage) -> Self {
        let (w, h) = img.dimensions();
        Mask::from_fn(h as usize, w as usize, |(r, c)| {
            img.get_pixel(c as u32, r as u32)[0] >= MASK_THRESHOLD
        })
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        let (h, w) = self.shape();
        image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([if self.data[[y as usize, x as usize]] { 255 } else { 0 }])
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Self::from_luma8(&img.to_luma8()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_luma8().save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}
