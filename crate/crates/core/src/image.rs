use crate::diffeng::Tensor;
use crate::{Error, Result};

/// Rec.709 luma weights.
pub const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];

/// Row-major `H × W × 3` RGB image with values nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Result<Self> {
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "image data",
                left: vec![data.len()],
                right: vec![expected],
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: u32, height: u32, rgb: [f64; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self { width, height, data }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn pixel(&self, row: u32, col: u32) -> [f64; 3] {
        let i = (row as usize * self.width as usize + col as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: u32, col: u32, rgb: [f64; 3]) {
        let i = (row as usize * self.width as usize + col as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_dims(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch {
                what: "image dimensions",
                left: vec![self.height as usize, self.width as usize],
                right: vec![other.height as usize, other.width as usize],
            });
        }
        Ok(())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.height as usize, self.width as usize, 3], self.data.clone()).expect("image shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [h, w, 3] => Self::new(*w as u32, *h as u32, t.data().to_vec()),
            other => Err(Error::DimensionMismatch {
                what: "image tensor",
                left: other.to_vec(),
                right: vec![0, 0, 3],
            }),
        }
    }

    /// Per-pixel Rec.709 luma, `H × W`.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
            .collect()
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        self.same_dims(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.data.len().max(1) as f64)
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        self.same_dims(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.data.len().max(1) as f64)
    }
}
