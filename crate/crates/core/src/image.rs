//! Planar RGB images with real-valued channels.

use autodiff::Tensor;

use crate::{Error, Result};

/// An RGB image stored channel-planar (`[3, H, W]`, row-major), channels
/// in `[0, 1]`. This is the layout the detector consumes directly.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::invalid(format!(
                "image {}x{} needs {} channel values, got {}",
                width,
                height,
                3 * width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let plane = width * height;
        let mut data = vec![0.0; 3 * plane];
        for (c, chunk) in data.chunks_mut(plane).enumerate() {
            chunk.fill(rgb[c]);
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * plane + i] = v;
        }
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        (0..self.width * self.height).map(move |i| {
            let plane = self.width * self.height;
            [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
        })
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::new(&[3, self.height, self.width], self.data.clone()).expect("consistent dims")
    }
}
