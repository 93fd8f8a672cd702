//! Row-major float images with interleaved channels.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};
#[allow(unused_imports)]
use num_traits::Float;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn rgb(width: usize, height: usize) -> Self {
        Self::new(width, height, 3)
    }

    pub fn gray(width: usize, height: usize) -> Self {
        Self::new(width, height, 1)
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let mut data = Vec::with_capacity(width * height * value.len());
        for _ in 0..width * height {
            data.extend_from_slice(value);
        }
        Self {
            width,
            height,
            channels: value.len(),
            data,
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::shape(alloc::format!(
                "{}x{}x{} image needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
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

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub(crate) fn check_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(alloc::format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.width,
                self.height,
                self.channels,
                other.width,
                other.height,
                other.channels
            )))
        }
    }

    pub fn scaled(&self, s: f64) -> Image {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &Image, s: f64) -> Result<()> {
        self.check_shape(other, "add_scaled")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Mean squared difference over all values.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        self.check_shape(other, "mse")?;
        let n = self.data.len().max(1) as f64;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }

    /// Per-pixel Euclidean norm across channels, as a one-channel image.
    pub fn channel_norm(&self) -> Image {
        let mut out = Image::gray(self.width, self.height);
        for (o, px) in out.data.iter_mut().zip(self.data.chunks(self.channels.max(1))) {
            *o = px.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        out
    }

    /// Mirror left-right.
    pub fn flipped_horizontally(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.pixel_mut(self.width - 1 - x, y).copy_from_slice(self.pixel(x, y));
            }
        }
        out
    }
}
