use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor};

/// One C×H×W image with pixel values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width || channels * height * width == 0 {
            return Err(Error::shape("image", &[channels, height, width], &[data.len()]));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let hw = self.height * self.width;
        &mut self.data[c * hw..(c + 1) * hw]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Spatial dimensions of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Size {
    pub height: usize,
    pub width: usize,
}

impl Size {
    pub fn new(height: usize, width: usize) -> Self {
        Size { height, width }
    }
}

/// N×C×H×W images stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<f32>,
}

impl ImageBatch {
    pub fn empty(channels: usize, height: usize, width: usize) -> Self {
        ImageBatch {
            channels,
            height,
            width,
            data: Vec::new(),
        }
    }

    pub fn from_images(images: &[Image]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Usage("empty image batch".into()))?;
        let mut batch = ImageBatch::empty(first.channels, first.height, first.width);
        for img in images {
            batch.push(img)?;
        }
        Ok(batch)
    }

    pub fn push(&mut self, img: &Image) -> Result<()> {
        if (img.channels, img.height, img.width) != (self.channels, self.height, self.width) {
            return Err(Error::shape(
                "image batch",
                &[self.channels, self.height, self.width],
                &[img.channels, img.height, img.width],
            ));
        }
        self.data.extend_from_slice(&img.data);
        Ok(())
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn image(&self, i: usize) -> Image {
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.image_data(i).to_vec(),
        }
    }

    pub fn image_data(&self, i: usize) -> &[f32] {
        let len = self.image_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Gathers the images at `indices`.
    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let mut out = ImageBatch::empty(self.channels, self.height, self.width);
        out.data.reserve(indices.len() * self.image_len());
        for &i in indices {
            out.data.extend_from_slice(self.image_data(i));
        }
        out
    }

    /// Converts to an N×C×H×W tensor, applying per-channel `(x − mean) / std`.
    pub fn to_tensor<T: Scalar>(&self, norm: &ChannelNorm) -> Result<Tensor<T>> {
        let hw = self.height * self.width;
        let mut out = Vec::with_capacity(self.data.len());
        for (k, plane) in self.data.chunks(hw).enumerate() {
            let c = k % self.channels;
            let (m, s) = (norm.mean[c], norm.std[c]);
            out.extend(plane.iter().map(|&v| T::of(f64::from((v - m) / s))));
        }
        Tensor::new(&[self.len(), self.channels, self.height, self.width], out)
    }
}

/// Per-channel normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelNorm {
    pub fn identity(channels: usize) -> Self {
        ChannelNorm {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Mean and standard deviation of every channel over the whole batch.
    pub fn from_batch(batch: &ImageBatch) -> Self {
        let c = batch.channels;
        let hw = batch.height * batch.width;
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for (k, plane) in batch.data.chunks(hw).enumerate() {
            for &v in plane {
                sum[k % c] += f64::from(v);
                sq[k % c] += f64::from(v) * f64::from(v);
            }
        }
        let count = (batch.len() * hw) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / count - m * m).max(0.0).sqrt()).max(1e-6) as f32)
            .collect();
        ChannelNorm {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }
}
