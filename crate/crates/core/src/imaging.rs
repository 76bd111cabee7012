//! Single images, batches and PNG I/O.

use std::path::Path;

use wali_autograd::Tensor;

use crate::error::{Error, Result};

/// Square HWC image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub size: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(size: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != size * size * channels {
            return Err(Error::Shape {
                expected: vec![size, size, channels],
                got: vec![data.len()],
            });
        }
        Ok(Self {
            size,
            channels,
            data,
        })
    }

    pub fn filled(size: usize, channels: usize, v: f32) -> Self {
        Self {
            size,
            channels,
            data: vec![v; size * size * channels],
        }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.size + x) * self.channels + c]
    }

    /// Luma with BT.601 weights; single-channel images pass through.
    pub fn to_gray(&self) -> Vec<f32> {
        if self.channels == 1 {
            return self.data.clone();
        }
        self.data
            .chunks_exact(self.channels)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let s = self.size as u32;
        match self.channels {
            1 => image::GrayImage::from_raw(s, s, bytes)
                .ok_or_else(|| Error::Image("buffer size".into()))?
                .save(path)?,
            3 => image::RgbImage::from_raw(s, s, bytes)
                .ok_or_else(|| Error::Image("buffer size".into()))?
                .save(path)?,
            c => return Err(Error::Image(format!("cannot write {c}-channel PNG"))),
        }
        Ok(())
    }

    /// Loads a PNG as RGB, resizing to `size` if needed.
    pub fn load_png(path: &Path, size: usize) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let img = if img.width() as usize != size || img.height() as usize != size {
            image::imageops::resize(
                &img,
                size as u32,
                size as u32,
                image::imageops::FilterType::Triangle,
            )
        } else {
            img
        };
        let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        Self::new(size, 3, data)
    }
}

/// Stacks images into an `[n, dim]` batch.
pub fn to_batch(images: &[&Image]) -> Result<Tensor<f32>> {
    let dim = images.first().map_or(0, |i| i.dim());
    let mut data = Vec::with_capacity(images.len() * dim);
    for img in images {
        if img.dim() != dim {
            return Err(Error::Shape {
                expected: vec![dim],
                got: vec![img.dim()],
            });
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::new(&[images.len(), dim], data))
}

/// Splits an `[n, size·size·channels]` batch back into images.
pub fn from_batch(batch: &Tensor<f32>, size: usize, channels: usize) -> Result<Vec<Image>> {
    let dim = size * size * channels;
    let (_, cols) = batch.dims2();
    if cols != dim {
        return Err(Error::Shape {
            expected: vec![0, dim],
            got: batch.shape().to_vec(),
        });
    }
    batch
        .data()
        .chunks_exact(dim)
        .map(|c| Image::new(size, channels, c.to_vec()))
        .collect()
}
