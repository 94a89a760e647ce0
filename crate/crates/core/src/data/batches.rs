use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DatasetManifest;
use crate::backbone::ImageBatch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Random horizontal flip with probability 1/2.
    pub flip: bool,
}

/// Decodes an image, resizes it to `height × width` and returns CHW floats
/// in [0, 1].
pub fn load_image(path: &Path, height: usize, width: usize, flip: bool) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rgb = img.to_rgb8();
    if rgb.dimensions() != (width as u32, height as u32) {
        rgb = image::imageops::resize(&rgb, width as u32, height as u32, FilterType::Triangle);
    }
    if flip {
        image::imageops::flip_horizontal_in_place(&mut rgb);
    }
    let plane = height * width;
    let mut out = vec![0f32; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Loads images into a `(n, 3, height, width)` tensor without augmentation.
pub fn load_images<P: AsRef<Path>>(
    paths: &[P],
    height: usize,
    width: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(paths.len() * 3 * height * width);
    for p in paths {
        data.extend(load_image(p.as_ref(), height, width, false)?);
    }
    Ok(Tensor::from_vec(data, (paths.len(), 3, height, width), device)?.to_dtype(dtype)?)
}

/// Shuffled batches for one epoch. The order and flips are a function of
/// `(seed, epoch)` only; the final partial batch is kept.
pub fn make_batches<'a>(
    manifest: &'a DatasetManifest,
    config: &BatchConfig,
    epoch: usize,
    dtype: DType,
    device: &Device,
) -> Result<BatchIter<'a>> {
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if let Some(e) = manifest.entries.iter().find(|e| e.pid < 0) {
        return Err(Error::Dataset(format!(
            "{} has no training label",
            e.path.display()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    order.shuffle(&mut rng);
    let flips = order
        .iter()
        .map(|_| config.flip && rng.random_bool(0.5))
        .collect();
    Ok(BatchIter {
        manifest,
        order,
        flips,
        cursor: 0,
        config: config.clone(),
        dtype,
        device: device.clone(),
    })
}

#[derive(Debug)]
pub struct BatchIter<'a> {
    manifest: &'a DatasetManifest,
    order: Vec<usize>,
    flips: Vec<bool>,
    cursor: usize,
    config: BatchConfig,
    dtype: DType,
    device: Device,
}

impl BatchIter<'_> {
    /// Manifest indices of each batch, in delivery order.
    pub fn index_batches(&self) -> Vec<Vec<usize>> {
        self.order
            .chunks(self.config.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    fn load(&self, start: usize, end: usize) -> Result<ImageBatch> {
        let (h, w) = (self.config.height, self.config.width);
        let mut data = Vec::with_capacity((end - start) * 3 * h * w);
        let mut labels = Vec::with_capacity(end - start);
        for pos in start..end {
            let entry = &self.manifest.entries[self.order[pos]];
            data.extend(load_image(&entry.path, h, w, self.flips[pos])?);
            labels.push(entry.pid as u32);
        }
        let pixels = Tensor::from_vec(data, (end - start, 3, h, w), &self.device)?.to_dtype(self.dtype)?;
        Ok(ImageBatch { pixels, labels })
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<ImageBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let start = self.cursor;
        let end = (start + self.config.batch_size).min(self.order.len());
        self.cursor = end;
        Some(self.load(start, end))
    }
}
