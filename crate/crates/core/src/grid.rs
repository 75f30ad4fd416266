//! Single-item latent and image tensors exchanged between modules.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

/// A `(C, h, w)` latent at decoder stage `stage_index` (0 is the decoder input).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    values: Tensor<f32>,
    stage_index: usize,
}

impl LatentGrid {
    pub fn new(values: Tensor<f32>, stage_index: usize) -> Result<Self> {
        match values.shape() {
            [c, h, w] if *c >= 1 && *h >= 1 && *w >= 1 => {}
            s => return Err(Error::shape(format!("latent must be (C,h,w) with all dims >= 1, got {s:?}"))),
        }
        if !values.all_finite() {
            return Err(Error::invalid("latent contains non-finite values"));
        }
        Ok(Self {
            values,
            stage_index,
        })
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    pub fn stage_index(&self) -> usize {
        self.stage_index
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels(), self.height(), self.width())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageSource {
    Generated,
    Cover,
    Attacked,
}

/// An RGB image `(3, H, W)` with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    values: Tensor<f32>,
    source: Option<ImageSource>,
}

impl ImageGrid {
    /// Validates the shape and clamps values into `[-1, 1]`.
    pub fn new(values: Tensor<f32>) -> Result<Self> {
        match values.shape() {
            [3, h, w] if *h >= 1 && *w >= 1 => {}
            s => return Err(Error::shape(format!("image must be (3,H,W), got {s:?}"))),
        }
        if !values.all_finite() {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(Self {
            values: values.map(|v| v.clamp(-1.0, 1.0)),
            source: None,
        })
    }

    pub fn with_source(mut self, source: ImageSource) -> Self {
        self.source = Some(source);
        self
    }

    pub fn source(&self) -> Option<ImageSource> {
        self.source
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut data = vec![0f32; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 127.5 - 1.0;
            }
        }
        Self {
            values: Tensor::from_vec(&[3, h, w], data),
            source: None,
        }
    }

    /// Quantizes to 8-bit RGB.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = (self.height(), self.width());
        let d = self.values.data();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| {
                let v = d[(c * h + y as usize) * w + x as usize];
                ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Codec(e.to_string()))?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Codec(e.to_string()))
    }
}

/// Stacks images of identical size into an `(N, 3, H, W)` batch.
pub fn images_to_batch<T: Real>(images: &[ImageGrid]) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(Error::Empty("image batch"));
    }
    let shape = images[0].values().shape().to_vec();
    if images.iter().any(|i| i.values().shape() != shape) {
        return Err(Error::shape("images in a batch must share one resolution"));
    }
    let items: Vec<Tensor<T>> = images.iter().map(|i| i.values().cast()).collect();
    Ok(Tensor::stack(&items))
}

pub fn batch_to_images<T: Real>(batch: &Tensor<T>, source: Option<ImageSource>) -> Vec<ImageGrid> {
    (0..batch.shape()[0])
        .map(|i| {
            let img = ImageGrid::new(batch.batch_item(i).cast()).expect("batch item is an RGB image");
            match source {
                Some(s) => img.with_source(s),
                None => img,
            }
        })
        .collect()
}

pub fn latents_to_batch<T: Real>(latents: &[LatentGrid]) -> Result<Tensor<T>> {
    if latents.is_empty() {
        return Err(Error::Empty("latent batch"));
    }
    let shape = latents[0].values().shape().to_vec();
    if latents.iter().any(|l| l.values().shape() != shape) {
        return Err(Error::shape("latents in a batch must share one shape"));
    }
    let items: Vec<Tensor<T>> = latents.iter().map(|l| l.values().cast()).collect();
    Ok(Tensor::stack(&items))
}
