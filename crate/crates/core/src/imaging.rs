//! Image and mask containers plus PNG I/O.

use std::path::Path;

use autograd::{Float, Tensor};
use image::imageops::FilterType;

use crate::{Error, Result};

/// H×W×C intensities in `[0, 1]`, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// H×W single-channel map; binary for ground truth, soft for predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f32) {
        self.data[(row * self.width + col) * self.channels + ch] = v;
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Stacks images into an N×C×H×W tensor.
    pub fn batch_to_tensor<T: Float>(images: &[&Image]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("empty image batch".into()))?;
        let (h, w, c) = (first.height, first.width, first.channels);
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if !img.same_shape(first) {
                return Err(Error::Shape(format!(
                    "batch mixes {h}x{w}x{c} and {}x{}x{}",
                    img.height, img.width, img.channels
                )));
            }
            for ch in 0..c {
                data.extend((0..h * w).map(|p| T::lit(img.data[p * c + ch] as f64)));
            }
        }
        Ok(Tensor::from_vec(&[images.len(), c, h, w], data)?)
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Self::batch_to_tensor(&[self]).expect("single image batch")
    }

    /// Item `index` of an N×C×H×W tensor.
    pub fn from_tensor<T: Float>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if index >= n {
            return Err(Error::Shape(format!("batch index {index} out of {n}")));
        }
        let src = &t.data()[index * c * h * w..][..c * h * w];
        let mut data = vec![0.0f32; h * w * c];
        for ch in 0..c {
            for p in 0..h * w {
                data[p * c + ch] = src[ch * h * w + p].as_f64() as f32;
            }
        }
        Image::new(h, w, c, data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Image::new(h as usize, w as usize, 3, data)
    }

    /// 8-bit quantised copy: `round(255·v)` clamped to `[0, 255]`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(Error::Shape(format!("cannot write {c}-channel png"))),
        };
        image::save_buffer(
            path,
            &self.to_u8(),
            self.width as u32,
            self.height as u32,
            color,
        )
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// Bilinear resize; returns a clone when the size already matches.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        if (height, width) == self.size() {
            return self.clone();
        }
        let buf: image::ImageBuffer<image::Rgb<f32>, Vec<f32>> = match self.channels {
            3 => image::ImageBuffer::from_raw(
                self.width as u32,
                self.height as u32,
                self.data.clone(),
            )
            .expect("buffer size"),
            _ => image::ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                let v = self.get(y as usize, x as usize, 0);
                image::Rgb([v, v, v])
            }),
        };
        let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        let mut data: Vec<f32> = out.into_raw();
        if self.channels != 3 {
            data = data.chunks(3).map(|p| p[0]).collect();
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Image::new(height, width, self.channels, data).expect("resized size")
    }

    pub fn to_rgb(&self) -> Self {
        if self.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.height * self.width * 3);
        for p in 0..self.height * self.width {
            let v = self.data[p * self.channels];
            data.extend([v, v, v]);
        }
        Image::new(self.height, self.width, 3, data).expect("rgb size")
    }
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.data[row * self.width + col] = v;
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Pixel-wise union (maximum) with another mask of the same size.
    pub fn union_with(&mut self, other: &Mask) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = a.max(b);
        }
    }

    pub fn as_image(&self) -> Image {
        Image::new(self.height, self.width, 1, self.data.clone()).expect("mask size")
    }

    pub fn from_image(img: &Image) -> Self {
        Self {
            height: img.height,
            width: img.width,
            data: (0..img.height * img.width)
                .map(|p| img.data[p * img.channels])
                .collect(),
        }
    }

    /// Loads a grayscale PNG and thresholds it at mid-grey.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = Image::load_png(path)?;
        let mut mask = Mask::from_image(&img);
        for v in &mut mask.data {
            *v = if *v >= 0.5 { 1.0 } else { 0.0 };
        }
        Ok(mask)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.as_image().save_png(path)
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let mut out = Mask::zeros(height, width);
        for r in 0..height {
            let sr = (r * self.height) / height;
            for c in 0..width {
                let sc = (c * self.width) / width;
                out.set(r, c, self.get(sr, sc));
            }
        }
        out
    }

    pub fn to_tensor<T: Float>(masks: &[&Mask]) -> Result<Tensor<T>> {
        let first = masks
            .first()
            .ok_or_else(|| Error::Shape("empty mask batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(masks.len() * h * w);
        for m in masks {
            if (m.height, m.width) != (h, w) {
                return Err(Error::Shape("mask batch sizes differ".into()));
            }
            data.extend(m.data.iter().map(|&v| T::lit(v as f64)));
        }
        Ok(Tensor::from_vec(&[masks.len(), 1, h, w], data)?)
    }

    pub fn from_tensor<T: Float>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let img = Image::from_tensor(t, index)?;
        if img.channels != 1 {
            return Err(Error::Shape(format!(
                "mask tensor has {} channels",
                img.channels
            )));
        }
        Ok(Mask::from_image(&img))
    }
}

/// Lays out equally sized panels left to right, converting greyscale to RGB.
pub fn hconcat(panels: &[Image]) -> Result<Image> {
    let first = panels
        .first()
        .ok_or_else(|| Error::Shape("no panels".into()))?;
    let (h, w) = first.size();
    let mut out = Image::filled(h, w * panels.len(), 3, 0.0);
    for (k, p) in panels.iter().enumerate() {
        if p.size() != (h, w) {
            return Err(Error::Shape("snapshot panels differ in size".into()));
        }
        let p = p.to_rgb();
        for r in 0..h {
            for c in 0..w {
                for ch in 0..3 {
                    out.set(r, k * w + c, ch, p.get(r, c, ch));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip_preserves_layout() {
        let img = Image::new(2, 3, 3, (0..18).map(|v| v as f32 / 18.0).collect()).unwrap();
        let t = img.to_tensor::<f32>();
        assert_eq!(t.shape(), &[1, 3, 2, 3]);
        // channel 1 of pixel (0, 1) lives at flat HWC index 4
        assert_eq!(t.data()[6 + 1], img.data[4]);
        assert_eq!(Image::from_tensor(&t, 0).unwrap(), img);
    }

    #[test]
    fn png_roundtrip_is_lossless_for_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = Image::new(4, 5, 3, (0..60).map(|v| (v * 4) as f32 / 255.0).collect()).unwrap();
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back.to_u8(), img.to_u8());
    }

    #[test]
    fn resize_is_identity_at_same_size_and_stays_in_range() {
        let img = Image::new(4, 4, 3, (0..48).map(|v| (v % 7) as f32 / 6.0).collect()).unwrap();
        assert_eq!(img.resize_bilinear(4, 4), img);
        let big = img.resize_bilinear(8, 8);
        assert_eq!(big.size(), (8, 8));
        assert!(big.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
