//! Minimal interleaved image buffer used across preprocessing.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};

/// Row-major interleaved pixels with values in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Input(format!("empty image {width}x{height}x{channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Input(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Raster { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Raster { width, height, channels, data: vec![value; width * height * channels] }
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Grayscale maps are replicated to three channels.
    pub fn to_rgb(&self) -> Raster {
        match self.channels {
            3 => self.clone(),
            1 => Raster {
                width: self.width,
                height: self.height,
                channels: 3,
                data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            },
            c => Raster {
                width: self.width,
                height: self.height,
                channels: 3,
                data: self.data.chunks(c).flat_map(|p| [p[0], p[1 % c], p[2 % c]]).collect(),
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.display().to_string()));
        }
        let img = image::open(path)?;
        Ok(Self::from_dynamic(img))
    }

    fn from_dynamic(img: DynamicImage) -> Self {
        match img {
            DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                Raster { width: w as usize, height: h as usize, channels: 1, data: g.into_raw().into_iter().map(f32::from).collect() }
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = rgb.dimensions();
                Raster { width: w as usize, height: h as usize, channels: 3, data: rgb.into_raw().into_iter().map(f32::from).collect() }
            }
        }
    }

    fn bytes(&self) -> Vec<u8> {
        self.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        let rgb = self.to_rgb();
        RgbImage::from_raw(self.width as u32, self.height as u32, rgb.bytes()).expect("sized buffer")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self.channels {
            1 => GrayImage::from_raw(self.width as u32, self.height as u32, self.bytes())
                .expect("sized buffer")
                .save(path)?,
            _ => self.to_rgb_image().save(path)?,
        }
        Ok(())
    }
}
