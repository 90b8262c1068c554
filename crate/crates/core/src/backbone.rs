//! Frozen convolutional feature extractor `g: 256×256×3 → 8×8×512`.
//!
//! The builtin extractor is a five-stage stride-2 CNN whose weights are
//! drawn once from a seed and never trained. Externally computed features
//! (e.g. from a pretrained network) can be injected through `AFFT1` files.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Reader;
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::nn::he_normal;
use crate::raster::Raster;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INPUT_SIZE: usize = 256;
pub const FEATURE_SIDE: usize = 8;
pub const FEATURE_CHANNELS: usize = 512;
pub const FEATURE_MAGIC: &[u8; 5] = b"AFFT1";

const STAGE_CHANNELS: [usize; 6] = [3, 32, 64, 128, 256, 512];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image = 0,
    Semantic = 1,
    Depth = 2,
}

impl Modality {
    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Modality::Image),
            1 => Ok(Modality::Semantic),
            2 => Ok(Modality::Depth),
            _ => Err(Error::Format(format!("unknown modality byte {b}"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Image => "image",
            Modality::Semantic => "semantic",
            Modality::Depth => "depth",
        })
    }
}

/// An `8×8×512` feature map and the modality it was computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub values: Tensor<T>,
    pub modality: Modality,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(values: Tensor<T>, modality: Modality) -> Result<Self> {
        if values.shape() != [FEATURE_SIDE, FEATURE_SIDE, FEATURE_CHANNELS] {
            return Err(Error::Dimension(format!(
                "feature map must be {FEATURE_SIDE}x{FEATURE_SIDE}x{FEATURE_CHANNELS}, got {:?}",
                values.shape()
            )));
        }
        Ok(FeatureMap { values, modality })
    }
}

/// Bilinear resize with half-pixel centers (`align_corners = false`).
pub fn resize_bilinear(img: &Raster, width: usize, height: usize) -> Result<Raster> {
    if width == 0 || height == 0 {
        return Err(Error::Input("resize target must be non-empty".into()));
    }
    let (sw, sh, c) = (img.width(), img.height(), img.channels());
    if sw == width && sh == height {
        return Ok(img.clone());
    }
    let axis = |dst: usize, src: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let xs = axis(width, sw);
    let ys = axis(height, sh);
    let mut out = Vec::with_capacity(width * height * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let top = img.get(x0, y0, ch) * (1.0 - fx) + img.get(x1, y0, ch) * fx;
                let bot = img.get(x0, y1, ch) * (1.0 - fx) + img.get(x1, y1, ch) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    // interpolation is convex, but keep rounding noise inside the input range
    let (lo, hi) = img.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    out.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    Raster::new(width, height, c, out)
}

/// The fixed rescaling `f: h×w×3 → 256×256×3`.
pub fn resize_to_input(img: &Raster) -> Result<Raster> {
    resize_bilinear(img, INPUT_SIZE, INPUT_SIZE)
}

/// Seeded frozen CNN: 3→32→64→128→256→512 channels, 3×3 kernels, stride 2, ReLU.
#[derive(Clone, Debug)]
pub struct FrozenCnn<T> {
    seed: u64,
    kernels: Vec<Tensor<T>>,
}

impl<T: Scalar> FrozenCnn<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernels = STAGE_CHANNELS
            .windows(2)
            .map(|w| he_normal([3, 3, w[0], w[1]], 9 * w[0], &mut rng))
            .collect();
        FrozenCnn { seed, kernels }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn kernels(&self) -> &[Tensor<T>] {
        &self.kernels
    }

    /// Features of an already resized image; grayscale input is replicated
    /// to three channels.
    pub fn extract(&self, img: &Raster, modality: Modality) -> Result<FeatureMap<T>> {
        if img.width() != INPUT_SIZE || img.height() != INPUT_SIZE {
            return Err(Error::Dimension(format!(
                "backbone input must be {INPUT_SIZE}x{INPUT_SIZE}, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        let rgb = img.to_rgb();
        let mut x: Vec<T> = rgb.data().iter().map(|&v| T::lit(v as f64 / 255.0)).collect();
        let mut shape = vec![1, INPUT_SIZE, INPUT_SIZE, 3];
        for k in &self.kernels {
            let geom = ConvGeom::new(&shape, k.shape(), 2, 1)?;
            x = kernels::conv2d_raw(&x, k.data(), &geom);
            x.iter_mut().for_each(|v| *v = v.max(T::zero()));
            shape = vec![1, geom.ho, geom.wo, geom.cout];
        }
        FeatureMap::new(Tensor::new([FEATURE_SIDE, FEATURE_SIDE, FEATURE_CHANNELS], x)?, modality)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackboneSpec {
    BuiltinFrozenCnn { seed: u64 },
    PrecomputedFile { path: PathBuf },
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec::BuiltinFrozenCnn { seed: 0 }
    }
}

/// Feature source behind a [`BackboneSpec`].
#[derive(Clone, Debug)]
pub enum Backbone<T> {
    Builtin(FrozenCnn<T>),
    Precomputed(FeatureFile),
}

impl<T: Scalar> Backbone<T> {
    pub fn from_spec(spec: &BackboneSpec) -> Result<Self> {
        Ok(match spec {
            BackboneSpec::BuiltinFrozenCnn { seed } => Backbone::Builtin(FrozenCnn::new(*seed)),
            BackboneSpec::PrecomputedFile { path } => Backbone::Precomputed(FeatureFile::read(path)?),
        })
    }

    /// Features for record `id`. The builtin path resizes and runs the CNN on
    /// `img`; the precomputed path looks the record up and ignores the pixels.
    pub fn features(&self, id: &str, modality: Modality, img: &Raster) -> Result<FeatureMap<T>> {
        match self {
            Backbone::Builtin(cnn) => cnn.extract(&resize_to_input(img)?, modality),
            Backbone::Precomputed(file) => {
                let values = file.get(id, modality)?;
                FeatureMap::new(values.cast(), modality)
            }
        }
    }
}

/// In-memory `AFFT1` feature file.
///
/// Layout: magic, `u32` height/width/channels header, then records of
/// `u32` id length, UTF-8 id, modality byte, and `H·W·C` little-endian `f32`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureFile {
    pub records: Vec<(String, Modality, Tensor<f32>)>,
}

impl FeatureFile {
    pub fn push(&mut self, id: impl Into<String>, modality: Modality, values: Tensor<f32>) -> Result<()> {
        FeatureMap::new(values.clone(), modality)?;
        self.records.push((id.into(), modality, values));
        Ok(())
    }

    pub fn get(&self, id: &str, modality: Modality) -> Result<&Tensor<f32>> {
        self.records
            .iter()
            .find(|(i, m, _)| i == id && *m == modality)
            .map(|(_, _, t)| t)
            .ok_or_else(|| Error::NotFound(format!("feature record '{id}' ({modality})")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = FEATURE_MAGIC.to_vec();
        for d in [FEATURE_SIDE, FEATURE_SIDE, FEATURE_CHANNELS] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for (id, modality, values) in &self.records {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.push(*modality as u8);
            for v in values.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5)? != FEATURE_MAGIC {
            return Err(Error::Format("not an AFFT1 feature file (bad magic)".into()));
        }
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        if dims != [FEATURE_SIDE, FEATURE_SIDE, FEATURE_CHANNELS] {
            return Err(Error::Format(format!(
                "feature file declares {}x{}x{}, expected {FEATURE_SIDE}x{FEATURE_SIDE}x{FEATURE_CHANNELS}",
                dims[0], dims[1], dims[2]
            )));
        }
        let n = dims.iter().product::<usize>();
        let mut file = FeatureFile::default();
        while !r.at_end() {
            let len = r.u32()? as usize;
            let id = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("feature record id is not UTF-8".into()))?;
            let modality = Modality::from_byte(r.take(1)?[0])?;
            let data = r.take(n * 4)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            file.records.push((id, modality, Tensor::new(dims.to_vec(), data)?));
        }
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Load one stored feature map.
pub fn load_precomputed<T: Scalar>(path: &Path, id: &str, modality: Modality) -> Result<FeatureMap<T>> {
    let file = FeatureFile::read(path)?;
    FeatureMap::new(file.get(id, modality)?.cast(), modality)
}
