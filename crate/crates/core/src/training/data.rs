//! Synthetic image classification data and its on-disk format.
//!
//! Each image is a mid-grey noisy canvas split into a 4×4 grid of cells. One
//! cell carries a class-specific ±1 texture whose polarity is random, so the
//! class-conditional pixel means coincide and a linear probe on raw pixels is
//! near chance, while a patch-based model that detects textures is not.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"CBDS";
pub const FORMAT_VERSION: u32 = 1;
pub const GRID: usize = 4;
pub const BACKGROUND: f64 = 128.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub seed: u64,
    pub count: usize,
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Standard deviation of the per-pixel noise, in 8-bit units.
    pub noise_std: f64,
}

impl GeneratorParams {
    pub fn new(seed: u64, count: usize, image_size: usize, num_classes: usize) -> Self {
        GeneratorParams { seed, count, image_size, channels: 3, num_classes, noise_std: 24.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    count: usize,
    height: usize,
    width: usize,
    channels: usize,
    num_classes: usize,
    pixels: Vec<u8>,
    labels: Vec<u32>,
}

/// Texture of class `k` at cell coordinates `(y, x)` in a `side × side`
/// cell, as ±1.
pub fn template(k: usize, side: usize, y: usize, x: usize) -> f64 {
    let w = (side / 8).max(1);
    let half = side / 2;
    let on = match k {
        0 => (y / w) % 2 == 0,
        1 => (x / w) % 2 == 0,
        2 => (y / w + x / w) % 2 == 0,
        3 => ((x + y) / (2 * w)) % 2 == 0,
        4 => ((x + side - y) / (2 * w)) % 2 == 0,
        5 => y < half,
        6 => x < half,
        7 => (y / (2 * w) + x / (2 * w)) % 2 == 0,
        8 => (y / (2 * w)) % 2 == 0,
        _ => (x / (2 * w)) % 2 == 0,
    };
    if on {
        1.0
    } else {
        -1.0
    }
}

impl SyntheticDataset {
    pub fn generate(p: &GeneratorParams) -> Result<Self> {
        if !(2..=10).contains(&p.num_classes) {
            return Err(Error::Dataset(format!("num_classes {} outside 2..=10", p.num_classes)));
        }
        if p.count < p.num_classes {
            return Err(Error::Dataset(format!("{} images cannot cover {} classes", p.count, p.num_classes)));
        }
        if p.image_size < 2 * GRID || p.image_size % GRID != 0 {
            return Err(Error::Dataset(format!("image_size {} must be a multiple of {GRID} and ≥ {}", p.image_size, 2 * GRID)));
        }
        if p.channels == 0 || !(p.noise_std >= 0.0) {
            return Err(Error::Dataset("channels must be positive and noise_std non-negative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let mut labels: Vec<u32> = (0..p.count).map(|i| (i % p.num_classes) as u32).collect();
        labels.shuffle(&mut rng);

        let (s, c) = (p.image_size, p.channels);
        let side = s / GRID;
        let noise = Normal::new(0.0, p.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
        let mut pixels = Vec::with_capacity(p.count * s * s * c);
        let mut canvas = vec![0.0f64; s * s];
        for &label in &labels {
            let cell = rng.random_range(0..GRID * GRID);
            let (cy, cx) = ((cell / GRID) * side, (cell % GRID) * side);
            let polarity = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let amplitude = rng.random_range(50.0..90.0);
            canvas.fill(BACKGROUND);
            for y in 0..side {
                for x in 0..side {
                    canvas[(cy + y) * s + cx + x] += polarity * amplitude * template(label as usize, side, y, x);
                }
            }
            for &base in &canvas {
                for _ in 0..c {
                    let v = if p.noise_std > 0.0 { base + noise.sample(&mut rng) } else { base };
                    pixels.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        Ok(SyntheticDataset { count: p.count, height: s, width: s, channels: c, num_classes: p.num_classes, pixels, labels })
    }

    pub fn from_parts(height: usize, width: usize, channels: usize, num_classes: usize, pixels: Vec<u8>, labels: Vec<u32>) -> Result<Self> {
        let count = labels.len();
        if pixels.len() != count * height * width * channels {
            return Err(Error::Dataset("pixel buffer does not match dimensions".into()));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Dataset(format!("label {l} ≥ num_classes {num_classes}")));
        }
        Ok(SyntheticDataset { count, height, width, channels, num_classes, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn image_size(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.height * self.width * self.channels;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// The first `n` images as a dataset of their own.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.count);
        let per = self.height * self.width * self.channels;
        SyntheticDataset {
            count: n,
            pixels: self.pixels[..n * per].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..*self
        }
    }

    /// Images `indices` as `[B, H, W, C]` with pixels scaled to `[0, 1]`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        let scale = T::of(1.0 / 255.0);
        let mut data = Vec::with_capacity(indices.len() * self.height * self.width * self.channels);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&p| T::of(p as f64) * scale));
        }
        let t = Tensor::new(vec![indices.len(), self.height, self.width, self.channels], data)?;
        Ok((t, indices.iter().map(|&i| self.label(i)).collect()))
    }

    /// Per-channel mean and standard deviation of pixels scaled to `[0, 1]`.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.channels;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for px in self.pixels.chunks(c) {
            for (ch, &v) in px.iter().enumerate() {
                let x = v as f64 / 255.0;
                sum[ch] += x;
                sq[ch] += x * x;
            }
        }
        let n = (self.pixels.len() / c).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        (mean, std)
    }

    /// Serialises to the `CBDS` layout: magic, six little-endian `u32`
    /// header fields (version, count, H, W, C, classes), raw pixels, then
    /// `u32` labels.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + self.pixels.len() + 4 * self.count);
        out.extend_from_slice(MAGIC);
        for v in [FORMAT_VERSION, self.count as u32, self.height as u32, self.width as u32, self.channels as u32, self.num_classes as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.pixels);
        for &l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 28 || &bytes[..4] != MAGIC {
            return Err(Error::Dataset("missing CBDS header".into()));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        let (version, count, h, w, c, classes) = (field(0), field(1), field(2), field(3), field(4), field(5));
        if version != FORMAT_VERSION as usize {
            return Err(Error::Dataset(format!("unsupported dataset version {version}")));
        }
        let npix = count * h * w * c;
        if bytes.len() != 28 + npix + 4 * count {
            return Err(Error::Dataset(format!("expected {} bytes, found {}", 28 + npix + 4 * count, bytes.len())));
        }
        let pixels = bytes[28..28 + npix].to_vec();
        let labels = bytes[28 + npix..]
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::from_parts(h, w, c, classes, pixels, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Shorthand for [`SyntheticDataset::generate`] with default channels and noise.
pub fn make_synthetic_dataset(seed: u64, n: usize, image_size: usize, num_classes: usize) -> Result<SyntheticDataset> {
    SyntheticDataset::generate(&GeneratorParams::new(seed, n, image_size, num_classes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn determinism_and_balance() {
        let a = make_synthetic_dataset(5, 300, 32, 3).unwrap();
        let b = make_synthetic_dataset(5, 300, 32, 3).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.class_counts(), vec![100, 100, 100]);
        let c = make_synthetic_dataset(6, 300, 32, 3).unwrap();
        assert_ne!(a.pixels(), c.pixels());
    }

    #[test]
    fn balanced_within_one() {
        let d = make_synthetic_dataset(1, 103, 16, 4).unwrap();
        let counts = d.class_counts();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1);
    }

    #[test]
    fn degenerate_sizes_are_rejected() {
        assert!(make_synthetic_dataset(1, 10, 32, 1).is_err());
        assert!(make_synthetic_dataset(1, 10, 32, 11).is_err());
        assert!(make_synthetic_dataset(1, 2, 32, 3).is_err());
        assert!(make_synthetic_dataset(1, 10, 30, 3).is_err());
        assert!(make_synthetic_dataset(1, 10, 4, 3).is_err());
    }

    #[test]
    fn file_round_trip_and_header() {
        let d = make_synthetic_dataset(2, 12, 16, 3).unwrap();
        let bytes = d.to_bytes();
        assert_eq!(&bytes[..4], b"CBDS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 12);
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 3);
        assert_eq!(SyntheticDataset::from_bytes(&bytes).unwrap(), d);
        assert!(SyntheticDataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(SyntheticDataset::from_bytes(&bad).is_err());
    }
}
