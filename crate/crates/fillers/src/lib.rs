//! Concrete stimuli behind filler indices.
//!
//! A [`FillerBank`] maps a filler index to either a one-hot vector of length
//! N or a 32x32 grayscale image drawn from a 100-glyph bank. Image banks are
//! rasterized from a font (or a procedural fallback) into a portable asset
//! file; predicted images are scored by mean-squared-error nearest neighbor.

mod assets;
mod glyphs;

pub use assets::{load_assets, write_assets};
pub use glyphs::{procedural_bank, rasterize_glyph_assets, GlyphSource, DEFAULT_CODEPOINTS};

use esbn_nn::Tensor;
use thiserror::Error;

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const BANK_SIZE: usize = 100;

#[derive(Debug, Error)]
pub enum FillerError {
    #[error("filler index {index} out of range for bank of {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("bad asset file: {0}")]
    BadAssets(String),
    #[error("codepoint U+{0:04X} produced an empty raster")]
    UnrenderableCodepoint(u32),
    #[error("duplicate codepoint U+{0:04X}")]
    DuplicateCodepoint(u32),
    #[error("expected {expected} codepoints, got {got}")]
    WrongCodepointCount { expected: usize, got: usize },
    #[error("font error: {0}")]
    Font(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FillerError>;

#[derive(Clone, Debug, PartialEq)]
pub enum FillerBank {
    OneHot { n: usize },
    Image { images: Vec<Vec<f32>> },
}

impl FillerBank {
    pub fn one_hot(n: usize) -> Self {
        FillerBank::OneHot { n }
    }

    /// Build an image bank, checking the structural invariants: exactly 100
    /// images, each 32x32 in [0,1], pairwise non-identical.
    pub fn image(images: Vec<Vec<f32>>) -> Result<Self> {
        if images.len() != BANK_SIZE {
            return Err(FillerError::BadAssets(format!(
                "image bank must hold exactly {BANK_SIZE} images, got {}",
                images.len()
            )));
        }
        for (i, img) in images.iter().enumerate() {
            if img.len() != IMAGE_PIXELS {
                return Err(FillerError::BadAssets(format!(
                    "image {i} has {} pixels, expected {IMAGE_PIXELS}",
                    img.len()
                )));
            }
            if img.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(FillerError::BadAssets(format!(
                    "image {i} has pixels outside [0,1]"
                )));
            }
        }
        for i in 0..images.len() {
            for j in i + 1..images.len() {
                if images[i] == images[j] {
                    return Err(FillerError::BadAssets(format!(
                        "images {i} and {j} are identical"
                    )));
                }
            }
        }
        Ok(FillerBank::Image { images })
    }

    pub fn len(&self) -> usize {
        match self {
            FillerBank::OneHot { n } => *n,
            FillerBank::Image { images } => images.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_image(&self) -> bool {
        matches!(self, FillerBank::Image { .. })
    }

    /// Stimulus dimensionality: N for one-hot, 1024 for images.
    pub fn stimulus_dim(&self) -> usize {
        match self {
            FillerBank::OneHot { n } => *n,
            FillerBank::Image { .. } => IMAGE_PIXELS,
        }
    }

    /// The stimulus for a filler index: a one-hot vector of shape [N] or a
    /// [32, 32] grayscale map. Pure and deterministic.
    pub fn render(&self, index: usize) -> Result<Tensor<f32>> {
        match self {
            FillerBank::OneHot { n } => {
                if index >= *n {
                    return Err(FillerError::IndexOutOfRange { index, size: *n });
                }
                let mut data = vec![0.0f32; *n];
                data[index] = 1.0;
                Ok(Tensor::from_vec(data))
            }
            FillerBank::Image { images } => {
                let img = images.get(index).ok_or(FillerError::IndexOutOfRange {
                    index,
                    size: images.len(),
                })?;
                Ok(Tensor::new(vec![IMAGE_SIDE, IMAGE_SIDE], img.clone()).unwrap())
            }
        }
    }

    /// Raw pixel slice for an image bank entry.
    pub fn image_pixels(&self, index: usize) -> Result<&[f32]> {
        match self {
            FillerBank::Image { images } => {
                let size = images.len();
                images
                    .get(index)
                    .map(|v| v.as_slice())
                    .ok_or(FillerError::IndexOutOfRange { index, size })
            }
            FillerBank::OneHot { .. } => Err(FillerError::BadAssets(
                "image_pixels on a one-hot bank".into(),
            )),
        }
    }
}

/// Index of the bank image closest to `pred` under mean squared error,
/// ties broken by lowest index. `pred` is the flat 1024-pixel map.
pub fn nearest_neighbor(pred: &[f32], bank: &FillerBank) -> usize {
    let images = match bank {
        FillerBank::Image { images } => images,
        FillerBank::OneHot { .. } => panic!("nearest_neighbor needs an image bank"),
    };
    assert_eq!(pred.len(), IMAGE_PIXELS, "prediction must be 32x32");
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, img) in images.iter().enumerate() {
        let mut d = 0.0f64;
        for (p, q) in pred.iter().zip(img.iter()) {
            let diff = (*p - *q) as f64;
            d += diff * diff;
        }
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Minimum pairwise MSE across the bank; the separability margin that
/// nearest-neighbor accuracy rests on.
pub fn min_pairwise_mse(bank: &FillerBank) -> f64 {
    let images = match bank {
        FillerBank::Image { images } => images,
        FillerBank::OneHot { .. } => panic!("min_pairwise_mse needs an image bank"),
    };
    let mut best = f64::INFINITY;
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            let mut d = 0.0f64;
            for (p, q) in images[i].iter().zip(images[j].iter()) {
                let diff = (*p - *q) as f64;
                d += diff * diff;
            }
            best = best.min(d / IMAGE_PIXELS as f64);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_rendering() {
        let bank = FillerBank::one_hot(100);
        let v = bank.render(7).unwrap();
        assert_eq!(v.shape(), &[100]);
        assert_eq!(v.data()[7], 1.0);
        assert_eq!(v.data().iter().sum::<f32>(), 1.0);
        assert!(bank.render(100).is_err());
    }

    #[test]
    fn one_hot_orthogonality() {
        let bank = FillerBank::one_hot(20);
        for i in 0..20 {
            for j in 0..20 {
                let a = bank.render(i).unwrap();
                let b = bank.render(j).unwrap();
                let dot = a.dot(&b);
                assert_eq!(dot, if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn render_is_deterministic() {
        let bank = procedural_bank(7);
        let a = bank.render(13).unwrap();
        let b = bank.render(13).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), &[32, 32]);
        assert!(a.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn nearest_neighbor_exact_and_noisy() {
        let bank = procedural_bank(3);
        let margin = min_pairwise_mse(&bank);
        assert!(margin > 0.0, "bank images must be pairwise distinct");
        for k in [0usize, 17, 99] {
            let img = bank.image_pixels(k).unwrap().to_vec();
            assert_eq!(nearest_neighbor(&img, &bank), k);
            // uniform perturbation of amplitude 0.01 keeps the neighbor when
            // the bank margin dominates the induced distance (1e-4)
            assert!(margin > 4.0 * 0.01f64.powi(2));
            let noisy: Vec<f32> = img
                .iter()
                .enumerate()
                .map(|(i, &p)| (p + if i % 2 == 0 { 0.01 } else { -0.01 }).clamp(0.0, 1.0))
                .collect();
            assert_eq!(nearest_neighbor(&noisy, &bank), k);
        }
    }

    #[test]
    fn nearest_neighbor_matches_exhaustive_scan_on_gray() {
        let bank = procedural_bank(3);
        let gray = vec![0.5f32; IMAGE_PIXELS];
        // independent exhaustive oracle
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..100 {
            let img = bank.image_pixels(i).unwrap();
            let d: f64 = img
                .iter()
                .map(|&p| ((p - 0.5) as f64) * ((p - 0.5) as f64))
                .sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        assert_eq!(nearest_neighbor(&gray, &bank), best);
    }

    #[test]
    fn bank_self_consistency() {
        let bank = procedural_bank(11);
        for i in 0..100 {
            let img = bank.image_pixels(i).unwrap().to_vec();
            assert_eq!(nearest_neighbor(&img, &bank), i);
        }
    }

    #[test]
    fn image_bank_invariants_enforced() {
        // 99 images rejected
        let imgs: Vec<Vec<f32>> = (0..99).map(|_| vec![0.0; IMAGE_PIXELS]).collect();
        assert!(FillerBank::image(imgs).is_err());
        // identical pair rejected
        let imgs: Vec<Vec<f32>> = (0..100).map(|_| vec![0.5; IMAGE_PIXELS]).collect();
        assert!(FillerBank::image(imgs).is_err());
    }
}
