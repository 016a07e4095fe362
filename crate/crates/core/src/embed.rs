//! Joint text/image embedding providers (the CLIP role) and a deterministic mock.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;

/// Text and image encoders sharing one embedding space of dimension `dim()`.
///
/// Outputs are unit vectors. Text embeddings are `f32` because they are written
/// verbatim into LangMasks; image embeddings are `f64` because they feed losses
/// and metrics.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    fn text_embed(&self, text: &str) -> Result<Vec<f32>>;

    fn image_embed(&self, image: &Image) -> Result<Vec<f64>>;

    /// Pulls a gradient w.r.t. the image embedding back to the image.
    /// Providers that are not differentiable return `None`.
    fn image_embed_vjp(&self, _image: &Image, _grad: &[f64]) -> Option<Result<Image>> {
        None
    }
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for std::sync::Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn text_embed(&self, text: &str) -> Result<Vec<f32>> {
        (**self).text_embed(text)
    }
    fn image_embed(&self, image: &Image) -> Result<Vec<f64>> {
        (**self).image_embed(image)
    }
    fn image_embed_vjp(&self, image: &Image, grad: &[f64]) -> Option<Result<Image>> {
        (**self).image_embed_vjp(image, grad)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn seeded_rng(seed: u64, domain: &str, payload: &[u8]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(domain.as_bytes());
    hasher.update([0u8]);
    hasher.update(payload);
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; u1 in (0, 1].
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Hash-seeded text vectors and a random projection of grid-pooled colors for
/// images. Pure function of its inputs and seed.
#[derive(Clone, Debug)]
pub struct MockEmbedder {
    dim: usize,
    seed: u64,
    grid: usize,
    /// Row-major `dim × (3·grid² + 1)`; the last column multiplies a constant 1.
    projection: Vec<f64>,
}

impl MockEmbedder {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(dim: usize, seed: u64) -> Self {
        Self::with_grid(dim, seed, 4)
    }

    /// A second embedding space, standing in for a self-supervised image
    /// encoder in evaluation.
    pub fn dino_style(dim: usize, seed: u64) -> Self {
        Self::with_grid(dim, seed ^ 0xD1_70, 8)
    }

    pub fn with_grid(dim: usize, seed: u64, grid: usize) -> Self {
        assert!(dim > 0 && grid > 0);
        let cols = 3 * grid * grid + 1;
        let mut rng = seeded_rng(seed, "image-projection", &(grid as u64).to_le_bytes());
        let projection = (0..dim * cols).map(|_| gaussian(&mut rng)).collect();
        Self {
            dim,
            seed,
            grid,
            projection,
        }
    }

    fn cols(&self) -> usize {
        3 * self.grid * self.grid + 1
    }

    fn bin_of(&self, pos: usize, len: usize) -> usize {
        (pos * self.grid / len).min(self.grid - 1)
    }

    fn pooled(&self, image: &Image) -> (Vec<f64>, Vec<f64>) {
        let g = self.grid;
        let mut sums = vec![0.0; 3 * g * g];
        let mut counts = vec![0.0; g * g];
        for y in 0..image.height() {
            let by = self.bin_of(y, image.height());
            for x in 0..image.width() {
                let b = by * g + self.bin_of(x, image.width());
                counts[b] += 1.0;
                let px = image.pixel(x, y);
                for c in 0..3 {
                    sums[b * 3 + c] += px[c];
                }
            }
        }
        let mut feat: Vec<f64> = sums
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n = counts[i / 3];
                if n > 0.0 {
                    s / n
                } else {
                    0.0
                }
            })
            .collect();
        feat.push(1.0);
        (feat, counts)
    }

    fn project(&self, feat: &[f64]) -> Vec<f64> {
        let cols = self.cols();
        (0..self.dim)
            .map(|r| {
                self.projection[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(feat)
                    .map(|(p, f)| p * f)
                    .sum()
            })
            .collect()
    }
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM, 0)
    }
}

impl EmbeddingProvider for MockEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn text_embed(&self, text: &str) -> Result<Vec<f32>> {
        let mut rng = seeded_rng(self.seed, "text", text.as_bytes());
        let v: Vec<f64> = (0..self.dim).map(|_| gaussian(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(v.iter().map(|x| (x / norm) as f32).collect())
    }

    fn image_embed(&self, image: &Image) -> Result<Vec<f64>> {
        if image.is_empty() {
            return Err(Error::invalid("cannot embed an empty image"));
        }
        let (feat, _) = self.pooled(image);
        let z = self.project(&feat);
        let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(z.iter().map(|x| x / norm).collect())
    }

    fn image_embed_vjp(&self, image: &Image, grad: &[f64]) -> Option<Result<Image>> {
        if grad.len() != self.dim {
            return Some(Err(Error::Shape(format!(
                "embedding gradient has {} entries, expected {}",
                grad.len(),
                self.dim
            ))));
        }
        let (feat, counts) = self.pooled(image);
        let z = self.project(&feat);
        let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        let u: Vec<f64> = z.iter().map(|x| x / norm).collect();
        // d(z/|z|) = (I - u u^T) / |z|
        let ug: f64 = u.iter().zip(grad).map(|(a, b)| a * b).sum();
        let dz: Vec<f64> = grad.iter().zip(&u).map(|(g, ui)| (g - ug * ui) / norm).collect();
        let cols = self.cols();
        let mut dfeat = vec![0.0; cols];
        for (r, dzr) in dz.iter().enumerate() {
            for (c, d) in dfeat.iter_mut().enumerate() {
                *d += self.projection[r * cols + c] * dzr;
            }
        }
        let g = self.grid;
        let mut out = Image::new(image.width(), image.height());
        for y in 0..image.height() {
            let by = self.bin_of(y, image.height());
            for x in 0..image.width() {
                let b = by * g + self.bin_of(x, image.width());
                for c in 0..3 {
                    out.set(x, y, c, dfeat[b * 3 + c] / counts[b]);
                }
            }
        }
        Some(Ok(out))
    }
}
