//! Gradient-domain (Poisson) blending with Dirichlet boundary values.
//!
//! Inside the region the output's 4-neighbor Laplacian matches the source's;
//! pixels outside the region are copied from the target unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::langmask::BinaryMask;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoissonConfig {
    /// Jacobi relaxation weight in (0, 1].
    pub damping: f64,
    /// Stop once the max-norm residual drops below this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PoissonConfig {
    fn default() -> Self {
        Self {
            damping: 0.8,
            tolerance: 1e-4,
            max_iterations: 10_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlendOutcome {
    pub image: Image,
    pub iterations: usize,
    /// Max over region pixels and channels of `|Δout − Δsrc|`.
    pub max_residual: f64,
}

enum Neighbor {
    Unknown(usize),
    Fixed(usize),
}

/// Blends `source` into `target` over `region` (all three full-frame and
/// aligned). Regions touching the image border are rejected since their
/// boundary is undefined; failing to reach the tolerance is also a rejection.
pub fn poisson_blend(target: &Image, source: &Image, region: &BinaryMask, cfg: &PoissonConfig) -> Result<BlendOutcome> {
    let (w, h) = target.dims();
    if source.dims() != (w, h) || (region.width, region.height) != (w, h) {
        return Err(Error::Shape("blend target, source and region must share dims".into()));
    }
    if !(cfg.damping > 0.0 && cfg.damping <= 1.0) {
        return Err(Error::invalid("damping must be in (0, 1]"));
    }

    let mut index = vec![usize::MAX; w * h];
    let mut pixels = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if region.get(x, y) {
                if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                    return Err(Error::Blend(format!("region touches the image border at ({x}, {y})")));
                }
                index[y * w + x] = pixels.len();
                pixels.push((x, y));
            }
        }
    }
    if pixels.is_empty() {
        return Ok(BlendOutcome {
            image: target.clone(),
            iterations: 0,
            max_residual: 0.0,
        });
    }

    let n = pixels.len();
    let mut neighbors: Vec<[Neighbor; 4]> = Vec::with_capacity(n);
    // Per unknown and channel: Laplacian of the source plus fixed boundary values.
    let mut rhs = vec![0.0; n * 3];
    for (i, &(x, y)) in pixels.iter().enumerate() {
        let around = [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)];
        let nb = around.map(|(nx, ny)| {
            let j = ny * w + nx;
            if index[j] != usize::MAX {
                Neighbor::Unknown(index[j])
            } else {
                Neighbor::Fixed(j)
            }
        });
        for c in 0..3 {
            let s = source.get(x, y, c);
            let mut r = 0.0;
            for (k, &(nx, ny)) in around.iter().enumerate() {
                r += s - source.get(nx, ny, c);
                if let Neighbor::Fixed(_) = nb[k] {
                    r += target.get(nx, ny, c);
                }
            }
            rhs[i * 3 + c] = r;
        }
        neighbors.push(nb);
    }

    // Initial guess: source shifted by the mean boundary offset.
    let mut offset = [0.0; 3];
    let mut boundary = 0usize;
    for nb in &neighbors {
        for b in nb {
            if let Neighbor::Fixed(j) = b {
                let (bx, by) = (j % w, j / w);
                for (c, o) in offset.iter_mut().enumerate() {
                    *o += target.get(bx, by, c) - source.get(bx, by, c);
                }
                boundary += 1;
            }
        }
    }
    let offset = offset.map(|o| o / boundary.max(1) as f64);
    let mut cur: Vec<f64> = pixels
        .iter()
        .flat_map(|&(x, y)| (0..3).map(move |c| (x, y, c)))
        .map(|(x, y, c)| source.get(x, y, c) + offset[c])
        .collect();
    let mut next = cur.clone();

    let residual = |vals: &[f64]| -> f64 {
        let mut worst: f64 = 0.0;
        for (i, nb) in neighbors.iter().enumerate() {
            for c in 0..3 {
                let mut sum = 0.0;
                for b in nb {
                    if let Neighbor::Unknown(j) = b {
                        sum += vals[j * 3 + c];
                    }
                }
                worst = worst.max((4.0 * vals[i * 3 + c] - sum - rhs[i * 3 + c]).abs());
            }
        }
        worst
    };

    let omega = cfg.damping;
    let mut iterations = 0;
    let mut res = residual(&cur);
    while res >= cfg.tolerance && iterations < cfg.max_iterations {
        for (i, nb) in neighbors.iter().enumerate() {
            for c in 0..3 {
                let mut sum = rhs[i * 3 + c];
                for b in nb {
                    if let Neighbor::Unknown(j) = b {
                        sum += cur[j * 3 + c];
                    }
                }
                next[i * 3 + c] = (1.0 - omega) * cur[i * 3 + c] + omega * sum / 4.0;
            }
        }
        std::mem::swap(&mut cur, &mut next);
        iterations += 1;
        res = residual(&cur);
    }
    if res >= cfg.tolerance {
        return Err(Error::Blend(format!(
            "no convergence after {iterations} iterations (residual {res:.3e})"
        )));
    }

    let mut image = target.clone();
    for (i, &(x, y)) in pixels.iter().enumerate() {
        for c in 0..3 {
            image.set(x, y, c, cur[i * 3 + c]);
        }
    }
    Ok(BlendOutcome {
        image,
        iterations,
        max_residual: res,
    })
}

/// Max over region pixels of `|Δout − Δsrc|` using the 4-neighbor stencil.
pub fn laplacian_residual(out: &Image, source: &Image, region: &BinaryMask) -> f64 {
    let mut worst: f64 = 0.0;
    for y in 1..out.height().saturating_sub(1) {
        for x in 1..out.width().saturating_sub(1) {
            if !region.get(x, y) {
                continue;
            }
            for c in 0..3 {
                let lap = |img: &Image| {
                    4.0 * img.get(x, y, c)
                        - img.get(x - 1, y, c)
                        - img.get(x + 1, y, c)
                        - img.get(x, y - 1, c)
                        - img.get(x, y + 1, c)
                };
                worst = worst.max((lap(out) - lap(source)).abs());
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::BBox;

    #[test]
    fn empty_region_is_identity() {
        let t = Image::from_fn(6, 5, |x, y| [x as f64 * 0.1, y as f64 * 0.1, 0.3]);
        let s = Image::filled(6, 5, [0.9, 0.9, 0.9]);
        let out = poisson_blend(&t, &s, &BinaryMask::new(6, 5), &PoissonConfig::default()).unwrap();
        assert_eq!(out.image, t);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn source_equal_to_target_reproduces_target() {
        let t = Image::from_fn(9, 9, |x, y| [(x * y) as f64 / 64.0, 0.5, (x + y) as f64 / 16.0]);
        let region = BinaryMask::from_boxes(9, 9, [&BBox::new(2, 2, 7, 7)]);
        let out = poisson_blend(&t, &t, &region, &PoissonConfig::default()).unwrap();
        assert!(out.image.linf_distance(&t) < 1e-6);
    }

    #[test]
    fn border_region_rejected() {
        let t = Image::new(5, 5);
        let region = BinaryMask::from_boxes(5, 5, [&BBox::new(0, 1, 2, 3)]);
        assert!(matches!(
            poisson_blend(&t, &t, &region, &PoissonConfig::default()),
            Err(Error::Blend(_))
        ));
    }

    #[test]
    fn outside_region_bit_exact() {
        let t = Image::from_fn(12, 10, |x, y| [x as f64 / 12.0, y as f64 / 10.0, 0.2]);
        let s = Image::from_fn(12, 10, |x, _| [0.8, 0.1, x as f64 / 20.0]);
        let region = BinaryMask::from_boxes(12, 10, [&BBox::new(3, 2, 9, 8)]);
        let out = poisson_blend(&t, &s, &region, &PoissonConfig::default()).unwrap();
        for y in 0..10 {
            for x in 0..12 {
                if !region.get(x, y) {
                    assert_eq!(out.image.pixel(x, y), t.pixel(x, y));
                }
            }
        }
        assert!(laplacian_residual(&out.image, &s, &region) < 1e-3);
    }
}
