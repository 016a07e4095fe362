//! Canny edge maps and windowed SSIM, used by the structural QC gates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Plane};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeParams {
    pub sigma: f64,
    /// Hysteresis thresholds as fractions of the maximum gradient magnitude.
    pub low: f64,
    pub high: f64,
}

impl Default for EdgeParams {
    fn default() -> Self {
        Self {
            sigma: 1.4,
            low: 0.1,
            high: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    /// Gaussian window standard deviation.
    pub sigma: f64,
    /// Window radius; the window is `2r+1` square.
    pub radius: usize,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            sigma: 1.5,
            radius: 3,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as i64;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let mut i = i;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

fn blur(p: &Plane, sigma: f64) -> Plane {
    if sigma <= 0.0 {
        return p.clone();
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let k = gaussian_kernel(sigma, radius);
    let (w, h) = (p.width(), p.height());
    let r = radius as i64;
    let tmp = Plane::from_fn(w, h, |x, y| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * p.get(reflect(x as i64 + i as i64 - r, w), y))
            .sum()
    });
    Plane::from_fn(w, h, |x, y| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * tmp.get(x, reflect(y as i64 + i as i64 - r, h)))
            .sum()
    })
}

/// Binary Canny edge map of the image's luma (1.0 on edges).
pub fn canny(image: &Image, params: &EdgeParams) -> Plane {
    let g = blur(&image.to_gray(), params.sigma);
    let (w, h) = (g.width(), g.height());
    let at = |x: i64, y: i64| g.get(reflect(x, w), reflect(y, h));
    let mut mag = vec![0.0; w * h];
    let mut dir = vec![0u8; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            let i = y as usize * w + x as usize;
            mag[i] = gx.hypot(gy);
            // Quantized gradient direction: 0 = horizontal, 1 = 45°, 2 = vertical, 3 = 135°.
            let mut angle = gy.atan2(gx).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            dir[i] = if !(22.5..157.5).contains(&angle) {
                0
            } else if angle < 67.5 {
                1
            } else if angle < 112.5 {
                2
            } else {
                3
            };
        }
    }
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max <= 1e-12 {
        return Plane::new(w, h);
    }
    let get = |x: i64, y: i64| {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = y as usize * w + x as usize;
            let (dx, dy) = match dir[i] {
                0 => (1, 0),
                1 => (1, 1),
                2 => (0, 1),
                _ => (-1, 1),
            };
            let m = mag[i];
            if m >= get(x + dx, y + dy) && m >= get(x - dx, y - dy) {
                thin[i] = m;
            }
        }
    }
    let (lo, hi) = (params.low * max, params.high * max);
    let mut edge = vec![false; w * h];
    let mut stack: Vec<usize> = (0..w * h).filter(|&i| thin[i] >= hi).collect();
    for &i in &stack {
        edge[i] = true;
    }
    while let Some(i) = stack.pop() {
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edge[j] && thin[j] >= lo {
                    edge[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    Plane::from_vec(w, h, edge.into_iter().map(|e| if e { 1.0 } else { 0.0 }).collect()).expect("dims match")
}

/// Mean SSIM over all window positions fully inside both planes.
pub fn ssim(a: &Plane, b: &Plane, params: &SsimParams) -> Result<f64> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::Shape("ssim inputs differ in size".into()));
    }
    let (w, h) = (a.width(), a.height());
    let r = params.radius.min((w.min(h).saturating_sub(1)) / 2);
    let k1d = gaussian_kernel(params.sigma, r);
    let c1 = (params.k1 * params.data_range).powi(2);
    let c2 = (params.k2 * params.data_range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for cy in r..h - r {
        for cx in r..w - r {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (j, ky) in k1d.iter().enumerate() {
                for (i, kx) in k1d.iter().enumerate() {
                    let wgt = kx * ky;
                    let (x, y) = (cx + i - r, cy + j - r);
                    let (va, vb) = (a.get(x, y), b.get(x, y));
                    ma += wgt * va;
                    mb += wgt * vb;
                    saa += wgt * va * va;
                    sbb += wgt * vb * vb;
                    sab += wgt * va * vb;
                }
            }
            let va = (saa - ma * ma).max(0.0);
            let vb = (sbb - mb * mb).max(0.0);
            let cov = sab - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += s;
            count += 1;
        }
    }
    Ok((total / count.max(1) as f64).clamp(-1.0, 1.0))
}

/// SSIM between the Canny edge maps of two equally sized crops (≥ 8×8).
pub fn edge_ssim(a: &Image, b: &Image, edge: &EdgeParams, params: &SsimParams) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "crop dims differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    if a.width() < 8 || a.height() < 8 {
        return Err(Error::Shape(format!("crop {:?} smaller than 8x8", a.dims())));
    }
    let (ea, eb) = (canny(a, edge), canny(b, edge));
    if ea == eb {
        return Ok(1.0);
    }
    ssim(&ea, &eb, params)
}
