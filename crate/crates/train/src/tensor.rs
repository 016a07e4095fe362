//! Channel-last feature maps and the convolution/pooling kernels the toy
//! networks need, each with its backward pass.

use drivedit_core::{Error, Image, LangMask, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major `(y, x, c)`.
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, v: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![v; width * height * channels],
        }
    }

    pub fn from_image(img: &Image) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            channels: 3,
            data: img.data().to_vec(),
        }
    }

    pub fn from_mask(mask: &LangMask) -> Self {
        Self {
            width: mask.width(),
            height: mask.height(),
            channels: mask.dim(),
            data: mask.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn into_image(self) -> Result<Image> {
        if self.channels != 3 {
            return Err(Error::Shape(format!("{} channels cannot form an image", self.channels)));
        }
        Image::from_vec(self.width, self.height, self.data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        (self.width, self.height, self.channels) == (other.width, other.height, other.channels)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }
}

/// Square convolution with zero padding and stride 1. Weights are laid out
/// `[ky][kx][in][out]`.
#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.k * self.k * self.cin * self.cout
    }
}

pub fn conv_forward(input: &Tensor, s: ConvShape, w: &[f64], bias: Option<&[f64]>) -> Tensor {
    debug_assert_eq!(input.channels, s.cin);
    debug_assert_eq!(w.len(), s.weight_len());
    let (wd, ht) = (input.width, input.height);
    let r = (s.k / 2) as i64;
    let mut out = Tensor::zeros(wd, ht, s.cout);
    for y in 0..ht {
        for x in 0..wd {
            let o = &mut out.data[(y * wd + x) * s.cout..][..s.cout];
            if let Some(b) = bias {
                o.copy_from_slice(b);
            }
            for ky in 0..s.k {
                let sy = y as i64 + ky as i64 - r;
                if sy < 0 || sy >= ht as i64 {
                    continue;
                }
                for kx in 0..s.k {
                    let sx = x as i64 + kx as i64 - r;
                    if sx < 0 || sx >= wd as i64 {
                        continue;
                    }
                    let inp = &input.data[(sy as usize * wd + sx as usize) * s.cin..][..s.cin];
                    let wk = &w[(ky * s.k + kx) * s.cin * s.cout..][..s.cin * s.cout];
                    for (i, &v) in inp.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let wr = &wk[i * s.cout..][..s.cout];
                        for (acc, &wv) in o.iter_mut().zip(wr) {
                            *acc += v * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients and returns the input gradient when
/// `want_input` is set.
pub fn conv_backward(
    input: &Tensor,
    s: ConvShape,
    w: &[f64],
    grad_out: &Tensor,
    grad_w: &mut [f64],
    grad_b: Option<&mut [f64]>,
    want_input: bool,
) -> Option<Tensor> {
    let (wd, ht) = (input.width, input.height);
    let r = (s.k / 2) as i64;
    let mut grad_in = want_input.then(|| Tensor::zeros(wd, ht, s.cin));
    if let Some(gb) = grad_b {
        for px in grad_out.data.chunks_exact(s.cout) {
            for (b, g) in gb.iter_mut().zip(px) {
                *b += g;
            }
        }
    }
    for y in 0..ht {
        for x in 0..wd {
            let g = &grad_out.data[(y * wd + x) * s.cout..][..s.cout];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ky in 0..s.k {
                let sy = y as i64 + ky as i64 - r;
                if sy < 0 || sy >= ht as i64 {
                    continue;
                }
                for kx in 0..s.k {
                    let sx = x as i64 + kx as i64 - r;
                    if sx < 0 || sx >= wd as i64 {
                        continue;
                    }
                    let base = (sy as usize * wd + sx as usize) * s.cin;
                    let off = (ky * s.k + kx) * s.cin * s.cout;
                    for i in 0..s.cin {
                        let v = input.data[base + i];
                        let wr = &w[off + i * s.cout..][..s.cout];
                        let gw = &mut grad_w[off + i * s.cout..][..s.cout];
                        let mut acc = 0.0;
                        for o in 0..s.cout {
                            gw[o] += v * g[o];
                            acc += wr[o] * g[o];
                        }
                        if let Some(gi) = grad_in.as_mut() {
                            gi.data[base + i] += acc;
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// 2×2 average pooling (odd trailing rows/columns dropped).
pub fn avg_pool2(input: &Tensor) -> Tensor {
    let (w, h, c) = (input.width / 2, input.height / 2, input.channels);
    let mut out = Tensor::zeros(w.max(1), h.max(1), c);
    if w == 0 || h == 0 {
        return out;
    }
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = 0.0;
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    s += input.data[((2 * y + dy) * input.width + 2 * x + dx) * c + ch];
                }
                out.data[(y * w + x) * c + ch] = s / 4.0;
            }
        }
    }
    out
}

pub fn avg_pool2_backward(input_shape: (usize, usize, usize), grad_out: &Tensor) -> Tensor {
    let (iw, ih, c) = input_shape;
    let mut g = Tensor::zeros(iw, ih, c);
    let (w, h) = (iw / 2, ih / 2);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = grad_out.data[(y * w + x) * c + ch] / 4.0;
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    g.data[((2 * y + dy) * iw + 2 * x + dx) * c + ch] += v;
                }
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Tensor {
        Tensor {
            width: w,
            height: h,
            channels: c,
            data: (0..w * h * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = ConvShape { k: 3, cin: 2, cout: 3 };
        let x = rand_tensor(&mut rng, 5, 4, 2);
        let w: Vec<f64> = (0..s.weight_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = [0.1, -0.2, 0.3];
        let y = conv_forward(&x, s, &w, Some(&b));
        let (px, py, o) = (0usize, 2usize, 1usize);
        let mut want = b[o];
        for ky in 0..3 {
            for kx in 0..3 {
                let (sx, sy) = (px as i64 + kx as i64 - 1, py as i64 + ky as i64 - 1);
                if sx < 0 || sy < 0 || sx >= 5 || sy >= 4 {
                    continue;
                }
                for i in 0..2 {
                    want += w[((ky * 3 + kx) * 2 + i) * 3 + o] * x.data[(sy as usize * 5 + sx as usize) * 2 + i];
                }
            }
        }
        assert!((y.data[(py * 5 + px) * 3 + o] - want).abs() < 1e-12);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = ConvShape { k: 3, cin: 2, cout: 2 };
        let x = rand_tensor(&mut rng, 4, 4, 2);
        let w: Vec<f64> = (0..s.weight_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let go = rand_tensor(&mut rng, 4, 4, 2);
        let loss = |x: &Tensor, w: &[f64]| -> f64 {
            conv_forward(x, s, w, None)
                .data
                .iter()
                .zip(&go.data)
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut gw = vec![0.0; w.len()];
        let gx = conv_backward(&x, s, &w, &go, &mut gw, None, true).unwrap();
        let h = 1e-6;
        for i in [0, 5, 17, 30] {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            assert!(((loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h) - gw[i]).abs() < 1e-7);
        }
        for i in [0, 9, 31] {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            assert!(((loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h) - gx.data[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn pooling_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, 6, 4, 2);
        let g = rand_tensor(&mut rng, 3, 2, 2);
        let lhs: f64 = avg_pool2(&x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let back = avg_pool2_backward((6, 4, 2), &g);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
