//! Two-layer convolutional generator conditioned on the instruction embedding
//! and the LangMask channels.
//!
//! `a = conv3(x; W1) + conv1(M; Wm) + Wt·T(t) + b1`, `h = tanh(a)`,
//! `g = σ(wg·M + wtg·T(t) + bg)`, `y = x + g ⊙ (conv3(h; W2) + b2)`.
//!
//! The mask weights `Wm`, `wg` and the output weights `W2`, `b2` start at
//! zero, so an untrained model is the identity and ignores the mask entirely.

use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use drivedit_core::{EmbeddingProvider, Error, Image, LangMask, Result};

use crate::objectives::{Differentiable, GeneratorContract};
use crate::tensor::{conv_backward, conv_forward, ConvShape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyShape {
    pub hidden: usize,
    /// Text embedding and LangMask channel count.
    pub embed_dim: usize,
}

impl ToyShape {
    fn c1(&self) -> ConvShape {
        ConvShape {
            k: 3,
            cin: 3,
            cout: self.hidden,
        }
    }

    fn cm(&self) -> ConvShape {
        ConvShape {
            k: 1,
            cin: self.embed_dim,
            cout: self.hidden,
        }
    }

    fn c2(&self) -> ConvShape {
        ConvShape {
            k: 3,
            cin: self.hidden,
            cout: 3,
        }
    }

    /// Named parameter blocks in storage order.
    pub fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (h, d) = (self.hidden, self.embed_dim);
        vec![
            ("w1", vec![3, 3, 3, h]),
            ("b1", vec![h]),
            ("wm", vec![1, 1, d, h]),
            ("wt", vec![d, h]),
            ("w2", vec![3, 3, h, 3]),
            ("b2", vec![3]),
            ("wg", vec![d]),
            ("wtg", vec![d]),
            ("bg", vec![1]),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    fn ranges(&self) -> [Range<usize>; 9] {
        let mut start = 0;
        let mut out: [Range<usize>; 9] = Default::default();
        for (i, (_, s)) in self.layout().iter().enumerate() {
            let n: usize = s.iter().product();
            out[i] = start..start + n;
            start += n;
        }
        out
    }
}

pub const MAX_PARAMS: usize = 100_000;
const GATE_BIAS_INIT: f64 = -3.0;

#[derive(Clone)]
pub struct ToyGenerator {
    shape: ToyShape,
    params: Vec<f64>,
    text: Arc<dyn EmbeddingProvider>,
}

impl std::fmt::Debug for ToyGenerator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyGenerator")
            .field("shape", &self.shape)
            .field("params", &self.params.len())
            .finish()
    }
}

pub struct Tape {
    x: Tensor,
    m: Tensor,
    e: Vec<f64>,
    h: Tensor,
    /// Pre-gate residual and per-pixel gate.
    u: Tensor,
    gate: Vec<f64>,
}

impl ToyGenerator {
    /// Seeded initialization; the mask and output weights are zero.
    pub fn new(shape: ToyShape, seed: u64, text: Arc<dyn EmbeddingProvider>) -> Result<Self> {
        if shape.num_params() > MAX_PARAMS {
            return Err(Error::invalid(format!(
                "{} parameters exceed the {MAX_PARAMS} budget",
                shape.num_params()
            )));
        }
        if text.dim() != shape.embed_dim {
            return Err(Error::Shape(format!(
                "text encoder has {} dims, generator expects {}",
                text.dim(),
                shape.embed_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; shape.num_params()];
        let r = shape.ranges();
        let a1 = (3.0 / 27.0f64).sqrt();
        for p in &mut params[r[0].clone()] {
            *p = rng.gen_range(-a1..a1);
        }
        let at = (3.0 / shape.embed_dim as f64).sqrt();
        for p in &mut params[r[3].clone()] {
            *p = rng.gen_range(-at..at);
        }
        for p in &mut params[r[7].clone()] {
            *p = rng.gen_range(-at..at);
        }
        // Start with the gate mostly shut: edits are the exception.
        params[r[8].start] = GATE_BIAS_INIT;
        Ok(Self { shape, params, text })
    }

    pub fn with_params(mut self, params: Vec<f64>) -> Result<Self> {
        if params.len() != self.shape.num_params() {
            return Err(Error::Shape(format!(
                "{} parameters given, {} expected",
                params.len(),
                self.shape.num_params()
            )));
        }
        self.params = params;
        Ok(self)
    }

    pub fn shape(&self) -> ToyShape {
        self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn text_encoder(&self) -> &Arc<dyn EmbeddingProvider> {
        &self.text
    }

    fn check(&self, image: &Image, mask: &LangMask) -> Result<()> {
        if (mask.width(), mask.height()) != image.dims() {
            return Err(Error::Shape("mask and image dims differ".into()));
        }
        if mask.dim() != self.shape.embed_dim {
            return Err(Error::Shape(format!(
                "mask has {} channels, generator expects {}",
                mask.dim(),
                self.shape.embed_dim
            )));
        }
        Ok(())
    }

    fn run(&self, image: &Image, instruction: &str, mask: &LangMask) -> Result<(Image, Tape)> {
        self.check(image, mask)?;
        let s = self.shape;
        let r = s.ranges();
        let p = &self.params;
        let x = Tensor::from_image(image);
        let m = Tensor::from_mask(mask);
        let e: Vec<f64> = self.text.text_embed(instruction)?.into_iter().map(f64::from).collect();

        let mut bias = p[r[1].clone()].to_vec();
        let wt = &p[r[3].clone()];
        for (d, ev) in e.iter().enumerate() {
            for (j, b) in bias.iter_mut().enumerate() {
                *b += ev * wt[d * s.hidden + j];
            }
        }
        let mut a = conv_forward(&x, s.c1(), &p[r[0].clone()], Some(&bias));
        let am = conv_forward(&m, s.cm(), &p[r[2].clone()], None);
        for (v, w) in a.data.iter_mut().zip(&am.data) {
            *v += w;
        }
        let h = a.map(f64::tanh);
        let u = conv_forward(&h, s.c2(), &p[r[4].clone()], Some(&p[r[5].clone()]));
        let (wg, wtg, bg) = (&p[r[6].clone()], &p[r[7].clone()], p[r[8].start]);
        let text_gate: f64 = bg + wtg.iter().zip(&e).map(|(w, v)| w * v).sum::<f64>();
        let gate: Vec<f64> = m
            .data
            .chunks_exact(s.embed_dim)
            .map(|mp| {
                let z = text_gate + wg.iter().zip(mp).map(|(w, v)| w * v).sum::<f64>();
                1.0 / (1.0 + (-z).exp())
            })
            .collect();
        let mut y = x.clone();
        for (i, (yp, up)) in y.data.chunks_exact_mut(3).zip(u.data.chunks_exact(3)).enumerate() {
            for c in 0..3 {
                yp[c] += gate[i] * up[c];
            }
        }
        let out = y.into_image()?;
        if out.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("generator produced non-finite output"));
        }
        Ok((out, Tape { x, m, e, h, u, gate }))
    }
}

impl GeneratorContract for ToyGenerator {
    fn apply(&self, image: &Image, instruction: &str, mask: &LangMask) -> Result<Image> {
        Ok(self.run(image, instruction, mask)?.0)
    }
}

impl Differentiable for ToyGenerator {
    type Tape = Tape;

    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn forward(&self, image: &Image, instruction: &str, mask: &LangMask) -> Result<(Image, Tape)> {
        self.run(image, instruction, mask)
    }

    fn backward(&self, tape: &Tape, grad_out: &Image, grad: &mut [f64]) -> Result<Image> {
        let s = self.shape;
        let r = s.ranges();
        let p = &self.params;
        let gy = Tensor::from_image(grad_out);
        if !gy.same_shape(&tape.x) {
            return Err(Error::Shape("output gradient dims differ".into()));
        }
        let (g1, rest) = grad.split_at_mut(r[1].start);
        let (gb1, rest) = rest.split_at_mut(r[1].len());
        let (gm, rest) = rest.split_at_mut(r[2].len());
        let (gt, rest) = rest.split_at_mut(r[3].len());
        let (g2, rest) = rest.split_at_mut(r[4].len());
        let (gb2, rest) = rest.split_at_mut(r[5].len());
        let (gwg, rest) = rest.split_at_mut(r[6].len());
        let (gwtg, gbg) = rest.split_at_mut(r[7].len());

        let mut gu = gy.clone();
        let mut gz_text = 0.0;
        for (i, (gup, up)) in gu.data.chunks_exact_mut(3).zip(tape.u.data.chunks_exact(3)).enumerate() {
            let g = tape.gate[i];
            let mut dg = 0.0;
            for c in 0..3 {
                dg += gup[c] * up[c];
                gup[c] *= g;
            }
            let dz = dg * g * (1.0 - g);
            if dz != 0.0 {
                let mp = &tape.m.data[i * s.embed_dim..(i + 1) * s.embed_dim];
                for (w, v) in gwg.iter_mut().zip(mp) {
                    *w += dz * v;
                }
                gz_text += dz;
            }
        }
        for (w, v) in gwtg.iter_mut().zip(&tape.e) {
            *w += gz_text * v;
        }
        gbg[0] += gz_text;

        let gh = conv_backward(&tape.h, s.c2(), &p[r[4].clone()], &gu, g2, Some(gb2), true).expect("input grad");
        let ga = Tensor {
            data: gh
                .data
                .iter()
                .zip(&tape.h.data)
                .map(|(g, h)| g * (1.0 - h * h))
                .collect(),
            ..gh
        };
        let mut gx = conv_backward(&tape.x, s.c1(), &p[r[0].clone()], &ga, g1, None, true).expect("input grad");
        conv_backward(&tape.m, s.cm(), &p[r[2].clone()], &ga, gm, None, false);
        let mut gbias = vec![0.0; s.hidden];
        for px in ga.data.chunks_exact(s.hidden) {
            for (b, g) in gbias.iter_mut().zip(px) {
                *b += g;
            }
        }
        for (b, g) in gb1.iter_mut().zip(&gbias) {
            *b += g;
        }
        for (d, ev) in tape.e.iter().enumerate() {
            for (j, g) in gbias.iter().enumerate() {
                gt[d * s.hidden + j] += ev * g;
            }
        }
        for (v, g) in gx.data.iter_mut().zip(&gy.data) {
            *v += g;
        }
        gx.into_image()
    }
}
