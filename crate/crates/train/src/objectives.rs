//! Training objectives: supervised reconstruction, identity, cycle
//! consistency and the CLIP direction term, with analytic gradients for
//! differentiable generators.
//!
//! All norms are means over elements, so weights do not depend on resolution.

use serde::{Deserialize, Serialize};

use drivedit_core::embed::cosine;
use drivedit_core::{EmbeddingProvider, Error, Image, LangMask, LossWeights, Result, TrainingSample};

use crate::tensor::Tensor;

/// `f_θ(x, t, M)`.
pub trait GeneratorContract {
    fn apply(&self, image: &Image, instruction: &str, mask: &LangMask) -> Result<Image>;
}

/// A generator that can replay its forward pass for gradients.
pub trait Differentiable: GeneratorContract {
    type Tape;

    fn num_params(&self) -> usize;

    fn forward(&self, image: &Image, instruction: &str, mask: &LangMask) -> Result<(Image, Self::Tape)>;

    /// Adds parameter gradients into `grad_params` and returns the gradient
    /// w.r.t. the input image.
    fn backward(&self, tape: &Self::Tape, grad_out: &Image, grad_params: &mut [f64]) -> Result<Image>;
}

/// Perceptual feature pyramid `φ`. Features need not be normalized; the
/// distance normalizes channels per pixel.
pub trait PerceptualExtractor: Send + Sync {
    fn features(&self, image: &Image) -> Result<Vec<Tensor>>;

    /// Gradient of `Σ ⟨grads_l, φ_l(image)⟩` w.r.t. the image.
    fn features_vjp(&self, _image: &Image, _grads: &[Tensor]) -> Option<Result<Image>> {
        None
    }
}

/// Image-independent features; the perceptual distance is always zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct ConstantExtractor;

impl PerceptualExtractor for ConstantExtractor {
    fn features(&self, _image: &Image) -> Result<Vec<Tensor>> {
        Ok(vec![Tensor::filled(1, 1, 4, 1.0)])
    }

    fn features_vjp(&self, image: &Image, _grads: &[Tensor]) -> Option<Result<Image>> {
        Some(Ok(Image::new(image.width(), image.height())))
    }
}

const NORM_EPS: f64 = 1e-10;

fn normalize_channels(t: &Tensor) -> (Tensor, Vec<f64>) {
    let mut out = t.clone();
    let mut norms = Vec::with_capacity(t.width * t.height);
    for px in out.data.chunks_exact_mut(t.channels.max(1)) {
        let n = (px.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
        for v in px.iter_mut() {
            *v /= n;
        }
        norms.push(n);
    }
    (out, norms)
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("images differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Sum over layers of the mean squared difference of channel-normalized features.
pub fn perceptual_distance(a: &Image, b: &Image, phi: &dyn PerceptualExtractor) -> Result<f64> {
    check_same(a, b)?;
    let (fa, fb) = (phi.features(a)?, phi.features(b)?);
    if fa.len() != fb.len() {
        return Err(Error::Shape("feature pyramids differ in depth".into()));
    }
    let mut total = 0.0;
    for (la, lb) in fa.iter().zip(&fb) {
        if !la.same_shape(lb) {
            return Err(Error::Shape("feature maps differ in shape".into()));
        }
        let (na, _) = normalize_channels(la);
        let (nb, _) = normalize_channels(lb);
        let n = na.len().max(1) as f64;
        total += na.data.iter().zip(&nb.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
    }
    Ok(total)
}

/// Perceptual distance and its gradient w.r.t. `a`.
pub fn perceptual_distance_grad(a: &Image, b: &Image, phi: &dyn PerceptualExtractor) -> Result<(f64, Image)> {
    check_same(a, b)?;
    let (fa, fb) = (phi.features(a)?, phi.features(b)?);
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(fa.len());
    for (la, lb) in fa.iter().zip(&fb) {
        let (na, norms) = normalize_channels(la);
        let (nb, _) = normalize_channels(lb);
        let n = na.len().max(1) as f64;
        total += na.data.iter().zip(&nb.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
        // d/dn = 2(n_a − n_b)/N, then through f/‖f‖: (g − n⟨n, g⟩)/‖f‖.
        let c = la.channels.max(1);
        let mut g = Tensor::zeros(la.width, la.height, la.channels);
        for (p, norm) in norms.iter().enumerate() {
            let sl = p * c..(p + 1) * c;
            let dn: Vec<f64> = na.data[sl.clone()]
                .iter()
                .zip(&nb.data[sl.clone()])
                .map(|(x, y)| 2.0 * (x - y) / n)
                .collect();
            let dot: f64 = dn.iter().zip(&na.data[sl.clone()]).map(|(d, v)| d * v).sum();
            for (k, i) in sl.enumerate() {
                g.data[i] = (dn[k] - na.data[i] * dot) / norm;
            }
        }
        grads.push(g);
    }
    let grad = phi
        .features_vjp(a, &grads)
        .ok_or_else(|| Error::backend("perceptual", "extractor is not differentiable"))??;
    Ok((total, grad))
}

fn mean_abs(a: &Image, b: &Image) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len().max(1) as f64
}

fn mean_abs_grad(a: &Image, b: &Image) -> Image {
    let n = a.data().len().max(1) as f64;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x - y;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Image::from_vec(a.width(), a.height(), data).expect("dims")
}

/// `w_l1·mean|a − b| + w_p·D_φ(a, b)` and its gradient w.r.t. `a`.
fn reconstruction(
    a: &Image,
    b: &Image,
    w_l1: f64,
    w_p: f64,
    phi: &dyn PerceptualExtractor,
    want_grad: bool,
) -> Result<(f64, Option<Image>)> {
    check_same(a, b)?;
    let mut value = 0.0;
    let mut grad = want_grad.then(|| Image::new(a.width(), a.height()));
    if w_l1 != 0.0 {
        value += w_l1 * mean_abs(a, b);
        if let Some(g) = grad.as_mut() {
            add_scaled(g, &mean_abs_grad(a, b), w_l1);
        }
    }
    if w_p != 0.0 {
        if let Some(g) = grad.as_mut() {
            let (d, dg) = perceptual_distance_grad(a, b, phi)?;
            value += w_p * d;
            add_scaled(g, &dg, w_p);
        } else {
            value += w_p * perceptual_distance(a, b, phi)?;
        }
    }
    Ok((value, grad))
}

fn add_scaled(acc: &mut Image, g: &Image, s: f64) {
    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += s * b;
    }
}

pub fn loss_sft(x_t: &Image, x_hat_t: &Image, phi: &dyn PerceptualExtractor, w: &LossWeights) -> Result<f64> {
    Ok(reconstruction(x_hat_t, x_t, w.sft, w.sft_lpips, phi, false)?.0)
}

fn require_blank(mask: &LangMask) -> Result<()> {
    if !mask.is_blank() {
        return Err(Error::invalid("identity objective needs a blank mask"));
    }
    Ok(())
}

pub fn loss_identity(
    x_s: &Image,
    f: &dyn GeneratorContract,
    t_s: &str,
    blank: &LangMask,
    phi: &dyn PerceptualExtractor,
    w: &LossWeights,
) -> Result<f64> {
    require_blank(blank)?;
    let y = f.apply(x_s, t_s, blank)?;
    Ok(reconstruction(&y, x_s, w.id, w.id_lpips, phi, false)?.0)
}

#[allow(clippy::too_many_arguments)]
pub fn loss_cycle(
    x_s: &Image,
    f: &dyn GeneratorContract,
    t_t: &str,
    t_s: &str,
    m_t: &LangMask,
    m_s: &LangMask,
    phi: &dyn PerceptualExtractor,
    w: &LossWeights,
) -> Result<f64> {
    let fwd = f.apply(x_s, t_t, m_t)?;
    let back = f.apply(&fwd, t_s, m_s)?;
    Ok(reconstruction(&back, x_s, w.cycle, w.cycle_lpips, phi, false)?.0)
}

fn text_vec(provider: &dyn EmbeddingProvider, text: &str) -> Result<Vec<f64>> {
    Ok(provider.text_embed(text)?.into_iter().map(f64::from).collect())
}

/// `∂cos(u, v)/∂u`.
fn cosine_grad(u: &[f64], v: &[f64]) -> Vec<f64> {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return vec![0.0; u.len()];
    }
    let c = cosine(u, v);
    u.iter()
        .zip(v)
        .map(|(ui, vi)| vi / (nu * nv) - c * ui / (nu * nu))
        .collect()
}

fn clip_terms(
    x_hat_b: &Image,
    t_b: &str,
    t_a: &str,
    provider: &dyn EmbeddingProvider,
    w: &LossWeights,
    want_grad: bool,
) -> Result<(f64, Option<Image>)> {
    let u = provider.image_embed(x_hat_b)?;
    let (vb, va) = (text_vec(provider, t_b)?, text_vec(provider, t_a)?);
    if u.len() != vb.len() || u.len() != va.len() {
        return Err(Error::Shape(format!(
            "image embedding has {} dims, text embeddings {} and {}",
            u.len(),
            vb.len(),
            va.len()
        )));
    }
    let value = w.clip * (1.0 - cosine(&u, &vb)) + w.clip * cosine(&u, &va);
    if !want_grad {
        return Ok((value, None));
    }
    let gb = cosine_grad(&u, &vb);
    let ga = cosine_grad(&u, &va);
    let du: Vec<f64> = gb.iter().zip(&ga).map(|(b, a)| w.clip * (a - b)).collect();
    let grad = provider
        .image_embed_vjp(x_hat_b, &du)
        .ok_or_else(|| Error::backend("embedding", "image encoder is not differentiable"))??;
    Ok((value, Some(grad)))
}

/// `w·(1 − cos(I(x̂_b), T(t_b))) + w·cos(I(x̂_b), T(t_a))`: pull the output
/// toward the target text and away from the source text.
pub fn loss_clip(
    x_hat_b: &Image,
    t_b: &str,
    t_a: &str,
    provider: &dyn EmbeddingProvider,
    w: &LossWeights,
) -> Result<f64> {
    Ok(clip_terms(x_hat_b, t_b, t_a, provider, w, false)?.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sft: f64,
    pub identity: f64,
    pub cycle: f64,
    pub clip: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn finish(mut self) -> Self {
        self.total = self.sft + self.identity + self.cycle + self.clip;
        self
    }

    pub fn is_finite(&self) -> bool {
        [self.sft, self.identity, self.cycle, self.clip, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn active(a: f64, b: f64) -> bool {
    a != 0.0 || b != 0.0
}

/// Backends the objectives consult.
#[derive(Clone, Copy)]
pub struct LossBackends<'a> {
    pub phi: &'a dyn PerceptualExtractor,
    pub provider: &'a dyn EmbeddingProvider,
}

/// All four terms for one sample. Terms whose weights are both zero are
/// skipped without calling the generator or any backend.
pub fn loss_total(
    sample: &TrainingSample,
    f: &dyn GeneratorContract,
    b: LossBackends<'_>,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let mut out = LossBreakdown::default();
    let need_fwd = active(w.sft, w.sft_lpips) || active(w.cycle, w.cycle_lpips) || w.clip != 0.0;
    if need_fwd {
        let x_hat_t = f.apply(&sample.source_image, &sample.forward_instruction, &sample.forward_mask)?;
        if active(w.sft, w.sft_lpips) {
            out.sft = loss_sft(&sample.target_image, &x_hat_t, b.phi, w)?;
        }
        if w.clip != 0.0 {
            out.clip = loss_clip(
                &x_hat_t,
                &sample.forward_instruction,
                &sample.backward_instruction,
                b.provider,
                w,
            )?;
        }
        if active(w.cycle, w.cycle_lpips) {
            let back = f.apply(&x_hat_t, &sample.backward_instruction, &sample.backward_mask)?;
            out.cycle = reconstruction(&back, &sample.source_image, w.cycle, w.cycle_lpips, b.phi, false)?.0;
        }
    }
    if active(w.id, w.id_lpips) {
        let blank = LangMask::blank(
            sample.source_image.width(),
            sample.source_image.height(),
            sample.forward_mask.dim(),
        );
        out.identity = loss_identity(&sample.source_image, f, &sample.backward_instruction, &blank, b.phi, w)?;
    }
    Ok(out.finish())
}

/// Loss breakdown plus the gradient of the total w.r.t. the generator's
/// parameters, accumulated into `grad`.
pub fn loss_total_grad<G: Differentiable>(
    sample: &TrainingSample,
    f: &G,
    b: LossBackends<'_>,
    w: &LossWeights,
    grad: &mut [f64],
) -> Result<LossBreakdown> {
    if grad.len() != f.num_params() {
        return Err(Error::Shape("gradient buffer does not match parameter count".into()));
    }
    let mut out = LossBreakdown::default();
    let x_s = &sample.source_image;
    let need_fwd = active(w.sft, w.sft_lpips) || active(w.cycle, w.cycle_lpips) || w.clip != 0.0;
    if need_fwd {
        let (x_hat_t, tape_t) = f.forward(x_s, &sample.forward_instruction, &sample.forward_mask)?;
        let mut g_hat_t = Image::new(x_hat_t.width(), x_hat_t.height());
        if active(w.sft, w.sft_lpips) {
            let (v, g) = reconstruction(&x_hat_t, &sample.target_image, w.sft, w.sft_lpips, b.phi, true)?;
            out.sft = v;
            add_scaled(&mut g_hat_t, &g.expect("grad"), 1.0);
        }
        if w.clip != 0.0 {
            let (v, g) = clip_terms(
                &x_hat_t,
                &sample.forward_instruction,
                &sample.backward_instruction,
                b.provider,
                w,
                true,
            )?;
            out.clip = v;
            add_scaled(&mut g_hat_t, &g.expect("grad"), 1.0);
        }
        if active(w.cycle, w.cycle_lpips) {
            let (back, tape_s) = f.forward(&x_hat_t, &sample.backward_instruction, &sample.backward_mask)?;
            let (v, g) = reconstruction(&back, x_s, w.cycle, w.cycle_lpips, b.phi, true)?;
            out.cycle = v;
            let through = f.backward(&tape_s, &g.expect("grad"), grad)?;
            add_scaled(&mut g_hat_t, &through, 1.0);
        }
        f.backward(&tape_t, &g_hat_t, grad)?;
    }
    if active(w.id, w.id_lpips) {
        let blank = LangMask::blank(x_s.width(), x_s.height(), sample.forward_mask.dim());
        let (y, tape) = f.forward(x_s, &sample.backward_instruction, &blank)?;
        let (v, g) = reconstruction(&y, x_s, w.id, w.id_lpips, b.phi, true)?;
        out.identity = v;
        f.backward(&tape, &g.expect("grad"), grad)?;
    }
    Ok(out.finish())
}
