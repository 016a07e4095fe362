//! A small fixed-weight convolutional feature pyramid standing in for a
//! pretrained perceptual network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use drivedit_core::{Error, Image, Result};

use crate::objectives::PerceptualExtractor;
use crate::tensor::{avg_pool2, avg_pool2_backward, conv_backward, conv_forward, ConvShape, Tensor};

/// conv3×3 → tanh, then 2×2 pool → conv3×3 → tanh. Both activations are
/// reported as feature layers.
#[derive(Clone, Debug)]
pub struct ToyPerceptual {
    s1: ConvShape,
    s2: ConvShape,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl ToyPerceptual {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f1a7);
        let s1 = ConvShape { k: 3, cin: 3, cout: 8 };
        let s2 = ConvShape { k: 3, cin: 8, cout: 8 };
        let mut init = |n: usize, fan_in: usize| -> Vec<f64> {
            let a = (3.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-a..a)).collect()
        };
        let w1 = init(s1.weight_len(), 27);
        let b1 = init(8, 27);
        let w2 = init(s2.weight_len(), 72);
        let b2 = init(8, 72);
        Self { s1, s2, w1, b1, w2, b2 }
    }

    fn run(&self, image: &Image) -> (Tensor, Tensor, Tensor, Tensor) {
        let x = Tensor::from_image(image);
        let h1 = conv_forward(&x, self.s1, &self.w1, Some(&self.b1)).map(f64::tanh);
        let p = avg_pool2(&h1);
        let h2 = conv_forward(&p, self.s2, &self.w2, Some(&self.b2)).map(f64::tanh);
        (x, h1, p, h2)
    }
}

impl Default for ToyPerceptual {
    fn default() -> Self {
        Self::new(0)
    }
}

impl PerceptualExtractor for ToyPerceptual {
    fn features(&self, image: &Image) -> Result<Vec<Tensor>> {
        let (_, h1, _, h2) = self.run(image);
        Ok(vec![h1, h2])
    }

    fn features_vjp(&self, image: &Image, grads: &[Tensor]) -> Option<Result<Image>> {
        if grads.len() != 2 {
            return Some(Err(Error::Shape("expected gradients for two feature layers".into())));
        }
        let (x, h1, p, h2) = self.run(image);
        if !grads[0].same_shape(&h1) || !grads[1].same_shape(&h2) {
            return Some(Err(Error::Shape("feature gradient shape mismatch".into())));
        }
        let mut scratch_w = vec![0.0; self.w2.len()];
        let da2 = Tensor {
            data: grads[1]
                .data
                .iter()
                .zip(&h2.data)
                .map(|(g, h)| g * (1.0 - h * h))
                .collect(),
            ..grads[1].clone()
        };
        let dp = conv_backward(&p, self.s2, &self.w2, &da2, &mut scratch_w, None, true).expect("input grad");
        let mut dh1 = avg_pool2_backward((h1.width, h1.height, h1.channels), &dp);
        for (d, g) in dh1.data.iter_mut().zip(&grads[0].data) {
            *d += g;
        }
        let da1 = Tensor {
            data: dh1.data.iter().zip(&h1.data).map(|(g, h)| g * (1.0 - h * h)).collect(),
            ..dh1
        };
        let mut scratch_w1 = vec![0.0; self.w1.len()];
        let dx = conv_backward(&x, self.s1, &self.w1, &da1, &mut scratch_w1, None, true).expect("input grad");
        Some(dx.into_image())
    }
}
