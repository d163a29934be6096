//! Synthetic image classification data.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub class_count: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Std of the additive pixel noise.
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            class_count: 8,
            samples_per_class: 64,
            image_size: 64,
            seed: 0,
            noise: 0.1,
        }
    }
}

/// Balanced set of `[3, S, S]` images in `[0, 1]`. Class `c` is a Gaussian
/// blob at its own position and colour; samples jitter the position and
/// width and add pixel noise.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    images: Vec<f32>,
    labels: Vec<usize>,
}

impl SyntheticDataset {
    pub fn generate(config: SyntheticConfig) -> Result<Self> {
        if config.class_count == 0 || config.samples_per_class == 0 || config.image_size == 0 {
            return Err(Error::InvalidArgument(
                "class count, samples per class and image size must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let s = config.image_size;
        let sf = s as f64;
        let noise = Normal::new(0.0, config.noise.max(0.0)).expect("finite std");
        let n = config.class_count * config.samples_per_class;
        let mut images = Vec::with_capacity(n * 3 * s * s);
        let mut labels = Vec::with_capacity(n);
        let prototypes: Vec<([f64; 2], [f64; 3])> = (0..config.class_count)
            .map(|c| {
                let angle = 2.0 * std::f64::consts::PI * c as f64 / config.class_count as f64;
                let center = [0.5 + 0.28 * angle.cos(), 0.5 + 0.28 * angle.sin()];
                let colour = [
                    0.5 + 0.5 * angle.cos(),
                    0.5 + 0.5 * (angle + 2.1).cos(),
                    0.5 + 0.5 * (angle + 4.2).cos(),
                ];
                (center, colour)
            })
            .collect();
        for i in 0..n {
            let label = i % config.class_count;
            let (center, colour) = prototypes[label];
            let cx = (center[0] + rng.random_range(-0.05..0.05)) * sf;
            let cy = (center[1] + rng.random_range(-0.05..0.05)) * sf;
            let sigma = sf * rng.random_range(0.08..0.12);
            for ch in colour {
                for y in 0..s {
                    for x in 0..s {
                        let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                        let v = ch * (-d2 / (2.0 * sigma * sigma)).exp() + noise.sample(&mut rng);
                        images.push(v.clamp(0.0, 1.0) as f32);
                    }
                }
            }
            labels.push(label);
        }
        Ok(SyntheticDataset {
            config,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = 3 * self.config.image_size * self.config.image_size;
        &self.images[i * n..(i + 1) * n]
    }

    /// Stacks the given samples into `[B, 3, S, S]`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let s = self.config.image_size;
        let mut data = Vec::with_capacity(indices.len() * 3 * s * s);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let images = Tensor::new(vec![indices.len(), 3, s, s], data).expect("batch shape");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Sample order for one epoch, fixed by `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order
    }
}
