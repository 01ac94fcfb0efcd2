//! Seeded synthetic classification data.
//!
//! Every image is a smooth per-channel gradient. The label `c` marks coarse
//! cell `c` with a one-pixel checkerboard, which 2×2 mean pooling erases, so
//! only fine tokens see it. Half of the samples also get a flat brightness
//! bump in the same cell, which survives pooling and makes them separable at
//! coarse resolution.

use crate::config::{DataConfig, ModelConfig};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    /// Whether the class cell carries the pooled-visible bump.
    pub coarse_visible: bool,
}

pub fn gen_sample(model: &ModelConfig, amplitude: f64, rng: &mut SplitMix64) -> Sample {
    let (c_img, size) = (model.in_channels, model.image_size);
    let label = rng.below(model.num_classes as u64) as usize;
    let amp = amplitude * rng.next_f64();
    let coarse_visible = rng.next_f64() < 0.5;

    let side = model.coarse_side();
    let p = model.coarse_patch;
    let (cell_r, cell_c) = (label / side, label % side);

    let mut data = Vec::with_capacity(c_img * size * size);
    for _ in 0..c_img {
        let base = rng.uniform(-0.5, 0.5);
        let gx = rng.uniform(-0.5, 0.5);
        let gy = rng.uniform(-0.5, 0.5);
        for y in 0..size {
            for x in 0..size {
                let mut v = base + gx * x as f64 / size as f64 + gy * y as f64 / size as f64;
                if y / p == cell_r && x / p == cell_c {
                    v += if (x + y) % 2 == 0 { amp } else { -amp };
                    if coarse_visible {
                        v += amp;
                    }
                }
                data.push(v as f32);
            }
        }
    }
    Sample {
        image: Tensor::new(vec![c_img, size, size], data).expect("image shape"),
        label,
        coarse_visible,
    }
}

/// `data.samples` images; sample `i` depends only on `(data.seed, i)`.
pub fn gen_synthetic(model: &ModelConfig, data: &DataConfig) -> Vec<Sample> {
    let mut root = SplitMix64::new(data.seed);
    (0..data.samples)
        .map(|_| {
            let mut rng = root.fork();
            gen_sample(model, data.amplitude, &mut rng)
        })
        .collect()
}
