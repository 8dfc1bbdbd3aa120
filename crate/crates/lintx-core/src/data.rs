//! Procedural content and style images.
//!
//! Training and verification run on synthetic data so the artifact has no
//! dataset dependency. Content images are muted colored shapes on a flat
//! background; style images are strongly colored periodic textures with
//! heavy cross-channel correlation, so the gap between content and style
//! statistics is large enough to train against. Everything is a pure
//! function of (side, seed). Pixel values live in [0, 1], layout [3, H, W].

use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Flat-background image with a few axis-aligned rectangles and discs.
pub fn content_image(side: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(2).wrapping_add(1));
    let mut img = vec![0.0; 3 * side * side];
    let bg = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
    for c in 0..3 {
        img[c * side * side..(c + 1) * side * side].fill(bg[c]);
    }
    let shapes = rng.gen_range(3..=6);
    for _ in 0..shapes {
        let color = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let cx = rng.gen_range(0.0..side as f64);
        let cy = rng.gen_range(0.0..side as f64);
        let r = rng.gen_range(side as f64 * 0.1..side as f64 * 0.35);
        let disc: bool = rng.gen();
        for y in 0..side {
            for x in 0..side {
                let inside = if disc {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    dx * dx + dy * dy <= r * r
                } else {
                    (x as f64 - cx).abs() <= r && (y as f64 - cy).abs() <= r * 0.6
                };
                if inside {
                    for c in 0..3 {
                        img[(c * side + y) * side + x] = color[c];
                    }
                }
            }
        }
    }
    Tensor::from_raw(vec![3, side, side], img)
}

/// Two-color periodic texture: a pair of sinusoidal gratings at seeded
/// angles/frequencies blending two saturated palette colors, plus a little
/// deterministic noise.
pub fn style_image(side: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(2654435761).wrapping_add(7));
    let c0 = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
    let c1 = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
    let theta1: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let theta2: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let freq1: f64 = rng.gen_range(2.0..8.0);
    let freq2: f64 = rng.gen_range(2.0..8.0);
    let phase1: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let phase2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let noise_amp = 0.04;

    let mut img = vec![0.0; 3 * side * side];
    let inv = 1.0 / side as f64;
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f64 * inv, y as f64 * inv);
            let u1 = fx * theta1.cos() + fy * theta1.sin();
            let u2 = fx * theta2.cos() + fy * theta2.sin();
            let g1 = (std::f64::consts::TAU * freq1 * u1 + phase1).sin();
            let g2 = (std::f64::consts::TAU * freq2 * u2 + phase2).sin();
            // Sharpen the blend so the two palette colors dominate.
            let mix = 0.5 + 0.5 * (g1 * 0.7 + g2 * 0.3).tanh() * 1.6;
            let mix = mix.clamp(0.0, 1.0);
            // Cheap deterministic per-pixel hash noise.
            let h = (x as u64)
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add((y as u64).wrapping_mul(0xc2b2ae3d27d4eb4f))
                .wrapping_add(seed);
            let n = ((h >> 32) as f64 / u32::MAX as f64 - 0.5) * 2.0 * noise_amp;
            for c in 0..3 {
                let v = c0[c] * (1.0 - mix) + c1[c] * mix + n;
                img[(c * side + y) * side + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_raw(vec![3, side, side], img)
}
