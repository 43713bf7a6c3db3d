//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use covseg_core::coattention::{ChannelMode, Variant};
use covseg_core::net::{Model, ModelConfig};
use covseg_core::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A narrow model that keeps whole-network tests fast.
pub fn small_config(variant: Variant, channel_mode: ChannelMode) -> ModelConfig {
    ModelConfig {
        variant,
        channel_mode,
        channels: 6,
        embed_widths: [4, 6],
        head_width: 5,
        ..ModelConfig::default()
    }
}

pub fn small_model(variant: Variant, seed: u64) -> Model {
    Model::new(small_config(variant, ChannelMode::Se), seed).expect("valid config")
}

/// RGB frame with values in `[0, 1]`.
pub fn frame(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    Tensor::uniform(&[size, size, 3], 0.5, rng).map(|x| x + 0.5)
}

/// `[H, W, C]` tensor with entries in `[-bound, bound]`.
pub fn features(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, bound: f64) -> Tensor {
    Tensor::uniform(&[h, w, c], bound, rng)
}

pub fn assert_bitwise(a: &Tensor, b: &Tensor) {
    assert_eq!(a.shape(), b.shape());
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert_eq!(x.to_bits(), y.to_bits(), "entry {i}: {x} vs {y}");
    }
}

pub fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "max abs diff {d:e} exceeds {tol:e}");
}
