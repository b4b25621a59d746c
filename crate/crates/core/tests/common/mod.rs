//! Shared fixtures for the integration test targets.
//!
//! Each target uses a subset of these helpers.
#![allow(dead_code)]

use jscc_core::models::{
    Activation, DecoderConfig, DenoiserConfig, EncoderConfig, ModelBundle, ModelConfig, PlanStep,
    Variant,
};
use jscc_core::signal::SourceImage;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A differentiable encoder/decoder/denoiser triple with well under 10^3
/// parameters, used for finite-difference oracles. The final encoder
/// convolution is scaled up after initialization so random inputs land
/// firmly on the projection branch of the power constraint (away from the
/// non-differentiable boundary).
pub fn gradcheck_bundle(seed: u64) -> ModelBundle {
    let encoder = EncoderConfig {
        input_shape: (3, 8, 8),
        steps: vec![
            PlanStep::Conv {
                kernel: 3,
                stride: 2,
                out: 2,
                norm: true,
                act: Activation::PRelu,
            },
            PlanStep::Residual { kernel: 3, out: 2 },
            PlanStep::Conv {
                kernel: 3,
                stride: 2,
                out: 2,
                norm: true,
                act: Activation::PRelu,
            },
            PlanStep::PowerNormalize,
        ],
        codeword_channels: 2,
        variant: Variant::Cifar,
    };
    let decoder = DecoderConfig {
        steps: vec![
            PlanStep::Conv {
                kernel: 3,
                stride: 1,
                out: 4,
                norm: true,
                act: Activation::PRelu,
            },
            PlanStep::Upsample,
            PlanStep::Conv {
                kernel: 3,
                stride: 1,
                out: 4,
                norm: true,
                act: Activation::PRelu,
            },
            PlanStep::Upsample,
            PlanStep::Conv {
                kernel: 3,
                stride: 1,
                out: 3,
                norm: true,
                act: Activation::Tanh,
            },
        ],
        output_channels: 3,
        variant: Variant::Cifar,
    };
    let denoiser = DenoiserConfig {
        depth: 3,
        kernel: 3,
        hidden_channels: 4,
        bias_free: true,
        channels: 2,
    };
    let config = ModelConfig::custom(Variant::Cifar, 1, 48, encoder, decoder, denoiser);
    let mut bundle = ModelBundle::init(config, 0.5, seed).unwrap();
    bundle.init_denoiser(seed + 1);
    // Push encoder outputs outside the power ball in both normalization
    // modes by scaling the last block's norm gain (index: weight, bias,
    // gamma, beta, rho from the back).
    let mut params = bundle.encoder.params_mut();
    let gamma_idx = params.len() - 3;
    params[gamma_idx].mapv_inplace(|v| v * 6.0);
    bundle
}

/// Perfect-consistency fixture: encoder and decoder are identity maps (1x1
/// convolutions with identity kernels and zero bias), so re-encoding any
/// iterate reproduces it exactly. Checkpoint-compatible: the config rebuilds
/// the same layer layout and the saved arrays restore the identity weights.
pub fn identity_bundle() -> ModelBundle {
    let step = |out: usize| PlanStep::Conv {
        kernel: 1,
        stride: 1,
        out,
        norm: false,
        act: Activation::None,
    };
    let config = ModelConfig::custom(
        Variant::Cifar,
        1,
        48,
        EncoderConfig {
            input_shape: (3, 16, 16),
            steps: vec![step(3)],
            codeword_channels: 3,
            variant: Variant::Cifar,
        },
        DecoderConfig {
            steps: vec![step(3)],
            output_channels: 3,
            variant: Variant::Cifar,
        },
        DenoiserConfig {
            depth: 3,
            kernel: 3,
            hidden_channels: 2,
            bias_free: true,
            channels: 3,
        },
    );
    let mut bundle = ModelBundle::init(config, 1.0, 0).unwrap();
    for net in [&mut bundle.encoder, &mut bundle.decoder] {
        let mut params = net.params_mut();
        // Conv weight (3,3,1,1) -> identity kernel; bias -> zero.
        params[0].fill(0.0);
        for c in 0..3 {
            params[0][[c, c, 0, 0]] = 1.0;
        }
        params[1].fill(0.0);
    }
    bundle
}

pub fn random_image(shape: (usize, usize, usize), seed: u64) -> SourceImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SourceImage::new(Array3::from_shape_simple_fn(shape, || {
        rng.random_range(-1.0..1.0)
    }))
}

pub fn random_codeword_data(shape: (usize, usize, usize), seed: u64, scale: f64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn(shape, || rng.random_range(-scale..scale))
}

/// Normwise relative error between two flat gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        diff += (a - n) * (a - n);
        norm += n * n;
    }
    (diff / norm.max(1e-300)).sqrt()
}
