//! Encoder, decoder, and denoiser model definitions.
//!
//! Architectures are described by serializable layer plans so that
//! checkpoints can rebuild the exact computation graph. The stock plans
//! follow the fully-convolutional layouts for the low-resolution (`cifar`)
//! and high-resolution (`open_images`) variants; `width_divisor` shrinks all
//! hidden channel counts for desk-scale runs while keeping the topology.

mod checkpoint;

pub use checkpoint::{load_bundle, load_bundle_checked, save_bundle, BundleExpectation};

use ndarray::{Array, Array3, Axis, Dimension};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{codeword_dim_for_cpp, substream, stream, RateSpec};
use crate::error::{Error, Result};
use crate::nn::{
    Batch, BatchNorm2d, Conv2d, Layer, Network, PRelu, PowerNorm, Relu, ResidualBlock, ScaleNorm,
    TanhLayer, Upsample2x,
};
use crate::signal::{Codeword, SourceImage};

/// Default initialization slope for PReLU activations.
pub const PRELU_INIT_SLOPE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Cifar,
    OpenImages,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Cifar => write!(f, "cifar"),
            Variant::OpenImages => write!(f, "open_images"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    PRelu,
    Tanh,
    None,
}

/// One step of an encoder/decoder layer plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PlanStep {
    Conv {
        kernel: usize,
        stride: usize,
        out: usize,
        norm: bool,
        act: Activation,
    },
    Residual {
        kernel: usize,
        out: usize,
    },
    Upsample,
    PowerNormalize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Nominal `(C, H, W)`; the networks are fully convolutional, so any
    /// input whose sides are multiples of the downsampling factor works.
    pub input_shape: (usize, usize, usize),
    pub steps: Vec<PlanStep>,
    pub codeword_channels: usize,
    pub variant: Variant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub steps: Vec<PlanStep>,
    pub output_channels: usize,
    pub variant: Variant,
}

/// Bias-free denoiser layout: `depth` convolution blocks of `kernel`-sized
/// filters, scale-only normalization in the interior blocks, no additive
/// parameters anywhere. Input and output are codeword-shaped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub depth: usize,
    pub kernel: usize,
    pub hidden_channels: usize,
    pub bias_free: bool,
    pub channels: usize,
}

fn scaled(base: usize, divisor: usize) -> usize {
    (base / divisor).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub cpp_num: u32,
    pub cpp_den: u32,
    pub width_divisor: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub denoiser: DenoiserConfig,
}

impl ModelConfig {
    /// Paper-exact configuration for the requested variant and rate.
    pub fn new(variant: Variant, cpp_num: u32, cpp_den: u32) -> Result<Self> {
        Self::with_scale(variant, cpp_num, cpp_den, 1, 20, 64)
    }

    /// Desk-scale configuration: same topology, hidden channels divided by 8
    /// and a shallower denoiser.
    pub fn tiny(variant: Variant, cpp_num: u32, cpp_den: u32) -> Result<Self> {
        Self::with_scale(variant, cpp_num, cpp_den, 8, 6, 16)
    }

    pub fn with_scale(
        variant: Variant,
        cpp_num: u32,
        cpp_den: u32,
        width_divisor: usize,
        denoiser_depth: usize,
        denoiser_hidden: usize,
    ) -> Result<Self> {
        if width_divisor == 0 {
            return Err(Error::Config("width divisor must be positive".to_string()));
        }
        if denoiser_depth < 3 {
            return Err(Error::Config(
                "denoiser depth must be at least 3 blocks".to_string(),
            ));
        }
        let d = width_divisor;
        let (input_shape, codeword_channels, enc_steps, dec_steps) = match variant {
            Variant::Cifar => {
                let n = 3 * 32 * 32;
                let k = codeword_dim_for_cpp(n, cpp_num, cpp_den)?;
                if k % 64 != 0 {
                    return Err(Error::Config(format!(
                        "cifar codeword dimension {k} is not divisible by the 8x8 latent grid"
                    )));
                }
                let cw = k / 64;
                let enc = vec![
                    PlanStep::Conv { kernel: 7, stride: 1, out: scaled(32, d), norm: true, act: Activation::PRelu },
                    PlanStep::Conv { kernel: 5, stride: 2, out: scaled(64, d), norm: true, act: Activation::PRelu },
                    PlanStep::Residual { kernel: 3, out: scaled(64, d) },
                    PlanStep::Conv { kernel: 5, stride: 2, out: scaled(128, d), norm: true, act: Activation::PRelu },
                    PlanStep::Residual { kernel: 3, out: scaled(128, d) },
                    PlanStep::Residual { kernel: 3, out: scaled(128, d) },
                    PlanStep::Residual { kernel: 3, out: scaled(128, d) },
                    PlanStep::Residual { kernel: 3, out: cw },
                    PlanStep::PowerNormalize,
                ];
                let dec = vec![
                    PlanStep::Conv { kernel: 3, stride: 1, out: scaled(128, d), norm: true, act: Activation::PRelu },
                    PlanStep::Residual { kernel: 3, out: scaled(128, d) },
                    PlanStep::Residual { kernel: 3, out: scaled(128, d) },
                    PlanStep::Upsample,
                    PlanStep::Conv { kernel: 3, stride: 1, out: scaled(64, d), norm: true, act: Activation::PRelu },
                    PlanStep::Residual { kernel: 3, out: scaled(64, d) },
                    PlanStep::Upsample,
                    PlanStep::Conv { kernel: 3, stride: 1, out: scaled(32, d), norm: true, act: Activation::PRelu },
                    PlanStep::Residual { kernel: 3, out: scaled(32, d) },
                    PlanStep::Conv { kernel: 5, stride: 1, out: 3, norm: true, act: Activation::Tanh },
                ];
                ((3, 32, 32), cw, enc, dec)
            }
            Variant::OpenImages => {
                // Codeword channels for H x W x 3 inputs at spatial /4:
                // k / ((H/4)(W/4)) = 16 k / (H W) = 96 cpp.
                let num = 96u64 * cpp_num as u64;
                let den = cpp_den as u64;
                if !num.is_multiple_of(den) {
                    return Err(Error::Config(format!(
                        "cpp {cpp_num}/{cpp_den} does not yield integer codeword channels for the open_images variant"
                    )));
                }
                let cw = (num / den) as usize;
                let enc = vec![
                    PlanStep::Conv { kernel: 7, stride: 2, out: scaled(128, d), norm: true, act: Activation::PRelu },
                    PlanStep::Conv { kernel: 5, stride: 2, out: scaled(128, d), norm: true, act: Activation::PRelu },
                    PlanStep::Residual { kernel: 5, out: scaled(128, d) },
                    PlanStep::Residual { kernel: 5, out: scaled(128, d) },
                    PlanStep::Residual { kernel: 5, out: scaled(128, d) },
                    PlanStep::Conv { kernel: 5, stride: 1, out: cw, norm: true, act: Activation::None },
                    PlanStep::PowerNormalize,
                ];
                let dec = vec![
                    PlanStep::Conv { kernel: 5, stride: 1, out: scaled(128, d), norm: true, act: Activation::PRelu },
                    PlanStep::Residual { kernel: 5, out: scaled(128, d) },
                    PlanStep::Residual { kernel: 5, out: scaled(128, d) },
                    PlanStep::Upsample,
                    PlanStep::Conv { kernel: 5, stride: 1, out: scaled(128, d), norm: true, act: Activation::PRelu },
                    PlanStep::Residual { kernel: 5, out: scaled(128, d) },
                    PlanStep::Upsample,
                    PlanStep::Conv { kernel: 7, stride: 1, out: 3, norm: true, act: Activation::Tanh },
                ];
                ((3, 128, 128), cw, enc, dec)
            }
        };
        Ok(ModelConfig {
            variant,
            cpp_num,
            cpp_den,
            width_divisor,
            encoder: EncoderConfig {
                input_shape,
                steps: enc_steps,
                codeword_channels,
                variant,
            },
            decoder: DecoderConfig {
                steps: dec_steps,
                output_channels: input_shape.0,
                variant,
            },
            denoiser: DenoiserConfig {
                depth: denoiser_depth,
                kernel: 3,
                hidden_channels: denoiser_hidden,
                bias_free: true,
                channels: codeword_channels,
            },
        })
    }

    /// Fully custom plans (used by validation harnesses and tests).
    pub fn custom(
        variant: Variant,
        cpp_num: u32,
        cpp_den: u32,
        encoder: EncoderConfig,
        decoder: DecoderConfig,
        denoiser: DenoiserConfig,
    ) -> Self {
        ModelConfig {
            variant,
            cpp_num,
            cpp_den,
            width_divisor: 1,
            encoder,
            decoder,
            denoiser,
        }
    }

    pub fn cpp(&self) -> f64 {
        self.cpp_num as f64 / self.cpp_den as f64
    }
}

fn build_plan(steps: &[PlanStep], in_channels: usize, rng: &mut ChaCha8Rng) -> Network {
    let mut layers: Vec<Box<dyn Layer>> = Vec::new();
    let mut channels = in_channels;
    for step in steps {
        match *step {
            PlanStep::Conv {
                kernel,
                stride,
                out,
                norm,
                act,
            } => {
                layers.push(Box::new(Conv2d::new(channels, out, kernel, stride, true, rng)));
                if norm {
                    layers.push(Box::new(BatchNorm2d::new(out)));
                }
                match act {
                    Activation::PRelu => layers.push(Box::new(PRelu::new(PRELU_INIT_SLOPE))),
                    Activation::Tanh => layers.push(Box::new(TanhLayer)),
                    Activation::None => {}
                }
                channels = out;
            }
            PlanStep::Residual { kernel, out } => {
                layers.push(Box::new(ResidualBlock::new(
                    channels,
                    out,
                    kernel,
                    PRELU_INIT_SLOPE,
                    rng,
                )));
                channels = out;
            }
            PlanStep::Upsample => layers.push(Box::new(Upsample2x)),
            PlanStep::PowerNormalize => layers.push(Box::new(PowerNorm)),
        }
    }
    Network::new(layers)
}

fn build_denoiser(cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) -> Network {
    let mut layers: Vec<Box<dyn Layer>> = Vec::new();
    // First block: bias-free convolution + ReLU.
    layers.push(Box::new(Conv2d::new(
        cfg.channels,
        cfg.hidden_channels,
        cfg.kernel,
        1,
        false,
        rng,
    )));
    layers.push(Box::new(Relu));
    // Interior blocks: convolution + scale-only normalization + ReLU.
    for _ in 0..cfg.depth.saturating_sub(2) {
        layers.push(Box::new(Conv2d::new(
            cfg.hidden_channels,
            cfg.hidden_channels,
            cfg.kernel,
            1,
            false,
            rng,
        )));
        layers.push(Box::new(ScaleNorm::new(cfg.hidden_channels)));
        layers.push(Box::new(Relu));
    }
    // Final projection back to codeword channels.
    layers.push(Box::new(Conv2d::new(
        cfg.hidden_channels,
        cfg.channels,
        cfg.kernel,
        1,
        false,
        rng,
    )));
    Network::new(layers)
}

/// Bundle metadata persisted in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub config: ModelConfig,
    pub sigma_train: f64,
    pub step: u64,
    pub has_denoiser: bool,
}

/// The trained triple: encoder, decoder, and (optionally) the codeword
/// denoiser, plus training metadata.
pub struct ModelBundle {
    pub encoder: Network,
    pub decoder: Network,
    pub denoiser: Option<Network>,
    pub meta: BundleMeta,
}

impl ModelBundle {
    /// Freshly initialized networks (no denoiser) with weights keyed on `seed`.
    pub fn init(config: ModelConfig, sigma_train: f64, seed: u64) -> Result<Self> {
        if sigma_train <= 0.0 || sigma_train.is_nan() {
            return Err(Error::Config(format!(
                "sigma_train must be positive, got {sigma_train}"
            )));
        }
        let mut rng = substream(seed, &[stream::INIT, 0]);
        let encoder = build_plan(&config.encoder.steps, config.encoder.input_shape.0, &mut rng);
        let mut rng = substream(seed, &[stream::INIT, 1]);
        let decoder = build_plan(&config.decoder.steps, config.encoder.codeword_channels, &mut rng);
        Ok(ModelBundle {
            encoder,
            decoder,
            denoiser: None,
            meta: BundleMeta {
                config,
                sigma_train,
                step: 0,
                has_denoiser: false,
            },
        })
    }

    /// Initializes the denoiser network in place (weights keyed on `seed`).
    pub fn init_denoiser(&mut self, seed: u64) {
        let mut rng = substream(seed, &[stream::INIT, 2]);
        let net = build_denoiser(&self.meta.config.denoiser, &mut rng);
        self.denoiser = Some(net);
        self.meta.has_denoiser = true;
    }

    /// Wraps pre-built networks; used by validation stubs.
    pub fn from_networks(
        encoder: Network,
        decoder: Network,
        denoiser: Option<Network>,
        meta: BundleMeta,
    ) -> Self {
        let has = denoiser.is_some();
        let mut meta = meta;
        meta.has_denoiser = has;
        ModelBundle {
            encoder,
            decoder,
            denoiser,
            meta,
        }
    }

    pub fn validate_image_shape(&self, shape: (usize, usize, usize)) -> Result<()> {
        let (c, h, w) = shape;
        let expect_c = self.meta.config.encoder.input_shape.0;
        if c != expect_c {
            return Err(Error::Config(format!(
                "image has {c} channels; the {} model expects {expect_c}",
                self.meta.config.variant
            )));
        }
        if h % 4 != 0 || w % 4 != 0 || h < 8 || w < 8 {
            return Err(Error::Config(format!(
                "image size {h}x{w} is not supported: sides must be multiples of 4 and at least 8"
            )));
        }
        Ok(())
    }

    /// Codeword shape produced for an input of the given size.
    pub fn codeword_shape_for(&self, shape: (usize, usize, usize)) -> (usize, usize, usize) {
        let (_, h, w) = shape;
        (self.meta.config.encoder.codeword_channels, h / 4, w / 4)
    }

    pub fn rate_for(&self, image_shape: (usize, usize, usize)) -> Result<RateSpec> {
        let (c, h, w) = image_shape;
        let (zc, zh, zw) = self.codeword_shape_for(image_shape);
        RateSpec::new(c * h * w, zc * zh * zw)
    }

    /// Maps a source image to its power-bounded codeword.
    pub fn encode(&self, image: &SourceImage) -> Result<Codeword> {
        self.validate_image_shape(image.shape())?;
        let batch = image.data.clone().insert_axis(Axis(0));
        let z = self.encoder.infer(&batch);
        Ok(Codeword::new(z.index_axis_move(Axis(0), 0), true))
    }

    /// Maps a (possibly noisy) codeword back to the source domain.
    pub fn decode(&self, codeword: &Codeword) -> Result<SourceImage> {
        self.validate_codeword_shape(codeword)?;
        let batch = codeword.data.clone().insert_axis(Axis(0));
        let x = self.decoder.infer(&batch);
        Ok(SourceImage::new(x.index_axis_move(Axis(0), 0)))
    }

    /// Raw denoiser output: the predicted channel-noise instance for the
    /// given codeword (the cleaned estimate is `z - predict_noise(z)`).
    pub fn predict_noise(&self, codeword: &Codeword) -> Result<Codeword> {
        let denoiser = self.denoiser.as_ref().ok_or_else(|| {
            Error::Config("bundle has no denoiser network".to_string())
        })?;
        self.validate_codeword_shape(codeword)?;
        let batch = codeword.data.clone().insert_axis(Axis(0));
        let out = denoiser.infer(&batch);
        Ok(Codeword::new(out.index_axis_move(Axis(0), 0), false))
    }

    /// Direction of increasing codeword log-density: `(estimate - input)`,
    /// i.e. the negated noise prediction.
    pub fn prior_direction(&self, codeword: &Codeword) -> Result<Codeword> {
        let mut out = self.predict_noise(codeword)?;
        out.data.mapv_inplace(|v| -v);
        Ok(out)
    }

    fn validate_codeword_shape(&self, codeword: &Codeword) -> Result<()> {
        let (c, h, w) = codeword.shape();
        let expect = self.meta.config.encoder.codeword_channels;
        if c != expect {
            return Err(Error::Config(format!(
                "codeword has {c} channels; the model expects {expect}"
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::Config("empty codeword".to_string()));
        }
        Ok(())
    }

    /// Batched helpers used by the training loops.
    pub(crate) fn encode_batch_train(&mut self, images: &Batch) -> (Batch, Vec<crate::nn::Cache>) {
        self.encoder.forward_train(images)
    }

    pub(crate) fn decode_batch_train(&mut self, codes: &Batch) -> (Batch, Vec<crate::nn::Cache>) {
        self.decoder.forward_train(codes)
    }
}

/// Elementwise parameterized ReLU: `u` for `u >= 0`, `rho * u` otherwise.
pub fn prelu<D: Dimension>(u: &Array<f64, D>, rho: f64) -> Result<Array<f64, D>> {
    if rho < 0.0 {
        return Err(Error::Config(format!("prelu slope must be >= 0, got {rho}")));
    }
    Ok(u.mapv(|v| if v >= 0.0 { v } else { rho * v }))
}

/// Projects `v` into the radius-`sqrt(k)` ball (identity inside and exactly
/// at the boundary). `v` must have exactly `k` elements.
pub fn power_normalize(v: &Array3<f64>, k: usize) -> Result<Codeword> {
    if v.len() != k {
        return Err(Error::Config(format!(
            "power_normalize: tensor has {} elements, expected k={k}",
            v.len()
        )));
    }
    let nsq: f64 = v.iter().map(|x| x * x).sum();
    let kf = k as f64;
    let data = if nsq > kf {
        let scale = (kf / nsq).sqrt();
        v.mapv(|x| x * scale)
    } else {
        v.clone()
    };
    Ok(Codeword::new(data, true))
}
