//! Joint encoder/decoder optimization under simulated channel noise, and
//! denoiser training on corrupted codewords.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array1, Array4, ArrayD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{sample_unit_noise, sigma_from_snr_db, stream, substream, NoiseFamily};
use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::models::{ModelBundle, ModelConfig, Variant};
use crate::nn::{Batch, GradStore, Network};
use crate::signal::SourceImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    /// Step at which the learning rate is multiplied by `factor`.
    pub step: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub optimizer: OptimizerConfig,
    pub lr_decay: LrDecay,
    pub snr_train_db: f64,
    pub cpp_num: u32,
    pub cpp_den: u32,
    pub seed: u64,
    pub variant: Variant,
    /// 1 = reference widths; larger values shrink hidden channels.
    #[serde(default = "default_width_divisor")]
    pub width_divisor: usize,
    #[serde(default = "default_denoiser_depth")]
    pub denoiser_depth: usize,
    #[serde(default = "default_denoiser_hidden")]
    pub denoiser_hidden: usize,
    /// Steps between checkpoints; 0 disables periodic checkpoints.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(default)]
    pub log_path: Option<PathBuf>,
}

fn default_width_divisor() -> usize {
    1
}

fn default_denoiser_depth() -> usize {
    20
}

fn default_denoiser_hidden() -> usize {
    64
}

impl TrainConfig {
    /// Low-resolution reference schedule: batch 64 for 234,300 steps,
    /// lr 2e-4 dropped to 2e-5 at step 117,150, Adam betas (0.0, 0.9).
    pub fn reference_cifar(snr_train_db: f64, cpp_num: u32, cpp_den: u32, seed: u64) -> Self {
        TrainConfig {
            batch_size: 64,
            total_steps: 234_300,
            optimizer: OptimizerConfig {
                learning_rate: 2e-4,
                beta1: 0.0,
                beta2: 0.9,
            },
            lr_decay: LrDecay {
                step: 117_150,
                factor: 0.1,
            },
            snr_train_db,
            cpp_num,
            cpp_den,
            seed,
            variant: Variant::Cifar,
            width_divisor: 1,
            denoiser_depth: 20,
            denoiser_hidden: 64,
            checkpoint_every: 0,
            checkpoint_dir: None,
            log_path: None,
        }
    }

    /// High-resolution reference schedule: batch 128 for 96,030 steps,
    /// lr 1e-3 dropped to 1e-4 at step 64,020, Adam betas (0.0, 0.9).
    pub fn reference_open_images(snr_train_db: f64, cpp_num: u32, cpp_den: u32, seed: u64) -> Self {
        TrainConfig {
            batch_size: 128,
            total_steps: 96_030,
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                beta1: 0.0,
                beta2: 0.9,
            },
            lr_decay: LrDecay {
                step: 64_020,
                factor: 0.1,
            },
            snr_train_db,
            cpp_num,
            cpp_den,
            seed,
            variant: Variant::OpenImages,
            width_divisor: 1,
            denoiser_depth: 20,
            denoiser_hidden: 64,
            checkpoint_every: 0,
            checkpoint_dir: None,
            log_path: None,
        }
    }

    /// Desk-scale defaults: batch 32, lr 1e-3 halved at the midpoint,
    /// reduced channel counts, shallow denoiser.
    pub fn desk(
        variant: Variant,
        snr_train_db: f64,
        cpp_num: u32,
        cpp_den: u32,
        total_steps: usize,
        seed: u64,
    ) -> Self {
        TrainConfig {
            batch_size: 32,
            total_steps,
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                beta1: 0.0,
                beta2: 0.9,
            },
            lr_decay: LrDecay {
                step: total_steps / 2,
                factor: 0.5,
            },
            snr_train_db,
            cpp_num,
            cpp_den,
            seed,
            variant,
            width_divisor: 8,
            denoiser_depth: 6,
            denoiser_hidden: 16,
            checkpoint_every: 0,
            checkpoint_dir: None,
            log_path: None,
        }
    }

    /// Switches the optimizer moments to the denoiser schedule (0.9 / 0.999);
    /// the encoder/decoder schedule deliberately uses beta1 = 0.
    pub fn for_denoiser(mut self) -> Self {
        self.optimizer.beta1 = 0.9;
        self.optimizer.beta2 = 0.999;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if o.learning_rate <= 0.0 || o.learning_rate.is_nan() {
            return Err(Error::Config("learning rate must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".to_string()));
        }
        if self.lr_decay.step > self.total_steps {
            return Err(Error::Config(format!(
                "lr decay step {} exceeds total steps {}",
                self.lr_decay.step, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".to_string()));
        }
        Ok(())
    }

    pub fn sigma_train(&self) -> f64 {
        sigma_from_snr_db(self.snr_train_db)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::with_scale(
            self.variant,
            self.cpp_num,
            self.cpp_den,
            self.width_divisor,
            self.denoiser_depth,
            self.denoiser_hidden,
        )
    }
}

/// Adam with bias correction over a flat list of parameter tensors.
pub struct Adam {
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(shapes: &[ndarray::IxDyn], beta1: f64, beta2: f64) -> Self {
        Adam {
            m: shapes.iter().map(|s| ArrayD::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| ArrayD::zeros(s.clone())).collect(),
            t: 0,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }

    pub fn step(
        &mut self,
        params: &mut [ndarray::ArrayViewMutD<'_, f64>],
        grads: &[ArrayD<f64>],
        lr: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (beta1, beta2, eps) = (self.beta1, self.beta2, self.eps);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(param)
                .and(grad)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

/// Mean over the batch of the per-image squared reconstruction error
/// `||x_i - D(E(x_i) + n_i)||^2`, evaluated with inference-mode statistics.
pub fn jscc_loss(bundle: &ModelBundle, batch: &[SourceImage], noise: &[Array1<f64>]) -> Result<f64> {
    if batch.is_empty() || batch.len() != noise.len() {
        return Err(Error::Config(
            "jscc_loss requires a nonempty batch aligned with its noise draws".to_string(),
        ));
    }
    let mut total = 0.0;
    for (img, n) in batch.iter().zip(noise) {
        let z = bundle.encode(img)?;
        let noisy = crate::channel::add_noise(&z, n);
        let recon = bundle.decode(&noisy)?;
        total += (&recon.data - &img.data).iter().map(|d| d * d).sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// Mean over the batch of `||n_i - F(E(x_i) + n_i)||^2` (inference mode).
pub fn denoiser_loss(
    bundle: &ModelBundle,
    batch: &[SourceImage],
    noise: &[Array1<f64>],
) -> Result<f64> {
    if batch.is_empty() || batch.len() != noise.len() {
        return Err(Error::Config(
            "denoiser_loss requires a nonempty batch aligned with its noise draws".to_string(),
        ));
    }
    let mut total = 0.0;
    for (img, n) in batch.iter().zip(noise) {
        let z = bundle.encode(img)?;
        let noisy = crate::channel::add_noise(&z, n);
        let predicted = bundle.predict_noise(&noisy)?;
        total += predicted
            .data
            .iter()
            .zip(n.iter())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// Result of a training run: the bundle plus the per-step loss curve.
pub struct TrainRun {
    pub bundle: ModelBundle,
    pub losses: Vec<f64>,
}

struct StepLogger {
    file: Option<std::io::BufWriter<std::fs::File>>,
    started: Instant,
}

impl StepLogger {
    fn open(path: &Option<PathBuf>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                if let Some(parent) = p.parent() {
                    if !parent.as_os_str().is_empty() {
                        std::fs::create_dir_all(parent)?;
                    }
                }
                Some(std::io::BufWriter::new(std::fs::File::create(p)?))
            }
            None => None,
        };
        Ok(StepLogger {
            file,
            started: Instant::now(),
        })
    }

    fn log(&mut self, step: usize, loss: f64, lr: f64) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(
                f,
                "step={step} loss={loss:.6e} lr={lr:.3e} elapsed_s={:.3}",
                self.started.elapsed().as_secs_f64()
            )?;
        }
        Ok(())
    }
}

fn assemble_batch(data: &DatasetHandle, indices: &[usize], seed: u64, step: usize) -> Result<Batch> {
    let first = data.fetch(
        indices[0],
        &mut substream(seed, &[stream::AUGMENT, step as u64, 0]),
    )?;
    let (c, h, w) = first.shape();
    let mut batch = Array4::<f64>::zeros((indices.len(), c, h, w));
    batch.index_axis_mut(Axis(0), 0).assign(&first.data);
    for (bi, &idx) in indices.iter().enumerate().skip(1) {
        let img = data.fetch(
            idx,
            &mut substream(seed, &[stream::AUGMENT, step as u64, bi as u64]),
        )?;
        if img.shape() != (c, h, w) {
            return Err(Error::Data(format!(
                "dataset mixes image shapes: {:?} vs {:?}",
                img.shape(),
                (c, h, w)
            )));
        }
        batch.index_axis_mut(Axis(0), bi).assign(&img.data);
    }
    Ok(batch)
}

fn sample_indices(len: usize, count: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..len)).collect()
}

fn effective_lr(cfg: &TrainConfig, step: usize) -> f64 {
    if step >= cfg.lr_decay.step && cfg.lr_decay.step > 0 && cfg.lr_decay.step < cfg.total_steps {
        cfg.optimizer.learning_rate * cfg.lr_decay.factor
    } else {
        cfg.optimizer.learning_rate
    }
}

fn noise_batch(
    family: NoiseFamily,
    sigma: f64,
    shape: (usize, usize, usize, usize),
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Batch {
    let len = shape.0 * shape.1 * shape.2 * shape.3;
    let mut flat = sample_unit_noise(family, len, rng);
    flat.mapv_inplace(|v| v * sigma);
    flat.into_shape_with_order(shape).expect("noise reshape")
}

/// Trains the encoder/decoder pair jointly on the reconstruction error under
/// fresh channel noise each step. Aborts with diagnostics on non-finite loss.
pub fn train_jscc(cfg: &TrainConfig, data: &DatasetHandle) -> Result<TrainRun> {
    cfg.validate()?;
    let bundle = ModelBundle::init(cfg.model_config()?, cfg.sigma_train(), cfg.seed)?;
    train_jscc_from(cfg, bundle, data)
}

/// Continues (or starts) joint training from an existing bundle.
pub fn train_jscc_from(cfg: &TrainConfig, bundle: ModelBundle, data: &DatasetHandle) -> Result<TrainRun> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training dataset is empty".to_string()));
    }
    let sigma = bundle.meta.sigma_train;
    let mut bundle = bundle;
    let mut logger = StepLogger::open(&cfg.log_path)?;

    let mut enc_grads = GradStore::for_network(&bundle.encoder);
    let mut dec_grads = GradStore::for_network(&bundle.decoder);
    let shapes: Vec<ndarray::IxDyn> = bundle
        .encoder
        .params()
        .iter()
        .chain(bundle.decoder.params().iter())
        .map(|p| p.raw_dim())
        .collect();
    let mut adam = Adam::new(&shapes, cfg.optimizer.beta1, cfg.optimizer.beta2);

    let mut losses = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let mut batch_rng = substream(cfg.seed, &[stream::BATCH, step as u64]);
        let indices = sample_indices(data.len(), cfg.batch_size, &mut batch_rng);
        let images = assemble_batch(data, &indices, cfg.seed, step)?;
        let mut noise_rng = substream(cfg.seed, &[stream::NOISE, step as u64]);

        let (codes, enc_caches) = bundle.encode_batch_train(&images);
        let noise = noise_batch(NoiseFamily::Gaussian, sigma, codes.dim(), &mut noise_rng);
        let noisy = &codes + &noise;
        let (recon, dec_caches) = bundle.decode_batch_train(&noisy);

        let b = cfg.batch_size as f64;
        let diff = &recon - &images;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / b;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite training loss {loss} at step {step}"
            )));
        }
        losses.push(loss);
        let lr = effective_lr(cfg, step);
        logger.log(step, loss, lr)?;

        let grad_recon = diff.mapv(|d| 2.0 * d / b);
        enc_grads.reset();
        dec_grads.reset();
        let grad_noisy = bundle
            .decoder
            .backward(&dec_caches, &grad_recon, Some(&mut dec_grads));
        // Additive noise passes the gradient through unchanged.
        let _ = bundle
            .encoder
            .backward(&enc_caches, &grad_noisy, Some(&mut enc_grads));

        let all_grads: Vec<ArrayD<f64>> = enc_grads
            .slots
            .iter()
            .chain(dec_grads.slots.iter())
            .cloned()
            .collect();
        {
            let mut params: Vec<ndarray::ArrayViewMutD<'_, f64>> = bundle.encoder.params_mut();
            params.extend(bundle.decoder.params_mut());
            adam.step(&mut params, &all_grads, lr);
        }
        bundle.encoder.apply_constraints();
        bundle.decoder.apply_constraints();
        bundle.meta.step = (step + 1) as u64;

        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                crate::models::save_bundle(&bundle, &dir.join(format!("step-{:07}.ckpt", step + 1)))?;
            }
        }
    }
    Ok(TrainRun { bundle, losses })
}

/// Trains the codeword denoiser against the bundle's frozen encoder. The
/// target is the noise instance itself; the noise distribution stays fixed at
/// the bundle's training sigma for the whole run. Returns the bundle with the
/// trained denoiser attached.
pub fn train_denoiser(cfg: &TrainConfig, bundle: ModelBundle, data: &DatasetHandle) -> Result<TrainRun> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training dataset is empty".to_string()));
    }
    let mut bundle = bundle;
    if bundle.denoiser.is_none() {
        // The denoiser architecture comes from this run's config; the
        // codeword channel count always follows the encoder.
        bundle.meta.config.denoiser.depth = cfg.denoiser_depth;
        bundle.meta.config.denoiser.hidden_channels = cfg.denoiser_hidden;
        bundle.init_denoiser(cfg.seed);
    }
    let sigma = bundle.meta.sigma_train;
    let mut logger = StepLogger::open(&cfg.log_path)?;

    let mut denoiser: Network = bundle.denoiser.take().expect("denoiser initialized above");
    let mut grads = GradStore::for_network(&denoiser);
    let shapes: Vec<ndarray::IxDyn> = denoiser.params().iter().map(|p| p.raw_dim()).collect();
    let mut adam = Adam::new(&shapes, cfg.optimizer.beta1, cfg.optimizer.beta2);

    let mut losses = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let mut batch_rng = substream(cfg.seed, &[stream::BATCH, step as u64]);
        let indices = sample_indices(data.len(), cfg.batch_size, &mut batch_rng);
        let images = assemble_batch(data, &indices, cfg.seed, step)?;
        let mut noise_rng = substream(cfg.seed, &[stream::NOISE, step as u64]);

        let codes = bundle.encoder.infer(&images);
        let noise = noise_batch(NoiseFamily::Gaussian, sigma, codes.dim(), &mut noise_rng);
        let noisy = &codes + &noise;
        let (predicted, caches) = denoiser.forward_train(&noisy);

        let b = cfg.batch_size as f64;
        let diff = &predicted - &noise;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / b;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite denoiser loss {loss} at step {step}"
            )));
        }
        losses.push(loss);
        let lr = effective_lr(cfg, step);
        logger.log(step, loss, lr)?;

        let grad_out = diff.mapv(|d| 2.0 * d / b);
        grads.reset();
        let _ = denoiser.backward(&caches, &grad_out, Some(&mut grads));
        {
            let mut params = denoiser.params_mut();
            adam.step(&mut params, &grads.slots, lr);
        }
        denoiser.apply_constraints();

        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                bundle.denoiser = Some(denoiser);
                bundle.meta.has_denoiser = true;
                crate::models::save_bundle(
                    &bundle,
                    &dir.join(format!("denoiser-step-{:07}.ckpt", step + 1)),
                )?;
                denoiser = bundle.denoiser.take().expect("reattached above");
            }
        }
    }
    bundle.denoiser = Some(denoiser);
    bundle.meta.has_denoiser = true;
    Ok(TrainRun { bundle, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetConfig;
    use crate::models::{
        Activation, BundleMeta, DecoderConfig, DenoiserConfig, EncoderConfig, PlanStep,
    };
    use crate::nn::Conv2d;
    use ndarray::Array3;

    fn synthetic(count: usize, side: usize, seed: u64) -> DatasetHandle {
        crate::data::load_dataset(&DatasetConfig::Synthetic {
            count,
            height: side,
            width: side,
            seed,
            split: crate::data::Split::Train,
        })
        .unwrap()
    }

    fn desk_tiny(steps: usize, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::desk(Variant::Cifar, 5.0, 1, 6, steps, seed);
        cfg.batch_size = 4;
        cfg
    }

    fn stub_config(channels: usize) -> crate::models::ModelConfig {
        crate::models::ModelConfig::custom(
            Variant::Cifar,
            1,
            48,
            EncoderConfig {
                input_shape: (channels, 8, 8),
                steps: vec![PlanStep::Conv {
                    kernel: 1,
                    stride: 1,
                    out: channels,
                    norm: false,
                    act: Activation::None,
                }],
                codeword_channels: channels,
                variant: Variant::Cifar,
            },
            DecoderConfig {
                steps: vec![],
                output_channels: channels,
                variant: Variant::Cifar,
            },
            DenoiserConfig {
                depth: 3,
                kernel: 3,
                hidden_channels: 2,
                bias_free: true,
                channels,
            },
        )
    }

    /// Identity encoder and decoder: reconstruction equals the noisy input.
    fn identity_bundle() -> ModelBundle {
        let encoder = Network::new(vec![Box::new(Conv2d::identity_1x1(3))]);
        let decoder = Network::new(vec![Box::new(Conv2d::identity_1x1(3))]);
        ModelBundle::from_networks(
            encoder,
            decoder,
            None,
            BundleMeta {
                config: stub_config(3),
                sigma_train: 1.0,
                step: 0,
                has_denoiser: false,
            },
        )
    }

    /// Decoder that maps everything to zero.
    fn zero_decoder_bundle() -> ModelBundle {
        let encoder = Network::new(vec![Box::new(Conv2d::identity_1x1(3))]);
        let mut zero_conv = Conv2d::identity_1x1(3);
        zero_conv.weight.fill(0.0);
        let decoder = Network::new(vec![Box::new(zero_conv)]);
        ModelBundle::from_networks(
            encoder,
            decoder,
            None,
            BundleMeta {
                config: stub_config(3),
                sigma_train: 1.0,
                step: 0,
                has_denoiser: false,
            },
        )
    }

    #[test]
    fn jscc_loss_stub_examples() {
        let bundle = identity_bundle();
        let img = SourceImage::new(Array3::from_elem((3, 8, 8), 0.25));
        let zero_noise = Array1::zeros(img.element_count());
        // Perfect reconstruction, zero noise: loss 0.
        let loss = jscc_loss(&bundle, &[img.clone()], &[zero_noise.clone()]).unwrap();
        assert_eq!(loss, 0.0);
        // Zero decoder on an all-ones image: per-image squared norm is n.
        let ones = SourceImage::new(Array3::from_elem((3, 8, 8), 1.0));
        let n = ones.element_count() as f64;
        let zero_bundle = zero_decoder_bundle();
        let loss = jscc_loss(&zero_bundle, &[ones.clone()], &[zero_noise.clone()]).unwrap();
        assert_eq!(loss, n);
        // Duplicating the batch leaves the mean unchanged.
        let dup = jscc_loss(
            &zero_bundle,
            &[ones.clone(), ones],
            &[zero_noise.clone(), zero_noise],
        )
        .unwrap();
        assert_eq!(dup, n);
    }

    #[test]
    fn zero_denoiser_loss_matches_noise_energy() {
        // F = 0 (all weights zeroed): the loss is the mean noise energy,
        // which concentrates at sigma^2 k over many draws.
        let cfg = desk_tiny(1, 3);
        let mut bundle = ModelBundle::init(cfg.model_config().unwrap(), 0.5, 3).unwrap();
        bundle.init_denoiser(4);
        for p in bundle.denoiser.as_mut().unwrap().params_mut().iter_mut() {
            p.fill(0.0);
        }
        let img = SourceImage::new(Array3::from_elem((3, 16, 16), 0.1));
        let k = bundle.encode(&img).unwrap().k();
        let sigma = 0.5f64;
        let draws = 10_000usize;
        let mut rng = substream(9, &[1]);
        let mut total = 0.0;
        for _ in 0..draws {
            let noise = sample_unit_noise(NoiseFamily::Gaussian, k, &mut rng).mapv(|v| v * sigma);
            total += denoiser_loss(&bundle, &[img.clone()], &[noise]).unwrap();
        }
        let mean = total / draws as f64;
        let expected = sigma * sigma * k as f64;
        assert!(
            (mean - expected).abs() < 0.02 * expected,
            "zero-predictor loss {mean} vs expected {expected}"
        );
        // Teacher-forced case: the prediction equals the noise instance
        // exactly (both zero here), so the loss vanishes.
        let zero_noise = Array1::zeros(k);
        let loss = denoiser_loss(&bundle, &[img], &[zero_noise]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let cfg = desk_tiny(0, 7);
        let data = synthetic(8, 16, 1);
        let run = train_jscc(&cfg, &data).unwrap();
        let fresh = ModelBundle::init(cfg.model_config().unwrap(), cfg.sigma_train(), cfg.seed).unwrap();
        for (a, b) in run.bundle.encoder.params().iter().zip(fresh.encoder.params()) {
            assert_eq!(a, &b);
        }
        for (a, b) in run.bundle.decoder.params().iter().zip(fresh.decoder.params()) {
            assert_eq!(a, &b);
        }
        assert!(run.losses.is_empty());
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let cfg = desk_tiny(8, 42);
        let data = synthetic(16, 16, 2);
        let a = train_jscc(&cfg, &data).unwrap();
        let b = train_jscc(&cfg, &data).unwrap();
        assert_eq!(a.losses.last(), b.losses.last());
        for (pa, pb) in a.bundle.encoder.params().iter().zip(b.bundle.encoder.params()) {
            assert_eq!(pa, &pb);
        }
    }

    #[test]
    fn training_loss_trail_decreases_over_first_half() {
        let cfg = desk_tiny(240, 11);
        let data = synthetic(32, 16, 3);
        let run = train_jscc(&cfg, &data).unwrap();
        let window = 40;
        let head: f64 = run.losses[..window].iter().sum::<f64>() / window as f64;
        let half = run.losses.len() / 2;
        let mid: f64 = run.losses[half - window..half].iter().sum::<f64>() / window as f64;
        assert!(
            mid < head,
            "trailing mean did not decrease: head {head}, mid {mid}"
        );
    }

    #[test]
    fn non_finite_loss_aborts_with_step_diagnostics() {
        // A corrupt model poisons the forward pass; the loop must abort with
        // diagnostics instead of optimizing NaNs.
        let cfg = desk_tiny(5, 13);
        let data = synthetic(8, 16, 4);
        let mut bundle = ModelBundle::init(cfg.model_config().unwrap(), cfg.sigma_train(), 13).unwrap();
        bundle.encoder.params_mut()[0].fill(f64::NAN);
        match train_jscc_from(&cfg, bundle, &data) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("step")),
            Err(e) => panic!("expected numeric failure, got {e}"),
            Ok(_) => panic!("expected numeric failure"),
        }
    }

    #[test]
    fn denoiser_training_runs_and_improves_on_zero_predictor() {
        let cfg = desk_tiny(60, 17);
        let data = synthetic(16, 16, 5);
        let jscc = train_jscc(&cfg, &data).unwrap();
        let mut dn_cfg = desk_tiny(400, 18).for_denoiser();
        dn_cfg.batch_size = 8;
        dn_cfg.optimizer.learning_rate = 2e-3;
        let run = train_denoiser(&dn_cfg, jscc.bundle, &data).unwrap();
        // Held-out check at the trained noise level.
        let sigma = run.bundle.meta.sigma_train;
        let img = data.fetch_raw(0).unwrap();
        let k = run.bundle.encode(&img).unwrap().k();
        let mut rng = substream(19, &[2]);
        let draws = 50;
        let mut total = 0.0;
        for _ in 0..draws {
            let noise = sample_unit_noise(NoiseFamily::Gaussian, k, &mut rng).mapv(|v| v * sigma);
            total += denoiser_loss(&run.bundle, &[img.clone()], &[noise]).unwrap();
        }
        let mean = total / draws as f64;
        let zero_predictor = sigma * sigma * k as f64;
        assert!(
            mean < zero_predictor,
            "trained denoiser ({mean}) must beat the zero predictor ({zero_predictor})"
        );
    }

    #[test]
    fn config_validation_catches_bad_schedules() {
        let mut cfg = desk_tiny(10, 1);
        cfg.optimizer.beta1 = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = desk_tiny(10, 1);
        cfg.lr_decay.step = 11;
        assert!(cfg.validate().is_err());
        let mut cfg = desk_tiny(10, 1);
        cfg.optimizer.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
    }
}
