//! Additive-noise channel model: noise sampling, SNR accounting, and
//! rate (codeword-dimension) arithmetic.
//!
//! All randomness is derived from named, seedable substreams so that every
//! noise draw is reproducible from `(seed, image index, realization index)`
//! alone, independent of worker scheduling.

use ndarray::{Array1, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::signal::Codeword;

/// Noise family of the additive channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    Gaussian,
    Laplace,
}

impl std::fmt::Display for NoiseFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NoiseFamily::Gaussian => write!(f, "gaussian"),
            NoiseFamily::Laplace => write!(f, "laplace"),
        }
    }
}

/// Additive channel description: noise family, per-dimension standard
/// deviation, and the RNG stream identity.
///
/// For the Laplace family the scale parameter is always derived as
/// `b = sigma / sqrt(2)` so the per-dimension variance equals `sigma^2`;
/// it is never stored independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub family: NoiseFamily,
    pub sigma: f64,
    pub seed: u64,
}

impl ChannelSpec {
    pub fn new(family: NoiseFamily, sigma: f64, seed: u64) -> Result<Self> {
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(Error::Config(format!(
                "channel sigma must be positive and finite, got {sigma}"
            )));
        }
        Ok(ChannelSpec { family, sigma, seed })
    }

    /// Laplace scale parameter matching this spec's variance.
    pub fn laplace_scale(&self) -> f64 {
        self.sigma / std::f64::consts::SQRT_2
    }
}

/// Source/codeword dimension bookkeeping.
///
/// The channel-per-pixel ratio is `0.5 * k / n` by definition; it is derived
/// from the stored dimensions rather than stored separately, so the identity
/// holds exactly by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateSpec {
    pub input_dim: usize,
    pub codeword_dim: usize,
}

impl RateSpec {
    pub fn new(input_dim: usize, codeword_dim: usize) -> Result<Self> {
        if input_dim == 0 || codeword_dim == 0 {
            return Err(Error::Config(
                "rate dimensions must be positive".to_string(),
            ));
        }
        if codeword_dim >= input_dim {
            return Err(Error::Config(format!(
                "codeword dimension k={codeword_dim} must be smaller than input dimension n={input_dim}"
            )));
        }
        Ok(RateSpec { input_dim, codeword_dim })
    }

    /// Channel uses per source dimension: `0.5 * k / n`. The factor 0.5
    /// accounts for complex-valued transmission carrying two real values
    /// per channel use.
    pub fn cpp(&self) -> f64 {
        0.5 * self.codeword_dim as f64 / self.input_dim as f64
    }
}

/// Codeword dimension for a source of `input_dim` elements at the exact
/// rational rate `cpp = num/den`. Errors when `2 * n * num` is not divisible
/// by `den` or when the resulting `k` is not below `n`.
pub fn codeword_dim_for_cpp(input_dim: usize, cpp_num: u32, cpp_den: u32) -> Result<usize> {
    if cpp_num == 0 || cpp_den == 0 {
        return Err(Error::Config("cpp must be a positive rational".to_string()));
    }
    let numer = 2 * input_dim as u64 * cpp_num as u64;
    let den = cpp_den as u64;
    if !numer.is_multiple_of(den) {
        return Err(Error::Config(format!(
            "cpp {cpp_num}/{cpp_den} does not yield an integer codeword dimension for n={input_dim}"
        )));
    }
    let k = (numer / den) as usize;
    RateSpec::new(input_dim, k).map(|r| r.codeword_dim)
}

/// Noise standard deviation for a requested SNR under the full-power
/// convention: a codeword at the power bound (`||z||^2 = k`) against expected
/// noise energy `k * sigma^2` yields `snr_db`, i.e. `sigma = 10^(-snr_db/20)`.
///
/// The value does not depend on the rate; the argument documents which
/// codeword geometry the convention refers to.
pub fn sigma_from_snr(snr_db: f64, _rate: &RateSpec) -> f64 {
    sigma_from_snr_db(snr_db)
}

/// Rate-free form of [`sigma_from_snr`].
pub fn sigma_from_snr_db(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 20.0)
}

/// Inverse of [`sigma_from_snr_db`]: the nominal SNR a full-power codeword
/// sees at noise level `sigma`.
pub fn snr_db_from_sigma(sigma: f64) -> f64 {
    -20.0 * sigma.log10()
}

/// Realized SNR in dB: `10 log10(||codeword||^2 / ||noise||^2)`.
///
/// All-zero noise is a division-by-zero error; an all-zero codeword returns
/// the `-inf` sentinel.
pub fn measure_snr_db(codeword: &Codeword, noise: &[f64]) -> Result<f64> {
    if codeword.k() != noise.len() {
        return Err(Error::Config(format!(
            "codeword dimension {} does not match noise dimension {}",
            codeword.k(),
            noise.len()
        )));
    }
    let noise_energy: f64 = noise.iter().map(|v| v * v).sum();
    if noise_energy == 0.0 {
        return Err(Error::Numeric(
            "cannot measure SNR against all-zero noise".to_string(),
        ));
    }
    let signal_energy = codeword.squared_norm();
    if signal_energy == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(10.0 * (signal_energy / noise_energy).log10())
}

/// Deterministic substream derived by hashing `(domain, seed, path)`.
///
/// Distinct paths give statistically independent streams; the same path
/// always reproduces the same stream regardless of call order or worker
/// identity.
pub fn substream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"jscc.substream.v1");
    hasher.update(seed.to_le_bytes());
    for part in path {
        hasher.update(part.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}

/// Stream-path tags used by the library so that independent consumers of the
/// same experiment seed never collide.
pub mod stream {
    pub const NOISE: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const SYNTHETIC: u64 = 3;
    pub const PATCH: u64 = 4;
    pub const INIT: u64 = 5;
    pub const BATCH: u64 = 6;
}

fn laplace_unit(rng: &mut ChaCha8Rng) -> f64 {
    // Inverse-CDF sampling of a standard Laplace (b = 1). Uniform draw is
    // kept strictly inside (0, 1) to avoid log(0).
    let mut u: f64 = rng.random();
    if u <= 0.0 {
        u = f64::MIN_POSITIVE;
    }
    let centered = u - 0.5;
    -centered.signum() * (1.0 - 2.0 * centered.abs()).max(f64::MIN_POSITIVE).ln()
}

/// One unit-variance draw of the given family.
pub fn sample_unit(family: NoiseFamily, rng: &mut ChaCha8Rng) -> f64 {
    match family {
        NoiseFamily::Gaussian => <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng),
        // Standard Laplace has variance 2 b^2; b = 1/sqrt(2) gives variance 1.
        NoiseFamily::Laplace => laplace_unit(rng) / std::f64::consts::SQRT_2,
    }
}

/// `dim` i.i.d. unit-variance samples of `family` from `rng`.
pub fn sample_unit_noise(family: NoiseFamily, dim: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_iter((0..dim).map(|_| sample_unit(family, rng)))
}

/// `dim` i.i.d. samples with per-dimension standard deviation `spec.sigma`.
///
/// Deterministic for a fixed spec: every call re-derives the same substream
/// from `spec.seed`, so two calls on the same spec return identical vectors.
/// Use [`sample_noise_with`] to draw from an explicit stream instead.
pub fn sample_noise(spec: &ChannelSpec, dim: usize) -> Array1<f64> {
    let mut rng = substream(spec.seed, &[stream::NOISE]);
    sample_noise_with(spec, dim, &mut rng)
}

/// `dim` samples at `spec.sigma` drawn from the provided stream.
pub fn sample_noise_with(spec: &ChannelSpec, dim: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let mut out = sample_unit_noise(spec.family, dim, rng);
    out.mapv_inplace(|v| v * spec.sigma);
    out
}

/// Sends a codeword through the additive channel: returns `codeword + noise`.
///
/// The result is not required to satisfy the power bound; noise may push it
/// outside the radius-`sqrt(k)` ball.
pub fn transmit(codeword: &Codeword, spec: &ChannelSpec) -> Codeword {
    let noise = sample_noise(spec, codeword.k());
    add_noise(codeword, &noise)
}

/// `codeword + noise` for an explicit noise vector (in row-major codeword order).
pub fn add_noise(codeword: &Codeword, noise: &Array1<f64>) -> Codeword {
    assert_eq!(codeword.k(), noise.len(), "noise dimension mismatch");
    let shaped: Array3<f64> = noise
        .clone()
        .into_shape_with_order(codeword.data.raw_dim())
        .expect("noise reshape");
    Codeword::new(&codeword.data + &shaped, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array3;

    fn full_power_codeword(c: usize, h: usize, w: usize) -> Codeword {
        // All elements 1.0: squared norm == k.
        Codeword::new(Array3::from_elem((c, h, w), 1.0), true)
    }

    #[test]
    fn sigma_from_snr_reference_points() {
        let rate = RateSpec::new(3072, 1024).unwrap();
        assert_eq!(sigma_from_snr(0.0, &rate), 1.0);
        let s10 = sigma_from_snr(10.0, &rate);
        assert_relative_eq!(s10 * s10, 0.1, max_relative = 1e-12);
        let s7 = sigma_from_snr(7.0, &rate);
        assert_relative_eq!(s7 * s7, 10f64.powf(-0.7), max_relative = 1e-12);
    }

    #[test]
    fn rate_spec_validation_and_cpp() {
        let rate = RateSpec::new(3072, 1024).unwrap();
        assert_relative_eq!(rate.cpp(), 1.0 / 6.0, max_relative = 1e-15);
        assert!(RateSpec::new(1024, 1024).is_err());
        assert!(RateSpec::new(0, 1).is_err());
        assert_eq!(codeword_dim_for_cpp(3072, 1, 6).unwrap(), 1024);
        assert_eq!(codeword_dim_for_cpp(3072, 1, 12).unwrap(), 512);
        assert!(codeword_dim_for_cpp(100, 1, 3).is_err());
    }

    #[test]
    fn measured_snr_matches_energy_ratio() {
        let z = full_power_codeword(4, 4, 4);
        let k = z.k();
        let equal = vec![1.0; k];
        assert_relative_eq!(measure_snr_db(&z, &equal).unwrap(), 0.0);
        // Noise energy k/10 -> 10 dB.
        let tenth = vec![(0.1f64).sqrt(); k];
        assert_relative_eq!(measure_snr_db(&z, &tenth).unwrap(), 10.0, max_relative = 1e-12);
    }

    #[test]
    fn measured_snr_edge_cases() {
        let zero = Codeword::new(Array3::zeros((2, 2, 2)), true);
        let noise = vec![1.0; 8];
        assert_eq!(measure_snr_db(&zero, &noise).unwrap(), f64::NEG_INFINITY);
        let z = full_power_codeword(2, 2, 2);
        assert!(matches!(
            measure_snr_db(&z, &vec![0.0; 8]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn sample_noise_is_deterministic_per_spec() {
        let spec = ChannelSpec::new(NoiseFamily::Gaussian, 0.5, 7).unwrap();
        let a = sample_noise(&spec, 64);
        let b = sample_noise(&spec, 64);
        assert_eq!(a, b);
        let other = ChannelSpec::new(NoiseFamily::Gaussian, 0.5, 8).unwrap();
        assert_ne!(sample_noise(&other, 64), a);
    }

    #[test]
    fn laplace_scale_matches_variance_contract() {
        let spec = ChannelSpec::new(NoiseFamily::Laplace, 1.0, 1).unwrap();
        assert_relative_eq!(spec.laplace_scale(), 1.0 / 2f64.sqrt(), max_relative = 1e-15);
    }

    #[test]
    fn sampler_variances_match_sigma() {
        for family in [NoiseFamily::Gaussian, NoiseFamily::Laplace] {
            let spec = ChannelSpec::new(family, 0.5, 3).unwrap();
            let n = 1_000_000;
            let draw = sample_noise(&spec, n);
            let var = draw.iter().map(|v| v * v).sum::<f64>() / n as f64;
            assert!(
                (var - 0.25).abs() < 0.01 * 0.25 * 4.0,
                "{family}: empirical variance {var} too far from 0.25"
            );
        }
    }

    #[test]
    fn transmit_vanishing_noise_is_identity() {
        let z = full_power_codeword(4, 4, 4);
        let spec = ChannelSpec::new(NoiseFamily::Gaussian, 1e-12, 5).unwrap();
        let y = transmit(&z, &spec);
        for (a, b) in y.data.iter().zip(z.data.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(!y.normalized);
    }

    #[test]
    fn transmit_is_linear_in_noise() {
        let z = full_power_codeword(4, 4, 4);
        let spec = ChannelSpec::new(NoiseFamily::Laplace, 0.7, 11).unwrap();
        let y = transmit(&z, &spec);
        let raw = sample_noise(&spec, z.k());
        // Bitwise: transmit is exactly z + (the deterministic draw).
        let rebuilt = add_noise(&z, &raw);
        assert_eq!(y.data, rebuilt.data);
        // And subtracting z recovers the draw up to round-off.
        let diff = &y.data - &z.data;
        for (d, r) in diff.iter().zip(raw.iter()) {
            assert!((d - r).abs() < 1e-12);
        }
        // An all-zero codeword transmits to exactly the noise draw.
        let zero = Codeword::new(Array3::zeros((4, 4, 4)), true);
        let y0 = transmit(&zero, &spec);
        for (a, r) in y0.data.iter().zip(raw.iter()) {
            assert_eq!(a, r);
        }
    }

    #[test]
    fn full_power_snr_concentrates_within_half_db() {
        // At k = 1024 the noise energy concentrates sharply; a single draw
        // lands within 0.5 dB of nominal with probability > 0.99.
        let z = full_power_codeword(16, 8, 8);
        let spec = ChannelSpec::new(NoiseFamily::Gaussian, 1.0, 400).unwrap();
        let mut rng = substream(spec.seed, &[stream::NOISE, 77]);
        let draws = 2000;
        let mut within = 0;
        for _ in 0..draws {
            let noise = sample_noise_with(&spec, z.k(), &mut rng);
            let snr = measure_snr_db(&z, noise.as_slice().unwrap()).unwrap();
            if snr.abs() < 0.5 {
                within += 1;
            }
        }
        let frac = within as f64 / draws as f64;
        assert!(frac >= 0.98, "only {frac} of draws within 0.5 dB");
    }

    #[test]
    fn substreams_are_stable_and_distinct() {
        let mut a = substream(42, &[1, 2, 3]);
        let mut b = substream(42, &[1, 2, 3]);
        assert_eq!(a.random::<u64>(), b.random::<u64>());
        let mut c = substream(42, &[1, 2, 4]);
        assert_ne!(substream(42, &[1, 2, 3]).random::<u64>(), c.random::<u64>());
    }
}
