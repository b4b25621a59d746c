//! Core signal types: source images and channel codewords.

use ndarray::Array3;

/// A source image as a channel-first `(C, H, W)` tensor with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceImage {
    pub data: Array3<f64>,
}

impl SourceImage {
    pub fn new(data: Array3<f64>) -> Self {
        SourceImage { data }
    }

    /// `(C, H, W)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.data.dim();
        (d.0, d.1, d.2)
    }

    /// Source dimension `n = C * H * W`.
    pub fn element_count(&self) -> usize {
        self.data.len()
    }
}

/// A codeword living in the `k`-dimensional latent space, stored as
/// `(channels, height, width)`.
///
/// Encoder outputs satisfy the power bound `||data||^2 <= k` and carry
/// `normalized = true`. Channel outputs and iterative-decoder iterates reuse
/// the type but are exempt from the bound (`normalized = false`).
#[derive(Debug, Clone, PartialEq)]
pub struct Codeword {
    pub data: Array3<f64>,
    pub normalized: bool,
}

impl Codeword {
    pub fn new(data: Array3<f64>, normalized: bool) -> Self {
        Codeword { data, normalized }
    }

    /// Codeword dimension `k`.
    pub fn k(&self) -> usize {
        self.data.len()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.data.dim();
        (d.0, d.1, d.2)
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}
