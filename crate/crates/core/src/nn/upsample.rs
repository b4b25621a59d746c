//! Bilinear 2x upsampling with an exact adjoint for the backward pass.

use ndarray::{Array4, ArrayD, Axis};

use super::{Batch, Cache, Layer};

/// Tap table: for each output index, the two source indices and weights of
/// the half-pixel-aligned bilinear interpolation (edges clamp).
fn taps(out_len: usize) -> Vec<(usize, usize, f64, f64)> {
    let in_len = out_len / 2;
    (0..out_len)
        .map(|i| {
            let src = (i as f64 + 0.5) / 2.0 - 0.5;
            let floor = src.floor();
            let t = src - floor;
            let i0 = floor as isize;
            let a = i0.clamp(0, in_len as isize - 1) as usize;
            let b = (i0 + 1).clamp(0, in_len as isize - 1) as usize;
            (a, b, 1.0 - t, t)
        })
        .collect()
}

pub struct Upsample2x;

impl Layer for Upsample2x {
    fn forward_eval(&self, x: &Batch) -> (Batch, Cache) {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = (2 * h, 2 * w);
        let row_taps = taps(oh);
        let col_taps = taps(ow);
        let mut out = Array4::<f64>::zeros((n, c, oh, ow));
        for ni in 0..n {
            for ci in 0..c {
                let plane = x.index_axis(Axis(0), ni);
                let plane = plane.index_axis(Axis(0), ci);
                let mut target = out.index_axis_mut(Axis(0), ni);
                let mut target = target.index_axis_mut(Axis(0), ci);
                for (oy, &(y0, y1, wy0, wy1)) in row_taps.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in col_taps.iter().enumerate() {
                        target[[oy, ox]] = wy0 * (wx0 * plane[[y0, x0]] + wx1 * plane[[y0, x1]])
                            + wy1 * (wx0 * plane[[y1, x0]] + wx1 * plane[[y1, x1]]);
                    }
                }
            }
        }
        (out, Cache::None)
    }

    fn backward(
        &self,
        _cache: &Cache,
        grad_out: &Batch,
        _param_grads: Option<&mut [ArrayD<f64>]>,
    ) -> Batch {
        let (n, c, oh, ow) = grad_out.dim();
        let (h, w) = (oh / 2, ow / 2);
        let row_taps = taps(oh);
        let col_taps = taps(ow);
        let mut grad_in = Array4::<f64>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let g = grad_out.index_axis(Axis(0), ni);
                let g = g.index_axis(Axis(0), ci);
                let mut target = grad_in.index_axis_mut(Axis(0), ni);
                let mut target = target.index_axis_mut(Axis(0), ci);
                for (oy, &(y0, y1, wy0, wy1)) in row_taps.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in col_taps.iter().enumerate() {
                        let gv = g[[oy, ox]];
                        target[[y0, x0]] += wy0 * wx0 * gv;
                        target[[y0, x1]] += wy0 * wx1 * gv;
                        target[[y1, x0]] += wy1 * wx0 * gv;
                        target[[y1, x1]] += wy1 * wx1 * gv;
                    }
                }
            }
        }
        grad_in
    }

    fn name(&self) -> &'static str {
        "upsample2"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubles_spatial_dimensions() {
        let layer = Upsample2x;
        let x = Array4::<f64>::ones((1, 2, 4, 6));
        let (y, _) = layer.forward_eval(&x);
        assert_eq!(y.dim(), (1, 2, 8, 12));
        // Constant input stays constant under interpolation.
        assert!(y.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn backward_is_the_adjoint() {
        // <Ax, y> == <x, A^T y> for random x, y.
        let layer = Upsample2x;
        let mut seed = 1234u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let x = Array4::from_shape_simple_fn((1, 1, 3, 5), &mut next);
        let y = Array4::from_shape_simple_fn((1, 1, 6, 10), &mut next);
        let (ax, cache) = layer.forward_eval(&x);
        let aty = layer.backward(&cache, &y, None);
        let lhs: f64 = ax.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(aty.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
