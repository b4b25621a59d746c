//! 2-D convolution with explicit forward and reverse passes.
//!
//! Each sample runs as one column-gather plus one matrix product (the
//! sample's output layout coincides with the gemm result, so there are no
//! layout copies). Stride-1 gathers copy contiguous runs. Samples fan out
//! across threads; parameter-gradient reductions happen in sample order, so
//! results are independent of scheduling.

use ndarray::parallel::prelude::*;
use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView3, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{accumulate, Batch, Cache, Layer};

pub struct Conv2d {
    /// `(C_out, C_in, k, k)`.
    pub weight: Array4<f64>,
    pub bias: Option<Array1<f64>>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Fan-in-scaled uniform initialization; `padding = kernel / 2` keeps
    /// spatial dimensions stable at stride 1 and halves them at stride 2 for
    /// even inputs.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        with_bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = Array4::from_shape_simple_fn((out_channels, in_channels, kernel, kernel), || {
            rng.random_range(-bound..bound)
        });
        let bias = with_bias
            .then(|| Array1::from_shape_simple_fn(out_channels, || rng.random_range(-bound..bound)));
        Conv2d {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        }
    }

    /// Identity-kernel 1x1 convolution (used by tests for stub models).
    pub fn identity_1x1(channels: usize) -> Self {
        let mut weight = Array4::zeros((channels, channels, 1, 1));
        for c in 0..channels {
            weight[[c, c, 0, 0]] = 1.0;
        }
        Conv2d {
            weight,
            bias: None,
            stride: 1,
            padding: 0,
        }
    }

    fn kernel(&self) -> usize {
        self.weight.dim().3
    }

    fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn weight_matrix(&self) -> Array2<f64> {
        let (co, ci, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((co, ci * k * k))
            .expect("contiguous weight")
            .to_owned()
    }
}

/// Gathers one sample's receptive fields into a `(C_in k^2, OH*OW)` matrix.
fn im2col(
    x: &ArrayView3<'_, f64>,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((c * kernel * kernel, oh * ow));
    let x_slice = x.as_slice().expect("contiguous sample");
    for ci in 0..c {
        let plane = &x_slice[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ci * kernel + ki) * kernel + kj;
                let mut row_view = cols.row_mut(row);
                let row_slice = row_view.as_slice_mut().expect("contiguous row");
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let base = oy * ow;
                    if stride == 1 {
                        // Valid ox range: 0 <= ox + kj - pad < w.
                        let lo = pad.saturating_sub(kj);
                        let hi = (w + pad - kj).min(ow);
                        if lo < hi {
                            let src_lo = lo + kj - pad;
                            row_slice[base + lo..base + hi]
                                .copy_from_slice(&src_row[src_lo..src_lo + (hi - lo)]);
                        }
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                row_slice[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds a column matrix back onto the input
/// gradient.
fn col2im_add(
    dcols: &Array2<f64>,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut ndarray::ArrayViewMut3<'_, f64>,
) {
    let (c, h, w) = out.dim();
    let out_slice = out.as_slice_mut().expect("contiguous gradient");
    for ci in 0..c {
        let plane = &mut out_slice[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ci * kernel + ki) * kernel + kj;
                let row_view = dcols.row(row);
                let row_slice = row_view.as_slice().expect("contiguous row");
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let base = oy * ow;
                    if stride == 1 {
                        let lo = pad.saturating_sub(kj);
                        let hi = (w + pad - kj).min(ow);
                        if lo < hi {
                            let dst_lo = lo + kj - pad;
                            for (d, s) in dst_row[dst_lo..dst_lo + (hi - lo)]
                                .iter_mut()
                                .zip(&row_slice[base + lo..base + hi])
                            {
                                *d += s;
                            }
                        }
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += row_slice[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Layer for Conv2d {
    fn forward_eval(&self, x: &Batch) -> (Batch, Cache) {
        let (n, _, h, w) = x.dim();
        let (oh, ow) = self.out_spatial(h, w);
        let co = self.weight.dim().0;
        let k = self.kernel();
        let wmat = self.weight_matrix();
        let mut out = Array4::<f64>::zeros((n, co, oh, ow));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(mut o, xs)| {
                let cols = im2col(&xs, k, self.stride, self.padding, oh, ow);
                let mut y = wmat.dot(&cols);
                if let Some(bias) = &self.bias {
                    for (mut row, b) in y.axis_iter_mut(Axis(0)).zip(bias.iter()) {
                        row.mapv_inplace(|v| v + b);
                    }
                }
                o.assign(
                    &y.into_shape_with_order((co, oh, ow))
                        .expect("conv output reshape"),
                );
            });
        (out, Cache::Input(x.clone()))
    }

    fn backward(
        &self,
        cache: &Cache,
        grad_out: &Batch,
        param_grads: Option<&mut [ArrayD<f64>]>,
    ) -> Batch {
        let Cache::Input(x) = cache else {
            panic!("conv backward: wrong cache variant");
        };
        let (n, ci, h, w) = x.dim();
        let (_, co, oh, ow) = grad_out.dim();
        let k = self.kernel();
        let wmat = self.weight_matrix();
        let want_params = param_grads.is_some();

        let mut grad_in = Array4::<f64>::zeros((n, ci, h, w));
        // Per-sample contributions; parameter gradients are reduced in
        // sample order afterwards so results do not depend on scheduling.
        let per_sample: Vec<Option<(Array2<f64>, Array1<f64>)>> = grad_in
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .zip(grad_out.axis_iter(Axis(0)).into_par_iter())
            .map(|((mut gi, xs), gs)| {
                let g_mat = gs
                    .into_shape_with_order((co, oh * ow))
                    .expect("grad reshape");
                let dcols = wmat.t().dot(&g_mat);
                col2im_add(&dcols, k, self.stride, self.padding, oh, ow, &mut gi);
                if want_params {
                    let cols = im2col(&xs, k, self.stride, self.padding, oh, ow);
                    let dw = g_mat.dot(&cols.t());
                    let db = g_mat.sum_axis(Axis(1));
                    Some((dw, db))
                } else {
                    None
                }
            })
            .collect();

        if let Some(grads) = param_grads {
            let (co_, ci_, k_, _) = self.weight.dim();
            let mut dw_total = Array2::<f64>::zeros((co_, ci_ * k_ * k_));
            let mut db_total = Array1::<f64>::zeros(co_);
            for entry in per_sample.into_iter().flatten() {
                dw_total += &entry.0;
                db_total += &entry.1;
            }
            accumulate(
                &mut grads[0],
                &dw_total
                    .into_shape_with_order((co_, ci_, k_, k_))
                    .expect("dw reshape")
                    .into_dyn(),
            );
            if self.bias.is_some() {
                accumulate(&mut grads[1], &db_total.into_dyn());
            }
        }
        grad_in
    }

    fn params(&self) -> Vec<ArrayViewD<'_, f64>> {
        let mut v = vec![self.weight.view().into_dyn()];
        if let Some(b) = &self.bias {
            v.push(b.view().into_dyn());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut v = vec![self.weight.view_mut().into_dyn()];
        if let Some(b) = &mut self.bias {
            v.push(b.view_mut().into_dyn());
        }
        v
    }

    fn param_names(&self) -> Vec<String> {
        let mut v = vec!["weight".to_string()];
        if self.bias.is_some() {
            v.push("bias".to_string());
        }
        v
    }

    fn name(&self) -> &'static str {
        "conv"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, Dimension};
    use rand::SeedableRng;

    #[test]
    fn shapes_follow_stride_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new(3, 8, 5, 2, true, &mut rng);
        let x = Array4::<f64>::zeros((2, 3, 32, 32));
        let (y, _) = conv.forward_eval(&x);
        assert_eq!(y.dim(), (2, 8, 16, 16));
        let conv1 = Conv2d::new(3, 4, 7, 1, true, &mut rng);
        let (y1, _) = conv1.forward_eval(&x);
        assert_eq!(y1.dim(), (2, 4, 32, 32));
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let conv = Conv2d::identity_1x1(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array4::from_shape_simple_fn((1, 3, 4, 4), || rng.random_range(-1.0..1.0));
        let (y, _) = conv.forward_eval(&x);
        assert_eq!(y, x);
    }

    #[test]
    fn batch_rows_match_single_sample_results() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let conv = Conv2d::new(3, 5, 3, 2, true, &mut rng);
        let x = Array4::from_shape_simple_fn((9, 3, 10, 10), || rng.random_range(-1.0..1.0));
        let (y, _) = conv.forward_eval(&x);
        for i in 0..9 {
            let xi = x.index_axis(Axis(0), i).to_owned().insert_axis(Axis(0));
            let (yi, _) = conv.forward_eval(&xi);
            assert_eq!(yi.index_axis(Axis(0), 0), y.index_axis(Axis(0), i));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::new(2, 3, 3, 2, true, &mut rng);
        let x = Array4::from_shape_simple_fn((2, 2, 6, 6), || rng.random_range(-1.0..1.0));
        let (y, cache) = conv.forward_eval(&x);
        // Loss = sum(y * t) for a fixed random t; dL/dy = t.
        let t = Array4::from_shape_simple_fn(y.raw_dim(), || rng.random_range(-1.0..1.0));
        let mut grads = vec![
            ArrayD::zeros(conv.weight.raw_dim().into_dyn()),
            ArrayD::zeros(conv.bias.as_ref().unwrap().raw_dim().into_dyn()),
        ];
        let gx = conv.backward(&cache, &t, Some(&mut grads));

        let loss = |c: &Conv2d, x: &Batch| -> f64 {
            let (y, _) = c.forward_eval(x);
            (&y * &t).sum()
        };
        let eps = 1e-6;
        // Input gradient check at a few positions.
        let mut x_pert = x.clone();
        for &(n, c, i, j) in &[(0usize, 0usize, 0usize, 0usize), (1, 1, 3, 4), (0, 1, 5, 5)] {
            x_pert[[n, c, i, j]] += eps;
            let fp = loss(&conv, &x_pert);
            x_pert[[n, c, i, j]] -= 2.0 * eps;
            let fm = loss(&conv, &x_pert);
            x_pert[[n, c, i, j]] += eps;
            let fd = (fp - fm) / (2.0 * eps);
            assert!((fd - gx[[n, c, i, j]]).abs() < 1e-6, "input grad mismatch");
        }
        // Weight gradient check.
        let mut conv_pert = Conv2d {
            weight: conv.weight.clone(),
            bias: conv.bias.clone(),
            stride: conv.stride,
            padding: conv.padding,
        };
        for &(o, c, i, j) in &[(0usize, 0usize, 0usize, 0usize), (2, 1, 2, 2)] {
            conv_pert.weight[[o, c, i, j]] += eps;
            let fp = loss(&conv_pert, &x);
            conv_pert.weight[[o, c, i, j]] -= 2.0 * eps;
            let fm = loss(&conv_pert, &x);
            conv_pert.weight[[o, c, i, j]] += eps;
            let fd = (fp - fm) / (2.0 * eps);
            assert!((fd - grads[0][[o, c, i, j]]).abs() < 1e-6, "weight grad mismatch");
        }
    }

    #[test]
    fn grad_skip_leaves_params_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::new(2, 2, 3, 1, false, &mut rng);
        let x = Array4::from_shape_simple_fn((1, 2, 5, 5), || rng.random_range(-1.0..1.0));
        let (y, cache) = conv.forward_eval(&x);
        let g = Array4::ones(y.raw_dim());
        let _ = conv.backward(&cache, &g, None);
    }
}
