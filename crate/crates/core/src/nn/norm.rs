//! Channel-wise normalization layers.

use ndarray::{Array1, ArrayD, ArrayViewD, ArrayViewMutD, Axis};

use super::{accumulate, Batch, Cache, Layer};

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

/// Standard batch normalization over `(N, H, W)` per channel with learned
/// scale and shift. Training mode uses batch statistics and updates running
/// statistics; inference mode applies the frozen running statistics.
pub struct BatchNorm2d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        }
    }

    fn apply(&self, x: &Batch, mean: &Array1<f64>, inv_std: &Array1<f64>) -> Batch {
        let mut y = x.clone();
        for (c, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s, g, b) = (mean[c], inv_std[c], self.gamma[c], self.beta[c]);
            plane.mapv_inplace(|v| (v - m) * s * g + b);
        }
        y
    }

    fn normalized(&self, x: &Batch, mean: &Array1<f64>, inv_std: &Array1<f64>) -> Batch {
        let mut xhat = x.clone();
        for (c, mut plane) in xhat.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (mean[c], inv_std[c]);
            plane.mapv_inplace(|v| (v - m) * s);
        }
        xhat
    }
}

impl Layer for BatchNorm2d {
    fn forward_eval(&self, x: &Batch) -> (Batch, Cache) {
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + EPS).sqrt());
        let y = self.apply(x, &self.running_mean, &inv_std);
        let xhat = self.normalized(x, &self.running_mean, &inv_std);
        (
            y,
            Cache::Norm {
                normalized: xhat,
                inv_std,
                train: false,
            },
        )
    }

    fn forward_train(&mut self, x: &Batch) -> (Batch, Cache) {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f64;
        let mut mean = Array1::<f64>::zeros(c);
        let mut var = Array1::<f64>::zeros(c);
        for (ci, plane) in x.axis_iter(Axis(1)).enumerate() {
            let mu = plane.sum() / m;
            mean[ci] = mu;
            var[ci] = plane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
        }
        let inv_std = var.mapv(|v| 1.0 / (v + EPS).sqrt());
        let y = self.apply(x, &mean, &inv_std);
        let xhat = self.normalized(x, &mean, &inv_std);
        self.running_mean
            .zip_mut_with(&mean, |r, b| *r = (1.0 - MOMENTUM) * *r + MOMENTUM * b);
        self.running_var
            .zip_mut_with(&var, |r, b| *r = (1.0 - MOMENTUM) * *r + MOMENTUM * b);
        (
            y,
            Cache::Norm {
                normalized: xhat,
                inv_std,
                train: true,
            },
        )
    }

    fn backward(
        &self,
        cache: &Cache,
        grad_out: &Batch,
        param_grads: Option<&mut [ArrayD<f64>]>,
    ) -> Batch {
        let Cache::Norm {
            normalized: xhat,
            inv_std,
            train,
        } = cache
        else {
            panic!("batch norm backward: wrong cache variant");
        };
        let (n, c, h, w) = grad_out.dim();
        let m = (n * h * w) as f64;
        let mut grad_in = Batch::zeros(grad_out.raw_dim());
        let mut dgamma = Array1::<f64>::zeros(c);
        let mut dbeta = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let g = grad_out.index_axis(Axis(1), ci);
            let xh = xhat.index_axis(Axis(1), ci);
            let sum_g: f64 = g.sum();
            let sum_gx: f64 = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
            dgamma[ci] = sum_gx;
            dbeta[ci] = sum_g;
            let coeff = self.gamma[ci] * inv_std[ci];
            let mut gi = grad_in.index_axis_mut(Axis(1), ci);
            if *train {
                ndarray::Zip::from(&mut gi).and(&g).and(&xh).for_each(|o, &gv, &xv| {
                    *o = coeff * (gv - (sum_g + xv * sum_gx) / m);
                });
            } else {
                ndarray::Zip::from(&mut gi).and(&g).for_each(|o, &gv| {
                    *o = coeff * gv;
                });
            }
        }
        if let Some(grads) = param_grads {
            accumulate(&mut grads[0], &dgamma.into_dyn());
            accumulate(&mut grads[1], &dbeta.into_dyn());
        }
        grad_in
    }

    fn params(&self) -> Vec<ArrayViewD<'_, f64>> {
        vec![self.gamma.view().into_dyn(), self.beta.view().into_dyn()]
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        vec![
            self.gamma.view_mut().into_dyn(),
            self.beta.view_mut().into_dyn(),
        ]
    }

    fn param_names(&self) -> Vec<String> {
        vec!["gamma".to_string(), "beta".to_string()]
    }

    fn buffers(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![
            ("running_mean".to_string(), self.running_mean.view().into_dyn()),
            ("running_var".to_string(), self.running_var.view().into_dyn()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![
            ("gamma".to_string(), self.gamma.view_mut().into_dyn()),
            ("beta".to_string(), self.beta.view_mut().into_dyn()),
            (
                "running_mean".to_string(),
                self.running_mean.view_mut().into_dyn(),
            ),
            (
                "running_var".to_string(),
                self.running_var.view_mut().into_dyn(),
            ),
        ]
    }

    fn name(&self) -> &'static str {
        "batch_norm"
    }
}

/// Scale-only normalization with no additive terms anywhere: activations are
/// divided by the per-channel root mean square (no mean subtraction, no
/// learned shift), keeping the layer positive-homogeneous when its statistics
/// are frozen.
pub struct ScaleNorm {
    pub gamma: Array1<f64>,
    pub running_msq: Array1<f64>,
}

impl ScaleNorm {
    pub fn new(channels: usize) -> Self {
        ScaleNorm {
            gamma: Array1::ones(channels),
            running_msq: Array1::ones(channels),
        }
    }

    fn apply(&self, x: &Batch, inv_scale: &Array1<f64>) -> Batch {
        let mut y = x.clone();
        for (c, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let f = self.gamma[c] * inv_scale[c];
            plane.mapv_inplace(|v| v * f);
        }
        y
    }
}

impl Layer for ScaleNorm {
    fn forward_eval(&self, x: &Batch) -> (Batch, Cache) {
        let inv_scale = self.running_msq.mapv(|v| 1.0 / (v + EPS).sqrt());
        let y = self.apply(x, &inv_scale);
        (
            y,
            Cache::ScaleNorm {
                input: x.clone(),
                inv_scale,
                train: false,
            },
        )
    }

    fn forward_train(&mut self, x: &Batch) -> (Batch, Cache) {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f64;
        let mut msq = Array1::<f64>::zeros(c);
        for (ci, plane) in x.axis_iter(Axis(1)).enumerate() {
            msq[ci] = plane.iter().map(|v| v * v).sum::<f64>() / m;
        }
        let inv_scale = msq.mapv(|v| 1.0 / (v + EPS).sqrt());
        let y = self.apply(x, &inv_scale);
        self.running_msq
            .zip_mut_with(&msq, |r, b| *r = (1.0 - MOMENTUM) * *r + MOMENTUM * b);
        (
            y,
            Cache::ScaleNorm {
                input: x.clone(),
                inv_scale,
                train: true,
            },
        )
    }

    fn backward(
        &self,
        cache: &Cache,
        grad_out: &Batch,
        param_grads: Option<&mut [ArrayD<f64>]>,
    ) -> Batch {
        let Cache::ScaleNorm {
            input,
            inv_scale,
            train,
        } = cache
        else {
            panic!("scale norm backward: wrong cache variant");
        };
        let (n, c, h, w) = grad_out.dim();
        let m = (n * h * w) as f64;
        let mut grad_in = Batch::zeros(grad_out.raw_dim());
        let mut dgamma = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let g = grad_out.index_axis(Axis(1), ci);
            let xv = input.index_axis(Axis(1), ci);
            let s = inv_scale[ci];
            let dot: f64 = g.iter().zip(xv.iter()).map(|(a, b)| a * b).sum();
            dgamma[ci] = s * dot;
            let coeff = self.gamma[ci] * s;
            let mut gi = grad_in.index_axis_mut(Axis(1), ci);
            if *train {
                let shrink = s * s * dot / m;
                ndarray::Zip::from(&mut gi).and(&g).and(&xv).for_each(|o, &gv, &x| {
                    *o = coeff * (gv - x * shrink);
                });
            } else {
                ndarray::Zip::from(&mut gi).and(&g).for_each(|o, &gv| {
                    *o = coeff * gv;
                });
            }
        }
        if let Some(grads) = param_grads {
            accumulate(&mut grads[0], &dgamma.into_dyn());
        }
        grad_in
    }

    fn params(&self) -> Vec<ArrayViewD<'_, f64>> {
        vec![self.gamma.view().into_dyn()]
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        vec![self.gamma.view_mut().into_dyn()]
    }

    fn param_names(&self) -> Vec<String> {
        vec!["gamma".to_string()]
    }

    fn buffers(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![("running_msq".to_string(), self.running_msq.view().into_dyn())]
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![
            ("gamma".to_string(), self.gamma.view_mut().into_dyn()),
            (
                "running_msq".to_string(),
                self.running_msq.view_mut().into_dyn(),
            ),
        ]
    }

    fn name(&self) -> &'static str {
        "scale_norm"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn batch_norm_train_standardizes_channels() {
        let mut bn = BatchNorm2d::new(2);
        let mut x = Array4::<f64>::zeros((2, 2, 2, 2));
        for (i, v) in x.iter_mut().enumerate() {
            *v = i as f64;
        }
        let (y, _) = bn.forward_train(&x);
        for plane in y.axis_iter(Axis(1)) {
            let m = plane.sum() / 8.0;
            let var = plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn scale_norm_is_homogeneous_in_eval_mode() {
        let sn = ScaleNorm::new(3);
        let x = Array4::from_shape_simple_fn((1, 3, 4, 4), || 0.37);
        let (y1, _) = sn.forward_eval(&x);
        let (y2, _) = sn.forward_eval(&(&x * 10.0));
        for (a, b) in y1.iter().zip(y2.iter()) {
            assert!((b - a * 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_norm_maps_zero_to_zero() {
        let mut sn = ScaleNorm::new(2);
        let x = Array4::<f64>::zeros((1, 2, 3, 3));
        let (y_train, _) = sn.forward_train(&x);
        let (y_eval, _) = sn.forward_eval(&x);
        assert!(y_train.iter().all(|&v| v == 0.0));
        assert!(y_eval.iter().all(|&v| v == 0.0));
    }
}
