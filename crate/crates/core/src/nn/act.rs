//! Elementwise activations.

use ndarray::{Array1, ArrayD, ArrayViewD, ArrayViewMutD};

use super::{accumulate, Batch, Cache, Layer};

/// Parameterized rectified linear unit with a single trainable slope shared
/// within the layer: `u` for `u >= 0`, `rho * u` otherwise, with `rho >= 0`.
pub struct PRelu {
    pub rho: Array1<f64>,
}

impl PRelu {
    pub fn new(initial_slope: f64) -> Self {
        PRelu {
            rho: Array1::from_elem(1, initial_slope),
        }
    }

    fn slope(&self) -> f64 {
        self.rho[0]
    }
}

impl Layer for PRelu {
    fn forward_eval(&self, x: &Batch) -> (Batch, Cache) {
        let rho = self.slope();
        let y = x.mapv(|v| if v >= 0.0 { v } else { rho * v });
        (y, Cache::Input(x.clone()))
    }

    fn backward(
        &self,
        cache: &Cache,
        grad_out: &Batch,
        param_grads: Option<&mut [ArrayD<f64>]>,
    ) -> Batch {
        let Cache::Input(x) = cache else {
            panic!("prelu backward: wrong cache variant");
        };
        let rho = self.slope();
        let mut grad_in = grad_out.clone();
        grad_in.zip_mut_with(x, |g, &v| {
            if v < 0.0 {
                *g *= rho;
            }
        });
        if let Some(grads) = param_grads {
            let drho: f64 = grad_out
                .iter()
                .zip(x.iter())
                .filter(|(_, &v)| v < 0.0)
                .map(|(g, &v)| g * v)
                .sum();
            accumulate(&mut grads[0], &Array1::from_elem(1, drho).into_dyn());
        }
        grad_in
    }

    fn params(&self) -> Vec<ArrayViewD<'_, f64>> {
        vec![self.rho.view().into_dyn()]
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        vec![self.rho.view_mut().into_dyn()]
    }

    fn param_names(&self) -> Vec<String> {
        vec!["rho".to_string()]
    }

    fn apply_constraints(&mut self) {
        if self.rho[0] < 0.0 {
            self.rho[0] = 0.0;
        }
    }

    fn name(&self) -> &'static str {
        "prelu"
    }
}

pub struct Relu;

impl Layer for Relu {
    fn forward_eval(&self, x: &Batch) -> (Batch, Cache) {
        (x.mapv(|v| v.max(0.0)), Cache::Input(x.clone()))
    }

    fn backward(
        &self,
        cache: &Cache,
        grad_out: &Batch,
        _param_grads: Option<&mut [ArrayD<f64>]>,
    ) -> Batch {
        let Cache::Input(x) = cache else {
            panic!("relu backward: wrong cache variant");
        };
        let mut grad_in = grad_out.clone();
        grad_in.zip_mut_with(x, |g, &v| {
            if v <= 0.0 {
                *g = 0.0;
            }
        });
        grad_in
    }

    fn name(&self) -> &'static str {
        "relu"
    }
}

pub struct TanhLayer;

impl Layer for TanhLayer {
    fn forward_eval(&self, x: &Batch) -> (Batch, Cache) {
        let y = x.mapv(f64::tanh);
        let cache = Cache::Output(y.clone());
        (y, cache)
    }

    fn backward(
        &self,
        cache: &Cache,
        grad_out: &Batch,
        _param_grads: Option<&mut [ArrayD<f64>]>,
    ) -> Batch {
        let Cache::Output(y) = cache else {
            panic!("tanh backward: wrong cache variant");
        };
        let mut grad_in = grad_out.clone();
        grad_in.zip_mut_with(y, |g, &v| *g *= 1.0 - v * v);
        grad_in
    }

    fn name(&self) -> &'static str {
        "tanh"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn prelu_matches_definition() {
        let layer = PRelu::new(0.25);
        let x = Array4::from_shape_vec((1, 1, 1, 3), vec![1.0, -2.0, 0.0]).unwrap();
        let (y, _) = layer.forward_eval(&x);
        assert_eq!(y.as_slice().unwrap(), &[1.0, -0.5, 0.0]);
        // Zero slope degenerates to plain ReLU.
        let relu_like = PRelu::new(0.0);
        let (y0, _) = relu_like.forward_eval(&x);
        assert_eq!(y0.as_slice().unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn prelu_constraint_clamps_negative_slope() {
        let mut layer = PRelu::new(0.25);
        layer.rho[0] = -0.1;
        layer.apply_constraints();
        assert_eq!(layer.rho[0], 0.0);
    }

    #[test]
    fn tanh_gradient_uses_output() {
        let layer = TanhLayer;
        let x = Array4::from_elem((1, 1, 1, 1), 0.5);
        let (y, cache) = layer.forward_eval(&x);
        let g = Array4::ones((1, 1, 1, 1));
        let gi = layer.backward(&cache, &g, None);
        let expected = 1.0 - y[[0, 0, 0, 0]] * y[[0, 0, 0, 0]];
        assert!((gi[[0, 0, 0, 0]] - expected).abs() < 1e-15);
    }
}
