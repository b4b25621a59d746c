//! Power-constraint projection applied at the encoder output.

use ndarray::{ArrayD, Axis};

use super::{Batch, Cache, Layer};

/// Projects each sample into the radius-`sqrt(k)` ball, where `k` is the
/// sample's own element count: inputs already inside the ball pass through
/// unchanged (identity branch also taken exactly at the boundary), larger
/// inputs are rescaled to squared norm `k`.
pub struct PowerNorm;

impl Layer for PowerNorm {
    fn forward_eval(&self, x: &Batch) -> (Batch, Cache) {
        let (n, c, h, w) = x.dim();
        let k = (c * h * w) as f64;
        let mut out = x.clone();
        let mut squared_norms = Vec::with_capacity(n);
        for mut sample in out.axis_iter_mut(Axis(0)) {
            let nsq: f64 = sample.iter().map(|v| v * v).sum();
            squared_norms.push(nsq);
            if nsq > k {
                let scale = (k / nsq).sqrt();
                sample.mapv_inplace(|v| v * scale);
            }
        }
        (
            out,
            Cache::Power {
                input: x.clone(),
                squared_norms,
            },
        )
    }

    fn backward(
        &self,
        cache: &Cache,
        grad_out: &Batch,
        _param_grads: Option<&mut [ArrayD<f64>]>,
    ) -> Batch {
        let Cache::Power {
            input,
            squared_norms,
        } = cache
        else {
            panic!("power norm backward: wrong cache variant");
        };
        let (_, c, h, w) = input.dim();
        let k = (c * h * w) as f64;
        let mut grad_in = grad_out.clone();
        for ((mut gi, v), &nsq) in grad_in
            .axis_iter_mut(Axis(0))
            .zip(input.axis_iter(Axis(0)))
            .zip(squared_norms.iter())
        {
            if nsq > k {
                // y = sqrt(k) v / |v|; J = sqrt(k)/|v| (I - v v^T / |v|^2).
                let scale = (k / nsq).sqrt();
                let dot: f64 = gi.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                let shrink = dot / nsq;
                ndarray::Zip::from(&mut gi).and(&v).for_each(|g, &vv| {
                    *g = scale * (*g - vv * shrink);
                });
            }
        }
        grad_in
    }

    fn name(&self) -> &'static str {
        "power_norm"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn inside_ball_is_identity() {
        let layer = PowerNorm;
        // 8 elements, all 0.5: squared norm 2 <= k = 8.
        let x = Array4::from_elem((1, 2, 2, 2), 0.5);
        let (y, _) = layer.forward_eval(&x);
        assert_eq!(y, x);
    }

    #[test]
    fn outside_ball_is_projected_exactly() {
        let layer = PowerNorm;
        let x = Array4::from_elem((1, 2, 2, 2), 3.0);
        let (y, _) = layer.forward_eval(&x);
        let k = 8.0;
        let nsq: f64 = y.iter().map(|v| v * v).sum();
        assert!((nsq - k).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences_on_scaled_branch() {
        let layer = PowerNorm;
        let x = Array4::from_shape_vec((1, 1, 2, 2), vec![2.0, -1.5, 3.0, 0.5]).unwrap();
        let t = Array4::from_shape_vec((1, 1, 2, 2), vec![0.3, -0.7, 0.2, 0.9]).unwrap();
        let (_, cache) = layer.forward_eval(&x);
        let g = layer.backward(&cache, &t, None);
        let loss = |x: &Batch| {
            let (y, _) = layer.forward_eval(x);
            (&y * &t).sum()
        };
        let eps = 1e-7;
        let mut xp = x.clone();
        for idx in 0..4 {
            let pos = [0, 0, idx / 2, idx % 2];
            xp[pos] += eps;
            let fp = loss(&xp);
            xp[pos] -= 2.0 * eps;
            let fm = loss(&xp);
            xp[pos] += eps;
            let fd = (fp - fm) / (2.0 * eps);
            assert!((fd - g[pos]).abs() < 1e-6);
        }
    }
}
