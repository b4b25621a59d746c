//! Residual block: two conv/norm/PReLU stacks plus a skip connection, with a
//! 1x1 convolution on the skip when the channel counts differ.

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};
use rand_chacha::ChaCha8Rng;

use super::{Batch, BatchNorm2d, Cache, Conv2d, Layer, PRelu};

pub struct ResidualBlock {
    main: Vec<Box<dyn Layer>>,
    skip: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        prelu_slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let main: Vec<Box<dyn Layer>> = vec![
            Box::new(Conv2d::new(in_channels, out_channels, kernel, 1, true, rng)),
            Box::new(BatchNorm2d::new(out_channels)),
            Box::new(PRelu::new(prelu_slope)),
            Box::new(Conv2d::new(out_channels, out_channels, kernel, 1, true, rng)),
            Box::new(BatchNorm2d::new(out_channels)),
            Box::new(PRelu::new(prelu_slope)),
        ];
        let skip = (in_channels != out_channels)
            .then(|| Conv2d::new(in_channels, out_channels, 1, 1, true, rng));
        ResidualBlock { main, skip }
    }

    fn main_param_counts(&self) -> Vec<usize> {
        self.main.iter().map(|l| l.params().len()).collect()
    }
}

impl Layer for ResidualBlock {
    fn forward_eval(&self, x: &Batch) -> (Batch, Cache) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.main.len());
        for layer in &self.main {
            let (next, cache) = layer.forward_eval(&h);
            caches.push(cache);
            h = next;
        }
        let (shortcut, skip_cache) = match &self.skip {
            Some(conv) => {
                let (s, c) = conv.forward_eval(x);
                (s, Some(Box::new(c)))
            }
            None => (x.clone(), None),
        };
        (
            h + shortcut,
            Cache::Residual {
                main: caches,
                skip: skip_cache,
            },
        )
    }

    fn forward_train(&mut self, x: &Batch) -> (Batch, Cache) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.main.len());
        for layer in &mut self.main {
            let (next, cache) = layer.forward_train(&h);
            caches.push(cache);
            h = next;
        }
        let (shortcut, skip_cache) = match &mut self.skip {
            Some(conv) => {
                let (s, c) = conv.forward_train(x);
                (s, Some(Box::new(c)))
            }
            None => (x.clone(), None),
        };
        (
            h + shortcut,
            Cache::Residual {
                main: caches,
                skip: skip_cache,
            },
        )
    }

    fn backward(
        &self,
        cache: &Cache,
        grad_out: &Batch,
        mut param_grads: Option<&mut [ArrayD<f64>]>,
    ) -> Batch {
        let Cache::Residual { main, skip } = cache else {
            panic!("residual backward: wrong cache variant");
        };
        let counts = self.main_param_counts();
        let mut offsets = Vec::with_capacity(counts.len());
        let mut acc = 0;
        for c in &counts {
            offsets.push(acc);
            acc += c;
        }
        let main_total = acc;

        let mut g = grad_out.clone();
        for i in (0..self.main.len()).rev() {
            let pg = param_grads
                .as_mut()
                .map(|grads| &mut grads[offsets[i]..offsets[i] + counts[i]]);
            g = self.main[i].backward(&main[i], &g, pg);
        }

        let skip_grad = match (&self.skip, skip) {
            (Some(conv), Some(skip_cache)) => {
                let pg = param_grads.as_mut().map(|grads| &mut grads[main_total..]);
                conv.backward(skip_cache, grad_out, pg)
            }
            (None, None) => grad_out.clone(),
            _ => panic!("residual backward: skip cache mismatch"),
        };
        g + skip_grad
    }

    fn params(&self) -> Vec<ArrayViewD<'_, f64>> {
        let mut v: Vec<ArrayViewD<'_, f64>> =
            self.main.iter().flat_map(|l| l.params()).collect();
        if let Some(conv) = &self.skip {
            v.extend(conv.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut v: Vec<ArrayViewMutD<'_, f64>> =
            self.main.iter_mut().flat_map(|l| l.params_mut()).collect();
        if let Some(conv) = &mut self.skip {
            v.extend(conv.params_mut());
        }
        v
    }

    fn param_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (i, layer) in self.main.iter().enumerate() {
            for name in layer.param_names() {
                v.push(format!("main.{i}.{name}"));
            }
        }
        if let Some(conv) = &self.skip {
            for name in conv.param_names() {
                v.push(format!("skip.{name}"));
            }
        }
        v
    }

    fn buffers(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut v = Vec::new();
        for (i, layer) in self.main.iter().enumerate() {
            for (name, view) in layer.buffers() {
                v.push((format!("main.{i}.{name}"), view));
            }
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut v = Vec::new();
        for (i, layer) in self.main.iter_mut().enumerate() {
            for (name, view) in layer.tensors_mut() {
                v.push((format!("main.{i}.{name}"), view));
            }
        }
        if let Some(conv) = &mut self.skip {
            for (name, view) in conv.tensors_mut() {
                v.push((format!("skip.{name}"), view));
            }
        }
        v
    }

    fn apply_constraints(&mut self) {
        for layer in &mut self.main {
            layer.apply_constraints();
        }
    }

    fn name(&self) -> &'static str {
        "residual"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;

    #[test]
    fn channel_change_uses_skip_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let same = ResidualBlock::new(4, 4, 3, 0.25, &mut rng);
        assert!(same.skip.is_none());
        let diff = ResidualBlock::new(4, 8, 3, 0.25, &mut rng);
        assert!(diff.skip.is_some());
        let x = Array4::<f64>::zeros((1, 4, 8, 8));
        let (y, _) = diff.forward_eval(&x);
        assert_eq!(y.dim(), (1, 8, 8, 8));
    }

    #[test]
    fn param_names_align_with_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = ResidualBlock::new(2, 3, 3, 0.25, &mut rng);
        assert_eq!(block.param_names().len(), block.params().len());
    }
}
