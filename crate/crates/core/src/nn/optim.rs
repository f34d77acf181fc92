use super::{Module, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. State is created lazily on the first step
/// and only for the module it is applied to, so frozen modules never own
/// optimizer state.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<M: Module<T>>(&mut self, params: &mut M, grads: &M) {
        let mut g_all: Vec<&Tensor<T>> = Vec::new();
        let grads_named = grads.named_params();
        for (_, g) in &grads_named {
            g_all.push(g);
        }
        if self.m.is_empty() {
            self.m = grads_named.iter().map(|(_, g)| Tensor::zeros(&g.shape)).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), g_all.len(), "optimizer bound to a different module");
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(c.lr / bc1);
        let inv_bc2_sqrt = T::of(1.0 / bc2.sqrt());
        let eps = T::of(c.eps);
        let mut k = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut("", &mut |_, p| {
            let g = g_all[k];
            let (m, v) = (&mut ms[k], &mut vs[k]);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + one_b1 * gi;
                v.data[i] = b2 * v.data[i] + one_b2 * gi * gi;
                let denom = v.data[i].sqrt() * inv_bc2_sqrt + eps;
                p.data[i] -= step_size * m.data[i] / denom;
            }
            k += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::Conv1d;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = Conv1d::<f64>::pointwise(2, 2, &mut rng);
        let before = p.clone();
        let mut g = p.zeros_like();
        g.weight.data = vec![1.0, -2.0, 0.5, 0.0];
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        opt.step(&mut p, &g);
        let d: Vec<f64> = p.weight.data.iter().zip(&before.weight.data).map(|(a, b)| a - b).collect();
        assert!((d[0] + 0.1).abs() < 1e-6);
        assert!((d[1] - 0.1).abs() < 1e-6);
        assert!((d[2] + 0.1).abs() < 1e-6);
        assert_eq!(d[3], 0.0);
        assert_eq!(p.bias, before.bias);
    }
}
