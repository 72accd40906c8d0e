use super::{ParamTensors, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moment buffers mirror the parameter layout given at
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub(crate) step: u64,
    pub(crate) m: Vec<Vec<T>>,
    pub(crate) v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new<P: ParamTensors<T> + ?Sized>(params: &P, config: AdamConfig) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
        Self {
            config,
            step: 0,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub(crate) fn from_parts(config: AdamConfig, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Self {
        Self { config, step, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.v
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update. Gradients are validated before anything is written,
    /// so a rejected step leaves parameters and moments untouched.
    pub fn step<P, G>(&mut self, params: &mut P, grads: &G) -> Result<()>
    where
        P: ParamTensors<T> + ?Sized,
        G: ParamTensors<T> + ?Sized,
    {
        let named = grads.tensors();
        if named.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} gradient tensors", self.m.len()),
                got: format!("{}", named.len()),
            });
        }
        for ((name, g), m) in named.iter().zip(&self.m) {
            if g.len() != m.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{name} with {} entries", m.len()),
                    got: format!("{}", g.len()),
                });
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    path: format!("gradient {name}[{i}]"),
                });
            }
        }
        let targets = params.tensors_mut();
        if targets.len() != self.m.len() || targets.iter().zip(&self.m).any(|(p, m)| p.len() != m.len()) {
            return Err(Error::ShapeMismatch {
                expected: "parameters matching the optimizer state".into(),
                got: "a different layout".into(),
            });
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (nb1, nb2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let step_size = T::from_f64(c.lr / bc1);
        let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(c.eps);
        for (((p, (_, g)), m), v) in targets
            .into_iter()
            .zip(named.iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + nb1 * gi;
                v[i] = b2 * v[i] + nb2 * gi * gi;
                p[i] = p[i] - step_size * m[i] / (v[i].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Mlp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> Mlp<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        Mlp::new(&[3, 4, 2], &[Activation::Relu, Activation::Linear], &mut rng)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = net();
        let before = p.clone();
        let mut adam = Adam::new(&p, AdamConfig::default());
        let z = p.zero_grads();
        adam.step(&mut p, &z).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_is_sign_step_of_size_lr() {
        let mut p = net();
        let before = p.clone();
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(&p, cfg);
        for g in [1e-3, 0.7, 250.0] {
            let mut q = before.clone();
            let mut grads = q.zero_grads();
            for t in grads.tensors_mut() {
                t.fill(g);
            }
            let mut a = adam.clone();
            a.step(&mut q, &grads).unwrap();
            for ((_, new), (_, old)) in q.tensors().iter().zip(before.tensors()) {
                for (x, y) in new.iter().zip(old) {
                    let moved = y - x;
                    // lr * g / (|g| + eps)
                    let expect = cfg.lr * g / (g + cfg.eps);
                    assert!((moved - expect).abs() < 1e-15, "{moved} vs {expect}");
                }
            }
        }
        let z = p.zero_grads();
        adam.step(&mut p, &z).unwrap();
    }

    #[test]
    fn opposite_gradients_keep_second_moment_positive() {
        let mut p = net();
        let mut adam = Adam::new(&p, AdamConfig::default());
        for sign in [1.0, -1.0] {
            let mut g = p.zero_grads();
            for t in g.tensors_mut() {
                t.fill(sign * 0.5);
            }
            adam.step(&mut p, &g).unwrap();
        }
        assert!(adam.second_moments().iter().flatten().all(|&v| v > 0.0));
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = net();
        let before = p.clone();
        let mut adam = Adam::new(&p, AdamConfig::default());
        let mut g = p.zero_grads();
        g.biases[1][1] = f64::NAN;
        let err = adam.step(&mut p, &g).unwrap_err();
        match err {
            Error::NonFinite { path } => assert_eq!(path, "gradient layer1.bias[1]"),
            e => panic!("unexpected {e}"),
        }
        assert_eq!(p, before);
        assert_eq!(adam.step_count(), 0);
    }
}
