use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::{gemm, ParamTensors, Real, Tensor2};
use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
    Sigmoid,
}

impl Activation {
    fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Linear => z,
            Activation::Sigmoid => T::one() / (T::one() + (-z).exp()),
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative<T: Real>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Linear => T::one(),
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

/// Affine layer `y = act(x W + b)` with `W` stored as `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Tensor2<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Real> Dense<T> {
    pub fn in_width(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_width(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone)]
pub struct Mlp<T> {
    layers: Vec<Dense<T>>,
    id: u64,
    generation: u64,
}

impl<T: Real> PartialEq for Mlp<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations recorded by a training forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    mlp_id: u64,
    generation: u64,
    /// `values[0]` is the input, `values[i + 1]` the output of layer `i`.
    values: Vec<Tensor2<T>>,
}

impl<T: Real> MlpCache<T> {
    pub fn output(&self) -> &Tensor2<T> {
        self.values.last().unwrap()
    }

    pub fn input(&self) -> &Tensor2<T> {
        &self.values[0]
    }
}

/// Gradient buffers laid out like the parameters of an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads<T> {
    pub weights: Vec<Tensor2<T>>,
    pub biases: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct MlpBackward<T> {
    pub grads: MlpGrads<T>,
    pub input_grad: Option<Tensor2<T>>,
}

impl<T: Real> Mlp<T> {
    /// Builds a network with layer widths `widths[0] -> ... -> widths[n]`.
    /// Weights are drawn uniformly with fan-in scaling (`sqrt(6 / fan_in)` in
    /// front of a ReLU, `sqrt(3 / fan_in)` otherwise); biases start at zero.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], activations: &[Activation], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        assert_eq!(widths.len() - 1, activations.len());
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let gain = if activation == Activation::Relu { 6.0 } else { 3.0 };
                let bound = (gain / fan_in.max(1) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| T::from_f64(rng.random_range(-bound..=bound)))
                    .collect();
                Dense {
                    weight: Tensor2::from_vec(fan_in, fan_out, data).unwrap(),
                    bias: vec![T::zero(); fan_out],
                    activation,
                }
            })
            .collect();
        Self::from_layers(layers).unwrap()
    }

    pub fn from_layers(layers: Vec<Dense<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_width() {
                return Err(Error::ShapeMismatch {
                    expected: format!("layer {i} bias of width {}", l.out_width()),
                    got: format!("{}", l.bias.len()),
                });
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_width() != pair[1].in_width() {
                return Err(Error::ShapeMismatch {
                    expected: format!("layer {} input width {}", i + 1, pair[0].out_width()),
                    got: format!("{}", pair[1].in_width()),
                });
            }
        }
        Ok(Self {
            layers,
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
        })
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    /// Mutable layer access; invalidates caches recorded before the call.
    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().unwrap().out_width()
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.in_width())
            .chain(self.layers.iter().map(|l| l.out_width()))
            .collect()
    }

    fn check_input(&self, x: &Tensor2<T>) -> Result<()> {
        if x.cols() != self.in_width() {
            return Err(Error::ShapeMismatch {
                expected: format!("input width {}", self.in_width()),
                got: format!("{}", x.cols()),
            });
        }
        Ok(())
    }

    fn layer_forward(layer: &Dense<T>, x: &Tensor2<T>) -> Tensor2<T> {
        let mut y = Tensor2::zeros(x.rows(), layer.out_width());
        for r in 0..x.rows() {
            y.row_mut(r).copy_from_slice(&layer.bias);
        }
        gemm(x, false, &layer.weight, false, T::one(), &mut y);
        if layer.activation != Activation::Linear {
            for v in y.as_mut_slice() {
                *v = layer.activation.apply(*v);
            }
        }
        y
    }

    /// Forward pass without recording activations.
    pub fn infer(&self, x: &Tensor2<T>) -> Result<Tensor2<T>> {
        self.check_input(x)?;
        let mut h = Self::layer_forward(&self.layers[0], x);
        for layer in &self.layers[1..] {
            h = Self::layer_forward(layer, &h);
        }
        debug_assert!(h.is_finite(), "non-finite MLP output");
        Ok(h)
    }

    /// Forward pass recording what [`Mlp::backward`] needs. Takes ownership of
    /// the input so the cache can keep it without copying.
    pub fn forward(&self, x: Tensor2<T>) -> Result<(Tensor2<T>, MlpCache<T>)> {
        self.check_input(&x)?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x);
        for layer in &self.layers {
            let y = Self::layer_forward(layer, values.last().unwrap());
            values.push(y);
        }
        debug_assert!(values.last().unwrap().is_finite(), "non-finite MLP output");
        let out = values.last().unwrap().clone();
        Ok((
            out,
            MlpCache {
                mlp_id: self.id,
                generation: self.generation,
                values,
            },
        ))
    }

    /// Reverse-mode gradients of `sum(grad_out * output)` with respect to all
    /// parameters and, when requested, the input.
    pub fn backward(
        &self,
        cache: &MlpCache<T>,
        grad_out: &Tensor2<T>,
        need_input_grad: bool,
    ) -> Result<MlpBackward<T>> {
        if cache.mlp_id != self.id || cache.generation != self.generation {
            return Err(Error::StaleCache {
                cache: cache.generation,
                params: self.generation,
            });
        }
        let rows = cache.input().rows();
        if grad_out.rows() != rows || grad_out.cols() != self.out_width() {
            return Err(Error::ShapeMismatch {
                expected: format!("output gradient {rows}x{}", self.out_width()),
                got: format!("{}x{}", grad_out.rows(), grad_out.cols()),
            });
        }

        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut delta = grad_out.clone();
        let mut input_grad = None;
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let y = &cache.values[i + 1];
            let x = &cache.values[i];
            if layer.activation != Activation::Linear {
                for (d, &yv) in delta.as_mut_slice().iter_mut().zip(y.as_slice()) {
                    *d = *d * layer.activation.derivative(yv);
                }
            }
            let mut dw = Tensor2::zeros(layer.in_width(), layer.out_width());
            gemm(x, true, &delta, false, T::zero(), &mut dw);
            let mut db = vec![0.0f64; layer.out_width()];
            for r in 0..rows {
                for (acc, &d) in db.iter_mut().zip(delta.row(r)) {
                    *acc += d.as_f64();
                }
            }
            weights.push(dw);
            biases.push(db.into_iter().map(T::from_f64).collect());
            if i > 0 || need_input_grad {
                let mut dx = Tensor2::zeros(rows, layer.in_width());
                gemm(&delta, false, &layer.weight, true, T::zero(), &mut dx);
                if i == 0 {
                    input_grad = Some(dx);
                } else {
                    delta = dx;
                }
            }
        }
        weights.reverse();
        biases.reverse();
        Ok(MlpBackward {
            grads: MlpGrads { weights, biases },
            input_grad,
        })
    }

    pub fn zero_grads(&self) -> MlpGrads<T> {
        MlpGrads {
            weights: self
                .layers
                .iter()
                .map(|l| Tensor2::zeros(l.in_width(), l.out_width()))
                .collect(),
            biases: self.layers.iter().map(|l| vec![T::zero(); l.out_width()]).collect(),
        }
    }
}

impl<T: Real> MlpGrads<T> {
    pub fn add_assign(&mut self, other: &MlpGrads<T>) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, &y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x = *x + y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }
}

impl<T: Real> ParamTensors<T> for Mlp<T> {
    fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), l.weight.as_slice()));
            out.push((format!("layer{i}.bias"), l.bias.as_slice()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers_mut()
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

impl<T: Real> ParamTensors<T> for MlpGrads<T> {
    fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("layer{i}.weight"), w.as_slice()));
            out.push((format!("layer{i}.bias"), b.as_slice()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_layer(n: usize) -> Dense<f64> {
        let mut w = Tensor2::zeros(n, n);
        for i in 0..n {
            w.set(i, i, 1.0);
        }
        Dense {
            weight: w,
            bias: vec![0.0; n],
            activation: Activation::Linear,
        }
    }

    #[test]
    fn zero_net_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::<f64>::new(&[3, 5, 2], &[Activation::Relu, Activation::Relu], &mut rng);
        for t in mlp.tensors_mut() {
            t.fill(0.0);
        }
        let x = Tensor2::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5]).unwrap();
        assert!(mlp.infer(&x).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input() {
        let mlp = Mlp::from_layers(vec![identity_layer(4)]).unwrap();
        let x = Tensor2::from_vec(1, 4, vec![0.1, -0.2, 0.3, 7.0]).unwrap();
        assert_eq!(mlp.infer(&x).unwrap(), x);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mlp = Mlp::from_layers(vec![identity_layer(4)]).unwrap();
        let x = Tensor2::<f64>::zeros(2, 3);
        assert!(matches!(mlp.infer(&x), Err(Error::ShapeMismatch { .. })));
        let bad = vec![identity_layer(4), identity_layer(3)];
        assert!(Mlp::from_layers(bad).is_err());
    }

    #[test]
    fn scalar_linear_gradient_is_input() {
        let layer = Dense {
            weight: Tensor2::from_vec(1, 1, vec![2.5]).unwrap(),
            bias: vec![0.0],
            activation: Activation::Linear,
        };
        let mlp = Mlp::from_layers(vec![layer]).unwrap();
        let x = Tensor2::from_vec(1, 1, vec![1.75]).unwrap();
        let (y, cache) = mlp.forward(x).unwrap();
        assert_eq!(y.as_slice(), &[4.375]);
        let g = Tensor2::from_vec(1, 1, vec![1.0]).unwrap();
        let back = mlp.backward(&cache, &g, true).unwrap();
        assert_eq!(back.grads.weights[0].as_slice(), &[1.75]);
        assert_eq!(back.grads.biases[0], vec![1.0]);
        assert_eq!(back.input_grad.unwrap().as_slice(), &[2.5]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::<f64>::new(
            &[4, 8, 8, 2],
            &[Activation::Relu, Activation::Relu, Activation::Sigmoid],
            &mut rng,
        );
        let x = Tensor2::from_vec(3, 4, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let (_, cache) = mlp.forward(x).unwrap();
        let back = mlp.backward(&cache, &Tensor2::zeros(3, 2), true).unwrap();
        for (_, t) in back.grads.tensors() {
            assert!(t.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut mlp = Mlp::<f64>::new(&[2, 2], &[Activation::Linear], &mut rng);
        let (_, cache) = mlp.forward(Tensor2::zeros(1, 2)).unwrap();
        mlp.tensors_mut()[0][0] += 1.0;
        let err = mlp.backward(&cache, &Tensor2::zeros(1, 2), false);
        assert!(matches!(err, Err(Error::StaleCache { .. })));
        // a cache from a different network of the same shape is also stale
        let other = Mlp::<f64>::new(&[2, 2], &[Activation::Linear], &mut rng);
        let (_, cache) = other.forward(Tensor2::zeros(1, 2)).unwrap();
        assert!(mlp.backward(&cache, &Tensor2::zeros(1, 2), false).is_err());
    }
}
