use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::ParamBlocks;
use crate::error::{Error, Result};
use crate::scalar::Real;

const LEAKY_SLOPE: f64 = 0.01;

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    #[default]
    LeakyRelu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::LeakyRelu => {
                if x > T::zero() {
                    x
                } else {
                    x * T::of(LEAKY_SLOPE)
                }
            }
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `x`.
    #[inline]
    fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Tanh => {
                let y = x.tanh();
                T::one() - y * y
            }
            Activation::LeakyRelu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::of(LEAKY_SLOPE)
                }
            }
            Activation::Identity => T::one(),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "leaky_relu" | "leaky-relu" => Ok(Activation::LeakyRelu),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::invalid(format!("unknown activation {other:?}"))),
        }
    }
}

/// Architecture of a feedforward net: `layer_sizes = [in, hidden.., out]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl MlpConfig {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        let cfg = MlpConfig {
            layer_sizes,
            activation,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::invalid(
                "an MLP needs at least input and output sizes",
            ));
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::invalid("MLP layer sizes must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }
}

/// One affine map `W a + b`. Storage is `[W row-major (out x in) | b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    in_dim: usize,
    out_dim: usize,
    data: Vec<T>,
}

impl<T: Real> DenseLayer<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseLayer {
            in_dim,
            out_dim,
            data: vec![T::zero(); in_dim * out_dim + out_dim],
        }
    }

    /// Builds a layer from a row-major weight matrix and bias vector.
    pub fn from_parts(in_dim: usize, out_dim: usize, weights: &[T], bias: &[T]) -> Result<Self> {
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::invalid(format!(
                "dense layer {out_dim}x{in_dim} got {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        let mut data = Vec::with_capacity(weights.len() + bias.len());
        data.extend_from_slice(weights);
        data.extend_from_slice(bias);
        Ok(DenseLayer {
            in_dim,
            out_dim,
            data,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[T] {
        &self.data[..self.in_dim * self.out_dim]
    }

    pub fn bias(&self) -> &[T] {
        &self.data[self.in_dim * self.out_dim..]
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        let n = self.in_dim * self.out_dim;
        &mut self.data[..n]
    }

    pub fn bias_mut(&mut self) -> &mut [T] {
        let n = self.in_dim * self.out_dim;
        &mut self.data[n..]
    }

    #[inline]
    fn apply(&self, input: &[T], out: &mut [T]) {
        let (w, b) = self.data.split_at(self.in_dim * self.out_dim);
        for (o, (row, &bias)) in out.iter_mut().zip(w.chunks_exact(self.in_dim).zip(b)) {
            let mut acc = bias;
            for (&wi, &xi) in row.iter().zip(input) {
                acc += wi * xi;
            }
            *o = acc;
        }
    }
}

/// Weights and biases of a feedforward net, one [`DenseLayer`] per affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    layers: Vec<DenseLayer<T>>,
}

impl<T: Real> MlpParams<T> {
    pub fn zeros(cfg: &MlpConfig) -> Self {
        let layers = cfg
            .layer_sizes
            .windows(2)
            .map(|w| DenseLayer::zeros(w[0], w[1]))
            .collect();
        MlpParams { layers }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(cfg: &MlpConfig, rng: &mut R) -> Self {
        let mut params = Self::zeros(cfg);
        for layer in &mut params.layers {
            let limit = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            for w in layer.weights_mut() {
                *w = T::of(dist.sample(rng));
            }
        }
        params
    }

    pub fn from_layers(layers: Vec<DenseLayer<T>>) -> Self {
        MlpParams { layers }
    }

    pub fn layers(&self) -> &[DenseLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer<T>] {
        &mut self.layers
    }

    /// Checks that the stored shapes agree with `cfg`.
    pub fn check_shape(&self, cfg: &MlpConfig) -> Result<()> {
        cfg.validate()?;
        let ok = self.layers.len() == cfg.num_layers()
            && self
                .layers
                .iter()
                .zip(cfg.layer_sizes.windows(2))
                .all(|(l, w)| l.in_dim == w[0] && l.out_dim == w[1]);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "MLP parameters do not match the configuration",
            ))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.data.iter().all(|v| v.is_finite()))
    }

    /// Forward pass recording every activation for a later backward pass.
    pub fn forward_tape(&self, cfg: &MlpConfig, input: &[T], tape: &mut MlpTape<T>) -> Result<()> {
        if input.len() != cfg.input_dim() {
            return Err(Error::invalid(format!(
                "MLP input has length {}, expected {}",
                input.len(),
                cfg.input_dim()
            )));
        }
        self.check_shape(cfg)?;
        tape.record(self, cfg.activation, input);
        Ok(())
    }

    /// Accumulates parameter gradients of `<upstream, output>` into `grads`
    /// and writes the input gradient into `input_grad`.
    pub fn backward_tape(
        &self,
        cfg: &MlpConfig,
        tape: &mut MlpTape<T>,
        upstream: &[T],
        grads: &mut MlpParams<T>,
        input_grad: &mut [T],
    ) -> Result<()> {
        if upstream.len() != cfg.output_dim() {
            return Err(Error::invalid(format!(
                "upstream gradient has length {}, expected {}",
                upstream.len(),
                cfg.output_dim()
            )));
        }
        if input_grad.len() != cfg.input_dim() {
            return Err(Error::invalid("input gradient buffer has the wrong length"));
        }
        tape.backprop(self, cfg.activation, upstream, grads, input_grad);
        Ok(())
    }
}

impl<T> ParamBlocks<T> for MlpParams<T> {
    fn blocks(&self) -> Vec<&[T]> {
        self.layers.iter().map(|l| l.data.as_slice()).collect()
    }

    fn blocks_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .map(|l| l.data.as_mut_slice())
            .collect()
    }
}

/// Recorded activations of one forward pass. Reusable across calls.
#[derive(Debug, Clone, Default)]
pub struct MlpTape<T> {
    /// Layer inputs `a_0 .. a_L` concatenated; `a_L` is the output.
    acts: Vec<T>,
    /// Pre-activations of the hidden layers.
    pre: Vec<T>,
    offsets: Vec<usize>,
    scratch: Vec<T>,
    delta: Vec<T>,
}

impl<T: Real> MlpTape<T> {
    pub fn new() -> Self {
        MlpTape {
            acts: Vec::new(),
            pre: Vec::new(),
            offsets: Vec::new(),
            scratch: Vec::new(),
            delta: Vec::new(),
        }
    }

    /// The network output of the recorded pass.
    pub fn output(&self) -> &[T] {
        let start = self.offsets[self.offsets.len() - 1];
        &self.acts[start..]
    }

    fn record(&mut self, params: &MlpParams<T>, act: Activation, input: &[T]) {
        self.acts.clear();
        self.pre.clear();
        self.offsets.clear();
        self.offsets.push(0);
        self.acts.extend_from_slice(input);
        let n_layers = params.layers.len();
        for (l, layer) in params.layers.iter().enumerate() {
            let in_start = self.offsets[l];
            let out_start = self.acts.len();
            self.acts.resize(out_start + layer.out_dim, T::zero());
            let (head, tail) = self.acts.split_at_mut(out_start);
            layer.apply(&head[in_start..], tail);
            if l + 1 < n_layers {
                self.pre.extend_from_slice(tail);
                for v in tail.iter_mut() {
                    *v = act.apply(*v);
                }
            }
            self.offsets.push(out_start);
        }
    }

    fn backprop(
        &mut self,
        params: &MlpParams<T>,
        act: Activation,
        upstream: &[T],
        grads: &mut MlpParams<T>,
        input_grad: &mut [T],
    ) {
        self.delta.clear();
        self.delta.extend_from_slice(upstream);
        let mut pre_end = self.pre.len();
        for l in (0..params.layers.len()).rev() {
            let layer = &params.layers[l];
            let g = &mut grads.layers[l];
            let a_in = &self.acts[self.offsets[l]..self.offsets[l + 1]];
            let (gw, gb) = g.data.split_at_mut(layer.in_dim * layer.out_dim);
            for (o, &d) in self.delta.iter().enumerate() {
                gb[o] += d;
                if d != T::zero() {
                    for (gwi, &ai) in gw[o * layer.in_dim..(o + 1) * layer.in_dim]
                        .iter_mut()
                        .zip(a_in)
                    {
                        *gwi += d * ai;
                    }
                }
            }
            self.scratch.clear();
            self.scratch.resize(layer.in_dim, T::zero());
            let w = layer.weights();
            for (o, &d) in self.delta.iter().enumerate() {
                if d == T::zero() {
                    continue;
                }
                for (s, &wi) in self.scratch.iter_mut().zip(&w[o * layer.in_dim..]) {
                    *s += wi * d;
                }
            }
            if l > 0 {
                let pre_start = pre_end - layer.in_dim;
                for (s, &z) in self.scratch.iter_mut().zip(&self.pre[pre_start..pre_end]) {
                    *s *= act.derivative(z);
                }
                pre_end = pre_start;
                std::mem::swap(&mut self.delta, &mut self.scratch);
            } else {
                input_grad.copy_from_slice(&self.scratch);
            }
        }
    }
}

/// Evaluates the network on one input vector.
pub fn mlp_forward<T: Real>(params: &MlpParams<T>, cfg: &MlpConfig, input: &[T]) -> Result<Vec<T>> {
    let mut tape = MlpTape::new();
    params.forward_tape(cfg, input, &mut tape)?;
    Ok(tape.output().to_vec())
}

/// Exact gradients of `<upstream, f(input)>` with respect to every parameter
/// and to the input.
pub fn mlp_backward<T: Real>(
    params: &MlpParams<T>,
    cfg: &MlpConfig,
    input: &[T],
    upstream: &[T],
) -> Result<(MlpParams<T>, Vec<T>)> {
    let mut tape = MlpTape::new();
    params.forward_tape(cfg, input, &mut tape)?;
    let mut grads = MlpParams::zeros(cfg);
    let mut input_grad = vec![T::zero(); cfg.input_dim()];
    params.backward_tape(cfg, &mut tape, upstream, &mut grads, &mut input_grad)?;
    Ok((grads, input_grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear(w: &[f64], b: &[f64], i: usize, o: usize) -> (MlpParams<f64>, MlpConfig) {
        let cfg = MlpConfig::new(vec![i, o], Activation::Identity).unwrap();
        let p = MlpParams::from_layers(vec![DenseLayer::from_parts(i, o, w, b).unwrap()]);
        (p, cfg)
    }

    #[test]
    fn identity_layer() {
        let (p, cfg) = linear(&[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0], 2, 2);
        assert_eq!(
            mlp_forward(&p, &cfg, &[3.0, -1.0]).unwrap(),
            vec![3.0, -1.0]
        );
    }

    #[test]
    fn scalar_affine() {
        let (p, cfg) = linear(&[2.0], &[1.0], 1, 1);
        assert_eq!(mlp_forward(&p, &cfg, &[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn zero_weights_give_final_bias() {
        let cfg = MlpConfig::new(vec![3, 5, 4, 2], Activation::Tanh).unwrap();
        let mut p = MlpParams::<f64>::zeros(&cfg);
        p.layers_mut()[0].bias_mut().fill(0.7);
        p.layers_mut()[2].bias_mut().copy_from_slice(&[1.5, -2.0]);
        assert_eq!(
            mlp_forward(&p, &cfg, &[9.0, -3.0, 4.0]).unwrap(),
            vec![1.5, -2.0]
        );
    }

    #[test]
    fn product_rule_gradients() {
        let (p, cfg) = linear(&[5.0], &[0.0], 1, 1);
        let (g, gx) = mlp_backward(&p, &cfg, &[2.0], &[1.0]).unwrap();
        assert_eq!(g.layers()[0].weights(), &[2.0]);
        assert_eq!(g.layers()[0].bias(), &[1.0]);
        assert_eq!(gx, vec![5.0]);
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let cfg = MlpConfig::new(vec![2, 4, 1], Activation::Tanh).unwrap();
        let p = MlpParams::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let (g, gx) = mlp_backward(&p, &cfg, &[0.3, -0.2], &[0.0]).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(gx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let cfg = MlpConfig::new(vec![2, 3, 1], Activation::Tanh).unwrap();
        let p = MlpParams::<f64>::zeros(&cfg);
        assert!(matches!(
            mlp_forward(&p, &cfg, &[1.0]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            mlp_backward(&p, &cfg, &[1.0, 2.0], &[1.0, 1.0]),
            Err(Error::InvalidArgument(_))
        ));
        let other = MlpConfig::new(vec![2, 4, 1], Activation::Tanh).unwrap();
        assert!(mlp_forward(&p, &other, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn bad_configs() {
        assert!(MlpConfig::new(vec![3], Activation::Tanh).is_err());
        assert!(MlpConfig::new(vec![3, 0, 1], Activation::Tanh).is_err());
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let cfg = MlpConfig::new(vec![3, 7, 7, 2], Activation::LeakyRelu).unwrap();
        let p = MlpParams::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let x = [0.1, -2.0, 3.3];
        let a = mlp_forward(&p, &cfg, &x).unwrap();
        let b = mlp_forward(&p, &cfg, &x).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn glorot_bounds() {
        let cfg = MlpConfig::new(vec![4, 6], Activation::Identity).unwrap();
        let p = MlpParams::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let a = (6.0f64 / 10.0).sqrt();
        assert!(p.layers()[0].weights().iter().all(|w| w.abs() <= a));
        assert!(p.layers()[0].bias().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn works_in_f32() {
        let cfg = MlpConfig::new(vec![1, 1], Activation::Identity).unwrap();
        let p = MlpParams::<f32>::from_layers(vec![
            DenseLayer::from_parts(1, 1, &[2.0], &[1.0]).unwrap()
        ]);
        assert_eq!(mlp_forward(&p, &cfg, &[3.0f32]).unwrap(), vec![7.0f32]);
    }
}
