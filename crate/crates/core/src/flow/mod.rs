//! Affine autoregressive flows.
//!
//! A layer maps `h -> h'` coordinate-wise along a variable ordering:
//!
//! ```text
//! h'_j = s_j(h_pred) + exp(t_j(h_pred)) * h_j
//! ```
//!
//! where `h_pred` are the values of the variables placed before `j` in the
//! ordering, listed in ordering order. The first variable in the ordering has
//! constant `s` and `t`. Layers are stacked data-side first and all share one
//! ordering, so the full map `x -> z` stays triangular under that ordering and
//! its log-determinant is the sum of every `t_j` across layers.
//!
//! Log-scales pass through a smooth clamp `t = CAP * tanh(raw / CAP)` with
//! `CAP = LOGSCALE_CAP`.

mod document;
mod grad;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use document::{FlowDocument, ScalerDocument, FLOW_FORMAT_VERSION};

use crate::diffnet::{Activation, MlpConfig, MlpParams, MlpTape, ParamBlocks};
use crate::error::{Error, Result};
use crate::noise;
use crate::scalar::Real;

/// Bound on the magnitude of every per-coordinate log-scale.
pub const LOGSCALE_CAP: f64 = 7.0;

/// Maps a raw conditioner output to a bounded log-scale, with its derivative.
#[inline]
pub(crate) fn clamp_log_scale<T: Real>(raw: T) -> (T, T) {
    let cap = T::of(LOGSCALE_CAP);
    let th = (raw / cap).tanh();
    (cap * th, T::one() - th * th)
}

/// Inverse of the smooth clamp; `t` must lie strictly inside `(-CAP, CAP)`.
pub fn unclamp_log_scale<T: Real>(t: T) -> T {
    let cap = T::of(LOGSCALE_CAP);
    cap * (t / cap).atanh()
}

/// A permutation of `0..d`; `perm()[k]` is the variable placed `k`-th.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Ordering {
    perm: Vec<usize>,
    position: Vec<usize>,
}

impl Ordering {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let d = perm.len();
        if d == 0 {
            return Err(Error::invalid("ordering must be non-empty"));
        }
        let mut position = vec![usize::MAX; d];
        for (k, &v) in perm.iter().enumerate() {
            if v >= d || position[v] != usize::MAX {
                return Err(Error::invalid(format!(
                    "{perm:?} is not a permutation of 0..{d}"
                )));
            }
            position[v] = k;
        }
        Ok(Ordering { perm, position })
    }

    pub fn identity(d: usize) -> Self {
        Ordering::new((0..d).collect()).expect("identity permutation")
    }

    /// The two-variable ordering with `first` placed first.
    pub fn bivariate(first: usize) -> Self {
        assert!(first < 2);
        Ordering::new(vec![first, 1 - first]).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Position of variable `v` in the ordering.
    pub fn position_of(&self, v: usize) -> usize {
        self.position[v]
    }

    pub fn first(&self) -> usize {
        self.perm[0]
    }
}

impl TryFrom<Vec<usize>> for Ordering {
    type Error = Error;

    fn try_from(perm: Vec<usize>) -> Result<Self> {
        Ordering::new(perm)
    }
}

impl From<Ordering> for Vec<usize> {
    fn from(o: Ordering) -> Self {
        o.perm
    }
}

/// Latent distribution: isotropic, unit scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaseDistribution {
    #[default]
    Laplace,
    Gaussian,
}

impl BaseDistribution {
    #[inline]
    pub fn log_density<T: Real>(self, u: T) -> T {
        match self {
            BaseDistribution::Laplace => -u.abs() - T::LN_2(),
            BaseDistribution::Gaussian => {
                -u * u / T::of(2.0) - T::of(0.5) * (T::of(2.0) * T::PI()).ln()
            }
        }
    }

    /// Derivative of `log_density`; the Laplace subgradient at 0 is taken as 0.
    #[inline]
    pub fn score<T: Real>(self, u: T) -> T {
        match self {
            BaseDistribution::Laplace => {
                if u > T::zero() {
                    -T::one()
                } else if u < T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            BaseDistribution::Gaussian => -u,
        }
    }

    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            BaseDistribution::Laplace => noise::standard_laplace(rng),
            BaseDistribution::Gaussian => noise::standard_normal(rng),
        }
    }
}

impl std::str::FromStr for BaseDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "laplace" => Ok(BaseDistribution::Laplace),
            "gaussian" | "normal" => Ok(BaseDistribution::Gaussian),
            other => Err(Error::invalid(format!(
                "unknown base distribution {other:?}"
            ))),
        }
    }
}

/// Hidden architecture shared by every conditioner network of a flow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionerSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ConditionerSpec {
    fn default() -> Self {
        ConditionerSpec {
            hidden: vec![10, 10],
            activation: Activation::LeakyRelu,
        }
    }
}

impl ConditionerSpec {
    /// Network shape for the variable at `position` (which sees `position` inputs).
    pub fn mlp_config(&self, position: usize) -> MlpConfig {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(position);
        sizes.extend_from_slice(&self.hidden);
        sizes.push(1);
        MlpConfig {
            layer_sizes: sizes,
            activation: self.activation,
        }
    }
}

/// Source of one scalar `s_j` or raw `t_j`.
#[derive(Debug, Clone, PartialEq)]
pub enum Conditioner<T> {
    /// Learned constant, used for the first variable in the ordering.
    Constant(T),
    Net {
        config: MlpConfig,
        params: MlpParams<T>,
    },
}

impl<T: Real> Conditioner<T> {
    /// A constant log-scale conditioner whose clamped output is exactly `t`.
    pub fn constant_log_scale(t: T) -> Self {
        Conditioner::Constant(unclamp_log_scale(t))
    }

    fn zeros_like(&self) -> Self {
        match self {
            Conditioner::Constant(_) => Conditioner::Constant(T::zero()),
            Conditioner::Net { config, .. } => Conditioner::Net {
                config: config.clone(),
                params: MlpParams::zeros(config),
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Conditioner::Constant(_) => 0,
            Conditioner::Net { config, .. } => config.input_dim(),
        }
    }

    #[inline]
    fn eval(&self, preds: &[T], tape: &mut MlpTape<T>) -> Result<T> {
        match self {
            Conditioner::Constant(c) => Ok(*c),
            Conditioner::Net { config, params } => {
                params.forward_tape(config, preds, tape)?;
                Ok(tape.output()[0])
            }
        }
    }

    /// Sets this conditioner to output `value` regardless of its inputs.
    pub fn set_constant_output(&mut self, value: T) {
        match self {
            Conditioner::Constant(c) => *c = value,
            Conditioner::Net { params, .. } => {
                let n = params.layers().len();
                params.layers_mut()[n - 1].weights_mut().fill(T::zero());
                params.layers_mut()[n - 1].bias_mut()[0] = value;
            }
        }
    }
}

impl<T> ParamBlocks<T> for Conditioner<T> {
    fn blocks(&self) -> Vec<&[T]> {
        match self {
            Conditioner::Constant(c) => vec![std::slice::from_ref(c)],
            Conditioner::Net { params, .. } => params.blocks(),
        }
    }

    fn blocks_mut(&mut self) -> Vec<&mut [T]> {
        match self {
            Conditioner::Constant(c) => vec![std::slice::from_mut(c)],
            Conditioner::Net { params, .. } => params.blocks_mut(),
        }
    }
}

/// The shift and raw log-scale conditioners of one coordinate in one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateTransform<T> {
    pub shift: Conditioner<T>,
    pub log_scale: Conditioner<T>,
}

/// One affine autoregressive layer; `coords[k]` transforms the variable at
/// position `k` of the flow's ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer<T> {
    coords: Vec<CoordinateTransform<T>>,
}

impl<T: Real> AffineLayer<T> {
    pub fn from_coords(coords: Vec<CoordinateTransform<T>>) -> Result<Self> {
        for (k, c) in coords.iter().enumerate() {
            for cond in [&c.shift, &c.log_scale] {
                let ok = match cond {
                    Conditioner::Constant(_) => k == 0,
                    Conditioner::Net { config, params } => {
                        k > 0
                            && config.input_dim() == k
                            && config.output_dim() == 1
                            && params.check_shape(config).is_ok()
                    }
                };
                if !ok {
                    return Err(Error::invalid(format!(
                        "conditioner at position {k} has the wrong input dimension"
                    )));
                }
            }
        }
        Ok(AffineLayer { coords })
    }

    pub fn coords(&self) -> &[CoordinateTransform<T>] {
        &self.coords
    }
}

/// `log |det J|` of the `x -> z` map together with the latent vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult<T> {
    pub z: Vec<T>,
    pub log_det: T,
}

/// A stack of affine autoregressive layers sharing one ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineFlow<T> {
    ordering: Ordering,
    base: BaseDistribution,
    conditioner: ConditionerSpec,
    layers: Vec<AffineLayer<T>>,
}

impl<T: Real> AffineFlow<T> {
    /// A flow whose every `s` and `t` is identically zero, i.e. `z = x`.
    pub fn identity(
        ordering: Ordering,
        n_layers: usize,
        conditioner: ConditionerSpec,
        base: BaseDistribution,
    ) -> Result<Self> {
        Self::build(
            ordering,
            n_layers,
            conditioner,
            base,
            None::<&mut rand_chacha::ChaCha8Rng>,
        )
    }

    /// Glorot-initialized conditioner nets and zero constants. Parameters are
    /// drawn layer by layer, position by position, so two flows over different
    /// orderings built from equal seeds get identical per-position weights.
    pub fn init<R: Rng + ?Sized>(
        ordering: Ordering,
        n_layers: usize,
        conditioner: ConditionerSpec,
        base: BaseDistribution,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(ordering, n_layers, conditioner, base, Some(rng))
    }

    fn build<R: Rng + ?Sized>(
        ordering: Ordering,
        n_layers: usize,
        conditioner: ConditionerSpec,
        base: BaseDistribution,
        mut rng: Option<&mut R>,
    ) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::invalid("a flow needs at least one layer"));
        }
        if conditioner.hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid("conditioner hidden sizes must be positive"));
        }
        let d = ordering.dim();
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let mut coords = Vec::with_capacity(d);
            for k in 0..d {
                let mut make = || {
                    if k == 0 {
                        Conditioner::Constant(T::zero())
                    } else {
                        let config = conditioner.mlp_config(k);
                        let params = match rng.as_deref_mut() {
                            Some(r) => MlpParams::init(&config, r),
                            None => MlpParams::zeros(&config),
                        };
                        Conditioner::Net { config, params }
                    }
                };
                let shift = make();
                let log_scale = make();
                coords.push(CoordinateTransform { shift, log_scale });
            }
            layers.push(AffineLayer { coords });
        }
        Ok(AffineFlow {
            ordering,
            base,
            conditioner,
            layers,
        })
    }

    pub fn from_layers(
        ordering: Ordering,
        base: BaseDistribution,
        conditioner: ConditionerSpec,
        layers: Vec<AffineLayer<T>>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("a flow needs at least one layer"));
        }
        if layers.iter().any(|l| l.coords.len() != ordering.dim()) {
            return Err(Error::invalid(
                "layer dimension does not match the ordering",
            ));
        }
        Ok(AffineFlow {
            ordering,
            base,
            conditioner,
            layers,
        })
    }

    pub fn dim(&self) -> usize {
        self.ordering.dim()
    }

    pub fn ordering(&self) -> &Ordering {
        &self.ordering
    }

    pub fn base(&self) -> BaseDistribution {
        self.base
    }

    pub fn conditioner_spec(&self) -> &ConditionerSpec {
        &self.conditioner
    }

    pub fn layers(&self) -> &[AffineLayer<T>] {
        &self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// The transform of variable `var` in layer `layer`.
    pub fn coordinate(&self, layer: usize, var: usize) -> &CoordinateTransform<T> {
        &self.layers[layer].coords[self.ordering.position_of(var)]
    }

    pub fn coordinate_mut(&mut self, layer: usize, var: usize) -> &mut CoordinateTransform<T> {
        let k = self.ordering.position_of(var);
        &mut self.layers[layer].coords[k]
    }

    /// Same structure with every parameter set to zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        AffineFlow {
            ordering: self.ordering.clone(),
            base: self.base,
            conditioner: self.conditioner.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| AffineLayer {
                    coords: l
                        .coords
                        .iter()
                        .map(|c| CoordinateTransform {
                            shift: c.shift.zeros_like(),
                            log_scale: c.log_scale.zeros_like(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    fn check_len(&self, v: &[T]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::invalid(format!(
                "vector has length {}, flow dimension is {}",
                v.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Applies one layer data-side to latent-side, returning its log-determinant.
    fn layer_forward(
        &self,
        l: usize,
        h: &[T],
        out: &mut [T],
        gathered: &mut Vec<T>,
        tape: &mut MlpTape<T>,
    ) -> Result<T> {
        let perm = self.ordering.perm();
        gathered.clear();
        gathered.extend(perm.iter().map(|&v| h[v]));
        let mut log_det = T::zero();
        for (k, c) in self.layers[l].coords.iter().enumerate() {
            let j = perm[k];
            let preds = &gathered[..k];
            let s = c.shift.eval(preds, tape)?;
            let (t, _) = clamp_log_scale(c.log_scale.eval(preds, tape)?);
            let v = s + t.exp() * h[j];
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    layer: l,
                    variable: j,
                });
            }
            out[j] = v;
            log_det += t;
        }
        Ok(log_det)
    }

    /// Inverts one layer: recovers its input `h` from its output `y`.
    fn layer_inverse(
        &self,
        l: usize,
        y: &[T],
        h: &mut [T],
        gathered: &mut Vec<T>,
        tape: &mut MlpTape<T>,
    ) -> Result<()> {
        let perm = self.ordering.perm();
        gathered.clear();
        for (k, c) in self.layers[l].coords.iter().enumerate() {
            let j = perm[k];
            let preds = &gathered[..k];
            let s = c.shift.eval(preds, tape)?;
            let (t, _) = clamp_log_scale(c.log_scale.eval(preds, tape)?);
            let v = (y[j] - s) * (-t).exp();
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    layer: l,
                    variable: j,
                });
            }
            h[j] = v;
            gathered.push(v);
        }
        Ok(())
    }

    /// Data to latent: `z = T^{-1}(x)`, with `log |det dz/dx|`.
    pub fn forward(&self, x: &[T]) -> Result<ForwardResult<T>> {
        self.check_len(x)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("input contains non-finite values"));
        }
        let mut h = x.to_vec();
        let mut out = vec![T::zero(); self.dim()];
        let mut gathered = Vec::with_capacity(self.dim());
        let mut tape = MlpTape::new();
        let mut log_det = T::zero();
        for l in 0..self.layers.len() {
            log_det += self.layer_forward(l, &h, &mut out, &mut gathered, &mut tape)?;
            std::mem::swap(&mut h, &mut out);
        }
        Ok(ForwardResult { z: h, log_det })
    }

    /// Latent to data, reconstructing variables sequentially along the ordering
    /// and undoing layers last to first.
    pub fn inverse(&self, z: &[T]) -> Result<Vec<T>> {
        self.check_len(z)?;
        let mut y = z.to_vec();
        let mut h = vec![T::zero(); self.dim()];
        let mut gathered = Vec::with_capacity(self.dim());
        let mut tape = MlpTape::new();
        for l in (0..self.layers.len()).rev() {
            self.layer_inverse(l, &y, &mut h, &mut gathered, &mut tape)?;
            std::mem::swap(&mut y, &mut h);
        }
        Ok(y)
    }

    /// Inverse map with some coordinates fixed on the data side.
    ///
    /// Variables are processed in ordering order. A pinned variable takes its
    /// given data value and is pushed forward through every layer; any other
    /// variable is pulled back from its latent coordinate in `z`. Returns the
    /// data vector and the latent vector actually used, whose pinned entries
    /// are the latent images of the pinned values. Without pins this equals
    /// [`inverse`](Self::inverse).
    pub fn inverse_pinned(&self, z: &[T], pins: &[(usize, T)]) -> Result<(Vec<T>, Vec<T>)> {
        self.check_len(z)?;
        let d = self.dim();
        if let Some(&(v, _)) = pins.iter().find(|(v, _)| *v >= d) {
            return Err(Error::invalid(format!("pinned variable {v} out of range")));
        }
        let n_layers = self.layers.len();
        // hs[l] is the input of layer l in data order; hs[n_layers] is the latent.
        let mut hs = vec![vec![T::zero(); d]; n_layers + 1];
        // Same values gathered in ordering order, for conditioner inputs.
        let mut gs = vec![Vec::with_capacity(d); n_layers + 1];
        let mut tape = MlpTape::new();
        let perm = self.ordering.perm();
        for k in 0..d {
            let j = perm[k];
            if let Some(&(_, value)) = pins.iter().find(|(v, _)| *v == j) {
                hs[0][j] = value;
                for l in 0..n_layers {
                    let c = &self.layers[l].coords[k];
                    let s = c.shift.eval(&gs[l][..k], &mut tape)?;
                    let (t, _) = clamp_log_scale(c.log_scale.eval(&gs[l][..k], &mut tape)?);
                    let v = s + t.exp() * hs[l][j];
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            layer: l,
                            variable: j,
                        });
                    }
                    hs[l + 1][j] = v;
                }
            } else {
                hs[n_layers][j] = z[j];
                for l in (0..n_layers).rev() {
                    let c = &self.layers[l].coords[k];
                    let s = c.shift.eval(&gs[l][..k], &mut tape)?;
                    let (t, _) = clamp_log_scale(c.log_scale.eval(&gs[l][..k], &mut tape)?);
                    let v = (hs[l + 1][j] - s) * (-t).exp();
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            layer: l,
                            variable: j,
                        });
                    }
                    hs[l][j] = v;
                }
            }
            for (g, h) in gs.iter_mut().zip(&hs) {
                g.push(h[j]);
            }
        }
        let latent = hs.pop().unwrap();
        Ok((hs.swap_remove(0), latent))
    }

    /// Exact log-density of `x` under the flow.
    pub fn log_prob(&self, x: &[T]) -> Result<T> {
        let fr = self.forward(x)?;
        let base = self.base;
        Ok(fr
            .z
            .iter()
            .fold(T::zero(), |acc, &u| acc + base.log_density(u))
            + fr.log_det)
    }

    /// `n` i.i.d. draws: latent from the base distribution, mapped through `inverse`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Vec<T>>> {
        if n == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        let d = self.dim();
        (0..n)
            .map(|_| {
                let z: Vec<T> = (0..d).map(|_| T::of(self.base.sample(rng))).collect();
                self.inverse(&z)
            })
            .collect()
    }
}

impl<T> ParamBlocks<T> for AffineFlow<T> {
    fn blocks(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| l.coords.iter())
            .flat_map(|c| {
                let mut b = c.shift.blocks();
                b.extend(c.log_scale.blocks());
                b
            })
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.coords.iter_mut())
            .flat_map(|c| {
                let mut b = c.shift.blocks_mut();
                b.extend(c.log_scale.blocks_mut());
                b
            })
            .collect()
    }
}
