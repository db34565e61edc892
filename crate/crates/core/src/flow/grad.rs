//! Reverse-mode gradient of the batch-mean log-likelihood.

use super::{clamp_log_scale, AffineFlow, Conditioner};
use crate::diffnet::{MlpTape, ParamBlocks};
use crate::error::{Error, Result};
use crate::scalar::Real;

impl<T: Real> Conditioner<T> {
    /// Accumulates the gradient for upstream `up` into `grad` and writes the
    /// gradient with respect to the conditioner inputs into `input_grad`.
    fn backprop(
        &self,
        tape: &mut MlpTape<T>,
        up: T,
        grad: &mut Conditioner<T>,
        input_grad: &mut [T],
    ) -> Result<()> {
        match (self, grad) {
            (Conditioner::Constant(_), Conditioner::Constant(g)) => {
                *g += up;
                Ok(())
            }
            (Conditioner::Net { config, params }, Conditioner::Net { params: g, .. }) => {
                params.backward_tape(config, tape, &[up], g, input_grad)
            }
            _ => Err(Error::invalid(
                "gradient buffer does not match the flow structure",
            )),
        }
    }
}

/// Per-call scratch space, reused across the rows of a batch.
struct Workspace<T> {
    /// `hs[l]` is the input of layer `l` in data order; the last entry is `z`.
    hs: Vec<Vec<T>>,
    /// `hs[l]` gathered in ordering order.
    gs: Vec<Vec<T>>,
    /// Tapes indexed by `(layer * d + position) * 2 + {0: shift, 1: log-scale}`.
    tapes: Vec<MlpTape<T>>,
    scale: Vec<T>,
    clamp_slope: Vec<T>,
    g: Vec<T>,
    g_in: Vec<T>,
    input_grad: Vec<T>,
}

impl<T: Real> AffineFlow<T> {
    /// Batch-mean log-likelihood and its exact gradient with respect to every
    /// flow parameter. The gradient is returned in a flow-shaped container.
    pub fn log_prob_grad<R: AsRef<[T]>>(&self, batch: &[R]) -> Result<(T, AffineFlow<T>)> {
        if batch.is_empty() {
            return Err(Error::invalid("batch must be non-empty"));
        }
        let d = self.dim();
        let n_layers = self.layers.len();
        let mut ws = Workspace {
            hs: vec![vec![T::zero(); d]; n_layers + 1],
            gs: vec![Vec::with_capacity(d); n_layers],
            tapes: (0..n_layers * d * 2).map(|_| MlpTape::new()).collect(),
            scale: vec![T::zero(); n_layers * d],
            clamp_slope: vec![T::zero(); n_layers * d],
            g: vec![T::zero(); d],
            g_in: vec![T::zero(); d],
            input_grad: vec![T::zero(); d],
        };
        let mut grads = self.zeros_like();
        let mut total = T::zero();
        for row in batch {
            let x = row.as_ref();
            self.check_len(x)?;
            total += self.accumulate_row(x, &mut ws, &mut grads)?;
        }
        let n = T::of(batch.len() as f64);
        let mean = total / n;
        if !mean.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        for block in grads.blocks_mut() {
            for g in block {
                *g /= n;
            }
        }
        Ok((mean, grads))
    }

    fn accumulate_row(
        &self,
        x: &[T],
        ws: &mut Workspace<T>,
        grads: &mut AffineFlow<T>,
    ) -> Result<T> {
        let d = self.dim();
        let n_layers = self.layers.len();
        let perm = self.ordering.perm();

        ws.hs[0].copy_from_slice(x);
        let mut ll = T::zero();
        for l in 0..n_layers {
            let (lower, upper) = ws.hs.split_at_mut(l + 1);
            let h = &lower[l];
            let out = &mut upper[0];
            let gathered = &mut ws.gs[l];
            gathered.clear();
            gathered.extend(perm.iter().map(|&v| h[v]));
            for (k, c) in self.layers[l].coords.iter().enumerate() {
                let j = perm[k];
                let idx = (l * d + k) * 2;
                let (ts, tt) = ws.tapes[idx..idx + 2].split_at_mut(1);
                let s = c.shift.eval(&gathered[..k], &mut ts[0])?;
                let (t, slope) = clamp_log_scale(c.log_scale.eval(&gathered[..k], &mut tt[0])?);
                let e = t.exp();
                let v = s + e * h[j];
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        layer: l,
                        variable: j,
                    });
                }
                out[j] = v;
                ws.scale[l * d + k] = e;
                ws.clamp_slope[l * d + k] = slope;
                ll += t;
            }
        }
        let base = self.base;
        for (g, &u) in ws.g.iter_mut().zip(&ws.hs[n_layers]) {
            ll += base.log_density(u);
            *g = base.score(u);
        }

        for l in (0..n_layers).rev() {
            ws.g_in.fill(T::zero());
            for (k, c) in self.layers[l].coords.iter().enumerate() {
                let j = perm[k];
                let go = ws.g[j];
                let e = ws.scale[l * d + k];
                let idx = (l * d + k) * 2;
                let gc = &mut grads.layers[l].coords[k];

                c.shift.backprop(
                    &mut ws.tapes[idx],
                    go,
                    &mut gc.shift,
                    &mut ws.input_grad[..k],
                )?;
                for (i, &gi) in ws.input_grad[..k].iter().enumerate() {
                    ws.g_in[perm[i]] += gi;
                }

                // d/dt of (log-det term + downstream): 1 + go * e * h_j.
                let dt = (go * e * ws.hs[l][j] + T::one()) * ws.clamp_slope[l * d + k];
                c.log_scale.backprop(
                    &mut ws.tapes[idx + 1],
                    dt,
                    &mut gc.log_scale,
                    &mut ws.input_grad[..k],
                )?;
                for (i, &gi) in ws.input_grad[..k].iter().enumerate() {
                    ws.g_in[perm[i]] += gi;
                }

                ws.g_in[j] += go * e;
            }
            std::mem::swap(&mut ws.g, &mut ws.g_in);
        }
        Ok(ll)
    }
}
