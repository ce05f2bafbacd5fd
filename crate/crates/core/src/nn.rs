//! Small parameterised layers over the autodiff graph.

use rand::Rng;

use crate::tensor::{init_parameters, Graph, InitScheme, ParamId, ParamStore, Result, Var};

pub fn add_param<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    dims: &[usize],
    scheme: InitScheme,
    rng: &mut R,
) -> Result<ParamId> {
    let t = init_parameters(dims, scheme, rng)?;
    store.add(name, t)
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        scheme: InitScheme,
        rng: &mut R,
    ) -> Result<Self> {
        let w = add_param(store, &format!("{name}.w"), &[in_dim, out_dim], scheme, rng)?;
        let b = add_param(store, &format!("{name}.b"), &[out_dim], InitScheme::Zeros, rng)?;
        Ok(Self { w, b, in_dim, out_dim })
    }

    /// Multiply every weight by `gain` (e.g. small output heads).
    pub fn scale_weights(&self, store: &mut ParamStore, gain: f64) {
        store.get_mut(self.w).data_mut().iter_mut().for_each(|v| *v *= gain);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }
}

/// Layer normalisation over the last axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let scale = store.add(format!("{name}.scale"), crate::tensor::Tensor::full(&[dim], 1.0))?;
        let shift = store.add(format!("{name}.shift"), crate::tensor::Tensor::zeros(&[dim]))?;
        Ok(Self { scale, shift })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.param(store, self.scale);
        let b = g.param(store, self.shift);
        let axis = g.dims(x).len() - 1;
        g.layer_norm(x, s, b, axis, LAYER_NORM_EPS)
    }
}
