//! Parameter-id layer definitions; forward passes read bound variables by id.

use rand::Rng;

use crate::autodiff::{ParamId, Tape, Var};
use crate::error::Result;
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Result<Self> {
        let std = (1.0 / input as f64).sqrt();
        Ok(Self {
            w: store.normal(format!("{name}.w"), &[input, output], std, rng)?,
            b: store.zeros(format!("{name}.b"), &[output])?,
        })
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.matmul(p[self.w])?.add(p[self.b])?)
    }
}

/// Optional layer normalization; identity when disabled.
#[derive(Debug, Clone)]
pub(crate) struct Norm(Option<(ParamId, ParamId)>);

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, enabled: bool) -> Result<Self> {
        if !enabled {
            return Ok(Self(None));
        }
        let g = store.ones(format!("{name}.gain"), &[width])?;
        let b = store.zeros(format!("{name}.bias"), &[width])?;
        Ok(Self(Some((g, b))))
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        match self.0 {
            Some((g, b)) => Ok(x.layer_norm(p[g], p[b], LN_EPS)?),
            None => Ok(x),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), width, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, width, rng)?,
        })
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(p, x)?.gelu();
        self.fc2.forward(p, h)
    }
}

/// Multi-head scaled dot-product attention with separate query and key/value inputs.
#[derive(Debug, Clone)]
pub(crate) struct Attention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
    head_dim: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let inner = heads * head_dim;
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.wq"), width, inner, rng)?,
            wk: Linear::new(store, &format!("{name}.wk"), width, inner, rng)?,
            wv: Linear::new(store, &format!("{name}.wv"), width, inner, rng)?,
            wo: Linear::new(store, &format!("{name}.wo"), inner, width, rng)?,
            heads,
            head_dim,
        })
    }

    /// `queries [n×C]` attend over `context [m×C]`; returns `[n×C]`.
    pub fn forward<'t>(&self, tape: &'t Tape, p: &[Var<'t>], queries: Var<'t>, context: Var<'t>) -> Result<Var<'t>> {
        let q = self.wq.forward(p, queries)?;
        let k = self.wk.forward(p, context)?;
        let v = self.wv.forward(p, context)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (start, len) = (h * self.head_dim, self.head_dim);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (q.slice(1, start, len)?, k.slice(1, start, len)?, v.slice(1, start, len)?)
            };
            let scores = qh.matmul(kh.transpose()?)?.scale(scale);
            let weights = scores.softmax(1)?;
            outs.push(weights.matmul(vh)?);
        }
        let joined = tape.concat(&outs, 1)?;
        self.wo.forward(p, joined)
    }
}

/// `ones[n×1] · row[1×d]`: repeats a row vector `n` times, differentiably.
pub(crate) fn repeat_row<'t>(tape: &'t Tape, row: Var<'t>, n: usize) -> Result<Var<'t>> {
    let ones = tape.constant(Tensor::ones(&[n, 1]));
    Ok(ones.matmul(row)?)
}
