//! Transformer building blocks shared by the encoder and decoders.
//!
//! Layers hold only [`ParamId`]s; the values live in a [`ParamStore`], so the
//! same layer runs in any precision.

use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Result, Scalar, Tape, Tensor, Var};

pub const WEIGHT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init.trunc_normal(&[in_dim, out_dim], WEIGHT_STD))?;
        let bias = if bias { Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?) } else { None };
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    /// `x · W + b` over the last axis.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.weight])?;
        match self.bias {
            Some(b) => tape.add(y, p[b]),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.weight"), Tensor::ones(&[dim]))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?;
        Ok(LayerNorm { gain, bias, eps: LN_EPS })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gain], p[self.bias], self.eps)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dim, hidden, true)?,
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, p, h)
    }
}

/// Multi-head attention with separate query and key/value inputs.
///
/// Self-attention passes the same tensor twice. Keys and values may come from
/// a different width (`kv_dim`); the projection to `dim` happens here.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

/// Attention output and the recorded per-head weights `[B, heads, Lq, Lk]`.
pub struct AttentionOutput {
    pub out: Var,
    pub probs: Var,
}

impl Attention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(crate::tensor::TensorError::Invalid(format!("{name}: dim {dim} not divisible by {heads} heads")));
        }
        Ok(Attention {
            q: Linear::new(store, init, &format!("{name}.q"), dim, dim, true)?,
            k: Linear::new(store, init, &format!("{name}.k"), kv_dim, dim, true)?,
            v: Linear::new(store, init, &format!("{name}.v"), kv_dim, dim, true)?,
            out: Linear::new(store, init, &format!("{name}.proj"), dim, dim, true)?,
            heads,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, kv: Var) -> Result<AttentionOutput> {
        let q = self.q.forward(tape, p, x)?;
        let k = self.k.forward(tape, p, kv)?;
        let v = self.v.forward(tape, p, kv)?;
        let head_dim = self.q.out_dim / self.heads;
        let probs = tape.attention_probs(q, k, self.heads, 1.0 / (head_dim as f64).sqrt())?;
        let mixed = tape.attention_apply(probs, v)?;
        let out = self.out.forward(tape, p, mixed)?;
        Ok(AttentionOutput { out, probs })
    }
}

/// Pre-norm self-attention block: `x + attn(LN x)`, then `+ mlp(LN ·)`.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

/// Block output, its total residual contribution and attention weights.
pub struct BlockOutput {
    pub out: Var,
    pub residual: Option<Var>,
    pub probs: Var,
}

impl Block {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: f64,
    ) -> Result<Self> {
        Ok(Block {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: Attention::new(store, init, &format!("{name}.attn"), dim, dim, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), dim, hidden_dim(dim, mlp_ratio))?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, record_residual: bool) -> Result<BlockOutput> {
        let h = self.norm1.forward(tape, p, x)?;
        let a = self.attn.forward(tape, p, h, h)?;
        let x1 = tape.add(x, a.out)?;
        let h = self.norm2.forward(tape, p, x1)?;
        let m = self.mlp.forward(tape, p, h)?;
        let out = tape.add(x1, m)?;
        let residual = if record_residual { Some(tape.add(a.out, m)?) } else { None };
        Ok(BlockOutput { out, residual, probs: a.probs })
    }
}

pub fn hidden_dim(dim: usize, mlp_ratio: f64) -> usize {
    ((dim as f64) * mlp_ratio).round().max(1.0) as usize
}
