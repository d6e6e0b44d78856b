//! Decoders: the MAE self-attention baseline, the cross-attention decoder
//! with partial reconstruction, and the cross+self ablation; plus
//! inter-block feature fusion and the reconstruction head.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::layers::{hidden_dim, Attention, Block, BlockOutput, LayerNorm, Linear, Mlp, WEIGHT_STD};
use crate::masking::MaskPlan;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Result, Scalar, Tape, Tensor, TensorError, Var};
use crate::vit::{pos_embed_2d, EncoderConfig, EncoderFeatures};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    /// MAE baseline: self-attention over the full token sequence.
    SelfAttn,
    /// Mask-token queries cross-attend to encoder features only.
    CrossAttn,
    /// Cross-attention preceded by non-causal self-attention among queries.
    CrossPlusSelf,
}

impl DecoderVariant {
    pub fn is_cross(self) -> bool {
        !matches!(self, DecoderVariant::SelfAttn)
    }

    pub fn label(self) -> &'static str {
        match self {
            DecoderVariant::SelfAttn => "self",
            DecoderVariant::CrossAttn => "cross",
            DecoderVariant::CrossPlusSelf => "cross_self",
        }
    }
}

impl std::str::FromStr for DecoderVariant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "self" | "self_attn" | "mae" => Ok(DecoderVariant::SelfAttn),
            "cross" | "cross_attn" => Ok(DecoderVariant::CrossAttn),
            "cross_self" | "cross_plus_self" | "cross+self" => Ok(DecoderVariant::CrossPlusSelf),
            other => Err(format!("unknown decoder variant {other:?} (self | cross | cross_self)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub variant: DecoderVariant,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Encoder maps fused into keys/values per block; 1 means the last map only.
    pub fused_maps: usize,
}

impl DecoderConfig {
    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(TensorError::Invalid(format!("decoder dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.dim % 4 != 0 {
            return Err(TensorError::Invalid(format!("decoder dim {} must be divisible by 4", self.dim)));
        }
        if self.fused_maps == 0 || self.fused_maps > enc.depth + 1 {
            return Err(TensorError::Invalid(format!(
                "fused maps {} must lie in 1..={} for encoder depth {}",
                self.fused_maps,
                enc.depth + 1,
                enc.depth
            )));
        }
        Ok(())
    }
}

/// Indices of the `k` encoder maps (out of `num_maps = n + 1`) used as
/// keys/values. `k = 1` is the last map alone; otherwise the patch-embedding
/// map 0 and the last map `n` are always included, the rest evenly spaced.
pub fn feature_map_selection(num_maps: usize, k: usize) -> Result<Vec<usize>> {
    if num_maps == 0 || k == 0 || k > num_maps {
        return Err(TensorError::Invalid(format!("cannot select {k} of {num_maps} feature maps")));
    }
    let last = num_maps - 1;
    if k == 1 {
        return Ok(vec![last]);
    }
    Ok((0..k).map(|j| ((j * last) as f64 / (k - 1) as f64).round() as usize).collect())
}

/// `out[d] = Σ_j W[d][j] · maps[selection[j]]` for every decoder block `d`,
/// as one `D×k` linear map over the stacked maps, before any normalization.
pub fn interblock_mix<T: Scalar>(tape: &mut Tape<T>, maps: &[Var], weights: Var, selection: &[usize]) -> Result<Vec<Var>> {
    let ws = tape.shape(weights).to_vec();
    if ws.len() != 2 || ws[1] != selection.len() {
        return Err(TensorError::ShapeMismatch { op: "interblock_mix", lhs: ws, rhs: vec![selection.len()] });
    }
    let picked = selection
        .iter()
        .map(|&i| {
            maps.get(i)
                .copied()
                .ok_or(TensorError::IndexOutOfRange { op: "interblock_mix", index: i, extent: maps.len() })
        })
        .collect::<Result<Vec<_>>>()?;
    let map_shape = tape.shape(picked[0]).to_vec();
    let numel: usize = map_shape.iter().product();
    let stacked = tape.stack(&picked)?;
    let stacked = tape.reshape(stacked, &[selection.len(), numel])?;
    let mixed = tape.matmul(weights, stacked)?;
    (0..ws[0])
        .map(|d| {
            let row = tape.select(mixed, d)?;
            tape.reshape(row, &map_shape)
        })
        .collect()
}

/// Learned per-block weighting of encoder feature maps plus the single
/// layer norm applied after fusion.
#[derive(Debug, Clone)]
pub struct InterBlock {
    /// `[D, k]` weights, absent when only the last map is used.
    pub weights: Option<ParamId>,
    pub selection: Vec<usize>,
    pub norm: LayerNorm,
    pub depth: usize,
}

impl InterBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        enc: &EncoderConfig,
        depth: usize,
        fused_maps: usize,
    ) -> Result<Self> {
        let selection = feature_map_selection(enc.depth + 1, fused_maps)?;
        let weights = if fused_maps > 1 {
            let std = 1.0 / (fused_maps as f64).sqrt();
            Some(store.add("decoder.interblock.weight", init.normal(&[depth, fused_maps], std))?)
        } else {
            None
        };
        let norm = LayerNorm::new(store, "decoder.kv_norm", enc.dim)?;
        Ok(InterBlock { weights, selection, norm, depth })
    }

    /// One normalized key/value map per decoder block.
    pub fn fuse<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, features: &EncoderFeatures) -> Result<Vec<Var>> {
        match self.weights {
            None => {
                let kv = self.norm.forward(tape, p, features.last())?;
                Ok(vec![kv; self.depth])
            }
            Some(w) => interblock_mix(tape, &features.maps, p[w], &self.selection)?
                .into_iter()
                .map(|m| self.norm.forward(tape, p, m))
                .collect(),
        }
    }
}

/// Layer norm followed by a linear map to pixel space.
#[derive(Debug, Clone)]
pub struct ReconstructionHead {
    pub norm: LayerNorm,
    pub proj: Linear,
}

impl ReconstructionHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, dim: usize, patch_dim: usize) -> Result<Self> {
        Ok(ReconstructionHead {
            norm: LayerNorm::new(store, "decoder.norm", dim)?,
            proj: Linear::new(store, init, "decoder.pred", dim, patch_dim, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm.forward(tape, p, x)?;
        self.proj.forward(tape, p, h)
    }
}

/// Decoder block whose queries attend only to encoder features, optionally
/// preceded by full self-attention among the queries.
#[derive(Debug, Clone)]
pub struct CrossBlock {
    pub self_attn: Option<(LayerNorm, Attention)>,
    pub norm1: LayerNorm,
    pub cross: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl CrossBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        mlp_ratio: f64,
        with_self: bool,
    ) -> Result<Self> {
        let self_attn = if with_self {
            Some((
                LayerNorm::new(store, &format!("{name}.norm0"), dim)?,
                Attention::new(store, init, &format!("{name}.self_attn"), dim, dim, heads)?,
            ))
        } else {
            None
        };
        Ok(CrossBlock {
            self_attn,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            cross: Attention::new(store, init, &format!("{name}.cross_attn"), dim, kv_dim, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), dim, hidden_dim(dim, mlp_ratio))?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, kv: Var, record: bool) -> Result<BlockOutput> {
        let mut x = x;
        let mut branches = Vec::with_capacity(3);
        if let Some((norm, attn)) = &self.self_attn {
            let h = norm.forward(tape, p, x)?;
            let s = attn.forward(tape, p, h, h)?.out;
            x = tape.add(x, s)?;
            branches.push(s);
        }
        let h = self.norm1.forward(tape, p, x)?;
        let a = self.cross.forward(tape, p, h, kv)?;
        let x1 = tape.add(x, a.out)?;
        let h = self.norm2.forward(tape, p, x1)?;
        let m = self.mlp.forward(tape, p, h)?;
        let out = tape.add(x1, m)?;
        branches.push(a.out);
        branches.push(m);
        let residual = if record {
            let mut r = branches[0];
            for &b in &branches[1..] {
                r = tape.add(r, b)?;
            }
            Some(r)
        } else {
            None
        };
        Ok(BlockOutput { out, residual, probs: a.probs })
    }
}

/// What a decoder pass produced, including the pieces the analysis needs.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// Pixel predictions, `[B, rows, patch_dim]`; rows follow the predicted
    /// indices (cross variants) or all patches (self variant).
    pub pred: Var,
    /// Input to the first decoder block.
    pub f0: Var,
    /// Residual-branch output of each block (only when recorded).
    pub residuals: Vec<Var>,
    /// Output of the last block, fed to the head.
    pub final_features: Var,
    /// Per-block attention weights `[B, heads, Lq, Lk]`.
    pub attention: Vec<Var>,
    /// Leading non-patch rows in `f0`/`final_features` (the class token).
    pub prefix_rows: usize,
}

#[derive(Debug, Clone)]
pub struct CrossDecoder {
    pub cfg: DecoderConfig,
    pub mask_token: ParamId,
    pub interblock: InterBlock,
    pub blocks: Vec<CrossBlock>,
    pub head: ReconstructionHead,
    pos: Tensor<f64>,
}

impl CrossDecoder {
    pub fn new<T: Scalar>(cfg: &DecoderConfig, enc: &EncoderConfig, store: &mut ParamStore<T>, init: &mut Init) -> Result<Self> {
        cfg.validate(enc)?;
        if !cfg.variant.is_cross() {
            return Err(TensorError::Invalid("cross decoder built with the self-attention variant".into()));
        }
        let with_self = cfg.variant == DecoderVariant::CrossPlusSelf;
        let mask_token = store.add("decoder.mask_token", init.trunc_normal(&[1, cfg.dim], WEIGHT_STD))?;
        let interblock = InterBlock::new(store, init, enc, cfg.depth, cfg.fused_maps)?;
        let blocks = (0..cfg.depth)
            .map(|i| {
                CrossBlock::new(store, init, &format!("decoder.blocks.{i}"), cfg.dim, enc.dim, cfg.heads, cfg.mlp_ratio, with_self)
            })
            .collect::<Result<Vec<_>>>()?;
        let head = ReconstructionHead::new(store, init, cfg.dim, enc.patch_dim())?;
        let pos = pos_embed_2d(enc.grid(), enc.grid(), cfg.dim)?;
        Ok(CrossDecoder { cfg: cfg.clone(), mask_token, interblock, blocks, head, pos })
    }

    /// Queries: the shared mask token plus the positional embedding of each
    /// predicted patch. Independent of any pixel content.
    pub fn queries<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, predicted: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        let table = tape.constant(self.pos.cast());
        let pos = tape.embedding(table, predicted)?;
        let token = tape.reshape(p[self.mask_token], &[self.cfg.dim])?;
        tape.add(pos, token)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        features: &EncoderFeatures,
        predicted: Arc<Vec<Vec<usize>>>,
        record: bool,
    ) -> Result<DecoderOutput> {
        if predicted.iter().any(Vec::is_empty) {
            return Err(TensorError::Invalid("cross decoding needs at least one predicted token".into()));
        }
        let kv = self.interblock.fuse(tape, p, features)?;
        let f0 = self.queries(tape, p, predicted)?;
        let mut x = f0;
        let mut residuals = Vec::new();
        let mut attention = Vec::new();
        for (block, &kv_d) in self.blocks.iter().zip(&kv) {
            let out = block.forward(tape, p, x, kv_d, record)?;
            x = out.out;
            residuals.extend(out.residual);
            attention.push(out.probs);
        }
        let pred = self.head.forward(tape, p, x)?;
        Ok(DecoderOutput { pred, f0, residuals, final_features: x, attention, prefix_rows: 0 })
    }
}

/// MAE-style decoder: embeds visible features, inserts mask tokens at the
/// masked positions and runs self-attention over the whole sequence.
#[derive(Debug, Clone)]
pub struct SelfDecoder {
    pub cfg: DecoderConfig,
    pub embed: Linear,
    pub mask_token: ParamId,
    pub blocks: Vec<Block>,
    pub head: ReconstructionHead,
    pos: Tensor<f64>,
}

impl SelfDecoder {
    pub fn new<T: Scalar>(cfg: &DecoderConfig, enc: &EncoderConfig, store: &mut ParamStore<T>, init: &mut Init) -> Result<Self> {
        cfg.validate(enc)?;
        let embed = Linear::new(store, init, "decoder.embed", enc.dim, cfg.dim, true)?;
        let mask_token = store.add("decoder.mask_token", init.trunc_normal(&[1, cfg.dim], WEIGHT_STD))?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, init, &format!("decoder.blocks.{i}"), cfg.dim, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let head = ReconstructionHead::new(store, init, cfg.dim, enc.patch_dim())?;
        let pos = pos_embed_2d(enc.grid(), enc.grid(), cfg.dim)?;
        Ok(SelfDecoder { cfg: cfg.clone(), embed, mask_token, blocks, head, pos })
    }

    /// `latent` is the (optionally normalized) last encoder map
    /// `[B, 1 + |visible|, enc_dim]`. Returns predictions for all `N` patches.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        latent: Var,
        plans: &[MaskPlan],
        record: bool,
    ) -> Result<DecoderOutput> {
        let b = plans.len();
        let n = plans.first().map_or(0, |pl| pl.num_tokens);
        let n_vis = plans.first().map_or(0, |pl| pl.visible.len());
        let x = self.embed.forward(tape, p, latent)?;
        let cls = tape.gather(x, Arc::new(vec![vec![0]; b]))?;
        let vis = tape.gather(x, Arc::new(vec![(1..=n_vis).collect(); b]))?;
        let token = tape.reshape(p[self.mask_token], &[self.cfg.dim])?;
        let masks = tape.broadcast_to(token, &[b, n - n_vis, self.cfg.dim])?;
        let seq = tape.concat(&[vis, masks], 1)?;
        // position of patch t inside [visible..., masked...]
        let restore: Vec<Vec<usize>> = plans
            .iter()
            .map(|pl| {
                let mut r = vec![0; n];
                for (i, &t) in pl.visible.iter().enumerate() {
                    r[t] = i;
                }
                for (i, &t) in pl.masked.iter().enumerate() {
                    r[t] = n_vis + i;
                }
                r
            })
            .collect();
        let seq = tape.gather(seq, Arc::new(restore))?;
        let pos = tape.constant(self.pos.cast());
        let seq = tape.add(seq, pos)?;
        let f0 = tape.concat(&[cls, seq], 1)?;
        let mut h = f0;
        let mut residuals = Vec::new();
        let mut attention = Vec::new();
        for block in &self.blocks {
            let out = block.forward(tape, p, h, record)?;
            h = out.out;
            residuals.extend(out.residual);
            attention.push(out.probs);
        }
        let all = self.head.forward(tape, p, h)?;
        let pred = tape.gather(all, Arc::new(vec![(1..=n).collect(); b]))?;
        Ok(DecoderOutput { pred, f0, residuals, final_features: h, attention, prefix_rows: 1 })
    }
}
