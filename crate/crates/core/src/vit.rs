//! Patchification, fixed 2-D positional tables and the visible-token ViT
//! encoder.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::layers::{Block, LayerNorm, Linear, WEIGHT_STD};
use crate::masking::MaskPlan;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Result, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(TensorError::Invalid(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(TensorError::Invalid(format!("encoder dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.dim % 4 != 0 {
            return Err(TensorError::Invalid(format!("encoder dim {} must be divisible by 4", self.dim)));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Splits `[..., H, W, C]` images into row-major patches
/// `[..., (H/p)·(W/p), p·p·C]`; each patch vector is ordered (row, col, channel).
pub fn patchify<T: Scalar>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() < 3 {
        return Err(TensorError::Invalid(format!("patchify expects [.., H, W, C], got {s:?}")));
    }
    let r = s.len();
    let (h, w, c) = (s[r - 3], s[r - 2], s[r - 1]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(TensorError::Invalid(format!("image {h}x{w} not divisible by patch size {patch}")));
    }
    let batch: usize = s[..r - 3].iter().product();
    let (gh, gw) = (h / patch, w / patch);
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for b in 0..batch {
        let img = &src[b * h * w * c..(b + 1) * h * w * c];
        for pi in 0..gh {
            for pj in 0..gw {
                for y in 0..patch {
                    let row = (pi * patch + y) * w + pj * patch;
                    out.extend_from_slice(&img[row * c..(row + patch) * c]);
                }
            }
        }
    }
    let mut shape = s[..r - 3].to_vec();
    shape.extend([gh * gw, patch * patch * c]);
    Tensor::new(shape, out)
}

/// Inverse of [`patchify`] for square grids of `channels`-channel patches.
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, patch: usize, channels: usize) -> Result<Tensor<T>> {
    let s = patches.shape();
    if s.len() < 2 || patch == 0 || channels == 0 || s[s.len() - 1] != patch * patch * channels {
        return Err(TensorError::Invalid(format!("unpatchify: bad patch shape {s:?}")));
    }
    let r = s.len();
    let n = s[r - 2];
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n {
        return Err(TensorError::Invalid(format!("unpatchify: {n} patches do not form a square grid")));
    }
    let (h, w, c) = (g * patch, g * patch, channels);
    let batch: usize = s[..r - 2].iter().product();
    let src = patches.data();
    let mut out = vec![T::ZERO; src.len()];
    let pd = patch * patch * c;
    for b in 0..batch {
        let img = &mut out[b * h * w * c..(b + 1) * h * w * c];
        for pi in 0..g {
            for pj in 0..g {
                let pv = &src[(b * n + pi * g + pj) * pd..(b * n + pi * g + pj + 1) * pd];
                for y in 0..patch {
                    let row = (pi * patch + y) * w + pj * patch;
                    img[row * c..(row + patch) * c].copy_from_slice(&pv[y * patch * c..(y + 1) * patch * c]);
                }
            }
        }
    }
    let mut shape = s[..r - 2].to_vec();
    shape.extend([h, w, c]);
    Tensor::new(shape, out)
}

/// Fixed 2-D sine-cosine table `[grid_h·grid_w, dim]`.
///
/// The first `dim/2` channels encode the row index, the second half the
/// column index; each half is `[sin(pos·ω_k), cos(pos·ω_k)]` with
/// `ω_k = 10000^(−k/(dim/4))`.
pub fn pos_embed_2d(grid_h: usize, grid_w: usize, dim: usize) -> Result<Tensor<f64>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(TensorError::Invalid(format!("positional dim {dim} must be a positive multiple of 4")));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter).map(|k| 1.0 / 10000f64.powf(k as f64 / quarter as f64)).collect();
    let band = |pos: usize, out: &mut Vec<f64>| {
        out.extend(omega.iter().map(|w| (pos as f64 * w).sin()));
        out.extend(omega.iter().map(|w| (pos as f64 * w).cos()));
    };
    let mut data = Vec::with_capacity(grid_h * grid_w * dim);
    for i in 0..grid_h {
        for j in 0..grid_w {
            band(i, &mut data);
            band(j, &mut data);
        }
    }
    Tensor::new(vec![grid_h * grid_w, dim], data)
}

/// Per-block visible-token feature maps.
///
/// `maps[0]` is the patch-embedding output (input to block 1) and `maps[j]`
/// the output of block `j`; every map is `[B, 1 + |visible|, dim]` with the
/// class token in row 0.
#[derive(Debug, Clone)]
pub struct EncoderFeatures {
    pub maps: Vec<Var>,
    pub visible: Arc<Vec<Vec<usize>>>,
}

impl EncoderFeatures {
    pub fn last(&self) -> Var {
        *self.maps.last().expect("at least the patch-embedding map")
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub patch_embed: Linear,
    pub cls_token: ParamId,
    pub blocks: Vec<Block>,
    /// Post-encoder norm, used only on paths that request it.
    pub norm: LayerNorm,
    pos: Tensor<f64>,
}

impl Encoder {
    pub fn new<T: Scalar>(cfg: &EncoderConfig, store: &mut ParamStore<T>, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let patch_embed = Linear::new(store, init, "encoder.patch_embed", cfg.patch_dim(), cfg.dim, true)?;
        let cls_token = store.add("encoder.cls_token", init.trunc_normal(&[1, cfg.dim], WEIGHT_STD))?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, init, &format!("encoder.blocks.{i}"), cfg.dim, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, "encoder.norm", cfg.dim)?;
        let pos = pos_embed_2d(cfg.grid(), cfg.grid(), cfg.dim)?;
        Ok(Encoder { cfg: cfg.clone(), patch_embed, cls_token, blocks, norm, pos })
    }

    pub fn pos_table(&self) -> &Tensor<f64> {
        &self.pos
    }

    /// Embeds only the listed patches of `patches: [B, N, patch_dim]` and runs
    /// every block. The class token carries a zero positional embedding.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        patches: &Tensor<T>,
        visible: Arc<Vec<Vec<usize>>>,
    ) -> Result<EncoderFeatures> {
        let s = patches.shape();
        let n = self.cfg.num_patches();
        if s.len() != 3 || s[1] != n || s[2] != self.cfg.patch_dim() || s[0] != visible.len() {
            return Err(TensorError::ShapeMismatch {
                op: "encoder",
                lhs: s.to_vec(),
                rhs: vec![visible.len(), n, self.cfg.patch_dim()],
            });
        }
        let b = s[0];
        // Masked patches never enter the tape.
        let kept = gather_rows(patches, &visible)?;
        let x = tape.constant(kept);
        let x = self.patch_embed.forward(tape, p, x)?;
        let table = tape.constant(self.pos.cast());
        let pos = tape.embedding(table, visible.clone())?;
        let x = tape.add(x, pos)?;
        let cls = tape.broadcast_to(p[self.cls_token], &[b, 1, self.cfg.dim])?;
        let mut x = tape.concat(&[cls, x], 1)?;
        let mut maps = vec![x];
        for block in &self.blocks {
            x = block.forward(tape, p, x, false)?.out;
            maps.push(x);
        }
        Ok(EncoderFeatures { maps, visible })
    }

    /// Encodes `images: [B, H, W, C]` under one mask plan per image.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        images: &Tensor<T>,
        plans: &[MaskPlan],
    ) -> Result<EncoderFeatures> {
        let n = self.cfg.num_patches();
        if let Some(bad) = plans.iter().find(|pl| pl.num_tokens != n) {
            return Err(TensorError::Invalid(format!("mask plan covers {} tokens, encoder has {n} patches", bad.num_tokens)));
        }
        let patches = patchify(images, self.cfg.patch_size)?;
        let visible = Arc::new(plans.iter().map(|pl| pl.visible.clone()).collect());
        self.forward(tape, p, &patches, visible)
    }

    /// Encodes every patch (no masking), as used for probing and finetuning.
    pub fn encode_all<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, images: &Tensor<T>) -> Result<EncoderFeatures> {
        let patches = patchify(images, self.cfg.patch_size)?;
        let b = patches.shape()[0];
        let all: Vec<usize> = (0..self.cfg.num_patches()).collect();
        self.forward(tape, p, &patches, Arc::new(vec![all; b]))
    }
}

/// Plain row gather `[B, N, d] → [B, k, d]`.
pub fn gather_rows<T: Scalar>(x: &Tensor<T>, index: &[Vec<usize>]) -> Result<Tensor<T>> {
    let s = x.shape();
    let (rows, width) = (s[1], s[2]);
    let k = index.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(index.len() * k * width);
    for (b, list) in index.iter().enumerate() {
        if list.len() != k {
            return Err(TensorError::Invalid("ragged row index".into()));
        }
        for &r in list {
            if r >= rows {
                return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: r, extent: rows });
            }
            let at = (b * rows + r) * width;
            data.extend_from_slice(&x.data()[at..at + width]);
        }
    }
    Tensor::new(vec![index.len(), k, width], data)
}
