//! Measurement instruments: attention-group statistics, per-block
//! reconstruction decomposition, inter-block weight maps and an analytical
//! FLOPS / memory model of the decoders.

use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{DecoderConfig, DecoderVariant};
use crate::layers::hidden_dim;
use crate::masking::{floor_count, GroupMatrices, MaskError, MaskPlan};
use crate::model::{Decoder, MaskedAutoencoder};
use crate::objective::PatchStats;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tape, Tensor, TensorError};
use crate::vit::{unpatchify, EncoderConfig};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("{0}")]
    Unsupported(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

// ---------------------------------------------------------------------------
// Attention-group statistics

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Mean attention weight per (query, key) pair.
    PerPair,
    /// Per-pair mean times the sequence length, so uniform attention reads 1.
    PerPairTimesSeqlen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub mean_mask_to_mask: f64,
    /// The class token counts as visible.
    pub mean_mask_to_visible: f64,
    pub normalization: Normalization,
    pub images_seen: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub per_pair: AttentionStats,
    pub per_pair_times_seqlen: AttentionStats,
}

/// Per-pair group means of one `L×L` attention map whose row/column 0 is the
/// class token and rows `1..=N` follow the patch order of `mask`.
/// Returns `(mask→mask, mask→visible)`.
pub fn group_means(probs: &[f64], mask: &[u8]) -> (f64, f64) {
    let n = mask.len();
    let len = n + 1;
    debug_assert_eq!(probs.len(), len * len);
    let groups = GroupMatrices::from_mask(mask);
    let (mut to_mask, mut to_visible) = (0.0, 0.0);
    let (mut n_mask, mut n_visible) = (0usize, 0usize);
    for i in 0..n {
        if mask[i] == 0 {
            continue;
        }
        let row = &probs[(i + 1) * len..(i + 2) * len];
        to_visible += row[0];
        n_visible += 1;
        for j in 0..n {
            if groups.mask_to_mask[i * n + j] {
                to_mask += row[j + 1];
                n_mask += 1;
            } else if groups.mask_to_visible[i * n + j] {
                to_visible += row[j + 1];
                n_visible += 1;
            }
        }
    }
    (to_mask / n_mask.max(1) as f64, to_visible / n_visible.max(1) as f64)
}

/// Attention-group means of a self-attention decoder over `images`, one random
/// mask per image seeded by `seeds`. Group means are averaged over maps and
/// heads per image, then over images.
pub fn attention_stats<T: Scalar>(
    model: &MaskedAutoencoder,
    params: &ParamStore<T>,
    images: &Tensor<T>,
    mask_ratio: f64,
    seeds: &[u64],
    batch: usize,
) -> Result<AttentionReport> {
    if model.variant() != DecoderVariant::SelfAttn {
        return Err(AnalysisError::Unsupported(
            "attention-group statistics need the self-attention decoder; cross decoders have no mask-to-mask attention"
                .into(),
        ));
    }
    let count = images.shape()[0];
    if seeds.len() != count {
        return Err(AnalysisError::Unsupported(format!("{} seeds for {count} images", seeds.len())));
    }
    let n = model.cfg.encoder.num_patches();
    let seq = (n + 1) as f64;
    let image_len = images.numel() / count.max(1);
    let (mut sum_mm, mut sum_mv) = (0.0, 0.0);
    for start in (0..count).step_by(batch.max(1)) {
        let end = (start + batch.max(1)).min(count);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(shape, images.data()[start * image_len..end * image_len].to_vec())?;
        let plans = seeds[start..end]
            .iter()
            .map(|&s| MaskPlan::new(n, mask_ratio, mask_ratio, s))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let features = model.encoder.encode(&mut tape, &p, &chunk, &plans)?;
        let (_, out) = model.decode(&mut tape, &p, &features, &plans, false)?;
        for (b, plan) in plans.iter().enumerate() {
            let mask = plan.mask_vector();
            let (mut mm, mut mv, mut maps) = (0.0, 0.0, 0usize);
            for &probs in &out.attention {
                let value = tape.value(probs);
                let heads = value.shape()[1];
                let per_image = value.numel() / value.shape()[0];
                let block = &value.data()[b * per_image..(b + 1) * per_image];
                let per_head = per_image / heads;
                for h in 0..heads {
                    let map: Vec<f64> = block[h * per_head..(h + 1) * per_head].iter().map(|v| v.to_f64()).collect();
                    let (a, v) = group_means(&map, &mask);
                    mm += a;
                    mv += v;
                    maps += 1;
                }
            }
            sum_mm += mm / maps.max(1) as f64;
            sum_mv += mv / maps.max(1) as f64;
        }
    }
    let images_seen = count;
    let per_pair = AttentionStats {
        mean_mask_to_mask: sum_mm / count.max(1) as f64,
        mean_mask_to_visible: sum_mv / count.max(1) as f64,
        normalization: Normalization::PerPair,
        images_seen,
    };
    let per_pair_times_seqlen = AttentionStats {
        mean_mask_to_mask: per_pair.mean_mask_to_mask * seq,
        mean_mask_to_visible: per_pair.mean_mask_to_visible * seq,
        normalization: Normalization::PerPairTimesSeqlen,
        images_seen,
    };
    Ok(AttentionReport { per_pair, per_pair_times_seqlen })
}

// ---------------------------------------------------------------------------
// Per-block decomposition

/// Additive decomposition of one image's reconstruction: `base` is the
/// head surrogate applied to the decoder input (bias included), each
/// contribution the surrogate applied to one block's residual branch.
#[derive(Debug, Clone)]
pub struct ReconstructionStack {
    /// Patch index of every row.
    pub rows: Vec<usize>,
    pub patch_dim: usize,
    pub base: Vec<f64>,
    pub contributions: Vec<Vec<f64>>,
    /// The model's actual head output.
    pub total: Vec<f64>,
    /// Max-abs gap of the naive split that applies the real head (with its
    /// own normalization) to every piece separately.
    pub naive_gap: f64,
}

impl ReconstructionStack {
    /// Max-abs deviation of `base + Σ contributions` from `total`.
    pub fn identity_error(&self) -> f64 {
        let mut sum = self.base.clone();
        for c in &self.contributions {
            for (s, v) in sum.iter_mut().zip(c) {
                *s += v;
            }
        }
        sum.iter().zip(&self.total).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Renders one term as an image. Rows outside `rows` take `fill`; with
    /// `stats`, values are scaled by the patch std (and shifted by the mean
    /// when `with_mean`).
    pub fn render(
        &self,
        term: &[f64],
        enc: &EncoderConfig,
        stats: Option<&PatchStats>,
        with_mean: bool,
        fill: f64,
    ) -> Result<Tensor<f64>> {
        let n = enc.num_patches();
        let pd = self.patch_dim;
        let mut patches = vec![fill; n * pd];
        for (r, &t) in self.rows.iter().enumerate() {
            for c in 0..pd {
                let mut v = term[r * pd + c];
                if let Some(s) = stats {
                    v *= s.std[r];
                    if with_mean {
                        v += s.mean[r];
                    }
                }
                patches[t * pd + c] = v;
            }
        }
        let patches = Tensor::new(vec![1, n, pd], patches)?;
        let img = unpatchify(&patches, enc.patch_size, enc.channels)?;
        Ok(img.reshaped(&[enc.image_size, enc.image_size, enc.channels])?)
    }
}

/// Decomposes the reconstruction of every image in the batch. The head's
/// layer-norm statistics are frozen at the final decoder features, which
/// turns the head into an affine map and makes the split exact.
pub fn per_block_decomposition<T: Scalar>(
    model: &MaskedAutoencoder,
    params: &ParamStore<T>,
    images: &Tensor<T>,
    plans: &[MaskPlan],
) -> Result<Vec<ReconstructionStack>> {
    let params = params.cast::<f64>();
    let images = images.cast::<f64>();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let features = model.encoder.encode(&mut tape, &p, &images, plans)?;
    let (_, out) = model.decode(&mut tape, &p, &features, plans, true)?;
    let head = match &model.decoder {
        Decoder::Cross(d) => &d.head,
        Decoder::SelfAttn(d) => &d.head,
    };
    let gain = params.get(head.norm.gain).data();
    let beta = params.get(head.norm.bias).data();
    let weight = params.get(head.proj.weight).data();
    let bias: Vec<f64> = match head.proj.bias {
        Some(b) => params.get(b).data().to_vec(),
        None => vec![0.0; head.proj.out_dim],
    };
    let (dim, pd, eps) = (head.proj.in_dim, head.proj.out_dim, head.norm.eps);
    let skip = out.prefix_rows;
    let row_count = tape.shape(out.final_features)[1];

    let project = |x: &[f64], scale: &[f64], add: Option<&[f64]>| -> Vec<f64> {
        let mut y = vec![0.0; pd];
        for c in 0..dim {
            let a = x[c] * scale[c];
            let w = &weight[c * pd..(c + 1) * pd];
            for (yo, wo) in y.iter_mut().zip(w) {
                *yo += a * wo;
            }
        }
        if let Some(add) = add {
            for (yo, a) in y.iter_mut().zip(add) {
                *yo += a;
            }
        }
        y
    };
    let head_exact = |x: &[f64]| -> Vec<f64> {
        let mean = x.iter().sum::<f64>() / dim as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / dim as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        let normed: Vec<f64> = x.iter().zip(gain.iter().zip(beta)).map(|(v, (g, b))| (v - mean) * rstd * g + b).collect();
        project(&normed, &vec![1.0; dim], Some(&bias))
    };

    let mut stacks = Vec::with_capacity(plans.len());
    for (b, plan) in plans.iter().enumerate() {
        let rows: Vec<usize> = if skip > 0 { (0..plan.num_tokens).collect() } else { plan.predicted.clone() };
        let row_slice = |v: crate::tensor::Var, r: usize| -> &[f64] {
            let at = (b * row_count + r) * dim;
            &tape.value(v).data()[at..at + dim]
        };
        let mut stack = ReconstructionStack {
            rows: rows.clone(),
            patch_dim: pd,
            base: Vec::with_capacity(rows.len() * pd),
            contributions: vec![Vec::with_capacity(rows.len() * pd); out.residuals.len()],
            total: Vec::with_capacity(rows.len() * pd),
            naive_gap: 0.0,
        };
        for r in 0..rows.len() {
            let final_row = row_slice(out.final_features, r + skip);
            let mean = final_row.iter().sum::<f64>() / dim as f64;
            let var = final_row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / dim as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            let scale: Vec<f64> = gain.iter().map(|g| g * rstd).collect();
            // constant part: (β − μ·rstd·g)·W + b
            let shift: Vec<f64> = gain.iter().zip(beta).map(|(g, bt)| bt - mean * rstd * g).collect();
            let offset = project(&shift, &vec![1.0; dim], Some(&bias));
            stack.base.extend(project(row_slice(out.f0, r + skip), &scale, Some(&offset)));
            let mut naive = head_exact(row_slice(out.f0, r + skip));
            for (i, &g) in out.residuals.iter().enumerate() {
                let piece = row_slice(g, r + skip);
                stack.contributions[i].extend(project(piece, &scale, None));
                for (n, v) in naive.iter_mut().zip(head_exact(piece)) {
                    *n += v;
                }
            }
            let at = (b * rows.len() + r) * pd;
            let total = &tape.value(out.pred).data()[at..at + pd];
            for (n, t) in naive.iter().zip(total) {
                stack.naive_gap = stack.naive_gap.max((n - t).abs());
            }
            stack.total.extend_from_slice(total);
        }
        stacks.push(stack);
    }
    Ok(stacks)
}

/// Mean squared response of a 5-point Laplacian (edge-replicated) over an
/// `[H, W, C]` image.
pub fn high_pass_energy(image: &Tensor<f64>) -> f64 {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let d = image.data();
    let at = |y: usize, x: usize, ch: usize| d[(y * w + x) * c + ch];
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let lap = 4.0 * at(y, x, ch)
                    - at(y.saturating_sub(1), x, ch)
                    - at((y + 1).min(h - 1), x, ch)
                    - at(y, x.saturating_sub(1), ch)
                    - at(y, (x + 1).min(w - 1), ch);
                total += lap * lap;
            }
        }
    }
    total / (h * w * c) as f64
}

/// Number of strict decreases in a sequence.
pub fn inversions(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] < w[0]).count()
}

// ---------------------------------------------------------------------------
// Inter-block weight map

/// `|W|` of the inter-block weights, one row per decoder block and one column
/// per fused encoder map.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    /// Encoder map index of each column.
    pub sources: Vec<usize>,
}

pub fn interblock_weight_map<T: Scalar>(
    model: &MaskedAutoencoder,
    params: &ParamStore<T>,
    row_normalize: bool,
) -> Result<WeightMap> {
    let Decoder::Cross(dec) = &model.decoder else {
        return Err(AnalysisError::Unsupported("the self-attention decoder has no inter-block weights".into()));
    };
    let Some(w) = dec.interblock.weights else {
        return Err(AnalysisError::Unsupported("only one feature map is fused; there is no weight map".into()));
    };
    let t = params.get(w);
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let mut values: Vec<f64> = t.data().iter().map(|v| v.to_f64().abs()).collect();
    if row_normalize {
        for row in values.chunks_mut(cols) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
    }
    Ok(WeightMap { rows, cols, values, sources: dec.interblock.selection.clone() })
}

impl WeightMap {
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let header: Vec<String> = self.sources.iter().map(|s| format!("map{s}")).collect();
        writeln!(out, "decoder_block,{}", header.join(","))?;
        for (d, row) in self.values.chunks(self.cols).enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(out, "{},{}", d, cells.join(","))?;
        }
        Ok(())
    }

    /// Grayscale rendering scaled to the largest entry, `cell` pixels per entry.
    pub fn to_image(&self, cell: usize) -> Tensor<f64> {
        let top = self.values.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let (h, w) = (self.rows * cell, self.cols * cell);
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let v = self.values[(y / cell) * self.cols + x / cell] / top;
                data.extend([v, v, v]);
            }
        }
        Tensor::new(vec![h, w, 3], data).expect("consistent image shape")
    }

    /// Normalized mass-weighted mean source index of every row.
    pub fn row_centroids(&self) -> Vec<f64> {
        self.values
            .chunks(self.cols)
            .map(|row| {
                let s: f64 = row.iter().sum();
                row.iter().zip(&self.sources).map(|(v, &src)| v * src as f64).sum::<f64>() / s.max(f64::MIN_POSITIVE)
            })
            .collect()
    }
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

// ---------------------------------------------------------------------------
// FLOPS and memory model

/// Multiply-adds of one attention block, counted as 2 FLOPs each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BlockFlops {
    /// Query, key, value and output projections.
    pub projections: u64,
    /// Attention scores and the weighted sum of values.
    pub mixing: u64,
    pub mlp: u64,
}

impl BlockFlops {
    pub fn attention(&self) -> u64 {
        self.projections + self.mixing
    }

    pub fn total(&self) -> u64 {
        self.projections + self.mixing + self.mlp
    }
}

/// One block with `lq` queries over `lkv` keys of width `kv_dim`, model width
/// `dim`; `mlp_ratio = 0` omits the MLP.
pub fn attention_block_flops(lq: usize, lkv: usize, dim: usize, kv_dim: usize, mlp_ratio: f64) -> BlockFlops {
    let (lq, lkv, d, kv) = (lq as u64, lkv as u64, dim as u64, kv_dim as u64);
    let hidden = if mlp_ratio > 0.0 { hidden_dim(dim, mlp_ratio) as u64 } else { 0 };
    BlockFlops {
        projections: 2 * (lq * d * d + 2 * lkv * kv * d + lq * d * d),
        mixing: 2 * 2 * lq * lkv * d,
        mlp: 2 * 2 * lq * d * hidden,
    }
}

pub const FLOPS_HEADER: &str = "\
# FLOPS convention: one multiply-add = 2 FLOPs. Counted: linear projections
# (Q, K, V, output; K/V from the encoder width), attention scores and the
# weighted sum of values, MLPs, decoder input embedding, inter-block fusion
# (one multiply-add per fused map, block, key token and channel) and the
# reconstruction head. Softmax, layer norm, GELU and additions are ignored.
# Self-attention decoders see 1+N tokens; cross decoders use floor(gamma*N)
# queries over 1+|visible| keys.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub variant: DecoderVariant,
    pub num_patches: usize,
    pub visible: usize,
    pub queries: usize,
    pub mask_ratio: f64,
    pub prediction_ratio: f64,
    pub encoder_cfg: EncoderConfig,
    pub decoder_cfg: DecoderConfig,
    pub encoder: u64,
    pub decoder_embed: u64,
    pub decoder_attention: u64,
    pub decoder_mlp: u64,
    pub fusion: u64,
    pub head: u64,
    pub decoder_total: u64,
    pub total: u64,
    /// Rough f32 bytes of decoder activations kept for the backward pass, per image.
    pub decoder_activation_bytes: u64,
}

pub fn count_flops(enc: &EncoderConfig, dec: &DecoderConfig, mask_ratio: f64, prediction_ratio: f64) -> Result<FlopsReport> {
    let n = enc.num_patches();
    // reuse the mask-plan validation and counting rules
    MaskPlan::new(n, mask_ratio, prediction_ratio, 0)?;
    let visible = n - floor_count(mask_ratio, n);
    let predicted = floor_count(prediction_ratio, n).min(n - visible);
    let pd = enc.patch_dim() as u64;
    let (de, dd) = (enc.dim as u64, dec.dim as u64);

    let enc_block = attention_block_flops(1 + visible, 1 + visible, enc.dim, enc.dim, enc.mlp_ratio);
    let encoder = 2 * visible as u64 * pd * de + enc.depth as u64 * enc_block.total();

    let (queries, embed, per_block, fusion, head_rows, kv_rows) = match dec.variant {
        DecoderVariant::SelfAttn => {
            let l = 1 + n;
            let embed = 2 * (1 + visible) as u64 * de * dd;
            (l, embed, attention_block_flops(l, l, dec.dim, dec.dim, dec.mlp_ratio), 0, l, l)
        }
        DecoderVariant::CrossAttn | DecoderVariant::CrossPlusSelf => {
            let lkv = 1 + visible;
            let mut b = attention_block_flops(predicted, lkv, dec.dim, enc.dim, dec.mlp_ratio);
            if dec.variant == DecoderVariant::CrossPlusSelf {
                let s = attention_block_flops(predicted, predicted, dec.dim, dec.dim, 0.0);
                b.projections += s.projections;
                b.mixing += s.mixing;
            }
            let fusion = if dec.fused_maps > 1 { 2 * (dec.fused_maps * dec.depth * lkv) as u64 * de } else { 0 };
            (predicted, 0, b, fusion, predicted, lkv)
        }
    };
    let depth = dec.depth as u64;
    let decoder_attention = depth * per_block.attention();
    let decoder_mlp = depth * per_block.mlp;
    let head = 2 * head_rows as u64 * dd * pd;
    let decoder_total = embed + decoder_attention + decoder_mlp + fusion + head;
    let hidden = hidden_dim(dec.dim, dec.mlp_ratio) as u64;
    let per_block_bytes = 4
        * (queries as u64 * dd * 6
            + queries as u64 * hidden * 2
            + 2 * kv_rows as u64 * dd
            + dec.heads as u64 * queries as u64 * kv_rows as u64);
    Ok(FlopsReport {
        variant: dec.variant,
        num_patches: n,
        visible,
        queries,
        mask_ratio,
        prediction_ratio,
        encoder_cfg: enc.clone(),
        decoder_cfg: dec.clone(),
        encoder,
        decoder_embed: embed,
        decoder_attention,
        decoder_mlp,
        fusion,
        head,
        decoder_total,
        total: encoder + decoder_total,
        decoder_activation_bytes: depth * per_block_bytes,
    })
}

impl FlopsReport {
    pub fn write_text<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{FLOPS_HEADER}")?;
        writeln!(
            out,
            "# variant={} patches={} visible={} decoder_queries={} p={} gamma={} dec_depth={} dec_dim={} fused_maps={}",
            self.variant.label(),
            self.num_patches,
            self.visible,
            self.queries,
            self.mask_ratio,
            self.prediction_ratio,
            self.decoder_cfg.depth,
            self.decoder_cfg.dim,
            self.decoder_cfg.fused_maps
        )?;
        writeln!(out, "component,flops")?;
        for (name, v) in [
            ("encoder", self.encoder),
            ("decoder_embed", self.decoder_embed),
            ("decoder_attention", self.decoder_attention),
            ("decoder_mlp", self.decoder_mlp),
            ("interblock_fusion", self.fusion),
            ("head", self.head),
            ("decoder_total", self.decoder_total),
            ("total", self.total),
            ("decoder_activation_bytes", self.decoder_activation_bytes),
        ] {
            writeln!(out, "{name},{v}")?;
        }
        Ok(())
    }
}

/// Writes `image: [H, W, 3]` in `[0, 1]` as a PPM file.
pub fn save_image(image: &Tensor<f64>, path: &Path) -> io::Result<()> {
    crate::data::write_ppm(image, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_attention_map() {
        // tokens: cls, p0 (visible), p1 (masked); rows sum to 1
        let probs = [
            0.2, 0.3, 0.5, //
            0.1, 0.1, 0.8, //
            0.5, 0.2, 0.3, //
        ];
        let (mm, mv) = group_means(&probs, &[0, 1]);
        assert_eq!(mm, 0.3);
        assert!((mv - (0.5 + 0.2) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn spearman_extremes() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn laplacian_ignores_constants() {
        let flat = Tensor::full(&[4, 4, 3], 0.7);
        assert!(high_pass_energy(&flat) < 1e-24);
        let mut checker = Tensor::zeros(&[4, 4, 1]);
        for y in 0..4 {
            for x in 0..4 {
                checker.data_mut()[y * 4 + x] = ((x + y) % 2) as f64;
            }
        }
        assert!(high_pass_energy(&checker) > 1.0);
    }
}
