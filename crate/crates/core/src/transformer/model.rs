use rand::Rng;

use super::config::ModelConfig;
use super::params::{Attention, Linear, Norm, Params};
use crate::autodiff::{Graph, Tensor, Var, MASK_SENTINEL};
use crate::error::{Error, Result};

/// Additive `n×n` mask separating the two classification tokens: entries
/// `(0, n−1)` and `(n−1, 0)` hold [`MASK_SENTINEL`], all others are zero.
pub fn build_token_mask(n: usize) -> Result<Tensor> {
    if n < 3 {
        return Err(Error::Config(format!(
            "token mask needs sequence length >= 3, got {n}"
        )));
    }
    let mut mask = Tensor::zeros(&[n, n]);
    mask.data_mut()[n - 1] = MASK_SENTINEL;
    mask.data_mut()[(n - 1) * n] = MASK_SENTINEL;
    Ok(mask)
}

/// Switches for ablations and diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Apply the domain-wise token mask in every attention layer.
    pub mask_enabled: bool,
    /// Route the `[tgt]` features through `head_src` as well (one common
    /// classifier).
    pub shared_head: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            mask_enabled: true,
            shared_head: false,
        }
    }
}

/// Final-layer token states and head outputs for one batch.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[src]` token state, `B×D`.
    pub feat_src_view: Var,
    /// `[tgt]` token state, `B×D`.
    pub feat_tgt_view: Var,
    /// `head_src(feat_src_view)`, `B×C`.
    pub logits_src: Var,
    /// `head_tgt(feat_tgt_view)`, `B×C`.
    pub logits_tgt: Var,
    /// Post-softmax attention per layer, each `(B·h)×N×N`.
    pub attention: Vec<Var>,
}

/// Plain-value counterpart of [`ForwardOutput`].
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardValues {
    pub feat_src_view: Tensor,
    pub feat_tgt_view: Tensor,
    pub logits_src: Tensor,
    pub logits_tgt: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WinTrModel {
    pub config: ModelConfig,
    pub params: Params<Tensor>,
}

impl WinTrModel {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, rng);
        Ok(WinTrModel { config, params })
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Params<Var> {
        self.params.map(|_, t| g.param(t.clone()))
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> Params<Var> {
        self.params.map(|_, t| g.constant(t.clone()))
    }

    /// Inference in chunks of `batch_size` images.
    pub fn infer(
        &self,
        images: &Tensor,
        options: ForwardOptions,
        batch_size: usize,
    ) -> Result<ForwardValues> {
        let total = images.shape().first().copied().unwrap_or(0);
        let per_image = images.len() / total.max(1);
        let mut parts: [Vec<f64>; 4] = Default::default();
        let mut start = 0;
        while start < total {
            let end = (start + batch_size.max(1)).min(total);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(
                shape,
                images.data()[start * per_image..end * per_image].to_vec(),
            )?;
            let mut g = Graph::new();
            let bound = self.bind_frozen(&mut g);
            let out = forward(&mut g, &self.config, &bound, &chunk, options)?;
            for (dst, var) in parts.iter_mut().zip([
                out.feat_src_view,
                out.feat_tgt_view,
                out.logits_src,
                out.logits_tgt,
            ]) {
                dst.extend_from_slice(g.value(var).data());
            }
            start = end;
        }
        let d = self.config.embed_dim;
        let c = self.config.num_classes;
        let [fs, ft, ls, lt] = parts;
        Ok(ForwardValues {
            feat_src_view: Tensor::new(vec![total, d], fs)?,
            feat_tgt_view: Tensor::new(vec![total, d], ft)?,
            logits_src: Tensor::new(vec![total, c], ls)?,
            logits_tgt: Tensor::new(vec![total, c], lt)?,
        })
    }
}

/// Splits `B×C×H×W` images into `(B·M)×(C·p·p)` flattened patches, patches
/// in row-major grid order, each patch laid out channel, row, column.
pub fn patchify(config: &ModelConfig, images: &Tensor) -> Result<Tensor> {
    let side = config.image_side;
    let p = config.patch_side;
    let ch = config.channels;
    let expected_tail = [ch, side, side];
    let shape = images.shape();
    if shape.len() != 4 || shape[1..] != expected_tail {
        return Err(Error::Config(format!(
            "images of shape {shape:?} do not match model input [B, {ch}, {side}, {side}]"
        )));
    }
    let batch = shape[0];
    let per_side = side / p;
    let patch_len = config.patch_len();
    let mut out = Vec::with_capacity(batch * config.num_patches() * patch_len);
    let data = images.data();
    for b in 0..batch {
        for gy in 0..per_side {
            for gx in 0..per_side {
                for c in 0..ch {
                    for y in 0..p {
                        let row = ((b * ch + c) * side + gy * p + y) * side + gx * p;
                        out.extend_from_slice(&data[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch * config.num_patches(), patch_len], out)
}

fn apply_linear(g: &mut Graph, x: Var, layer: &Linear<Var>) -> Result<Var> {
    let y = g.matmul(x, layer.weight)?;
    g.add_row(y, layer.bias)
}

fn apply_norm(g: &mut Graph, x: Var, norm: &Norm<Var>) -> Result<Var> {
    let y = g.layer_norm(x);
    let y = g.mul_row(y, norm.gain)?;
    g.add_row(y, norm.bias)
}

/// Rearranges `(B·N)×D` into `(B·h)×N×d`.
fn split_heads(g: &mut Graph, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
    let dim = g.shape(x)[1];
    let hd = dim / heads;
    let x = g.reshape(x, &[batch, seq, heads, hd])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[batch * heads, seq, hd])
}

fn merge_heads(g: &mut Graph, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
    let hd = g.shape(x)[2];
    let x = g.reshape(x, &[batch, heads, seq, hd])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[batch * seq, heads * hd])
}

/// Multi-head `softmax(QKᵀ/√d + M)V` followed by the output projection.
///
/// `x` is the (already normalized) `(B·N)×D` sequence. Returns the
/// projected output and the post-softmax attention `(B·h)×N×N`.
pub fn masked_attention(
    g: &mut Graph,
    x: Var,
    weights: &Attention<Var>,
    mask: Var,
    batch: usize,
    heads: usize,
) -> Result<(Var, Var)> {
    let rows = g.shape(x)[0];
    let dim = g.shape(x)[1];
    if batch == 0 || !rows.is_multiple_of(batch) || heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::shape("masked_attention", g.shape(x), &[batch, heads]));
    }
    let seq = rows / batch;
    let q = apply_linear(g, x, &weights.query)?;
    let k = apply_linear(g, x, &weights.key)?;
    let v = apply_linear(g, x, &weights.value)?;
    let q = split_heads(g, q, batch, seq, heads)?;
    let k = split_heads(g, k, batch, seq, heads)?;
    let v = split_heads(g, v, batch, seq, heads)?;

    let kt = g.transpose(k)?;
    let scores = g.batch_matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / ((dim / heads) as f64).sqrt());
    let scores = g.add_mask(scores, mask)?;
    let attn = g.softmax_lastdim(scores)?;
    let mixed = g.batch_matmul(attn, v)?;
    let merged = merge_heads(g, mixed, batch, seq, heads)?;
    let out = apply_linear(g, merged, &weights.out)?;
    Ok((out, attn))
}

/// Full forward pass for a batch of `B×C×H×W` images.
///
/// Sequence layout is `[src] patches… [tgt]`; the `[src]` state is read at
/// index 0 and the `[tgt]` state at index `N−1`.
pub fn forward(
    g: &mut Graph,
    config: &ModelConfig,
    params: &Params<Var>,
    images: &Tensor,
    options: ForwardOptions,
) -> Result<ForwardOutput> {
    let patches = patchify(config, images)?;
    let batch = images.shape()[0];
    let m = config.num_patches();
    let n = config.seq_len();

    let patches = g.constant(patches);
    let emb = apply_linear(g, patches, &params.patch_embed)?;
    let pool = g.concat_rows(&[params.token_src, params.token_tgt, emb])?;
    let mut order = Vec::with_capacity(batch * n);
    for b in 0..batch {
        order.push(0);
        order.extend((0..m).map(|i| 2 + b * m + i));
        order.push(1);
    }
    let x = g.gather_rows(pool, &order)?;
    let pos_order: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();
    let pos = g.gather_rows(params.pos_embed, &pos_order)?;
    let mut x = g.add(x, pos)?;

    let mask = if options.mask_enabled {
        build_token_mask(n)?
    } else {
        Tensor::zeros(&[n, n])
    };
    let mask = g.constant(mask);

    let mut attention = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let h = apply_norm(g, x, &block.norm1)?;
        let (attn_out, attn) = masked_attention(g, h, &block.attn, mask, batch, config.num_heads)?;
        attention.push(attn);
        x = g.add(x, attn_out)?;
        let h = apply_norm(g, x, &block.norm2)?;
        let h = apply_linear(g, h, &block.fc1)?;
        let h = g.gelu(h);
        let h = apply_linear(g, h, &block.fc2)?;
        x = g.add(x, h)?;
    }
    let x = apply_norm(g, x, &params.norm)?;

    let src_rows: Vec<usize> = (0..batch).map(|b| b * n + config.src_index()).collect();
    let tgt_rows: Vec<usize> = (0..batch).map(|b| b * n + config.tgt_index()).collect();
    let feat_src_view = g.gather_rows(x, &src_rows)?;
    let feat_tgt_view = g.gather_rows(x, &tgt_rows)?;
    let logits_src = apply_linear(g, feat_src_view, &params.head_src)?;
    let tgt_head = if options.shared_head {
        &params.head_src
    } else {
        &params.head_tgt
    };
    let logits_tgt = apply_linear(g, feat_tgt_view, tgt_head)?;

    Ok(ForwardOutput {
        feat_src_view,
        feat_tgt_view,
        logits_src,
        logits_tgt,
        attention,
    })
}

/// Per-row cosine similarity of two `B×D` matrices.
pub fn token_cosine_similarity(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    if a.shape() != b.shape() || a.ndim() != 2 {
        return Err(Error::shape("token_cosine_similarity", a.shape(), b.shape()));
    }
    a.row_iter()
        .zip(b.row_iter())
        .enumerate()
        .map(|(row, (x, y))| {
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nx == 0.0 || ny == 0.0 {
                return Err(Error::UndefinedSimilarity { row });
            }
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            Ok((dot / (nx * ny)).clamp(-1.0, 1.0))
        })
        .collect()
}
