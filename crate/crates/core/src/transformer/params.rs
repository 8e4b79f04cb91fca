use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::config::ModelConfig;
use crate::autodiff::Tensor;

/// Affine map `x·W + b` with `W: in×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

/// Elementwise gain and bias after layer normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub out: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub norm1: Norm<T>,
    pub attn: Attention<T>,
    pub norm2: Norm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// Every trainable array of the model. Instantiated with `Tensor` for
/// storage, with `Var` when bound into a graph, and again with `Tensor`
/// for gradients and optimizer buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub patch_embed: Linear<T>,
    pub pos_embed: T,
    pub token_src: T,
    pub token_tgt: T,
    pub blocks: Vec<Block<T>>,
    pub norm: Norm<T>,
    pub head_src: Linear<T>,
    pub head_tgt: Linear<T>,
}

impl<T> Linear<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Linear<U> {
        Linear {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    fn push_refs<'a>(&'a self, out: &mut Vec<&'a T>) {
        out.extend([&self.weight, &self.bias]);
    }

    fn push_muts<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

impl<T> Norm<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Norm<U> {
        Norm {
            gain: f(&format!("{prefix}.gain"), &self.gain),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    fn push_refs<'a>(&'a self, out: &mut Vec<&'a T>) {
        out.extend([&self.gain, &self.bias]);
    }

    fn push_muts<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.gain);
        out.push(&mut self.bias);
    }
}

impl<T> Block<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Block<U> {
        Block {
            norm1: self.norm1.map(&format!("{prefix}.norm1"), f),
            attn: Attention {
                query: self.attn.query.map(&format!("{prefix}.attn.query"), f),
                key: self.attn.key.map(&format!("{prefix}.attn.key"), f),
                value: self.attn.value.map(&format!("{prefix}.attn.value"), f),
                out: self.attn.out.map(&format!("{prefix}.attn.out"), f),
            },
            norm2: self.norm2.map(&format!("{prefix}.norm2"), f),
            fc1: self.fc1.map(&format!("{prefix}.fc1"), f),
            fc2: self.fc2.map(&format!("{prefix}.fc2"), f),
        }
    }

    fn push_refs<'a>(&'a self, out: &mut Vec<&'a T>) {
        self.norm1.push_refs(out);
        self.attn.query.push_refs(out);
        self.attn.key.push_refs(out);
        self.attn.value.push_refs(out);
        self.attn.out.push_refs(out);
        self.norm2.push_refs(out);
        self.fc1.push_refs(out);
        self.fc2.push_refs(out);
    }

    fn push_muts<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.norm1.push_muts(out);
        self.attn.query.push_muts(out);
        self.attn.key.push_muts(out);
        self.attn.value.push_muts(out);
        self.attn.out.push_muts(out);
        self.norm2.push_muts(out);
        self.fc1.push_muts(out);
        self.fc2.push_muts(out);
    }
}

impl<T> Params<T> {
    /// Structure-preserving map; `f` receives the dotted parameter name.
    /// Visits entries in the same order as [`Params::flat`].
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Params<U> {
        let f = &mut f;
        Params {
            patch_embed: self.patch_embed.map("patch_embed", f),
            pos_embed: f("pos_embed", &self.pos_embed),
            token_src: f("token_src", &self.token_src),
            token_tgt: f("token_tgt", &self.token_tgt),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("blocks.{i}"), f))
                .collect(),
            norm: self.norm.map("norm", f),
            head_src: self.head_src.map("head_src", f),
            head_tgt: self.head_tgt.map("head_tgt", f),
        }
    }

    pub fn flat(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.patch_embed.push_refs(&mut out);
        out.extend([&self.pos_embed, &self.token_src, &self.token_tgt]);
        for b in &self.blocks {
            b.push_refs(&mut out);
        }
        self.norm.push_refs(&mut out);
        self.head_src.push_refs(&mut out);
        self.head_tgt.push_refs(&mut out);
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.patch_embed.push_muts(&mut out);
        out.push(&mut self.pos_embed);
        out.push(&mut self.token_src);
        out.push(&mut self.token_tgt);
        for b in &mut self.blocks {
            b.push_muts(&mut out);
        }
        self.norm.push_muts(&mut out);
        self.head_src.push_muts(&mut out);
        self.head_tgt.push_muts(&mut out);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.map(|name, _| names.push(name.to_string()));
        names
    }
}

/// Classifier heads train with the multiplied learning rate.
pub fn is_classifier_param(name: &str) -> bool {
    name.starts_with("head_src.") || name.starts_with("head_tgt.")
}

fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape")
}

/// Normal(0, std) resampled until within two standard deviations.
fn trunc_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn linear(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Linear<Tensor> {
    Linear {
        weight: xavier_uniform(rng, fan_in, fan_out),
        bias: Tensor::zeros(&[fan_out]),
    }
}

fn norm(dim: usize) -> Norm<Tensor> {
    Norm {
        gain: Tensor::full(&[dim], 1.0),
        bias: Tensor::zeros(&[dim]),
    }
}

const EMBED_STD: f64 = 0.02;

impl Params<Tensor> {
    /// Truncated-normal embeddings and tokens, Xavier-uniform linear
    /// weights, zero biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = config.embed_dim;
        let patch_embed = linear(rng, config.patch_len(), d);
        let pos_embed = trunc_normal(rng, &[config.seq_len(), d], EMBED_STD);
        let token_src = trunc_normal(rng, &[1, d], EMBED_STD);
        let token_tgt = trunc_normal(rng, &[1, d], EMBED_STD);
        let blocks = (0..config.depth)
            .map(|_| Block {
                norm1: norm(d),
                attn: Attention {
                    query: linear(rng, d, d),
                    key: linear(rng, d, d),
                    value: linear(rng, d, d),
                    out: linear(rng, d, d),
                },
                norm2: norm(d),
                fc1: linear(rng, d, config.hidden_dim()),
                fc2: linear(rng, config.hidden_dim(), d),
            })
            .collect();
        Params {
            patch_embed,
            pos_embed,
            token_src,
            token_tgt,
            blocks,
            norm: norm(d),
            head_src: linear(rng, d, config.num_classes),
            head_tgt: linear(rng, d, config.num_classes),
        }
    }

    /// All-zero parameters with the shapes `config` implies.
    pub fn zeros(config: &ModelConfig) -> Self {
        use rand::SeedableRng;
        Self::init(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).zeros_like()
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_, t| Tensor::zeros(t.shape()))
    }

    pub fn num_scalars(&self) -> usize {
        self.flat().iter().map(|t| t.len()).sum()
    }
}
