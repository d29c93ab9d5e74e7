//! Named parameters, initialization and the transformer building blocks.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{KdsmError, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Mixes several values into one well-spread seed (splitmix64 finalizer).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        z ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(z << 6).wrapping_add(z >> 2);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// How a fresh parameter tensor is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±gain * sqrt(3 / fan_in)`.
    KaimingUniform { fan_in: usize, gain: f64 },
    Uniform(f64),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Adds a parameter whose values depend only on `(seed, name)`, so two
    /// models sharing a parameter name start from identical weights.
    pub fn init(&mut self, seed: u64, name: &str, shape: &[usize], init: Init) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, fnv1a64(name.as_bytes())]));
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::KaimingUniform { fan_in, gain } => {
                let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
            }
            Init::Uniform(b) => (0..n).map(|_| rng.gen_range(-b..=b)).collect(),
        };
        self.params.insert(
            name.to_string(),
            Tensor::new(shape.to_vec(), data).expect("positive shape"),
        );
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Sets every parameter whose name starts with one of `prefixes` to zero.
    pub fn zero_matching(&mut self, prefixes: &[&str]) {
        for (name, t) in self.params.iter_mut() {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Registers every parameter in `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameter names mapped to their graph leaves.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| KdsmError::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Forward-pass mode. Training mode enables dropout; every dropout site draws
/// its own mask seed from the call seed and a running site counter.
#[derive(Debug)]
pub struct ForwardCtx {
    training: bool,
    seed: u64,
    site: std::cell::Cell<u64>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            training: false,
            seed: 0,
            site: std::cell::Cell::new(0),
        }
    }

    pub fn train(seed: u64) -> Self {
        ForwardCtx {
            training: true,
            seed,
            site: std::cell::Cell::new(0),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn dropout(&self, g: &mut Graph, x: Var, rate: f64) -> Var {
        if !self.training || rate <= 0.0 {
            return x;
        }
        let site = self.site.get();
        self.site.set(site + 1);
        g.dropout(x, rate, mix_seed(&[self.seed, site]))
    }
}

/// `x [m, in] * W [in, out] + b`.
pub fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row_bias(y, b)
}

pub fn init_linear(store: &mut ParamStore, seed: u64, prefix: &str, fan_in: usize, fan_out: usize, gain: f64) {
    store.init(
        seed,
        &format!("{prefix}.w"),
        &[fan_in, fan_out],
        Init::KaimingUniform { fan_in, gain },
    );
    store.init(seed, &format!("{prefix}.b"), &[fan_out], Init::Zeros);
}

pub fn layer_norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gamma = p.var(&format!("{prefix}.g"))?;
    let beta = p.var(&format!("{prefix}.b"))?;
    g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
}

pub fn init_layer_norm(store: &mut ParamStore, seed: u64, prefix: &str, width: usize) {
    store.init(seed, &format!("{prefix}.g"), &[width], Init::Ones);
    store.init(seed, &format!("{prefix}.b"), &[width], Init::Zeros);
}

/// Width and regularization of one attention stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionDims {
    pub d: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
}

impl AttentionDims {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(KdsmError::Config(format!(
                "embedding width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

pub fn init_mha(store: &mut ParamStore, seed: u64, prefix: &str, d: usize) {
    for proj in ["q", "k", "v", "o"] {
        init_linear(store, seed, &format!("{prefix}.{proj}"), d, d, 1.0);
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
pub fn multi_head_attention(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    dims: AttentionDims,
    ctx: &ForwardCtx,
) -> Result<Var> {
    dims.validate()?;
    let q = linear(g, p, &format!("{prefix}.q"), q_in)?;
    let k = linear(g, p, &format!("{prefix}.k"), k_in)?;
    let v = linear(g, p, &format!("{prefix}.v"), v_in)?;
    let dh = dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(dims.heads);
    for h in 0..dims.heads {
        let (qh, kh, vh) = if dims.heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = g.matmul_t(qh, false, kh, true)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores)?;
        let attn = ctx.dropout(g, attn, dims.dropout);
        heads.push(g.matmul(attn, vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    linear(g, p, &format!("{prefix}.o"), merged)
}

pub fn init_ffn(store: &mut ParamStore, seed: u64, prefix: &str, d: usize, hidden: usize) {
    init_linear(store, seed, &format!("{prefix}.fc1"), d, hidden, 2f64.sqrt());
    init_linear(store, seed, &format!("{prefix}.fc2"), hidden, d, 1.0);
}

/// `x + FFN(LN(x))`, dropout after each fully connected layer.
pub fn ffn_sublayer(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    x: Var,
    dims: AttentionDims,
    ctx: &ForwardCtx,
) -> Result<Var> {
    let h = layer_norm(g, p, &format!("{prefix}.ln"), x)?;
    let h = linear(g, p, &format!("{prefix}.fc1"), h)?;
    let h = g.relu(h);
    let h = ctx.dropout(g, h, dims.dropout);
    let h = linear(g, p, &format!("{prefix}.fc2"), h)?;
    let h = ctx.dropout(g, h, dims.dropout);
    g.add(x, h)
}

pub fn init_attention_layer(store: &mut ParamStore, seed: u64, prefix: &str, dims: AttentionDims) {
    init_layer_norm(store, seed, &format!("{prefix}.attn.ln"), dims.d);
    init_mha(store, seed, &format!("{prefix}.attn"), dims.d);
    init_layer_norm(store, seed, &format!("{prefix}.ffn.ln"), dims.d);
    init_ffn(store, seed, &format!("{prefix}.ffn"), dims.d, dims.ffn);
}

/// One pre-norm transformer layer: `q + MHA(LN(q), k, v)` followed by the
/// FFN sub-block. With `kv = None` it is self-attention over `LN(q)`.
pub fn attention_layer(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    q: Var,
    kv: Option<(Var, Var)>,
    dims: AttentionDims,
    ctx: &ForwardCtx,
) -> Result<Var> {
    let qn = layer_norm(g, p, &format!("{prefix}.attn.ln"), q)?;
    let (k, v) = kv.unwrap_or((qn, qn));
    let a = multi_head_attention(g, p, &format!("{prefix}.attn"), qn, k, v, dims, ctx)?;
    let x = g.add(q, a)?;
    ffn_sublayer(g, p, &format!("{prefix}.ffn"), x, dims, ctx)
}

pub fn init_decoder_layer(store: &mut ParamStore, seed: u64, prefix: &str, dims: AttentionDims) {
    init_layer_norm(store, seed, &format!("{prefix}.self.ln"), dims.d);
    init_mha(store, seed, &format!("{prefix}.self"), dims.d);
    init_layer_norm(store, seed, &format!("{prefix}.cross.ln"), dims.d);
    init_layer_norm(store, seed, &format!("{prefix}.cross.ln_mem"), dims.d);
    init_mha(store, seed, &format!("{prefix}.cross"), dims.d);
    init_layer_norm(store, seed, &format!("{prefix}.ffn.ln"), dims.d);
    init_ffn(store, seed, &format!("{prefix}.ffn"), dims.d, dims.ffn);
}

/// Decoder-style layer: self-attention over `x`, cross-attention with
/// `memory` as key and value, then the FFN sub-block.
pub fn decoder_layer(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    x: Var,
    memory: Var,
    dims: AttentionDims,
    ctx: &ForwardCtx,
) -> Result<Var> {
    let h = layer_norm(g, p, &format!("{prefix}.self.ln"), x)?;
    let a = multi_head_attention(g, p, &format!("{prefix}.self"), h, h, h, dims, ctx)?;
    let x = g.add(x, a)?;

    let h = layer_norm(g, p, &format!("{prefix}.cross.ln"), x)?;
    let mem = layer_norm(g, p, &format!("{prefix}.cross.ln_mem"), memory)?;
    let a = multi_head_attention(g, p, &format!("{prefix}.cross"), h, mem, mem, dims, ctx)?;
    let x = g.add(x, a)?;

    ffn_sublayer(g, p, &format!("{prefix}.ffn"), x, dims, ctx)
}
