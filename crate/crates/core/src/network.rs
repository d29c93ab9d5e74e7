//! Baseline and KDSM computation graphs.
//!
//! Baseline: `H = T x V` with `T` the adapted prompt features and `V` the
//! vision head output. KDSM: encoder features are refined by VKRA
//! (prompt self-attention, vision-to-prompt cross-attention), merged back,
//! decoded to `O` group heatmaps, and each heatmap is summarized into a
//! descriptor column of `V'` so that `T' V'` scores prompts against groups.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{KdsmError, Result};
use crate::heatmap::HeatmapStack;
use crate::nn::{
    attention_layer, decoder_layer, init_attention_layer, init_decoder_layer, init_linear, linear, AttentionDims,
    Bound, ForwardCtx, Init, ParamStore,
};
use crate::tensor::{ConvGeometry, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    #[default]
    Kdsm,
}

impl std::str::FromStr for Mode {
    type Err = KdsmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "kdsm" => Ok(Mode::Kdsm),
            _ => Err(KdsmError::Usage(format!("mode must be `baseline` or `kdsm`, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Kdsm => "kdsm",
        })
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: Mode,
    /// Padded prompt slots.
    pub k: usize,
    /// Heatmap groups (KDSM output channels).
    pub o: usize,
    /// Adapted feature width.
    pub c: usize,
    /// Raw text embedding width.
    pub c0: usize,
    /// Attention width.
    pub d: usize,
    pub heads: usize,
    pub self_layers: usize,
    pub cross_layers: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub image_size: usize,
    pub heatmap_size: usize,
    /// Widths of the three stride-2 encoder blocks; the last one is `C_f`.
    pub enc_channels: Vec<usize>,
    /// Widths of the three transposed-convolution blocks of the head.
    pub head_channels: Vec<usize>,
    /// Hidden width of the vision adapter.
    pub vadapter_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: Mode::Kdsm,
            k: 100,
            o: 100,
            c: 64,
            c0: 512,
            d: 512,
            heads: 4,
            self_layers: 3,
            cross_layers: 3,
            ffn: 2048,
            dropout: 0.1,
            image_size: 64,
            heatmap_size: 64,
            enc_channels: vec![64, 64, 64],
            head_channels: vec![64, 64, 64],
            vadapter_hidden: 64,
        }
    }
}

const KERNEL: usize = 3;

fn enc_geo() -> ConvGeometry {
    ConvGeometry::new(2, 1)
}

fn head_geo() -> ConvGeometry {
    ConvGeometry::new(2, 1).with_output_padding(1)
}

impl ModelConfig {
    pub fn attention_dims(&self) -> AttentionDims {
        AttentionDims {
            d: self.d,
            heads: self.heads,
            ffn: self.ffn,
            dropout: self.dropout,
        }
    }

    /// Feature-map side after the encoder; the head upsamples it by 8.
    pub fn feature_size(&self) -> usize {
        self.heatmap_size / 8
    }

    /// Number of stride-2 encoder blocks: three, plus one per extra factor
    /// of two by which the image exceeds the heatmap.
    pub fn encoder_blocks(&self) -> usize {
        let mut n = 3;
        let mut s = self.image_size;
        while s > self.heatmap_size {
            s /= 2;
            n += 1;
        }
        n
    }

    pub fn c_f(&self) -> usize {
        *self.enc_channels.last().unwrap_or(&0)
    }

    /// Channel count of the head output.
    pub fn head_out(&self) -> usize {
        match self.mode {
            Mode::Kdsm => self.o,
            Mode::Baseline => self.c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KdsmError::Config(m));
        if [self.k, self.o, self.c, self.c0, self.d, self.ffn, self.vadapter_hidden]
            .iter()
            .any(|&v| v == 0)
        {
            return bad("k, o, c, c0, d, ffn and vadapter_hidden must be positive".into());
        }
        self.attention_dims().validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.heatmap_size < 8 || self.heatmap_size % 8 != 0 {
            return bad(format!("heatmap size {} is not a positive multiple of 8", self.heatmap_size));
        }
        if self.image_size < self.heatmap_size
            || self.image_size % self.heatmap_size != 0
            || !(self.image_size / self.heatmap_size).is_power_of_two()
        {
            return bad(format!(
                "image size {} must be the heatmap size {} times a power of two",
                self.image_size, self.heatmap_size
            ));
        }
        if self.enc_channels.len() != 3 || self.head_channels.len() != 3 {
            return bad("enc_channels and head_channels need exactly three widths".into());
        }
        if self.enc_channels.iter().chain(&self.head_channels).any(|&c| c == 0) {
            return bad("channel widths must be positive".into());
        }
        Ok(())
    }
}

/// Kaiming-uniform weights, zero biases. Names are shared between the two
/// modes wherever shapes agree, so both start from identical shared weights.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    let relu_gain = 2f64.sqrt();

    let mut cin = 1;
    for b in 0..cfg.encoder_blocks() {
        let cout = cfg.enc_channels[b.min(2)];
        let fan_in = cin * KERNEL * KERNEL;
        s.init(seed, &format!("enc.{b}.w"), &[cout, cin, KERNEL, KERNEL], Init::KaimingUniform { fan_in, gain: relu_gain });
        s.init(seed, &format!("enc.{b}.b"), &[cout], Init::Zeros);
        cin = cout;
    }

    let mut cin = cfg.c_f();
    for (b, &cout) in cfg.head_channels.iter().enumerate() {
        // each output pixel of a stride-2 transposed conv sees about a quarter of the kernel
        let fan_in = (cin * KERNEL * KERNEL / 4).max(1);
        s.init(seed, &format!("head.{b}.w"), &[cin, cout, KERNEL, KERNEL], Init::KaimingUniform { fan_in, gain: relu_gain });
        s.init(seed, &format!("head.{b}.b"), &[cout], Init::Zeros);
        cin = cout;
    }
    let n = cfg.head_out();
    s.init(seed, "head.out.w", &[n, cin, 1, 1], Init::KaimingUniform { fan_in: cin, gain: 1.0 });
    s.init(seed, "head.out.b", &[n], Init::Zeros);

    init_linear(&mut s, seed, "kp_adapter.fc1", cfg.c0, cfg.c, relu_gain);
    init_linear(&mut s, seed, "kp_adapter.fc2", cfg.c, cfg.c, 1.0);

    if cfg.mode == Mode::Kdsm {
        let dims = cfg.attention_dims();
        let hw = cfg.feature_size() * cfg.feature_size();
        init_linear(&mut s, seed, "vkra.text_in", cfg.c0, cfg.d, 1.0);
        for l in 0..cfg.self_layers {
            init_attention_layer(&mut s, seed, &format!("vkra.text.{l}"), dims);
        }
        init_linear(&mut s, seed, "vkra.vis_in", cfg.c_f(), cfg.d, 1.0);
        s.init(seed, "vkra.pos", &[hw, cfg.d], Init::Uniform(0.02));
        for l in 0..cfg.cross_layers {
            init_decoder_layer(&mut s, seed, &format!("vkra.vis.{l}"), dims);
        }
        init_linear(&mut s, seed, "vkra.vis_out", cfg.d, cfg.c_f(), 1.0);
        // the refinement branch starts closed so the merge passes encoder features through
        s.init(seed, "vkra.vis_out.w", &[cfg.d, cfg.c_f()], Init::Zeros);

        let plane = cfg.heatmap_size * cfg.heatmap_size;
        init_linear(&mut s, seed, "vis_adapter.fc1", plane, cfg.vadapter_hidden, relu_gain);
        init_linear(&mut s, seed, "vis_adapter.fc2", cfg.vadapter_hidden, cfg.c, 1.0);
    }
    Ok(s)
}

/// Stride-2 conv + bias + ReLU blocks: `ch x S x S -> C_f x S/8 x S/8` for a
/// square heatmap-sized image.
pub fn vision_encode(g: &mut Graph, p: &Bound, cfg: &ModelConfig, image: Var) -> Result<Var> {
    let shape = g.shape(image).to_vec();
    if shape.len() != 3 || shape[1] != cfg.image_size || shape[2] != cfg.image_size {
        return Err(KdsmError::Config(format!(
            "expected a 1 x {0} x {0} image, got {shape:?}",
            cfg.image_size
        )));
    }
    let mut x = image;
    for b in 0..cfg.encoder_blocks() {
        let w = p.var(&format!("enc.{b}.w"))?;
        let bias = p.var(&format!("enc.{b}.b"))?;
        x = g.conv2d(x, w, enc_geo())?;
        x = g.add_channel_bias(x, bias)?;
        x = g.relu(x);
    }
    Ok(x)
}

/// Two affine layers with a ReLU between, applied to each prompt row.
pub fn keypoint_adapter(g: &mut Graph, p: &Bound, raw: Var) -> Result<Var> {
    let h = linear(g, p, "kp_adapter.fc1", raw)?;
    let h = g.relu(h);
    linear(g, p, "kp_adapter.fc2", h)
}

/// Returns `(Y_t [K x d], V_tilde [C_f x h x w])`.
pub fn vkra_forward(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    raw_text: Var,
    vision_feat: Var,
    ctx: &ForwardCtx,
) -> Result<(Var, Var)> {
    let dims = cfg.attention_dims();
    let mut y = linear(g, p, "vkra.text_in", raw_text)?;
    for l in 0..cfg.self_layers {
        y = attention_layer(g, p, &format!("vkra.text.{l}"), y, None, dims, ctx)?;
    }

    let fshape = g.shape(vision_feat).to_vec();
    if fshape.len() != 3 || fshape[0] != cfg.c_f() {
        return Err(KdsmError::Config(format!(
            "vision features {fshape:?} do not have {} channels",
            cfg.c_f()
        )));
    }
    let (cf, h, w) = (fshape[0], fshape[1], fshape[2]);
    let flat = g.reshape(vision_feat, &[cf, h * w])?;
    let tokens = g.transpose(flat)?;
    let x = linear(g, p, "vkra.vis_in", tokens)?;
    let pos = p.var("vkra.pos")?;
    if g.shape(pos) != g.shape(x) {
        return Err(KdsmError::Config(format!(
            "positional table {:?} does not fit {} vision tokens",
            g.shape(pos),
            h * w
        )));
    }
    let mut x = g.add(x, pos)?;
    for l in 0..cfg.cross_layers {
        x = decoder_layer(g, p, &format!("vkra.vis.{l}"), x, y, dims, ctx)?;
    }
    let out = linear(g, p, "vkra.vis_out", x)?;
    let out = g.transpose(out)?;
    let v_tilde = g.reshape(out, &[cf, h, w])?;
    Ok((y, v_tilde))
}

/// Element-wise sum.
pub fn merge_residual(g: &mut Graph, v: Var, v_tilde: Var) -> Result<Var> {
    g.add(v, v_tilde)
}

/// Three stride-2 transposed-conv + ReLU blocks, then a 1x1 conv without
/// activation.
pub fn vision_head(g: &mut Graph, p: &Bound, cfg: &ModelConfig, feat: Var) -> Result<Var> {
    let mut x = feat;
    for b in 0..cfg.head_channels.len() {
        let w = p.var(&format!("head.{b}.w"))?;
        let bias = p.var(&format!("head.{b}.b"))?;
        x = g.deconv2d(x, w, head_geo())?;
        x = g.add_channel_bias(x, bias)?;
        x = g.relu(x);
    }
    let w = p.var("head.out.w")?;
    let b = p.var("head.out.b")?;
    let x = g.conv2d(x, w, ConvGeometry::new(1, 0))?;
    g.add_channel_bias(x, b)
}

/// Shared two-layer MLP over each flattened heatmap channel: `O x hw -> C x O`.
pub fn vision_adapter(g: &mut Graph, p: &Bound, h_raw: Var) -> Result<Var> {
    let s = g.shape(h_raw).to_vec();
    if s.len() != 3 {
        return Err(KdsmError::Config(format!("heatmap stack must be rank 3, got {s:?}")));
    }
    let flat = g.reshape(h_raw, &[s[0], s[1] * s[2]])?;
    let h = linear(g, p, "vis_adapter.fc1", flat)?;
    let h = g.relu(h);
    let v = linear(g, p, "vis_adapter.fc2", h)?;
    g.transpose(v)
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutputs {
    /// `N x hei x wid`: `O` group heatmaps (KDSM) or `K` prompt heatmaps
    /// (baseline).
    pub h_raw: Var,
    /// `K x C`
    pub t_adapted: Var,
    /// `C x O`, KDSM only.
    pub v_adapted: Option<Var>,
    /// `K x O` pre-softmax scores, KDSM only.
    pub logits: Option<Var>,
}

fn check_mode(cfg: &ModelConfig, want: Mode) -> Result<()> {
    if cfg.mode != want {
        return Err(KdsmError::Config(format!("model is configured as {}, not {want}", cfg.mode)));
    }
    Ok(())
}

fn check_text(g: &Graph, cfg: &ModelConfig, raw: Var) -> Result<()> {
    if g.shape(raw) != [cfg.k, cfg.c0] {
        return Err(KdsmError::Config(format!(
            "prompt features {:?} do not match K={} x C0={}",
            g.shape(raw),
            cfg.k,
            cfg.c0
        )));
    }
    Ok(())
}

pub fn baseline_forward(g: &mut Graph, p: &Bound, cfg: &ModelConfig, image: Var, raw_text: Var) -> Result<ForwardOutputs> {
    check_mode(cfg, Mode::Baseline)?;
    check_text(g, cfg, raw_text)?;
    let t = keypoint_adapter(g, p, raw_text)?;
    let feat = vision_encode(g, p, cfg, image)?;
    let v = vision_head(g, p, cfg, feat)?;
    let (c, hei, wid) = (cfg.c, cfg.heatmap_size, cfg.heatmap_size);
    let v = g.reshape(v, &[c, hei * wid])?;
    let h = g.matmul(t, v)?;
    let h = g.reshape(h, &[cfg.k, hei, wid])?;
    Ok(ForwardOutputs {
        h_raw: h,
        t_adapted: t,
        v_adapted: None,
        logits: None,
    })
}

pub fn kdsm_forward(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    image: Var,
    raw_text: Var,
    ctx: &ForwardCtx,
) -> Result<ForwardOutputs> {
    check_mode(cfg, Mode::Kdsm)?;
    check_text(g, cfg, raw_text)?;
    let feat = vision_encode(g, p, cfg, image)?;
    let (_, v_tilde) = vkra_forward(g, p, cfg, raw_text, feat, ctx)?;
    let merged = merge_residual(g, feat, v_tilde)?;
    let h_raw = vision_head(g, p, cfg, merged)?;
    let v_adapted = vision_adapter(g, p, h_raw)?;
    let t = keypoint_adapter(g, p, raw_text)?;
    let logits = g.matmul(t, v_adapted)?;
    Ok(ForwardOutputs {
        h_raw,
        t_adapted: t,
        v_adapted: Some(v_adapted),
        logits: Some(logits),
    })
}

/// Mode-dispatching forward pass.
pub fn forward(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    image: Var,
    raw_text: Var,
    ctx: &ForwardCtx,
) -> Result<ForwardOutputs> {
    match cfg.mode {
        Mode::Baseline => baseline_forward(g, p, cfg, image, raw_text),
        Mode::Kdsm => kdsm_forward(g, p, cfg, image, raw_text, ctx),
    }
}

/// Evaluation-mode outputs as plain tensors.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub heatmaps: HeatmapStack,
    pub logits: Option<Tensor>,
}

/// Runs the configured forward pass with frozen parameters and dropout off.
pub fn predict(cfg: &ModelConfig, params: &ParamStore, image: &Tensor, raw_text: &Tensor, k_valid: usize) -> Result<Prediction> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let img = g.constant(image.clone());
    let txt = g.constant(raw_text.clone());
    let out = forward(&mut g, &p, cfg, img, txt, &ForwardCtx::eval())?;
    Ok(Prediction {
        heatmaps: HeatmapStack {
            channels: g.value(out.h_raw).clone(),
            valid: match cfg.mode {
                Mode::Baseline => k_valid,
                Mode::Kdsm => cfg.o,
            },
        },
        logits: out.logits.map(|l| g.value(l).clone()),
    })
}
