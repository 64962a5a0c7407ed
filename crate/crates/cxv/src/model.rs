//! The CXV network and its Hybrid ViLT variant.
//!
//! CXV layer: 3x3 conv sub-layer -> single channel layer-norm -> linear
//! attention (+residual) -> MLP (+residual). The 2D map shape is preserved
//! through every layer; no class token and no positional embeddings anywhere
//! (the conv sub-layers carry the spatial prior). ViLT layers drop the conv
//! sub-layer and derive Q/K/V with 1x1 convolutions instead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{multihead_attention, AttentionConfig, AttentionKind, AttentionWeights};
use crate::error::{CxvError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Ctx, Tensor};

/// Conv sub-layer geometry: 3x3, stride 1, padding 1 everywhere.
pub const CONV_SUBLAYER_KERNEL: usize = 3;
pub const CONV_SUBLAYER_STRIDE: usize = 1;
pub const CONV_SUBLAYER_PAD: usize = 1;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Cxv,
    HybridVilt,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub variant: Variant,
    pub attention: AttentionConfig,
    pub layers: usize,
    pub mlp_dim: usize,
    /// Channel ladder of the convolutional embedding, ending at model_dim.
    pub embed_channels: Vec<usize>,
    pub embed_kernel: usize,
    pub embed_stride: usize,
    pub embed_pad: usize,
    pub classes: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub dropout_p: f64,
}

/// Default embedding ladder for a given depth and model dim
/// (2 layers: 3 -> 64 -> d; 3 layers: 3 -> 32 -> 64 -> d).
fn default_ladder(depth: usize, d: usize) -> Vec<usize> {
    match depth {
        1 => vec![d],
        2 => vec![64.min(d), d],
        _ => vec![32.min(d), 64.min(d), d],
    }
}

impl ModelConfig {
    fn base(kind: AttentionKind, layers: usize, heads: usize) -> Self {
        let d = 128;
        let mut attention = AttentionConfig::new(kind, d, heads);
        attention.dropout_p = 0.5;
        ModelConfig {
            variant: Variant::Cxv,
            attention,
            layers,
            mlp_dim: 2 * d,
            embed_channels: default_ladder(2, d),
            embed_kernel: 3,
            embed_stride: 1,
            embed_pad: 1,
            classes: 10,
            in_channels: 3,
            in_h: 32,
            in_w: 32,
            dropout_p: 0.5,
        }
    }

    /// Convolutional Nystromformer for Vision (e.g. CNV-5/4).
    pub fn cnv(layers: usize, heads: usize) -> Self {
        Self::base(AttentionKind::Nystromformer, layers, heads)
    }

    /// Convolutional Performer for Vision.
    pub fn cpv(layers: usize, heads: usize) -> Self {
        Self::base(AttentionKind::PerformerRelu, layers, heads)
    }

    /// Convolutional Linear Transformer for Vision.
    pub fn cltv(layers: usize, heads: usize) -> Self {
        Self::base(AttentionKind::LinearTransformer, layers, heads)
    }

    /// Hybrid ViLT: conv embeddings (3->32->64->128), linear-transformer
    /// attention with conv-derived Q/K/V, no per-layer conv sub-layer.
    /// MLP dim is 4x the embedding dim in this variant.
    pub fn vilt(layers: usize, heads: usize) -> Self {
        let mut cfg = Self::base(AttentionKind::LinearTransformer, layers, heads);
        cfg.variant = Variant::HybridVilt;
        cfg.attention.conv_qkv = true;
        cfg.embed_channels = default_ladder(3, cfg.model_dim());
        cfg.mlp_dim = 4 * cfg.model_dim();
        cfg
    }

    /// Shrink to a new embedding dim, keeping the mlp/ladder rules.
    pub fn with_model_dim(mut self, d: usize) -> Self {
        self.attention.model_dim = d;
        self.mlp_dim = match self.variant {
            Variant::Cxv => 2 * d,
            Variant::HybridVilt => 4 * d,
        };
        self.embed_channels = default_ladder(self.embed_channels.len(), d);
        self
    }

    pub fn with_embed_layers(mut self, depth: usize) -> Self {
        self.embed_channels = default_ladder(depth, self.model_dim());
        self
    }

    pub fn model_dim(&self) -> usize {
        self.attention.model_dim
    }

    pub fn heads(&self) -> usize {
        self.attention.heads
    }

    /// Spatial size of the feature maps after the embedding stack.
    pub fn embed_out_hw(&self) -> (usize, usize) {
        let mut h = self.in_h;
        let mut w = self.in_w;
        for _ in &self.embed_channels {
            h = (h + 2 * self.embed_pad - self.embed_kernel) / self.embed_stride + 1;
            w = (w + 2 * self.embed_pad - self.embed_kernel) / self.embed_stride + 1;
        }
        (h, w)
    }

    /// Token count seen by the attention sub-layers.
    pub fn tokens(&self) -> usize {
        let (h, w) = self.embed_out_hw();
        h * w
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.layers == 0 {
            return Err(CxvError::Param("layers must be >= 1".into()));
        }
        if self.mlp_dim == 0 {
            return Err(CxvError::Param("mlp_dim must be >= 1".into()));
        }
        if self.embed_channels.last() != Some(&self.model_dim()) {
            return Err(CxvError::Param(format!(
                "embedding ladder {:?} must end at model_dim {}",
                self.embed_channels,
                self.model_dim()
            )));
        }
        if self.classes == 0 {
            return Err(CxvError::Param("classes must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(CxvError::Param(format!(
                "dropout must satisfy 0 <= p < 1, got {}",
                self.dropout_p
            )));
        }
        if self.variant == Variant::HybridVilt
            && (self.attention.kind != AttentionKind::LinearTransformer
                || !self.attention.conv_qkv)
        {
            return Err(CxvError::Param(
                "HybridVilt requires linear-transformer attention with conv_qkv".into(),
            ));
        }
        Ok(())
    }
}

pub struct Conv2dLayer<E: Scalar> {
    pub w: Tensor<E>,
    pub b: Tensor<E>,
    pub stride: usize,
    pub pad: usize,
}

impl<E: Scalar> Conv2dLayer<E> {
    fn init<R: Rng>(
        rng: &mut R,
        c_out: usize,
        c_in: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        Conv2dLayer {
            w: Tensor::param_uniform(rng, &[c_out, c_in, kernel, kernel], bound),
            b: Tensor::param_uniform(rng, &[c_out], bound),
            stride,
            pad,
        }
    }

    fn forward(&self, ctx: &Ctx<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        ctx.conv2d(x, &self.w, &self.b, self.stride, self.pad)
    }
}

pub struct LinearLayer<E: Scalar> {
    pub w: Tensor<E>,
    pub b: Tensor<E>,
}

impl<E: Scalar> LinearLayer<E> {
    fn init<R: Rng>(rng: &mut R, out: usize, inp: usize) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        LinearLayer {
            w: Tensor::param_uniform(rng, &[out, inp], bound),
            b: Tensor::param_uniform(rng, &[out], bound),
        }
    }

    fn forward(&self, ctx: &Ctx<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        ctx.linear(x, &self.w, &self.b)
    }
}

pub struct LayerNormParams<E: Scalar> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
}

impl<E: Scalar> LayerNormParams<E> {
    fn init(channels: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::param(vec![E::one(); channels], &[channels]).expect("consistent"),
            beta: Tensor::param(vec![E::zero(); channels], &[channels]).expect("consistent"),
        }
    }
}

/// linear(d -> mlp) -> gelu -> dropout -> linear(mlp -> d) -> dropout
pub struct MlpBlock<E: Scalar> {
    pub fc1: LinearLayer<E>,
    pub fc2: LinearLayer<E>,
    dropout_p: f64,
}

impl<E: Scalar> MlpBlock<E> {
    fn init<R: Rng>(rng: &mut R, d: usize, mlp: usize, dropout_p: f64) -> Self {
        MlpBlock {
            fc1: LinearLayer::init(rng, mlp, d),
            fc2: LinearLayer::init(rng, d, mlp),
            dropout_p,
        }
    }

    fn forward(&self, ctx: &Ctx<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.gelu(&h);
        let h = ctx.dropout(&h, self.dropout_p)?;
        let h = self.fc2.forward(ctx, &h)?;
        ctx.dropout(&h, self.dropout_p)
    }
}

pub struct CxvLayer<E: Scalar> {
    /// Conv sub-layer; absent in the Hybrid ViLT variant.
    pub conv: Option<Conv2dLayer<E>>,
    pub norm: LayerNormParams<E>,
    pub attn: AttentionWeights<E>,
    pub mlp: MlpBlock<E>,
}

pub struct CxvModel<E: Scalar> {
    pub cfg: ModelConfig,
    pub embed: Vec<Conv2dLayer<E>>,
    pub layers: Vec<CxvLayer<E>>,
    pub head: LinearLayer<E>,
}

impl<E: Scalar> CxvModel<E> {
    /// Build and initialize a model from its config (seeded, reproducible).
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.model_dim();

        let mut embed = Vec::new();
        let mut c_in = cfg.in_channels;
        for &c_out in &cfg.embed_channels {
            embed.push(Conv2dLayer::init(
                &mut rng,
                c_out,
                c_in,
                cfg.embed_kernel,
                cfg.embed_stride,
                cfg.embed_pad,
            ));
            c_in = c_out;
        }

        let layers = (0..cfg.layers)
            .map(|_| CxvLayer {
                conv: (cfg.variant == Variant::Cxv).then(|| {
                    Conv2dLayer::init(
                        &mut rng,
                        d,
                        d,
                        CONV_SUBLAYER_KERNEL,
                        CONV_SUBLAYER_STRIDE,
                        CONV_SUBLAYER_PAD,
                    )
                }),
                norm: LayerNormParams::init(d),
                attn: AttentionWeights::init(&mut rng, d),
                mlp: MlpBlock::init(&mut rng, d, cfg.mlp_dim, cfg.dropout_p),
            })
            .collect();

        let head = LinearLayer::init(&mut rng, cfg.classes, d);
        Ok(CxvModel {
            cfg: cfg.clone(),
            embed,
            layers,
            head,
        })
    }

    /// Embedding stack: channel-raising convs with no activation between.
    pub fn conv_embedding_forward(&self, ctx: &Ctx<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let mut y = x.clone();
        for conv in &self.embed {
            y = conv.forward(ctx, &y)?;
        }
        Ok(y)
    }

    /// One CXV layer on a `[B,d,H,W]` map; output shape equals input shape.
    fn cxv_layer_forward(
        &self,
        ctx: &Ctx<E>,
        layer: &CxvLayer<E>,
        x: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        // conv sub-layer: no residual, no activation
        let u = layer
            .conv
            .as_ref()
            .expect("CXV layers carry a conv sub-layer")
            .forward(ctx, x)?;
        let seq = ctx.unroll_map(&u)?;
        // the single per-layer normalization, over channels
        let y = ctx.layer_norm(&seq, &layer.norm.gamma, &layer.norm.beta, LN_EPS)?;
        // residuals add the normalized signal
        let y = ctx.add(&y, &multihead_attention(ctx, &y, &layer.attn, &self.cfg.attention)?)?;
        let y = ctx.add(&y, &layer.mlp.forward(ctx, &y)?)?;
        ctx.reroll_map(&y, h, w)
    }

    /// One Hybrid ViLT layer: norm -> conv-QKV attention -> residual ->
    /// MLP -> residual; no conv sub-layer.
    fn vilt_layer_forward(
        &self,
        ctx: &Ctx<E>,
        layer: &CxvLayer<E>,
        x: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let seq = ctx.unroll_map(x)?;
        let y = ctx.layer_norm(&seq, &layer.norm.gamma, &layer.norm.beta, LN_EPS)?;
        let y_map = ctx.reroll_map(&y, h, w)?;
        let attn = multihead_attention(ctx, &y_map, &layer.attn, &self.cfg.attention)?;
        let r = ctx.add(&y_map, &attn)?;
        let r_seq = ctx.unroll_map(&r)?;
        let out = ctx.add(&r_seq, &layer.mlp.forward(ctx, &r_seq)?)?;
        ctx.reroll_map(&out, h, w)
    }

    /// Full forward pass: embedding -> L layers -> average pool -> head.
    pub fn forward(&self, ctx: &Ctx<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.rank() != 4
            || x.shape()[1] != self.cfg.in_channels
            || x.shape()[2] != self.cfg.in_h
            || x.shape()[3] != self.cfg.in_w
        {
            return Err(CxvError::Dim(format!(
                "input {:?} does not match configured [B,{},{},{}]",
                x.shape(),
                self.cfg.in_channels,
                self.cfg.in_h,
                self.cfg.in_w
            )));
        }
        let mut map = self.conv_embedding_forward(ctx, x)?;
        for layer in &self.layers {
            map = match self.cfg.variant {
                Variant::Cxv => self.cxv_layer_forward(ctx, layer, &map)?,
                Variant::HybridVilt => self.vilt_layer_forward(ctx, layer, &map)?,
            };
        }
        let pooled = ctx.global_avg_pool(&map)?;
        self.head.forward(ctx, &pooled)
    }

    /// Deterministic registry of every trainable tensor.
    pub fn named_params(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        for (i, conv) in self.embed.iter().enumerate() {
            out.push((format!("embed.{i}.w"), conv.w.clone()));
            out.push((format!("embed.{i}.b"), conv.b.clone()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(conv) = &layer.conv {
                out.push((format!("layers.{i}.conv.w"), conv.w.clone()));
                out.push((format!("layers.{i}.conv.b"), conv.b.clone()));
            }
            out.push((format!("layers.{i}.norm.gamma"), layer.norm.gamma.clone()));
            out.push((format!("layers.{i}.norm.beta"), layer.norm.beta.clone()));
            layer.attn.named_params(&format!("layers.{i}.attn"), &mut out);
            out.push((format!("layers.{i}.mlp.w1"), layer.mlp.fc1.w.clone()));
            out.push((format!("layers.{i}.mlp.b1"), layer.mlp.fc1.b.clone()));
            out.push((format!("layers.{i}.mlp.w2"), layer.mlp.fc2.w.clone()));
            out.push((format!("layers.{i}.mlp.b2"), layer.mlp.fc2.b.clone()));
        }
        out.push(("head.w".into(), self.head.w.clone()));
        out.push(("head.b".into(), self.head.b.clone()));
        out
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }
}

/// Build the Hybrid ViLT variant, rejecting configs with the wrong flags.
pub fn build_hybrid_vilt<E: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<CxvModel<E>> {
    if cfg.variant != Variant::HybridVilt {
        return Err(CxvError::Param(
            "build_hybrid_vilt requires variant = HybridVilt".into(),
        ));
    }
    CxvModel::build(cfg, seed)
}
