//! Pre-norm transformer encoder with switchable global or frequency-time
//! factorized attention, plus the full classifier forward pass.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::adapter::{adapter_forward, AdapterSetVars, ConvAdapterVars};
use crate::error::{Error, Result};
use crate::frontend::Spectrogram;
use crate::nn::{LayerNorm, LayerNormVars, Linear, LinearVars};
use crate::params::{join, Binder, ParamSet};
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::{patchify, PatchEmbed, PatchEmbedVars, TokenGrid, TokenizerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    /// Every token attends to every token.
    Global,
    /// Patch tokens attend along their frequency row and time column plus
    /// the class token; the class token attends to everything.
    Factorized,
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionMode::Global => "gsa",
            AttentionMode::Factorized => "fta",
        })
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gsa" | "global" => Ok(AttentionMode::Global),
            "fta" | "factorized" => Ok(AttentionMode::Factorized),
            other => Err(Error::InvalidArgument(format!("unknown attention mode {other:?}"))),
        }
    }
}

/// Boolean allow-matrix over a token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn full(n: usize) -> Self {
        AttentionMask {
            n,
            allow: vec![true; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, allowed: bool) {
        self.allow[i * self.n + j] = allowed;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allow[i * self.n..(i + 1) * self.n]
    }

    /// Number of allowed (query, key) pairs.
    pub fn nnz(&self) -> usize {
        self.allow.iter().filter(|&&a| a).count()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

pub fn build_gsa_mask(grid: TokenGrid) -> AttentionMask {
    AttentionMask::full(grid.seq_len())
}

pub fn build_fta_mask(grid: TokenGrid) -> AttentionMask {
    let n = grid.seq_len();
    let mut mask = AttentionMask {
        n,
        allow: vec![false; n * n],
    };
    for j in 0..n {
        mask.set(0, j, true);
        mask.set(j, 0, true);
    }
    for fi in 0..grid.m {
        for ti in 0..grid.t {
            let i = grid.index(fi, ti);
            // same frequency row
            for tj in 0..grid.t {
                mask.set(i, grid.index(fi, tj), true);
            }
            // same time column
            for fj in 0..grid.m {
                mask.set(i, grid.index(fj, ti), true);
            }
        }
    }
    mask
}

pub fn build_mask(mode: AttentionMode, grid: TokenGrid) -> AttentionMask {
    match mode {
        AttentionMode::Global => build_gsa_mask(grid),
        AttentionMode::Factorized => build_fta_mask(grid),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub attention: AttentionMode,
    pub ln_eps: f64,
}

impl EncoderConfig {
    pub fn new(layers: usize, embed_dim: usize, attention: AttentionMode) -> Self {
        EncoderConfig {
            layers,
            embed_dim,
            heads: (embed_dim / 64).max(1),
            mlp_ratio: 4,
            attention,
            ln_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 || self.mlp_ratio == 0 {
            return Err(Error::InvalidArgument(format!(
                "encoder needs layers >= 1 and embed_dim divisible by heads, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Shape hyper-parameters of the whole classifier trunk.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub tokenizer: TokenizerConfig,
    pub encoder: EncoderConfig,
    /// Grid the learned position table is laid out on.
    pub pos_grid: TokenGrid,
    /// Adapter bottleneck width `d'`.
    pub bottleneck: usize,
}

impl ModelConfig {
    /// ViT-B/16-sized trunk: d = 768, 12 layers, 12 heads, 3-channel patch
    /// embed and a 24 x 24 position grid.
    pub fn paper_full() -> Self {
        ModelConfig {
            tokenizer: TokenizerConfig {
                in_channels: 3,
                ..TokenizerConfig::new(768)
            },
            encoder: EncoderConfig::new(12, 768, AttentionMode::Global),
            pos_grid: TokenGrid { m: 24, t: 24 },
            bottleneck: 64,
        }
    }

    /// Small trunk for desk-scale training on synthetic spectrograms.
    pub fn desk(pos_grid: TokenGrid) -> Self {
        ModelConfig {
            tokenizer: TokenizerConfig::new(32),
            encoder: EncoderConfig::new(2, 32, AttentionMode::Global),
            pos_grid,
            bottleneck: 8,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.encoder.validate()?;
        if self.tokenizer.embed_dim != self.encoder.embed_dim {
            return Err(Error::InvalidArgument("tokenizer and encoder embed_dim differ".into()));
        }
        if self.bottleneck == 0 || self.bottleneck >= self.embed_dim() {
            return Err(Error::InvalidArgument(format!(
                "adapter bottleneck must satisfy 0 < d' < d, got d'={} d={}",
                self.bottleneck,
                self.embed_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub q: LinearVars,
    pub k: LinearVars,
    pub v: LinearVars,
    pub o: LinearVars,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: AttentionWeights,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerVars {
    pub ln1: LayerNormVars,
    pub attn: AttentionVars,
    pub ln2: LayerNormVars,
    pub fc1: LinearVars,
    pub fc2: LinearVars,
    pub eps: f64,
}

fn fan_in_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

impl EncoderLayer {
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let hidden = d * cfg.mlp_ratio;
        let s = fan_in_std(d);
        EncoderLayer {
            ln1: LayerNorm::new(d),
            attn: AttentionWeights {
                q: Linear::init(d, d, s, rng),
                k: Linear::init(d, d, s, rng),
                v: Linear::init(d, d, s, rng),
                o: Linear::init(d, d, s, rng),
            },
            ln2: LayerNorm::new(d),
            fc1: Linear::init(d, hidden, s, rng),
            fc2: Linear::init(hidden, d, fan_in_std(hidden), rng),
        }
    }

    pub fn bind(&self, b: &mut Binder, cfg: &EncoderConfig) -> EncoderLayerVars {
        EncoderLayerVars {
            ln1: self.ln1.bind(b),
            attn: AttentionVars {
                q: self.attn.q.bind(b),
                k: self.attn.k.bind(b),
                v: self.attn.v.bind(b),
                o: self.attn.o.bind(b),
                heads: cfg.heads,
            },
            ln2: self.ln2.bind(b),
            fc1: self.fc1.bind(b),
            fc2: self.fc2.bind(b),
            eps: cfg.ln_eps,
        }
    }
}

impl ParamSet for EncoderLayer {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.attn.q.visit(&join(prefix, "attn.q"), f);
        self.attn.k.visit(&join(prefix, "attn.k"), f);
        self.attn.v.visit(&join(prefix, "attn.v"), f);
        self.attn.o.visit(&join(prefix, "attn.o"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.fc1.visit(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit(&join(prefix, "mlp.fc2"), f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        self.ln1.visit_mut(f);
        self.attn.q.visit_mut(f);
        self.attn.k.visit_mut(f);
        self.attn.v.visit_mut(f);
        self.attn.o.visit_mut(f);
        self.ln2.visit_mut(f);
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

/// Multi-head scaled dot-product attention over `x: [n x d]` restricted by
/// `mask`.
pub fn mhsa(g: &mut Graph, x: Var, w: &AttentionVars, mask: &AttentionMask) -> Result<Var> {
    let (n, d) = g.value(x).dims2()?;
    if mask.len() != n {
        return Err(Error::shape("mhsa", format!("mask over {n} tokens"), format!("{}", mask.len())));
    }
    let heads = w.heads;
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidArgument(format!("{d} channels do not split into {heads} heads")));
    }
    let dh = d / heads;
    let q = w.q.forward(g, x)?;
    let k = w.k.forward(g, x)?;
    let v = w.v.forward(g, x)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let probs = g.masked_softmax(scores, mask)?;
        outs.push(g.matmul(probs, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    w.o.forward(g, merged)
}

/// One pre-norm block. With adapters `(ca1, ca2)` each residual also
/// receives the adapter applied to the same normalised input as the
/// sublayer it runs beside.
pub fn encoder_layer(
    g: &mut Graph,
    z: Var,
    w: &EncoderLayerVars,
    mask: &AttentionMask,
    grid: TokenGrid,
    adapters: Option<(&ConvAdapterVars, &ConvAdapterVars)>,
) -> Result<Var> {
    let h = w.ln1.forward(g, z, w.eps)?;
    let attn = mhsa(g, h, &w.attn, mask)?;
    let mut z1 = g.add(attn, z)?;
    if let Some((ca1, _)) = adapters {
        let side = adapter_forward(g, h, ca1, grid)?;
        z1 = g.add(z1, side)?;
    }
    let h2 = w.ln2.forward(g, z1, w.eps)?;
    let hidden = w.fc1.forward(g, h2)?;
    let hidden = g.gelu(hidden)?;
    let mlp = w.fc2.forward(g, hidden)?;
    let mut out = g.add(mlp, z1)?;
    if let Some((_, ca2)) = adapters {
        let side = adapter_forward(g, h2, ca2, grid)?;
        out = g.add(out, side)?;
    }
    Ok(out)
}

/// Tokenizer, encoder stack and final norm. Classification heads live
/// outside the backbone since they are per task.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: ModelConfig,
    pub patch: PatchEmbed,
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub patch: PatchEmbedVars,
    pub layers: Vec<EncoderLayerVars>,
    pub norm: LayerNormVars,
    pub cfg: ModelConfig,
}

impl Backbone {
    pub fn init<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let patch = PatchEmbed::init(cfg.tokenizer, cfg.pos_grid, rng);
        let layers = (0..cfg.encoder.layers)
            .map(|_| EncoderLayer::init(&cfg.encoder, rng))
            .collect();
        Ok(Backbone {
            cfg,
            patch,
            layers,
            norm: LayerNorm::new(cfg.embed_dim()),
        })
    }

    pub fn bind(&self, b: &mut Binder) -> BackboneVars {
        BackboneVars {
            patch: self.patch.bind(b),
            layers: self.layers.iter().map(|l| l.bind(b, &self.cfg.encoder)).collect(),
            norm: self.norm.bind(b),
            cfg: self.cfg,
        }
    }
}

impl ParamSet for Backbone {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.patch.visit(&join(prefix, "patch"), f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        self.patch.visit_mut(f);
        for l in &mut self.layers {
            l.visit_mut(f);
        }
        self.norm.visit_mut(f);
    }
}

/// Per-task classifier on the final class-token feature.
#[derive(Clone, Debug)]
pub struct Head {
    pub linear: Linear,
}

impl Head {
    pub fn init<R: Rng + ?Sized>(dim: usize, classes: usize, rng: &mut R) -> Self {
        Head {
            linear: Linear::init(dim, classes, 0.02, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.linear.out_dim()
    }

    pub fn bind(&self, b: &mut Binder) -> LinearVars {
        self.linear.bind(b)
    }
}

impl ParamSet for Head {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.linear.visit(prefix, f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        self.linear.visit_mut(f);
    }
}

/// Class-token feature after the final norm, `[1 x d]`.
pub fn encode(
    g: &mut Graph,
    spec: &Spectrogram,
    backbone: &BackboneVars,
    adapters: Option<&AdapterSetVars>,
) -> Result<Var> {
    let (mut z, grid) = patchify(g, spec, &backbone.patch)?;
    let mask = build_mask(backbone.cfg.encoder.attention, grid);
    if let Some(a) = adapters {
        if a.layers.len() != backbone.layers.len() {
            return Err(Error::shape(
                "encode",
                format!("{} adapter pairs", backbone.layers.len()),
                format!("{}", a.layers.len()),
            ));
        }
    }
    for (i, layer) in backbone.layers.iter().enumerate() {
        let pair = adapters.map(|a| (&a.layers[i].0, &a.layers[i].1));
        z = encoder_layer(g, z, layer, &mask, grid, pair)?;
    }
    let z = backbone.norm.forward(g, z, backbone.cfg.encoder.ln_eps)?;
    g.slice_rows(z, 0, 1)
}

/// Logits `[1 x classes]` for one spectrogram.
pub fn forward(
    g: &mut Graph,
    spec: &Spectrogram,
    backbone: &BackboneVars,
    adapters: Option<&AdapterSetVars>,
    head: &LinearVars,
) -> Result<Var> {
    let cls = encode(g, spec, backbone, adapters)?;
    head.forward(g, cls)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_fta(grid: TokenGrid, i: usize, j: usize) -> bool {
        match (grid.position(i), grid.position(j)) {
            (None, _) | (_, None) => true,
            (Some((mi, ti)), Some((mj, tj))) => mi == mj || ti == tj,
        }
    }

    #[test]
    fn fta_mask_reference_counts() {
        assert_eq!(build_fta_mask(TokenGrid { m: 12, t: 9 }).nnz(), 2377);
        assert_eq!(build_fta_mask(TokenGrid { m: 12, t: 49 }).nnz(), 36457);
        assert_eq!(build_fta_mask(TokenGrid { m: 12, t: 100 }).nnz(), 135601);
    }

    #[test]
    fn fta_2x2_matches_enumeration() {
        let grid = TokenGrid { m: 2, t: 2 };
        let mask = build_fta_mask(grid);
        let mut count = 0;
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(mask.get(i, j), brute_fta(grid, i, j));
                count += brute_fta(grid, i, j) as usize;
            }
        }
        assert_eq!(count, 21);
        assert_eq!(mask.nnz(), 21);
    }

    #[test]
    fn fta_single_row_is_global() {
        for t in 1..8 {
            let grid = TokenGrid { m: 1, t };
            assert_eq!(build_fta_mask(grid), build_gsa_mask(grid));
            assert_eq!(build_fta_mask(grid).nnz(), (t + 1) * (t + 1));
        }
    }

    #[test]
    fn attention_mode_parsing() {
        assert_eq!("FTA".parse::<AttentionMode>().unwrap(), AttentionMode::Factorized);
        assert_eq!("gsa".parse::<AttentionMode>().unwrap(), AttentionMode::Global);
        assert!("swin".parse::<AttentionMode>().is_err());
        assert_eq!(AttentionMode::Factorized.to_string(), "fta");
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::desk(TokenGrid { m: 2, t: 2 });
        assert!(cfg.validate().is_ok());
        cfg.encoder.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk(TokenGrid { m: 2, t: 2 });
        cfg.bottleneck = 32;
        assert!(cfg.validate().is_err());
        assert_eq!(ModelConfig::paper_full().encoder.heads, 12);
    }
}
