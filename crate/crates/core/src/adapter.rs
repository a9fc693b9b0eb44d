//! Convolutional adapters: the per-task bottleneck modules that run beside
//! the attention and MLP sublayers of every encoder block.
//!
//! Patch tokens go through `W_down`, are laid out on the `M x T` token grid
//! for a 3 x 3 same-padded convolution, pass a GELU, and are projected back
//! with `W_up`. The class token has no grid position, so it skips the
//! convolution and goes straight `W_down -> GELU -> W_up`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Linear, LinearVars};
use crate::params::{join, Binder, ParamSet};
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::TokenGrid;

pub const CONV_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdapterConfig {
    pub dim: usize,
    pub bottleneck: usize,
}

impl AdapterConfig {
    pub fn new(dim: usize, bottleneck: usize) -> Result<Self> {
        if bottleneck == 0 || bottleneck >= dim {
            return Err(Error::InvalidArgument(format!(
                "adapter bottleneck must satisfy 0 < d' < d, got d'={bottleneck} d={dim}"
            )));
        }
        Ok(AdapterConfig { dim, bottleneck })
    }

    /// Parameters in one adapter: down projection, 3 x 3 conv, up projection,
    /// each with bias.
    pub fn param_count(&self) -> usize {
        let (d, b) = (self.dim, self.bottleneck);
        d * b + b + CONV_KERNEL * CONV_KERNEL * b * b + b + b * d + d
    }
}

/// Two adapters (attention side, MLP side) per layer.
pub fn adapter_param_count(cfg: &AdapterConfig, layers: usize) -> usize {
    2 * layers * cfg.param_count()
}

#[derive(Clone, Debug)]
pub struct ConvAdapter {
    pub down: Linear,
    /// `[d' x d' x 3 x 3]`
    pub conv_kernel: Tensor,
    pub conv_bias: Tensor,
    pub up: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvAdapterVars {
    pub down: LinearVars,
    pub conv_kernel: Var,
    pub conv_bias: Var,
    pub up: LinearVars,
}

impl ConvAdapter {
    /// `W_down ~ N(0, 0.02^2)`, He-normal conv, zero `W_up`.
    pub fn init<R: Rng + ?Sized>(cfg: &AdapterConfig, rng: &mut R) -> Self {
        let b = cfg.bottleneck;
        let fan_in = (b * CONV_KERNEL * CONV_KERNEL) as f64;
        ConvAdapter {
            down: Linear::init(cfg.dim, b, 0.02, rng),
            conv_kernel: Tensor::randn(&[b, b, CONV_KERNEL, CONV_KERNEL], (2.0 / fan_in).sqrt(), rng),
            conv_bias: Tensor::zeros(&[b]),
            up: Linear::zeros(b, cfg.dim),
        }
    }

    pub fn bind(&self, b: &mut Binder) -> ConvAdapterVars {
        ConvAdapterVars {
            down: self.down.bind(b),
            conv_kernel: b.bind(&self.conv_kernel),
            conv_bias: b.bind(&self.conv_bias),
            up: self.up.bind(b),
        }
    }
}

impl ParamSet for ConvAdapter {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.down.visit(&join(prefix, "down"), f);
        f(join(prefix, "conv.kernel"), &self.conv_kernel);
        f(join(prefix, "conv.bias"), &self.conv_bias);
        self.up.visit(&join(prefix, "up"), f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        self.down.visit_mut(f);
        f(&mut self.conv_kernel);
        f(&mut self.conv_bias);
        self.up.visit_mut(f);
    }
}

/// Applies one adapter to `x: [(MT + 1) x d]`.
pub fn adapter_forward(g: &mut Graph, x: Var, a: &ConvAdapterVars, grid: TokenGrid) -> Result<Var> {
    let (n, _) = g.value(x).dims2()?;
    if n != grid.seq_len() {
        return Err(Error::shape(
            "adapter_forward",
            format!("{} tokens for grid {grid}", grid.seq_len()),
            format!("{n}"),
        ));
    }
    let down = a.down.forward(g, x)?;
    let b = g.value(down).shape()[1];
    let cls = g.slice_rows(down, 0, 1)?;
    let patches = g.slice_rows(down, 1, grid.patches())?;
    let channels_first = g.transpose(patches)?;
    let image = g.reshape(channels_first, &[b, grid.m, grid.t])?;
    let conv = g.conv2d(image, a.conv_kernel, Some(a.conv_bias), 1, 1)?;
    let flat = g.reshape(conv, &[b, grid.patches()])?;
    let tokens = g.transpose(flat)?;
    let joined = g.concat_rows(&[cls, tokens])?;
    let act = g.gelu(joined)?;
    a.up.forward(g, act)
}

/// One task's adapters: an `(attention-side, MLP-side)` pair per layer.
#[derive(Clone, Debug)]
pub struct AdapterSet {
    pub cfg: AdapterConfig,
    pub layers: Vec<(ConvAdapter, ConvAdapter)>,
}

#[derive(Clone, Debug)]
pub struct AdapterSetVars {
    pub layers: Vec<(ConvAdapterVars, ConvAdapterVars)>,
}

impl AdapterSet {
    pub fn init<R: Rng + ?Sized>(cfg: AdapterConfig, layers: usize, rng: &mut R) -> Self {
        AdapterSet {
            cfg,
            layers: (0..layers)
                .map(|_| (ConvAdapter::init(&cfg, rng), ConvAdapter::init(&cfg, rng)))
                .collect(),
        }
    }

    pub fn bind(&self, b: &mut Binder) -> AdapterSetVars {
        AdapterSetVars {
            layers: self.layers.iter().map(|(a, m)| (a.bind(b), m.bind(b))).collect(),
        }
    }
}

impl ParamSet for AdapterSet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, (a, m)) in self.layers.iter().enumerate() {
            a.visit(&join(prefix, &format!("layers.{i}.attn_side")), f);
            m.visit(&join(prefix, &format!("layers.{i}.mlp_side")), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        for (a, m) in &mut self.layers {
            a.visit_mut(f);
            m.visit_mut(f);
        }
    }
}
