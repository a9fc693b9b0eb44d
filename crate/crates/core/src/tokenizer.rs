//! Spectrogram → token sequence: strided patch convolution, class token,
//! and position embeddings resampled to the input's token grid.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::frontend::Spectrogram;
use crate::params::{join, Binder, ParamSet};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenizerConfig {
    pub kernel: usize,
    pub stride: usize,
    pub embed_dim: usize,
    pub in_channels: usize,
}

impl TokenizerConfig {
    pub fn new(embed_dim: usize) -> Self {
        TokenizerConfig {
            kernel: 16,
            stride: 10,
            embed_dim,
            in_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.kernel < self.stride || self.embed_dim == 0 || self.in_channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "tokenizer needs kernel >= stride >= 1 and positive dims, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Patch token counts along frequency (`m`) and time (`t`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    pub m: usize,
    pub t: usize,
}

impl TokenGrid {
    pub fn new(m: usize, t: usize) -> Result<Self> {
        if m == 0 || t == 0 {
            return Err(Error::InvalidArgument(format!("token grid must be at least 1x1, got {m}x{t}")));
        }
        Ok(TokenGrid { m, t })
    }

    pub fn patches(&self) -> usize {
        self.m * self.t
    }

    /// Patch tokens plus the class token.
    pub fn seq_len(&self) -> usize {
        self.patches() + 1
    }

    /// Sequence index of patch `(m, t)`; index 0 is the class token.
    #[inline]
    pub fn index(&self, m: usize, t: usize) -> usize {
        1 + m * self.t + t
    }

    /// Inverse of [`TokenGrid::index`] for patch positions.
    pub fn position(&self, index: usize) -> Option<(usize, usize)> {
        if index == 0 || index > self.patches() {
            return None;
        }
        let p = index - 1;
        Some((p / self.t, p % self.t))
    }
}

impl fmt::Display for TokenGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.m, self.t)
    }
}

/// Number of kernel placements along each axis.
pub fn token_grid(freq_bins: usize, frames: usize, cfg: &TokenizerConfig) -> Result<TokenGrid> {
    cfg.validate()?;
    if freq_bins < cfg.kernel || frames < cfg.kernel {
        return Err(Error::InvalidArgument(format!(
            "spectrogram {freq_bins}x{frames} is smaller than the {k}x{k} patch kernel",
            k = cfg.kernel
        )));
    }
    TokenGrid::new(
        (freq_bins - cfg.kernel) / cfg.stride + 1,
        (frames - cfg.kernel) / cfg.stride + 1,
    )
}

/// Align-corners bilinear resampling as a `[to.seq_len x from.seq_len]`
/// matrix. Row/column 0 carry the class token through unchanged.
pub fn bilinear_matrix(from: TokenGrid, to: TokenGrid) -> Tensor {
    let (rows, cols) = (to.seq_len(), from.seq_len());
    let mut w = vec![0.0; rows * cols];
    w[0] = 1.0;
    let axis = |i: usize, dst: usize, src: usize| -> (usize, usize, f64) {
        if dst == 1 || src == 1 {
            return (0, 0, 0.0);
        }
        let pos = (i * (src - 1)) as f64 / (dst - 1) as f64;
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, pos - lo as f64)
    };
    for i in 0..to.m {
        let (y0, y1, wy) = axis(i, to.m, from.m);
        for j in 0..to.t {
            let (x0, x1, wx) = axis(j, to.t, from.t);
            let r = to.index(i, j);
            let row = &mut w[r * cols..(r + 1) * cols];
            row[from.index(y0, x0)] += (1.0 - wy) * (1.0 - wx);
            row[from.index(y0, x1)] += (1.0 - wy) * wx;
            row[from.index(y1, x0)] += wy * (1.0 - wx);
            row[from.index(y1, x1)] += wy * wx;
        }
    }
    Tensor::from_parts(vec![rows, cols], crate::tensor::DType::F64, w)
}

/// Resamples a `[(from.seq_len) x d]` position table onto `to`.
pub fn resize_pos_embed(pe: &Tensor, from: TokenGrid, to: TokenGrid) -> Result<Tensor> {
    let (n, _) = pe.dims2()?;
    if n != from.seq_len() {
        return Err(Error::shape("resize_pos_embed", format!("{} rows", from.seq_len()), format!("{n}")));
    }
    if from == to {
        return Ok(pe.clone());
    }
    let m = bilinear_matrix(from, to).to_dtype(pe.dtype());
    crate::tensor::kernels::matmul(&m, pe)
}

/// Patch convolution, class token and position table.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub cfg: TokenizerConfig,
    pub pos_grid: TokenGrid,
    /// `[d x c_in x K x K]`
    pub kernel: Tensor,
    pub bias: Tensor,
    /// `[1 x d]`
    pub cls: Tensor,
    /// `[(pos_grid.seq_len) x d]`
    pub pos: Tensor,
}

impl PatchEmbed {
    pub fn init<R: Rng + ?Sized>(cfg: TokenizerConfig, pos_grid: TokenGrid, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let fan_in = (cfg.in_channels * cfg.kernel * cfg.kernel) as f64;
        PatchEmbed {
            kernel: Tensor::randn(&[d, cfg.in_channels, cfg.kernel, cfg.kernel], 1.0 / fan_in.sqrt(), rng),
            bias: Tensor::zeros(&[d]),
            cls: Tensor::randn(&[1, d], 0.02, rng),
            pos: Tensor::randn(&[pos_grid.seq_len(), d], 0.02, rng),
            cfg,
            pos_grid,
        }
    }

    pub fn bind(&self, b: &mut Binder) -> PatchEmbedVars {
        PatchEmbedVars {
            kernel: b.bind(&self.kernel),
            bias: b.bind(&self.bias),
            cls: b.bind(&self.cls),
            pos: b.bind(&self.pos),
            cfg: self.cfg,
            pos_grid: self.pos_grid,
        }
    }
}

impl ParamSet for PatchEmbed {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "kernel"), &self.kernel);
        f(join(prefix, "bias"), &self.bias);
        f(join(prefix, "cls"), &self.cls);
        f(join(prefix, "pos"), &self.pos);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        f(&mut self.kernel);
        f(&mut self.bias);
        f(&mut self.cls);
        f(&mut self.pos);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PatchEmbedVars {
    pub kernel: Var,
    pub bias: Var,
    pub cls: Var,
    pub pos: Var,
    pub cfg: TokenizerConfig,
    pub pos_grid: TokenGrid,
}

/// Tokens `Z` of shape `[(MT + 1) x d]` for one spectrogram, with the grid
/// they were laid out on.
pub fn patchify(g: &mut Graph, spec: &Spectrogram, w: &PatchEmbedVars) -> Result<(Var, TokenGrid)> {
    let cfg = w.cfg;
    let (freq, frames) = (spec.mels(), spec.frames());
    let grid = token_grid(freq, frames, &cfg)?;
    let plane = spec.values().data();
    let mut input = Vec::with_capacity(cfg.in_channels * plane.len());
    for _ in 0..cfg.in_channels {
        input.extend_from_slice(plane);
    }
    let dtype = g.value(w.kernel).dtype();
    let x = g.constant(Tensor::with_dtype(&[cfg.in_channels, freq, frames], input, dtype)?);
    let conv = g.conv2d(x, w.kernel, Some(w.bias), cfg.stride, 0)?;
    let flat = g.reshape(conv, &[cfg.embed_dim, grid.patches()])?;
    let patches = g.transpose(flat)?;
    let z = g.concat_rows(&[w.cls, patches])?;
    let pos = if grid == w.pos_grid {
        w.pos
    } else {
        let m = Arc::new(bilinear_matrix(w.pos_grid, grid).to_dtype(dtype));
        g.matmul_const(m, w.pos)?
    };
    Ok((g.add(z, pos)?, grid))
}
