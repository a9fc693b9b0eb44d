//! Straight-line reference implementations over plain row-major buffers,
//! written without the graph or any shared kernel code except GELU (which
//! has its own series oracle).

use ftacl::adapter::ConvAdapter;
use ftacl::encoder::{AttentionMask, EncoderLayer};
use ftacl::nn::{LayerNorm, Linear};
use ftacl::tensor::kernels::gelu_scalar;
use ftacl::tensor::Tensor;
use ftacl::tokenizer::TokenGrid;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn from_tensor(t: &Tensor) -> Mat {
        let (rows, cols) = t.dims2().unwrap();
        Mat {
            rows,
            cols,
            data: t.data().to_vec(),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn max_diff(&self, t: &Tensor) -> f64 {
        assert_eq!(t.shape(), &[self.rows, self.cols]);
        self.data.iter().zip(t.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    fn zip(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    pub fn plus(&self, other: &Mat) -> Mat {
        self.zip(other, |a, b| a + b)
    }
}

pub fn linear(x: &Mat, l: &Linear) -> Mat {
    let (din, dout) = (l.in_dim(), l.out_dim());
    assert_eq!(x.cols, din);
    let mut data = Vec::with_capacity(x.rows * dout);
    for r in 0..x.rows {
        for o in 0..dout {
            let mut acc = l.bias.data()[o];
            for i in 0..din {
                acc += x.at(r, i) * l.weight.get(&[i, o]);
            }
            data.push(acc);
        }
    }
    Mat {
        rows: x.rows,
        cols: dout,
        data,
    }
}

pub fn layer_norm(x: &Mat, ln: &LayerNorm, eps: f64) -> Mat {
    let n = x.cols as f64;
    let mut data = Vec::with_capacity(x.data.len());
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        for (c, v) in row.iter().enumerate() {
            data.push((v - mean) / (var + eps).sqrt() * ln.gamma.data()[c] + ln.beta.data()[c]);
        }
    }
    Mat { data, ..x.clone() }
}

pub fn gelu(x: &Mat) -> Mat {
    Mat {
        data: x.data.iter().map(|&v| gelu_scalar(v)).collect(),
        ..x.clone()
    }
}

/// Per query and per head: scores over the allowed keys only, an explicit
/// softmax, and the weighted sum of values.
pub fn attention(x: &Mat, q: &Linear, k: &Linear, v: &Linear, o: &Linear, heads: usize, mask: &AttentionMask) -> Mat {
    let (qm, km, vm) = (linear(x, q), linear(x, k), linear(x, v));
    let d = x.cols;
    let dh = d / heads;
    let n = x.rows;
    let mut merged = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let allowed: Vec<usize> = (0..n).filter(|&j| mask.get(i, j)).collect();
            let scores: Vec<f64> = allowed
                .iter()
                .map(|&j| (0..dh).map(|c| qm.at(i, h * dh + c) * km.at(j, h * dh + c)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = weights.iter().sum();
            for c in 0..dh {
                merged[i * d + h * dh + c] = allowed.iter().zip(&weights).map(|(&j, w)| w / z * vm.at(j, h * dh + c)).sum();
            }
        }
    }
    linear(&Mat { rows: n, cols: d, data: merged }, o)
}

/// Down projection, 3 x 3 same-padded convolution over the token grid for
/// patch tokens (none for the class token), GELU, up projection.
pub fn adapter(x: &Mat, a: &ConvAdapter, grid: TokenGrid) -> Mat {
    let down = linear(x, &a.down);
    let b = down.cols;
    let mut mid = down.clone();
    for m in 0..grid.m {
        for t in 0..grid.t {
            let row = 1 + m * grid.t + t;
            for o in 0..b {
                let mut acc = a.conv_bias.data()[o];
                for c in 0..b {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (mm, tt) = (m as isize + dy as isize - 1, t as isize + dx as isize - 1);
                            if mm < 0 || tt < 0 || mm >= grid.m as isize || tt >= grid.t as isize {
                                continue;
                            }
                            let src = 1 + mm as usize * grid.t + tt as usize;
                            acc += a.conv_kernel.get(&[o, c, dy, dx]) * down.at(src, c);
                        }
                    }
                }
                mid.data[row * b + o] = acc;
            }
        }
    }
    linear(&gelu(&mid), &a.up)
}

/// The pre-norm block with optional parallel adapters.
pub fn encoder_layer(
    z: &Mat,
    w: &EncoderLayer,
    heads: usize,
    eps: f64,
    mask: &AttentionMask,
    grid: TokenGrid,
    adapters: Option<(&ConvAdapter, &ConvAdapter)>,
) -> Mat {
    let h = layer_norm(z, &w.ln1, eps);
    let mut z1 = attention(&h, &w.attn.q, &w.attn.k, &w.attn.v, &w.attn.o, heads, mask).plus(z);
    if let Some((ca1, _)) = adapters {
        z1 = z1.plus(&adapter(&h, ca1, grid));
    }
    let h2 = layer_norm(&z1, &w.ln2, eps);
    let mlp = linear(&gelu(&linear(&h2, &w.fc1)), &w.fc2);
    let mut out = mlp.plus(&z1);
    if let Some((_, ca2)) = adapters {
        out = out.plus(&adapter(&h2, ca2, grid));
    }
    out
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Edges of `bands` HTK triangles spanning 0 Hz to `nyquist`.
pub fn mel_edges(bands: usize, nyquist: f64) -> Vec<f64> {
    let top = hz_to_mel(nyquist);
    (0..bands + 2).map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64)).collect()
}

/// Weight of triangle `band` at frequency `hz`.
pub fn triangle(edges: &[f64], band: usize, hz: f64) -> f64 {
    let (lo, mid, hi) = (edges[band], edges[band + 1], edges[band + 2]);
    ((hz - lo) / (mid - lo)).min((hi - hz) / (hi - mid)).max(0.0)
}
