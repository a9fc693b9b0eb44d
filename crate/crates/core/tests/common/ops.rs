//! One gradient-check case per differentiable op. Shapes and op options are
//! drawn from the seed; each case returns the worst relative error of
//! central differences at h = 1e-5.

use std::sync::Arc;

use ftacl::encoder::{build_fta_mask, build_gsa_mask};
use ftacl::tensor::gradcheck::check_gradients;
use ftacl::tensor::{Graph, Tensor, Var};
use ftacl::tokenizer::TokenGrid;
use ftacl::Result;
use rand::Rng;

use super::{project, rng};

pub const H: f64 = 1e-5;

/// Every case, by op name.
pub const OPS: &[(&str, fn(u64) -> Result<f64>)] = &[
    ("matmul", matmul),
    ("matmul_const", matmul_const),
    ("add_mul_scale", add_mul_scale),
    ("add_bias_sum", add_bias_and_sum),
    ("gelu", gelu),
    ("layer_norm", layer_norm),
    ("masked_softmax", masked_softmax),
    ("conv2d", conv2d),
    ("cross_entropy", cross_entropy),
    ("shape_ops", shape_ops),
];

fn randn(shape: &[usize], seed: u64, salt: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed.wrapping_mul(31).wrapping_add(salt)))
}

fn dims(seed: u64, lo: usize, hi: usize, n: usize) -> Vec<usize> {
    let mut r = rng(seed ^ 0xd1);
    (0..n).map(|_| r.random_range(lo..=hi)).collect()
}

fn check(params: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    check_gradients(f, params, H)
}

pub fn matmul(seed: u64) -> Result<f64> {
    let d = dims(seed, 1, 5, 3);
    let ps = [randn(&[d[0], d[1]], seed, 1), randn(&[d[1], d[2]], seed, 2)];
    check(&ps, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, seed)
    })
}

pub fn matmul_const(seed: u64) -> Result<f64> {
    let d = dims(seed, 1, 5, 3);
    let left = Arc::new(randn(&[d[0], d[1]], seed, 3));
    let ps = [randn(&[d[1], d[2]], seed, 4)];
    check(&ps, |g, v| {
        let y = g.matmul_const(left.clone(), v[0])?;
        project(g, y, seed)
    })
}

pub fn add_mul_scale(seed: u64) -> Result<f64> {
    let d = dims(seed, 1, 5, 2);
    let ps = [randn(&d, seed, 5), randn(&d, seed, 6)];
    check(&ps, |g, v| {
        let a = g.add(v[0], v[1])?;
        let m = g.mul(a, v[1])?;
        let s = g.scale(m, -1.7)?;
        project(g, s, seed)
    })
}

pub fn add_bias_and_sum(seed: u64) -> Result<f64> {
    let d = dims(seed, 1, 5, 2);
    let ps = [randn(&d, seed, 7), randn(&[d[1]], seed, 8)];
    check(&ps, |g, v| {
        let y = g.add_bias(v[0], v[1])?;
        let sq = g.mul(y, y)?;
        g.sum(sq)
    })
}

pub fn gelu(seed: u64) -> Result<f64> {
    let d = dims(seed, 1, 6, 2);
    let ps = [Tensor::randn(&d, 2.0, &mut rng(seed))];
    check(&ps, |g, v| {
        let y = g.gelu(v[0])?;
        project(g, y, seed)
    })
}

/// Two features normalise to exactly +-1 whatever the input, leaving only
/// an eps-sized gradient, so rows have at least three.
pub fn layer_norm(seed: u64) -> Result<f64> {
    let d = dims(seed, 3, 6, 2);
    let ps = [randn(&d, seed, 9), randn(&[d[1]], seed, 10), randn(&[d[1]], seed, 11)];
    check(&ps, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
        project(g, y, seed)
    })
}

/// Factorized mask for even seeds, global for odd ones.
pub fn masked_softmax(seed: u64) -> Result<f64> {
    let d = dims(seed, 1, 3, 2);
    let grid = TokenGrid { m: d[0], t: d[1] };
    let mask = if seed % 2 == 0 { build_fta_mask(grid) } else { build_gsa_mask(grid) };
    let n = grid.seq_len();
    let ps = [randn(&[n, n], seed, 12)];
    check(&ps, |g, v| {
        let y = g.masked_softmax(v[0], &mask)?;
        project(g, y, seed)
    })
}

pub fn conv2d(seed: u64) -> Result<f64> {
    let d = dims(seed, 1, 3, 4);
    let (c_in, c_out, k) = (d[0], d[1], d[2]);
    let (stride, padding, with_bias) = (1 + (seed % 2) as usize, ((seed / 2) % 2) as usize, seed % 3 != 0);
    let side = k + 1 + d[3];
    let mut ps = vec![randn(&[c_in, side, side + 1], seed, 13), randn(&[c_out, c_in, k, k], seed, 14)];
    if with_bias {
        ps.push(randn(&[c_out], seed, 15));
    }
    check(&ps, |g, v| {
        let y = g.conv2d(v[0], v[1], v.get(2).copied(), stride, padding)?;
        project(g, y, seed)
    })
}

pub fn cross_entropy(seed: u64) -> Result<f64> {
    let d = dims(seed, 1, 5, 2);
    let classes = d[1] + 1;
    let mut r = rng(seed);
    let labels: Vec<usize> = (0..d[0]).map(|_| r.random_range(0..classes)).collect();
    let ps = [Tensor::randn(&[d[0], classes], 2.0, &mut r)];
    check(&ps, |g, v| g.cross_entropy(v[0], &labels))
}

/// Transpose, reshape, row and column slices and concatenations.
pub fn shape_ops(seed: u64) -> Result<f64> {
    let d = dims(seed, 2, 5, 2);
    let (r, c) = (d[0], d[1]);
    let ps = [randn(&[r, c], seed, 16), randn(&[r, c], seed, 17)];
    check(&ps, |g, v| {
        let t = g.transpose(v[0])?;
        let back = g.reshape(t, &[r, c])?;
        let top = g.slice_rows(back, 0, 1)?;
        let rest = g.slice_rows(v[1], 1, r - 1)?;
        let rows = g.concat_rows(&[top, rest])?;
        let left = g.slice_cols(rows, 0, 1)?;
        let right = g.slice_cols(v[0], 1, c - 1)?;
        let cols = g.concat_cols(&[left, right])?;
        let sq = g.mul(cols, rows)?;
        project(g, sq, seed)
    })
}
