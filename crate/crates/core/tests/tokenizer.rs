//! Token grid geometry, position-table resizing and patchify shapes.

mod common;

use common::{random_spec, rng};
use ftacl::params::Binder;
use ftacl::tensor::{Graph, Tensor};
use ftacl::tokenizer::{patchify, resize_pos_embed, token_grid, PatchEmbed, TokenGrid, TokenizerConfig};
use proptest::prelude::*;

fn placements(extent: usize, k: usize, s: usize) -> usize {
    (0..extent).step_by(s).filter(|&start| start + k <= extent).count()
}

/// Align-corners sample of a `from` grid at fractional site `(y, x)`.
fn sample(pe: &Tensor, from: TokenGrid, y: f64, x: f64, c: usize) -> f64 {
    let at = |m: usize, t: usize| pe.get(&[1 + m * from.t + t, c]);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(from.m - 1), (x0 + 1).min(from.t - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

#[test]
fn bilinear_resize_matches_per_site_oracle() {
    let (from, to) = (TokenGrid { m: 3, t: 3 }, TokenGrid { m: 5, t: 7 });
    let pe = Tensor::randn(&[from.seq_len(), 4], 1.0, &mut rng(1));
    let out = resize_pos_embed(&pe, from, to).unwrap();
    assert_eq!(out.shape(), &[36, 4]);
    for c in 0..4 {
        assert_eq!(out.get(&[0, c]).to_bits(), pe.get(&[0, c]).to_bits());
    }
    for m in 0..5 {
        for t in 0..7 {
            let (y, x) = (m as f64 * 2.0 / 4.0, t as f64 * 2.0 / 6.0);
            for c in 0..4 {
                assert!((out.get(&[1 + m * 7 + t, c]) - sample(&pe, from, y, x, c)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn two_by_two_to_three_by_three_keeps_corners() {
    let (from, to) = (TokenGrid { m: 2, t: 2 }, TokenGrid { m: 3, t: 3 });
    let pe = Tensor::randn(&[5, 3], 1.0, &mut rng(2));
    let out = resize_pos_embed(&pe, from, to).unwrap();
    for (src, dst) in [((0, 0), (0, 0)), ((0, 1), (0, 2)), ((1, 0), (2, 0)), ((1, 1), (2, 2))] {
        for c in 0..3 {
            assert_eq!(out.get(&[to.index(dst.0, dst.1), c]).to_bits(), pe.get(&[from.index(src.0, src.1), c]).to_bits());
        }
    }
}

#[test]
fn reference_patchify_shape() {
    let cfg = TokenizerConfig::new(768);
    let grid = TokenGrid { m: 12, t: 9 };
    let pe = PatchEmbed::init(cfg, grid, &mut rng(3));
    let mut g = Graph::new();
    let w = pe.bind(&mut Binder::new(&mut g, false));
    let (z, got) = patchify(&mut g, &random_spec(128, 101, 4), &w).unwrap();
    assert_eq!(got, grid);
    assert_eq!(g.value(z).shape(), &[109, 768]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_counts_kernel_placements(f in 1usize..80, frames in 1usize..80, k in 1usize..12, s in 1usize..12) {
        prop_assume!(k >= s);
        let cfg = TokenizerConfig { kernel: k, stride: s, ..TokenizerConfig::new(8) };
        match token_grid(f, frames, &cfg) {
            Ok(grid) => {
                prop_assert_eq!(grid.m, placements(f, k, s));
                prop_assert_eq!(grid.t, placements(frames, k, s));
            }
            Err(_) => prop_assert!(f < k || frames < k),
        }
    }

    #[test]
    fn index_map_is_a_bijection(m in 1usize..20, t in 1usize..20) {
        let grid = TokenGrid { m, t };
        let mut seen = vec![false; grid.seq_len()];
        for a in 0..m {
            for b in 0..t {
                let i = grid.index(a, b);
                prop_assert_eq!(i, 1 + a * t + b);
                prop_assert!(!seen[i]);
                seen[i] = true;
                prop_assert_eq!(grid.position(i), Some((a, b)));
            }
        }
        prop_assert!(!seen[0] && seen[1..].iter().all(|&v| v));
        prop_assert_eq!(grid.position(0), None);
    }

    #[test]
    fn patchify_yields_mt_plus_one_tokens(f in 4usize..30, frames in 4usize..30, seed in any::<u64>()) {
        let cfg = TokenizerConfig { kernel: 4, stride: 3, ..TokenizerConfig::new(6) };
        let pe = PatchEmbed::init(cfg, TokenGrid { m: 2, t: 2 }, &mut rng(seed));
        let mut g = Graph::new();
        let w = pe.bind(&mut Binder::new(&mut g, false));
        let (z, grid) = patchify(&mut g, &random_spec(f, frames, seed), &w).unwrap();
        prop_assert_eq!(grid, token_grid(f, frames, &cfg).unwrap());
        prop_assert_eq!(g.value(z).shape(), &[grid.m * grid.t + 1, 6]);
    }
}
