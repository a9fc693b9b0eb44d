//! Convolutional adapters: forward oracles, the zero-init invariant and the
//! trainable set of an adapted model.

mod common;

use common::oracle::{self, Mat};
use common::{random_spec, rng, tiny_model};
use ftacl::adapter::{adapter_forward, adapter_param_count, AdapterConfig, AdapterSet, ConvAdapter};
use ftacl::encoder::{forward, AttentionMode, Backbone, Head};
use ftacl::params::{Binder, ParamSet};
use ftacl::tensor::kernels::gelu_scalar;
use ftacl::tensor::{Graph, Tensor};
use ftacl::tokenizer::TokenGrid;

fn random_adapter(d: usize, b: usize, seed: u64) -> ConvAdapter {
    let cfg = AdapterConfig::new(d, b).unwrap();
    let mut r = rng(seed);
    let mut a = ConvAdapter::init(&cfg, &mut r);
    for t in a.tensors_mut() {
        *t = Tensor::randn(t.shape(), 0.5, &mut r);
    }
    a
}

fn run_adapter(a: &ConvAdapter, z: &Tensor, grid: TokenGrid) -> Tensor {
    let mut g = Graph::new();
    let w = a.bind(&mut Binder::new(&mut g, false));
    let x = g.constant(z.clone());
    let out = adapter_forward(&mut g, x, &w, grid).unwrap();
    g.value(out).clone()
}

#[test]
fn single_site_grid_reduces_to_centre_tap() {
    let (d, b) = (6, 3);
    let a = random_adapter(d, b, 1);
    let z = Tensor::randn(&[2, d], 1.0, &mut rng(2));
    let got = run_adapter(&a, &z, TokenGrid { m: 1, t: 1 });

    // hand composition: the class token skips the conv, the patch token
    // sees only the centre weight of each 3 x 3 kernel
    let lin = |x: &[f64], w: &Tensor, bias: &Tensor| -> Vec<f64> {
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        (0..dout).map(|o| bias.data()[o] + (0..din).map(|i| x[i] * w.get(&[i, o])).sum::<f64>()).collect()
    };
    for row in 0..2 {
        let x: Vec<f64> = (0..d).map(|c| z.get(&[row, c])).collect();
        let mut h = lin(&x, &a.down.weight, &a.down.bias);
        if row == 1 {
            h = (0..b)
                .map(|o| a.conv_bias.data()[o] + (0..b).map(|c| a.conv_kernel.get(&[o, c, 1, 1]) * h[c]).sum::<f64>())
                .collect();
        }
        let h: Vec<f64> = h.into_iter().map(gelu_scalar).collect();
        let want = lin(&h, &a.up.weight, &a.up.bias);
        for c in 0..d {
            assert!((got.get(&[row, c]) - want[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn reference_grid_matches_straight_line_oracle() {
    let grid = TokenGrid { m: 12, t: 9 };
    let a = random_adapter(16, 4, 3);
    let z = Tensor::randn(&[grid.seq_len(), 16], 1.0, &mut rng(4));
    let got = run_adapter(&a, &z, grid);
    assert_eq!(got.shape(), &[109, 16]);
    assert!(oracle::adapter(&Mat::from_tensor(&z), &a, grid).max_diff(&got) < 1e-10);
}

#[test]
fn fresh_adapter_outputs_zero() {
    let cfg = AdapterConfig::new(8, 2).unwrap();
    let a = ConvAdapter::init(&cfg, &mut rng(5));
    let grid = TokenGrid { m: 3, t: 2 };
    let out = run_adapter(&a, &Tensor::randn(&[7, 8], 1.0, &mut rng(6)), grid);
    assert!(out.bitwise_eq(&Tensor::zeros(&[7, 8])));
}

#[test]
fn closed_form_counts() {
    assert_eq!(adapter_param_count(&AdapterConfig::new(768, 64).unwrap(), 12), 3_265_536);
    assert_eq!(adapter_param_count(&AdapterConfig::new(4, 2).unwrap(), 1), 120);
    assert!(AdapterConfig::new(4, 0).is_err());
    assert!(AdapterConfig::new(4, 4).is_err());
    let set = AdapterSet::init(AdapterConfig::new(4, 2).unwrap(), 1, &mut rng(7));
    assert_eq!(set.param_count(), 120);
}

fn logits_and_grads(backbone: &Backbone, adapters: Option<&AdapterSet>, head: &Head, x: &ftacl::frontend::Spectrogram) -> (Tensor, usize, usize) {
    let mut g = Graph::new();
    let mut b = Binder::new(&mut g, false);
    let bv = backbone.bind(&mut b);
    let frozen = b.frozen_vars().to_vec();
    assert_eq!(frozen.len(), backbone.named_tensors("").len());
    b.set_trainable(true);
    let av = adapters.map(|a| a.bind(&mut b));
    let hv = head.bind(&mut b);
    let trainable = b.take_trainable();
    let out = forward(&mut g, x, &bv, av.as_ref(), &hv).unwrap();
    let loss = g.cross_entropy(out, &[1]).unwrap();
    let grads = g.backward(loss).unwrap();
    // every frozen backbone leaf lacks a gradient; every trainable one has one
    let backbone_grads = frozen.iter().filter(|&&v| grads.get(v).is_some()).count();
    let trainable_grads = trainable.iter().filter(|&&v| grads.get(v).is_some()).count();
    assert_eq!(trainable_grads, trainable.len());
    (g.value(out).clone(), backbone_grads, trainable.len())
}

#[test]
fn zero_init_adapters_leave_logits_bitwise_unchanged() {
    let cfg = tiny_model(16, 2, 2, 4, AttentionMode::Factorized);
    let backbone = Backbone::init(cfg, &mut rng(8)).unwrap();
    let head = Head::init(16, 3, &mut rng(9));
    let adapters = AdapterSet::init(AdapterConfig::new(16, 4).unwrap(), 2, &mut rng(10));
    let x = random_spec(7, 10, 11);
    let (plain, _, _) = logits_and_grads(&backbone, None, &head, &x);
    let (adapted, backbone_grads, trainable) = logits_and_grads(&backbone, Some(&adapters), &head, &x);
    assert!(plain.bitwise_eq(&adapted));
    assert_eq!(backbone_grads, 0);
    assert_eq!(trainable, 2 * 2 * 6 + 2);
}
