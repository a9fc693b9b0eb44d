//! Reverse-mode gradients against central differences.
//!
//! Checks one layer-normalized, GELU-activated linear map and the cross
//! entropy on top of it, then the whole adapter-and-head trainable set of a
//! small adapted classifier.
//!
//! ```bash
//! cargo run --example gradient_check
//! ```

use ftacl::adapter::{AdapterConfig, AdapterSet};
use ftacl::encoder::{forward, AttentionMode, Backbone, EncoderConfig, Head, ModelConfig};
use ftacl::frontend::Spectrogram;
use ftacl::params::{rng_for, Binder, ParamSet};
use ftacl::tensor::gradcheck::check_gradients;
use ftacl::tensor::{Graph, Tensor, Var};
use ftacl::tokenizer::{TokenGrid, TokenizerConfig};

fn main() -> ftacl::Result<()> {
    let mut r = rng_for(3, "example", 0);
    let params = [
        Tensor::randn(&[4, 6], 1.0, &mut r),
        Tensor::randn(&[6, 3], 0.5, &mut r),
        Tensor::randn(&[6], 1.0, &mut r),
        Tensor::randn(&[6], 0.1, &mut r),
    ];
    let err = check_gradients(
        |g: &mut Graph, v: &[Var]| {
            let h = g.layer_norm(v[0], v[2], v[3], 1e-6)?;
            let h = g.gelu(h)?;
            let logits = g.matmul(h, v[1])?;
            g.cross_entropy(logits, &[0, 2, 1, 2])
        },
        &params,
        1e-5,
    )?;
    println!("layer norm -> gelu -> linear -> cross entropy: max relative error {err:.2e}");

    let mut encoder = EncoderConfig::new(2, 16, AttentionMode::Factorized);
    encoder.heads = 2;
    let cfg = ModelConfig {
        tokenizer: TokenizerConfig { kernel: 4, stride: 3, ..TokenizerConfig::new(16) },
        encoder,
        pos_grid: TokenGrid { m: 2, t: 3 },
        bottleneck: 4,
    };
    let trunk = Backbone::init(cfg, &mut r)?;
    let mut adapters = AdapterSet::init(AdapterConfig::new(16, 4)?, 2, &mut r);
    // move the zero up projections so every adapter weight gets a gradient
    for t in adapters.tensors_mut() {
        *t = Tensor::randn(t.shape(), 0.3, &mut r);
    }
    let head = Head::init(16, 3, &mut r);
    let x = Spectrogram::new(Tensor::randn(&[7, 10], 1.0, &mut r))?;
    let trainable: Vec<Tensor> = adapters
        .named_tensors("")
        .into_iter()
        .chain(head.named_tensors(""))
        .map(|(_, t)| t.clone())
        .collect();
    let err = check_gradients(
        |g: &mut Graph, v: &[Var]| {
            let mut frozen = Binder::new(g, false);
            let tv = trunk.bind(&mut frozen);
            let mut b = Binder::replay(frozen.graph, v);
            let (av, hv) = (adapters.bind(&mut b), head.bind(&mut b));
            let logits = forward(b.graph, &x, &tv, Some(&av), &hv)?;
            b.graph.cross_entropy(logits, &[1])
        },
        &trainable,
        1e-5,
    )?;
    println!(
        "adapted classifier, {} trainable tensors: max relative error {err:.2e}",
        trainable.len()
    );
    Ok(())
}
