//! A frozen trunk with convolutional adapters, forward pass only.
//!
//! Freshly initialized adapters have a zero up projection, so attaching
//! them leaves the logits bit-for-bit unchanged. Moving the up projection
//! away from zero routes the adapter branch into the output.
//!
//! ```bash
//! cargo run --example adapter_forward
//! ```

use ftacl::adapter::{AdapterConfig, AdapterSet};
use ftacl::encoder::{forward, Backbone, Head, ModelConfig};
use ftacl::frontend::Spectrogram;
use ftacl::params::{rng_for, Binder, ParamSet};
use ftacl::tensor::{Graph, Tensor};
use ftacl::ticl::grid_for;

fn logits(trunk: &Backbone, adapters: Option<&AdapterSet>, head: &Head, x: &Spectrogram) -> ftacl::Result<Tensor> {
    let mut g = Graph::new();
    let mut b = Binder::new(&mut g, false);
    let (tv, av, hv) = (trunk.bind(&mut b), adapters.map(|a| a.bind(&mut b)), head.bind(&mut b));
    let y = forward(&mut g, x, &tv, av.as_ref(), &hv)?;
    Ok(g.value(y).clone())
}

fn main() -> ftacl::Result<()> {
    let cfg = ModelConfig::desk(grid_for(46, 56, 16, 10)?);
    let trunk = Backbone::init(cfg, &mut rng_for(1, "backbone", 0))?;
    let head = Head::init(cfg.embed_dim(), 4, &mut rng_for(1, "head", 0));
    let acfg = AdapterConfig::new(cfg.embed_dim(), cfg.bottleneck)?;
    let mut adapters = AdapterSet::init(acfg, cfg.encoder.layers, &mut rng_for(1, "adapter", 0));
    println!(
        "trunk {} params, adapters {} params, head {} params",
        trunk.param_count(),
        adapters.param_count(),
        head.param_count()
    );

    let x = Spectrogram::new(Tensor::randn(&[46, 56], 1.0, &mut rng_for(1, "input", 0)))?;
    let plain = logits(&trunk, None, &head, &x)?;
    let fresh = logits(&trunk, Some(&adapters), &head, &x)?;
    println!("plain logits   {:?}", plain.data());
    println!("fresh adapters bitwise equal: {}", plain.bitwise_eq(&fresh));

    let mut r = rng_for(1, "perturb", 0);
    for t in adapters.tensors_mut() {
        *t = Tensor::randn(t.shape(), 0.2, &mut r);
    }
    let moved = logits(&trunk, Some(&adapters), &head, &x)?;
    println!("moved adapters {:?} (max change {:.3e})", moved.data(), moved.max_abs_diff(&plain));
    Ok(())
}
