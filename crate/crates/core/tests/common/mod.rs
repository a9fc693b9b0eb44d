#![allow(dead_code)]

pub mod ops;
pub mod oracle;

use ftacl::adapter::{AdapterConfig, AdapterSet};
use ftacl::encoder::{forward, AttentionMode, Backbone, EncoderConfig, Head, ModelConfig};
use ftacl::frontend::Spectrogram;
use ftacl::params::{Binder, ParamSet};
use ftacl::tensor::gradcheck::{gradient_report_with, GradReport, Stencil};
use ftacl::tensor::{Graph, Tensor, Var};
use ftacl::tokenizer::{TokenGrid, TokenizerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reduces any node to a scalar through fixed random weights, so that
/// gradients of shift-invariant ops (softmax, layer norm) are not trivially
/// zero.
pub fn project(g: &mut Graph, y: Var, seed: u64) -> ftacl::Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(Tensor::randn(&shape, 1.0, &mut rng(seed ^ 0x5eed)));
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

/// A small adapted classifier: kernel 4 / stride 3 over a 7 x 10 plane
/// gives a 2 x 3 token grid.
pub fn tiny_model(d: usize, layers: usize, heads: usize, bottleneck: usize, attention: AttentionMode) -> ModelConfig {
    let mut encoder = EncoderConfig::new(layers, d, attention);
    encoder.heads = heads;
    ModelConfig {
        tokenizer: TokenizerConfig {
            kernel: 4,
            stride: 3,
            ..TokenizerConfig::new(d)
        },
        encoder,
        pos_grid: TokenGrid { m: 2, t: 3 },
        bottleneck,
    }
}

pub const TINY_PLANE: (usize, usize) = (7, 10);

pub fn random_spec(freq: usize, frames: usize, seed: u64) -> Spectrogram {
    Spectrogram::new(Tensor::randn(&[freq, frames], 1.0, &mut rng(seed))).unwrap()
}

fn jitter(set: &mut impl ParamSet, std: f64, r: &mut ChaCha8Rng) {
    for t in set.tensors_mut() {
        let noise = Tensor::randn(t.shape(), std, r);
        let moved: Vec<f64> = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        t.assign(&moved).unwrap();
    }
}

/// Trunk, adapters and head with every tensor moved away from its
/// initial value, so zero-initialised up projections and unit norms do not
/// hide gradient paths.
pub fn random_adapted(cfg: ModelConfig, classes: usize, seed: u64) -> (Backbone, AdapterSet, Head) {
    let mut r = rng(seed);
    let mut backbone = Backbone::init(cfg, &mut r).unwrap();
    jitter(&mut backbone, 0.1, &mut r);
    let acfg = AdapterConfig::new(cfg.embed_dim(), cfg.bottleneck).unwrap();
    let mut adapters = AdapterSet::init(acfg, cfg.encoder.layers, &mut r);
    jitter(&mut adapters, 0.3, &mut r);
    let mut head = Head::init(cfg.embed_dim(), classes, &mut r);
    jitter(&mut head, 0.5, &mut r);
    (backbone, adapters, head)
}

pub fn tensors_of(set: &impl ParamSet) -> Vec<Tensor> {
    set.named_tensors("").into_iter().map(|(_, t)| t.clone()).collect()
}

/// Gradient check of the cross-entropy loss of a random d = 16, L = 2,
/// 3-class adapted classifier, perturbing only the parameters whose names
/// satisfy `select` (names are prefixed `backbone.`, `adapters.`, `head.`).
/// Returns the report and the names of the checked parameters.
pub fn full_model_gradcheck(
    seed: u64,
    attention: AttentionMode,
    select: impl Fn(&str) -> bool,
) -> ftacl::Result<(GradReport, Vec<String>)> {
    full_model_gradcheck_with(seed, attention, select, Stencil::Central2, 1e-5)
}

/// [`full_model_gradcheck`] with a chosen stencil and step.
pub fn full_model_gradcheck_with(
    seed: u64,
    attention: AttentionMode,
    select: impl Fn(&str) -> bool,
    stencil: Stencil,
    h: f64,
) -> ftacl::Result<(GradReport, Vec<String>)> {
    let cfg = tiny_model(16, 2, 2, 4, attention);
    let (backbone, adapters, head) = random_adapted(cfg, 3, seed);
    let spec = random_spec(TINY_PLANE.0, TINY_PLANE.1, seed.wrapping_add(1));
    let label = (seed % 3) as usize;

    let mut all: Vec<(String, Tensor)> = Vec::new();
    for (prefix, set) in [("backbone", &backbone as &dyn NamedSet), ("adapters", &adapters), ("head", &head)] {
        all.extend(set.named(prefix));
    }
    let chosen: Vec<bool> = all.iter().map(|(n, _)| select(n)).collect();
    let names: Vec<String> = all.iter().zip(&chosen).filter(|(_, &c)| c).map(|((n, _), _)| n.clone()).collect();
    let params: Vec<Tensor> = all.iter().zip(&chosen).filter(|(_, &c)| c).map(|((_, t), _)| t.clone()).collect();

    let report = gradient_report_with(
        |g, vars| {
            let mut free = vars.iter();
            let ordered: Vec<Var> = all
                .iter()
                .zip(&chosen)
                .map(|((_, t), &c)| if c { *free.next().unwrap() } else { g.constant(t.clone()) })
                .collect();
            let mut b = Binder::replay(g, &ordered);
            let bv = backbone.bind(&mut b);
            let av = adapters.bind(&mut b);
            let hv = head.bind(&mut b);
            assert_eq!(b.remaining(), 0);
            let logits = forward(b.graph, &spec, &bv, Some(&av), &hv)?;
            b.graph.cross_entropy(logits, &[label])
        },
        &params,
        h,
        stencil,
    )?;
    Ok((report, names))
}

trait NamedSet {
    fn named(&self, prefix: &str) -> Vec<(String, Tensor)>;
}

impl<T: ParamSet> NamedSet for T {
    fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.named_tensors(prefix).into_iter().map(|(n, t)| (n, t.clone())).collect()
    }
}
