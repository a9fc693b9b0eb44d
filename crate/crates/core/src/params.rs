//! Named parameter collections and their binding onto a [`Graph`].
//!
//! Every weight struct binds its tensors in the same order that
//! [`ParamSet::visit`] and [`ParamSet::visit_mut`] walk them, so the vars
//! collected by a [`Binder`] line up with `visit_mut` for optimizer updates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Tensor, Var};

pub trait ParamSet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, t| out.push((name, t)));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.visit_mut(&mut |t| out.push(t));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Places tensors on a graph as trainable params or frozen constants.
pub struct Binder<'g> {
    pub graph: &'g mut Graph,
    trainable: bool,
    bound: Vec<Var>,
    frozen: Vec<Var>,
    replay: Option<std::vec::IntoIter<Var>>,
}

impl<'g> Binder<'g> {
    pub fn new(graph: &'g mut Graph, trainable: bool) -> Self {
        Binder {
            graph,
            trainable,
            bound: Vec::new(),
            frozen: Vec::new(),
            replay: None,
        }
    }

    /// A binder that hands out `vars` in order instead of creating leaves,
    /// so a weight struct can be wired onto nodes that already exist (for
    /// example the perturbed parameters of a gradient check).
    pub fn replay(graph: &'g mut Graph, vars: &[Var]) -> Self {
        Binder {
            graph,
            trainable: false,
            bound: Vec::new(),
            frozen: Vec::new(),
            replay: Some(vars.to_vec().into_iter()),
        }
    }

    /// Vars not yet handed out by a replaying binder.
    pub fn remaining(&self) -> usize {
        self.replay.as_ref().map_or(0, |r| r.len())
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn bind(&mut self, t: &Tensor) -> Var {
        if let Some(replay) = &mut self.replay {
            let v = replay.next().expect("replay binder ran out of vars");
            debug_assert_eq!(self.graph.value(v).shape(), t.shape(), "replayed var shape");
            return v;
        }
        let v = self.graph.leaf(t.clone(), self.trainable);
        if self.trainable {
            self.bound.push(v);
        } else {
            self.frozen.push(v);
        }
        v
    }

    /// Trainable vars in binding order.
    pub fn trainable_vars(&self) -> &[Var] {
        &self.bound
    }

    /// Frozen (constant) vars in binding order.
    pub fn frozen_vars(&self) -> &[Var] {
        &self.frozen
    }

    pub fn take_trainable(&mut self) -> Vec<Var> {
        std::mem::take(&mut self.bound)
    }
}

/// Seeded generator for a named purpose; distinct purposes get
/// independent streams from the same run seed.
pub fn rng_for(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    // FNV-1a over the purpose tag, mixed with the seed and index.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17));
    rng.set_stream(index);
    rng
}
