//! Reverse-mode automatic differentiation on a flat tape.
//!
//! The engine is define-by-run: a [`Tape`] is built fresh for every
//! forward pass, ops record a backward closure as they execute, and
//! [`Tape::backward`] walks the tape once in reverse. Values are dense
//! `f64` arrays ([`ndarray::ArrayD`]); everything is single-threaded and
//! bitwise deterministic for fixed inputs.
//!
//! Learnable state lives outside the tape in named [`Param`]s. A forward
//! pass binds each param it touches with [`Tape::param`] (idempotent per
//! tape), and [`Gradients`] maps param names back to accumulated
//! gradients after the backward pass.

pub mod check;
mod ops;
mod optim;

pub use optim::Adam;

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

pub type NodeId = usize;

pub(crate) type BackFn = Box<dyn Fn(&Tape, &ArrayD<f64>, &mut GradSink)>;

pub(crate) struct Node {
    value: ArrayD<f64>,
    needs_grad: bool,
    back: Option<BackFn>,
}

/// Accumulates gradients per node during the backward sweep.
pub struct GradSink {
    slots: Vec<Option<ArrayD<f64>>>,
}

impl GradSink {
    pub fn add(&mut self, id: NodeId, g: ArrayD<f64>) {
        match &mut self.slots[id] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(String, NodeId)>,
    by_name: HashMap<String, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub(crate) fn push(&mut self, value: ArrayD<f64>, needs_grad: bool, back: Option<BackFn>) -> NodeId {
        self.nodes.push(Node {
            value,
            needs_grad,
            back,
        });
        self.nodes.len() - 1
    }

    pub(crate) fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// A differentiable leaf. Its gradient is computed but only retrievable
    /// by name when bound through [`Tape::param`].
    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, true, None)
    }

    /// A non-differentiable input; backward never propagates into it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, false, None)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Binds a parameter as a named leaf. Binding the same name twice on
    /// one tape returns the original node so gradients accumulate in a
    /// single slot.
    pub fn param(&mut self, p: &Param) -> NodeId {
        if let Some(&id) = self.by_name.get(&p.name) {
            assert_eq!(
                self.nodes[id].value.shape(),
                p.value.shape(),
                "param `{}` bound twice with different shapes",
                p.name
            );
            return id;
        }
        let id = self.push(p.value.clone(), true, None);
        self.bindings.push((p.name.clone(), id));
        self.by_name.insert(p.name.clone(), id);
        id
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    /// Scalar value of a 0-d (or single-element) node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        assert_eq!(v.len(), 1, "scalar() on node with {} elements", v.len());
        *v.iter().next().unwrap()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse sweep from a scalar root. Returns gradients for every bound
    /// parameter that the root depends on.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[root].value.len(),
            1,
            "backward root must be a scalar"
        );
        let mut sink = GradSink {
            slots: (0..self.nodes.len()).map(|_| None).collect(),
        };
        let seed_shape = self.nodes[root].value.raw_dim();
        sink.slots[root] = Some(ArrayD::from_elem(seed_shape, 1.0));

        let mut leaf_grads: HashMap<NodeId, ArrayD<f64>> = HashMap::new();
        for i in (0..=root).rev() {
            let Some(g) = sink.slots[i].take() else {
                continue;
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            match &self.nodes[i].back {
                Some(back) => back(self, &g, &mut sink),
                None => {
                    leaf_grads.insert(i, g);
                }
            }
        }

        let mut by_name = HashMap::new();
        for (name, id) in &self.bindings {
            if let Some(g) = leaf_grads.remove(id) {
                by_name.insert(name.clone(), g);
            }
        }
        Gradients { by_name }
    }
}

/// Gradients keyed by parameter name.
pub struct Gradients {
    by_name: HashMap<String, ArrayD<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.by_name.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn max_abs(&self) -> f64 {
        self.by_name
            .values()
            .flat_map(|g| g.iter())
            .fold(0.0f64, |acc, &x| acc.max(x.abs()))
    }
}

/// A named learnable array plus its optimizer state.
#[derive(Debug, Clone)]
pub struct Param {
    name: String,
    pub value: ArrayD<f64>,
    pub(crate) m: ArrayD<f64>,
    pub(crate) v: ArrayD<f64>,
    pub(crate) t: u64,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        let m = ArrayD::zeros(value.raw_dim());
        let v = ArrayD::zeros(value.raw_dim());
        Param {
            name: name.into(),
            value,
            m,
            v,
            t: 0,
            trainable: true,
        }
    }

    /// Non-learnable state included in checkpoints and hashes
    /// (e.g. batch-norm running statistics).
    pub fn buffer(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        let mut p = Param::new(name, value);
        p.trainable = false;
        p
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

/// Anything that owns parameters. Iteration order is fixed by the
/// implementation (field order), which checkpointing and gradient checks
/// rely on.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names, shapes and raw little-endian values, in
    /// parameter order. Used by isolation tests to prove a component
    /// was untouched.
    fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in p.value.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex_digest(h)
    }
}

fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Bundles submodules into one `Module` view.
#[macro_export]
macro_rules! impl_module_via_fields {
    ($ty:ty, $($field:ident),+ $(,)?) => {
        impl $crate::autodiff::Module for $ty {
            fn params(&self) -> Vec<&$crate::autodiff::Param> {
                let mut out = Vec::new();
                $(out.extend($crate::autodiff::Module::params(&self.$field));)+
                out
            }
            fn params_mut(&mut self) -> Vec<&mut $crate::autodiff::Param> {
                let mut out = Vec::new();
                $(out.extend($crate::autodiff::Module::params_mut(&mut self.$field));)+
                out
            }
        }
    };
}

impl<M: Module> Module for Vec<M> {
    fn params(&self) -> Vec<&Param> {
        self.iter().flat_map(|m| m.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.iter_mut().flat_map(|m| m.params_mut()).collect()
    }
}

impl Module for Param {
    fn params(&self) -> Vec<&Param> {
        vec![self]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![self]
    }
}

impl<M: Module> Module for Option<M> {
    fn params(&self) -> Vec<&Param> {
        self.as_ref().map_or_else(Vec::new, |m| m.params())
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.as_mut().map_or_else(Vec::new, |m| m.params_mut())
    }
}
