use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::real::Real;
use crate::tensor::Tensor;

type BackwardFn<F> = Box<dyn Fn(&Tensor<F>, &mut GradSink<'_, F>)>;

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

/// Handle to one named array inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId {
    store: u64,
    index: usize,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Named trainable arrays. Values are shared with tapes by reference count,
/// so binding a parameter to a tape does not copy it.
#[derive(Debug)]
pub struct ParamStore<F> {
    uid: u64,
    names: Vec<String>,
    values: Vec<Arc<Tensor<F>>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

// A clone keeps the uid: its layout is identical, so ids issued by the
// original (and held by model structs that get cloned with it) stay valid.
impl<F: Real> Clone for ParamStore<F> {
    fn clone(&self) -> Self {
        Self {
            uid: self.uid,
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new((**v).clone())).collect(),
        }
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Registers a new array. Names must be unique within the store.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId {
            store: self.uid,
            index: self.values.len() - 1,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(|index| ParamId {
            store: self.uid,
            index,
        })
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.check(id);
        &self.names[id.index]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        self.check(id);
        &self.values[id.index]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        self.check(id);
        Arc::make_mut(&mut self.values[id.index])
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(|index| ParamId {
            store: self.uid,
            index,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|v| &**v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Same parameter layout, different element type (ids are re-issued).
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for (n, v) in self.iter() {
            out.add(n, v.cast());
        }
        out
    }

    /// Translates an id from a store with identical layout (e.g. a cast copy).
    pub fn rebind(&self, id: ParamId) -> ParamId {
        assert!(id.index < self.values.len());
        ParamId {
            store: self.uid,
            index: id.index,
        }
    }

    fn check(&self, id: ParamId) {
        assert_eq!(id.store, self.uid, "parameter id from a different store");
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<F>> {
        self.check(id);
        self.values[id.index].clone()
    }
}

#[derive(Default)]
struct Nodes<F> {
    values: Vec<Arc<Tensor<F>>>,
    backward: Vec<Option<BackwardFn<F>>>,
    requires_grad: Vec<bool>,
    param_of: Vec<Option<ParamId>>,
    param_nodes: HashMap<ParamId, usize>,
}

/// Records operations for one forward pass so gradients can be computed
/// by a single reverse sweep.
pub struct Tape<F> {
    nodes: RefCell<Nodes<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// A value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, F> {
    pub(crate) tape: &'t Tape<F>,
    pub(crate) id: usize,
}

impl<F> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Accumulates parent gradients during the reverse sweep.
pub struct GradSink<'a, F> {
    grads: &'a mut [Option<Tensor<F>>],
    requires_grad: &'a [bool],
}

impl<F: Real> GradSink<'_, F> {
    #[inline]
    pub fn wants(&self, id: usize) -> bool {
        self.requires_grad[id]
    }

    pub fn add(&mut self, id: usize, g: Tensor<F>) {
        if !self.requires_grad[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Nodes {
                values: Vec::new(),
                backward: Vec::new(),
                requires_grad: Vec::new(),
                param_of: Vec::new(),
                param_nodes: HashMap::new(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Arc<Tensor<F>>, requires_grad: bool, param: Option<ParamId>) -> usize {
        let mut n = self.nodes.borrow_mut();
        n.values.push(value);
        n.backward.push(None);
        n.requires_grad.push(requires_grad);
        n.param_of.push(param);
        n.values.len() - 1
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        let id = self.push_leaf(Arc::new(value), false, None);
        Var { tape: self, id }
    }

    /// A leaf whose gradient is tracked (used for input sensitivities).
    pub fn leaf(&self, value: Tensor<F>) -> Var<'_, F> {
        let id = self.push_leaf(Arc::new(value), true, None);
        Var { tape: self, id }
    }

    /// Binds a trainable parameter. Repeated binds return the same node so
    /// gradients from every use are summed.
    pub fn param(&self, store: &ParamStore<F>, id: ParamId) -> Var<'_, F> {
        if let Some(&node) = self.nodes.borrow().param_nodes.get(&id) {
            return Var { tape: self, id: node };
        }
        let node = self.push_leaf(store.shared(id), true, Some(id));
        self.nodes.borrow_mut().param_nodes.insert(id, node);
        Var { tape: self, id: node }
    }

    /// Binds a parameter's current value as a constant (no gradient).
    pub fn frozen(&self, store: &ParamStore<F>, id: ParamId) -> Var<'_, F> {
        let id = self.push_leaf(store.shared(id), false, None);
        Var { tape: self, id }
    }

    pub(crate) fn value(&self, id: usize) -> Arc<Tensor<F>> {
        self.nodes.borrow().values[id].clone()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow().requires_grad[id]
    }

    /// Records an op output. The backward closure receives the output
    /// gradient and must push parent gradients into the sink.
    pub(crate) fn push(
        &self,
        value: Arc<Tensor<F>>,
        parents: &[usize],
        backward: impl Fn(&Tensor<F>, &mut GradSink<'_, F>) + 'static,
    ) -> Var<'_, F> {
        let mut n = self.nodes.borrow_mut();
        let rg = parents.iter().any(|&p| n.requires_grad[p]);
        n.values.push(value);
        n.backward
            .push(if rg { Some(Box::new(backward)) } else { None });
        n.requires_grad.push(rg);
        n.param_of.push(None);
        Var {
            tape: self,
            id: n.values.len() - 1,
        }
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var<'_, F>) -> Gradients<F> {
        let n = self.nodes.borrow();
        assert_eq!(
            n.values[output.id].len(),
            1,
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; n.values.len()];
        if n.requires_grad[output.id] {
            grads[output.id] = Some(Tensor::new(
                n.values[output.id].shape().to_vec(),
                vec![F::one()],
            ));
        }
        for id in (0..=output.id).rev() {
            let Some(f) = &n.backward[id] else { continue };
            let Some(g) = grads[id].take() else { continue };
            let mut sink = GradSink {
                grads: &mut grads,
                requires_grad: &n.requires_grad,
            };
            f(&g, &mut sink);
        }
        Gradients {
            grads,
            param_of: n.param_of.clone(),
        }
    }
}

/// Result of [`Tape::backward`]: gradients of leaves and parameters.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    param_of: Vec<Option<ParamId>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of a leaf; `None` when the output does not depend on it.
    pub fn wrt(&self, v: Var<'_, F>) -> Option<&Tensor<F>> {
        self.grads[v.id].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.param_of
            .iter()
            .position(|p| *p == Some(id))
            .and_then(|node| self.grads[node].as_ref())
    }

    /// All parameter gradients in tape order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.param_of
            .iter()
            .zip(&self.grads)
            .filter_map(|(p, g)| Some(((*p)?, g.as_ref()?)))
    }
}

impl<'t, F: Real> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<F>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> F {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on non-scalar");
        v.data()[0]
    }

    /// Same values, detached from the graph.
    pub fn detach(&self) -> Var<'t, F> {
        let id = self.tape.push_leaf(self.value(), false, None);
        Var { tape: self.tape, id }
    }
}
