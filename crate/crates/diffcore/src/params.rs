use std::ops::{Deref, DerefMut};

use crate::error::DiffError;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
}

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Ids whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids()
            .filter(move |id| self.name(*id).starts_with(prefix))
    }

    /// Flattened copy of every parameter, in store order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|e| e.value.data().iter().copied())
            .collect()
    }
}

/// A tape bound to a parameter store for one forward pass.
///
/// Parameters become tape leaves on first use. Parameters outside the trainable
/// mask are bound as constants.
pub struct Graph<'p> {
    tape: Tape,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
    trainable: Trainable<'p>,
}

#[derive(Clone, Copy)]
enum Trainable<'p> {
    All,
    Mask(&'p [bool]),
    Nothing,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            trainable: Trainable::All,
        }
    }

    /// Only parameters with `mask[id] == true` are differentiable.
    pub fn with_trainable(store: &'p ParamStore, mask: &'p [bool]) -> Self {
        assert_eq!(mask.len(), store.len(), "trainable mask length");
        Self {
            trainable: Trainable::Mask(mask),
            ..Self::new(store)
        }
    }

    /// Binds every parameter as a constant; no gradients are recorded.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self {
            trainable: Trainable::Nothing,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn is_trainable(&self, id: ParamId) -> bool {
        match self.trainable {
            Trainable::All => true,
            Trainable::Mask(m) => m[id.0],
            Trainable::Nothing => false,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.is_trainable(id) {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of the bound trainable parameters, in store order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                grads.get(v).map(|g| (ParamId(i), g.clone()))
            })
            .collect()
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

/// Per-parameter gradient accumulator.
#[derive(Debug, Clone)]
pub struct GradBuffer {
    grads: Vec<Option<Tensor>>,
}

impl GradBuffer {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn add(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn extend(&mut self, items: &[(ParamId, Tensor)]) {
        for (id, g) in items {
            self.add(*id, g);
        }
    }

    pub fn merge(&mut self, other: &GradBuffer) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Runs `f` on a fresh graph and returns the scalar loss with parameter gradients.
pub fn value_and_grad<'p, E: From<DiffError>>(
    store: &'p ParamStore,
    mask: Option<&'p [bool]>,
    f: impl FnOnce(&mut Graph<'p>) -> std::result::Result<Var, E>,
) -> std::result::Result<(f64, Vec<(ParamId, Tensor)>), E> {
    let mut g = match mask {
        Some(m) => Graph::with_trainable(store, m),
        None => Graph::new(store),
    };
    let loss = f(&mut g)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    Ok((value, g.param_grads(&grads)))
}
