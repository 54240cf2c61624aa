use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Role of a stored tensor; decides weight decay and whether it is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Ordered, named collection of every tensor a model owns.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kind.trainable()).map(|e| e.value.numel()).sum()
    }

    /// Replaces every value, checking names and shapes against `other`.
    pub fn load_from(&mut self, other: ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Shape(format!("checkpoint has {} tensors, model has {}", other.len(), self.len())));
        }
        for (mine, theirs) in self.entries.iter().zip(&other.entries) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                    theirs.name,
                    theirs.value.shape(),
                    mine.name,
                    mine.value.shape()
                )));
            }
        }
        self.entries = other.entries;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), kind: e.kind, value: e.value.cast() })
                .collect(),
        }
    }
}

/// Whether batch norm uses batch statistics (and updates running ones).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by one batch-norm layer during a training forward.
#[derive(Clone, Debug)]
pub struct BnObservation<T> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// One forward pass: a fresh graph plus lazily registered parameter leaves.
pub struct Ctx<'s, T> {
    pub g: Graph<T>,
    store: &'s ParamStore<T>,
    leaves: Vec<Option<Var>>,
    pub mode: Mode,
    pub bn_eps: f64,
    observations: Vec<BnObservation<T>>,
}

impl<'s, T: Scalar> Ctx<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Ctx { g: Graph::new(), store, leaves: vec![None; store.len()], mode, bn_eps: 1e-5, observations: Vec::new() }
    }

    /// Worker count for convolutions in this pass; see [`Graph::with_threads`].
    pub fn threads(mut self, threads: usize) -> Self {
        self.g = std::mem::take(&mut self.g).with_threads(threads);
        self
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// Graph leaf for a parameter, created on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.store.entry(id).kind.trainable() { self.g.param(t) } else { self.g.constant(t) };
        self.leaves[id.0] = Some(v);
        v
    }

    pub fn observe(&mut self, obs: BnObservation<T>) {
        self.observations.push(obs);
    }

    pub fn observations(&self) -> &[BnObservation<T>] {
        &self.observations
    }

    /// Gradients for every parameter touched by the last backward pass, in store order.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        self.leaves
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.g.grad(v).map(|gr| (ParamId(i), gr.clone()))
            })
            .collect()
    }
}

/// Applies observed batch statistics to the running buffers:
/// `running = (1 - momentum) * running + momentum * batch`, with the unbiased
/// batch variance.
pub fn apply_bn_observations<T: Scalar>(store: &mut ParamStore<T>, obs: &[BnObservation<T>], momentum: f64) {
    let m = T::lit(momentum);
    for o in obs {
        let unbias = if o.count > 1 { T::from_usize(o.count).unwrap() / T::from_usize(o.count - 1).unwrap() } else { T::one() };
        for (r, &b) in store.get_mut(o.mean_id).data_mut().iter_mut().zip(&o.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in store.get_mut(o.var_id).data_mut().iter_mut().zip(&o.var) {
            *r = (T::one() - m) * *r + m * b * unbias;
        }
    }
}

/// Creates parameters with a shared name prefix and initialization stream.
pub struct Builder<'a, T, R> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Scalar, R: Rng> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Builder { store, rng, prefix: String::new() }
    }

    pub fn scoped<F, O>(&mut self, scope: &str, f: F) -> O
    where
        F: FnOnce(&mut Builder<'_, T, R>) -> O,
    {
        let prefix = if self.prefix.is_empty() { scope.to_string() } else { format!("{}.{scope}", self.prefix) };
        let mut child = Builder { store: &mut *self.store, rng: &mut *self.rng, prefix };
        f(&mut child)
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn uniform(&mut self, leaf: &str, kind: ParamKind, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound)));
        let name = self.name(leaf);
        self.store.push(name, kind, t)
    }

    pub fn constant(&mut self, leaf: &str, kind: ParamKind, shape: &[usize], v: f64) -> ParamId {
        let name = self.name(leaf);
        self.store.push(name, kind, Tensor::full(shape, T::lit(v)))
    }
}
