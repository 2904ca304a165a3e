use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Scalar, Tensor};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn next_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Running statistics and other buffers are stored but never optimized.
    pub trainable: bool,
}

/// Named parameters with gradient accumulators, in insertion order.
#[derive(Debug)]
pub struct ParamStore<T: Scalar = f32> {
    uid: u64,
    entries: Vec<ParamEntry<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Clone for ParamStore<T> {
    /// The clone is a distinct store: gradients recorded against the
    /// original do not accumulate into it.
    fn clone(&self) -> Self {
        ParamStore {
            uid: next_uid(),
            entries: self.entries.clone(),
            index: self.index.clone(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            uid: next_uid(),
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.entries.len());
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            grad,
            trainable,
        });
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.id(name).map(|id| &self.entries[id.0])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry<T>> {
        self.id(name).map(move |id| &mut self.entries[id.0])
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).count()
    }

    /// A distinct copy whose entries are all non-trainable, so reading it
    /// on a tape records no gradient work.
    pub fn frozen(&self) -> Self {
        let mut s = self.clone();
        for e in &mut s.entries {
            e.trainable = false;
        }
        s
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn grads_are_zero(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.grad.data().iter().all(|g| *g == T::zero()))
    }
}
