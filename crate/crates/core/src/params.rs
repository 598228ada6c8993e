//! Named parameter storage with gradient buffers.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Weight,
    /// Running statistics; never differentiated.
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry<F> {
    name: String,
    kind: ParamKind,
    value: Tensor<F>,
    grad: Option<Vec<F>>,
}

/// Every tensor of a model, addressed by dotted path (`encoder.layer0.attn.wq`).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    entries: Vec<Entry<F>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    fn insert(&mut self, name: String, kind: ParamKind, value: Tensor<F>) -> ParamId {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            kind,
            value,
            grad: None,
        });
        id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.insert(name.into(), ParamKind::Weight, value)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.insert(name.into(), ParamKind::Buffer, value)
    }

    pub fn add_randn<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        self.add(name, Tensor::randn(shape, std, rng))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Trainable parameters whose name starts with any of `prefixes`.
    pub fn weights_with_prefix(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| {
                self.kind(id) == ParamKind::Weight
                    && prefixes.iter().any(|p| self.name(id).starts_with(p))
            })
            .collect()
    }

    pub fn weights(&self) -> Vec<ParamId> {
        self.weights_with_prefix(&[""])
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn set_data(&mut self, id: ParamId, data: &[F]) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.len() != data.len() {
            return Err(Error::dim(
                "set_data",
                format!("`{}` has {} values, got {}", e.name, e.value.len(), data.len()),
            ));
        }
        e.value.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> Option<&[F]> {
        self.entries[id.0].grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&mut self, id: ParamId, g: &[F]) {
        let e = &mut self.entries[id.0];
        match &mut e.grad {
            Some(buf) => {
                for (b, &x) in buf.iter_mut().zip(g) {
                    *b += x;
                }
            }
            None => e.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Total number of trainable scalars.
    pub fn num_weights(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.value.len())
            .sum()
    }

    /// Converts every tensor to another scalar type, keeping names and kinds.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.insert(e.name.clone(), e.kind, e.value.cast());
        }
        out
    }
}
