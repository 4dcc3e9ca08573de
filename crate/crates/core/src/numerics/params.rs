use std::collections::HashMap;

use super::{ParamId, Tape, Tensor, Var};
use crate::error::{Result, SamlError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Dense,
    /// Row-indexed table made of slices of `rows_per_slice` rows. Row 0 of
    /// every slice is the padding/out-of-vocabulary row: it stays zero and
    /// the optimizer never touches it.
    Embedding {
        rows_per_slice: usize,
    },
}

impl ParamKind {
    pub fn is_padding_row(self, row: usize) -> bool {
        match self {
            ParamKind::Dense => false,
            ParamKind::Embedding { rows_per_slice } => row.is_multiple_of(rows_per_slice),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(SamlError::Config(format!("duplicate parameter `{name}`")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, kind });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Binds a [`Tape`] to a [`ParamStore`] so each parameter enters the tape
/// once per forward pass.
pub struct Session<'t, 's> {
    pub tape: &'t mut Tape,
    pub store: &'s ParamStore,
    leaves: HashMap<ParamId, Var>,
}

impl<'t, 's> Session<'t, 's> {
    pub fn new(tape: &'t mut Tape, store: &'s ParamStore) -> Self {
        Self {
            tape,
            store,
            leaves: HashMap::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.get(&id) {
            return v;
        }
        let v = self.tape.param(id, self.store.value(id));
        self.leaves.insert(id, v);
        v
    }

    pub fn lookup(&mut self, id: ParamId, rows: &[usize]) -> Result<Var> {
        self.tape.lookup(id, self.store.value(id), rows)
    }

    /// `x·W + b`.
    pub fn affine(&mut self, x: Var, weight: ParamId, bias: ParamId) -> Result<Var> {
        let w = self.param(weight);
        let b = self.param(bias);
        let h = self.tape.matmul(x, w)?;
        self.tape.add_bias(h, b)
    }
}
