use std::collections::BTreeMap;

use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators for one dense tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if param.shape() != grad.shape() || state.m.len() != param.len() {
        return dim_err(format!(
            "adam: parameter {:?}, gradient {:?}, state of {}",
            param.shape(),
            grad.shape(),
            state.m.len()
        ));
    }
    state.step += 1;
    update_slice(
        param.data_mut(),
        grad.data(),
        &mut state.m,
        &mut state.v,
        state.step,
        cfg,
    );
    Ok(())
}

fn update_slice(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], step: u64, cfg: &AdamConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        p[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Row-wise Adam state for an embedding table: each row keeps its own step
/// count and is only advanced when it received a gradient.
#[derive(Clone, Debug)]
struct SparseAdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: Vec<u64>,
}

/// Adam over a [`ParamStore`].
///
/// Parameters without a gradient in a step are left untouched, moments
/// included. Embedding tables are updated lazily, row by row.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    dense: BTreeMap<ParamId, AdamState>,
    sparse: BTreeMap<ParamId, SparseAdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            dense: BTreeMap::new(),
            sparse: BTreeMap::new(),
        }
    }

    pub fn dense_state(&self, id: ParamId) -> Option<&AdamState> {
        self.dense.get(&id)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.dense_params() {
            let param = store.value_mut(id);
            let state = self.dense.entry(id).or_insert_with(|| AdamState::new(param.len()));
            adam_step(param, g, state, &self.config)?;
        }
        for (id, rows) in grads.sparse_params() {
            let kind = store.get(id).kind;
            let table = store.value_mut(id);
            let (n, width) = table.dims2()?;
            let state = self.sparse.entry(id).or_insert_with(|| SparseAdamState {
                m: vec![0.0; n * width],
                v: vec![0.0; n * width],
                steps: vec![0; n],
            });
            for (&r, g) in rows {
                if kind.is_padding_row(r) {
                    continue;
                }
                state.steps[r] += 1;
                let span = r * width..(r + 1) * width;
                update_slice(
                    &mut table.data_mut()[span.clone()],
                    g,
                    &mut state.m[span.clone()],
                    &mut state.v[span],
                    state.steps[r],
                    &self.config,
                );
            }
        }
        Ok(())
    }
}
