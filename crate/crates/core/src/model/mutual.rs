//! Mutual unit.
//!
//! For branch `i` with hidden state `V_i` (length `D`):
//!
//! ```text
//! c_ij = cos(V_i, V_j)                      j ≠ i
//! r_ij = c_ij / Σ_{j≠i} c_ij                (uniform 1/(N-1) when |Σ| ≤ 1e-6)
//! α_ij = softmax_{j≠i}(r_ij)
//! g_i  = sigmoid(W_i·V_i + b_i)
//! M_i  = V_i + g_i · Σ_{j≠i} α_ij V_j
//! ```
//!
//! Neighbour states `V_j` of branches other than the sample's owning branch
//! enter as constants, so a sample never sends gradient into a foreign branch.

use crate::error::{dim_err, Result};
use crate::numerics::{
    cosine, init, sigmoid, softmax, ParamId, ParamKind, ParamStore, Session, Tensor, Var, RATIO_GUARD,
};

#[derive(Clone, Debug)]
pub struct MutualUnit {
    /// Per branch `[D × 1]`.
    pub gate_weight: Vec<ParamId>,
    /// Per branch `[1]`.
    pub gate_bias: Vec<ParamId>,
    /// 1-based hidden layer the unit follows.
    pub layer: usize,
    pub width: usize,
    /// Forces every gate to this value when set.
    pub gate_override: Option<f64>,
}

/// Mixed state of one branch for a batch, with its coefficients.
pub struct MixOutput {
    /// `[B × D]`.
    pub mixed: Var,
    /// `[B × (N-1)]`, neighbours in increasing branch order.
    pub alpha: Option<Var>,
    /// `[B × 1]`.
    pub gate: Option<Var>,
}

impl MutualUnit {
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        prefix: &str,
        branches: usize,
        width: usize,
        layer: usize,
        gate_bias_init: f64,
    ) -> Result<Self> {
        let mut gate_weight = Vec::with_capacity(branches);
        let mut gate_bias = Vec::with_capacity(branches);
        for i in 0..branches {
            gate_weight.push(store.insert(
                format!("{prefix}mutual.gate{i}.weight"),
                init::xavier_uniform(seed, &format!("{prefix}mutual.gate.weight"), width, 1),
                ParamKind::Dense,
            )?);
            gate_bias.push(store.insert(
                format!("{prefix}mutual.gate{i}.bias"),
                Tensor::vector(vec![gate_bias_init]),
                ParamKind::Dense,
            )?);
        }
        Ok(Self {
            gate_weight,
            gate_bias,
            layer,
            width,
            gate_override: None,
        })
    }

    pub fn branches(&self) -> usize {
        self.gate_weight.len()
    }

    /// Mixes branch `i`, treating branch `owner` as the one that owns the
    /// samples: every neighbour `j ≠ owner` is stop-gradiented.
    pub fn mix_row(&self, sess: &mut Session, states: &[Var], i: usize, owner: usize) -> Result<MixOutput> {
        let n = states.len();
        if n != self.branches() {
            return dim_err(format!("mutual unit has {} branches, got {n} states", self.branches()));
        }
        if n < 2 {
            return Ok(MixOutput {
                mixed: states[i],
                alpha: None,
                gate: None,
            });
        }
        let vi = states[i];
        let neighbours: Vec<Var> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                if j == owner {
                    states[j]
                } else {
                    sess.tape.stop_gradient(states[j])
                }
            })
            .collect();
        let mut cos = Vec::with_capacity(n - 1);
        for &vj in &neighbours {
            cos.push(sess.tape.row_cosine(vi, vj)?);
        }
        let c = sess.tape.concat_cols(&cos)?;
        let r = sess.tape.ratio_normalize(c)?;
        let alpha = sess.tape.softmax(r, 1)?;

        let mut acc = None;
        for (k, &vj) in neighbours.iter().enumerate() {
            let a = sess.tape.slice_cols(alpha, k, 1)?;
            let term = sess.tape.scale_rows(vj, a)?;
            acc = Some(match acc {
                None => term,
                Some(s) => sess.tape.add(s, term)?,
            });
        }
        let borrowed = acc.expect("n >= 2");
        let rows = sess.tape.value(vi).dims2()?.0;
        let gate = match self.gate_override {
            Some(g) => sess.tape.constant(Tensor::full(&[rows, 1], g)),
            None => {
                let z = sess.affine(vi, self.gate_weight[i], self.gate_bias[i])?;
                sess.tape.sigmoid(z)
            }
        };
        let scaled = sess.tape.scale_rows(borrowed, gate)?;
        let mixed = sess.tape.add(vi, scaled)?;
        Ok(MixOutput {
            mixed,
            alpha: Some(alpha),
            gate: Some(gate),
        })
    }

    /// `M_i` for every branch `i`, with `owner` deciding which neighbour
    /// states carry gradient.
    pub fn mix(&self, sess: &mut Session, states: &[Var], owner: usize) -> Result<Vec<MixOutput>> {
        (0..states.len())
            .map(|i| self.mix_row(sess, states, i, owner))
            .collect()
    }

    /// Coefficients for one sample from plain values: `(α, g)` with `α` an
    /// `N × N` matrix (zero diagonal) and `g` one gate per branch.
    pub fn coefficients(&self, store: &ParamStore, states: &[&[f64]]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let n = states.len();
        let mut alpha = vec![vec![0.0; n]; n];
        let mut gates = vec![0.0; n];
        for i in 0..n {
            gates[i] = match self.gate_override {
                Some(g) => g,
                None => {
                    let w = store.value(self.gate_weight[i]).data();
                    let b = store.value(self.gate_bias[i]).item();
                    let z: f64 = states[i].iter().zip(w).map(|(x, y)| x * y).sum::<f64>() + b;
                    sigmoid(z)
                }
            };
            if n < 2 {
                continue;
            }
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let c: Vec<f64> = others.iter().map(|&j| cosine(states[i], states[j])).collect();
            let d: f64 = c.iter().sum();
            let r: Vec<f64> = if d.abs() > RATIO_GUARD {
                c.iter().map(|x| x / d).collect()
            } else {
                vec![1.0 / (n - 1) as f64; n - 1]
            };
            for (&j, a) in others.iter().zip(softmax(&r)) {
                alpha[i][j] = a;
            }
        }
        (alpha, gates)
    }
}
