use super::mlp::Dense;
use crate::error::{dim_err, Result};
use crate::numerics::{ParamStore, Session, Var};

/// `N` parallel MLPs, one per scenario. Layer `l` of every branch reads the
/// previous branch layer concatenated with the auxiliary layer-`l` output
/// (when an auxiliary network is present).
#[derive(Clone, Debug)]
pub struct BranchNetwork {
    /// `layers[i][l]`.
    pub layers: Vec<Vec<Dense>>,
    pub heads: Vec<Dense>,
    pub injects_aux: bool,
}

impl BranchNetwork {
    /// All branches draw their initial weights from the same streams, so
    /// they start identical and diverge only through their own data.
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        prefix: &str,
        branches: usize,
        input: usize,
        hidden: &[usize],
        aux_widths: Option<&[usize]>,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(branches);
        let mut heads = Vec::with_capacity(branches);
        for i in 0..branches {
            let mut ls = Vec::with_capacity(hidden.len());
            let mut fan_in = input;
            for (l, &w) in hidden.iter().enumerate() {
                let extra = aux_widths.map_or(0, |a| a[l]);
                ls.push(Dense::new(
                    store,
                    seed,
                    &format!("{prefix}branch{i}.layer{}", l + 1),
                    &format!("{prefix}branch.layer{}", l + 1),
                    fan_in + extra,
                    w,
                )?);
                fan_in = w;
            }
            heads.push(Dense::new(
                store,
                seed,
                &format!("{prefix}branch{i}.head"),
                &format!("{prefix}branch.head"),
                fan_in,
                1,
            )?);
            layers.push(ls);
        }
        Ok(Self {
            layers,
            heads,
            injects_aux: aux_widths.is_some(),
        })
    }

    pub fn branches(&self) -> usize {
        self.layers.len()
    }

    pub fn depth(&self) -> usize {
        self.layers[0].len()
    }

    /// `relu([x, aux]·W + b)` for layer `l` (0-based) of branch `i`.
    pub fn layer(&self, sess: &mut Session, i: usize, l: usize, x: Var, aux: Option<Var>) -> Result<Var> {
        let input = match (self.injects_aux, aux) {
            (true, Some(a)) => sess.tape.concat_cols(&[x, a])?,
            (false, None) => x,
            (true, None) => return dim_err("branch layer expects an auxiliary input"),
            (false, Some(_)) => return dim_err("branch network has no auxiliary inputs"),
        };
        let z = self.layers[i][l].forward(sess, input)?;
        Ok(sess.tape.relu(z))
    }

    pub fn head(&self, sess: &mut Session, i: usize, h: Var) -> Result<Var> {
        self.heads[i].forward(sess, h)
    }
}
