use std::rc::Rc;

use crate::error::{Result, SamlError};
use crate::numerics::{init, ParamId, ParamKind, ParamStore, Session, Var};

/// Projections of one multi-head self-attention block. The per-head
/// `d × d_k` matrices are stored side by side as one `d × d` matrix each.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(SamlError::Config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        let mut mk = |suffix: &str| {
            let key = format!("{name}.{suffix}");
            store.insert(
                key.clone(),
                init::xavier_uniform(seed, &key, dim, dim),
                ParamKind::Dense,
            )
        };
        Ok(Self {
            query: mk("wq")?,
            key: mk("wk")?,
            value: mk("wv")?,
            output: mk("wo")?,
            heads,
            dim,
        })
    }

    pub fn head_width(&self) -> usize {
        self.dim / self.heads
    }

    /// `Concat(head_1..head_H)·W^O` with
    /// `head_h = softmax(Q W_h^Q (K W_h^K)ᵀ / √d_k) V W_h^V`.
    ///
    /// Sources are `[batch·len × d]`; `mask` marks valid positions.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        sess: &mut Session,
        q_src: Var,
        k_src: Var,
        v_src: Var,
        mask: Rc<Vec<bool>>,
        batch: usize,
        len: usize,
    ) -> Result<Var> {
        let (wq, wk, wv, wo) = (
            sess.param(self.query),
            sess.param(self.key),
            sess.param(self.value),
            sess.param(self.output),
        );
        let q = sess.tape.matmul(q_src, wq)?;
        let k = sess.tape.matmul(k_src, wk)?;
        let v = sess.tape.matmul(v_src, wv)?;
        let heads = sess.tape.attention(q, k, v, mask, batch, len, self.heads)?;
        sess.tape.matmul(heads, wo)
    }
}
