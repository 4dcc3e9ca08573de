//! Scenario-aware feature representation.
//!
//! Every field is embedded twice: into a global subspace shared by all
//! scenarios and into a scenario-specific subspace (one table slice per
//! scenario). Behavior sequences go through two attention blocks:
//!
//! * global: queries, keys and values all from global embeddings;
//! * scenario-dependent: queries and keys from the scenario-specific
//!   embeddings (projected from `K_l` up to `K_g`), values from the global
//!   embeddings.
//!
//! Attention outputs are mean-pooled over valid positions, then concatenated
//! with the field embeddings and normalized numericals:
//!
//! ```text
//! independent = [global field vecs (n_cat·K_g) | numericals | pooled global attention (K_g)]
//! dependent   = [specific field vecs (n_cat·K_l) | numericals | pooled specific attention (K_g)]
//! ```

mod attention;
mod embedding;
mod encode;
mod record;
mod schema;

use std::rc::Rc;

pub use attention::AttentionParams;
pub use embedding::{DualEmbedding, DualVectors, TableSlot, EMBEDDING_INIT_STD};
pub use encode::{encode_record, EncodedExample, NumericStats};
pub use record::ExampleRecord;
pub use schema::{FeatureSchema, FieldCategory, FieldKind, FieldSpec, TIMESTAMP_KEY};

#[cfg(test)]
pub(crate) use schema::small_schema;

use crate::error::Result;
use crate::numerics::{init, ParamId, ParamKind, ParamStore, Session, Tensor, Var};

#[derive(Clone, Debug)]
struct SpecificAttention {
    /// `K_l × K_g` lift applied to specific sequence embeddings.
    projection: ParamId,
    attention: AttentionParams,
}

/// Embedding tables and attention blocks producing the two feature vectors.
#[derive(Clone, Debug)]
pub struct FeatureModule {
    pub schema: FeatureSchema,
    pub embedding: DualEmbedding,
    global_attention: Option<AttentionParams>,
    specific_attention: Option<SpecificAttention>,
}

pub struct FeatureVectors {
    /// `[B × independent_width]`.
    pub independent: Var,
    /// `[B × dependent_width]`; absent for global-only models.
    pub dependent: Option<Var>,
}

impl FeatureModule {
    pub fn new(
        schema: &FeatureSchema,
        store: &mut ParamStore,
        seed: u64,
        heads: usize,
        with_specific: bool,
        prefix: &str,
    ) -> Result<Self> {
        schema.validate()?;
        let embedding = DualEmbedding::new(schema, store, seed, with_specific, prefix)?;
        let (kg, kl) = (schema.global_dim, schema.specific_dim);
        let mut global_attention = None;
        let mut specific_attention = None;
        if schema.has_sequence() {
            global_attention = Some(AttentionParams::new(
                store,
                seed,
                &format!("{prefix}attn.global"),
                kg,
                heads,
            )?);
            if with_specific {
                let pname = format!("{prefix}attn.specific.lift");
                let projection = store.insert(
                    pname.clone(),
                    init::xavier_uniform(seed, &pname, kl, kg),
                    ParamKind::Dense,
                )?;
                let attention = AttentionParams::new(store, seed, &format!("{prefix}attn.specific"), kg, heads)?;
                specific_attention = Some(SpecificAttention { projection, attention });
            }
        }
        Ok(Self {
            schema: schema.clone(),
            embedding,
            global_attention,
            specific_attention,
        })
    }

    pub fn has_specific(&self) -> bool {
        self.embedding.has_specific()
    }

    pub fn independent_width(&self) -> usize {
        self.schema.independent_width()
    }

    pub fn dependent_width(&self) -> usize {
        self.schema.dependent_width()
    }

    pub fn global_attention(&self) -> Option<&AttentionParams> {
        self.global_attention.as_ref()
    }

    pub fn specific_attention(&self) -> Option<(&AttentionParams, ParamId)> {
        self.specific_attention.as_ref().map(|s| (&s.attention, s.projection))
    }

    pub fn build(&self, sess: &mut Session, batch: &[&EncodedExample]) -> Result<FeatureVectors> {
        let b = batch.len();
        let len = self.schema.max_seq_len;
        let emb = self.embedding.embed(sess, batch)?;
        let numerics = if self.schema.num_numerical() > 0 {
            let data: Vec<f64> = batch.iter().flat_map(|e| e.numerics.iter().copied()).collect();
            Some(
                sess.tape
                    .constant(Tensor::matrix(b, self.schema.num_numerical(), data)?),
            )
        } else {
            None
        };
        let mask = Rc::new(batch.iter().flat_map(|e| e.mask.iter().copied()).collect::<Vec<_>>());

        let mut pooled_global = None;
        let mut pooled_specific = None;
        if let (Some(attn), Some(seq_g)) = (&self.global_attention, emb.seq_global) {
            let out = attn.forward(sess, seq_g, seq_g, seq_g, mask.clone(), b, len)?;
            pooled_global = Some(sess.tape.masked_mean_pool(out, mask.clone(), b, len)?);
            if let (Some(spec), Some(seq_l)) = (&self.specific_attention, emb.seq_specific) {
                let lift = sess.param(spec.projection);
                let lifted = sess.tape.matmul(seq_l, lift)?;
                let out = spec
                    .attention
                    .forward(sess, lifted, lifted, seq_g, mask.clone(), b, len)?;
                pooled_specific = Some(sess.tape.masked_mean_pool(out, mask, b, len)?);
            }
        }

        let mut parts = emb.global_fields.clone();
        parts.extend(numerics);
        parts.extend(pooled_global);
        let independent = sess.tape.concat_cols(&parts)?;

        let dependent = if self.has_specific() {
            let mut parts = emb.specific_fields.clone();
            parts.extend(numerics);
            parts.extend(pooled_specific);
            Some(sess.tape.concat_cols(&parts)?)
        } else {
            None
        };
        Ok(FeatureVectors { independent, dependent })
    }
}
