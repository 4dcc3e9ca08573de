use super::encode::EncodedExample;
use super::schema::FeatureSchema;
use crate::error::Result;
use crate::numerics::{init, ParamId, ParamKind, ParamStore, Session, Var};

/// Std of the normal initializer for embedding rows.
pub const EMBEDDING_INIT_STD: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct TableSlot {
    pub vocab: usize,
    /// `(vocab+1) × K_g`.
    pub global: ParamId,
    /// `N·(vocab+1) × K_l`: slice `s` holds scenario `s`.
    pub specific: Option<ParamId>,
}

/// Global and scenario-specific embedding tables for every categorical and
/// sequence field.
#[derive(Clone, Debug)]
pub struct DualEmbedding {
    slots: Vec<TableSlot>,
    cat_slot: Vec<usize>,
    seq_slot: Vec<usize>,
    num_scenarios: usize,
    pub global_dim: usize,
    pub specific_dim: usize,
}

/// Per-field embedding outputs for a batch of `B` examples.
pub struct DualVectors {
    /// `[B × K_g]` per categorical field.
    pub global_fields: Vec<Var>,
    /// `[B × K_l]` per categorical field (empty without specific tables).
    pub specific_fields: Vec<Var>,
    /// `[B·L × K_g]`: sum over sequence fields at each position.
    pub seq_global: Option<Var>,
    /// `[B·L × K_l]`.
    pub seq_specific: Option<Var>,
}

impl DualEmbedding {
    pub fn new(
        schema: &FeatureSchema,
        store: &mut ParamStore,
        seed: u64,
        with_specific: bool,
        prefix: &str,
    ) -> Result<Self> {
        let n = schema.num_scenarios;
        let (kg, kl) = (schema.global_dim, schema.specific_dim);
        let mut slots = Vec::new();
        let mut add_slot = |name: &str, vocab: usize, store: &mut ParamStore| -> Result<usize> {
            let rows = vocab + 1;
            let gname = format!("{prefix}emb.{name}.global");
            let global = store.insert(
                gname.clone(),
                init::embedding_normal(seed, &gname, rows, kg, rows, EMBEDDING_INIT_STD),
                ParamKind::Embedding { rows_per_slice: rows },
            )?;
            let specific = if with_specific {
                let sname = format!("{prefix}emb.{name}.specific");
                Some(store.insert(
                    sname.clone(),
                    init::embedding_normal(seed, &sname, n * rows, kl, rows, EMBEDDING_INIT_STD),
                    ParamKind::Embedding { rows_per_slice: rows },
                )?)
            } else {
                None
            };
            slots.push(TableSlot {
                vocab,
                global,
                specific,
            });
            Ok(slots.len() - 1)
        };
        let mut cat_slot = Vec::new();
        let cat_names: Vec<&str> = schema.categorical().map(|f| f.name.as_str()).collect();
        for f in schema.categorical() {
            cat_slot.push(add_slot(&f.name, f.vocab_size.unwrap_or(0), store)?);
        }
        let mut seq_slot = Vec::new();
        for f in schema.sequences() {
            let slot = match &f.shares_embedding {
                Some(target) => cat_slot[cat_names.iter().position(|n| n == target).expect("validated")],
                None => add_slot(&f.name, f.vocab_size.unwrap_or(0), store)?,
            };
            seq_slot.push(slot);
        }
        Ok(Self {
            slots,
            cat_slot,
            seq_slot,
            num_scenarios: n,
            global_dim: kg,
            specific_dim: kl,
        })
    }

    pub fn slots(&self) -> &[TableSlot] {
        &self.slots
    }

    pub fn has_specific(&self) -> bool {
        self.slots.iter().all(|s| s.specific.is_some())
    }

    /// Slot backing categorical field `i` (schema order).
    pub fn categorical_slot(&self, i: usize) -> &TableSlot {
        &self.slots[self.cat_slot[i]]
    }

    /// Slot backing sequence field `j` (schema order).
    pub fn sequence_slot(&self, j: usize) -> &TableSlot {
        &self.slots[self.seq_slot[j]]
    }

    /// Embeds a batch in both subspaces. Scenario-specific rows come from
    /// slice `scenario` of each specific table.
    pub fn embed(&self, sess: &mut Session, batch: &[&EncodedExample]) -> Result<DualVectors> {
        let mut global_fields = Vec::with_capacity(self.cat_slot.len());
        let mut specific_fields = Vec::new();
        for (i, &slot) in self.cat_slot.iter().enumerate() {
            let s = &self.slots[slot];
            let rows: Vec<usize> = batch.iter().map(|e| e.cat_rows[i]).collect();
            global_fields.push(sess.lookup(s.global, &rows)?);
            if let Some(spec) = s.specific {
                let srows: Vec<usize> = batch
                    .iter()
                    .map(|e| e.scenario * (s.vocab + 1) + e.cat_rows[i])
                    .collect();
                specific_fields.push(sess.lookup(spec, &srows)?);
            }
        }

        let mut seq_global = None;
        let mut seq_specific = None;
        for (j, &slot) in self.seq_slot.iter().enumerate() {
            let s = &self.slots[slot];
            let rows: Vec<usize> = batch.iter().flat_map(|e| e.seq_rows[j].iter().copied()).collect();
            let g = sess.lookup(s.global, &rows)?;
            seq_global = Some(match seq_global {
                None => g,
                Some(acc) => sess.tape.add(acc, g)?,
            });
            if let Some(spec) = s.specific {
                let srows: Vec<usize> = batch
                    .iter()
                    .flat_map(|e| e.seq_rows[j].iter().map(move |&r| e.scenario * (s.vocab + 1) + r))
                    .collect();
                let l = sess.lookup(spec, &srows)?;
                seq_specific = Some(match seq_specific {
                    None => l,
                    Some(acc) => sess.tape.add(acc, l)?,
                });
            }
        }
        Ok(DualVectors {
            global_fields,
            specific_fields,
            seq_global,
            seq_specific,
        })
    }

    pub fn num_scenarios(&self) -> usize {
        self.num_scenarios
    }
}
