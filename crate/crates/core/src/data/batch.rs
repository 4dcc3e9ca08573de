use rand::seq::SliceRandom;

use crate::error::{Result, SamlError};
use crate::features::{encode_record, EncodedExample, ExampleRecord, FeatureSchema, NumericStats};
use crate::numerics::init;

/// Index batches for one epoch: a seeded shuffle of `0..n` (identity order
/// when `shuffle_seed` is `None`) cut into chunks of `batch_size`, the last
/// one possibly short.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: Option<u64>, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(SamlError::Config("batch_size must be at least 1".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = init::stream(seed, &format!("epoch{epoch}"));
        idx.shuffle(&mut rng);
    }
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Encoded records ready for batching.
#[derive(Clone, Debug, Default)]
pub struct EncodedDataset {
    pub examples: Vec<EncodedExample>,
}

impl EncodedDataset {
    pub fn encode<'a>(
        schema: &FeatureSchema,
        stats: &NumericStats,
        records: impl IntoIterator<Item = &'a ExampleRecord>,
    ) -> Result<Self> {
        let examples = records
            .into_iter()
            .map(|r| encode_record(schema, stats, r))
            .collect::<Result<_>>()?;
        Ok(Self { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn refs(&self) -> Vec<&EncodedExample> {
        self.examples.iter().collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn scenarios(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.scenario).collect()
    }

    /// Batches of one epoch.
    pub fn batch_iter(
        &self,
        batch_size: usize,
        shuffle_seed: Option<u64>,
        epoch: usize,
    ) -> Result<impl Iterator<Item = Vec<&EncodedExample>> + '_> {
        let batches = batch_indices(self.len(), batch_size, shuffle_seed, epoch)?;
        Ok(batches
            .into_iter()
            .map(move |b| b.into_iter().map(|i| &self.examples[i]).collect()))
    }
}
