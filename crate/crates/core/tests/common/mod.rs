#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saml_core::cli::RunConfig;
use saml_core::data::{generate_synthetic, EncodedDataset, SyntheticSpec};
use saml_core::features::{FeatureSchema, NumericStats};
use saml_core::model::SamlModel;

/// A small generator spec: `n` scenarios, short sequences, tiny vocabularies.
pub fn tiny_spec(n: usize, samples: usize, seed: u64) -> SyntheticSpec {
    let similarity = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.5 }).collect())
        .collect();
    SyntheticSpec {
        num_scenarios: n,
        samples_per_scenario: vec![samples; n],
        latent_dim: n.max(3),
        similarity,
        scenario_weights: vec![1.0; n],
        num_users: 12,
        num_items: 10,
        num_user_groups: 3,
        num_item_categories: 4,
        max_seq_len: 3,
        global_dim: 4,
        specific_dim: 2,
        seed,
        ..SyntheticSpec::default()
    }
}

/// All records of a generated dataset, encoded with identity statistics.
pub fn encoded(spec: &SyntheticSpec) -> (FeatureSchema, EncodedDataset) {
    let data = generate_synthetic(spec).unwrap();
    let stats = NumericStats::identity(data.schema.num_numerical());
    let enc = EncodedDataset::encode(&data.schema, &stats, data.records.iter()).unwrap();
    (data.schema, enc)
}

/// Overwrites every parameter with uniform noise in `[lo, hi)`, keeping
/// embedding padding rows at zero.
pub fn randomize(model: &mut SamlModel, seed: u64, lo: f64, hi: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.store.iter().map(|(id, p)| (id, p.kind)).collect();
    for (id, kind) in ids {
        let t = model.store.value_mut(id);
        let w = t.shape().last().copied().unwrap_or(1);
        for (e, v) in t.data_mut().iter_mut().enumerate() {
            *v = if kind.is_padding_row(e / w) {
                0.0
            } else {
                rng.random_range(lo..hi)
            };
        }
    }
}

/// A small run configuration on generated data.
pub fn quick_config(out: &std::path::Path) -> RunConfig {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/quick.toml")).unwrap();
    let mut cfg = RunConfig::from_toml(&text).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

pub fn config_file(name: &str) -> RunConfig {
    let path = format!("{}/../../configs/{name}", env!("CARGO_MANIFEST_DIR"));
    RunConfig::load(std::path::Path::new(&path)).unwrap()
}
