//! Training, evaluation, and experiment suites.

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::data::{generate_synthetic, load_dataset, Dataset, EncodedDataset};
use crate::error::{Result, SamlError};
use crate::eval::{per_scenario_table, predict_all, MetricsReport, MutualTrace, ScenarioTable};
use crate::features::NumericStats;
use crate::model::{LossReport, Prediction, SamlModel, VariantKind};
use crate::numerics::Adam;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub target_loss: f64,
    pub aux_loss: f64,
    pub total_loss: f64,
    pub test_auc: Option<f64>,
}

pub struct TrainOutcome {
    pub model: SamlModel,
    pub log: Vec<EpochLog>,
    pub data_hash: String,
}

/// Loads the configured dataset file or generates the configured synthetic
/// data (seeded by the run seed).
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.path {
        Some(p) => load_dataset(p),
        None => {
            let mut spec = cfg.data.synth.clone();
            spec.seed = cfg.seed;
            generate_synthetic(&spec)
        }
    }
}

/// Train and test splits, numericals standardized with train statistics.
pub fn encode_splits(data: &Dataset) -> Result<(NumericStats, EncodedDataset, EncodedDataset)> {
    let train = data.train();
    let stats = NumericStats::fit(&data.schema, train.iter().copied());
    let tr = EncodedDataset::encode(&data.schema, &stats, train)?;
    let te = EncodedDataset::encode(&data.schema, &stats, data.test())?;
    Ok((stats, tr, te))
}

fn subset(data: &EncodedDataset, scenario: usize) -> EncodedDataset {
    EncodedDataset {
        examples: data
            .examples
            .iter()
            .filter(|e| e.scenario == scenario)
            .cloned()
            .collect(),
    }
}

/// Trains `cfg.variant` for `cfg.optim.epochs` epochs, scoring the test
/// split after every epoch. The individual baseline trains each member on
/// its own scenario's batches.
pub fn train(cfg: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, data, |_| {})
}

pub fn train_with(cfg: &RunConfig, data: &Dataset, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train().is_empty() {
        return Err(SamlError::Validation("training split is empty".into()));
    }
    let (stats, train, test) = encode_splits(data)?;
    let mut model = SamlModel::new(&data.schema, &cfg.model_config())?;
    model.numeric_stats = stats;
    let mut adam = Adam::new(cfg.optim.adam());
    let parts: Vec<EncodedDataset> = if cfg.variant == VariantKind::IndividualBaseline {
        (0..data.schema.num_scenarios).map(|s| subset(&train, s)).collect()
    } else {
        vec![train]
    };
    let mut log = Vec::with_capacity(cfg.optim.epochs);
    for epoch in 0..cfg.optim.epochs {
        let mut sums = [0.0f64; 3];
        let mut seen = 0usize;
        for (k, part) in parts.iter().enumerate() {
            let seed = cfg.seed.wrapping_add(k as u64);
            for batch in part.batch_iter(cfg.optim.batch_size, Some(seed), epoch)? {
                let LossReport { target, aux, total, .. } = model.train_step(&batch, &mut adam)?;
                let w = batch.len() as f64;
                sums[0] += target * w;
                sums[1] += aux * w;
                sums[2] += total * w;
                seen += batch.len();
            }
        }
        let test_auc = if test.is_empty() {
            None
        } else {
            evaluate(&model, &test, cfg.optim.eval_batch_size)?.0.overall_auc
        };
        let entry = EpochLog {
            epoch: epoch + 1,
            target_loss: sums[0] / seen as f64,
            aux_loss: sums[1] / seen as f64,
            total_loss: sums[2] / seen as f64,
            test_auc,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome {
        model,
        log,
        data_hash: data.content_hash(),
    })
}

/// Per-scenario table and prediction (with mutual coefficients) on `data`.
pub fn evaluate(model: &SamlModel, data: &EncodedDataset, batch_size: usize) -> Result<(ScenarioTable, Prediction)> {
    let pred = predict_all(model, data, batch_size)?;
    let table = per_scenario_table(&pred.prob, &data.labels(), &data.scenarios())?;
    Ok((table, pred))
}

/// Metrics report and, for models with a mutual unit, the trace.
pub fn report(
    model: &SamlModel,
    data: &EncodedDataset,
    data_hash: &str,
    batch_size: usize,
) -> Result<(MetricsReport, Option<MutualTrace>)> {
    let (table, pred) = evaluate(model, data, batch_size)?;
    let report = MetricsReport::new(model.variant().name(), data_hash, &table);
    let trace = match &pred.mutual {
        Some(_) => {
            let mut t = MutualTrace::new(model.num_scenarios());
            t.accumulate_prediction(&pred, &data.scenarios())?;
            Some(t)
        }
        None => None,
    };
    Ok((report, trace))
}
