use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::RunConfig;
use super::run::{encode_splits, load_data, report, train_with, EpochLog};
use crate::data::{generate_synthetic, load_dataset, Dataset, EncodedDataset, SyntheticSpec};
use crate::error::{Result, SamlError};
use crate::eval::{MetricsReport, MutualTrace};
use crate::model::{SamlModel, VariantKind};

pub const TRAIN_LOG_FORMAT: &str = "saml-trainlog/1";
pub const SUITE_FORMAT: &str = "saml-suite/1";

/// Per-scenario sample and positive counts of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub samples: usize,
    pub train: usize,
    pub test: usize,
    pub scenario_counts: Vec<usize>,
    pub positive_rates: Vec<f64>,
    pub data_hash: String,
}

impl SynthSummary {
    pub fn of(data: &Dataset) -> Self {
        let n = data.schema.num_scenarios;
        let mut pos = vec![0usize; n];
        for r in &data.records {
            pos[r.scenario] += r.label as usize;
        }
        let counts = data.scenario_counts();
        Self {
            samples: data.len(),
            train: data.train().len(),
            test: data.test().len(),
            positive_rates: pos
                .iter()
                .zip(&counts)
                .map(|(&p, &c)| if c == 0 { 0.0 } else { p as f64 / c as f64 })
                .collect(),
            scenario_counts: counts,
            data_hash: data.content_hash(),
        }
    }
}

/// Parses and validates a TOML synthetic spec.
pub fn parse_spec(text: &str) -> Result<SyntheticSpec> {
    let spec: SyntheticSpec = toml::from_str(text).map_err(|e| SamlError::Config(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

/// Reads a spec file; defaults when `path` is `None`.
pub fn load_spec(path: Option<&Path>) -> Result<SyntheticSpec> {
    match path {
        None => Ok(SyntheticSpec::default()),
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| SamlError::Config(format!("cannot read {}: {e}", p.display())))?;
            parse_spec(&text).map_err(|e| match e {
                SamlError::Config(m) => SamlError::Config(format!("{}: {m}", p.display())),
                other => other,
            })
        }
    }
}

/// Generates a dataset from `spec` and writes it to `out`.
pub fn cmd_synth(spec: &SyntheticSpec, out: &Path) -> Result<SynthSummary> {
    let data = generate_synthetic(spec)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    data.write(out)?;
    Ok(SynthSummary::of(&data))
}

/// Files written by a training run.
#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub dir: PathBuf,
    pub report: MetricsReport,
    pub trace: Option<MutualTrace>,
    pub log: Vec<EpochLog>,
}

impl TrainArtifacts {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.json")
    }
}

fn timestamp() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_outputs(dir: &Path, report: &MetricsReport, trace: Option<&MutualTrace>) -> Result<()> {
    fs::write(dir.join("metrics.json"), report.to_json()?)?;
    let trace_path = dir.join("trace.json");
    match trace {
        Some(t) => t.export(&trace_path)?,
        None if trace_path.exists() => fs::remove_file(&trace_path)?,
        None => {}
    }
    Ok(())
}

/// Trains on already loaded data into `dir`: `train.log.jsonl` (one header
/// line carrying the only timestamp, then one line per epoch),
/// `checkpoint.json`, `metrics.json` on the test split, and `trace.json`
/// for variants with a mutual unit.
pub fn train_into(cfg: &RunConfig, data: &Dataset, dir: &Path) -> Result<TrainArtifacts> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let data_hash = data.content_hash();
    let mut log_file = fs::File::create(dir.join("train.log.jsonl"))?;
    let header = json!({
        "format": TRAIN_LOG_FORMAT,
        "started_unix": timestamp(),
        "variant": cfg.variant.name(),
        "seed": cfg.seed,
        "data_hash": data_hash,
    });
    writeln!(log_file, "{header}")?;
    let mut io_err = None;
    let outcome = train_with(cfg, data, |e| {
        let line = serde_json::to_string(e).expect("epoch log serializes");
        if let Err(err) = writeln!(log_file, "{line}").and_then(|_| log_file.flush()) {
            io_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    outcome.model.save(dir.join("checkpoint.json"))?;
    let (_, _, test) = encode_splits(data)?;
    let (report, trace) = report(&outcome.model, &test, &data_hash, cfg.optim.eval_batch_size)?;
    write_outputs(dir, &report, trace.as_ref())?;
    Ok(TrainArtifacts {
        dir: dir.to_path_buf(),
        report,
        trace,
        log: outcome.log,
    })
}

/// Loads or generates the configured data and trains into `cfg.out_dir`.
/// Generated data is also saved there as `data.jsonl`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    fs::create_dir_all(&cfg.out_dir)?;
    if cfg.data.path.is_none() {
        data.write(cfg.out_dir.join("data.jsonl"))?;
    }
    train_into(cfg, &data, &cfg.out_dir)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

/// Scores a checkpoint on a split of a dataset file. Writes `metrics.json`
/// and, for variants with a mutual unit, `trace.json` into `out`.
pub fn cmd_eval(
    checkpoint: &Path,
    data_path: &Path,
    split: Split,
    baseline: Option<&Path>,
    out: &Path,
    batch_size: usize,
) -> Result<(MetricsReport, Option<MutualTrace>)> {
    let model = SamlModel::load(checkpoint)?;
    let data = load_dataset(data_path)?;
    model.schema().check_compatible(&data.schema)?;
    let records = match split {
        Split::Train => data.train(),
        Split::Test => data.test(),
        Split::All => data.records.iter().collect(),
    };
    let encoded = EncodedDataset::encode(model.schema(), &model.numeric_stats, records)?;
    let (mut rep, trace) = report(&model, &encoded, &data.content_hash(), batch_size)?;
    if let Some(b) = baseline {
        let text = fs::read_to_string(b)
            .map_err(|e| SamlError::Config(format!("cannot read baseline report {}: {e}", b.display())))?;
        rep = rep.with_baseline(&MetricsReport::from_json(&text)?)?;
    }
    fs::create_dir_all(out)?;
    write_outputs(out, &rep, trace.as_ref())?;
    Ok((rep, trace))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Ablation,
    PerScenario,
}

/// One trained model in a suite comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub label: String,
    pub variant: String,
    pub data_hash: String,
    pub overall_auc: Option<f64>,
    /// Test AUC per scenario column; `None` where the row does not cover
    /// the scenario or the scenario has a single class.
    pub scenario_auc: Vec<Option<f64>>,
    /// Percent over the unified baseline (ablation suite only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rela_impr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteTable {
    pub format: String,
    pub suite: Suite,
    pub seed: u64,
    pub num_scenarios: usize,
    pub rows: Vec<SuiteRow>,
}

impl SuiteTable {
    pub fn row(&self, label: &str) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Plain-text table for the terminal.
    pub fn render(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |a| format!("{a:.4}"));
        let mut s = format!("{:<24} {:>8}", "model", "overall");
        for c in 0..self.num_scenarios {
            s.push_str(&format!(" {:>8}", format!("s{c}")));
        }
        if self.suite == Suite::Ablation {
            s.push_str(&format!(" {:>9}", "RelaImpr"));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{:<24} {:>8}", r.label, fmt(r.overall_auc)));
            for a in &r.scenario_auc {
                s.push_str(&format!(" {:>8}", fmt(*a)));
            }
            if self.suite == Suite::Ablation {
                let v = r.rela_impr.map_or("-".to_string(), |v| format!("{v:+.2}%"));
                s.push_str(&format!(" {v:>9}"));
            }
            s.push('\n');
        }
        s
    }
}

pub const ABLATION_VARIANTS: [VariantKind; 5] = [
    VariantKind::Full,
    VariantKind::NoGate,
    VariantKind::NoAux,
    VariantKind::NoGateMut,
    VariantKind::UnifiedBaseline,
];

pub const PER_SCENARIO_VARIANTS: [VariantKind; 3] = [
    VariantKind::IndividualBaseline,
    VariantKind::UnifiedBaseline,
    VariantKind::Full,
];

fn scenario_aucs(report: &MetricsReport, n: usize) -> Vec<Option<f64>> {
    (0..n)
        .map(|s| report.scenarios.iter().find(|r| r.scenario == s).and_then(|r| r.auc))
        .collect()
}

/// Trains every suite member on the same data and seed, each into
/// `out/<variant>/`, and writes `out/suite.json`.
///
/// The ablation table has one row per variant with RelaImpr over the
/// unified baseline. The per-scenario table has one row per individual
/// member (covering only its own scenario) followed by the unified baseline
/// and the full model.
pub fn cmd_suite(suite: Suite, cfg: &RunConfig) -> Result<SuiteTable> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    fs::create_dir_all(&cfg.out_dir)?;
    if cfg.data.path.is_none() {
        data.write(cfg.out_dir.join("data.jsonl"))?;
    }
    let n = data.schema.num_scenarios;
    let variants: &[VariantKind] = match suite {
        Suite::Ablation => &ABLATION_VARIANTS,
        Suite::PerScenario => &PER_SCENARIO_VARIANTS,
    };
    let mut runs = Vec::new();
    for &v in variants {
        let mut c = cfg.clone();
        c.variant = v;
        c.out_dir = cfg.out_dir.join(v.name());
        let a = train_into(&c, &data, &c.out_dir)?;
        runs.push((v, a.report));
    }
    let mut rows = Vec::new();
    match suite {
        Suite::Ablation => {
            let base = runs
                .iter()
                .find(|(v, _)| *v == VariantKind::UnifiedBaseline)
                .map(|(_, r)| r.clone())
                .expect("ablation includes the unified baseline");
            for (v, r) in &runs {
                let rela = r
                    .clone()
                    .with_baseline(&base)
                    .ok()
                    .and_then(|r| r.rela_impr)
                    .map(|e| e.value);
                rows.push(SuiteRow {
                    label: v.name().to_string(),
                    variant: v.name().to_string(),
                    data_hash: r.data_hash.clone(),
                    overall_auc: r.overall_auc,
                    scenario_auc: scenario_aucs(r, n),
                    rela_impr: rela,
                });
            }
        }
        Suite::PerScenario => {
            for (v, r) in &runs {
                let aucs = scenario_aucs(r, n);
                if *v == VariantKind::IndividualBaseline {
                    for (s, own) in aucs.iter().enumerate() {
                        rows.push(SuiteRow {
                            label: format!("{}[{s}]", v.name()),
                            variant: v.name().to_string(),
                            data_hash: r.data_hash.clone(),
                            overall_auc: None,
                            scenario_auc: (0..n).map(|t| if t == s { *own } else { None }).collect(),
                            rela_impr: None,
                        });
                    }
                } else {
                    rows.push(SuiteRow {
                        label: v.name().to_string(),
                        variant: v.name().to_string(),
                        data_hash: r.data_hash.clone(),
                        overall_auc: r.overall_auc,
                        scenario_auc: aucs,
                        rela_impr: None,
                    });
                }
            }
        }
    }
    let table = SuiteTable {
        format: SUITE_FORMAT.to_string(),
        suite,
        seed: cfg.seed,
        num_scenarios: n,
        rows,
    };
    fs::write(cfg.out_dir.join("suite.json"), table.to_json()?)?;
    Ok(table)
}
