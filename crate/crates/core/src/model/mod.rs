//! Scenario-mutual network and its ablations.
//!
//! A batch is first stably sorted by scenario so each scenario's samples form
//! one contiguous row group. Features are built once for the whole batch.
//! The auxiliary MLP reads the scenario-independent vector; its hidden
//! outputs are injected (as constants) into the matching layer of every
//! branch. For a group owned by scenario `s`, all `N` branches run up to the
//! mutual layer, branch `s` mixes in its neighbours, and only branch `s`
//! continues to its head.

mod branch;
mod checkpoint;
mod config;
mod loss;
mod mlp;
mod mutual;

pub use branch::BranchNetwork;
pub use checkpoint::{CheckpointFile, ParamRecord, CHECKPOINT_FORMAT};
pub use config::{make_variant, ModelConfig, VariantKind};
pub use loss::{log_loss, loss_vars, total_loss, LossReport, LossVars, Reduction};
pub use mlp::{Dense, Mlp, MlpOutput};
pub use mutual::{MixOutput, MutualUnit};

use std::ops::Range;

use crate::error::{Result, SamlError};
use crate::features::{EncodedExample, FeatureModule, FeatureSchema, NumericStats};
use crate::numerics::{Adam, Gradients, ParamId, ParamStore, Session, Tape, Var};

#[derive(Clone, Debug)]
enum Body {
    Saml {
        features: FeatureModule,
        aux: Option<Mlp>,
        branches: BranchNetwork,
        mutual: Option<MutualUnit>,
    },
    Unified {
        features: FeatureModule,
        mlp: Mlp,
    },
    Individual {
        members: Vec<(FeatureModule, Mlp)>,
    },
}

/// Contiguous rows of a scenario-sorted batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScenarioGroup {
    pub scenario: usize,
    pub start: usize,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Also run every non-owning branch to its head (inspection only).
    pub all_branches: bool,
}

/// Tape nodes of one forward pass, rows in scenario-sorted order.
pub struct ForwardOutput {
    /// `order[k]` is the caller's index of sorted row `k`.
    pub order: Vec<usize>,
    pub groups: Vec<ScenarioGroup>,
    /// `[B × 1]` owning-branch probability.
    pub owner_prob: Var,
    pub aux_prob: Option<Var>,
    /// Per branch `[B × 1]`, when requested.
    pub branch_probs: Option<Vec<Var>>,
    /// Per group `[count × (N-1)]`.
    pub alpha: Vec<Option<Var>>,
    /// Per group `[count × 1]`.
    pub gate: Vec<Option<Var>>,
}

/// Mutual-unit coefficients of the owning branch for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MutualSample {
    /// Length `N`, zero at the owning branch.
    pub alpha: Vec<f64>,
    pub gate: f64,
}

/// Prediction in the caller's sample order.
#[derive(Clone, Debug, Default)]
pub struct Prediction {
    pub prob: Vec<f64>,
    pub aux_prob: Option<Vec<f64>>,
    /// `branch_probs[t][i]`, when requested.
    pub branch_probs: Option<Vec<Vec<f64>>>,
    pub mutual: Option<Vec<MutualSample>>,
}

#[derive(Clone, Debug)]
pub struct SamlModel {
    config: ModelConfig,
    schema: FeatureSchema,
    pub store: ParamStore,
    pub numeric_stats: NumericStats,
    body: Body,
}

impl SamlModel {
    /// Builds and initializes a model. Embedding widths in `config` override
    /// those of `schema`.
    pub fn new(schema: &FeatureSchema, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut schema = schema.clone();
        if let Some(k) = config.global_dim {
            schema.global_dim = k;
        }
        if let Some(k) = config.specific_dim {
            schema.specific_dim = k;
        }
        schema.validate()?;
        let mut store = ParamStore::new();
        let seed = config.seed;
        let n = schema.num_scenarios;
        let hidden = &config.hidden;
        let variant = config.variant;
        let body = match variant {
            VariantKind::Full | VariantKind::NoGate | VariantKind::NoAux => {
                let features = FeatureModule::new(&schema, &mut store, seed, config.heads, true, "")?;
                let (ind, dep) = (features.independent_width(), features.dependent_width());
                let aux = if variant.has_aux() {
                    Some(Mlp::new(&mut store, seed, "aux", ind, hidden)?)
                } else {
                    None
                };
                let input = if aux.is_some() { dep } else { ind + dep };
                let aux_widths = aux.as_ref().map(|_| hidden.as_slice());
                let branches = BranchNetwork::new(&mut store, seed, "", n, input, hidden, aux_widths)?;
                let mutual = if variant.has_mutual() && n >= 2 {
                    let l = config.mutual_layer;
                    Some(MutualUnit::new(
                        &mut store,
                        seed,
                        "",
                        n,
                        hidden[l - 1],
                        l,
                        config.gate_bias_init,
                    )?)
                } else {
                    None
                };
                Body::Saml {
                    features,
                    aux,
                    branches,
                    mutual,
                }
            }
            VariantKind::NoGateMut | VariantKind::UnifiedBaseline => {
                let specific = variant.has_specific_features();
                let features = FeatureModule::new(&schema, &mut store, seed, config.heads, specific, "")?;
                let mut input = features.independent_width();
                if specific {
                    input += features.dependent_width();
                }
                let mlp = Mlp::new(&mut store, seed, "mlp", input, hidden)?;
                Body::Unified { features, mlp }
            }
            VariantKind::IndividualBaseline => {
                let mut members = Vec::with_capacity(n);
                for s in 0..n {
                    let prefix = format!("member{s}.");
                    let features = FeatureModule::new(&schema, &mut store, seed, config.heads, false, &prefix)?;
                    let mlp = Mlp::new(
                        &mut store,
                        seed,
                        &format!("{prefix}mlp"),
                        features.independent_width(),
                        hidden,
                    )?;
                    members.push((features, mlp));
                }
                Body::Individual { members }
            }
        };
        let numeric_stats = NumericStats::identity(schema.num_numerical());
        Ok(Self {
            config: config.clone(),
            schema,
            store,
            numeric_stats,
            body,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> VariantKind {
        self.config.variant
    }

    /// Schema with the model's embedding widths.
    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn num_scenarios(&self) -> usize {
        self.schema.num_scenarios
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Number of scalar output heads.
    pub fn num_heads(&self) -> usize {
        match &self.body {
            Body::Saml { branches, .. } => branches.branches(),
            Body::Unified { .. } => 1,
            Body::Individual { members } => members.len(),
        }
    }

    pub fn mutual(&self) -> Option<&MutualUnit> {
        match &self.body {
            Body::Saml { mutual, .. } => mutual.as_ref(),
            _ => None,
        }
    }

    pub fn aux(&self) -> Option<&Mlp> {
        match &self.body {
            Body::Saml { aux, .. } => aux.as_ref(),
            _ => None,
        }
    }

    pub fn branches(&self) -> Option<&BranchNetwork> {
        match &self.body {
            Body::Saml { branches, .. } => Some(branches),
            _ => None,
        }
    }

    /// Forces every mutual gate to `g` (or restores learned gates). No effect
    /// on variants without a mutual unit.
    pub fn set_gate_override(&mut self, g: Option<f64>) {
        if let Body::Saml { mutual: Some(m), .. } = &mut self.body {
            m.gate_override = g;
        }
    }

    /// Parameters whose names start with any of `prefixes`.
    pub fn params_with_prefix(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| prefixes.iter().any(|pre| p.name.starts_with(pre)))
            .map(|(id, _)| id)
            .collect()
    }

    /// Layer, head, and gate parameters private to branch `i`.
    pub fn branch_params(&self, i: usize) -> Vec<ParamId> {
        self.params_with_prefix(&[&format!("branch{i}."), &format!("mutual.gate{i}.")])
    }

    fn groups(&self, batch: &[&EncodedExample]) -> Result<(Vec<usize>, Vec<ScenarioGroup>)> {
        if batch.is_empty() {
            return Err(SamlError::Contract("forward over an empty batch".into()));
        }
        let n = self.num_scenarios();
        if let Some(e) = batch.iter().find(|e| e.scenario >= n) {
            return Err(SamlError::Contract(format!("scenario {} outside 0..{n}", e.scenario)));
        }
        let mut order: Vec<usize> = (0..batch.len()).collect();
        order.sort_by_key(|&i| batch[i].scenario);
        let mut groups: Vec<ScenarioGroup> = Vec::new();
        for (k, &i) in order.iter().enumerate() {
            let s = batch[i].scenario;
            match groups.last_mut() {
                Some(g) if g.scenario == s => g.count += 1,
                _ => groups.push(ScenarioGroup {
                    scenario: s,
                    start: k,
                    count: 1,
                }),
            }
        }
        Ok((order, groups))
    }

    /// Records the forward pass on `sess`. All parameters are read through
    /// `sess.store`, so a perturbed copy of the store may be substituted.
    pub fn forward(
        &self,
        sess: &mut Session,
        batch: &[&EncodedExample],
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let (order, groups) = self.groups(batch)?;
        let sorted: Vec<&EncodedExample> = order.iter().map(|&i| batch[i]).collect();
        let ng = groups.len();
        let mut aux_prob = None;
        let mut branch_probs = None;
        let mut alpha = vec![None; ng];
        let mut gate = vec![None; ng];
        let mut group_probs = Vec::with_capacity(ng);
        match &self.body {
            Body::Saml {
                features,
                aux,
                branches,
                mutual,
            } => {
                let fv = features.build(sess, &sorted)?;
                let dep = fv
                    .dependent
                    .ok_or_else(|| SamlError::Contract("branch model without dependent features".into()))?;
                let mut aux_hidden = None;
                if let Some(aux) = aux {
                    let a = aux.forward(sess, fv.independent)?;
                    aux_prob = Some(sess.tape.sigmoid(a.logit));
                    aux_hidden = Some(
                        a.hiddens
                            .iter()
                            .map(|&h| sess.tape.stop_gradient(h))
                            .collect::<Vec<_>>(),
                    );
                }
                let x = if aux.is_some() {
                    dep
                } else {
                    sess.tape.concat_cols(&[fv.independent, dep])?
                };
                let n = branches.branches();
                let depth = branches.depth();
                let mut all: Vec<Vec<Var>> = vec![Vec::with_capacity(ng); n];
                for (gi, g) in groups.iter().enumerate() {
                    let xs = row_slice(sess, x, g, ng)?;
                    let aux_s = match &aux_hidden {
                        Some(hs) => Some(
                            hs.iter()
                                .map(|&h| row_slice(sess, h, g, ng))
                                .collect::<Result<Vec<_>>>()?,
                        ),
                        None => None,
                    };
                    let aux_s = aux_s.as_deref();
                    let s = g.scenario;
                    let run = |sess: &mut Session, i: usize, layers: Range<usize>, h: Var| -> Result<Var> {
                        let mut h = h;
                        for l in layers {
                            h = branches.layer(sess, i, l, h, aux_s.map(|a| a[l]))?;
                        }
                        Ok(h)
                    };
                    let finish = |sess: &mut Session, i: usize, h: Var| -> Result<Var> {
                        let logit = branches.head(sess, i, h)?;
                        Ok(sess.tape.sigmoid(logit))
                    };
                    let targets: Vec<usize> = if opts.all_branches { (0..n).collect() } else { vec![s] };
                    match mutual {
                        Some(mu) => {
                            let l = mu.layer;
                            let states = (0..n).map(|i| run(sess, i, 0..l, xs)).collect::<Result<Vec<_>>>()?;
                            for &i in &targets {
                                let mix = mu.mix_row(sess, &states, i, s)?;
                                let h = run(sess, i, l..depth, mix.mixed)?;
                                let p = finish(sess, i, h)?;
                                if i == s {
                                    alpha[gi] = mix.alpha;
                                    gate[gi] = mix.gate;
                                    group_probs.push(p);
                                }
                                if opts.all_branches {
                                    all[i].push(p);
                                }
                            }
                        }
                        None => {
                            for &i in &targets {
                                let h = run(sess, i, 0..depth, xs)?;
                                let p = finish(sess, i, h)?;
                                if i == s {
                                    group_probs.push(p);
                                }
                                if opts.all_branches {
                                    all[i].push(p);
                                }
                            }
                        }
                    }
                }
                if opts.all_branches {
                    branch_probs = Some(all.iter().map(|ps| concat(sess, ps)).collect::<Result<Vec<_>>>()?);
                }
            }
            Body::Unified { features, mlp } => {
                let fv = features.build(sess, &sorted)?;
                let x = match fv.dependent {
                    Some(dep) => sess.tape.concat_cols(&[fv.independent, dep])?,
                    None => fv.independent,
                };
                let o = mlp.forward(sess, x)?;
                group_probs.push(sess.tape.sigmoid(o.logit));
            }
            Body::Individual { members } => {
                for g in &groups {
                    let (features, mlp) = &members[g.scenario];
                    let fv = features.build(sess, &sorted[g.start..g.start + g.count])?;
                    let o = mlp.forward(sess, fv.independent)?;
                    group_probs.push(sess.tape.sigmoid(o.logit));
                }
            }
        }
        let owner_prob = concat(sess, &group_probs)?;
        Ok(ForwardOutput {
            order,
            groups,
            owner_prob,
            aux_prob,
            branch_probs,
            alpha,
            gate,
        })
    }

    /// Forward pass plus loss nodes.
    pub fn loss_on(
        &self,
        sess: &mut Session,
        batch: &[&EncodedExample],
        reduction: Reduction,
    ) -> Result<(LossVars, ForwardOutput)> {
        let fwd = self.forward(sess, batch, ForwardOptions::default())?;
        let labels: Vec<f64> = fwd.order.iter().map(|&i| f64::from(batch[i].label)).collect();
        let lv = loss_vars(
            sess.tape,
            fwd.owner_prob,
            fwd.aux_prob,
            &labels,
            self.config.aux_loss_weight,
            reduction,
        )?;
        Ok((lv, fwd))
    }

    /// Loss report and gradients of the total loss for one batch.
    pub fn gradients(&self, batch: &[&EncodedExample], reduction: Reduction) -> Result<(LossReport, Gradients)> {
        let mut tape = Tape::new();
        let mut sess = Session::new(&mut tape, &self.store);
        let (lv, fwd) = self.loss_on(&mut sess, batch, reduction)?;
        let mut counts = vec![0; self.num_scenarios()];
        for g in &fwd.groups {
            counts[g.scenario] = g.count;
        }
        let report = LossReport {
            target: tape.value(lv.target).item(),
            aux: lv.aux.map_or(0.0, |a| tape.value(a).item()),
            total: tape.value(lv.total).item(),
            per_scenario_counts: counts,
        };
        let grads = tape.backward(lv.total)?;
        Ok((report, grads))
    }

    /// One forward, one backward, one optimizer step.
    pub fn train_step(&mut self, batch: &[&EncodedExample], adam: &mut Adam) -> Result<LossReport> {
        let (report, grads) = self.gradients(batch, Reduction::Mean)?;
        adam.step(&mut self.store, &grads)?;
        Ok(report)
    }

    /// Owning-branch probabilities in the caller's order.
    pub fn predict(&self, batch: &[&EncodedExample]) -> Result<Vec<f64>> {
        Ok(self.predict_detailed(batch, false)?.prob)
    }

    /// Probabilities with auxiliary outputs and mutual coefficients.
    pub fn predict_detailed(&self, batch: &[&EncodedExample], all_branches: bool) -> Result<Prediction> {
        if batch.is_empty() {
            return Ok(Prediction::default());
        }
        let mut tape = Tape::new();
        let mut sess = Session::new(&mut tape, &self.store);
        let fwd = self.forward(&mut sess, batch, ForwardOptions { all_branches })?;
        let b = batch.len();
        let unsort = |v: &[f64]| {
            let mut r = vec![0.0; b];
            for (k, &i) in fwd.order.iter().enumerate() {
                r[i] = v[k];
            }
            r
        };
        let prob = unsort(tape.value(fwd.owner_prob).data());
        let aux_prob = fwd.aux_prob.map(|a| unsort(tape.value(a).data()));
        let branch_probs = fwd.branch_probs.as_ref().map(|bp| {
            let cols: Vec<Vec<f64>> = bp.iter().map(|&v| unsort(tape.value(v).data())).collect();
            (0..b).map(|t| cols.iter().map(|c| c[t]).collect()).collect()
        });
        let n = self.num_scenarios();
        let mutual = if fwd.alpha.iter().all(Option::is_some) && !fwd.alpha.is_empty() {
            let mut rows = vec![
                MutualSample {
                    alpha: Vec::new(),
                    gate: 0.0
                };
                b
            ];
            for (gi, g) in fwd.groups.iter().enumerate() {
                let a = tape.value(fwd.alpha[gi].expect("checked"));
                let gate = tape.value(fwd.gate[gi].expect("set with alpha"));
                for r in 0..g.count {
                    let src = a.row(r);
                    let mut alpha = Vec::with_capacity(n);
                    let mut k = 0;
                    for j in 0..n {
                        if j == g.scenario {
                            alpha.push(0.0);
                        } else {
                            alpha.push(src[k]);
                            k += 1;
                        }
                    }
                    rows[fwd.order[g.start + r]] = MutualSample {
                        alpha,
                        gate: gate.data()[r],
                    };
                }
            }
            Some(rows)
        } else {
            None
        };
        Ok(Prediction {
            prob,
            aux_prob,
            branch_probs,
            mutual,
        })
    }
}

fn row_slice(sess: &mut Session, x: Var, g: &ScenarioGroup, groups: usize) -> Result<Var> {
    if groups == 1 {
        Ok(x)
    } else {
        sess.tape.slice_rows(x, g.start, g.count)
    }
}

fn concat(sess: &mut Session, parts: &[Var]) -> Result<Var> {
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        sess.tape.concat_rows(parts)
    }
}

#[cfg(test)]
mod tests;
