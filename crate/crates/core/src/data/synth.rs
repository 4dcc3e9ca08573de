//! Synthetic multi-scenario click logs.
//!
//! Users and items carry latent vectors in `R^D`, drawn around cluster
//! centers (user groups, item categories). Each scenario `s` owns a
//! preference vector `w_s`; the preference vectors are constructed so that
//! `cos(w_s, w_t)` equals the requested similarity exactly. For a user `u`
//! shown item `v` in scenario `s`:
//!
//! ```text
//! z = sharpness · (a·(u·v) + b_s·Σ_k w_sk u_k v_k) / (√D · √(a² + b_s²))
//! p = sigmoid(z)
//! ```
//!
//! The label is drawn from `p` and flipped with probability `noise_rate`.
//! Users belong to exactly one scenario; items are shared. Behavior
//! sequences hold the user's most recent positive items, newest first.
//! Item latents are centered over the catalogue, so `z` has mean zero for
//! every user and the positive rate sits near 1/2.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::format::Dataset;
use crate::error::{Result, SamlError};
use crate::features::{ExampleRecord, FeatureSchema, FieldCategory, FieldSpec};
use crate::numerics::{init, sigmoid};

const DAY: i64 = 86_400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_scenarios: usize,
    /// Traffic per scenario, train and test together.
    pub samples_per_scenario: Vec<usize>,
    pub latent_dim: usize,
    /// Target cosine similarity between scenario preference vectors.
    pub similarity: Vec<Vec<f64>>,
    pub shared_weight: f64,
    pub scenario_weights: Vec<f64>,
    pub sharpness: f64,
    pub noise_rate: f64,
    pub num_users: usize,
    pub num_items: usize,
    pub num_user_groups: usize,
    pub num_item_categories: usize,
    /// Share of latent variance explained by the cluster center.
    pub cluster_strength: f64,
    pub max_seq_len: usize,
    pub global_dim: usize,
    pub specific_dim: usize,
    pub days: u32,
    /// Leading days that form the training split.
    pub train_days: u32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// Five scenarios with long-tailed traffic (one large, two medium, two
    /// small) and similarities `0.7^|i-j|`.
    fn default() -> Self {
        let n = 5;
        Self {
            num_scenarios: n,
            samples_per_scenario: vec![4000, 1200, 1200, 400, 400],
            latent_dim: 8,
            similarity: (0..n)
                .map(|i| (0..n).map(|j| 0.7f64.powi((i as i32 - j as i32).abs())).collect())
                .collect(),
            shared_weight: 1.0,
            scenario_weights: vec![1.0; n],
            sharpness: 4.0,
            noise_rate: 0.05,
            num_users: 1000,
            num_items: 500,
            num_user_groups: 10,
            num_item_categories: 20,
            cluster_strength: 0.7,
            max_seq_len: 10,
            global_dim: 8,
            specific_dim: 4,
            days: 8,
            train_days: 7,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SamlError::Validation(m));
        let n = self.num_scenarios;
        if n == 0 {
            return bad("num_scenarios must be at least 1".into());
        }
        if self.samples_per_scenario.len() != n || self.samples_per_scenario.contains(&0) {
            return bad(format!(
                "samples_per_scenario needs {n} entries, each at least 1, got {:?}",
                self.samples_per_scenario
            ));
        }
        if self.scenario_weights.len() != n || self.scenario_weights.iter().any(|w| !w.is_finite()) {
            return bad(format!("scenario_weights needs {n} finite entries"));
        }
        if self.similarity.len() != n || self.similarity.iter().any(|r| r.len() != n) {
            return bad(format!("similarity must be {n}×{n}"));
        }
        for i in 0..n {
            if (self.similarity[i][i] - 1.0).abs() > 1e-9 {
                return bad(format!("similarity[{i}][{i}] must be 1"));
            }
            for j in 0..n {
                let (a, b) = (self.similarity[i][j], self.similarity[j][i]);
                if !a.is_finite() || (a - b).abs() > 1e-9 || a.abs() > 1.0 {
                    return bad(format!(
                        "similarity must be symmetric with entries in [-1, 1] (entry {i},{j})"
                    ));
                }
            }
        }
        if self.latent_dim < n {
            return bad(format!(
                "latent_dim {} cannot host {n} preference vectors with arbitrary similarity",
                self.latent_dim
            ));
        }
        if !(0.0..=0.5).contains(&self.noise_rate) {
            return bad(format!("noise_rate {} outside [0, 0.5]", self.noise_rate));
        }
        if !(self.sharpness.is_finite() && self.sharpness > 0.0) {
            return bad("sharpness must be positive".into());
        }
        if !self.shared_weight.is_finite()
            || self.shared_weight.abs() + self.scenario_weights.iter().map(|w| w.abs()).fold(0.0, f64::max) == 0.0
        {
            return bad("shared_weight and scenario_weights cannot all be zero".into());
        }
        if self.num_users < n || self.num_items == 0 {
            return bad("need at least one user per scenario and one item".into());
        }
        if self.num_user_groups == 0
            || self.num_user_groups > self.num_users
            || self.num_item_categories == 0
            || self.num_item_categories > self.num_items
        {
            return bad("cluster counts must lie in [1, population]".into());
        }
        if !(0.0..=1.0).contains(&self.cluster_strength) {
            return bad("cluster_strength outside [0, 1]".into());
        }
        if self.max_seq_len == 0 || self.days == 0 || self.train_days >= self.days {
            return bad("need max_seq_len ≥ 1 and 1 ≤ days with train_days < days".into());
        }
        Ok(())
    }

    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema {
            fields: vec![
                FieldSpec::categorical("user_id", FieldCategory::UserProfile, self.num_users),
                FieldSpec::categorical("user_group", FieldCategory::UserProfile, self.num_user_groups),
                FieldSpec::numerical("user_activity", FieldCategory::UserProfile),
                FieldSpec::categorical("item_id", FieldCategory::ItemProfile, self.num_items),
                FieldSpec::categorical("item_cat", FieldCategory::ItemProfile, self.num_item_categories),
                FieldSpec::sequence("hist_item", self.num_items, Some("item_id")),
                FieldSpec::sequence("hist_cat", self.num_item_categories, Some("item_cat")),
                FieldSpec::categorical("scenario", FieldCategory::Context, self.num_scenarios),
            ],
            scenario_field: "scenario".into(),
            num_scenarios: self.num_scenarios,
            max_seq_len: self.max_seq_len,
            global_dim: self.global_dim,
            specific_dim: self.specific_dim,
        }
    }
}

/// Scenario preference vectors of length `D` with pairwise cosines equal to
/// `spec.similarity` and squared norm `D`.
pub fn preference_vectors(spec: &SyntheticSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let n = spec.num_scenarios;
    let d = spec.latent_dim;
    let c = DMatrix::from_fn(n, n, |i, j| spec.similarity[i][j]);
    let eig = SymmetricEigen::new(c);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-9 {
        return Err(SamlError::Validation(format!(
            "similarity matrix is not positive semidefinite (smallest eigenvalue {min:.3e})"
        )));
    }
    // C = L Lᵀ with L = V·diag(√λ)
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let l = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt);
    // random orthonormal N-frame in R^D
    let mut rng = init::stream(spec.seed, "synth.preferences");
    let g = DMatrix::<f64>::from_fn(d, n, |_, _| StandardNormal.sample(&mut rng));
    let q = g.qr().q();
    let scale = (d as f64).sqrt();
    Ok((0..n)
        .map(|s| {
            let row = l.row(s);
            let norm = row.norm();
            let w: nalgebra::DVector<f64> = &q * row.transpose() / norm;
            w.iter().map(|x| x * scale).collect()
        })
        .collect())
}

fn normal_vec(rng: &mut impl Rng, d: usize, std: f64) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            x * std
        })
        .collect()
}

fn center(rows: &mut [Vec<f64>]) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    for k in 0..d {
        let m = rows.iter().map(|r| r[k]).sum::<f64>() / n;
        for r in rows.iter_mut() {
            r[k] -= m;
        }
    }
}

/// Latent state behind a synthetic dataset.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub spec: SyntheticSpec,
    pub preferences: Vec<Vec<f64>>,
    pub users: Vec<Vec<f64>>,
    pub user_group: Vec<usize>,
    pub user_activity: Vec<f64>,
    /// Users of each scenario.
    pub scenario_users: Vec<Vec<usize>>,
    pub items: Vec<Vec<f64>>,
    pub item_cat: Vec<usize>,
}

impl SyntheticWorld {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        let preferences = preference_vectors(spec)?;
        let d = spec.latent_dim;
        let rho = spec.cluster_strength;
        let mut rng = init::stream(spec.seed, "synth.latents");

        let mut group_centers: Vec<Vec<f64>> = (0..spec.num_user_groups)
            .map(|_| normal_vec(&mut rng, d, rho.sqrt()))
            .collect();
        let mut cat_centers: Vec<Vec<f64>> = (0..spec.num_item_categories)
            .map(|_| normal_vec(&mut rng, d, rho.sqrt()))
            .collect();
        center(&mut group_centers);
        center(&mut cat_centers);

        let user_group: Vec<usize> = (0..spec.num_users)
            .map(|_| rng.random_range(0..spec.num_user_groups))
            .collect();
        let users: Vec<Vec<f64>> = user_group
            .iter()
            .map(|&g| {
                let noise = normal_vec(&mut rng, d, (1.0 - rho).sqrt());
                group_centers[g].iter().zip(noise).map(|(c, e)| c + e).collect()
            })
            .collect();
        let user_activity = users
            .iter()
            .map(|u| {
                let e: f64 = StandardNormal.sample(&mut rng);
                (u.iter().map(|x| x * x).sum::<f64>() / d as f64).sqrt() + 0.1 * e
            })
            .collect();

        let item_cat: Vec<usize> = (0..spec.num_items)
            .map(|_| rng.random_range(0..spec.num_item_categories))
            .collect();
        let mut items: Vec<Vec<f64>> = item_cat
            .iter()
            .map(|&c| {
                let noise = normal_vec(&mut rng, d, (1.0 - rho).sqrt());
                cat_centers[c].iter().zip(noise).map(|(a, e)| a + e).collect()
            })
            .collect();
        center(&mut items);

        // users split across scenarios in proportion to traffic, at least one each
        let total: usize = spec.samples_per_scenario.iter().sum();
        let n = spec.num_scenarios;
        let mut quota: Vec<usize> = spec
            .samples_per_scenario
            .iter()
            .map(|&c| ((spec.num_users as f64 * c as f64 / total as f64).floor() as usize).max(1))
            .collect();
        while quota.iter().sum::<usize>() > spec.num_users {
            let i = (0..n).max_by_key(|&i| quota[i]).expect("n ≥ 1");
            quota[i] -= 1;
        }
        let mut k = 0;
        while quota.iter().sum::<usize>() < spec.num_users {
            quota[k % n] += 1;
            k += 1;
        }
        let mut perm: Vec<usize> = (0..spec.num_users).collect();
        perm.shuffle(&mut rng);
        let mut scenario_users = Vec::with_capacity(n);
        let mut start = 0;
        for q in quota {
            let mut us = perm[start..start + q].to_vec();
            us.sort_unstable();
            scenario_users.push(us);
            start += q;
        }

        Ok(Self {
            spec: spec.clone(),
            preferences,
            users,
            user_group,
            user_activity,
            scenario_users,
            items,
            item_cat,
        })
    }

    /// Noise-free click probability.
    pub fn click_probability(&self, scenario: usize, user: usize, item: usize) -> f64 {
        let (u, v, w) = (&self.users[user], &self.items[item], &self.preferences[scenario]);
        let a = self.spec.shared_weight;
        let b = self.spec.scenario_weights[scenario];
        let mut shared = 0.0;
        let mut specific = 0.0;
        for k in 0..u.len() {
            shared += u[k] * v[k];
            specific += w[k] * u[k] * v[k];
        }
        let norm = (u.len() as f64).sqrt() * (a * a + b * b).sqrt();
        sigmoid(self.spec.sharpness * (a * shared + b * specific) / norm)
    }

    /// Probability that an observed label is 1 in scenario `s`, averaged
    /// over its users and the whole catalogue.
    pub fn expected_scenario_rate(&self, scenario: usize) -> f64 {
        let eps = self.spec.noise_rate;
        let users = &self.scenario_users[scenario];
        let mut acc = 0.0;
        for &u in users {
            for v in 0..self.items.len() {
                let p = self.click_probability(scenario, u, v);
                acc += (1.0 - eps) * p + eps * (1.0 - p);
            }
        }
        acc / (users.len() * self.items.len()) as f64
    }

    /// Traffic-weighted expectation of the positive rate.
    pub fn expected_positive_rate(&self) -> f64 {
        let counts = &self.spec.samples_per_scenario;
        let total: usize = counts.iter().sum();
        (0..self.spec.num_scenarios)
            .map(|s| self.expected_scenario_rate(s) * counts[s] as f64)
            .sum::<f64>()
            / total as f64
    }

    pub fn sample(&self) -> Result<Dataset> {
        let spec = &self.spec;
        let mut rng = init::stream(spec.seed, "synth.samples");
        let horizon = i64::from(spec.days) * DAY;
        let mut events: Vec<(i64, usize)> = Vec::with_capacity(spec.samples_per_scenario.iter().sum());
        for (s, &count) in spec.samples_per_scenario.iter().enumerate() {
            for _ in 0..count {
                events.push((rng.random_range(0..horizon), s));
            }
        }
        events.sort_by_key(|&(ts, _)| ts);

        let mut history: Vec<Vec<usize>> = vec![Vec::new(); spec.num_users];
        let mut records = Vec::with_capacity(events.len());
        for (ts, s) in events {
            let pool = &self.scenario_users[s];
            let user = pool[rng.random_range(0..pool.len())];
            let item = rng.random_range(0..spec.num_items);
            let p = self.click_probability(s, user, item);
            let mut label = u8::from(rng.random::<f64>() < p);
            if rng.random::<f64>() < spec.noise_rate {
                label = 1 - label;
            }
            let behavior = history[user]
                .iter()
                .rev()
                .take(spec.max_seq_len)
                .map(|&h| {
                    [
                        ("hist_item".to_string(), h as u64),
                        ("hist_cat".to_string(), self.item_cat[h] as u64),
                    ]
                    .into_iter()
                    .collect()
                })
                .collect();
            records.push(ExampleRecord {
                categorical: [
                    ("user_id".to_string(), user as u64),
                    ("user_group".to_string(), self.user_group[user] as u64),
                    ("item_id".to_string(), item as u64),
                    ("item_cat".to_string(), self.item_cat[item] as u64),
                ]
                .into_iter()
                .collect(),
                numerical: [("user_activity".to_string(), self.user_activity[user])]
                    .into_iter()
                    .collect(),
                behavior,
                scenario: s,
                ts,
                label,
            });
            if label == 1 {
                history[user].push(item);
            }
        }
        Ok(Dataset {
            schema: spec.schema(),
            records,
            split_ts: i64::from(spec.train_days) * DAY,
        })
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    SyntheticWorld::new(spec)?.sample()
}
