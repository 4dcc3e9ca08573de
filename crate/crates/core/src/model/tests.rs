use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::features::{encode_record, small_schema, ExampleRecord};
use crate::numerics::{check_param_gradients, cosine, sigmoid, softmax, AdamConfig, Tensor};

fn random_examples(schema: &FeatureSchema, n: usize, seed: u64, scenario: Option<usize>) -> Vec<EncodedExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stats = NumericStats::identity(schema.num_numerical());
    (0..n)
        .map(|_| {
            let len = rng.random_range(0..=schema.max_seq_len);
            let r = ExampleRecord {
                categorical: BTreeMap::from([
                    ("user_id".into(), rng.random_range(0..10)),
                    ("item_id".into(), rng.random_range(0..20)),
                ]),
                numerical: BTreeMap::from([("age".into(), rng.random_range(-1.0..1.0))]),
                behavior: (0..len)
                    .map(|_| BTreeMap::from([("hist_item".to_string(), rng.random_range(0..20))]))
                    .collect(),
                scenario: scenario.unwrap_or_else(|| rng.random_range(0..schema.num_scenarios)),
                ts: 0,
                label: rng.random_range(0..2),
            };
            encode_record(schema, &stats, &r).unwrap()
        })
        .collect()
}

fn tiny(variant: VariantKind) -> ModelConfig {
    ModelConfig {
        variant,
        heads: 2,
        hidden: vec![6, 4],
        seed: 11,
        ..ModelConfig::default()
    }
}

fn refs(xs: &[EncodedExample]) -> Vec<&EncodedExample> {
    xs.iter().collect()
}

fn set(store: &mut ParamStore, id: ParamId, shape: &[usize], data: &[f64]) {
    *store.value_mut(id) = Tensor::new(shape.to_vec(), data.to_vec()).unwrap();
}

// ---- auxiliary network ----

#[test]
fn zero_mlp_gives_half() {
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, 1, "aux", 3, &[2]).unwrap();
    for (id, _) in store
        .iter()
        .map(|(i, p)| (i, p.value.shape().to_vec()))
        .collect::<Vec<_>>()
    {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::zeros(&shape);
    }
    let mut tape = Tape::new();
    let mut sess = Session::new(&mut tape, &store);
    let x = sess
        .tape
        .constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5]).unwrap());
    let out = mlp.forward(&mut sess, x).unwrap();
    let p = sess.tape.sigmoid(out.logit);
    assert_eq!(tape.value(p).data(), &[0.5, 0.5]);
}

#[test]
fn aux_hand_computed_forward() {
    // 3 → 2 → 1.
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, 1, "aux", 3, &[2]).unwrap();
    let l = mlp.layers[0];
    set(&mut store, l.weight, &[3, 2], &[1.0, -1.0, 0.5, 2.0, -0.5, 0.0]);
    set(&mut store, l.bias, &[2], &[0.1, -0.2]);
    set(&mut store, mlp.head.weight, &[2, 1], &[1.5, -0.5]);
    set(&mut store, mlp.head.bias, &[1], &[0.25]);
    let mut tape = Tape::new();
    let mut sess = Session::new(&mut tape, &store);
    let x = sess.tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
    let out = mlp.forward(&mut sess, x).unwrap();
    // h1 = relu(1·1 + 2·0.5 + 3·(-0.5) + 0.1) = relu(0.6) = 0.6
    // h2 = relu(1·(-1) + 2·2 + 3·0 - 0.2) = relu(2.8) = 2.8
    // logit = 0.6·1.5 + 2.8·(-0.5) + 0.25 = -0.25
    let h = tape.value(out.hiddens[0]).data();
    assert!((h[0] - 0.6).abs() < 1e-12 && (h[1] - 2.8).abs() < 1e-12);
    assert!((tape.value(out.logit).item() + 0.25).abs() < 1e-12);
}

#[test]
fn aux_width_mismatch_is_config_error() {
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, 1, "aux", 3, &[2]).unwrap();
    let mut tape = Tape::new();
    let mut sess = Session::new(&mut tape, &store);
    let x = sess.tape.constant(Tensor::zeros(&[1, 4]));
    assert!(matches!(mlp.forward(&mut sess, x), Err(SamlError::Config(_))));
}

#[test]
fn aux_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, 3, "aux", 4, &[5, 3]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = [1.0, 0.0, 1.0];
    let mut targets = Vec::new();
    for (id, p) in store.iter() {
        for e in 0..p.value.len() {
            targets.push((id, e));
        }
    }
    let rep = check_param_gradients(&mut store, &targets, 1e-5, |tape, store| {
        let mut sess = Session::new(tape, store);
        let xv = sess.tape.constant(Tensor::matrix(3, 4, x.clone()).unwrap());
        let out = mlp.forward(&mut sess, xv)?;
        let p = sess.tape.sigmoid(out.logit);
        sess.tape.log_loss(p, &labels, &[1.0 / 3.0; 3])
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
}

// ---- mutual unit ----

/// Straight-line reimplementation of the mixing rule for one branch.
fn oracle_mix(v: &[Vec<f64>], w: &[Vec<f64>], b: &[f64], i: usize) -> (Vec<f64>, Vec<f64>, f64) {
    let n = v.len();
    let mut c = Vec::new();
    for j in 0..n {
        if j != i {
            let dot: f64 = v[i].iter().zip(&v[j]).map(|(a, b)| a * b).sum();
            let ni: f64 = v[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            let nj: f64 = v[j].iter().map(|a| a * a).sum::<f64>().sqrt();
            c.push(dot / (ni * nj).max(1e-12));
        }
    }
    let d: f64 = c.iter().sum();
    let r: Vec<f64> = if d.abs() > 1e-6 {
        c.iter().map(|x| x / d).collect()
    } else {
        vec![1.0 / (n - 1) as f64; n - 1]
    };
    let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = r.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    let alpha: Vec<f64> = e.iter().map(|x| x / z).collect();
    let zg: f64 = v[i].iter().zip(&w[i]).map(|(a, b)| a * b).sum::<f64>() + b[i];
    let g = 1.0 / (1.0 + (-zg).exp());
    let mut m = v[i].clone();
    let mut k = 0;
    for j in 0..n {
        if j != i {
            for (mi, vj) in m.iter_mut().zip(&v[j]) {
                *mi += g * alpha[k] * vj;
            }
            k += 1;
        }
    }
    (m, alpha, g)
}

fn mutual_setup(n: usize, d: usize, seed: u64) -> (ParamStore, MutualUnit, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
    let mut store = ParamStore::new();
    let mu = MutualUnit::new(&mut store, seed, "", n, d, 1, -2.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let w: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    for i in 0..n {
        set(&mut store, mu.gate_weight[i], &[d, 1], &w[i]);
        set(&mut store, mu.gate_bias[i], &[1], &[b[i]]);
    }
    (store, mu, v, w, b)
}

fn run_mix(
    store: &ParamStore,
    mu: &MutualUnit,
    v: &[Vec<f64>],
    owner: usize,
) -> Vec<(Vec<f64>, Option<Vec<f64>>, Option<f64>)> {
    let mut tape = Tape::new();
    let mut sess = Session::new(&mut tape, store);
    let d = v[0].len();
    let states: Vec<Var> = v
        .iter()
        .map(|x| sess.tape.leaf(Tensor::matrix(1, d, x.clone()).unwrap(), true))
        .collect();
    let outs = mu.mix(&mut sess, &states, owner).unwrap();
    outs.iter()
        .map(|o| {
            (
                tape.value(o.mixed).data().to_vec(),
                o.alpha.map(|a| tape.value(a).data().to_vec()),
                o.gate.map(|g| tape.value(g).item()),
            )
        })
        .collect()
}

#[test]
fn mutual_matches_oracle() {
    for seed in 0..10 {
        let (store, mu, v, w, b) = mutual_setup(3, 5, seed);
        let got = run_mix(&store, &mu, &v, 0);
        for i in 0..3 {
            let (m, alpha, g) = oracle_mix(&v, &w, &b, i);
            for (x, y) in got[i].0.iter().zip(&m) {
                assert!((x - y).abs() < 1e-12);
            }
            let ga = got[i].1.as_ref().unwrap();
            assert!((ga.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (x, y) in ga.iter().zip(&alpha) {
                assert!((x - y).abs() < 1e-12);
            }
            assert!((got[i].2.unwrap() - g).abs() < 1e-12);
        }
        let refs: Vec<&[f64]> = v.iter().map(|x| x.as_slice()).collect();
        let (alpha, gates) = mu.coefficients(&store, &refs);
        for i in 0..3 {
            let (_, a, g) = oracle_mix(&v, &w, &b, i);
            let row: Vec<f64> = (0..3).filter(|&j| j != i).map(|j| alpha[i][j]).collect();
            assert_eq!(alpha[i][i], 0.0);
            for (x, y) in row.iter().zip(&a) {
                assert!((x - y).abs() < 1e-12);
            }
            assert!((gates[i] - g).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_states_give_uniform_alpha() {
    let (store, mu, mut v, _, _) = mutual_setup(3, 4, 3);
    v[1] = v[0].clone();
    v[2] = v[0].clone();
    for (_, a, _) in run_mix(&store, &mu, &v, 1) {
        for x in a.unwrap() {
            assert!((x - 0.5).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_gate_leaves_states_unchanged() {
    let (store, mut mu, v, _, _) = mutual_setup(4, 3, 8);
    mu.gate_override = Some(0.0);
    for (i, (m, _, g)) in run_mix(&store, &mu, &v, 2).into_iter().enumerate() {
        assert_eq!(m, v[i]);
        assert_eq!(g, Some(0.0));
    }
}

#[test]
fn single_branch_bypasses_mutual() {
    let (store, mu, v, _, _) = mutual_setup(1, 3, 2);
    let got = run_mix(&store, &mu, &v, 0);
    assert_eq!(got[0].0, v[0]);
    assert!(got[0].1.is_none());
}

#[test]
fn ratio_guard_falls_back_to_uniform() {
    // Cosines +1 and -1 cancel.
    let (store, mu, _, _, _) = mutual_setup(3, 2, 1);
    let v = vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![-3.0, 0.0]];
    let got = run_mix(&store, &mu, &v, 0);
    for x in got[0].1.as_ref().unwrap() {
        assert!((x - 0.5).abs() < 1e-12);
    }
}

#[test]
fn foreign_states_receive_no_gradient() {
    let (store, mu, v, _, _) = mutual_setup(3, 4, 4);
    let mut tape = Tape::new();
    let mut sess = Session::new(&mut tape, &store);
    let states: Vec<Var> = v
        .iter()
        .map(|x| sess.tape.leaf(Tensor::matrix(1, 4, x.clone()).unwrap(), true))
        .collect();
    let out = mu.mix_row(&mut sess, &states, 0, 0).unwrap();
    let loss = sess.tape.sum(out.mixed);
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(states[0]).is_some());
    for &s in &states[1..] {
        assert!(grads.get(s).is_none_or(|g| g.data().iter().all(|&x| x == 0.0)));
    }
}

proptest! {
    #[test]
    fn alpha_rows_stochastic_and_gate_in_range(
        n in 2usize..6,
        d in 1usize..6,
        seed in 0u64..1000,
        scale in 0.01f64..50.0,
    ) {
        let (store, mu, v, _, _) = mutual_setup(n, d, seed);
        let v: Vec<Vec<f64>> = v.iter().map(|x| x.iter().map(|y| y * scale).collect()).collect();
        for (_, a, g) in run_mix(&store, &mu, &v, 0) {
            let a = a.unwrap();
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let g = g.unwrap();
            prop_assert!(g > 0.0 && g < 1.0);
        }
    }
}

// ---- branch network ----

#[test]
fn two_branch_hand_forward() {
    // N = 2, depth 1, width 2, one aux input column, mutual after layer 1.
    let mut store = ParamStore::new();
    let br = BranchNetwork::new(&mut store, 0, "", 2, 2, &[2], Some(&[1])).unwrap();
    let mu = MutualUnit::new(&mut store, 0, "", 2, 2, 1, 0.0).unwrap();
    // branch 0: W = [[1,0],[0,1],[1,1]] (rows: x1, x2, aux), b = 0
    set(
        &mut store,
        br.layers[0][0].weight,
        &[3, 2],
        &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0],
    );
    set(&mut store, br.layers[0][0].bias, &[2], &[0.0, 0.0]);
    // branch 1: W = [[0,1],[1,0],[0,0]], b = [0.5, 0]
    set(
        &mut store,
        br.layers[1][0].weight,
        &[3, 2],
        &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0],
    );
    set(&mut store, br.layers[1][0].bias, &[2], &[0.5, 0.0]);
    set(&mut store, mu.gate_weight[0], &[2, 1], &[0.5, -0.5]);
    set(&mut store, mu.gate_bias[0], &[1], &[0.0]);
    set(&mut store, br.heads[0].weight, &[2, 1], &[1.0, 2.0]);
    set(&mut store, br.heads[0].bias, &[1], &[-1.0]);

    let mut tape = Tape::new();
    let mut sess = Session::new(&mut tape, &store);
    let x = sess.tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let a = sess.tape.constant(Tensor::matrix(1, 1, vec![0.5]).unwrap());
    let v0 = br.layer(&mut sess, 0, 0, x, Some(a)).unwrap();
    let v1 = br.layer(&mut sess, 1, 0, x, Some(a)).unwrap();
    let mix = mu.mix_row(&mut sess, &[v0, v1], 0, 0).unwrap();
    let logit = br.head(&mut sess, 0, mix.mixed).unwrap();

    // V0 = relu([1,2,0.5]·W0) = [1.5, 2.5]; V1 = relu([2, 1] + [0.5, 0]) = [2.5, 1]
    let v0e = [1.5, 2.5];
    let v1e = [2.5, 1.0];
    // one neighbour: α = 1 whatever its cosine
    // g = sigmoid(0.5·1.5 - 0.5·2.5) = sigmoid(-0.5)
    let g = sigmoid(-0.5);
    let m = [v0e[0] + g * v1e[0], v0e[1] + g * v1e[1]];
    let expect = m[0] + 2.0 * m[1] - 1.0;
    assert_eq!(tape.value(v0).data(), &v0e);
    assert_eq!(tape.value(v1).data(), &v1e);
    assert!((tape.value(mix.alpha.unwrap()).item() - 1.0).abs() < 1e-15);
    assert!((tape.value(logit).item() - expect).abs() < 1e-12);
}

#[test]
fn branch_isolated_from_zeroed_aux_columns() {
    let mut store = ParamStore::new();
    let br = BranchNetwork::new(&mut store, 4, "", 2, 3, &[4], Some(&[2])).unwrap();
    let w = store.value(br.layers[0][0].weight).clone();
    let mut data = w.data().to_vec();
    for v in &mut data[3 * 4..] {
        *v = 0.0;
    }
    set(&mut store, br.layers[0][0].weight, &[5, 4], &data);
    let out = |aux: Vec<f64>| {
        let mut tape = Tape::new();
        let mut sess = Session::new(&mut tape, &store);
        let x = sess.tape.constant(Tensor::matrix(1, 3, vec![0.3, -0.2, 0.9]).unwrap());
        let a = sess.tape.constant(Tensor::matrix(1, 2, aux).unwrap());
        let h = br.layer(&mut sess, 0, 0, x, Some(a)).unwrap();
        tape.value(h).clone()
    };
    assert_eq!(out(vec![0.0, 0.0]), out(vec![5.0, -3.0]));
}

// ---- loss ----

#[test]
fn perfect_predictions_give_tiny_loss() {
    let r = total_loss(
        &[vec![1.0, 0.3], vec![0.9, 0.0]],
        Some(&[1.0, 0.0]),
        &[1, 0],
        &[0, 1],
        1.0,
    )
    .unwrap();
    assert!(r.target < 1e-6 && r.aux < 1e-6);
}

#[test]
fn half_predictions_give_ln2() {
    let r = total_loss(
        &vec![vec![0.5; 3]; 4],
        Some(&[0.5; 4]),
        &[1, 0, 0, 1],
        &[0, 1, 2, 2],
        1.0,
    )
    .unwrap();
    assert!((r.target - 2f64.ln()).abs() < 1e-12);
    assert!((r.aux - 2f64.ln()).abs() < 1e-12);
    assert!((r.total - 2.0 * 2f64.ln()).abs() < 1e-12);
    assert_eq!(r.per_scenario_counts, vec![1, 1, 2]);
}

#[test]
fn mixed_batch_matches_scalar_reference() {
    let probs = vec![vec![0.2, 0.7], vec![0.6, 0.1], vec![0.9, 0.4]];
    let aux = [0.3, 0.5, 0.8];
    let labels = [1u8, 0, 1];
    let scen = [1usize, 0, 1];
    let r = total_loss(&probs, Some(&aux), &labels, &scen, 1.0).unwrap();
    let t = (-(0.7f64.ln()) - (0.4f64).ln() - (0.4f64).ln()) / 3.0;
    let a = (-(0.3f64.ln()) - (0.5f64).ln() - (0.8f64).ln()) / 3.0;
    assert!((r.target - t).abs() < 1e-12);
    assert!((r.aux - a).abs() < 1e-12);

    let mut tape = Tape::new();
    let owner = tape.constant(Tensor::matrix(3, 1, vec![0.7, 0.6, 0.4]).unwrap());
    let ap = tape.constant(Tensor::matrix(3, 1, aux.to_vec()).unwrap());
    let lv = loss_vars(&mut tape, owner, Some(ap), &[1.0, 0.0, 1.0], 1.0, Reduction::Mean).unwrap();
    assert!((tape.value(lv.total).item() - (t + a)).abs() < 1e-12);
}

#[test]
fn loss_rejects_unknown_scenario() {
    assert!(total_loss(&[vec![0.5, 0.5]], None, &[1], &[2], 1.0).is_err());
    assert!(total_loss(&[], None, &[], &[], 1.0).is_err());
}

// ---- whole model ----

#[test]
fn variants_build_and_predict() {
    let schema = small_schema();
    let data = random_examples(&schema, 17, 1, None);
    for v in VariantKind::ALL {
        let m = SamlModel::new(&schema, &tiny(v)).unwrap();
        let p = m.predict(&refs(&data)).unwrap();
        assert_eq!(p.len(), 17);
        assert!(p.iter().all(|x| x.is_finite() && *x > 0.0 && *x < 1.0), "{v}");
    }
}

#[test]
fn variant_structure() {
    let schema = small_schema();
    let count = |v| SamlModel::new(&schema, &tiny(v)).unwrap();
    assert_eq!(count(VariantKind::UnifiedBaseline).num_heads(), 1);
    assert_eq!(count(VariantKind::NoGateMut).num_heads(), 1);
    assert_eq!(count(VariantKind::Full).num_heads(), 3);
    let default = |v: &str| SamlModel::new(&schema, &make_variant(v).unwrap()).unwrap().num_params();
    assert!(default("no_aux") < default("full"));
    assert!(count(VariantKind::NoGate).mutual().is_none());
    assert!(count(VariantKind::NoAux).aux().is_none());
    assert!(make_variant("bogus").is_err());
    assert_eq!(make_variant("no_gate").unwrap().variant, VariantKind::NoGate);
}

#[test]
fn invalid_configs_rejected() {
    let schema = small_schema();
    let mut c = tiny(VariantKind::Full);
    c.mutual_layer = 3;
    assert!(matches!(SamlModel::new(&schema, &c), Err(SamlError::Config(_))));
    c.mutual_layer = 1;
    c.heads = 5;
    assert!(matches!(SamlModel::new(&schema, &c), Err(SamlError::Config(_))));
}

#[test]
fn zero_heads_predict_half() {
    let schema = small_schema();
    let data = random_examples(&schema, 9, 2, None);
    for v in VariantKind::ALL {
        let mut m = SamlModel::new(&schema, &tiny(v)).unwrap();
        for id in m.params_with_prefix(&["branch0.head", "branch1.head", "branch2.head", "mlp.head", "aux.head"]) {
            let shape = m.store.value(id).shape().to_vec();
            *m.store.value_mut(id) = Tensor::zeros(&shape);
        }
        for s in 0..3 {
            for id in m.params_with_prefix(&[&format!("member{s}.mlp.head")]) {
                let shape = m.store.value(id).shape().to_vec();
                *m.store.value_mut(id) = Tensor::zeros(&shape);
            }
        }
        let p = m.predict(&refs(&data)).unwrap();
        assert!(p.iter().all(|&x| x == 0.5), "{v}: {p:?}");
    }
}

#[test]
fn predict_is_batching_invariant() {
    let schema = small_schema();
    let data = random_examples(&schema, 13, 3, None);
    for v in VariantKind::ALL {
        let m = SamlModel::new(&schema, &tiny(v)).unwrap();
        let whole = m.predict(&refs(&data)).unwrap();
        for (i, e) in data.iter().enumerate() {
            let one = m.predict(&[e]).unwrap()[0];
            assert!((one - whole[i]).abs() < 1e-12, "{v} sample {i}");
        }
    }
}

#[test]
fn predict_rejects_unknown_scenario() {
    let schema = small_schema();
    let mut data = random_examples(&schema, 2, 3, None);
    data[1].scenario = 3;
    let m = SamlModel::new(&schema, &tiny(VariantKind::Full)).unwrap();
    assert!(m.predict(&refs(&data)).is_err());
    assert!(m.predict(&[]).unwrap().is_empty());
}

#[test]
fn all_branch_outputs_finite_and_owner_consistent() {
    let schema = small_schema();
    let data = random_examples(&schema, 11, 4, None);
    let m = SamlModel::new(&schema, &tiny(VariantKind::Full)).unwrap();
    let p = m.predict_detailed(&refs(&data), true).unwrap();
    let bp = p.branch_probs.unwrap();
    for (t, e) in data.iter().enumerate() {
        assert!(bp[t].iter().all(|x| x.is_finite()));
        assert_eq!(bp[t][e.scenario], p.prob[t]);
        let ms = &p.mutual.as_ref().unwrap()[t];
        assert_eq!(ms.alpha[e.scenario], 0.0);
        assert!((ms.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(ms.gate > 0.0 && ms.gate < 1.0);
    }
}

#[test]
fn zero_gate_degenerates_to_no_gate() {
    let schema = small_schema();
    let data = random_examples(&schema, 20, 5, None);
    let mut full = SamlModel::new(&schema, &tiny(VariantKind::Full)).unwrap();
    let plain = SamlModel::new(&schema, &tiny(VariantKind::NoGate)).unwrap();
    full.set_gate_override(Some(0.0));
    let a = full.predict(&refs(&data)).unwrap();
    let b = plain.predict(&refs(&data)).unwrap();
    assert_eq!(a, b);
    let (ra, _) = full.gradients(&refs(&data), Reduction::Mean).unwrap();
    let (rb, _) = plain.gradients(&refs(&data), Reduction::Mean).unwrap();
    assert_eq!(ra.target, rb.target);
    full.set_gate_override(None);
    assert_ne!(full.predict(&refs(&data)).unwrap(), b);
}

#[test]
fn single_scenario_step_leaves_other_branches_untouched() {
    let schema = small_schema();
    let data = random_examples(&schema, 16, 6, Some(0));
    for v in [
        VariantKind::Full,
        VariantKind::NoGate,
        VariantKind::NoAux,
        VariantKind::IndividualBaseline,
    ] {
        let mut m = SamlModel::new(&schema, &tiny(v)).unwrap();
        let before = m.store.clone();
        let mut adam = Adam::new(AdamConfig::default());
        m.train_step(&refs(&data), &mut adam).unwrap();
        let mut foreign = Vec::new();
        for i in 1..3 {
            foreign.extend(m.branch_params(i));
            foreign.extend(m.params_with_prefix(&[&format!("member{i}.")]));
        }
        assert!(!foreign.is_empty());
        for id in foreign {
            assert_eq!(m.store.value(id), before.value(id), "{v}: {}", m.store.get(id).name);
        }
        let mut changed = m.branch_params(0);
        changed.extend(m.params_with_prefix(&["member0.mlp"]));
        assert!(changed.iter().any(|&id| m.store.value(id) != before.value(id)));
        // specific-embedding slices of other scenarios stay put
        for (id, p) in m.store.iter() {
            if p.name.ends_with(".specific") {
                let rows = p.value.shape()[0] / 3;
                let w = p.value.shape()[1];
                assert_eq!(&p.value.data()[rows * w..], &before.value(id).data()[rows * w..]);
            }
        }
    }
}

#[test]
fn branch_gradients_equal_sub_batch_gradients() {
    let schema = small_schema();
    let data = random_examples(&schema, 24, 7, None);
    let m = SamlModel::new(&schema, &tiny(VariantKind::Full)).unwrap();
    let (_, whole) = m.gradients(&refs(&data), Reduction::Sum).unwrap();
    for s in 0..3 {
        let sub: Vec<&EncodedExample> = data.iter().filter(|e| e.scenario == s).collect();
        let (_, part) = m.gradients(&sub, Reduction::Sum).unwrap();
        for id in m.branch_params(s) {
            let a = whole.dense(id).expect("branch gradient");
            let b = part.dense(id).expect("branch gradient");
            assert_eq!(a, b, "{}", m.store.get(id).name);
        }
    }
}

#[test]
fn aux_gradients_ignore_branch_losses() {
    let schema = small_schema();
    let data = random_examples(&schema, 15, 8, None);
    let m = SamlModel::new(&schema, &tiny(VariantKind::Full)).unwrap();
    let mut tape = Tape::new();
    let mut sess = Session::new(&mut tape, &m.store);
    let (lv, _) = m.loss_on(&mut sess, &refs(&data), Reduction::Mean).unwrap();
    let all = tape.backward(lv.total).unwrap();
    let only_aux = tape.backward(lv.aux.unwrap()).unwrap();
    let aux_ids = m.params_with_prefix(&["aux."]);
    assert!(!aux_ids.is_empty());
    for id in aux_ids {
        assert_eq!(all.dense(id), only_aux.dense(id));
        assert!(all.dense(id).is_some());
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let mut schema = small_schema();
    schema.num_scenarios = 2;
    schema.fields[4].vocab_size = Some(2);
    schema.max_seq_len = 3;
    schema.global_dim = 4;
    schema.specific_dim = 2;
    let data = random_examples(&schema, 6, 9, None);
    let cfg = ModelConfig {
        variant: VariantKind::Full,
        heads: 2,
        hidden: vec![3, 2],
        seed: 2,
        ..ModelConfig::default()
    };
    let mut m = SamlModel::new(&schema, &cfg).unwrap();
    // Nonzero biases keep every ReLU off its kink; a larger gate bias lets
    // the mutual path carry signal.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let biases: Vec<ParamId> = m
        .store
        .iter()
        .filter(|(_, p)| p.name.ends_with(".bias"))
        .map(|(id, _)| id)
        .collect();
    for id in biases {
        for v in m.store.value_mut(id).data_mut() {
            *v = rng.random_range(0.05..0.3);
        }
    }
    let batch = refs(&data);
    let (_, grads) = m.gradients(&batch, Reduction::Mean).unwrap();
    let mut targets = Vec::new();
    for (id, p) in m.store.iter() {
        let touched: Vec<usize> = match grads.sparse(id) {
            Some(rows) => {
                let w = p.value.shape()[1];
                rows.keys().flat_map(|r| r * w..(r + 1) * w).collect()
            }
            None => (0..p.value.len()).collect(),
        };
        targets.extend(touched.into_iter().map(|e| (id, e)));
    }
    assert!(targets.len() > 100);
    let model = m.clone();
    let rep = check_param_gradients(&mut m.store, &targets, 1e-5, |tape, store| {
        let mut sess = Session::new(tape, store);
        Ok(model.loss_on(&mut sess, &batch, Reduction::Mean)?.0.total)
    })
    .unwrap();
    let worst = rep.worst.map(|w| m.store.get(w.0).name.clone());
    assert!(rep.max_rel_err < 1e-3, "{rep:?} {worst:?}");
}

#[test]
fn training_reduces_loss() {
    let schema = small_schema();
    let data = random_examples(&schema, 64, 10, None);
    for v in VariantKind::ALL {
        let mut m = SamlModel::new(&schema, &tiny(v)).unwrap();
        let mut adam = Adam::new(AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        });
        let first = m.gradients(&refs(&data), Reduction::Mean).unwrap().0.target;
        for _ in 0..60 {
            m.train_step(&refs(&data), &mut adam).unwrap();
        }
        let last = m.gradients(&refs(&data), Reduction::Mean).unwrap().0.target;
        assert!(last < first * 0.9, "{v}: {first} -> {last}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let schema = small_schema();
    let data = random_examples(&schema, 10, 12, None);
    for v in VariantKind::ALL {
        let mut m = SamlModel::new(&schema, &tiny(v)).unwrap();
        m.numeric_stats.mean[0] = 0.25;
        let back = SamlModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.predict(&refs(&data)).unwrap(), m.predict(&refs(&data)).unwrap());
        assert_eq!(back.numeric_stats, m.numeric_stats);
        assert_eq!(back.config(), m.config());
    }
}

#[test]
fn checkpoint_rejects_tampering() {
    let schema = small_schema();
    let m = SamlModel::new(&schema, &tiny(VariantKind::Full)).unwrap();
    let mut ck = m.to_checkpoint();
    ck.params[0].shape = vec![1, ck.params[0].data.len()];
    assert!(SamlModel::from_checkpoint(ck).is_err());
    let mut ck = m.to_checkpoint();
    ck.format = "other".into();
    assert!(SamlModel::from_checkpoint(ck).is_err());
    let mut ck = m.to_checkpoint();
    ck.params.pop();
    assert!(SamlModel::from_checkpoint(ck).is_err());
}

#[test]
fn cosine_and_softmax_helpers_agree_with_coefficients() {
    let (store, mu, v, _, _) = mutual_setup(2, 3, 21);
    let refs: Vec<&[f64]> = v.iter().map(|x| x.as_slice()).collect();
    let (alpha, _) = mu.coefficients(&store, &refs);
    assert_eq!(alpha[0][1], softmax(&[1.0])[0]);
    assert!(cosine(&v[0], &v[1]).abs() <= 1.0);
}
