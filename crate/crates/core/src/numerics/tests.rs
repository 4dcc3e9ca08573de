use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Sum of `x ⊙ w` for a fixed random `w`, so every output element matters.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = rand_tensor(&mut rng, tape.value(x).shape());
    let w = tape.constant(w);
    let prod = tape.mul(x, w).unwrap();
    tape.sum(prod)
}

fn check_op<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> crate::Result<Var>,
{
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let report = check_gradients(&inputs, gradcheck::DEFAULT_STEP, |t, v| {
            let out = f(t, v)?;
            Ok(weighted_sum(t, out, seed))
        })
        .unwrap();
        assert!(
            report.max_rel_err < TOL,
            "{name} seed {seed}: rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}

#[test]
fn gradcheck_matmul() {
    check_op("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn gradcheck_elementwise() {
    check_op("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1]));
    check_op("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1]));
    check_op("add_bias", &[&[3, 4], &[4]], |t, v| t.add_bias(v[0], v[1]));
    check_op("relu", &[&[3, 4]], |t, v| Ok(t.relu(v[0])));
    check_op("sigmoid", &[&[3, 4]], |t, v| Ok(t.sigmoid(v[0])));
    check_op("scale", &[&[5]], |t, v| Ok(t.scale(v[0], -2.5)));
    check_op("scale_rows", &[&[3, 4], &[3, 1]], |t, v| t.scale_rows(v[0], v[1]));
}

#[test]
fn gradcheck_softmax_axes() {
    check_op("softmax", &[&[5]], |t, v| t.softmax(v[0], 0));
    check_op("softmax rows", &[&[3, 4]], |t, v| t.softmax(v[0], 1));
    check_op("softmax cols", &[&[3, 4]], |t, v| t.softmax(v[0], 0));
}

#[test]
fn gradcheck_cosine_and_ratios() {
    check_op("row_cosine", &[&[3, 6], &[3, 6]], |t, v| t.row_cosine(v[0], v[1]));
    // shift away from zero row sums so the guard never triggers
    check_op("ratio_normalize", &[&[3, 4]], |t, v| {
        let ones = t.constant(Tensor::full(&[3, 4], 2.0));
        let c = t.add(v[0], ones)?;
        t.ratio_normalize(c)
    });
}

#[test]
fn gradcheck_structural_ops() {
    check_op("concat_cols", &[&[3, 2], &[3, 4]], |t, v| t.concat_cols(&[v[0], v[1]]));
    check_op("slice_cols", &[&[3, 5]], |t, v| t.slice_cols(v[0], 1, 3));
    check_op("concat_rows", &[&[2, 3], &[4, 3]], |t, v| t.concat_rows(&[v[0], v[1]]));
    check_op("slice_rows", &[&[5, 3]], |t, v| t.slice_rows(v[0], 2, 2));
    check_op("gather_rows", &[&[4, 3]], |t, v| t.gather_rows(v[0], &[3, 0, 3, 1]));
    check_op("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], vec![3, 4]));
}

#[test]
fn gradcheck_log_loss() {
    let labels = [1.0, 0.0, 1.0, 0.0];
    let weights = [0.25, 0.5, 1.0, 0.1];
    check_op("log_loss", &[&[4, 1]], |t, v| {
        let p = t.sigmoid(v[0]);
        t.log_loss(p, &labels, &weights)
    });
}

#[test]
fn gradcheck_attention_and_pooling() {
    let mask = Rc::new(vec![true, true, true, false, true, false, false, false]);
    check_op("attention", &[&[8, 4], &[8, 4], &[8, 4]], |t, v| {
        t.attention(v[0], v[1], v[2], mask.clone(), 2, 4, 2)
    });
    check_op("masked_mean_pool", &[&[8, 3]], |t, v| {
        t.masked_mean_pool(v[0], mask.clone(), 2, 4)
    });
}

#[test]
fn gradcheck_two_layer_mlp() {
    check_op("mlp", &[&[4, 3], &[3, 5], &[5], &[5, 2], &[2]], |t, v| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.add_bias(h, v[2])?;
        let h = t.relu(h);
        let o = t.matmul(h, v[3])?;
        t.add_bias(o, v[4])
    });
}

#[test]
fn relu_and_sigmoid_values() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let r = t.relu(x);
    assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = t.constant(Tensor::vector(vec![0.0]));
    let s = t.sigmoid(z);
    assert_eq!(t.value(s).data(), &[0.5]);
}

#[test]
fn softmax_sums_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let mut t = Tape::new();
        let x = t.constant(rand_tensor(&mut rng, &[5]));
        let y = t.softmax(x, 0).unwrap();
        let s: f64 = t.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(t.value(y).data().iter().all(|&p| p > 0.0 && p < 1.0));
    }
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![1000.0, 1000.0]));
    let y = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn stop_gradient_is_forward_identity_and_backward_zero() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.5, -2.0, 0.25]), true);
    let s = t.stop_gradient(x);
    assert_eq!(t.value(s), t.value(x));
    let loss = t.sum(s);
    let g = t.backward(loss).unwrap();
    assert!(g.get_or_zeros(&t, x).data().iter().all(|&v| v == 0.0));
}

#[test]
fn stop_gradient_product_differentiates_one_side() {
    let xs = vec![1.5, -2.0, 0.25];
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(xs.clone()), true);
    let s = t.stop_gradient(x);
    let p = t.mul(x, s).unwrap();
    let loss = t.sum(p);
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), xs.as_slice());
}

#[test]
fn backward_simple_cases() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![3.0, -1.0]), true);
    let unused = t.leaf(Tensor::vector(vec![7.0]), true);
    let y = t.scale(x, 2.0);
    let loss = t.sum(y);
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
    assert!(g.get(unused).is_none());
    assert_eq!(g.get_or_zeros(&t, unused).data(), &[0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![3.0, -1.0]), true);
    let y = t.relu(x);
    assert!(matches!(t.backward(y), Err(crate::SamlError::Contract(_))));
}

#[test]
fn backward_is_replayable_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut t = Tape::new();
    let a = t.leaf(rand_tensor(&mut rng, &[4, 3]), true);
    let b = t.leaf(rand_tensor(&mut rng, &[3, 3]), true);
    let h = t.matmul(a, b).unwrap();
    let h = t.sigmoid(h);
    let h = t.softmax(h, 1).unwrap();
    let loss = weighted_sum(&mut t, h, 2);
    let g1 = t.backward(loss).unwrap();
    let g2 = t.backward(loss).unwrap();
    assert_eq!(g1.get(a).unwrap(), g2.get(a).unwrap());
    assert_eq!(g1.get(b).unwrap(), g2.get(b).unwrap());
}

#[test]
fn lookup_gradient_is_row_accumulation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let table = store
        .insert(
            "emb",
            rand_tensor(&mut rng, &[6, 3]),
            ParamKind::Embedding { rows_per_slice: 6 },
        )
        .unwrap();
    let rows = [2usize, 4, 2];
    let mut t = Tape::new();
    let e = t.lookup(table, store.value(table), &rows).unwrap();
    let loss = t.sum(e);
    let g = t.backward(loss).unwrap();
    let sparse = g.sparse(table).unwrap();
    assert_eq!(sparse.keys().copied().collect::<Vec<_>>(), vec![2, 4]);
    assert_eq!(sparse[&2], vec![2.0; 3]);
    assert_eq!(sparse[&4], vec![1.0; 3]);

    let targets: Vec<_> = (0..18).map(|e| (table, e)).collect();
    let report = check_param_gradients(&mut store, &targets, 1e-5, |t, s| {
        let e = t.lookup(table, s.value(table), &rows)?;
        let sq = t.mul(e, e)?;
        Ok(t.sum(sq))
    })
    .unwrap();
    assert!(report.max_rel_err < TOL, "{report:?}");
}

#[test]
fn attention_single_key_returns_value_row() {
    let mut t = Tape::new();
    let q = t.constant(Tensor::matrix(2, 2, vec![0.3, -0.7, 9.0, 9.0]).unwrap());
    let v = t.constant(Tensor::matrix(2, 2, vec![1.25, -4.0, 5.0, 5.0]).unwrap());
    let mask = Rc::new(vec![true, false]);
    let out = t.attention(q, q, v, mask, 1, 2, 1).unwrap();
    assert_eq!(t.value(out).data(), &[1.25, -4.0, 0.0, 0.0]);
}

#[test]
fn attention_two_positions_hand_computed() {
    // q = k = v = [[1,0],[0,1]], d = 2, one head: scores = I/√2
    let mut t = Tape::new();
    let x = t.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let out = t.attention(x, x, x, Rc::new(vec![true, true]), 1, 2, 1).unwrap();
    let s = 1.0 / 2f64.sqrt();
    let hi = s.exp() / (s.exp() + 1.0);
    let lo = 1.0 / (s.exp() + 1.0);
    let expected = [hi, lo, lo, hi];
    for (o, e) in t.value(out).data().iter().zip(expected) {
        assert!((o - e).abs() < 1e-15);
    }
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[2, 6]));
    let err = t.attention(x, x, x, Rc::new(vec![true; 2]), 1, 2, 4);
    assert!(matches!(err, Err(crate::SamlError::Config(_))));
}
