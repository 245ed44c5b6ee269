//! Finite-difference checks for every differentiable tape operation.

use super::{grad_check, random_tensor, rng, GradReport};
use phenokg_core::autodiff::{ParamStore, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-3;
pub const TOL: f64 = 1e-5;

pub type Checks = Vec<(String, GradReport)>;

pub fn all() -> Checks {
    let mut out = Vec::new();
    for group in [binary_ops, broadcast_ops, structural_ops, normalizations, elementwise_nonlinearities, dropout_gradient_uses_mask, three_layer_mlp] {
        group(&mut out);
    }
    out
}

/// Reduces an arbitrary output to a scalar through fixed random weights so
/// that every output entry contributes a distinct coefficient.
fn weighted_sum(t: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let (r, c) = t.shape(out);
    let w = random_tensor(&mut rng(seed), r, c, 1.0);
    let wv = t.constant_tensor(&w);
    let prod = t.mul(out, wv).unwrap();
    t.sum(prod)
}

fn check(out: &mut Checks, name: &str, store: &ParamStore<f64>, f: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Var) {
    out.push((name.to_string(), grad_check(store, STEP, FLOOR, 64, f)));
}

fn store_of(tensors: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in tensors {
        s.add(n, t);
    }
    s
}

/// Values bounded away from zero so kinked ops are differentiable.
fn away_from_kink(mut t: Tensor<f64>) -> Tensor<f64> {
    for v in t.values_mut() {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    t
}

pub fn binary_ops(out: &mut Checks) {
    let mut r = rng(1);
    let s = store_of(vec![("a", random_tensor(&mut r, 3, 4, 1.0)), ("b", random_tensor(&mut r, 3, 4, 1.0)), ("m", random_tensor(&mut r, 4, 2, 1.0))]);
    let (a, b, m) = (s.id("a").unwrap(), s.id("b").unwrap(), s.id("m").unwrap());
    check(out, "matmul", &s, |t, s| {
        let (x, y) = (t.param(s, a), t.param(s, m));
        let o = t.matmul(x, y).unwrap();
        weighted_sum(t, o, 10)
    });
    check(out, "add", &s, |t, s| {
        let (x, y) = (t.param(s, a), t.param(s, b));
        let o = t.add(x, y).unwrap();
        weighted_sum(t, o, 11)
    });
    check(out, "sub", &s, |t, s| {
        let (x, y) = (t.param(s, a), t.param(s, b));
        let o = t.sub(x, y).unwrap();
        weighted_sum(t, o, 12)
    });
    check(out, "mul", &s, |t, s| {
        let (x, y) = (t.param(s, a), t.param(s, b));
        let o = t.mul(x, y).unwrap();
        weighted_sum(t, o, 13)
    });
    check(out, "row_dot", &s, |t, s| {
        let (x, y) = (t.param(s, a), t.param(s, b));
        let o = t.row_dot(x, y).unwrap();
        weighted_sum(t, o, 14)
    });
    check(out, "cosine_similarity", &s, |t, s| {
        let (x, y) = (t.param(s, a), t.param(s, b));
        let o = t.cosine_similarity(x, y).unwrap();
        weighted_sum(t, o, 15)
    });
}

pub fn broadcast_ops(out: &mut Checks) {
    let mut r = rng(2);
    let s = store_of(vec![("a", random_tensor(&mut r, 3, 4, 1.0)), ("row", random_tensor(&mut r, 1, 4, 1.0)), ("k", Tensor::scalar(0.7))]);
    let (a, row, k) = (s.id("a").unwrap(), s.id("row").unwrap(), s.id("k").unwrap());
    check(out, "add_row", &s, |t, s| {
        let (x, y) = (t.param(s, a), t.param(s, row));
        let o = t.add_row(x, y).unwrap();
        weighted_sum(t, o, 20)
    });
    check(out, "mul_row", &s, |t, s| {
        let (x, y) = (t.param(s, a), t.param(s, row));
        let o = t.mul_row(x, y).unwrap();
        weighted_sum(t, o, 21)
    });
    check(out, "mul_scalar_var", &s, |t, s| {
        let (x, y) = (t.param(s, a), t.param(s, k));
        let o = t.mul_scalar_var(x, y).unwrap();
        weighted_sum(t, o, 22)
    });
    check(out, "scale_add_scalar", &s, |t, s| {
        let x = t.param(s, a);
        let o = t.scale(x, -1.3);
        let o = t.add_scalar(o, 0.4);
        weighted_sum(t, o, 23)
    });
}

pub fn structural_ops(out: &mut Checks) {
    let mut r = rng(3);
    let s = store_of(vec![("a", random_tensor(&mut r, 3, 4, 1.0)), ("b", random_tensor(&mut r, 3, 2, 1.0)), ("c", random_tensor(&mut r, 2, 4, 1.0))]);
    let (a, b, c) = (s.id("a").unwrap(), s.id("b").unwrap(), s.id("c").unwrap());
    check(out, "concat_cols", &s, |t, s| {
        let (x, y) = (t.param(s, a), t.param(s, b));
        let o = t.concat_cols(&[x, y, x]).unwrap();
        weighted_sum(t, o, 30)
    });
    check(out, "concat_rows", &s, |t, s| {
        let (x, y) = (t.param(s, a), t.param(s, c));
        let o = t.concat_rows(&[y, x]).unwrap();
        weighted_sum(t, o, 31)
    });
    check(out, "split_and_slice", &s, |t, s| {
        let x = t.param(s, a);
        let parts = t.split_cols(x, &[1, 3]).unwrap();
        let rows = t.slice_rows(parts[1], 1, 3).unwrap();
        let o = t.transpose(rows);
        weighted_sum(t, o, 32)
    });
    check(out, "gather_scatter", &s, |t, s| {
        let x = t.param(s, a);
        let g = t.gather_rows(x, &[2, 0, 2, 1]).unwrap();
        let o = t.scatter_add_rows(g, &[1, 1, 0, 3], 5).unwrap();
        weighted_sum(t, o, 33)
    });
    check(out, "element_mean", &s, |t, s| {
        let x = t.param(s, a);
        let e = t.element(x, 2, 1).unwrap();
        let m = t.mean(x).unwrap();
        let e2 = t.mul(e, m).unwrap();
        t.sum(e2)
    });
}

pub fn normalizations(out: &mut Checks) {
    let mut r = rng(4);
    let s = store_of(vec![
        ("x", random_tensor(&mut r, 5, 6, 2.0)),
        ("gain", random_tensor(&mut r, 1, 6, 1.5)),
        ("bias", random_tensor(&mut r, 1, 6, 1.0)),
    ]);
    let (x, gain, bias) = (s.id("x").unwrap(), s.id("gain").unwrap(), s.id("bias").unwrap());
    check(out, "layer_norm", &s, |t, s| {
        let (v, g, b) = (t.param(s, x), t.param(s, gain), t.param(s, bias));
        let o = t.layer_norm(v, g, b).unwrap();
        weighted_sum(t, o, 40)
    });
    check(out, "l2_normalize", &s, |t, s| {
        let v = t.param(s, x);
        let o = t.l2_normalize(v);
        weighted_sum(t, o, 41)
    });
    check(out, "row_norm", &s, |t, s| {
        let v = t.param(s, x);
        let o = t.row_norm(v);
        weighted_sum(t, o, 42)
    });
    check(out, "masked_mean", &s, |t, s| {
        let v = t.param(s, x);
        let o = t.masked_mean(v, &[true, false, true, true, false]).unwrap();
        weighted_sum(t, o, 43)
    });
    check(out, "softmax_rows", &s, |t, s| {
        let v = t.param(s, x);
        let o = t.softmax_rows(v).unwrap();
        weighted_sum(t, o, 44)
    });
    check(out, "segment_softmax", &s, |t, s| {
        let v = t.param(s, x);
        let o = t.segment_softmax(v, &[2, 0, 1, 0, 2], 3).unwrap();
        weighted_sum(t, o, 45)
    });
}

pub fn elementwise_nonlinearities(out: &mut Checks) {
    let mut r = rng(5);
    let s = store_of(vec![("x", away_from_kink(random_tensor(&mut r, 4, 5, 2.0)))]);
    let x = s.id("x").unwrap();
    type Unary = fn(&mut Tape<f64>, Var) -> Var;
    let ops: [(&str, Unary); 6] = [
        ("sigmoid", |t, v| t.sigmoid(v)),
        ("log_sigmoid", |t, v| t.log_sigmoid(v)),
        ("relu", |t, v| t.relu(v)),
        ("leaky_relu", |t, v| t.leaky_relu(v, 0.2)),
        ("exp", |t, v| t.exp(v)),
        ("abs", |t, v| t.abs(v)),
    ];
    for (k, (name, op)) in ops.into_iter().enumerate() {
        check(out, name, &s, |t, s| {
            let v = t.param(s, x);
            let o = op(t, v);
            weighted_sum(t, o, 50 + k as u64)
        });
    }
}

pub fn dropout_gradient_uses_mask(out: &mut Checks) {
    use rand::SeedableRng;
    let mut r = rng(6);
    let s = store_of(vec![("x", random_tensor(&mut r, 3, 3, 1.0))]);
    let x = s.id("x").unwrap();
    check(out, "dropout", &s, |t, s| {
        let mut drop_rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let v = t.param(s, x);
        let o = t.dropout(v, 0.3, true, &mut drop_rng).unwrap();
        weighted_sum(t, o, 60)
    });
}

pub fn three_layer_mlp(out: &mut Checks) {
    let mut r = rng(7);
    let s = store_of(vec![
        ("w1", random_tensor(&mut r, 4, 8, 0.8)),
        ("b1", random_tensor(&mut r, 1, 8, 0.2)),
        ("w2", random_tensor(&mut r, 8, 8, 0.5)),
        ("b2", random_tensor(&mut r, 1, 8, 0.2)),
        ("w3", random_tensor(&mut r, 8, 3, 0.5)),
        ("b3", random_tensor(&mut r, 1, 3, 0.2)),
    ]);
    let input = random_tensor(&mut r, 6, 4, 1.0);
    let ids: Vec<_> = ["w1", "b1", "w2", "b2", "w3", "b3"].iter().map(|n| s.id(n).unwrap()).collect();
    check(out, "mlp", &s, |t, s| {
        let mut h = t.constant_tensor(&input);
        for layer in 0..3 {
            let (w, b) = (t.param(s, ids[2 * layer]), t.param(s, ids[2 * layer + 1]));
            let z = t.matmul(h, w).unwrap();
            let z = t.add_row(z, b).unwrap();
            h = if layer < 2 { t.sigmoid(z) } else { z };
        }
        let sq = t.mul(h, h).unwrap();
        t.mean(sq).unwrap()
    });
}
