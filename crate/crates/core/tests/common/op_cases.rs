//! One scalar-valued test function per primitive tape op, with random inputs.

use std::sync::Arc;

use hetgnn_pretrain::numerics::{Bound, ParamSet, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type LossFn = Box<dyn Fn(&mut Tape, &Bound) -> Var + Send + Sync>;

pub struct OpCase {
    pub name: &'static str,
    pub params: ParamSet,
    pub f: LossFn,
}

pub fn rand_t(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect())
}

/// Contracts a tensor-valued output with fixed random weights.
fn weighted(tape: &mut Tape, out: Var, w: &Tensor) -> Var {
    let c = tape.constant(w.clone());
    let m = tape.mul(out, c);
    tape.sum(m)
}

fn case(
    name: &'static str,
    params: Vec<(&str, Tensor)>,
    f: impl Fn(&mut Tape, &Bound) -> Var + Send + Sync + 'static,
) -> OpCase {
    let mut ps = ParamSet::new();
    for (k, v) in params {
        ps.insert(k, v);
    }
    OpCase {
        name,
        params: ps,
        f: Box::new(f),
    }
}

pub fn all_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let (m, k, n) = (3, 4, 2);
    let mut out = Vec::new();
    macro_rules! w {
        ($r:expr, $c:expr) => {
            rand_t($r, $c, rng)
        };
    }

    let wo = w!(m, n);
    out.push(case("matmul", vec![("a", w!(m, k)), ("b", w!(k, n))], move |t, p| {
        let y = t.matmul(p.var("a"), p.var("b"));
        weighted(t, y, &wo)
    }));
    let wo = w!(m, k);
    out.push(case("add", vec![("a", w!(m, k)), ("b", w!(m, k))], move |t, p| {
        let y = t.add(p.var("a"), p.var("b"));
        weighted(t, y, &wo)
    }));
    let wo = w!(m, k);
    out.push(case("sub", vec![("a", w!(m, k)), ("b", w!(m, k))], move |t, p| {
        let y = t.sub(p.var("a"), p.var("b"));
        weighted(t, y, &wo)
    }));
    let wo = w!(m, k);
    out.push(case("mul", vec![("a", w!(m, k)), ("b", w!(m, k))], move |t, p| {
        let y = t.mul(p.var("a"), p.var("b"));
        weighted(t, y, &wo)
    }));
    let wo = w!(m, k);
    out.push(case("scale", vec![("a", w!(m, k))], move |t, p| {
        let y = t.scale(p.var("a"), -0.7);
        weighted(t, y, &wo)
    }));
    let wo = w!(m, k);
    out.push(case("add_row", vec![("a", w!(m, k)), ("b", w!(1, k))], move |t, p| {
        let y = t.add_row(p.var("a"), p.var("b"));
        weighted(t, y, &wo)
    }));
    let wo = w!(m, k);
    out.push(case("mul_scalar", vec![("a", w!(m, k)), ("s", w!(1, 1))], move |t, p| {
        let y = t.mul_scalar(p.var("a"), p.var("s"));
        weighted(t, y, &wo)
    }));
    let wo = w!(m, k);
    out.push(case("gelu", vec![("a", w!(m, k))], move |t, p| {
        let y = t.gelu(p.var("a"));
        weighted(t, y, &wo)
    }));
    let wo = w!(m, k);
    out.push(case("softmax_rows", vec![("a", w!(m, k))], move |t, p| {
        let y = t.softmax_rows(p.var("a"));
        weighted(t, y, &wo)
    }));
    out.push(case("sum", vec![("a", w!(m, k))], |t, p| {
        let y = t.mul(p.var("a"), p.var("a"));
        t.sum(y)
    }));
    out.push(case("mean", vec![("a", w!(m, k))], |t, p| {
        let y = t.mul(p.var("a"), p.var("a"));
        t.mean(y)
    }));
    let wo = w!(5, k);
    let idx: Arc<[usize]> = Arc::from(vec![2, 0, 2, 1, 0]);
    out.push(case("gather_rows", vec![("a", w!(m, k))], move |t, p| {
        let y = t.gather_rows(p.var("a"), idx.clone());
        weighted(t, y, &wo)
    }));
    let wo = w!(4, k);
    let idx: Arc<[usize]> = Arc::from(vec![3, 0, 3]);
    out.push(case("scatter_add_rows", vec![("a", w!(m, k))], move |t, p| {
        let y = t.scatter_add_rows(p.var("a"), idx.clone(), 4);
        weighted(t, y, &wo)
    }));
    let wo = w!(3, k);
    let seg: Arc<[usize]> = Arc::from(vec![0, 2, 0, 0, 2]);
    out.push(case("segment_mean", vec![("a", w!(5, k))], move |t, p| {
        let y = t.segment_mean(p.var("a"), seg.clone(), 3);
        weighted(t, y, &wo)
    }));
    let wo = w!(5, 2);
    let seg: Arc<[usize]> = Arc::from(vec![1, 0, 1, 1, 0]);
    out.push(case("segment_softmax", vec![("a", w!(5, 2))], move |t, p| {
        let y = t.segment_softmax(p.var("a"), seg.clone(), 2);
        weighted(t, y, &wo)
    }));
    let wo = w!(m, k + n);
    out.push(case("concat_cols", vec![("a", w!(m, k)), ("b", w!(m, n))], move |t, p| {
        let y = t.concat_cols(&[p.var("a"), p.var("b")]);
        weighted(t, y, &wo)
    }));
    let wo = w!(m + 2, k);
    out.push(case("concat_rows", vec![("a", w!(m, k)), ("b", w!(2, k))], move |t, p| {
        let y = t.concat_rows(&[p.var("a"), p.var("b")]);
        weighted(t, y, &wo)
    }));
    let wo = w!(m, 6);
    out.push(case("head_matmul", vec![("x", w!(m, 6)), ("w", w!(6, 3))], move |t, p| {
        let y = t.head_matmul(p.var("x"), p.var("w"), 2);
        weighted(t, y, &wo)
    }));
    let wo = w!(m, 2);
    out.push(case("head_dot", vec![("a", w!(m, 6)), ("b", w!(m, 6))], move |t, p| {
        let y = t.head_dot(p.var("a"), p.var("b"), 2);
        weighted(t, y, &wo)
    }));
    let wo = w!(m, 6);
    out.push(case("head_scale", vec![("x", w!(m, 6)), ("s", w!(m, 2))], move |t, p| {
        let y = t.head_scale(p.var("x"), p.var("s"), 2);
        weighted(t, y, &wo)
    }));
    let target = w!(m, k);
    out.push(case("mse", vec![("a", w!(m, k))], move |t, p| t.mse(p.var("a"), target.clone())));
    out.push(case("bce_with_logits", vec![("z", w!(4, 1))], |t, p| {
        t.bce_with_logits(p.var("z"), &[1.0, 0.0, 0.0, 1.0])
    }));
    out.push(case("softmax_cross_entropy", vec![("z", w!(4, 3))], |t, p| {
        t.softmax_cross_entropy(p.var("z"), &[2, 0, 1, 2])
    }));
    out
}
