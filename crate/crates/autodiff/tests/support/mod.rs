//! Primitive table and finite-difference probes shared by gradient tests.
#![allow(dead_code)]

use std::sync::Arc;

use ebt_autodiff::rng::{standard_normal, uniform, EngineRng};
use ebt_autodiff::{finite_difference_check, grad, Value};
use rand::Rng;

pub const TOL: f64 = 1e-4;
pub const EPS: f64 = 1e-5;

pub fn randn(rng: &mut EngineRng, shape: &[usize]) -> Value {
    let n = shape.iter().product();
    Value::constant(standard_normal(rng, n), shape)
}

/// Random signs with magnitudes in [0.5, 1.5), so no gradient entry is
/// accidentally tiny (relative error is meaningless there).
pub fn weights(rng: &mut EngineRng, shape: &[usize]) -> Value {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.5..1.5);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Value::constant(data, shape)
}

/// Weighted sum of a primitive's output so every output element matters.
pub fn probe(rng: &mut EngineRng, op: impl Fn(&Value) -> Value + Clone, x: &Value) -> f64 {
    let out_shape = op(x).shape().to_vec();
    let w = weights(rng, &out_shape);
    let f = move |v: &Value| op(v).mul(&w).sum();
    finite_difference_check(f, x, EPS).unwrap()
}

/// Same, on the gradient of the weighted sum: exercises every backward rule's
/// own backward rule.
pub fn probe_second(rng: &mut EngineRng, op: impl Fn(&Value) -> Value + Clone, x: &Value) -> f64 {
    let out_shape = op(x).shape().to_vec();
    let w = weights(rng, &out_shape);
    let u = weights(rng, x.shape());
    let f = move |v: &Value| {
        // Non-linear outer function so linear ops still have curvature.
        let y = op(v).mul(&w).sum();
        let y = y.mul(&y);
        let g = grad(&y, &[v.clone()], true).unwrap().remove(0);
        g.mul(&u).sum()
    };
    finite_difference_check(f, x, EPS).unwrap()
}

pub type Prim = (&'static str, Box<dyn Fn(&mut EngineRng) -> (Value, Box<dyn Fn(&Value) -> Value>)>);

pub fn primitives() -> Vec<Prim> {
    fn entry(
        name: &'static str,
        f: impl Fn(&mut EngineRng) -> (Value, Box<dyn Fn(&Value) -> Value>) + 'static,
    ) -> Prim {
        (name, Box::new(f))
    }
    vec![
        entry("add", |r| {
            let b = randn(r, &[3, 4]);
            (randn(r, &[3, 4]), Box::new(move |x| x.add(&b)))
        }),
        entry("add_broadcast", |r| {
            let b = randn(r, &[4]);
            (randn(r, &[3, 4]), Box::new(move |x| b.add(x)))
        }),
        entry("sub", |r| {
            let b = randn(r, &[3, 1]);
            (randn(r, &[3, 4]), Box::new(move |x| b.sub(x)))
        }),
        entry("mul", |r| {
            let b = randn(r, &[3, 4]);
            (randn(r, &[3, 4]), Box::new(move |x| x.mul(&b).mul(x)))
        }),
        entry("div", |r| {
            let b = Value::constant(uniform(r, 12, 0.5, 2.0), &[3, 4]);
            (randn(r, &[3, 4]), Box::new(move |x| b.div(&x.square().add_scalar(1.0)).add(&x.div(&b))))
        }),
        entry("matmul", |r| {
            let b = randn(r, &[4, 5]);
            (randn(r, &[3, 4]), Box::new(move |x| x.matmul(&b)))
        }),
        entry("matmul_rhs", |r| {
            let a = randn(r, &[2, 3]);
            (randn(r, &[3, 4]), Box::new(move |x| a.matmul(x)))
        }),
        entry("matmul_transposed", |r| {
            let a = randn(r, &[2, 3, 5]);
            (randn(r, &[2, 3, 4]), Box::new(move |x| x.matmul_t(&a, true, false).matmul_t(&a, false, true)))
        }),
        entry("matmul_shared_rhs", |r| {
            let x0 = randn(r, &[2, 3, 4]);
            (randn(r, &[4, 4]), Box::new(move |w| x0.matmul(w).matmul_t(w, false, true)))
        }),
        entry("softmax", |r| (randn(r, &[3, 4]), Box::new(|x| x.softmax()))),
        entry("exp", |r| (randn(r, &[3, 4]), Box::new(|x| x.exp()))),
        entry("log", |r| {
            (Value::constant(uniform(r, 12, 0.5, 3.0), &[3, 4]), Box::new(|x| x.log()))
        }),
        entry("sqrt", |r| {
            (Value::constant(uniform(r, 12, 0.5, 3.0), &[3, 4]), Box::new(|x| x.sqrt()))
        }),
        entry("sigmoid", |r| (randn(r, &[3, 4]), Box::new(|x| x.sigmoid()))),
        entry("mean", |r| (randn(r, &[3, 4]), Box::new(|x| x.square().mean()))),
        entry("sum_axis", |r| (randn(r, &[3, 4]), Box::new(|x| x.square().sum_axis(0, false)))),
        entry("mean_axis_keepdim", |r| {
            (randn(r, &[3, 4]), Box::new(|x| x.sub(&x.mean_axis(1, true)).square()))
        }),
        entry("concat", |r| {
            let b = randn(r, &[3, 2]);
            (randn(r, &[3, 4]), Box::new(move |x| Value::concat(&[x.square(), b.clone(), x.clone()], 1)))
        }),
        entry("slice", |r| (randn(r, &[3, 4]), Box::new(|x| x.slice(1, 1, 3).square()))),
        entry("pad", |r| (randn(r, &[3, 4]), Box::new(|x| x.square().pad(0, 1, 6)))),
        entry("masked_fill", |r| {
            let mask: Arc<Vec<bool>> = Arc::new((0..12).map(|_| r.gen_bool(0.5)).collect());
            (randn(r, &[3, 4]), Box::new(move |x| x.square().masked_fill(mask.clone(), -2.0)))
        }),
        entry("select", |r| {
            let mask: Arc<Vec<bool>> = Arc::new((0..12).map(|_| r.gen_bool(0.5)).collect());
            (randn(r, &[3, 4]), Box::new(move |x| Value::select(mask.clone(), &x.square(), &x.exp())))
        }),
        entry("gather", |r| {
            let idx: Arc<Vec<usize>> = Arc::new((0..3).map(|_| r.gen_range(0..4)).collect());
            (randn(r, &[3, 4]), Box::new(move |x| x.softmax().gather_last(idx.clone())))
        }),
        entry("take_rows", |r| {
            let ids: Arc<Vec<usize>> = Arc::new(vec![2, 0, 2, 1, 0]);
            let _ = r.gen::<u8>();
            (randn(r, &[3, 4]), Box::new(move |x| x.take_rows(ids.clone()).square()))
        }),
        entry("transpose", |r| (randn(r, &[3, 4]), Box::new(|x| x.t().matmul(x)))),
        entry("permute", |r| {
            let b = randn(r, &[4, 3, 2]);
            (randn(r, &[2, 3, 4]), Box::new(move |x| x.permute(&[2, 1, 0]).mul(&b.square().add_scalar(1.0)).square()))
        }),
        entry("reshape", |r| (randn(r, &[3, 4]), Box::new(|x| x.reshape(&[2, 6]).softmax()))),
        entry("clamp", |r| {
            // Keep samples away from the kinks at +-0.5.
            let data: Vec<f64> = (0..12)
                .map(|_| {
                    let v: f64 = r.gen_range(0.6..1.5);
                    if r.gen_bool(0.5) { v } else { -v * 0.5 }
                })
                .collect();
            (Value::constant(data, &[3, 4]), Box::new(|x| x.clamp(-0.5, 0.5).mul(x)))
        }),
        entry("broadcast_to", |r| (randn(r, &[3, 1]), Box::new(|x| x.broadcast_to(&[2, 3, 4]).square()))),
        entry("sum_to", |r| (randn(r, &[3, 4]), Box::new(|x| x.square().sum_to(&[1, 4])))),
    ]
}
