use std::sync::Arc;

use super::*;
use crate::error::Error;

fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
    Tensor::new(rows, cols, v.to_vec()).unwrap()
}

fn check1<F>(f: F, x: &Tensor)
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> crate::Result<Var<'t>>,
{
    let r = grad_check(f, x, 1e-6, 1e-5).unwrap();
    assert!(r.passed, "grad check failed: {r:?}");
}

fn check2<F>(f: F, a: &Tensor, b: &Tensor)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> crate::Result<Var<'t>>,
{
    let r = grad_check_many(f, &[a.clone(), b.clone()], 1e-6, 1e-5).unwrap();
    assert!(r.passed, "grad check failed: {r:?}");
}

fn a23() -> Tensor {
    t(2, 3, &[0.3, -0.2, 0.5, 0.1, 0.7, -0.4])
}

#[test]
fn forward_values() {
    let tape = Tape::new();
    let a = tape.constant(t(1, 2, &[1.0, 2.0]));
    let b = tape.constant(t(1, 2, &[3.0, 5.0]));
    assert_eq!(a.add(b).unwrap().value().values(), &[4.0, 7.0]);
    assert_eq!(a.mul(b).unwrap().value().values(), &[3.0, 10.0]);
    assert_eq!(a.matmul(b.t().unwrap()).unwrap().item().unwrap(), 13.0);
    let s = a.softmax(1).unwrap().value();
    assert!((s.values()[0] + s.values()[1] - 1.0).abs() < 1e-15);
}

#[test]
fn broadcasting_grads() {
    let row = t(1, 3, &[0.2, -0.1, 0.4]);
    let col = t(2, 1, &[0.6, -0.3]);
    for op in 0..4 {
        check2(
            |_, v| {
                let x = v[0].add(v[1].scale(0.0)?.add_scalar(0.0)?)?;
                let y = match op {
                    0 => x.add(v[1])?,
                    1 => x.sub(v[1])?,
                    2 => x.mul(v[1])?,
                    _ => x.div(v[1].add_scalar(2.0)?)?,
                };
                y.square()?.sum()
            },
            &a23(),
            &row,
        );
        check2(
            |_, v| {
                let y = match op {
                    0 => v[0].add(v[1])?,
                    1 => v[0].sub(v[1])?,
                    2 => v[0].mul(v[1])?,
                    _ => v[0].div(v[1].add_scalar(2.0)?)?,
                };
                y.square()?.sum()
            },
            &a23(),
            &col,
        );
    }
}

#[test]
fn elementwise_grads() {
    let x = a23();
    check1(|_, v| v.tanh()?.sum(), &x);
    check1(|_, v| v.atanh()?.sum(), &x);
    check1(|_, v| v.sigmoid()?.sum(), &x);
    check1(|_, v| v.exp()?.sum(), &x);
    check1(|_, v| v.square()?.add_scalar(0.5)?.ln()?.sum(), &x);
    check1(|_, v| v.square()?.add_scalar(0.1)?.sqrt()?.sum(), &x);
    check1(|_, v| v.relu()?.square()?.sum(), &x);
    check1(|_, v| v.neg()?.scale(3.0)?.exp()?.mean(), &x);
}

#[test]
fn matrix_grads() {
    let b = t(3, 2, &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]);
    check2(|_, v| v[0].matmul(v[1])?.tanh()?.sum(), &a23(), &b);
    check2(
        |tape, v| {
            let c = tape.concat_cols(&[v[0], v[1].t()?])?;
            c.square()?.row_sum()?.sqrt()?.sum()
        },
        &a23(),
        &t(3, 2, &[0.3, 0.1, -0.2, 0.7, 0.0, 0.4]),
    );
    check1(|_, v| v.t()?.col_sum()?.square()?.sum(), &a23());
    check1(|_, v| v.row_norm()?.square()?.sum(), &a23());
    check1(|_, v| v.norm(), &a23());
    check1(|_, v| v.row_dot(v.tanh()?)?.sum(), &a23());
}

#[test]
fn softmax_grads() {
    let w = t(2, 3, &[1.0, -2.0, 0.5, 0.3, 0.9, -1.1]);
    for axis in 0..2 {
        check2(
            |tape, v| {
                let _ = tape;
                v[0].softmax(axis)?.mul(v[1])?.sum()
            },
            &a23(),
            &w,
        );
    }
    let seg: Index = Arc::from(vec![0usize, 1, 0, 1, 1]);
    let x = t(5, 2, &[0.1, 0.2, 0.5, -0.3, 0.9, 0.4, -0.2, 0.6, 0.3, 0.8]);
    let w = t(5, 2, &[1.0, 2.0, -1.0, 0.5, 0.3, 0.9, 1.2, -0.4, 0.7, 0.1]);
    check2(
        |_, v| v[0].segment_softmax(&seg, 2)?.mul(v[1])?.sum(),
        &x,
        &w,
    );
}

#[test]
fn segment_softmax_normalises_each_segment() {
    let tape = Tape::new();
    let seg: Index = Arc::from(vec![1usize, 0, 1, 1]);
    let x = tape.constant(t(4, 1, &[1.0, 5.0, 2.0, 3.0]));
    let y = x.segment_softmax(&seg, 2).unwrap().value();
    assert_eq!(y.values()[1], 1.0);
    let s: f64 = [0, 2, 3].iter().map(|&i| y.values()[i]).sum();
    assert!((s - 1.0).abs() < 1e-15);
}

#[test]
fn gather_and_segment_sum_grads() {
    let idx: Index = Arc::from(vec![1usize, 0, 1, 1]);
    check1(|_, v| v.gather_rows(&idx)?.tanh()?.sum(), &a23());
    let seg: Index = Arc::from(vec![2usize, 0, 2, 0]);
    let x = t(4, 2, &[0.1, 0.2, 0.5, -0.3, 0.9, 0.4, -0.2, 0.6]);
    check1(|_, v| v.segment_sum(&seg, 3)?.square()?.sum(), &x);
    let tape = Tape::new();
    let y = tape.constant(x).segment_sum(&seg, 3).unwrap().value();
    assert_eq!(y.row_values(1), &[0.0, 0.0]);
}

#[test]
fn ratio_grads_including_tiny_arguments() {
    for scale in [1.0, 1e-4] {
        let x = t(1, 3, &[0.3 * scale, -0.2 * scale, 0.7 * scale]);
        check1(|_, v| v.tanh_ratio(2.0)?.mul(v)?.sum(), &x);
        check1(|_, v| v.atanh_ratio(0.9)?.mul(v)?.sum(), &x);
    }
    let tape = Tape::new();
    let z = tape.constant(Tensor::zeros(1, 1));
    assert_eq!(z.tanh_ratio(1.0).unwrap().item().unwrap(), 1.0);
    assert_eq!(z.atanh_ratio(1.0).unwrap().item().unwrap(), 1.0);
}

#[test]
fn ratio_series_matches_closed_form_near_cutoff() {
    for t in [9.99e-4, 1.001e-3] {
        assert!((super::tanh_ratio(t) - t.tanh() / t).abs() < 1e-14);
        assert!((super::atanh_ratio(t) - t.atanh() / t).abs() < 1e-14);
    }
}

#[test]
fn project_rows_grad() {
    let x = t(2, 2, &[0.9, 0.8, 0.1, 0.2]);
    check1(|_, v| v.project_rows(0.5)?.tanh()?.sum(), &x);
    let tape = Tape::new();
    let y = tape.constant(x).project_rows(0.5).unwrap().value();
    let n = (y.values()[0].powi(2) + y.values()[1].powi(2)).sqrt();
    assert!((n - 0.5).abs() < 1e-15);
    assert_eq!(y.row_values(1), &[0.1, 0.2]);
}

#[test]
fn shape_errors() {
    let tape = Tape::new();
    let a = tape.constant(a23());
    let b = tape.constant(t(3, 2, &[0.0; 6]));
    assert!(matches!(a.add(b), Err(Error::Shape(_))));
    assert!(matches!(a.matmul(a), Err(Error::Shape(_))));
    let idx: Index = Arc::from(vec![5usize]);
    assert!(matches!(a.gather_rows(&idx), Err(Error::Shape(_))));
}

#[test]
fn backward_requires_scalar() {
    let tape = Tape::new();
    let a = tape.param(a23());
    assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
}

#[test]
fn non_finite_forward_is_numerical_error() {
    let tape = Tape::new();
    let a = tape.param(t(1, 1, &[1000.0]));
    assert!(matches!(a.exp(), Err(Error::Numerical(_))));
}

#[test]
fn unreached_leaf_gets_zero_gradient() {
    let tape = Tape::new();
    let a = tape.param(a23());
    let b = tape.param(t(1, 2, &[1.0, 2.0]));
    let loss = a.sum().unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(b).values(), &[0.0, 0.0]);
    assert_eq!(g.wrt(a).values(), &[1.0; 6]);
}

#[test]
fn shared_subexpression_accumulates() {
    let tape = Tape::new();
    let a = tape.param(t(1, 1, &[3.0]));
    let loss = a.mul(a).unwrap().add(a).unwrap().sum().unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(a).item().unwrap(), 7.0);
}

#[test]
fn grad_check_reports_broken_gradient() {
    // relu at exactly zero has a kink the check must flag.
    let r = grad_check(|_, v| v.relu()?.sum(), &t(1, 1, &[0.0]), 1e-6, 1e-5).unwrap();
    assert!(!r.passed);
}

#[test]
fn concat_rows_grad() {
    check2(
        |tape, v| {
            let c = tape.concat_rows(&[v[0], v[1]])?;
            c.tanh()?.row_norm()?.sum()
        },
        &a23(),
        &t(1, 3, &[0.3, 0.1, -0.2]),
    );
}
