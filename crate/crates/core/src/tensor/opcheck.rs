//! Finite-difference checks of every differentiable tape op in isolation.

use super::gradcheck::{finite_diff_check, FdOptions, GradCheckReport};
use super::rng::{derive_seed, Rng};
use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::Result;

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).expect("shape")
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let t = randn(shape, seed);
    Tensor::new(shape, t.data().iter().map(|v| v.abs() + 0.5).collect()).expect("shape")
}

/// Sums `y` against fixed random weights so every output entry matters.
fn contract(tape: &mut Tape, y: Var) -> Result<Var> {
    let w = randn(tape.shape(y), 0xC0);
    let wv = tape.leaf(&w);
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

fn unary(f: fn(&mut Tape, Var) -> Var) -> OpFn {
    Box::new(move |t, v| {
        let y = f(t, v[0]);
        contract(t, y)
    })
}

fn binary(f: fn(&mut Tape, Var, Var) -> Result<Var>) -> OpFn {
    Box::new(move |t, v| {
        let y = f(t, v[0], v[1])?;
        contract(t, y)
    })
}

fn cases() -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let x = |s: u64| randn(&[3, 4], s);
    let mask: Vec<bool> = (0..24).map(|i| i % 4 != 1).collect();
    let labels: Vec<f64> = (0..10).map(|i| (i % 3 == 0) as u8 as f64).collect();
    vec![
        ("relu", vec![x(1)], unary(Tape::relu)),
        ("gelu", vec![x(2)], unary(Tape::gelu)),
        ("sigmoid", vec![x(3)], unary(Tape::sigmoid)),
        ("tanh", vec![x(4)], unary(Tape::tanh)),
        ("exp", vec![x(5)], unary(Tape::exp)),
        ("ln", vec![positive(&[3, 4], 6)], unary(Tape::ln)),
        ("abs", vec![x(7)], unary(Tape::abs)),
        ("neg", vec![x(8)], unary(Tape::neg)),
        ("add", vec![x(9), x(10)], binary(Tape::add)),
        ("sub", vec![x(11), x(12)], binary(Tape::sub)),
        ("mul", vec![x(13), x(14)], binary(Tape::mul)),
        ("div", vec![x(15), positive(&[3, 4], 16)], binary(Tape::div)),
        ("minimum", vec![x(17), x(18)], binary(Tape::minimum)),
        ("maximum", vec![x(19), x(20)], binary(Tape::maximum)),
        (
            "scale",
            vec![x(21)],
            Box::new(|t, v| {
                let y = t.scale(v[0], -1.7);
                contract(t, y)
            }),
        ),
        (
            "add_scalar",
            vec![x(22)],
            Box::new(|t, v| {
                let y = t.add_scalar(v[0], 0.3);
                let y = t.mul(y, y)?;
                contract(t, y)
            }),
        ),
        ("add_row", vec![randn(&[2, 3, 4], 23), randn(&[4], 24)], binary(Tape::add_row)),
        ("matmul", vec![randn(&[2, 3, 4], 25), randn(&[4, 5], 26)], binary(Tape::matmul)),
        ("matmul_batched", vec![randn(&[2, 3, 4], 27), randn(&[2, 4, 2], 28)], binary(Tape::matmul)),
        ("matmul_t", vec![randn(&[2, 3, 5], 29), randn(&[2, 6, 5], 30)], binary(Tape::matmul_t)),
        (
            "softmax",
            vec![randn(&[2, 3, 4], 31)],
            Box::new(|t, v| {
                let a = t.softmax(v[0], 2)?;
                let b = t.softmax(v[0], 1)?;
                let s = t.add(a, b)?;
                contract(t, s)
            }),
        ),
        (
            "masked_softmax",
            vec![randn(&[2, 3, 4], 32)],
            Box::new(move |t, v| {
                let y = t.masked_softmax(v[0], &mask)?;
                contract(t, y)
            }),
        ),
        (
            "layer_norm",
            vec![randn(&[2, 3, 4], 33), randn(&[4], 34), randn(&[4], 35)],
            Box::new(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                contract(t, y)
            }),
        ),
        (
            "batch_norm_train",
            vec![randn(&[2, 3, 4], 36), randn(&[4], 37), randn(&[4], 38)],
            Box::new(|t, v| {
                let (y, _, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                contract(t, y)
            }),
        ),
        (
            "batch_norm_eval",
            vec![randn(&[2, 3, 4], 39), randn(&[4], 40), randn(&[4], 41)],
            Box::new(|t, v| {
                let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3, 0.0], &[1.5, 0.5, 2.0, 1.0], 1e-5)?;
                contract(t, y)
            }),
        ),
        (
            "l2_normalize",
            vec![randn(&[2, 3, 4], 42)],
            Box::new(|t, v| {
                let a = t.l2_normalize(v[0], 2, 1e-12)?;
                let b = t.l2_normalize(v[0], 1, 1e-12)?;
                let s = t.add(a, b)?;
                contract(t, s)
            }),
        ),
        (
            "conv2d",
            vec![randn(&[2, 5, 6, 2], 43), randn(&[3, 3, 2, 4], 44)],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], 2, 1, 1)?;
                contract(t, y)
            }),
        ),
        (
            "conv2d_depthwise",
            vec![randn(&[2, 5, 5, 4], 45), randn(&[3, 3, 1, 4], 46)],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], 2, 1, 4)?;
                contract(t, y)
            }),
        ),
        (
            "bilinear_resize",
            vec![randn(&[2, 3, 4, 2], 47)],
            Box::new(|t, v| {
                let a = t.bilinear_resize(v[0], 7, 5)?;
                let a = contract(t, a)?;
                let b = t.bilinear_resize(v[0], 2, 2)?;
                let b = contract(t, b)?;
                t.add(a, b)
            }),
        ),
        (
            "max_axis",
            vec![randn(&[2, 5, 3], 48)],
            Box::new(|t, v| {
                let y = t.max_axis(v[0], 1)?;
                contract(t, y)
            }),
        ),
        (
            "concat",
            vec![randn(&[2, 2, 4], 49), randn(&[2, 3, 4], 50)],
            Box::new(|t, v| {
                let y = t.concat(&[v[0], v[1]], 1)?;
                contract(t, y)
            }),
        ),
        (
            "slice",
            vec![randn(&[2, 5, 4], 51)],
            Box::new(|t, v| {
                let a = t.slice(v[0], 1, 1, 3)?;
                let a = contract(t, a)?;
                let b = t.slice(v[0], 2, 2, 2)?;
                let b = contract(t, b)?;
                t.add(a, b)
            }),
        ),
        (
            "expand",
            vec![randn(&[2, 1, 3], 52)],
            Box::new(|t, v| {
                let y = t.expand(v[0], 1, 4)?;
                let y = t.mul(y, y)?;
                contract(t, y)
            }),
        ),
        (
            "reshape",
            vec![randn(&[2, 6], 53)],
            Box::new(|t, v| {
                let y = t.reshape(v[0], &[3, 4])?;
                let y = t.mul(y, y)?;
                contract(t, y)
            }),
        ),
        (
            "gather_rows",
            vec![randn(&[4, 3], 54)],
            Box::new(|t, v| {
                let y = t.gather_rows(v[0], &[0, 2, 2, 1, 3])?;
                contract(t, y)
            }),
        ),
        (
            "split_merge_heads",
            vec![randn(&[2, 3, 4], 55)],
            Box::new(|t, v| {
                let h = t.split_heads(v[0], 2)?;
                let a = contract(t, h)?;
                let m = t.merge_heads(h)?;
                let m = t.mul(m, m)?;
                let b = contract(t, m)?;
                t.add(a, b)
            }),
        ),
        (
            "sum_mean",
            vec![x(56)],
            Box::new(|t, v| {
                let sq = t.mul(v[0], v[0])?;
                let a = t.sum(sq);
                let b = t.mean(v[0]);
                t.add(a, b)
            }),
        ),
        (
            "bce_with_logits_mean",
            vec![randn(&[10], 57)],
            Box::new(move |t, v| {
                let z = t.scale(v[0], 3.0);
                t.bce_with_logits_mean(z, &labels)
            }),
        ),
    ]
}

/// Runs every op check; returns `(op, report)` pairs.
pub fn op_gradchecks(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    cases()
        .into_iter()
        .map(|(name, params, f)| {
            let params: Vec<Tensor> = params
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let jitter = randn(p.shape(), derive_seed(seed, &format!("{name}/{i}")));
                    let data = p.data().iter().zip(jitter.data()).map(|(a, b)| a + 1e-3 * b).collect();
                    Tensor::new(p.shape(), data).expect("shape")
                })
                .collect();
            let opts = FdOptions {
                seed,
                ..FdOptions::default()
            };
            Ok((name, finite_diff_check(f, &params, &opts)?))
        })
        .collect()
}
