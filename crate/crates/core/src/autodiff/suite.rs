//! Finite-difference checks of every kernel at seeded random points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, Tape, Tensor, Var};
use crate::error::Result;

pub const KERNEL_EPS: f64 = 1e-5;
pub const KERNEL_TOLERANCE: f64 = 1e-4;
const TRIALS: u64 = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct KernelCheck {
    /// Kernel name, with the case in brackets when a kernel has several.
    pub name: String,
    pub worst: f64,
}

pub(super) fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Scalar probe `sum(c * y)` with fixed random weights, so every output
/// coordinate contributes to the checked gradient.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(y).shape().to_vec();
    let c = tape.constant(random(&shape, -1.0, 1.0, &mut rng));
    let prod = tape.hadamard(y, c)?;
    tape.sum_all(prod)
}

/// Worst relative error of a unary kernel over random points.
pub fn check_unary(
    shape: &[usize],
    range: (f64, f64),
    f: impl Fn(&mut Tape, Var) -> Result<Var> + Copy,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0_f64;
    for trial in 0..TRIALS {
        let point = random(shape, range.0, range.1, &mut rng);
        let err = grad_check(
            |tape, x| {
                let y = f(tape, x)?;
                probe(tape, y, 100 + trial)
            },
            &point,
            KERNEL_EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Worst relative error over both operands of a binary kernel.
pub fn check_binary(
    shapes: (&[usize], &[usize]),
    ranges: ((f64, f64), (f64, f64)),
    f: impl Fn(&mut Tape, Var, Var) -> Result<Var> + Copy,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0_f64;
    for trial in 0..TRIALS {
        let a = random(shapes.0, ranges.0 .0, ranges.0 .1, &mut rng);
        let b = random(shapes.1, ranges.1 .0, ranges.1 .1, &mut rng);
        let ea = grad_check(
            |tape, x| {
                let other = tape.constant(b.clone());
                let y = f(tape, x, other)?;
                probe(tape, y, 200 + trial)
            },
            &a,
            KERNEL_EPS,
        )?;
        let eb = grad_check(
            |tape, x| {
                let other = tape.constant(a.clone());
                let y = f(tape, other, x)?;
                probe(tape, y, 300 + trial)
            },
            &b,
            KERNEL_EPS,
        )?;
        worst = worst.max(ea).max(eb);
    }
    Ok(worst)
}

type Unary = fn(&mut Tape, Var) -> Result<Var>;
type Binary = fn(&mut Tape, Var, Var) -> Result<Var>;

/// Checks every kernel the tape can record.
pub fn kernel_suite() -> Result<Vec<KernelCheck>> {
    let mut out = Vec::new();
    let mut push = |name: &str, worst: f64| {
        out.push(KernelCheck {
            name: name.to_string(),
            worst,
        })
    };
    let u1 = (-1.0, 1.0);
    push(
        "conv2d_same[3x3]",
        check_binary((&[6, 5, 2], &[3, 3, 2, 3]), (u1, u1), |t, x, w| {
            t.conv2d_same(x, w)
        })?,
    );
    push(
        "conv2d_same[7x7]",
        check_binary((&[6, 5, 2], &[7, 7, 2, 3]), (u1, u1), |t, x, w| {
            t.conv2d_same(x, w)
        })?,
    );
    push(
        "channel_avg_pool",
        check_unary(&[4, 3, 5], u1, |t, x| t.channel_avg_pool(x))?,
    );
    // continuous random points have a unique maximum per location
    push(
        "channel_max_pool",
        check_unary(&[4, 3, 5], u1, |t, x| t.channel_max_pool(x))?,
    );
    push(
        "concat[axis 2]",
        check_binary((&[3, 2, 2], &[3, 2, 1]), (u1, u1), |t, a, b| {
            t.concat(&[a, b], 2)
        })?,
    );
    push(
        "concat[axis 0]",
        check_binary((&[2, 4], &[3, 4]), (u1, u1), |t, a, b| t.concat(&[a, b], 0))?,
    );
    push(
        "stack",
        check_binary((&[2, 3], &[2, 3]), (u1, u1), |t, a, b| t.stack(&[a, b, a]))?,
    );
    push("slice", check_unary(&[5, 3], u1, |t, x| t.slice(x, 1, 3))?);
    push(
        "reshape",
        check_unary(&[4, 3], u1, |t, x| t.reshape(x, &[2, 6]))?,
    );
    let unary: [(&str, (f64, f64), Unary); 7] = [
        ("sigmoid", (-3.0, 3.0), |t, x| t.sigmoid(x)),
        ("scale", u1, |t, x| t.scale(x, -1.7)),
        ("sqrt", (0.2, 3.0), |t, x| t.sqrt(x)),
        ("square", (-2.0, 2.0), |t, x| t.square(x)),
        ("exp", (-2.0, 2.0), |t, x| t.exp(x)),
        ("log", (0.2, 3.0), |t, x| t.log(x)),
        ("clamp_min", (0.1, 1.0), |t, x| t.clamp_min(x, 0.05)),
    ];
    for (name, range, f) in unary {
        push(name, check_unary(&[3, 4], range, f)?);
    }
    let binary: [(&str, (f64, f64), Binary); 5] = [
        ("add", u1, |t, a, b| t.add(a, b)),
        ("sub", u1, |t, a, b| t.sub(a, b)),
        ("hadamard", u1, |t, a, b| t.hadamard(a, b)),
        ("div", (0.5, 2.0), |t, a, b| t.div(a, b)),
        ("logaddexp", (-3.0, 3.0), |t, a, b| t.logaddexp(a, b)),
    ];
    for (name, range, f) in binary {
        push(name, check_binary((&[2, 5], &[2, 5]), (range, range), f)?);
    }
    push(
        "matvec",
        check_binary((&[4, 3], &[3]), (u1, u1), |t, m, x| t.matvec(m, x))?,
    );
    for axis in [0, 1, 2] {
        push(
            &format!("reduce_mean[axis {axis}]"),
            check_unary(&[3, 4, 2], u1, move |t, x| t.reduce_mean(x, axis))?,
        );
        push(
            &format!("reduce_sum[axis {axis}]"),
            check_unary(&[3, 4, 2], u1, move |t, x| t.reduce_sum(x, axis))?,
        );
        push(
            &format!("reduce_var[axis {axis}]"),
            check_unary(&[3, 4, 2], u1, move |t, x| t.reduce_var(x, axis))?,
        );
    }
    push(
        "l2_normalize",
        check_unary(&[6], u1, |t, x| t.l2_normalize(x))?,
    );
    push(
        "cosine_sim",
        check_binary((&[6], &[6]), (u1, u1), |t, a, b| t.cosine_sim(a, b))?,
    );
    push(
        "softmax_xent",
        check_unary(&[5], u1, |t, x| t.softmax_xent(x, 2, 0.5))?,
    );
    push(
        "avg_pool2",
        check_unary(&[4, 6, 3], u1, |t, x| t.avg_pool2(x))?,
    );
    push(
        "expand_channels",
        check_unary(&[4, 3], u1, |t, x| t.expand_channels(x, 3))?,
    );
    push(
        "broadcast_rows",
        check_unary(&[4], u1, |t, x| t.broadcast_rows(x, 3))?,
    );
    Ok(out)
}
