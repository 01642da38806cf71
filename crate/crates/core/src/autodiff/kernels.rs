//! Forward and vector-Jacobian definitions for every recorded kernel.
//!
//! Images use a height × width × channels layout. Convolution kernels are
//! `[kh, kw, c_in, c_out]` and are applied with zero "same" padding.

use std::fmt;
use std::str::FromStr;

use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// Inputs below this are clamped before `sqrt`.
pub const SQRT_CLAMP: f64 = 1e-12;
/// Norm floor for `l2_normalize` and `cosine_sim`.
pub const NORM_EPS: f64 = 1e-12;
/// Inputs below this are clamped before `log`.
const LOG_CLAMP: f64 = 1e-300;

/// A differentiable kernel plus its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Kernel {
    Conv2dSame,
    ChannelAvgPool,
    ChannelMaxPool,
    Concat { axis: usize },
    Sigmoid,
    Add,
    Sub,
    Hadamard,
    Div,
    Scale(f64),
    Sqrt,
    Square,
    Exp,
    Log,
    ClampMin(f64),
    LogAddExp,
    MatVec,
    ReduceMean { axis: usize },
    ReduceSum { axis: usize },
    ReduceVar { axis: usize },
    L2Normalize,
    CosineSim,
    SoftmaxXent { target: usize, temperature: f64 },
    Stack,
    Slice { start: usize, len: usize },
    Reshape(Vec<usize>),
    AvgPool2,
    ExpandChannels(usize),
    BroadcastRows(usize),
}

impl Kernel {
    pub fn name(&self) -> &'static str {
        match self {
            Kernel::Conv2dSame => "conv2d_same",
            Kernel::ChannelAvgPool => "channel_avg_pool",
            Kernel::ChannelMaxPool => "channel_max_pool",
            Kernel::Concat { .. } => "concat",
            Kernel::Sigmoid => "sigmoid",
            Kernel::Add => "add",
            Kernel::Sub => "sub",
            Kernel::Hadamard => "hadamard",
            Kernel::Div => "div",
            Kernel::Scale(_) => "scale",
            Kernel::Sqrt => "sqrt",
            Kernel::Square => "square",
            Kernel::Exp => "exp",
            Kernel::Log => "log",
            Kernel::ClampMin(_) => "clamp_min",
            Kernel::LogAddExp => "logaddexp",
            Kernel::MatVec => "matvec",
            Kernel::ReduceMean { .. } => "reduce_mean",
            Kernel::ReduceSum { .. } => "reduce_sum",
            Kernel::ReduceVar { .. } => "reduce_var",
            Kernel::L2Normalize => "l2_normalize",
            Kernel::CosineSim => "cosine_sim",
            Kernel::SoftmaxXent { .. } => "softmax_xent",
            Kernel::Stack => "stack",
            Kernel::Slice { .. } => "slice",
            Kernel::Reshape(_) => "reshape",
            Kernel::AvgPool2 => "avg_pool2",
            Kernel::ExpandChannels(_) => "expand_channels",
            Kernel::BroadcastRows(_) => "broadcast_rows",
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses `name` or `name(arg, ...)`, e.g. `sigmoid`, `scale(0.5)`,
/// `softmax_xent(0, 1.0)`.
impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(open) if s.ends_with(')') => (&s[..open], &s[open + 1..s.len() - 1]),
            _ => (s, ""),
        };
        let args: Vec<&str> = args
            .split(',')
            .map(str::trim)
            .filter(|a| !a.is_empty())
            .collect();
        let bad = || Error::Parse(format!("bad attributes for kernel `{s}`"));
        let uint =
            |i: usize| -> Result<usize> { args.get(i).ok_or_else(bad)?.parse().map_err(|_| bad()) };
        let float =
            |i: usize| -> Result<f64> { args.get(i).ok_or_else(bad)?.parse().map_err(|_| bad()) };
        let axis = || -> Result<usize> {
            if args.is_empty() {
                Ok(0)
            } else {
                uint(0)
            }
        };
        Ok(match name {
            "conv2d_same" => Kernel::Conv2dSame,
            "channel_avg_pool" => Kernel::ChannelAvgPool,
            "channel_max_pool" => Kernel::ChannelMaxPool,
            "concat" => Kernel::Concat { axis: axis()? },
            "sigmoid" => Kernel::Sigmoid,
            "add" => Kernel::Add,
            "sub" => Kernel::Sub,
            "hadamard" => Kernel::Hadamard,
            "div" => Kernel::Div,
            "scale" => Kernel::Scale(float(0)?),
            "sqrt" => Kernel::Sqrt,
            "square" => Kernel::Square,
            "exp" => Kernel::Exp,
            "log" => Kernel::Log,
            "clamp_min" => Kernel::ClampMin(float(0)?),
            "logaddexp" => Kernel::LogAddExp,
            "matvec" => Kernel::MatVec,
            "reduce_mean" => Kernel::ReduceMean { axis: axis()? },
            "reduce_sum" => Kernel::ReduceSum { axis: axis()? },
            "reduce_var" => Kernel::ReduceVar { axis: axis()? },
            "l2_normalize" => Kernel::L2Normalize,
            "cosine_sim" => Kernel::CosineSim,
            "softmax_xent" => Kernel::SoftmaxXent {
                target: uint(0)?,
                temperature: if args.len() > 1 { float(1)? } else { 1.0 },
            },
            "stack" => Kernel::Stack,
            "slice" => Kernel::Slice {
                start: uint(0)?,
                len: uint(1)?,
            },
            "reshape" => Kernel::Reshape(
                args.iter()
                    .map(|a| a.parse().map_err(|_| bad()))
                    .collect::<Result<_>>()?,
            ),
            "avg_pool2" => Kernel::AvgPool2,
            "expand_channels" => Kernel::ExpandChannels(uint(0)?),
            "broadcast_rows" => Kernel::BroadcastRows(uint(0)?),
            other => return Err(Error::UnsupportedKernel(other.to_string())),
        })
    }
}

/// Values a kernel keeps from its forward pass for the backward pass.
#[derive(Clone, Debug, Default)]
pub(crate) enum Saved {
    #[default]
    None,
    Indices(Vec<usize>),
    Scalars(Vec<f64>),
}

pub(crate) struct Forward {
    pub value: Tensor,
    pub saved: Saved,
    pub flops: u64,
}

fn fwd(value: Tensor, flops: u64) -> Result<Forward> {
    Ok(Forward {
        value,
        saved: Saved::None,
        flops,
    })
}

fn arity(kernel: &Kernel, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return dim_err(format!("{kernel} takes {n} input(s), got {}", inputs.len()));
    }
    Ok(())
}

fn same_shape(kernel: &Kernel, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!(
            "{kernel}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn rank_is(kernel: &Kernel, t: &Tensor, r: usize) -> Result<()> {
    if t.rank() != r {
        return dim_err(format!(
            "{kernel} expects a rank-{r} input, got shape {:?}",
            t.shape()
        ));
    }
    Ok(())
}

/// `[outer, n, inner]` view of a shape split at `axis`.
fn split_axis(kernel: &Kernel, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return dim_err(format!(
            "{kernel}: axis {axis} out of range for shape {shape:?}"
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logaddexp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn elementwise(x: &Tensor, f: impl Fn(f64) -> f64) -> Result<Forward> {
    let n = x.numel() as u64;
    fwd(x.map(f), n)
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked")
}

pub(crate) fn forward(kernel: &Kernel, inputs: &[&Tensor]) -> Result<Forward> {
    match kernel {
        Kernel::Conv2dSame => {
            arity(kernel, inputs, 2)?;
            conv2d_same(inputs[0], inputs[1])
        }
        Kernel::ChannelAvgPool | Kernel::ChannelMaxPool => {
            arity(kernel, inputs, 1)?;
            let x = inputs[0];
            rank_is(kernel, x, 3)?;
            let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            if c == 0 {
                return dim_err(format!("{kernel}: zero channels"));
            }
            let mut out = Vec::with_capacity(h * w);
            let mut idx = Vec::new();
            for px in x.data().chunks(c) {
                if *kernel == Kernel::ChannelAvgPool {
                    out.push(px.iter().sum::<f64>() / c as f64);
                } else {
                    let mut best = 0;
                    for (i, &v) in px.iter().enumerate() {
                        if v > px[best] {
                            best = i;
                        }
                    }
                    out.push(px[best]);
                    idx.push(best);
                }
            }
            Ok(Forward {
                value: Tensor::new(vec![h, w, 1], out)?,
                saved: if *kernel == Kernel::ChannelMaxPool {
                    Saved::Indices(idx)
                } else {
                    Saved::None
                },
                flops: x.numel() as u64,
            })
        }
        Kernel::Concat { axis } => {
            if inputs.is_empty() {
                return dim_err("concat of zero tensors");
            }
            let first = inputs[0].shape();
            let (outer, _, inner) = split_axis(kernel, first, *axis)?;
            let mut total = 0;
            for t in inputs {
                let s = t.shape();
                if s.len() != first.len()
                    || s.iter()
                        .zip(first)
                        .enumerate()
                        .any(|(i, (a, b))| i != *axis && a != b)
                {
                    return dim_err(format!(
                        "concat along axis {axis}: shapes {first:?} and {s:?} do not conform"
                    ));
                }
                total += s[*axis];
            }
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let block = t.shape()[*axis] * inner;
                    data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            let mut shape = first.to_vec();
            shape[*axis] = total;
            fwd(Tensor::new(shape, data)?, 0)
        }
        Kernel::Sigmoid => {
            arity(kernel, inputs, 1)?;
            elementwise(inputs[0], sigmoid)
        }
        Kernel::Add | Kernel::Sub | Kernel::Hadamard | Kernel::Div | Kernel::LogAddExp => {
            arity(kernel, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            same_shape(kernel, a, b)?;
            let value = match kernel {
                Kernel::Add => zip(a, b, |x, y| x + y),
                Kernel::Sub => zip(a, b, |x, y| x - y),
                Kernel::Hadamard => zip(a, b, |x, y| x * y),
                Kernel::Div => zip(a, b, |x, y| x / y),
                _ => zip(a, b, logaddexp),
            };
            fwd(value, a.numel() as u64)
        }
        Kernel::Scale(s) => {
            arity(kernel, inputs, 1)?;
            let s = *s;
            elementwise(inputs[0], |x| x * s)
        }
        Kernel::Sqrt => {
            arity(kernel, inputs, 1)?;
            elementwise(inputs[0], |x| x.max(SQRT_CLAMP).sqrt())
        }
        Kernel::Square => {
            arity(kernel, inputs, 1)?;
            elementwise(inputs[0], |x| x * x)
        }
        Kernel::Exp => {
            arity(kernel, inputs, 1)?;
            elementwise(inputs[0], f64::exp)
        }
        Kernel::Log => {
            arity(kernel, inputs, 1)?;
            elementwise(inputs[0], |x| x.max(LOG_CLAMP).ln())
        }
        Kernel::ClampMin(floor) => {
            arity(kernel, inputs, 1)?;
            let floor = *floor;
            elementwise(inputs[0], |x| x.max(floor))
        }
        Kernel::MatVec => {
            arity(kernel, inputs, 2)?;
            let (m, x) = (inputs[0], inputs[1]);
            rank_is(kernel, m, 2)?;
            rank_is(kernel, x, 1)?;
            let (rows, cols) = (m.shape()[0], m.shape()[1]);
            if cols != x.numel() {
                return dim_err(format!(
                    "matvec: matrix {:?} cannot multiply vector of length {}",
                    m.shape(),
                    x.numel()
                ));
            }
            let out = m
                .data()
                .chunks(cols.max(1))
                .take(rows)
                .map(|r| r.iter().zip(x.data()).map(|(a, b)| a * b).sum())
                .collect();
            fwd(Tensor::vector(out), 2 * (rows * cols) as u64)
        }
        Kernel::ReduceMean { axis } | Kernel::ReduceSum { axis } | Kernel::ReduceVar { axis } => {
            arity(kernel, inputs, 1)?;
            let x = inputs[0];
            let (outer, n, inner) = split_axis(kernel, x.shape(), *axis)?;
            if n == 0 {
                return dim_err(format!("{kernel}: empty axis"));
            }
            let mut sums = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..n {
                    let base = (o * n + k) * inner;
                    for i in 0..inner {
                        sums[o * inner + i] += x.data()[base + i];
                    }
                }
            }
            let shape = without_axis(x.shape(), *axis);
            let mut flops = x.numel() as u64;
            let out = match kernel {
                Kernel::ReduceSum { .. } => sums,
                Kernel::ReduceMean { .. } => {
                    flops += sums.len() as u64;
                    sums.iter().map(|s| s / n as f64).collect()
                }
                _ => {
                    let means: Vec<f64> = sums.iter().map(|s| s / n as f64).collect();
                    let mut acc = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for k in 0..n {
                            let base = (o * n + k) * inner;
                            for i in 0..inner {
                                let d = x.data()[base + i] - means[o * inner + i];
                                acc[o * inner + i] += d * d;
                            }
                        }
                    }
                    flops += 3 * x.numel() as u64 + 2 * acc.len() as u64;
                    acc.iter().map(|s| s / n as f64).collect()
                }
            };
            fwd(Tensor::new(shape, out)?, flops)
        }
        Kernel::L2Normalize => {
            arity(kernel, inputs, 1)?;
            let x = inputs[0];
            let norm = x.norm();
            let denom = norm.max(NORM_EPS);
            Ok(Forward {
                value: x.map(|v| v / denom),
                saved: Saved::Scalars(vec![norm]),
                flops: 3 * x.numel() as u64,
            })
        }
        Kernel::CosineSim => {
            arity(kernel, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            same_shape(kernel, a, b)?;
            let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
            let (na, nb) = (a.norm(), b.norm());
            let c = dot / (na.max(NORM_EPS) * nb.max(NORM_EPS));
            Ok(Forward {
                value: Tensor::scalar(c),
                saved: Saved::Scalars(vec![na, nb]),
                flops: 6 * a.numel() as u64,
            })
        }
        Kernel::SoftmaxXent {
            target,
            temperature,
        } => {
            arity(kernel, inputs, 1)?;
            let z = inputs[0];
            rank_is(kernel, z, 1)?;
            if *target >= z.numel() {
                return Err(Error::Index {
                    what: "softmax_xent classes",
                    index: *target,
                    len: z.numel(),
                });
            }
            if !(*temperature > 0.0) {
                return dim_err("softmax_xent: temperature must be positive");
            }
            let s: Vec<f64> = z.data().iter().map(|v| v / temperature).collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let probs: Vec<f64> = s.iter().map(|v| (v - lse).exp()).collect();
            Ok(Forward {
                value: Tensor::scalar(lse - s[*target]),
                saved: Saved::Scalars(probs),
                flops: 4 * z.numel() as u64,
            })
        }
        Kernel::Stack => {
            if inputs.is_empty() {
                return dim_err("stack of zero tensors");
            }
            let first = inputs[0].shape();
            let mut data = Vec::with_capacity(inputs.len() * inputs[0].numel());
            for t in inputs {
                if t.shape() != first {
                    return dim_err(format!(
                        "stack: shapes {first:?} and {:?} differ",
                        t.shape()
                    ));
                }
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![inputs.len()];
            shape.extend_from_slice(first);
            fwd(Tensor::new(shape, data)?, 0)
        }
        Kernel::Slice { start, len } => {
            arity(kernel, inputs, 1)?;
            let x = inputs[0];
            if x.rank() == 0 || start + len > x.shape()[0] {
                return dim_err(format!(
                    "slice [{start}, {}) out of range for shape {:?}",
                    start + len,
                    x.shape()
                ));
            }
            let stride = x.numel() / x.shape()[0].max(1);
            let data = x.data()[start * stride..(start + len) * stride].to_vec();
            let mut shape = x.shape().to_vec();
            shape[0] = *len;
            fwd(Tensor::new(shape, data)?, 0)
        }
        Kernel::Reshape(shape) => {
            arity(kernel, inputs, 1)?;
            fwd(inputs[0].clone().reshape(shape.clone())?, 0)
        }
        Kernel::AvgPool2 => {
            arity(kernel, inputs, 1)?;
            let x = inputs[0];
            rank_is(kernel, x, 3)?;
            let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            if h % 2 != 0 || w % 2 != 0 {
                return dim_err(format!("avg_pool2 needs even spatial dims, got {h}x{w}"));
            }
            let (oh, ow) = (h / 2, w / 2);
            let mut out = vec![0.0; oh * ow * c];
            for y in 0..h {
                for xx in 0..w {
                    let src = (y * w + xx) * c;
                    let dst = ((y / 2) * ow + xx / 2) * c;
                    for ch in 0..c {
                        out[dst + ch] += 0.25 * x.data()[src + ch];
                    }
                }
            }
            fwd(Tensor::new(vec![oh, ow, c], out)?, 2 * x.numel() as u64)
        }
        Kernel::ExpandChannels(c) => {
            arity(kernel, inputs, 1)?;
            let x = inputs[0];
            rank_is(kernel, x, 2)?;
            let mut data = Vec::with_capacity(x.numel() * c);
            for &v in x.data() {
                data.extend(std::iter::repeat_n(v, *c));
            }
            fwd(Tensor::new(vec![x.shape()[0], x.shape()[1], *c], data)?, 0)
        }
        Kernel::BroadcastRows(rows) => {
            arity(kernel, inputs, 1)?;
            let x = inputs[0];
            let mut data = Vec::with_capacity(x.numel() * rows);
            for _ in 0..*rows {
                data.extend_from_slice(x.data());
            }
            let mut shape = vec![*rows];
            shape.extend_from_slice(x.shape());
            fwd(Tensor::new(shape, data)?, 0)
        }
    }
}

fn conv2d_same(x: &Tensor, w: &Tensor) -> Result<Forward> {
    if x.rank() != 3 || w.rank() != 4 {
        return dim_err(format!(
            "conv2d_same expects image [h, w, c] and kernel [kh, kw, c_in, c_out], got {:?} and {:?}",
            x.shape(),
            w.shape()
        ));
    }
    let (h, wd, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, wci, co) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if wci != ci {
        return dim_err(format!(
            "conv2d_same: image has {ci} channels, kernel expects {wci}"
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return dim_err(format!("conv2d_same needs odd kernel sizes, got {kh}x{kw}"));
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; h * wd * co];
    let xd = x.data();
    let wdta = w.data();
    for y in 0..h {
        for xx in 0..wd {
            let o_base = (y * wd + xx) * co;
            for dy in 0..kh {
                let sy = y + dy;
                if sy < ph || sy - ph >= h {
                    continue;
                }
                let sy = sy - ph;
                for dx in 0..kw {
                    let sx = xx + dx;
                    if sx < pw || sx - pw >= wd {
                        continue;
                    }
                    let sx = sx - pw;
                    let x_base = (sy * wd + sx) * ci;
                    let w_base = (dy * kw + dx) * ci * co;
                    for i in 0..ci {
                        let xv = xd[x_base + i];
                        let wrow = &wdta[w_base + i * co..w_base + (i + 1) * co];
                        let orow = &mut out[o_base..o_base + co];
                        for (o, &wv) in orow.iter_mut().zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    }
    let flops = 2 * (h * wd * kh * kw * ci * co) as u64;
    fwd(Tensor::new(vec![h, wd, co], out)?, flops)
}

fn conv2d_same_backward(
    x: &Tensor,
    w: &Tensor,
    g: &[f64],
    need: [bool; 2],
) -> [Option<Vec<f64>>; 2] {
    let (h, wd, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, co) = (w.shape()[0], w.shape()[1], w.shape()[3]);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut gx = if need[0] {
        Some(vec![0.0; x.numel()])
    } else {
        None
    };
    let mut gw = if need[1] {
        Some(vec![0.0; w.numel()])
    } else {
        None
    };
    let xd = x.data();
    let wdta = w.data();
    for y in 0..h {
        for xx in 0..wd {
            let o_base = (y * wd + xx) * co;
            let grow = &g[o_base..o_base + co];
            for dy in 0..kh {
                let sy = y + dy;
                if sy < ph || sy - ph >= h {
                    continue;
                }
                let sy = sy - ph;
                for dx in 0..kw {
                    let sx = xx + dx;
                    if sx < pw || sx - pw >= wd {
                        continue;
                    }
                    let sx = sx - pw;
                    let x_base = (sy * wd + sx) * ci;
                    let w_base = (dy * kw + dx) * ci * co;
                    for i in 0..ci {
                        let wi = w_base + i * co;
                        if let Some(gx) = gx.as_mut() {
                            let wrow = &wdta[wi..wi + co];
                            gx[x_base + i] +=
                                grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if let Some(gw) = gw.as_mut() {
                            let xv = xd[x_base + i];
                            for (gwv, &gv) in gw[wi..wi + co].iter_mut().zip(grow) {
                                *gwv += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    [gx, gw]
}

/// Vector-Jacobian product: gradients for each input given the output
/// gradient `g`. Entries are `None` where `need` is false.
pub(crate) fn backward(
    kernel: &Kernel,
    inputs: &[&Tensor],
    output: &Tensor,
    saved: &Saved,
    g: &[f64],
    need: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let want = |i: usize| need.get(i).copied().unwrap_or(false);
    let in_len = inputs.first().map_or(0, |t| t.numel());
    let map1 = |f: &dyn Fn(usize) -> f64| -> Vec<Option<Vec<f64>>> {
        if want(0) {
            vec![Some((0..in_len).map(f).collect())]
        } else {
            vec![None]
        }
    };
    match kernel {
        Kernel::Conv2dSame => {
            conv2d_same_backward(inputs[0], inputs[1], g, [want(0), want(1)]).into()
        }
        Kernel::ChannelAvgPool => {
            let c = inputs[0].shape()[2];
            map1(&|i| g[i / c] / c as f64)
        }
        Kernel::ChannelMaxPool => {
            let c = inputs[0].shape()[2];
            let Saved::Indices(idx) = saved else {
                unreachable!("max pool saves indices")
            };
            if !want(0) {
                return vec![None];
            }
            let mut gx = vec![0.0; inputs[0].numel()];
            for (p, (&best, &gv)) in idx.iter().zip(g).enumerate() {
                gx[p * c + best] = gv;
            }
            vec![Some(gx)]
        }
        Kernel::Concat { axis } => {
            let shape = output.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            inputs
                .iter()
                .enumerate()
                .map(|(k, t)| {
                    let block = t.shape()[*axis] * inner;
                    let grad = want(k).then(|| {
                        let mut gx = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            let start = o * total + offset;
                            gx.extend_from_slice(&g[start..start + block]);
                        }
                        gx
                    });
                    offset += block;
                    grad
                })
                .collect()
        }
        Kernel::Sigmoid => {
            let y = output.data();
            map1(&|i| g[i] * y[i] * (1.0 - y[i]))
        }
        Kernel::Add => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.to_vec())],
        Kernel::Sub => vec![
            want(0).then(|| g.to_vec()),
            want(1).then(|| g.iter().map(|v| -v).collect()),
        ],
        Kernel::Hadamard => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            vec![
                want(0).then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
                want(1).then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
            ]
        }
        Kernel::Div => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            vec![
                want(0).then(|| g.iter().zip(b).map(|(g, b)| g / b).collect()),
                want(1).then(|| (0..g.len()).map(|i| -g[i] * a[i] / (b[i] * b[i])).collect()),
            ]
        }
        Kernel::LogAddExp => {
            let (a, b, y) = (inputs[0].data(), inputs[1].data(), output.data());
            vec![
                want(0).then(|| (0..g.len()).map(|i| g[i] * (a[i] - y[i]).exp()).collect()),
                want(1).then(|| (0..g.len()).map(|i| g[i] * (b[i] - y[i]).exp()).collect()),
            ]
        }
        Kernel::Scale(s) => map1(&|i| g[i] * s),
        Kernel::Sqrt => {
            let (x, y) = (inputs[0].data(), output.data());
            map1(&|i| {
                if x[i] > SQRT_CLAMP {
                    0.5 * g[i] / y[i]
                } else {
                    0.0
                }
            })
        }
        Kernel::Square => {
            let x = inputs[0].data();
            map1(&|i| 2.0 * x[i] * g[i])
        }
        Kernel::Exp => {
            let y = output.data();
            map1(&|i| g[i] * y[i])
        }
        Kernel::Log => {
            let x = inputs[0].data();
            map1(&|i| g[i] / x[i].max(LOG_CLAMP))
        }
        Kernel::ClampMin(floor) => {
            let x = inputs[0].data();
            map1(&|i| if x[i] > *floor { g[i] } else { 0.0 })
        }
        Kernel::MatVec => {
            let (m, x) = (inputs[0], inputs[1]);
            let cols = m.shape()[1];
            let gm = want(0).then(|| {
                let mut gm = Vec::with_capacity(m.numel());
                for &gi in g {
                    gm.extend(x.data().iter().map(|xj| gi * xj));
                }
                gm
            });
            let gx = want(1).then(|| {
                let mut gx = vec![0.0; cols];
                for (row, &gi) in m.data().chunks(cols.max(1)).zip(g) {
                    for (acc, &mv) in gx.iter_mut().zip(row) {
                        *acc += mv * gi;
                    }
                }
                gx
            });
            vec![gm, gx]
        }
        Kernel::ReduceMean { axis } | Kernel::ReduceSum { axis } | Kernel::ReduceVar { axis } => {
            if !want(0) {
                return vec![None];
            }
            let x = inputs[0];
            let shape = x.shape();
            let outer: usize = shape[..*axis].iter().product();
            let n = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut gx = vec![0.0; x.numel()];
            let means: Option<Vec<f64>> = matches!(kernel, Kernel::ReduceVar { .. }).then(|| {
                let mut m = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            m[o * inner + i] += x.data()[(o * n + k) * inner + i];
                        }
                    }
                }
                m.iter().map(|s| s / n as f64).collect()
            });
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        let src = (o * n + k) * inner + i;
                        let gi = g[o * inner + i];
                        gx[src] = match kernel {
                            Kernel::ReduceSum { .. } => gi,
                            Kernel::ReduceMean { .. } => gi / n as f64,
                            _ => {
                                let m = means.as_ref().expect("var means")[o * inner + i];
                                gi * 2.0 * (x.data()[src] - m) / n as f64
                            }
                        };
                    }
                }
            }
            vec![Some(gx)]
        }
        Kernel::L2Normalize => {
            let Saved::Scalars(s) = saved else {
                unreachable!("l2_normalize saves its norm")
            };
            let norm = s[0];
            let y = output.data();
            if norm < NORM_EPS {
                return map1(&|i| g[i] / NORM_EPS);
            }
            let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
            map1(&|i| (g[i] - y[i] * dot) / norm)
        }
        Kernel::CosineSim => {
            let Saved::Scalars(s) = saved else {
                unreachable!("cosine_sim saves norms")
            };
            let (na, nb) = (s[0].max(NORM_EPS), s[1].max(NORM_EPS));
            let c = output.item();
            let g0 = g[0];
            let (a, b) = (inputs[0].data(), inputs[1].data());
            let ga = want(0).then(|| {
                (0..a.len())
                    .map(|i| {
                        let shrink = if s[0] < NORM_EPS {
                            0.0
                        } else {
                            c * a[i] / (na * na)
                        };
                        g0 * (b[i] / (na * nb) - shrink)
                    })
                    .collect()
            });
            let gb = want(1).then(|| {
                (0..b.len())
                    .map(|i| {
                        let shrink = if s[1] < NORM_EPS {
                            0.0
                        } else {
                            c * b[i] / (nb * nb)
                        };
                        g0 * (a[i] / (na * nb) - shrink)
                    })
                    .collect()
            });
            vec![ga, gb]
        }
        Kernel::SoftmaxXent {
            target,
            temperature,
        } => {
            let Saved::Scalars(p) = saved else {
                unreachable!("softmax_xent saves probabilities")
            };
            let g0 = g[0];
            if !want(0) {
                return vec![None];
            }
            vec![Some(
                p.iter()
                    .enumerate()
                    .map(|(k, &pk)| {
                        let onehot = if k == *target { 1.0 } else { 0.0 };
                        g0 * (pk - onehot) / temperature
                    })
                    .collect(),
            )]
        }
        Kernel::Stack => {
            let stride = inputs[0].numel();
            (0..inputs.len())
                .map(|k| want(k).then(|| g[k * stride..(k + 1) * stride].to_vec()))
                .collect()
        }
        Kernel::Slice { start, len } => {
            if !want(0) {
                return vec![None];
            }
            let x = inputs[0];
            let stride = x.numel() / x.shape()[0].max(1);
            let mut gx = vec![0.0; x.numel()];
            gx[start * stride..(start + len) * stride].copy_from_slice(g);
            vec![Some(gx)]
        }
        Kernel::Reshape(_) => vec![want(0).then(|| g.to_vec())],
        Kernel::AvgPool2 => {
            let x = inputs[0];
            let (w, c) = (x.shape()[1], x.shape()[2]);
            let ow = w / 2;
            map1(&|i| {
                let ch = i % c;
                let px = i / c;
                let (y, xx) = (px / w, px % w);
                0.25 * g[((y / 2) * ow + xx / 2) * c + ch]
            })
        }
        Kernel::ExpandChannels(c) => {
            if !want(0) {
                return vec![None];
            }
            vec![Some(g.chunks(*c).map(|px| px.iter().sum()).collect())]
        }
        Kernel::BroadcastRows(_) => {
            if !want(0) {
                return vec![None];
            }
            let n = inputs[0].numel();
            let mut gx = vec![0.0; n];
            for row in g.chunks(n.max(1)) {
                for (acc, v) in gx.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            vec![Some(gx)]
        }
    }
}
