//! Forward and backward kernels for every graph operation.

use crate::params::ParamId;
use crate::real::Real;
use crate::tensor::{gemm, Tensor, View, ViewMut};

type Kernel<F> = Result<(Tensor<F>, Vec<Tensor<F>>), String>;

/// Attention mask applied inside [`Graph::attention`](crate::Graph::attention).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    None,
    /// Query `i` may only attend to keys `0..=i`.
    Causal,
}

/// User-defined differentiable operation.
///
/// `forward` returns the output and any auxiliary tensors it wants cached for
/// `backward`. `backward` returns one optional gradient per input.
pub trait CustomOp<F: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor<F>]) -> Kernel<F>;

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        aux: &[Tensor<F>],
        grad: &Tensor<F>,
    ) -> Vec<Option<Tensor<F>>>;
}

pub(crate) enum Op<F: Real> {
    Input(String),
    Param(ParamId),
    Constant,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(F),
    AddBias,
    Relu,
    Swish,
    Sigmoid,
    Tanh,
    Abs,
    Softmax,
    LogSoftmax,
    LayerNorm { eps: F },
    Embedding { ids: Vec<usize> },
    ConcatRows,
    ConcatCols,
    SliceRows { start: usize, len: usize },
    SliceCols { start: usize, len: usize },
    GatherRows { idx: Vec<usize> },
    ReplaceRows { positions: Vec<usize> },
    Reshape { shape: Vec<usize> },
    Sum,
    Mean,
    MeanRows,
    DepthwiseConv1d,
    Conv2d { stride: usize, padding: usize },
    ChannelsToTime,
    Dropout { mask: Vec<F> },
    Attention { heads: usize, mask: AttnMask },
    CrossEntropy { targets: Vec<usize>, smoothing: F },
    Custom(Box<dyn CustomOp<F>>),
}

impl<F: Real> Op<F> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Constant => "constant",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddBias => "add_bias",
            Op::Relu => "relu",
            Op::Swish => "swish",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Abs => "abs",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::ConcatRows => "concat_rows",
            Op::ConcatCols => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::ReplaceRows { .. } => "replace_rows",
            Op::Reshape { .. } => "reshape",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::MeanRows => "mean_rows",
            Op::DepthwiseConv1d => "depthwise_conv1d",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelsToTime => "channels_to_time",
            Op::Dropout { .. } => "dropout",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Custom(c) => c.name(),
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Op::Input(_) | Op::Param(_) | Op::Constant)
    }
}

fn mat<F: Real>(x: &Tensor<F>, what: &str) -> Result<(usize, usize), String> {
    if !x.is_matrix() {
        return Err(format!("{what} must be a matrix, got shape {:?}", x.shape()));
    }
    Ok((x.rows(), x.cols()))
}

fn same_shape<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<(), String> {
    if a.shape() != b.shape() {
        return Err(format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map<F: Real>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn plain<F: Real>(t: Tensor<F>) -> Kernel<F> {
    Ok((t, Vec::new()))
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn softmax_rows<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let (n, m) = (x.rows(), x.cols());
    let mut out = x.clone();
    let d = out.data_mut();
    for r in 0..n {
        let row = &mut d[r * m..(r + 1) * m];
        let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut s = F::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

pub(crate) fn forward<F: Real>(op: &Op<F>, xs: &[&Tensor<F>]) -> Kernel<F> {
    match op {
        Op::Input(_) | Op::Param(_) | Op::Constant => unreachable!("leaf nodes are not computed"),
        Op::MatMul => {
            let (n, k) = mat(xs[0], "lhs")?;
            let (k2, m) = mat(xs[1], "rhs")?;
            if k != k2 {
                return Err(format!("inner dimensions {k} and {k2} differ"));
            }
            let mut out = Tensor::zeros(vec![n, m]);
            gemm(
                F::one(),
                View::rm(xs[0].data(), n, k),
                View::rm(xs[1].data(), k, m),
                F::zero(),
                ViewMut::rm(out.data_mut(), n, m),
            );
            plain(out)
        }
        Op::Add => {
            same_shape(xs[0], xs[1])?;
            plain(zip_map(xs[0], xs[1], |a, b| a + b))
        }
        Op::Sub => {
            same_shape(xs[0], xs[1])?;
            plain(zip_map(xs[0], xs[1], |a, b| a - b))
        }
        Op::Mul => {
            same_shape(xs[0], xs[1])?;
            plain(zip_map(xs[0], xs[1], |a, b| a * b))
        }
        Op::Scale(s) => plain(xs[0].map(|x| x * *s)),
        Op::AddBias => {
            let (n, d) = mat(xs[0], "input")?;
            if xs[1].numel() != d {
                return Err(format!("bias has {} values for {d} columns", xs[1].numel()));
            }
            let mut out = xs[0].clone();
            let b = xs[1].data();
            for r in 0..n {
                for (v, &bb) in out.data_mut()[r * d..(r + 1) * d].iter_mut().zip(b) {
                    *v += bb;
                }
            }
            plain(out)
        }
        Op::Relu => plain(xs[0].map(|x| x.max(F::zero()))),
        Op::Swish => plain(xs[0].map(|x| x * sigmoid(x))),
        Op::Sigmoid => plain(xs[0].map(sigmoid)),
        Op::Tanh => plain(xs[0].map(F::tanh)),
        Op::Abs => plain(xs[0].map(F::abs)),
        Op::Softmax => {
            mat(xs[0], "input")?;
            plain(softmax_rows(xs[0]))
        }
        Op::LogSoftmax => {
            let (n, m) = mat(xs[0], "input")?;
            let mut out = xs[0].clone();
            let d = out.data_mut();
            for r in 0..n {
                let row = &mut d[r * m..(r + 1) * m];
                let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
                let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<F>().ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            plain(out)
        }
        Op::LayerNorm { eps } => {
            let (n, d) = mat(xs[0], "input")?;
            if xs[1].numel() != d || xs[2].numel() != d {
                return Err(format!("gain/bias must have {d} values"));
            }
            let (gamma, beta) = (xs[1].data(), xs[2].data());
            let mut xhat = xs[0].clone();
            let mut rstd = Tensor::zeros(vec![n, 1]);
            let mut out = Tensor::zeros(vec![n, d]);
            let df = F::of(d as f64);
            for r in 0..n {
                let row = &mut xhat.data_mut()[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<F>() / df;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
                let rs = F::one() / (var + *eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * rs;
                }
                rstd.data_mut()[r] = rs;
                let o = &mut out.data_mut()[r * d..(r + 1) * d];
                for j in 0..d {
                    o[j] = row[j] * gamma[j] + beta[j];
                }
            }
            Ok((out, vec![xhat, rstd]))
        }
        Op::Embedding { ids } => {
            let (v, d) = mat(xs[0], "table")?;
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(format!("id {id} out of range for table of {v} rows"));
                }
                out.extend_from_slice(xs[0].row_slice(id));
            }
            plain(Tensor::matrix(ids.len(), d, out).expect("sized"))
        }
        Op::ConcatRows => {
            let d = mat(xs[0], "input 0")?.1;
            let mut rows = 0;
            let mut out = Vec::new();
            for (i, x) in xs.iter().enumerate() {
                let (n, c) = mat(x, "input")?;
                if c != d {
                    return Err(format!("input {i} has {c} columns, expected {d}"));
                }
                rows += n;
                out.extend_from_slice(x.data());
            }
            plain(Tensor::matrix(rows, d, out).expect("sized"))
        }
        Op::ConcatCols => {
            let n = mat(xs[0], "input 0")?.0;
            let mut widths = Vec::with_capacity(xs.len());
            for (i, x) in xs.iter().enumerate() {
                let (r, c) = mat(x, "input")?;
                if r != n {
                    return Err(format!("input {i} has {r} rows, expected {n}"));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(n * total);
            for r in 0..n {
                for x in xs {
                    out.extend_from_slice(x.row_slice(r));
                }
            }
            plain(Tensor::matrix(n, total, out).expect("sized"))
        }
        Op::SliceRows { start, len } => {
            let (n, d) = mat(xs[0], "input")?;
            if start + len > n || *len == 0 {
                return Err(format!("rows {start}..{} out of 0..{n}", start + len));
            }
            let data = xs[0].data()[start * d..(start + len) * d].to_vec();
            plain(Tensor::matrix(*len, d, data).expect("sized"))
        }
        Op::SliceCols { start, len } => {
            let (n, d) = mat(xs[0], "input")?;
            if start + len > d || *len == 0 {
                return Err(format!("cols {start}..{} out of 0..{d}", start + len));
            }
            let mut data = Vec::with_capacity(n * len);
            for r in 0..n {
                data.extend_from_slice(&xs[0].row_slice(r)[*start..start + len]);
            }
            plain(Tensor::matrix(n, *len, data).expect("sized"))
        }
        Op::GatherRows { idx } => {
            let (n, d) = mat(xs[0], "input")?;
            let mut data = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                if i >= n {
                    return Err(format!("row {i} out of 0..{n}"));
                }
                data.extend_from_slice(xs[0].row_slice(i));
            }
            plain(Tensor::matrix(idx.len(), d, data).expect("sized"))
        }
        Op::ReplaceRows { positions } => {
            let (n, d) = mat(xs[0], "sequence")?;
            if xs[1].numel() != d {
                return Err(format!("replacement has {} values, expected {d}", xs[1].numel()));
            }
            let mut out = xs[0].clone();
            for &p in positions {
                if p >= n {
                    return Err(format!("position {p} out of 0..{n}"));
                }
                out.data_mut()[p * d..(p + 1) * d].copy_from_slice(xs[1].data());
            }
            plain(out)
        }
        Op::Reshape { shape } => xs[0].clone().reshape(shape.clone()).map(|t| (t, Vec::new())).map_err(|e| e.to_string()),
        Op::Sum => plain(Tensor::scalar(xs[0].sum())),
        Op::Mean => {
            if xs[0].numel() == 0 {
                return Err("mean of empty tensor".into());
            }
            plain(Tensor::scalar(xs[0].sum() / F::of(xs[0].numel() as f64)))
        }
        Op::MeanRows => {
            let (n, d) = mat(xs[0], "input")?;
            if n == 0 {
                return Err("mean over zero rows".into());
            }
            let mut out = vec![F::zero(); d];
            for r in 0..n {
                for (o, &v) in out.iter_mut().zip(xs[0].row_slice(r)) {
                    *o += v;
                }
            }
            let inv = F::one() / F::of(n as f64);
            plain(Tensor::row(out.into_iter().map(|v| v * inv).collect()))
        }
        Op::DepthwiseConv1d => {
            let (t, c) = mat(xs[0], "input")?;
            let (k, c2) = mat(xs[1], "kernel")?;
            if c != c2 || k % 2 == 0 {
                return Err(format!("kernel {k}x{c2} incompatible with {c} channels (kernel must be odd)"));
            }
            let pad = (k - 1) / 2;
            let (x, w) = (xs[0].data(), xs[1].data());
            let mut out = Tensor::zeros(vec![t, c]);
            let o = out.data_mut();
            for ti in 0..t {
                for ki in 0..k {
                    let src = ti + ki;
                    if src < pad || src - pad >= t {
                        continue;
                    }
                    let s = src - pad;
                    let orow = &mut o[ti * c..(ti + 1) * c];
                    let xrow = &x[s * c..(s + 1) * c];
                    let wrow = &w[ki * c..(ki + 1) * c];
                    for j in 0..c {
                        orow[j] += wrow[j] * xrow[j];
                    }
                }
            }
            plain(out)
        }
        Op::Conv2d { stride, padding } => conv2d_forward(xs, *stride, *padding),
        Op::ChannelsToTime => {
            let s = xs[0].shape();
            if s.len() != 3 {
                return Err(format!("expected [channels, time, freq], got {s:?}"));
            }
            let (c, t, f) = (s[0], s[1], s[2]);
            let x = xs[0].data();
            let mut out = vec![F::zero(); c * t * f];
            for ci in 0..c {
                for ti in 0..t {
                    let src = &x[(ci * t + ti) * f..(ci * t + ti + 1) * f];
                    out[ti * c * f + ci * f..ti * c * f + (ci + 1) * f].copy_from_slice(src);
                }
            }
            plain(Tensor::matrix(t, c * f, out).expect("sized"))
        }
        Op::Dropout { mask } => {
            if mask.len() != xs[0].numel() {
                return Err("dropout mask size".into());
            }
            let data = xs[0].data().iter().zip(mask).map(|(&x, &m)| x * m).collect();
            plain(Tensor::new(xs[0].shape().to_vec(), data).expect("sized"))
        }
        Op::Attention { heads, mask } => attention_forward(xs, *heads, *mask),
        Op::CrossEntropy { targets, smoothing } => {
            let (n, v) = mat(xs[0], "logits")?;
            if targets.len() != n {
                return Err(format!("{} targets for {n} rows", targets.len()));
            }
            if n == 0 {
                return Err("cross entropy over zero rows".into());
            }
            let probs = softmax_rows(xs[0]);
            let eps = *smoothing;
            let uni = eps / F::of(v as f64);
            let mut total = F::zero();
            for (r, &t) in targets.iter().enumerate() {
                if t >= v {
                    return Err(format!("target {t} out of range for {v} classes"));
                }
                let row = xs[0].row_slice(r);
                let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
                let lse = mx + row.iter().map(|&z| (z - mx).exp()).sum::<F>().ln();
                let mut nll = -(F::one() - eps) * (row[t] - lse);
                if eps > F::zero() {
                    nll -= uni * row.iter().map(|&z| z - lse).sum::<F>();
                }
                total += nll;
            }
            Ok((Tensor::scalar(total / F::of(n as f64)), vec![probs]))
        }
        Op::Custom(c) => c.forward(xs),
    }
}

fn conv2d_forward<F: Real>(xs: &[&Tensor<F>], stride: usize, pad: usize) -> Kernel<F> {
    let xsz = xs[0].shape();
    let wsz = xs[1].shape();
    if xsz.len() != 3 || wsz.len() != 4 {
        return Err(format!("expected input [C,H,W] and kernel [O,C,kh,kw], got {xsz:?} and {wsz:?}"));
    }
    let (cin, h, w) = (xsz[0], xsz[1], xsz[2]);
    let (cout, cin2, kh, kw) = (wsz[0], wsz[1], wsz[2], wsz[3]);
    if cin != cin2 || xs[2].numel() != cout {
        return Err(format!("channel mismatch: input {cin}, kernel {cin2}, bias {}", xs[2].numel()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw || stride == 0 {
        return Err(format!("input {h}x{w} too small for kernel {kh}x{kw}"));
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let ck = cin * kh * kw;
    let cols = im2col(xs[0].data(), cin, h, w, kh, kw, stride, pad, ho, wo);
    let mut out = Tensor::zeros(vec![cout, ho, wo]);
    gemm(
        F::one(),
        View::rm(xs[1].data(), cout, ck),
        View::rm(cols.data(), ho * wo, ck).t(),
        F::zero(),
        ViewMut::rm(out.data_mut(), cout, ho * wo),
    );
    let b = xs[2].data();
    for (o, row) in out.data_mut().chunks_mut(ho * wo).enumerate() {
        for v in row {
            *v += b[o];
        }
    }
    Ok((out, vec![cols]))
}

#[allow(clippy::too_many_arguments)]
fn im2col<F: Real>(
    x: &[F],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Tensor<F> {
    let ck = cin * kh * kw;
    let mut cols = Tensor::zeros(vec![ho * wo, ck]);
    let d = cols.data_mut();
    for i in 0..ho {
        for j in 0..wo {
            let row = &mut d[(i * wo + j) * ck..(i * wo + j + 1) * ck];
            for c in 0..cin {
                for u in 0..kh {
                    let y = i * stride + u;
                    if y < pad || y - pad >= h {
                        continue;
                    }
                    for v in 0..kw {
                        let xx = j * stride + v;
                        if xx < pad || xx - pad >= w {
                            continue;
                        }
                        row[(c * kh + u) * kw + v] = x[(c * h + y - pad) * w + xx - pad];
                    }
                }
            }
        }
    }
    cols
}

fn attention_forward<F: Real>(xs: &[&Tensor<F>], heads: usize, mask: AttnMask) -> Kernel<F> {
    let (n, d) = mat(xs[0], "query")?;
    let (m, dk) = mat(xs[1], "key")?;
    let (mv, dv) = mat(xs[2], "value")?;
    if dk != d || dv != d || mv != m {
        return Err(format!("q {n}x{d}, k {m}x{dk}, v {mv}x{dv} are incompatible"));
    }
    if heads == 0 || d % heads != 0 {
        return Err(format!("model dim {d} not divisible by {heads} heads"));
    }
    if mask == AttnMask::Causal && n != m {
        return Err(format!("causal attention needs square scores, got {n}x{m}"));
    }
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let mut probs = Tensor::zeros(vec![heads, n, m]);
    let mut out = Tensor::zeros(vec![n, d]);
    for h in 0..heads {
        let p = &mut probs.data_mut()[h * n * m..(h + 1) * n * m];
        gemm(
            scale,
            View::cols_of(xs[0].data(), n, d, h * dh, dh),
            View::cols_of(xs[1].data(), m, d, h * dh, dh).t(),
            F::zero(),
            ViewMut::rm(p, n, m),
        );
        for i in 0..n {
            let row = &mut p[i * m..(i + 1) * m];
            let visible = match mask {
                AttnMask::None => m,
                AttnMask::Causal => i + 1,
            };
            let mx = row[..visible].iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for v in row[..visible].iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row[..visible].iter_mut() {
                *v /= s;
            }
            for v in row[visible..].iter_mut() {
                *v = F::zero();
            }
        }
        gemm(
            F::one(),
            View::rm(p, n, m),
            View::cols_of(xs[2].data(), m, d, h * dh, dh),
            F::zero(),
            ViewMut::cols_of(out.data_mut(), n, d, h * dh, dh),
        );
    }
    Ok((out, vec![probs]))
}

pub(crate) fn backward<F: Real>(
    op: &Op<F>,
    xs: &[&Tensor<F>],
    out: &Tensor<F>,
    aux: &[Tensor<F>],
    g: &Tensor<F>,
    need: &[bool],
) -> Vec<Option<Tensor<F>>> {
    let want = |i: usize| need.get(i).copied().unwrap_or(false);
    match op {
        Op::Input(_) | Op::Param(_) | Op::Constant => Vec::new(),
        Op::MatMul => {
            let (n, k) = (xs[0].rows(), xs[0].cols());
            let m = xs[1].cols();
            let da = want(0).then(|| {
                let mut da = Tensor::zeros(vec![n, k]);
                gemm(
                    F::one(),
                    View::rm(g.data(), n, m),
                    View::rm(xs[1].data(), k, m).t(),
                    F::zero(),
                    ViewMut::rm(da.data_mut(), n, k),
                );
                da
            });
            let db = want(1).then(|| {
                let mut db = Tensor::zeros(vec![k, m]);
                gemm(
                    F::one(),
                    View::rm(xs[0].data(), n, k).t(),
                    View::rm(g.data(), n, m),
                    F::zero(),
                    ViewMut::rm(db.data_mut(), k, m),
                );
                db
            });
            vec![da, db]
        }
        Op::Add => vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())],
        Op::Sub => vec![want(0).then(|| g.clone()), want(1).then(|| g.map(|v| -v))],
        Op::Mul => vec![
            want(0).then(|| zip_map(g, xs[1], |a, b| a * b)),
            want(1).then(|| zip_map(g, xs[0], |a, b| a * b)),
        ],
        Op::Scale(s) => vec![Some(g.map(|v| v * *s))],
        Op::AddBias => {
            let d = xs[0].cols();
            let db = want(1).then(|| {
                let mut acc = vec![F::zero(); d];
                for r in 0..g.rows() {
                    for (a, &v) in acc.iter_mut().zip(g.row_slice(r)) {
                        *a += v;
                    }
                }
                Tensor::new(xs[1].shape().to_vec(), acc).expect("sized")
            });
            vec![want(0).then(|| g.clone()), db]
        }
        Op::Relu => vec![Some(zip_map(g, xs[0], |gv, x| if x > F::zero() { gv } else { F::zero() }))],
        Op::Swish => vec![Some(zip_map(g, xs[0], |gv, x| {
            let s = sigmoid(x);
            gv * s * (F::one() + x * (F::one() - s))
        }))],
        Op::Sigmoid => vec![Some(zip_map(g, out, |gv, y| gv * y * (F::one() - y)))],
        Op::Tanh => vec![Some(zip_map(g, out, |gv, y| gv * (F::one() - y * y)))],
        Op::Abs => vec![Some(zip_map(g, xs[0], |gv, x| {
            if x > F::zero() {
                gv
            } else if x < F::zero() {
                -gv
            } else {
                F::zero()
            }
        }))],
        Op::Softmax => {
            let (n, m) = (out.rows(), out.cols());
            let mut dx = Tensor::zeros(vec![n, m]);
            for r in 0..n {
                let y = out.row_slice(r);
                let gr = g.row_slice(r);
                let dot: F = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for (j, v) in dx.data_mut()[r * m..(r + 1) * m].iter_mut().enumerate() {
                    *v = y[j] * (gr[j] - dot);
                }
            }
            vec![Some(dx)]
        }
        Op::LogSoftmax => {
            let (n, m) = (out.rows(), out.cols());
            let mut dx = Tensor::zeros(vec![n, m]);
            for r in 0..n {
                let y = out.row_slice(r);
                let gr = g.row_slice(r);
                let s: F = gr.iter().copied().sum();
                for (j, v) in dx.data_mut()[r * m..(r + 1) * m].iter_mut().enumerate() {
                    *v = gr[j] - y[j].exp() * s;
                }
            }
            vec![Some(dx)]
        }
        Op::LayerNorm { .. } => {
            let (xhat, rstd) = (&aux[0], &aux[1]);
            let (n, d) = (xhat.rows(), xhat.cols());
            let gamma = xs[1].data();
            let df = F::of(d as f64);
            let mut dx = Tensor::zeros(vec![n, d]);
            let mut dgamma = vec![F::zero(); d];
            let mut dbeta = vec![F::zero(); d];
            let mut dxhat = vec![F::zero(); d];
            for r in 0..n {
                let xh = xhat.row_slice(r);
                let gr = g.row_slice(r);
                for j in 0..d {
                    dgamma[j] += gr[j] * xh[j];
                    dbeta[j] += gr[j];
                    dxhat[j] = gr[j] * gamma[j];
                }
                let s1: F = dxhat.iter().copied().sum();
                let s2: F = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                let rs = rstd.data()[r];
                for (j, v) in dx.data_mut()[r * d..(r + 1) * d].iter_mut().enumerate() {
                    *v = rs / df * (df * dxhat[j] - s1 - xh[j] * s2);
                }
            }
            vec![
                want(0).then_some(dx),
                want(1).then(|| Tensor::new(xs[1].shape().to_vec(), dgamma).expect("sized")),
                want(2).then(|| Tensor::new(xs[2].shape().to_vec(), dbeta).expect("sized")),
            ]
        }
        Op::Embedding { ids } => {
            let d = xs[0].cols();
            let mut dt = Tensor::zeros(xs[0].shape().to_vec());
            for (r, &id) in ids.iter().enumerate() {
                for (a, &v) in dt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(g.row_slice(r)) {
                    *a += v;
                }
            }
            vec![Some(dt)]
        }
        Op::ConcatRows => {
            let mut offset = 0;
            xs.iter()
                .enumerate()
                .map(|(i, x)| {
                    let len = x.numel();
                    let slice = &g.data()[offset..offset + len];
                    offset += len;
                    want(i).then(|| Tensor::new(x.shape().to_vec(), slice.to_vec()).expect("sized"))
                })
                .collect()
        }
        Op::ConcatCols => {
            let n = g.rows();
            let mut col0 = 0;
            xs.iter()
                .enumerate()
                .map(|(i, x)| {
                    let c = x.cols();
                    let start = col0;
                    col0 += c;
                    want(i).then(|| {
                        let mut data = Vec::with_capacity(n * c);
                        for r in 0..n {
                            data.extend_from_slice(&g.row_slice(r)[start..start + c]);
                        }
                        Tensor::new(x.shape().to_vec(), data).expect("sized")
                    })
                })
                .collect()
        }
        Op::SliceRows { start, len } => {
            let d = xs[0].cols();
            let mut dx = Tensor::zeros(xs[0].shape().to_vec());
            dx.data_mut()[start * d..(start + len) * d].copy_from_slice(g.data());
            vec![Some(dx)]
        }
        Op::SliceCols { start, len } => {
            let (n, d) = (xs[0].rows(), xs[0].cols());
            let mut dx = Tensor::zeros(xs[0].shape().to_vec());
            for r in 0..n {
                dx.data_mut()[r * d + start..r * d + start + len].copy_from_slice(g.row_slice(r));
            }
            vec![Some(dx)]
        }
        Op::GatherRows { idx } => {
            let d = xs[0].cols();
            let mut dx = Tensor::zeros(xs[0].shape().to_vec());
            for (r, &i) in idx.iter().enumerate() {
                for (a, &v) in dx.data_mut()[i * d..(i + 1) * d].iter_mut().zip(g.row_slice(r)) {
                    *a += v;
                }
            }
            vec![Some(dx)]
        }
        Op::ReplaceRows { positions } => {
            let d = xs[0].cols();
            let mut replaced = vec![false; xs[0].rows()];
            for &p in positions {
                replaced[p] = true;
            }
            let mut dseq = g.clone();
            let mut dvec = vec![F::zero(); d];
            for (r, &rep) in replaced.iter().enumerate() {
                if rep {
                    let row = &mut dseq.data_mut()[r * d..(r + 1) * d];
                    for (a, v) in dvec.iter_mut().zip(row.iter_mut()) {
                        *a += *v;
                        *v = F::zero();
                    }
                }
            }
            vec![
                want(0).then_some(dseq),
                want(1).then(|| Tensor::new(xs[1].shape().to_vec(), dvec).expect("sized")),
            ]
        }
        Op::Reshape { .. } => vec![Some(
            Tensor::new(xs[0].shape().to_vec(), g.data().to_vec()).expect("sized"),
        )],
        Op::Sum => vec![Some(Tensor::full(xs[0].shape().to_vec(), g.item()))],
        Op::Mean => {
            let v = g.item() / F::of(xs[0].numel() as f64);
            vec![Some(Tensor::full(xs[0].shape().to_vec(), v))]
        }
        Op::MeanRows => {
            let (n, d) = (xs[0].rows(), xs[0].cols());
            let inv = F::one() / F::of(n as f64);
            let row: Vec<F> = g.data().iter().map(|&v| v * inv).collect();
            let mut data = Vec::with_capacity(n * d);
            for _ in 0..n {
                data.extend_from_slice(&row);
            }
            vec![Some(Tensor::matrix(n, d, data).expect("sized"))]
        }
        Op::DepthwiseConv1d => {
            let (t, c) = (xs[0].rows(), xs[0].cols());
            let k = xs[1].rows();
            let pad = (k - 1) / 2;
            let (x, w, gd) = (xs[0].data(), xs[1].data(), g.data());
            let mut dx = Tensor::zeros(vec![t, c]);
            let mut dw = Tensor::zeros(vec![k, c]);
            for ti in 0..t {
                for ki in 0..k {
                    let src = ti + ki;
                    if src < pad || src - pad >= t {
                        continue;
                    }
                    let s = src - pad;
                    for j in 0..c {
                        let gv = gd[ti * c + j];
                        dx.data_mut()[s * c + j] += w[ki * c + j] * gv;
                        dw.data_mut()[ki * c + j] += x[s * c + j] * gv;
                    }
                }
            }
            vec![want(0).then_some(dx), want(1).then_some(dw)]
        }
        Op::Conv2d { stride, padding } => {
            let xsz = xs[0].shape();
            let wsz = xs[1].shape();
            let (cin, h, w) = (xsz[0], xsz[1], xsz[2]);
            let (cout, kh, kw) = (wsz[0], wsz[2], wsz[3]);
            let (ho, wo) = (out.shape()[1], out.shape()[2]);
            let ck = cin * kh * kw;
            let cols = &aux[0];
            let dw = want(1).then(|| {
                let mut dw = Tensor::zeros(wsz.to_vec());
                gemm(
                    F::one(),
                    View::rm(g.data(), cout, ho * wo),
                    View::rm(cols.data(), ho * wo, ck),
                    F::zero(),
                    ViewMut::rm(dw.data_mut(), cout, ck),
                );
                dw
            });
            let db = want(2).then(|| {
                let sums = g.data().chunks(ho * wo).map(|c| c.iter().copied().sum()).collect();
                Tensor::new(xs[2].shape().to_vec(), sums).expect("sized")
            });
            let dx = want(0).then(|| {
                let mut dcols = Tensor::zeros(vec![ho * wo, ck]);
                gemm(
                    F::one(),
                    View::rm(g.data(), cout, ho * wo).t(),
                    View::rm(xs[1].data(), cout, ck),
                    F::zero(),
                    ViewMut::rm(dcols.data_mut(), ho * wo, ck),
                );
                let mut dx = Tensor::zeros(xsz.to_vec());
                let dxd = dx.data_mut();
                let dc = dcols.data();
                for i in 0..ho {
                    for j in 0..wo {
                        let row = &dc[(i * wo + j) * ck..(i * wo + j + 1) * ck];
                        for c in 0..cin {
                            for u in 0..kh {
                                let y = i * stride + u;
                                if y < *padding || y - padding >= h {
                                    continue;
                                }
                                for v in 0..kw {
                                    let xx = j * stride + v;
                                    if xx < *padding || xx - padding >= w {
                                        continue;
                                    }
                                    dxd[(c * h + y - padding) * w + xx - padding] +=
                                        row[(c * kh + u) * kw + v];
                                }
                            }
                        }
                    }
                }
                dx
            });
            vec![dx, dw, db]
        }
        Op::ChannelsToTime => {
            let s = xs[0].shape();
            let (c, t, f) = (s[0], s[1], s[2]);
            let gd = g.data();
            let mut dx = vec![F::zero(); c * t * f];
            for ci in 0..c {
                for ti in 0..t {
                    dx[(ci * t + ti) * f..(ci * t + ti + 1) * f]
                        .copy_from_slice(&gd[ti * c * f + ci * f..ti * c * f + (ci + 1) * f]);
                }
            }
            vec![Some(Tensor::new(s.to_vec(), dx).expect("sized"))]
        }
        Op::Dropout { mask } => {
            let data = g.data().iter().zip(mask).map(|(&v, &m)| v * m).collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data).expect("sized"))]
        }
        Op::Attention { heads, .. } => attention_backward(xs, &aux[0], g, *heads, need),
        Op::CrossEntropy { targets, smoothing } => {
            let probs = &aux[0];
            let (n, v) = (probs.rows(), probs.cols());
            let scale = g.item() / F::of(n as f64);
            let uni = *smoothing / F::of(v as f64);
            let mut dx = probs.clone();
            for (r, &t) in targets.iter().enumerate() {
                let row = &mut dx.data_mut()[r * v..(r + 1) * v];
                for x in row.iter_mut() {
                    *x = (*x - uni) * scale;
                }
                row[t] -= (F::one() - *smoothing) * scale;
            }
            vec![Some(dx)]
        }
        Op::Custom(c) => c.backward(xs, out, aux, g),
    }
}

fn attention_backward<F: Real>(
    xs: &[&Tensor<F>],
    probs: &Tensor<F>,
    g: &Tensor<F>,
    heads: usize,
    need: &[bool],
) -> Vec<Option<Tensor<F>>> {
    let (n, d) = (xs[0].rows(), xs[0].cols());
    let m = xs[1].rows();
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let mut dq = Tensor::zeros(vec![n, d]);
    let mut dk = Tensor::zeros(vec![m, d]);
    let mut dv = Tensor::zeros(vec![m, d]);
    let mut dp = vec![F::zero(); n * m];
    for h in 0..heads {
        let p = &probs.data()[h * n * m..(h + 1) * n * m];
        // dV_h = P^T dO_h
        gemm(
            F::one(),
            View::rm(p, n, m).t(),
            View::cols_of(g.data(), n, d, h * dh, dh),
            F::zero(),
            ViewMut::cols_of(dv.data_mut(), m, d, h * dh, dh),
        );
        // dP = dO_h V_h^T
        gemm(
            F::one(),
            View::cols_of(g.data(), n, d, h * dh, dh),
            View::cols_of(xs[2].data(), m, d, h * dh, dh).t(),
            F::zero(),
            ViewMut::rm(&mut dp, n, m),
        );
        // softmax backward in place: dS = P * (dP - <dP, P>)
        for i in 0..n {
            let pr = &p[i * m..(i + 1) * m];
            let dr = &mut dp[i * m..(i + 1) * m];
            let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
            for (x, &pp) in dr.iter_mut().zip(pr) {
                *x = pp * (*x - dot);
            }
        }
        gemm(
            scale,
            View::rm(&dp, n, m),
            View::cols_of(xs[1].data(), m, d, h * dh, dh),
            F::zero(),
            ViewMut::cols_of(dq.data_mut(), n, d, h * dh, dh),
        );
        gemm(
            scale,
            View::rm(&dp, n, m).t(),
            View::cols_of(xs[0].data(), n, d, h * dh, dh),
            F::zero(),
            ViewMut::cols_of(dk.data_mut(), m, d, h * dh, dh),
        );
    }
    let want = |i: usize| need.get(i).copied().unwrap_or(false);
    vec![want(0).then_some(dq), want(1).then_some(dk), want(2).then_some(dv)]
}
