//! Differentiable primitives on [`Var`].
//!
//! Binary elementwise operations broadcast the right operand when its shape
//! is a suffix of the left operand's shape (`[B, S, D] + [D]`).

use std::rc::Rc;

use crate::autodiff::{GradPart, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm_acc, Tensor};

/// `ln(1 + e^x)` without overflow for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mish: `x · tanh(softplus(x))`.
pub fn mish(x: f64) -> f64 {
    x * softplus(x).tanh()
}

fn mish_grad(x: f64) -> f64 {
    let t = softplus(x).tanh();
    t + x * (1.0 - t * t) * sigmoid(x)
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Sums a `[outer, inner]` view over `outer`.
fn reduce_leading(data: &[f64], inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; inner];
    for chunk in data.chunks(inner) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn dense(shape: &[usize], data: Vec<f64>) -> Option<GradPart> {
    Some(GradPart::Dense(Tensor::from_parts(shape.to_vec(), data)))
}

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

impl<'t> Var<'t> {
    fn binary(self, rhs: Var<'t>, kind: Bin, op: &'static str) -> Result<Var<'t>> {
        let a = self.value();
        let b = rhs.value();
        if !is_suffix(b.shape(), a.shape()) {
            return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let inner = b.numel();
        let f = match kind {
            Bin::Add => |x: f64, y: f64| x + y,
            Bin::Sub => |x: f64, y: f64| x - y,
            Bin::Mul => |x: f64, y: f64| x * y,
            Bin::Div => |x: f64, y: f64| x / y,
        };
        let data: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % inner]))
            .collect();
        let value = Tensor::from_parts(a.shape().to_vec(), data);
        let (ac, bc) = (Rc::clone(&a), Rc::clone(&b));
        self.tape.push_op(
            op,
            value,
            &[self.id, rhs.id],
            Box::new(move |g, mask| {
                let gd = g.data();
                let bd = bc.data();
                let ad = ac.data();
                let da = mask[0].then(|| {
                    let d: Vec<f64> = match kind {
                        Bin::Add | Bin::Sub => gd.to_vec(),
                        Bin::Mul => gd.iter().enumerate().map(|(i, &g)| g * bd[i % inner]).collect(),
                        Bin::Div => gd.iter().enumerate().map(|(i, &g)| g / bd[i % inner]).collect(),
                    };
                    GradPart::Dense(Tensor::from_parts(ac.shape().to_vec(), d))
                });
                let db = mask[1].then(|| {
                    let full: Vec<f64> = match kind {
                        Bin::Add => gd.to_vec(),
                        Bin::Sub => gd.iter().map(|g| -g).collect(),
                        Bin::Mul => gd.iter().zip(ad).map(|(g, a)| g * a).collect(),
                        Bin::Div => gd
                            .iter()
                            .zip(ad)
                            .enumerate()
                            .map(|(i, (g, a))| {
                                let bv = bd[i % inner];
                                -g * a / (bv * bv)
                            })
                            .collect(),
                    };
                    GradPart::Dense(Tensor::from_parts(
                        bc.shape().to_vec(),
                        reduce_leading(&full, inner),
                    ))
                });
                vec![da, db]
            }),
        )
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Bin::Add, "add")
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Bin::Sub, "sub")
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Bin::Mul, "mul")
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Bin::Div, "div")
    }

    /// Elementwise map with derivative `d(x, y)`.
    fn unary(
        self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        d: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let yc = Rc::clone(&y);
        self.tape.push_op(
            op,
            (*y).clone(),
            &[self.id],
            Box::new(move |g, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(yc.data())
                    .map(|((g, &x), &y)| g * d(x, y))
                    .collect();
                vec![dense(x.shape(), data)]
            }),
        )
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn mish(self) -> Result<Var<'t>> {
        self.unary("mish", mish, |x, _| mish_grad(x))
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary("neg", |x| -x, |_, _| -1.0)
    }

    pub fn mul_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("mul_scalar", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    /// `c - x`.
    pub fn rsub_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("rsub_scalar", move |x| c - x, |_, _| -1.0)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.push_op(
            "sum",
            Tensor::scalar(x.sum()),
            &[self.id],
            Box::new(move |g, _| vec![Some(GradPart::Dense(Tensor::full(&shape, g.item())))]),
        )
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().numel() as f64;
        self.sum()?.mul_scalar(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let value = x.reshape(shape)?;
        let orig = x.shape().to_vec();
        self.tape.push_op(
            "reshape",
            value,
            &[self.id],
            Box::new(move |g, _| vec![dense(&orig, g.data().to_vec())]),
        )
    }

    /// 2-D matrix product `[m, k] · [k, n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = rhs.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(a.data(), b.data(), &mut out, m, k, n, false, false);
        self.tape.push_op(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            &[self.id, rhs.id],
            Box::new(move |g, mask| {
                let da = mask[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm_acc(g.data(), b.data(), &mut d, m, n, k, false, true);
                    GradPart::Dense(Tensor::from_parts(vec![m, k], d))
                });
                let db = mask[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm_acc(a.data(), g.data(), &mut d, k, m, n, true, false);
                    GradPart::Dense(Tensor::from_parts(vec![k, n], d))
                });
                vec![da, db]
            }),
        )
    }

    /// Batched product `[N, M, K] · [N, K, P]`, or `[N, M, K] · [N, P, K]ᵀ`
    /// when `transpose_rhs`.
    pub fn bmm(self, rhs: Var<'t>, transpose_rhs: bool) -> Result<Var<'t>> {
        let a = self.value();
        let b = rhs.value();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let bad = || shape_err("bmm", format!("{sa:?} x {sb:?} (transpose_rhs={transpose_rhs})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (nb, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, p) = if transpose_rhs { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; nb * m * p];
        for i in 0..nb {
            gemm_acc(
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * p..(i + 1) * k * p],
                &mut out[i * m * p..(i + 1) * m * p],
                m,
                k,
                p,
                false,
                transpose_rhs,
            );
        }
        self.tape.push_op(
            "bmm",
            Tensor::from_parts(vec![nb, m, p], out),
            &[self.id, rhs.id],
            Box::new(move |g, mask| {
                let gd = g.data();
                let da = mask[0].then(|| {
                    let mut d = vec![0.0; nb * m * k];
                    for i in 0..nb {
                        // dA = G · Bᵀ  (or G · B when B was transposed)
                        gemm_acc(
                            &gd[i * m * p..(i + 1) * m * p],
                            &b.data()[i * k * p..(i + 1) * k * p],
                            &mut d[i * m * k..(i + 1) * m * k],
                            m,
                            p,
                            k,
                            false,
                            !transpose_rhs,
                        );
                    }
                    GradPart::Dense(Tensor::from_parts(vec![nb, m, k], d))
                });
                let db = mask[1].then(|| {
                    let mut d = vec![0.0; nb * k * p];
                    for i in 0..nb {
                        let ai = &a.data()[i * m * k..(i + 1) * m * k];
                        let gi = &gd[i * m * p..(i + 1) * m * p];
                        let di = &mut d[i * k * p..(i + 1) * k * p];
                        if transpose_rhs {
                            // B stored [P, K]: dB = Gᵀ · A
                            gemm_acc(gi, ai, di, p, m, k, true, false);
                        } else {
                            // dB = Aᵀ · G
                            gemm_acc(ai, gi, di, k, m, p, true, false);
                        }
                    }
                    let shape = if transpose_rhs { vec![nb, p, k] } else { vec![nb, k, p] };
                    GradPart::Dense(Tensor::from_parts(shape, d))
                });
                vec![da, db]
            }),
        )
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", format!("axes {axes:?} for shape {shape:?}")));
        }
        let value = permute_tensor(&x, axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.tape.push_op(
            "permute",
            value,
            &[self.id],
            Box::new(move |g, _| vec![Some(GradPart::Dense(permute_tensor(g, &inverse)))]),
        )
    }

    /// 2-D transpose.
    pub fn transpose(self) -> Result<Var<'t>> {
        if self.shape().len() != 2 {
            return Err(shape_err("transpose", format!("{:?} is not 2-D", self.shape())));
        }
        self.permute(&[1, 0])
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err(
                "slice",
                format!("axis {axis} range {start}..{} of {shape:?}", start + len),
            ));
        }
        let (outer, l, inner) = Tensor::axis_extents(&shape, axis);
        let row_len = l * inner;
        let width = len * inner;
        let mut data = Vec::with_capacity(outer * width);
        for r in 0..outer {
            let s = r * row_len + start * inner;
            data.extend_from_slice(&x.data()[s..s + width]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.tape.push_op(
            "slice",
            Tensor::from_parts(out_shape, data),
            &[self.id],
            Box::new(move |g, _| {
                vec![Some(GradPart::Band {
                    rows: outer,
                    row_len,
                    start: start * inner,
                    width,
                    data: g.data().to_vec(),
                })]
            }),
        )
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} for {base:?}")));
        }
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(shape_err("concat", format!("{base:?} vs {s:?}")));
            }
        }
        let (outer, _, inner) = Tensor::axis_extents(&base, axis);
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for r in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                data.extend_from_slice(&v.data()[r * l * inner..(r + 1) * l * inner]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push_op(
            "concat",
            Tensor::from_parts(out_shape, data),
            &ids,
            Box::new(move |g, mask| {
                let row = total * inner;
                let mut offset = 0;
                let mut out = Vec::with_capacity(lens.len());
                for (i, &l) in lens.iter().enumerate() {
                    let w = l * inner;
                    if mask[i] {
                        let mut d = Vec::with_capacity(outer * w);
                        for r in 0..outer {
                            let s = r * row + offset;
                            d.extend_from_slice(&g.data()[s..s + w]);
                        }
                        out.push(dense(&shapes[i], d));
                    } else {
                        out.push(None);
                    }
                    offset += w;
                }
                out
            }),
        )
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("softmax", x.shape(), axis)?;
        let y = Rc::new(softmax_tensor(&x, axis));
        let yc = Rc::clone(&y);
        self.tape.push_op(
            "softmax",
            (*y).clone(),
            &[self.id],
            Box::new(move |g, _| {
                let (outer, len, inner) = Tensor::axis_extents(yc.shape(), axis);
                let (yd, gd) = (yc.data(), g.data());
                let mut d = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| gd[idx(j)] * yd[idx(j)]).sum();
                        for j in 0..len {
                            d[idx(j)] = yd[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                vec![dense(yc.shape(), d)]
            }),
        )
    }

    /// `x - logsumexp(x)` along `axis`.
    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("log_softmax", x.shape(), axis)?;
        let p = softmax_tensor(&x, axis);
        let (outer, len, inner) = Tensor::axis_extents(x.shape(), axis);
        let mut y = vec![0.0; x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| x.data()[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..len).map(|j| (x.data()[idx(j)] - m).exp()).sum::<f64>().ln();
                for j in 0..len {
                    y[idx(j)] = x.data()[idx(j)] - lse;
                }
            }
        }
        self.tape.push_op(
            "log_softmax",
            Tensor::from_parts(x.shape().to_vec(), y),
            &[self.id],
            Box::new(move |g, _| {
                let (pd, gd) = (p.data(), g.data());
                let mut d = vec![0.0; pd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let s: f64 = (0..len).map(|j| gd[idx(j)]).sum();
                        for j in 0..len {
                            d[idx(j)] = gd[idx(j)] - pd[idx(j)] * s;
                        }
                    }
                }
                vec![dense(p.shape(), d)]
            }),
        )
    }

    /// Inclusive cumulative sum along `axis`.
    pub fn cumsum(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("cumsum", x.shape(), axis)?;
        let shape = x.shape().to_vec();
        let (outer, len, inner) = Tensor::axis_extents(&shape, axis);
        let mut y = x.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                for j in 1..len {
                    y[(o * len + j) * inner + i] += y[(o * len + j - 1) * inner + i];
                }
            }
        }
        let gshape = shape.clone();
        self.tape.push_op(
            "cumsum",
            Tensor::from_parts(shape, y),
            &[self.id],
            Box::new(move |g, _| {
                let mut d = g.data().to_vec();
                for o in 0..outer {
                    for i in 0..inner {
                        for j in (0..len - 1).rev() {
                            d[(o * len + j) * inner + i] += d[(o * len + j + 1) * inner + i];
                        }
                    }
                }
                vec![dense(&gshape, d)]
            }),
        )
    }

    /// Cumulative softmax: non-decreasing along `axis`, ending at 1.
    pub fn cumax(self, axis: usize) -> Result<Var<'t>> {
        self.softmax(axis)?.cumsum(axis)
    }

    /// Normalizes over the last dimension, then applies `gamma`/`beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let (gv, bv) = (gamma.value(), beta.value());
        let d = *x.shape().last().ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("input {:?}, gamma {:?}, beta {:?}", x.shape(), gv.shape(), bv.shape()),
            ));
        }
        let rows = x.numel() / d;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv = vec![0.0; rows];
        let mut y = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let shape = x.shape().to_vec();
        self.tape.push_op(
            "layer_norm",
            Tensor::from_parts(shape.clone(), y),
            &[self.id, gamma.id, beta.id],
            Box::new(move |g, mask| {
                let gd = g.data();
                let dx = mask[0].then(|| {
                    let mut dx = vec![0.0; gd.len()];
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = gd[r * d + j] * gv.data()[j];
                            s1 += dh;
                            s2 += dh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dh = gd[r * d + j] * gv.data()[j];
                            dx[r * d + j] =
                                inv[r] / d as f64 * (d as f64 * dh - s1 - xhat[r * d + j] * s2);
                        }
                    }
                    GradPart::Dense(Tensor::from_parts(shape.clone(), dx))
                });
                let dgamma = mask[1].then(|| {
                    let prod: Vec<f64> = gd.iter().zip(&xhat).map(|(g, h)| g * h).collect();
                    GradPart::Dense(Tensor::vector(reduce_leading(&prod, d)))
                });
                let dbeta = mask[2].then(|| GradPart::Dense(Tensor::vector(reduce_leading(gd, d))));
                vec![dx, dgamma, dbeta]
            }),
        )
    }

    /// Training-mode batch normalization of `[N, F]` over the batch axis.
    /// Returns the output along with the batch mean and biased variance.
    pub fn batch_norm_train(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        eps: f64,
    ) -> Result<(Var<'t>, Vec<f64>, Vec<f64>)> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (gv, bv) = (gamma.value(), beta.value());
        if shape.len() != 2 || gv.shape() != [shape[1]] || bv.shape() != [shape[1]] {
            return Err(shape_err(
                "batch_norm",
                format!("input {shape:?}, gamma {:?}, beta {:?}", gv.shape(), bv.shape()),
            ));
        }
        let (n, f) = (shape[0], shape[1]);
        let xd = x.data();
        let mut mean = vec![0.0; f];
        for r in 0..n {
            for j in 0..f {
                mean[j] += xd[r * f + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; f];
        for r in 0..n {
            for j in 0..f {
                let c = xd[r * f + j] - mean[j];
                var[j] += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; n * f];
        let mut y = vec![0.0; n * f];
        for r in 0..n {
            for j in 0..f {
                let h = (xd[r * f + j] - mean[j]) * inv[j];
                xhat[r * f + j] = h;
                y[r * f + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = self.tape.push_op(
            "batch_norm",
            Tensor::from_parts(shape.clone(), y),
            &[self.id, gamma.id, beta.id],
            Box::new(move |g, mask| {
                let gd = g.data();
                let dx = mask[0].then(|| {
                    let mut s1 = vec![0.0; f];
                    let mut s2 = vec![0.0; f];
                    for r in 0..n {
                        for j in 0..f {
                            let dh = gd[r * f + j] * gv.data()[j];
                            s1[j] += dh;
                            s2[j] += dh * xhat[r * f + j];
                        }
                    }
                    let nf = n as f64;
                    let mut dx = vec![0.0; n * f];
                    for r in 0..n {
                        for j in 0..f {
                            let dh = gd[r * f + j] * gv.data()[j];
                            dx[r * f + j] = inv[j] / nf * (nf * dh - s1[j] - xhat[r * f + j] * s2[j]);
                        }
                    }
                    GradPart::Dense(Tensor::from_parts(shape.clone(), dx))
                });
                let dgamma = mask[1].then(|| {
                    let prod: Vec<f64> = gd.iter().zip(&xhat).map(|(g, h)| g * h).collect();
                    GradPart::Dense(Tensor::vector(reduce_leading(&prod, f)))
                });
                let dbeta = mask[2].then(|| GradPart::Dense(Tensor::vector(reduce_leading(gd, f))));
                vec![dx, dgamma, dbeta]
            }),
        )?;
        Ok((out, mean, var))
    }

    /// Repeats each element of the last axis `k` times in place:
    /// `[a, b] -> [a, a, b, b]` for `k = 2`.
    pub fn repeat_interleave(self, k: usize) -> Result<Var<'t>> {
        if k == 0 {
            return Err(Error::InvalidArgument("repeat_interleave by 0".into()));
        }
        let x = self.value();
        let mut shape = x.shape().to_vec();
        let last = shape
            .last_mut()
            .ok_or_else(|| shape_err("repeat_interleave", "scalar input"))?;
        *last *= k;
        let data: Vec<f64> = x
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, k))
            .collect();
        let orig = x.shape().to_vec();
        self.tape.push_op(
            "repeat_interleave",
            Tensor::from_parts(shape, data),
            &[self.id],
            Box::new(move |g, _| {
                let d = g.data().chunks(k).map(|c| c.iter().sum()).collect();
                vec![dense(&orig, d)]
            }),
        )
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        Err(shape_err(op, format!("axis {axis} for shape {shape:?}")))
    } else {
        Ok(())
    }
}

/// Value-level softmax along `axis`.
pub fn softmax_tensor(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = Tensor::axis_extents(x.shape(), axis);
    let xd = x.data();
    let mut y = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let m = (0..len).map(|j| xd[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..len {
                let e = (xd[idx(j)] - m).exp();
                y[idx(j)] = e;
                s += e;
            }
            for j in 0..len {
                y[idx(j)] /= s;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), y)
}

fn permute_tensor(x: &Tensor, axes: &[usize]) -> Tensor {
    let shape = x.shape();
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(x.data()[src]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}
