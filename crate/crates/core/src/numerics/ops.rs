//! Differentiable operations on [`Tensor`].
//!
//! Broadcasting is limited to scalar-with-tensor; anything else goes through
//! an explicit [`Tensor::expand`].

use super::tensor::{BackwardCtx, Tensor};
use super::NumericsError;

type Result<T> = std::result::Result<T, NumericsError>;

/// Negative slope used by every LeakyReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.01;

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Clone, Copy)]
enum Bcast {
    Same,
    LhsScalar,
    RhsScalar,
}

fn bcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Bcast, Vec<usize>)> {
    if a.shape() == b.shape() {
        Ok((Bcast::Same, a.shape().to_vec()))
    } else if a.numel() == 1 {
        Ok((Bcast::LhsScalar, b.shape().to_vec()))
    } else if b.numel() == 1 {
        Ok((Bcast::RhsScalar, a.shape().to_vec()))
    } else {
        Err(dim_err(op, a.shape(), b.shape()))
    }
}

/// Applies an elementwise binary op with scalar broadcasting. `df` returns
/// the local partials (d/da, d/db) at (a, b).
fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: fn(f64, f64) -> f64,
    df: fn(f64, f64) -> (f64, f64),
) -> Result<Tensor> {
    let (mode, shape) = bcast(op, a, b)?;
    let n: usize = shape.iter().product();
    let (av, bv) = (a.values(), b.values());
    let pick = move |i: usize| -> (f64, f64) {
        match mode {
            Bcast::Same => (av[i], bv[i]),
            Bcast::LhsScalar => (av[0], bv[i]),
            Bcast::RhsScalar => (av[i], bv[0]),
        }
    };
    let value: Vec<f64> = (0..n).map(|i| {
        let (x, y) = pick(i);
        f(x, y)
    }).collect();
    Ok(Tensor::from_op(
        value,
        shape,
        vec![a.clone(), b.clone()],
        Box::new(move |ctx: &BackwardCtx<'_>| {
            let (pa, pb) = (&ctx.parents[0], &ctx.parents[1]);
            let (av, bv) = (pa.values(), pb.values());
            let n = ctx.grad.len();
            let mut ga = vec![0.0; pa.numel()];
            let mut gb = vec![0.0; pb.numel()];
            for i in 0..n {
                let (ia, ib) = match mode {
                    Bcast::Same => (i, i),
                    Bcast::LhsScalar => (0, i),
                    Bcast::RhsScalar => (i, 0),
                };
                let (da, db) = df(av[ia], bv[ib]);
                ga[ia] += da * ctx.grad[i];
                gb[ib] += db * ctx.grad[i];
            }
            pa.accumulate_slice(&ga);
            pb.accumulate_slice(&gb);
        }),
    ))
}

/// Elementwise unary op; `df(x, y)` is the derivative given input and output.
fn unary(x: &Tensor, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
    let value: Vec<f64> = x.values().iter().map(|&v| f(v)).collect();
    Tensor::from_op(
        value,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |ctx: &BackwardCtx<'_>| {
            let p = &ctx.parents[0];
            let xv = p.values();
            p.accumulate(|g| {
                for i in 0..g.len() {
                    g[i] += ctx.grad[i] * df(xv[i], ctx.value[i]);
                }
            });
        }),
    )
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary("add", self, other, |a, b| a + b, |_, _| (1.0, 1.0))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary("sub", self, other, |a, b| a - b, |_, _| (1.0, -1.0))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary("mul", self, other, |a, b| a * b, |a, b| (b, a))
    }

    /// Elementwise quotient; the divisor must be nonzero.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.mul(&other.reciprocal()?)
    }

    pub fn neg(&self) -> Tensor {
        unary(self, |v| -v, |_, _| -1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary(self, move |v| c * v, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, move |v| v + c, |_, _| 1.0)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn log2(&self) -> Result<Tensor> {
        if let Some(v) = self.values().iter().find(|v| **v <= 0.0) {
            return Err(NumericsError::Domain {
                op: "log2",
                detail: format!("argument {v} is not positive"),
            });
        }
        Ok(unary(self, f64::log2, |x, _| 1.0 / (x * std::f64::consts::LN_2)))
    }

    pub fn reciprocal(&self) -> Result<Tensor> {
        if self.values().iter().any(|v| *v == 0.0) {
            return Err(NumericsError::Domain {
                op: "reciprocal",
                detail: "division by zero".into(),
            });
        }
        Ok(unary(self, |v| 1.0 / v, |_, y| -y * y))
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        unary(
            self,
            move |v| if v > 0.0 { v } else { slope * v },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(
            self,
            |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    /// Square root. The derivative at exactly zero is taken as zero (the
    /// subgradient used wherever powers are clamped by a ReLU).
    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(v) = self.values().iter().find(|v| **v < 0.0 || v.is_nan()) {
            return Err(NumericsError::Domain {
                op: "sqrt",
                detail: format!("argument {v} is negative"),
            });
        }
        Ok(unary(self, f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 }))
    }

    pub fn square(&self) -> Tensor {
        unary(self, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn cos(&self) -> Tensor {
        unary(self, f64::cos, |x, _| -x.sin())
    }

    pub fn sin(&self) -> Tensor {
        unary(self, f64::sin, |x, _| x.cos())
    }

    /// `max(x, c)` elementwise against a constant; ties route to the constant.
    pub fn max_scalar(&self, c: f64) -> Tensor {
        unary(self, move |v| v.max(c), move |x, _| if x > c { 1.0 } else { 0.0 })
    }

    /// Elementwise choice between two same-shaped tensors by a constant mask.
    pub fn select(mask: &[bool], a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() || mask.len() != a.numel() {
            return Err(dim_err("select", a.shape(), b.shape()));
        }
        let mask = mask.to_vec();
        let value = mask
            .iter()
            .zip(a.values().iter().zip(b.values()))
            .map(|(m, (x, y))| if *m { *x } else { *y })
            .collect();
        Ok(Tensor::from_op(
            value,
            a.shape().to_vec(),
            vec![a.clone(), b.clone()],
            Box::new(move |ctx| {
                let ga: Vec<f64> = ctx.grad.iter().zip(&mask).map(|(g, m)| if *m { *g } else { 0.0 }).collect();
                let gb: Vec<f64> = ctx.grad.iter().zip(&mask).map(|(g, m)| if *m { 0.0 } else { *g }).collect();
                ctx.parents[0].accumulate_slice(&ga);
                ctx.parents[1].accumulate_slice(&gb);
            }),
        ))
    }

    /// Same data, new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(dim_err("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            self.values().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|ctx| ctx.parents[0].accumulate_slice(ctx.grad)),
        ))
    }

    /// Inserts a new axis of extent `n` at `axis`, repeating the data.
    pub fn expand(&self, axis: usize, n: usize) -> Result<Tensor> {
        if axis > self.shape().len() {
            return Err(NumericsError::Usage(format!(
                "expand axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis..].iter().product();
        let mut shape = self.shape().to_vec();
        shape.insert(axis, n);
        let src = self.values();
        let mut value = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let block = &src[o * inner..(o + 1) * inner];
            for _ in 0..n {
                value.extend_from_slice(block);
            }
        }
        Ok(Tensor::from_op(
            value,
            shape,
            vec![self.clone()],
            Box::new(move |ctx| {
                ctx.parents[0].accumulate(|g| {
                    for o in 0..outer {
                        for r in 0..n {
                            let base = (o * n + r) * inner;
                            for i in 0..inner {
                                g[o * inner + i] += ctx.grad[base + i];
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Sum along `axis` (the axis is removed).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape().len() {
            return Err(NumericsError::Usage(format!(
                "sum axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        let src = self.values();
        let mut value = vec![0.0; outer * inner];
        for o in 0..outer {
            for r in 0..n {
                for i in 0..inner {
                    value[o * inner + i] += src[(o * n + r) * inner + i];
                }
            }
        }
        Ok(Tensor::from_op(
            value,
            shape,
            vec![self.clone()],
            Box::new(move |ctx| {
                ctx.parents[0].accumulate(|g| {
                    for o in 0..outer {
                        for r in 0..n {
                            for i in 0..inner {
                                g[(o * n + r) * inner + i] += ctx.grad[o * inner + i];
                            }
                        }
                    }
                });
            }),
        ))
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum_all(&self) -> Tensor {
        let s = self.values().iter().sum();
        Tensor::from_op(
            vec![s],
            vec![],
            vec![self.clone()],
            Box::new(|ctx| {
                let g0 = ctx.grad[0];
                ctx.parents[0].accumulate(|g| g.iter_mut().for_each(|v| *v += g0));
            }),
        )
    }

    /// Maximum along `axis` together with the winning index per output
    /// element. Ties go to the lowest index; the gradient is routed only to
    /// the winner.
    pub fn max_axis(&self, axis: usize) -> Result<(Tensor, Vec<usize>)> {
        if axis >= self.shape().len() {
            return Err(NumericsError::Usage(format!(
                "max axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        if n == 0 {
            return Err(NumericsError::Domain {
                op: "max",
                detail: "empty reduction axis".into(),
            });
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        let src = self.values();
        let mut value = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let out = o * inner + i;
                for r in 0..n {
                    let v = src[(o * n + r) * inner + i];
                    if r == 0 || v > value[out] {
                        value[out] = v;
                        arg[out] = r;
                    }
                }
            }
        }
        let routes = arg.clone();
        let t = Tensor::from_op(
            value,
            shape,
            vec![self.clone()],
            Box::new(move |ctx| {
                ctx.parents[0].accumulate(|g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let out = o * inner + i;
                            g[(o * n + routes[out]) * inner + i] += ctx.grad[out];
                        }
                    }
                });
            }),
        );
        Ok((t, arg))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.shape().len() || start + len > self.shape()[axis] {
            return Err(NumericsError::Usage(format!(
                "narrow({axis}, {start}, {len}) out of range for shape {:?}",
                self.shape()
            )));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let src = self.values();
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            value.extend_from_slice(&src[base..base + len * inner]);
        }
        Ok(Tensor::from_op(
            value,
            shape,
            vec![self.clone()],
            Box::new(move |ctx| {
                ctx.parents[0].accumulate(|g| {
                    for o in 0..outer {
                        let base = (o * n + start) * inner;
                        let gsrc = &ctx.grad[o * len * inner..(o + 1) * len * inner];
                        for (dst, s) in g[base..base + len * inner].iter_mut().zip(gsrc) {
                            *dst += s;
                        }
                    }
                });
            }),
        ))
    }

    /// Selects rows (entries of axis 0) by index; repeated indices allowed.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let rows = *self.shape().first().ok_or_else(|| {
            NumericsError::Usage("gather_rows on a scalar".into())
        })?;
        if let Some(bad) = idx.iter().find(|i| **i >= rows) {
            return Err(NumericsError::Usage(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let width = self.numel() / rows.max(1);
        let mut shape = self.shape().to_vec();
        shape[0] = idx.len();
        let src = self.values();
        let mut value = Vec::with_capacity(idx.len() * width);
        for &r in idx {
            value.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        let idx = idx.to_vec();
        Ok(Tensor::from_op(
            value,
            shape,
            vec![self.clone()],
            Box::new(move |ctx| {
                ctx.parents[0].accumulate(|g| {
                    for (k, &r) in idx.iter().enumerate() {
                        for c in 0..width {
                            g[r * width + c] += ctx.grad[k * width + c];
                        }
                    }
                });
            }),
        ))
    }

    /// Adds row `i` into output row `segment[i]`; rows of empty segments are
    /// zero.
    pub fn segment_sum(&self, segment: &[usize], n_segments: usize) -> Result<Tensor> {
        let rows = *self.shape().first().ok_or_else(|| {
            NumericsError::Usage("segment_sum on a scalar".into())
        })?;
        if segment.len() != rows {
            return Err(dim_err("segment_sum", self.shape(), &[segment.len()]));
        }
        if let Some(bad) = segment.iter().find(|s| **s >= n_segments) {
            return Err(NumericsError::Usage(format!(
                "segment id {bad} out of range for {n_segments} segments"
            )));
        }
        let width = if rows == 0 { self.shape()[1..].iter().product() } else { self.numel() / rows };
        let mut shape = self.shape().to_vec();
        shape[0] = n_segments;
        let src = self.values();
        let mut value = vec![0.0; n_segments * width];
        for (r, &s) in segment.iter().enumerate() {
            for c in 0..width {
                value[s * width + c] += src[r * width + c];
            }
        }
        let segment = segment.to_vec();
        Ok(Tensor::from_op(
            value,
            shape,
            vec![self.clone()],
            Box::new(move |ctx| {
                ctx.parents[0].accumulate(|g| {
                    for (r, &s) in segment.iter().enumerate() {
                        for c in 0..width {
                            g[r * width + c] += ctx.grad[s * width + c];
                        }
                    }
                });
            }),
        ))
    }

    /// Pads the last axis with zero columns up to `target_width`.
    pub fn zero_pad(&self, target_width: usize) -> Result<Tensor> {
        let width = *self.shape().last().ok_or_else(|| {
            NumericsError::Usage("zero_pad on a scalar".into())
        })?;
        if target_width < width {
            return Err(dim_err("zero_pad", self.shape(), &[target_width]));
        }
        let rows = if width == 0 { self.shape()[..self.shape().len() - 1].iter().product() } else { self.numel() / width };
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = target_width;
        let src = self.values();
        let mut value = vec![0.0; rows * target_width];
        for r in 0..rows {
            value[r * target_width..r * target_width + width].copy_from_slice(&src[r * width..(r + 1) * width]);
        }
        Ok(Tensor::from_op(
            value,
            shape,
            vec![self.clone()],
            Box::new(move |ctx| {
                ctx.parents[0].accumulate(|g| {
                    for r in 0..rows {
                        for c in 0..width {
                            g[r * width + c] += ctx.grad[r * target_width + c];
                        }
                    }
                });
            }),
        ))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::Usage("concat of zero tensors".into()))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(NumericsError::Usage(format!(
                "concat axis {axis} out of range for shape {:?}",
                first.shape()
            )));
        }
        for p in parts {
            let ok = p.shape().len() == rank
                && p.shape().iter().enumerate().all(|(d, e)| d == axis || *e == first.shape()[d]);
            if !ok {
                return Err(dim_err("concat", first.shape(), p.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                value.extend_from_slice(&p.values()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        Ok(Tensor::from_op(
            value,
            shape,
            parts.to_vec(),
            Box::new(move |ctx| {
                let mut offset = 0;
                for (p, &e) in ctx.parents.iter().zip(&extents) {
                    p.accumulate(|g| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            for i in 0..e * inner {
                                g[o * e * inner + i] += ctx.grad[src + i];
                            }
                        }
                    });
                    offset += e;
                }
            }),
        ))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(dim_err("matmul", a, b));
        }
        let a3 = self.reshape(&[1, a[0], a[1]])?;
        let b3 = other.reshape(&[1, b[0], b[1]])?;
        a3.bmm(&b3, false, false)?.reshape(&[a[0], b[1]])
    }

    /// Batched matrix product over a leading batch axis, with optional
    /// transposition of either operand's trailing matrix.
    pub fn bmm(&self, other: &Tensor, trans_a: bool, trans_b: bool) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dim_err("bmm", sa, sb));
        }
        let batch = sa[0];
        let (m, k) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(dim_err("bmm", sa, sb));
        }
        let mut value = vec![0.0; batch * m * n];
        let (a_mat, b_mat) = (sa[1] * sa[2], sb[1] * sb[2]);
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                &self.values()[bi * a_mat..(bi + 1) * a_mat],
                MatLayout::new(sa[1], sa[2], trans_a),
                &other.values()[bi * b_mat..(bi + 1) * b_mat],
                MatLayout::new(sb[1], sb[2], trans_b),
                &mut value[bi * m * n..(bi + 1) * m * n],
                MatLayout::new(m, n, false),
            );
        }
        let (ra, ca, rb, cb) = (sa[1], sa[2], sb[1], sb[2]);
        Ok(Tensor::from_op(
            value,
            vec![batch, m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                let (pa, pb) = (&ctx.parents[0], &ctx.parents[1]);
                let g = ctx.grad;
                let glay = MatLayout::new(m, n, false);
                // C = op(A) op(B); dop(A) = G op(B)^T, dop(B) = op(A)^T G.
                if pa.requires_grad() {
                    let mut ga = vec![0.0; batch * ra * ca];
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let bs = &pb.values()[bi * rb * cb..(bi + 1) * rb * cb];
                        let out = &mut ga[bi * ra * ca..(bi + 1) * ra * ca];
                        if trans_a {
                            // dA = (G op(B)^T)^T = op(B) G^T  : [k, m]
                            gemm(k, n, m, bs, MatLayout::new(rb, cb, trans_b), gs, glay.t(), out, MatLayout::new(ra, ca, false));
                        } else {
                            gemm(m, n, k, gs, glay, bs, MatLayout::new(rb, cb, !trans_b), out, MatLayout::new(ra, ca, false));
                        }
                    }
                    pa.accumulate_slice(&ga);
                }
                if pb.requires_grad() {
                    let mut gb = vec![0.0; batch * rb * cb];
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let as_ = &pa.values()[bi * ra * ca..(bi + 1) * ra * ca];
                        let out = &mut gb[bi * rb * cb..(bi + 1) * rb * cb];
                        if trans_b {
                            // dB = (op(A)^T G)^T = G^T op(A) : [n, k]
                            gemm(n, m, k, gs, glay.t(), as_, MatLayout::new(ra, ca, trans_a), out, MatLayout::new(rb, cb, false));
                        } else {
                            gemm(k, m, n, as_, MatLayout::new(ra, ca, !trans_a), gs, glay, out, MatLayout::new(rb, cb, false));
                        }
                    }
                    pb.accumulate_slice(&gb);
                }
            }),
        ))
    }

    /// Batched solve of `A X = B` for square `A: [b, n, n]`, `B: [b, n, r]`.
    pub fn solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[1] != sa[2] || sa[0] != sb[0] || sb[1] != sa[1] {
            return Err(dim_err("solve", sa, sb));
        }
        let (batch, n, r) = (sa[0], sa[1], sb[2]);
        let mut factors = Vec::with_capacity(batch);
        let mut value = vec![0.0; batch * n * r];
        for bi in 0..batch {
            let lu = Lu::factor(&a.values()[bi * n * n..(bi + 1) * n * n], n).ok_or_else(|| {
                NumericsError::Domain {
                    op: "solve",
                    detail: format!("matrix {bi} is singular"),
                }
            })?;
            lu.solve_into(&b.values()[bi * n * r..(bi + 1) * n * r], r, false, &mut value[bi * n * r..(bi + 1) * n * r]);
            factors.push(lu);
        }
        Ok(Tensor::from_op(
            value,
            vec![batch, n, r],
            vec![a.clone(), b.clone()],
            Box::new(move |ctx| {
                // gB = A^{-T} G, gA = -gB X^T
                let mut gb = vec![0.0; batch * n * r];
                for (bi, lu) in factors.iter().enumerate() {
                    lu.solve_into(&ctx.grad[bi * n * r..(bi + 1) * n * r], r, true, &mut gb[bi * n * r..(bi + 1) * n * r]);
                }
                let (pa, pb) = (&ctx.parents[0], &ctx.parents[1]);
                if pa.requires_grad() {
                    let mut ga = vec![0.0; batch * n * n];
                    for bi in 0..batch {
                        let gbs = &gb[bi * n * r..(bi + 1) * n * r];
                        let xs = &ctx.value[bi * n * r..(bi + 1) * n * r];
                        for i in 0..n {
                            for j in 0..n {
                                let mut s = 0.0;
                                for c in 0..r {
                                    s += gbs[i * r + c] * xs[j * r + c];
                                }
                                ga[bi * n * n + i * n + j] = -s;
                            }
                        }
                    }
                    pa.accumulate_slice(&ga);
                }
                pb.accumulate_slice(&gb);
            }),
        ))
    }
}

/// Row-major matrix storage viewed either directly or transposed.
#[derive(Clone, Copy)]
struct MatLayout {
    rs: isize,
    cs: isize,
}

impl MatLayout {
    /// Layout of the logical operand for a stored `rows x cols` matrix.
    fn new(rows: usize, cols: usize, transpose: bool) -> Self {
        let _ = rows;
        if transpose {
            MatLayout { rs: 1, cs: cols as isize }
        } else {
            MatLayout { rs: cols as isize, cs: 1 }
        }
    }

    fn t(self) -> Self {
        MatLayout { rs: self.cs, cs: self.rs }
    }
}

/// `c += a * b` with logical shapes `[m, k] x [k, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], la: MatLayout, b: &[f64], lb: MatLayout, c: &mut [f64], lc: MatLayout) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the layouts describe in-bounds strided views of the slices,
    // whose lengths are checked by the callers' shape validation.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), la.rs, la.cs, b.as_ptr(), lb.rs, lb.cs, 1.0, c.as_mut_ptr(), lc.rs, lc.cs,
        );
    }
}

/// Dense LU factorization with partial pivoting.
struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    fn factor(a: &[f64], n: usize) -> Option<Self> {
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let (piv, mag) = (col..n)
                .map(|r| (r, lu[r * n + col].abs()))
                .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if !(mag > 0.0) || !mag.is_finite() {
                return None;
            }
            if piv != col {
                for c in 0..n {
                    lu.swap(col * n + c, piv * n + c);
                }
                perm.swap(col, piv);
            }
            let d = lu[col * n + col];
            for r in col + 1..n {
                let f = lu[r * n + col] / d;
                lu[r * n + col] = f;
                for c in col + 1..n {
                    lu[r * n + c] -= f * lu[col * n + c];
                }
            }
        }
        Some(Lu { n, lu, perm })
    }

    /// Solves `A X = B` (or `A^T X = B`) for `r` right-hand columns.
    fn solve_into(&self, b: &[f64], r: usize, transpose: bool, out: &mut [f64]) {
        let n = self.n;
        let lu = &self.lu;
        if !transpose {
            // P A = L U
            for i in 0..n {
                out[i * r..(i + 1) * r].copy_from_slice(&b[self.perm[i] * r..(self.perm[i] + 1) * r]);
            }
            for i in 0..n {
                for j in 0..i {
                    let f = lu[i * n + j];
                    for c in 0..r {
                        out[i * r + c] -= f * out[j * r + c];
                    }
                }
            }
            for i in (0..n).rev() {
                for j in i + 1..n {
                    let f = lu[i * n + j];
                    for c in 0..r {
                        out[i * r + c] -= f * out[j * r + c];
                    }
                }
                let d = lu[i * n + i];
                for c in 0..r {
                    out[i * r + c] /= d;
                }
            }
        } else {
            // A^T = U^T L^T P, solve U^T y = b, L^T z = y, x = P^T z
            let mut y = b[..n * r].to_vec();
            for i in 0..n {
                for j in 0..i {
                    let f = lu[j * n + i];
                    for c in 0..r {
                        y[i * r + c] -= f * y[j * r + c];
                    }
                }
                let d = lu[i * n + i];
                for c in 0..r {
                    y[i * r + c] /= d;
                }
            }
            for i in (0..n).rev() {
                for j in i + 1..n {
                    let f = lu[j * n + i];
                    for c in 0..r {
                        y[i * r + c] -= f * y[j * r + c];
                    }
                }
            }
            for i in 0..n {
                out[self.perm[i] * r..(self.perm[i] + 1) * r].copy_from_slice(&y[i * r..(i + 1) * r]);
            }
        }
    }
}

/// Smallest-to-largest pivot magnitude ratio of an LU factorization; zero if
/// the matrix is exactly singular. Used to decide when to regularize.
pub fn pivot_ratio(a: &[f64], n: usize) -> f64 {
    match Lu::factor(a, n) {
        None => 0.0,
        Some(lu) => {
            let piv: Vec<f64> = (0..n).map(|i| lu.lu[i * n + i].abs()).collect();
            let max = piv.iter().cloned().fold(0.0, f64::max);
            let min = piv.iter().cloned().fold(f64::INFINITY, f64::min);
            if max > 0.0 { min / max } else { 0.0 }
        }
    }
}
