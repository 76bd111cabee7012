use std::rc::Rc;
use std::sync::Arc;

use crate::tensor::numel;
use crate::var::Op;
use crate::{Float, Tensor, Var};

/// Marker for an absent source element in a gather index (reads as zero).
pub const PAD: u32 = u32::MAX;

fn pick<T: Float>(needs: &[bool], i: usize, f: impl FnOnce() -> Var<T>) -> Option<Var<T>> {
    needs[i].then(f)
}

struct AddOp;
impl<T: Float> Op<T> for AddOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        vec![pick(n, 0, || g.clone()), pick(n, 1, || g.clone())]
    }
}

struct SubOp;
impl<T: Float> Op<T> for SubOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        vec![pick(n, 0, || g.clone()), pick(n, 1, || g.neg())]
    }
}

struct MulOp;
impl<T: Float> Op<T> for MulOp {
    fn backward(&self, x: &[Var<T>], _: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        vec![pick(n, 0, || g.mul(&x[1])), pick(n, 1, || g.mul(&x[0]))]
    }
}

struct DivOp;
impl<T: Float> Op<T> for DivOp {
    fn backward(&self, x: &[Var<T>], out: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        vec![
            pick(n, 0, || g.div(&x[1])),
            pick(n, 1, || g.mul(out).div(&x[1]).neg()),
        ]
    }
}

struct ScaleOp<T>(T);
impl<T: Float> Op<T> for ScaleOp<T> {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        vec![pick(n, 0, || g.scale(self.0))]
    }
}

struct IdentityGradOp;
impl<T: Float> Op<T> for IdentityGradOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        vec![pick(n, 0, || g.clone())]
    }
}

struct SquareOp;
impl<T: Float> Op<T> for SquareOp {
    fn backward(&self, x: &[Var<T>], _: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        vec![pick(n, 0, || g.mul(&x[0]).scale(T::of(2.0)))]
    }
}

struct SqrtOp;
impl<T: Float> Op<T> for SqrtOp {
    fn backward(&self, _: &[Var<T>], out: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        vec![pick(n, 0, || g.div(out).scale(T::of(0.5)))]
    }
}

struct ExpOp;
impl<T: Float> Op<T> for ExpOp {
    fn backward(&self, _: &[Var<T>], out: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        vec![pick(n, 0, || g.mul(out))]
    }
}

struct LnOp;
impl<T: Float> Op<T> for LnOp {
    fn backward(&self, x: &[Var<T>], _: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        vec![pick(n, 0, || g.div(&x[0]))]
    }
}

struct TanhOp;
impl<T: Float> Op<T> for TanhOp {
    fn backward(&self, _: &[Var<T>], out: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        vec![pick(n, 0, || g.mul(&out.square().neg().add_scalar(T::one())))]
    }
}

struct SigmoidOp;
impl<T: Float> Op<T> for SigmoidOp {
    fn backward(&self, _: &[Var<T>], out: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        vec![pick(n, 0, || {
            g.mul(out).mul(&out.neg().add_scalar(T::one()))
        })]
    }
}

struct SoftplusOp;
impl<T: Float> Op<T> for SoftplusOp {
    fn backward(&self, x: &[Var<T>], _: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        vec![pick(n, 0, || g.mul(&x[0].sigmoid()))]
    }
}

struct AcosOp;
impl<T: Float> Op<T> for AcosOp {
    fn backward(&self, x: &[Var<T>], _: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        vec![pick(n, 0, || {
            let denom = x[0].square().neg().add_scalar(T::one()).sqrt();
            g.div(&denom).neg()
        })]
    }
}

/// Elementwise op whose derivative is piecewise constant.
struct MaskOp<T: Float>(Tensor<T>);
impl<T: Float> Op<T> for MaskOp<T> {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        vec![pick(n, 0, || g.mul(&Var::constant(self.0.clone())))]
    }
}

struct MatMulOp {
    ta: bool,
    tb: bool,
}
impl<T: Float> Op<T> for MatMulOp {
    fn backward(&self, x: &[Var<T>], _: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        let (a, b) = (&x[0], &x[1]);
        let (ta, tb) = (self.ta, self.tb);
        vec![
            pick(n, 0, || {
                if ta {
                    b.matmul_t(g, tb, true)
                } else {
                    g.matmul_t(b, false, !tb)
                }
            }),
            pick(n, 1, || {
                if tb {
                    g.matmul_t(a, true, ta)
                } else {
                    a.matmul_t(g, !ta, false)
                }
            }),
        ]
    }
}

struct ReshapeOp(Vec<usize>);
impl<T: Float> Op<T> for ReshapeOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        vec![pick(n, 0, || g.reshape(&self.0))]
    }
}

struct GatherOp {
    idx: Arc<Vec<u32>>,
    in_shape: Vec<usize>,
}
impl<T: Float> Op<T> for GatherOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        vec![pick(n, 0, || g.scatter_add(Arc::clone(&self.idx), &self.in_shape))]
    }
}

struct ScatterAddOp {
    idx: Arc<Vec<u32>>,
    src_shape: Vec<usize>,
}
impl<T: Float> Op<T> for ScatterAddOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        vec![pick(n, 0, || g.gather(Arc::clone(&self.idx), &self.src_shape))]
    }
}

struct SumOp(Vec<usize>);
impl<T: Float> Op<T> for SumOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        vec![pick(n, 0, || g.expand(&self.0))]
    }
}

struct ExpandOp(Vec<usize>);
impl<T: Float> Op<T> for ExpandOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        vec![pick(n, 0, || g.sum().reshape(&self.0))]
    }
}

struct SumRowsOp(usize);
impl<T: Float> Op<T> for SumRowsOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        vec![pick(n, 0, || g.broadcast_rows(self.0))]
    }
}

struct BroadcastRowsOp;
impl<T: Float> Op<T> for BroadcastRowsOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        vec![pick(n, 0, || g.sum_rows())]
    }
}

struct SumColsOp(usize);
impl<T: Float> Op<T> for SumColsOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        vec![pick(n, 0, || g.broadcast_cols(self.0))]
    }
}

struct BroadcastColsOp;
impl<T: Float> Op<T> for BroadcastColsOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        vec![pick(n, 0, || g.sum_cols())]
    }
}

struct ConcatColsOp(Vec<usize>);
impl<T: Float> Op<T> for ConcatColsOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        let mut start = 0;
        self.0
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let s = start;
                start += w;
                pick(n, i, || g.slice_cols(s, s + w))
            })
            .collect()
    }
}

struct ConcatRowsOp(Vec<usize>);
impl<T: Float> Op<T> for ConcatRowsOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        let mut start = 0;
        self.0
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let s = start;
                start += r;
                pick(n, i, || g.slice_rows(s, s + r))
            })
            .collect()
    }
}

/// Rows `[start, end)` of a tensor whose leading axis is rows.
struct SliceRowsOp {
    start: usize,
    total: usize,
}
impl<T: Float> Op<T> for SliceRowsOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        vec![pick(n, 0, || g.pad_rows(self.start, self.total))]
    }
}

struct PadRowsOp {
    start: usize,
    rows: usize,
}
impl<T: Float> Op<T> for PadRowsOp {
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, n: &[bool]) -> Vec<Option<Var<T>>> {
        vec![pick(n, 0, || g.slice_rows(self.start, self.start + self.rows))]
    }
}

fn rows_and_width(shape: &[usize]) -> (usize, usize) {
    assert!(!shape.is_empty(), "row op on a scalar");
    (shape[0], numel(&shape[1..]))
}

impl<T: Float> Var<T> {
    fn unary(&self, value: Tensor<T>, op: impl Op<T> + 'static) -> Self {
        Var::from_op(value, vec![self.clone()], Rc::new(op))
    }

    fn binary(&self, other: &Self, value: Tensor<T>, op: impl Op<T> + 'static) -> Self {
        Var::from_op(value, vec![self.clone(), other.clone()], Rc::new(op))
    }

    pub fn add(&self, other: &Self) -> Self {
        self.binary(other, self.value().zip(other.value(), |a, b| a + b), AddOp)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.binary(other, self.value().zip(other.value(), |a, b| a - b), SubOp)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.binary(other, self.value().zip(other.value(), |a, b| a * b), MulOp)
    }

    pub fn div(&self, other: &Self) -> Self {
        self.binary(other, self.value().zip(other.value(), |a, b| a / b), DivOp)
    }

    pub fn neg(&self) -> Self {
        self.scale(-T::one())
    }

    pub fn scale(&self, c: T) -> Self {
        self.unary(self.value().map(|v| v * c), ScaleOp(c))
    }

    pub fn add_scalar(&self, c: T) -> Self {
        self.unary(self.value().map(|v| v + c), IdentityGradOp)
    }

    pub fn square(&self) -> Self {
        self.unary(self.value().map(|v| v * v), SquareOp)
    }

    pub fn sqrt(&self) -> Self {
        self.unary(self.value().map(|v| v.sqrt()), SqrtOp)
    }

    pub fn exp(&self) -> Self {
        self.unary(self.value().map(|v| v.exp()), ExpOp)
    }

    pub fn ln(&self) -> Self {
        self.unary(self.value().map(|v| v.ln()), LnOp)
    }

    pub fn tanh(&self) -> Self {
        self.unary(self.value().map(|v| v.tanh()), TanhOp)
    }

    pub fn sigmoid(&self) -> Self {
        self.unary(
            self.value().map(|v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            }),
            SigmoidOp,
        )
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Self {
        self.unary(
            self.value()
                .map(|v| v.max(T::zero()) + (-v.abs()).exp().ln_1p()),
            SoftplusOp,
        )
    }

    pub fn acos(&self) -> Self {
        self.unary(self.value().map(|v| v.acos()), AcosOp)
    }

    pub fn leaky_relu(&self, slope: T) -> Self {
        let mask = self
            .value()
            .map(|v| if v > T::zero() { T::one() } else { slope });
        let out = self.value().zip(&mask, |v, m| v * m);
        self.unary(out, MaskOp(mask))
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        let mask = self.value().map(|v| {
            if v >= lo && v <= hi {
                T::one()
            } else {
                T::zero()
            }
        });
        self.unary(self.value().map(|v| v.max(lo).min(hi)), MaskOp(mask))
    }

    pub fn abs(&self) -> Self {
        let mask = self.value().map(|v| {
            if v > T::zero() {
                T::one()
            } else if v < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        });
        self.unary(self.value().map(|v| v.abs()), MaskOp(mask))
    }

    pub fn matmul(&self, other: &Self) -> Self {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` with optional transposes.
    pub fn matmul_t(&self, other: &Self, ta: bool, tb: bool) -> Self {
        let value = self.value().matmul(other.value(), ta, tb);
        self.binary(other, value, MatMulOp { ta, tb })
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        if shape == self.shape() {
            return self.clone();
        }
        self.unary(self.value().reshape(shape), ReshapeOp(self.shape().to_vec()))
    }

    /// `out[i] = self[idx[i]]` over flat storage; [`PAD`] reads as zero.
    pub fn gather(&self, idx: Arc<Vec<u32>>, out_shape: &[usize]) -> Self {
        assert_eq!(numel(out_shape), idx.len(), "gather index/shape mismatch");
        let src = self.data();
        let data = idx
            .iter()
            .map(|&i| if i == PAD { T::zero() } else { src[i as usize] })
            .collect();
        let value = Tensor::new(out_shape, data);
        let in_shape = self.shape().to_vec();
        self.unary(value, GatherOp { idx, in_shape })
    }

    /// `out[idx[i]] += self[i]` into zeros of `out_shape`; the adjoint of [`Var::gather`].
    pub fn scatter_add(&self, idx: Arc<Vec<u32>>, out_shape: &[usize]) -> Self {
        assert_eq!(self.len(), idx.len(), "scatter index/shape mismatch");
        let mut data = vec![T::zero(); numel(out_shape)];
        for (&i, &v) in idx.iter().zip(self.data()) {
            if i != PAD {
                data[i as usize] = data[i as usize] + v;
            }
        }
        let value = Tensor::new(out_shape, data);
        let src_shape = self.shape().to_vec();
        self.unary(value, ScatterAddOp { idx, src_shape })
    }

    pub fn sum(&self) -> Self {
        self.unary(Tensor::scalar(self.value().sum()), SumOp(self.shape().to_vec()))
    }

    pub fn mean(&self) -> Self {
        let n = T::of(self.len() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Broadcasts a single-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Self {
        assert_eq!(self.len(), 1, "expand requires a single element");
        self.unary(
            Tensor::full(shape, self.item()),
            ExpandOp(self.shape().to_vec()),
        )
    }

    /// Sum over axis 0 of an `[n, m]` tensor, giving `[m]`.
    pub fn sum_rows(&self) -> Self {
        let (n, m) = self.value().dims2();
        let mut out = vec![T::zero(); m];
        for row in self.data().chunks_exact(m.max(1)).take(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        self.unary(Tensor::new(&[m], out), SumRowsOp(n))
    }

    /// Repeats a `[m]` vector into `n` rows.
    pub fn broadcast_rows(&self, n: usize) -> Self {
        assert_eq!(self.shape().len(), 1, "broadcast_rows expects a vector");
        let m = self.len();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(self.data());
        }
        self.unary(Tensor::new(&[n, m], out), BroadcastRowsOp)
    }

    /// Sum over axis 1 of an `[n, m]` tensor, giving `[n]`.
    pub fn sum_cols(&self) -> Self {
        let (n, m) = self.value().dims2();
        let out: Vec<T> = if m == 0 {
            vec![T::zero(); n]
        } else {
            self.data()
                .chunks_exact(m)
                .map(|r| r.iter().copied().sum())
                .collect()
        };
        self.unary(Tensor::new(&[n], out), SumColsOp(m))
    }

    /// Repeats each entry of a `[n]` vector across `m` columns.
    pub fn broadcast_cols(&self, m: usize) -> Self {
        assert_eq!(self.shape().len(), 1, "broadcast_cols expects a vector");
        let n = self.len();
        let mut out = Vec::with_capacity(n * m);
        for &v in self.data() {
            out.extend(std::iter::repeat(v).take(m));
        }
        self.unary(Tensor::new(&[n, m], out), BroadcastColsOp)
    }

    /// `self + b` with `b: [m]` added to every row of `self: [n, m]`.
    pub fn add_row(&self, b: &Self) -> Self {
        self.add(&b.broadcast_rows(self.shape()[0]))
    }

    /// Multiplies row `i` of `self: [n, m]` by `v[i]`.
    pub fn mul_col(&self, v: &Self) -> Self {
        self.mul(&v.broadcast_cols(self.shape()[1]))
    }

    /// Divides row `i` of `self: [n, m]` by `v[i]`.
    pub fn div_col(&self, v: &Self) -> Self {
        self.div(&v.broadcast_cols(self.shape()[1]))
    }

    /// Concatenates `[n, w_i]` tensors along columns.
    pub fn concat_cols(parts: &[Self]) -> Self {
        assert!(!parts.is_empty());
        let n = parts[0].shape()[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (r, w) = p.value().dims2();
                assert_eq!(r, n, "concat_cols row mismatch");
                w
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
        }
        Var::from_op(
            Tensor::new(&[n, total], out),
            parts.to_vec(),
            Rc::new(ConcatColsOp(widths)),
        )
    }

    /// Concatenates tensors along the leading axis.
    pub fn concat_rows(parts: &[Self]) -> Self {
        assert!(!parts.is_empty());
        let tail = parts[0].shape()[1..].to_vec();
        let mut rows = Vec::with_capacity(parts.len());
        let mut out = Vec::new();
        for p in parts {
            assert_eq!(&p.shape()[1..], tail.as_slice(), "concat_rows shape mismatch");
            rows.push(p.shape()[0]);
            out.extend_from_slice(p.data());
        }
        let mut shape = vec![rows.iter().sum()];
        shape.extend_from_slice(&tail);
        Var::from_op(
            Tensor::new(&shape, out),
            parts.to_vec(),
            Rc::new(ConcatRowsOp(rows)),
        )
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Self {
        let (n, m) = self.value().dims2();
        assert!(start <= end && end <= m, "slice_cols out of range");
        let w = end - start;
        let idx: Vec<u32> = (0..n)
            .flat_map(|r| (start..end).map(move |c| (r * m + c) as u32))
            .collect();
        self.gather(Arc::new(idx), &[n, w])
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let (rows, width) = rows_and_width(self.shape());
        assert!(start <= end && end <= rows, "slice_rows out of range");
        let mut shape = self.shape().to_vec();
        shape[0] = end - start;
        let value = Tensor::new(&shape, self.data()[start * width..end * width].to_vec());
        self.unary(value, SliceRowsOp { start, total: rows })
    }

    /// Places `self` at row offset `start` inside zeros with `total` rows.
    pub fn pad_rows(&self, start: usize, total: usize) -> Self {
        let (rows, width) = rows_and_width(self.shape());
        assert!(start + rows <= total, "pad_rows out of range");
        let mut data = vec![T::zero(); total * width];
        data[start * width..(start + rows) * width].copy_from_slice(self.data());
        let mut shape = self.shape().to_vec();
        shape[0] = total;
        self.unary(Tensor::new(&shape, data), PadRowsOp { start, rows })
    }

    /// Selects rows by index (repeats allowed).
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let (n, width) = rows_and_width(self.shape());
        let idx: Vec<u32> = rows
            .iter()
            .flat_map(|&r| {
                assert!(r < n, "row index out of range");
                (0..width).map(move |c| (r * width + c) as u32)
            })
            .collect();
        let mut shape = self.shape().to_vec();
        shape[0] = rows.len();
        self.gather(Arc::new(idx), &shape)
    }

    /// Squared L2 norm of each row of `[n, m]`, giving `[n]`.
    pub fn row_sq_norm(&self) -> Self {
        self.square().sum_cols()
    }

    /// Scales each row of `[n, m]` to unit L2 norm; `eps` guards zero rows.
    pub fn l2_normalize_rows(&self, eps: T) -> Self {
        let norm = self.row_sq_norm().add_scalar(eps).sqrt();
        self.div_col(&norm)
    }

    /// Row-wise dot products of two `[n, m]` tensors.
    pub fn row_dot(&self, other: &Self) -> Self {
        self.mul(other).sum_cols()
    }
}
