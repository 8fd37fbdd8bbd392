//! Computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value plus whatever the
//! backward rule needs. Nodes are stored in creation order, which is already a
//! topological order, so [`Graph::backward`] is a single reverse sweep.

use rand::Rng;

use super::gemm::{gemm, View};
use super::tensor::{split_axis, strides, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum MatmulKind {
    /// `b` is a plain matrix shared by every leading index of `a`.
    FoldA,
    /// `a` is a plain matrix shared by every leading index of `b`.
    ShareA { batch: usize },
    /// Matching leading dims.
    Batched { batch: usize },
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        kind: MatmulKind,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    MulScalar {
        x: Var,
        s: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    SumAll {
        x: Var,
    },
    Expand {
        x: Var,
        axis: usize,
    },
    Conv3d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        pad: [usize; 3],
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single-threaded computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros when `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn has(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Adds a leaf tensor; `requires_grad` leaves receive gradients.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Batched matrix product over the last two dims.
    ///
    /// Leading dims must either match, or one side must be a plain matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || shape_err!("matmul {:?} x {:?}", sa, sb);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let (kind, out_shape) = if sb.len() == 2 {
            let mut s = sa.clone();
            *s.last_mut().unwrap() = n;
            (MatmulKind::FoldA, s)
        } else if sa.len() == 2 {
            let batch = sb[..sb.len() - 2].iter().product();
            let mut s = sb.clone();
            let r = s.len();
            s[r - 2] = m;
            s[r - 1] = n;
            (MatmulKind::ShareA { batch }, s)
        } else if sa[..sa.len() - 2] == sb[..sb.len() - 2] {
            let batch = sa[..sa.len() - 2].iter().product();
            let mut s = sa.clone();
            *s.last_mut().unwrap() = n;
            (MatmulKind::Batched { batch }, s)
        } else {
            return Err(err());
        };
        let numel: usize = out_shape.iter().product();
        let mut out = vec![0.0; numel];
        let (ad, bd) = (self.data(a), self.data(b));
        match kind {
            MatmulKind::FoldA => {
                let rows = ad.len() / k;
                gemm(
                    rows,
                    k,
                    n,
                    ad,
                    View::row_major(k),
                    bd,
                    View::row_major(n),
                    0.0,
                    &mut out,
                );
            }
            MatmulKind::ShareA { batch } => {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        ad,
                        View::row_major(k),
                        &bd[i * k * n..],
                        View::row_major(n),
                        0.0,
                        &mut out[i * m * n..],
                    );
                }
            }
            MatmulKind::Batched { batch } => {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &ad[i * m * k..],
                        View::row_major(k),
                        &bd[i * k * n..],
                        View::row_major(n),
                        0.0,
                        &mut out[i * m * n..],
                    );
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                kind,
                m,
                k,
                n,
            },
            ng,
        ))
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if !is_suffix(sb, sa) {
            return Err(shape_err!("{} {:?} with {:?}", name, sa, sb));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let nb = bd.len();
        let out: Vec<f64> = ad
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % nb]))
            .collect();
        let t = Tensor::new(sa, out)?;
        Ok((t, self.ng(a) || self.ng(b)))
    }

    /// Elementwise sum; `b` may have a suffix shape of `a` and is then
    /// broadcast over the leading dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(t, Op::Scale { x, c }, ng)
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(shape_err!(
                "mul_scalar needs a scalar, got {:?}",
                self.shape(s)
            ));
        }
        let c = self.value(s).item();
        let t = self.value(x).map(|v| v * c);
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(t, Op::MulScalar { x, s }, ng))
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(shape_err!("axis {} out of range for {:?}", axis, s));
        }
        Ok(())
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for r in 0..inner {
                let idx = |i: usize| o * n * inner + i * inner + r;
                let max = (0..n).map(|i| xd[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in 0..n {
                    let e = (xd[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    sum += e;
                }
                for i in 0..n {
                    out[idx(i)] /= sum;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, axis }, ng))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for r in 0..inner {
                let idx = |i: usize| o * n * inner + i * inner + r;
                let max = (0..n).map(|i| xd[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|i| (xd[idx(i)] - max).exp()).sum::<f64>().ln();
                for i in 0..n {
                    out[idx(i)] = xd[idx(i)] - lse;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LogSoftmax { x, axis }, ng))
    }

    /// Layer normalization over the last dim with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Param(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err!(
                "layer_norm over {:?} with gamma {:?}, beta {:?}",
                shape,
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * gd[i] + bd[i];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(Tensor::new(&shape, out)?, op, ng))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * std_normal_cdf(v));
        let ng = self.ng(x);
        self.push(t, Op::Gelu { x }, ng)
    }

    /// Inverted dropout. Identity (returns `x` itself) when not training or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!(
                "dropout rate must be in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self.data(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Dropout { x, mask }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self
            .value(x)
            .reshape(shape)
            .map_err(|_| shape_err!("cannot reshape {:?} to {:?}", self.shape(x), shape))?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape { x }, ng))
    }

    /// Reorders dims: output dim `i` is input dim `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(shape_err!("invalid permutation {:?} for {:?}", axes, shape));
        }
        let out = permute_data(self.data(x), &shape, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let ng = self.ng(x);
        let op = Op::Permute {
            x,
            axes: axes.to_vec(),
        };
        Ok(self.push(Tensor::new(&out_shape, out)?, op, ng))
    }

    /// Swaps the last two dims.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(shape_err!(
                "transpose needs rank >= 2, got {:?}",
                self.shape(x)
            ));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {} for {:?}", axis, base));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(shape_err!(
                    "concat {:?} with {:?} on axis {}",
                    base,
                    s,
                    axis
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = xs.iter().any(|&v| self.ng(v));
        let op = Op::Concat {
            xs: xs.to_vec(),
            axis,
        };
        Ok(self.push(Tensor::new(&shape, out)?, op, ng))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(shape_err!(
                "narrow [{}, {}) on axis {} of {:?}",
                start,
                start + len,
                axis,
                shape
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(&oshape, out)?,
            Op::Narrow { x, axis, start },
            ng,
        ))
    }

    /// Mean along `axis`, removing it (a rank-1 input yields shape `[1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &xd[o * n * inner + i * inner..][..inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut oshape = shape;
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&oshape, out)?, Op::MeanAxis { x, axis }, ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Repeats a size-1 `axis` `n` times.
    pub fn expand(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        if shape[axis] != 1 || n == 0 {
            return Err(shape_err!("expand axis {} of {:?} to {}", axis, shape, n));
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&xd[o * inner..(o + 1) * inner]);
            }
        }
        let mut oshape = shape;
        oshape[axis] = n;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&oshape, out)?, Op::Expand { x, axis }, ng))
    }

    /// Channels-last 3-D convolution, stride 1, zero padding.
    ///
    /// `x`: `[B, T, H, W, Cin]`, `w`: `[Cout, Cin, kT, kH, kW]`, `bias`: `[Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>, pad: [usize; 3]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 || ws[1] != xs[4] {
            return Err(shape_err!("conv3d input {:?} with kernel {:?}", xs, ws));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err!(
                    "conv3d bias {:?} for kernel {:?}",
                    self.shape(b),
                    ws
                ));
            }
        }
        let geo = ConvGeometry::new(&xs, &ws, pad)?;
        let wt = geo.kernel_by_offset(self.data(w));
        let xd = self.data(x);
        let mut out = vec![0.0; geo.out_numel()];
        if let Some(b) = bias {
            let bd = self.data(b);
            for chunk in out.chunks_mut(geo.co) {
                chunk.copy_from_slice(bd);
            }
        }
        geo.for_each_tap(|xo, yo, off| {
            let xrow = &xd[xo..xo + geo.ci];
            let yrow = &mut out[yo..yo + geo.co];
            let wm = &wt[off * geo.ci * geo.co..(off + 1) * geo.ci * geo.co];
            for (c, &xv) in xrow.iter().enumerate() {
                let wr = &wm[c * geo.co..(c + 1) * geo.co];
                for (y, &wv) in yrow.iter_mut().zip(wr) {
                    *y += xv * wv;
                }
            }
        });
        let oshape = [xs[0], geo.out[0], geo.out[1], geo.out[2], geo.co];
        let ng = self.ng(x) || self.ng(w) || bias.is_some_and(|b| self.ng(b));
        Ok(self.push(
            Tensor::new(&oshape, out)?,
            Op::Conv3d { x, w, bias, pad },
            ng,
        ))
    }

    /// Rows of a `[V, D]` table at `ids`, giving `[ids.len(), D]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || ids.is_empty() {
            return Err(shape_err!(
                "gather_rows from {:?} with {} ids",
                s,
                ids.len()
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(shape_err!("row {} out of range for {:?}", bad, s));
        }
        let td = self.data(table);
        let d = s[1];
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        let op = Op::GatherRows {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(Tensor::new(&[ids.len(), d], out)?, op, ng))
    }

    /// `out[r] = x[r, idx[r]]` for a `[N, C]` input.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || idx.len() != s[0] {
            return Err(shape_err!("pick {} indices from {:?}", idx.len(), s));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[1]) {
            return Err(shape_err!("index {} out of range for {:?}", bad, s));
        }
        let xd = self.data(x);
        let out: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| xd[r * s[1] + c])
            .collect();
        let ng = self.ng(x);
        let op = Op::Pick {
            x,
            idx: idx.to_vec(),
        };
        Ok(self.push(Tensor::new(&[s[0]], out)?, op, ng))
    }

    /// Scales each vector along the last dim to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let xd = self.data(x);
        let rows = xd.len() / d;
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Param(format!("row {r} has zero norm")));
            }
            norms.push(n);
            for i in 0..d {
                out[r * d + i] = row[i] / n;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::L2Normalize { x, norms }, ng))
    }

    /// Reverse sweep from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(shape_err!(
                "backward root must be scalar, got {:?}",
                rv.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for j in (0..=root.0).rev() {
            let node = &self.nodes[j];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[j].take() else {
                continue;
            };
            self.backprop_node(j, &gout, &mut grads);
            grads[j] = Some(gout);
        }
        // Only leaves keep gradients that matter to callers, but intermediate
        // values are retained too; they are cheap relative to the forward pass.
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn backprop_node(&self, j: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[j];
        let acc = |v: Var, grads: &mut [Option<Vec<f64>>]| -> Option<usize> {
            if self.nodes[v.0].needs_grad {
                let n = self.nodes[v.0].value.numel();
                grads[v.0].get_or_insert_with(|| vec![0.0; n]);
                Some(v.0)
            } else {
                None
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                kind,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ai) = acc(*a, grads) {
                    let ga = grads[ai].as_mut().unwrap();
                    match kind {
                        MatmulKind::FoldA => {
                            let rows = ad.len() / k;
                            gemm(
                                rows,
                                n,
                                k,
                                g,
                                View::row_major(n),
                                bd,
                                View::transposed(n),
                                1.0,
                                ga,
                            );
                        }
                        MatmulKind::ShareA { batch } => {
                            for i in 0..*batch {
                                gemm(
                                    m,
                                    n,
                                    k,
                                    &g[i * m * n..],
                                    View::row_major(n),
                                    &bd[i * k * n..],
                                    View::transposed(n),
                                    1.0,
                                    ga,
                                );
                            }
                        }
                        MatmulKind::Batched { batch } => {
                            for i in 0..*batch {
                                gemm(
                                    m,
                                    n,
                                    k,
                                    &g[i * m * n..],
                                    View::row_major(n),
                                    &bd[i * k * n..],
                                    View::transposed(n),
                                    1.0,
                                    &mut ga[i * m * k..],
                                );
                            }
                        }
                    }
                }
                if let Some(bi) = acc(*b, grads) {
                    let gb = grads[bi].as_mut().unwrap();
                    match kind {
                        MatmulKind::FoldA => {
                            let rows = ad.len() / k;
                            gemm(
                                k,
                                rows,
                                n,
                                ad,
                                View::transposed(k),
                                g,
                                View::row_major(n),
                                1.0,
                                gb,
                            );
                        }
                        MatmulKind::ShareA { batch } => {
                            for i in 0..*batch {
                                gemm(
                                    k,
                                    m,
                                    n,
                                    ad,
                                    View::transposed(k),
                                    &g[i * m * n..],
                                    View::row_major(n),
                                    1.0,
                                    &mut gb[i * k * n..],
                                );
                            }
                        }
                        MatmulKind::Batched { batch } => {
                            for i in 0..*batch {
                                gemm(
                                    k,
                                    m,
                                    n,
                                    &ad[i * m * k..],
                                    View::transposed(k),
                                    &g[i * m * n..],
                                    View::row_major(n),
                                    1.0,
                                    &mut gb[i * k * n..],
                                );
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) {
                    -1.0
                } else {
                    1.0
                };
                if let Some(ai) = acc(*a, grads) {
                    add_into(grads[ai].as_mut().unwrap(), g);
                }
                if let Some(bi) = acc(*b, grads) {
                    let gb = grads[bi].as_mut().unwrap();
                    let nb = gb.len();
                    for (i, &v) in g.iter().enumerate() {
                        gb[i % nb] += sign * v;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let nb = bd.len();
                if let Some(ai) = acc(*a, grads) {
                    let ga = grads[ai].as_mut().unwrap();
                    for (i, &v) in g.iter().enumerate() {
                        ga[i] += v * bd[i % nb];
                    }
                }
                if let Some(bi) = acc(*b, grads) {
                    let gb = grads[bi].as_mut().unwrap();
                    for (i, &v) in g.iter().enumerate() {
                        gb[i % nb] += v * ad[i];
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(xi) = acc(*x, grads) {
                    let gx = grads[xi].as_mut().unwrap();
                    for (d, &v) in gx.iter_mut().zip(g) {
                        *d += c * v;
                    }
                }
            }
            Op::MulScalar { x, s } => {
                let c = self.value(*s).item();
                if let Some(xi) = acc(*x, grads) {
                    let gx = grads[xi].as_mut().unwrap();
                    for (d, &v) in gx.iter_mut().zip(g) {
                        *d += c * v;
                    }
                }
                if let Some(si) = acc(*s, grads) {
                    let dot: f64 = self.data(*x).iter().zip(g).map(|(a, b)| a * b).sum();
                    grads[si].as_mut().unwrap()[0] += dot;
                }
            }
            Op::Softmax { x, axis } => {
                if let Some(xi) = acc(*x, grads) {
                    let y = node.value.data();
                    let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                    let gx = grads[xi].as_mut().unwrap();
                    for o in 0..outer {
                        for r in 0..inner {
                            let idx = |i: usize| o * n * inner + i * inner + r;
                            let dot: f64 = (0..n).map(|i| g[idx(i)] * y[idx(i)]).sum();
                            for i in 0..n {
                                gx[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                if let Some(xi) = acc(*x, grads) {
                    let y = node.value.data();
                    let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                    let gx = grads[xi].as_mut().unwrap();
                    for o in 0..outer {
                        for r in 0..inner {
                            let idx = |i: usize| o * n * inner + i * inner + r;
                            let total: f64 = (0..n).map(|i| g[idx(i)]).sum();
                            for i in 0..n {
                                gx[idx(i)] += g[idx(i)] - y[idx(i)].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let rows = xhat.len() / d;
                let gd = self.data(*gamma);
                if let Some(gi) = acc(*gamma, grads) {
                    let gg = grads[gi].as_mut().unwrap();
                    for r in 0..rows {
                        for i in 0..d {
                            gg[i] += g[r * d + i] * xhat[r * d + i];
                        }
                    }
                }
                if let Some(bi) = acc(*beta, grads) {
                    let gb = grads[bi].as_mut().unwrap();
                    for r in 0..rows {
                        for i in 0..d {
                            gb[i] += g[r * d + i];
                        }
                    }
                }
                if let Some(xi) = acc(*x, grads) {
                    let gx = grads[xi].as_mut().unwrap();
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let h = &xhat[r * d..(r + 1) * d];
                        for i in 0..d {
                            dxhat[i] = g[r * d + i] * gd[i];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh =
                            dxhat.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for i in 0..d {
                            gx[r * d + i] += rstd[r] * (dxhat[i] - mean_d - h[i] * mean_dh);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if let Some(xi) = acc(*x, grads) {
                    let xd = self.data(*x);
                    let gx = grads[xi].as_mut().unwrap();
                    for i in 0..g.len() {
                        let v = xd[i];
                        let pdf = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
                        gx[i] += g[i] * (std_normal_cdf(v) + v * pdf);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(xi) = acc(*x, grads) {
                    let gx = grads[xi].as_mut().unwrap();
                    for i in 0..g.len() {
                        gx[i] += g[i] * mask[i];
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(xi) = acc(*x, grads) {
                    add_into(grads[xi].as_mut().unwrap(), g);
                }
            }
            Op::Permute { x, axes } => {
                if let Some(xi) = acc(*x, grads) {
                    let mut inv = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inv[a] = i;
                    }
                    let back = permute_data(g, node.value.shape(), &inv);
                    add_into(grads[xi].as_mut().unwrap(), &back);
                }
            }
            Op::Concat { xs, axis } => {
                let oshape = node.value.shape();
                let (outer, total, inner) = split_axis(oshape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if let Some(vi) = acc(v, grads) {
                        let gv = grads[vi].as_mut().unwrap();
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset * inner..][..len * inner];
                            add_into(&mut gv[o * len * inner..(o + 1) * len * inner], src);
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                if let Some(xi) = acc(*x, grads) {
                    let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                    let len = node.value.shape()[*axis];
                    let gx = grads[xi].as_mut().unwrap();
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        add_into(
                            &mut gx[base..base + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                if let Some(xi) = acc(*x, grads) {
                    let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                    let inv = 1.0 / n as f64;
                    let gx = grads[xi].as_mut().unwrap();
                    for o in 0..outer {
                        for i in 0..n {
                            let dst = &mut gx[o * n * inner + i * inner..][..inner];
                            for (d, &v) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += v * inv;
                            }
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if let Some(xi) = acc(*x, grads) {
                    let gx = grads[xi].as_mut().unwrap();
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Expand { x, axis } => {
                if let Some(xi) = acc(*x, grads) {
                    let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                    let gx = grads[xi].as_mut().unwrap();
                    for o in 0..outer {
                        for i in 0..n {
                            let src = &g[o * n * inner + i * inner..][..inner];
                            add_into(&mut gx[o * inner..(o + 1) * inner], src);
                        }
                    }
                }
            }
            Op::Conv3d { x, w, bias, pad } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let geo = ConvGeometry::new(&xs, &ws, *pad).expect("validated in forward");
                if let Some(b) = bias {
                    if let Some(bi) = acc(*b, grads) {
                        let gb = grads[bi].as_mut().unwrap();
                        for chunk in g.chunks(geo.co) {
                            add_into(gb, chunk);
                        }
                    }
                }
                if let Some(xi) = acc(*x, grads) {
                    let wt = geo.kernel_by_offset(self.data(*w));
                    let gx = grads[xi].as_mut().unwrap();
                    geo.for_each_tap(|xo, yo, off| {
                        let wm = &wt[off * geo.ci * geo.co..(off + 1) * geo.ci * geo.co];
                        let grow = &g[yo..yo + geo.co];
                        for c in 0..geo.ci {
                            let wr = &wm[c * geo.co..(c + 1) * geo.co];
                            gx[xo + c] += grow.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                        }
                    });
                }
                if let Some(wi) = acc(*w, grads) {
                    let xd = self.data(*x);
                    // accumulate in offset-major layout, then scatter back
                    let mut gwt = vec![0.0; geo.offsets() * geo.ci * geo.co];
                    geo.for_each_tap(|xo, yo, off| {
                        let gm = &mut gwt[off * geo.ci * geo.co..(off + 1) * geo.ci * geo.co];
                        let grow = &g[yo..yo + geo.co];
                        for c in 0..geo.ci {
                            let xv = xd[xo + c];
                            for (d, &gv) in gm[c * geo.co..(c + 1) * geo.co].iter_mut().zip(grow) {
                                *d += xv * gv;
                            }
                        }
                    });
                    geo.scatter_kernel_grad(&gwt, grads[wi].as_mut().unwrap());
                }
            }
            Op::GatherRows { table, ids } => {
                if let Some(ti) = acc(*table, grads) {
                    let d = self.shape(*table)[1];
                    let gt = grads[ti].as_mut().unwrap();
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Pick { x, idx } => {
                if let Some(xi) = acc(*x, grads) {
                    let c = self.shape(*x)[1];
                    let gx = grads[xi].as_mut().unwrap();
                    for (r, &k) in idx.iter().enumerate() {
                        gx[r * c + k] += g[r];
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                if let Some(xi) = acc(*x, grads) {
                    let y = node.value.data();
                    let d = *node.value.shape().last().unwrap();
                    let gx = grads[xi].as_mut().unwrap();
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for i in 0..d {
                            gx[r * d + i] += (gr[i] - yr[i] * dot) / n;
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    if rank > 0 && axes[rank - 1] == rank - 1 {
        // last axis stays put: copy whole rows
        let inner = shape[rank - 1];
        if inner == 0 {
            return out;
        }
        let mut idx = vec![0usize; rank - 1];
        let mut offset = 0usize;
        for _ in 0..data.len() / inner {
            out.extend_from_slice(&data[offset..offset + inner]);
            for d in (0..rank - 1).rev() {
                idx[d] += 1;
                offset += src_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                offset -= src_strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        // odometer increment over the output index
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

/// Index arithmetic shared by the conv3d forward and backward passes.
struct ConvGeometry {
    batch: usize,
    inp: [usize; 3],
    out: [usize; 3],
    k: [usize; 3],
    pad: [usize; 3],
    ci: usize,
    co: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize], pad: [usize; 3]) -> Result<Self> {
        let inp = [xs[1], xs[2], xs[3]];
        let k = [ws[2], ws[3], ws[4]];
        let mut out = [0; 3];
        for d in 0..3 {
            let padded = inp[d] + 2 * pad[d];
            if padded < k[d] {
                return Err(shape_err!(
                    "conv3d kernel {:?} larger than padded input {:?}",
                    ws,
                    xs
                ));
            }
            out[d] = padded - k[d] + 1;
        }
        Ok(Self {
            batch: xs[0],
            inp,
            out,
            k,
            pad,
            ci: ws[1],
            co: ws[0],
        })
    }

    fn offsets(&self) -> usize {
        self.k.iter().product()
    }

    fn out_numel(&self) -> usize {
        self.batch * self.out.iter().product::<usize>() * self.co
    }

    /// Kernel reordered to `[offset][ci][co]`.
    fn kernel_by_offset(&self, w: &[f64]) -> Vec<f64> {
        let offs = self.offsets();
        let mut wt = vec![0.0; offs * self.ci * self.co];
        for o in 0..self.co {
            for c in 0..self.ci {
                for off in 0..offs {
                    wt[off * self.ci * self.co + c * self.co + o] =
                        w[(o * self.ci + c) * offs + off];
                }
            }
        }
        wt
    }

    fn scatter_kernel_grad(&self, gwt: &[f64], gw: &mut [f64]) {
        let offs = self.offsets();
        for o in 0..self.co {
            for c in 0..self.ci {
                for off in 0..offs {
                    gw[(o * self.ci + c) * offs + off] +=
                        gwt[off * self.ci * self.co + c * self.co + o];
                }
            }
        }
    }

    /// Calls `f(x_offset, y_offset, kernel_offset)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [ti, hi, wi] = self.inp;
        let [to, ho, wo] = self.out;
        let [kt, kh, kw] = self.k;
        for b in 0..self.batch {
            for t in 0..to {
                for h in 0..ho {
                    for w in 0..wo {
                        let yo = (((b * to + t) * ho + h) * wo + w) * self.co;
                        for dt in 0..kt {
                            let Some(st) = (t + dt).checked_sub(self.pad[0]).filter(|&v| v < ti)
                            else {
                                continue;
                            };
                            for dh in 0..kh {
                                let Some(sh) =
                                    (h + dh).checked_sub(self.pad[1]).filter(|&v| v < hi)
                                else {
                                    continue;
                                };
                                for dw in 0..kw {
                                    let Some(sw) =
                                        (w + dw).checked_sub(self.pad[2]).filter(|&v| v < wi)
                                    else {
                                        continue;
                                    };
                                    let xo = (((b * ti + st) * hi + sh) * wi + sw) * self.ci;
                                    f(xo, yo, (dt * kh + dh) * kw + dw);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
