//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar output with respect to every node that requires one. Parameters are
//! pulled in from a [`ParamStore`] so that gradients can be routed back to the
//! optimizer by [`ParamId`].

use std::collections::HashMap;

use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{strides, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Upsample2x(Var),
    AvgPool2x(Var),
    GlobalAvgPool(Var),
    MaxSpatial(Var, Vec<usize>),
    MeanChannels(Var),
    MaxChannels(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Softplus(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    SumAll(Var),
    MeanAll(Var),
    DiagMean(Var),
    L2NormalizeRows(Var, Vec<T>),
    LayerNorm(Var, Vec<T>),
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    grad: bool,
}

/// One recorded forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast needs equal ranks: {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "cannot broadcast {a:?} with {b:?}");
            x.max(y)
        })
        .collect()
}

/// Strides of `shape` viewed inside `out`, zero along broadcast axes.
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(s)
        .map(|((&d, &o), st)| if d == 1 && o != 1 { 0 } else { st })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_bcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        let mut ax = nd;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Sums `grad` (shaped like the broadcast output) down to `shape`.
fn reduce_impl<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut r = Tensor::zeros(shape);
    let s = bcast_strides(shape, grad.shape());
    let zero = vec![0; shape.len()];
    let gd = grad.data();
    let rd = r.data_mut();
    for_each_bcast(grad.shape(), &s, &zero, |o, i, _| rd[i] += gd[o]);
    r
}

/// Dense matrix view for gemm dispatch.
#[derive(Clone, Copy)]
struct Mat<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a, T: Scalar> Mat<'a, T> {
    fn new(data: &'a [T], rows: usize, cols: usize, trans: bool) -> Self {
        // `trans` means the buffer stores the transpose (cols × rows).
        if trans {
            Self {
                data,
                rows,
                cols,
                rs: 1,
                cs: rows as isize,
            }
        } else {
            Self {
                data,
                rows,
                cols,
                rs: cols as isize,
                cs: 1,
            }
        }
    }

    fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c (+)= a·b` with `c` dense row-major.
fn mm<T: Scalar>(a: Mat<T>, b: Mat<T>, c: &mut [T], accumulate: bool) {
    assert_eq!(a.cols, b.rows);
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        a.rows,
        a.cols,
        b.cols,
        T::one(),
        a.data,
        a.rs,
        a.cs,
        b.data,
        b.rs,
        b.cs,
        beta,
        c,
        b.cols as isize,
        1,
    );
}

struct MatMulDims {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(sa: &[usize], sb: &[usize], ta: bool, tb: bool) -> (MatMulDims, Vec<usize>) {
    assert!(sb.len() == 2 || sb.len() == 3, "matmul rhs must be 2-D or 3-D");
    assert!(sa.len() >= 2);
    let (bk, n) = if tb {
        (sb[sb.len() - 1], sb[sb.len() - 2])
    } else {
        (sb[sb.len() - 2], sb[sb.len() - 1])
    };
    if sb.len() == 2 {
        // Shared right-hand matrix: fold every leading axis of `a` into rows.
        let (m, k) = if ta {
            assert_eq!(sa.len(), 2, "transposed lhs must be 2-D when rhs is 2-D");
            (sa[1], sa[0])
        } else {
            (sa[..sa.len() - 1].iter().product(), sa[sa.len() - 1])
        };
        assert_eq!(k, bk, "matmul inner dims {sa:?} x {sb:?}");
        let mut out = sa[..sa.len() - 1].to_vec();
        if ta {
            out = vec![m];
        }
        out.push(n);
        (
            MatMulDims {
                batch: 1,
                a_batched: false,
                b_batched: false,
                m,
                k,
                n,
            },
            out,
        )
    } else {
        assert_eq!(sa.len(), 3, "batched matmul needs 3-D operands");
        assert_eq!(sa[0], sb[0], "batch mismatch {sa:?} x {sb:?}");
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        assert_eq!(k, bk, "matmul inner dims {sa:?} x {sb:?}");
        (
            MatMulDims {
                batch: sa[0],
                a_batched: true,
                b_batched: true,
                m,
                k,
                n,
            },
            vec![sa[0], m, n],
        )
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Brings a stored parameter into the graph. Frozen parameters enter as
    /// constants. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = !store.is_frozen(id);
        let v = self.push(store.get(id).clone(), Op::Param, trainable);
        self.params.insert(id, v);
        v
    }

    // ----- elementwise with broadcasting -----

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, mk: fn(Var, Var) -> Op<T>) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if va.shape() == vb.shape() {
            va.zip_map(vb, f)
        } else {
            let out = broadcast_shape(va.shape(), vb.shape());
            let sa = bcast_strides(va.shape(), &out);
            let sb = bcast_strides(vb.shape(), &out);
            let mut r = Tensor::zeros(&out);
            let (da, db) = (va.data(), vb.data());
            let rd = r.data_mut();
            for_each_bcast(&out, &sa, &sb, |o, i, j| rd[o] = f(da[i], db[j]));
            r
        };
        let grad = self.g(a) || self.g(b);
        self.push(value, mk(a, b), grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let grad = self.g(a);
        self.push(value, Op::Scale(a, s), grad)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x + s);
        let grad = self.g(a);
        self.push(value, Op::AddScalar(a), grad)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        let grad = self.g(a);
        self.push(value, op, grad)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(
            a,
            move |x| if x > T::zero() { x } else { x * slope },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    // ----- shape -----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape);
        let grad = self.g(a);
        self.push(value, Op::Reshape(a), grad)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let value = permute(self.value(a), axes);
        let grad = self.g(a);
        self.push(value, Op::Permute(a, axes.to_vec()), grad)
    }

    pub fn transpose2d(&mut self, a: Var) -> Var {
        self.permute(a, &[1, 0])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = concat(&tensors, axis);
        let grad = parts.iter().any(|&p| self.g(p));
        self.push(value, Op::Concat(parts.to_vec(), axis), grad)
    }

    // ----- linear algebra -----

    /// Matrix product. `b` may be 2-D (shared across every leading axis of
    /// `a`) or 3-D (batched against a 3-D `a`). `ta`/`tb` read the operand as
    /// transposed in its last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (d, out_shape) = matmul_dims(va.shape(), vb.shape(), ta, tb);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
        for bi in 0..d.batch {
            let ao = if d.a_batched { bi * sa } else { 0 };
            let bo = if d.b_batched { bi * sb } else { 0 };
            mm(
                Mat::new(&va.data()[ao..ao + sa], d.m, d.k, ta),
                Mat::new(&vb.data()[bo..bo + sb], d.k, d.n, tb),
                &mut out[bi * sc..(bi + 1) * sc],
                false,
            );
        }
        let grad = self.g(a) || self.g(b);
        self.push(Tensor::new(&out_shape, out), Op::MatMul { a, b, ta, tb }, grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// 2-D convolution, `x` [N,C,H,W], `w` [O,C,k,k], `b` [O].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(xs.len(), 4, "conv2d input must be [N,C,H,W], got {xs:?}");
        assert_eq!(ws.len(), 4);
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch {xs:?} vs {ws:?}");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let k = ws[2];
        assert!(xs[2] + 2 * pad >= k && xs[3] + 2 * pad >= k, "input smaller than kernel");
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            k,
            stride,
            pad,
            ho: (xs[2] + 2 * pad - k) / stride + 1,
            wo: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let p = geom.ho * geom.wo;
        let np = geom.n * p;
        let ckk = geom.c * k * k;
        let mut ym = vec![T::zero(); geom.o * np];
        mm(
            Mat::new(self.value(w).data(), geom.o, ckk, false),
            Mat::new(&cols, ckk, np, false),
            &mut ym,
            false,
        );
        // [O, N·P] -> [N, O, P] (+ bias)
        let mut y = vec![T::zero(); geom.n * geom.o * p];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for o in 0..geom.o {
            let bo = bias.as_ref().map_or(T::zero(), |bv| bv[o]);
            for n in 0..geom.n {
                let src = &ym[o * np + n * p..o * np + (n + 1) * p];
                let dst = &mut y[(n * geom.o + o) * p..(n * geom.o + o + 1) * p];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bo;
                }
            }
        }
        let grad = self.g(x) || self.g(w) || b.is_some_and(|b| self.g(b));
        let value = Tensor::new(&[geom.n, geom.o, geom.ho, geom.wo], y);
        let cols = if grad { cols } else { Vec::new() };
        self.push(value, Op::Conv2d { x, w, b, geom, cols }, grad)
    }

    // ----- pooling / resampling -----

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let [n, c, h, w] = dims4(v.shape());
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        let src = v.data();
        for nc in 0..n * c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[nc * 4 * h * w + i * 2 * w + j] = src[nc * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let grad = self.g(x);
        self.push(Tensor::new(&[n, c, 2 * h, 2 * w], out), Op::Upsample2x(x), grad)
    }

    pub fn avg_pool2x(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let [n, c, h, w] = dims4(v.shape());
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::of(0.25);
        let src = v.data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for nc in 0..n * c {
            for i in 0..ho {
                for j in 0..wo {
                    let base = nc * h * w + 2 * i * w + 2 * j;
                    out[nc * ho * wo + i * wo + j] =
                        (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]) * quarter;
                }
            }
        }
        let grad = self.g(x);
        self.push(Tensor::new(&[n, c, ho, wo], out), Op::AvgPool2x(x), grad)
    }

    /// [N,C,H,W] -> [N,C]
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let [n, c, h, w] = dims4(v.shape());
        let inv = T::one() / T::of((h * w) as f64);
        let out: Vec<T> = v
            .data()
            .chunks(h * w)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let grad = self.g(x);
        self.push(Tensor::new(&[n, c], out), Op::GlobalAvgPool(x), grad)
    }

    /// [N,C,H,W] -> [N,C], max over spatial positions.
    pub fn max_spatial(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let [n, c, h, w] = dims4(v.shape());
        let mut out = Vec::with_capacity(n * c);
        let mut arg = Vec::with_capacity(n * c);
        for (ci, ch) in v.data().chunks(h * w).enumerate() {
            let (mut bi, mut bv) = (0, ch[0]);
            for (i, &x) in ch.iter().enumerate() {
                if x > bv {
                    bi = i;
                    bv = x;
                }
            }
            out.push(bv);
            arg.push(ci * h * w + bi);
        }
        let grad = self.g(x);
        self.push(Tensor::new(&[n, c], out), Op::MaxSpatial(x, arg), grad)
    }

    /// [N,C,H,W] -> [N,1,H,W]
    pub fn mean_channels(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let [n, c, h, w] = dims4(v.shape());
        let p = h * w;
        let inv = T::one() / T::of(c as f64);
        let mut out = vec![T::zero(); n * p];
        for ni in 0..n {
            for ci in 0..c {
                let src = &v.data()[(ni * c + ci) * p..(ni * c + ci + 1) * p];
                for (o, &s) in out[ni * p..(ni + 1) * p].iter_mut().zip(src) {
                    *o += s * inv;
                }
            }
        }
        let grad = self.g(x);
        self.push(Tensor::new(&[n, 1, h, w], out), Op::MeanChannels(x), grad)
    }

    /// [N,C,H,W] -> [N,1,H,W]
    pub fn max_channels(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let [n, c, h, w] = dims4(v.shape());
        let p = h * w;
        let d = v.data();
        let mut out = vec![T::zero(); n * p];
        let mut arg = vec![0usize; n * p];
        for ni in 0..n {
            for pi in 0..p {
                let mut bi = ni * c * p + pi;
                for ci in 1..c {
                    let idx = (ni * c + ci) * p + pi;
                    if d[idx] > d[bi] {
                        bi = idx;
                    }
                }
                out[ni * p + pi] = d[bi];
                arg[ni * p + pi] = bi;
            }
        }
        let grad = self.g(x);
        self.push(Tensor::new(&[n, 1, h, w], out), Op::MaxChannels(x, arg), grad)
    }

    // ----- normalisation / reductions -----

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        let grad = self.g(x);
        self.push(value, Op::SoftmaxLast(x), grad)
    }

    pub fn log_softmax_last(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let w = *v.shape().last().unwrap();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(w) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - m).exp()).sum::<T>().ln() + m;
            for z in row.iter_mut() {
                *z -= lse;
            }
        }
        let value = Tensor::new(v.shape(), out);
        let grad = self.g(x);
        self.push(value, Op::LogSoftmaxLast(x), grad)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let grad = self.g(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), grad)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / T::of(v.len() as f64);
        let grad = self.g(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), grad)
    }

    /// Mean of the diagonal of a square matrix.
    pub fn diag_mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        assert!(v.ndim() == 2 && v.dim(0) == v.dim(1), "diag_mean needs a square matrix");
        let b = v.dim(0);
        let s = (0..b).map(|i| v.data()[i * b + i]).sum::<T>() / T::of(b as f64);
        let grad = self.g(x);
        self.push(Tensor::scalar(s), Op::DiagMean(x), grad)
    }

    /// Scales each row of a 2-D tensor to unit L2 norm. Callers must reject
    /// zero rows beforehand.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        assert_eq!(v.ndim(), 2);
        let w = v.dim(1);
        let mut out = v.data().to_vec();
        let mut norms = Vec::with_capacity(v.dim(0));
        for row in out.chunks_mut(w) {
            let nrm = row.iter().map(|&z| z * z).sum::<T>().sqrt();
            norms.push(nrm);
            for z in row.iter_mut() {
                *z /= nrm;
            }
        }
        let value = Tensor::new(v.shape(), out);
        let grad = self.g(x);
        self.push(value, Op::L2NormalizeRows(x, norms), grad)
    }

    /// Normalises the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let v = self.value(x);
        let w = *v.shape().last().unwrap();
        let wn = T::of(w as f64);
        let mut out = v.data().to_vec();
        let mut rstd = Vec::with_capacity(out.len() / w);
        for row in out.chunks_mut(w) {
            let mean = row.iter().copied().sum::<T>() / wn;
            let var = row.iter().map(|&z| (z - mean) * (z - mean)).sum::<T>() / wn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for z in row.iter_mut() {
                *z = (*z - mean) * r;
            }
        }
        let value = Tensor::new(v.shape(), out);
        let grad = self.g(x);
        self.push(value, Op::LayerNorm(x, rstd), grad)
    }

    // ----- backward -----

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Grads { grads }
    }

    /// Gradients of every trainable parameter touched by this graph.
    pub fn param_grads(&self, grads: &Grads<T>) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = self
            .params
            .iter()
            .filter(|(_, &v)| self.nodes[v.0].grad)
            .map(|(&id, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn backward_node(&self, i: usize, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, g: Tensor<T>| {
            if !self.nodes[v.0].grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(*a, reduce_to_t(gout, self.shape(*a)));
                acc(*b, reduce_to_t(gout, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                acc(*a, reduce_to_t(gout, self.shape(*a)));
                acc(*b, reduce_to_t(&gout.map(|g| -g), self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.g(*a) {
                    acc(*a, bcast_product_reduce(gout, vb, va.shape()));
                }
                if self.g(*b) {
                    acc(*b, bcast_product_reduce(gout, va, vb.shape()));
                }
            }
            Op::Scale(a, s) => acc(*a, gout.map(|g| g * *s)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc(*a, gout.clone().reshape(self.shape(*a)))
            }
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (d, _) = matmul_dims(va.shape(), vb.shape(), *ta, *tb);
                let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
                if self.g(*a) {
                    let mut ga = vec![T::zero(); va.len()];
                    for bi in 0..d.batch {
                        let ao = if d.a_batched { bi * sa } else { 0 };
                        let bo = if d.b_batched { bi * sb } else { 0 };
                        let gc = Mat::new(&gout.data()[bi * sc..(bi + 1) * sc], d.m, d.n, false);
                        let bm = Mat::new(&vb.data()[bo..bo + sb], d.k, d.n, *tb);
                        let dst = &mut ga[ao..ao + sa];
                        if *ta {
                            // stored [k,m]: dA^T = B · dC^T
                            mm(bm, gc.t(), dst, false);
                        } else {
                            mm(gc, bm.t(), dst, false);
                        }
                    }
                    acc(*a, Tensor::new(va.shape(), ga));
                }
                if self.g(*b) {
                    let mut gb = vec![T::zero(); vb.len()];
                    for bi in 0..d.batch {
                        let ao = if d.a_batched { bi * sa } else { 0 };
                        let bo = if d.b_batched { bi * sb } else { 0 };
                        let gc = Mat::new(&gout.data()[bi * sc..(bi + 1) * sc], d.m, d.n, false);
                        let am = Mat::new(&va.data()[ao..ao + sa], d.m, d.k, *ta);
                        let dst = &mut gb[bo..bo + sb];
                        if *tb {
                            mm(gc.t(), am, dst, false);
                        } else {
                            mm(am.t(), gc, dst, false);
                        }
                    }
                    acc(*b, Tensor::new(vb.shape(), gb));
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let g = *geom;
                let p = g.ho * g.wo;
                let np = g.n * p;
                let ckk = g.c * g.k * g.k;
                // [N,O,P] -> [O, N·P]
                let mut gm = vec![T::zero(); g.o * np];
                for n in 0..g.n {
                    for o in 0..g.o {
                        let src = &gout.data()[(n * g.o + o) * p..(n * g.o + o + 1) * p];
                        gm[o * np + n * p..o * np + (n + 1) * p].copy_from_slice(src);
                    }
                }
                if let Some(b) = b {
                    if self.g(*b) {
                        let gb: Vec<T> = gm.chunks(np).map(|r| r.iter().copied().sum()).collect();
                        acc(*b, Tensor::new(&[g.o], gb));
                    }
                }
                if self.g(*w) {
                    let mut gw = vec![T::zero(); g.o * ckk];
                    mm(
                        Mat::new(&gm, g.o, np, false),
                        Mat::new(cols, ckk, np, false).t(),
                        &mut gw,
                        false,
                    );
                    acc(*w, Tensor::new(self.shape(*w), gw));
                }
                if self.g(*x) {
                    let mut gcols = vec![T::zero(); ckk * np];
                    mm(
                        Mat::new(self.value(*w).data(), g.o, ckk, false).t(),
                        Mat::new(&gm, g.o, np, false),
                        &mut gcols,
                        false,
                    );
                    acc(*x, Tensor::new(self.shape(*x), col2im(&gcols, &g)));
                }
            }
            Op::Upsample2x(x) => {
                let [n, c, h, w] = dims4(self.shape(*x));
                let mut gx = vec![T::zero(); n * c * h * w];
                let gd = gout.data();
                for nc in 0..n * c {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            gx[nc * h * w + (i / 2) * w + j / 2] += gd[nc * 4 * h * w + i * 2 * w + j];
                        }
                    }
                }
                acc(*x, Tensor::new(&[n, c, h, w], gx));
            }
            Op::AvgPool2x(x) => {
                let [n, c, h, w] = dims4(self.shape(*x));
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                let mut gx = vec![T::zero(); n * c * h * w];
                let gd = gout.data();
                for nc in 0..n * c {
                    for i in 0..ho {
                        for j in 0..wo {
                            let gv = gd[nc * ho * wo + i * wo + j] * quarter;
                            let base = nc * h * w + 2 * i * w + 2 * j;
                            gx[base] += gv;
                            gx[base + 1] += gv;
                            gx[base + w] += gv;
                            gx[base + w + 1] += gv;
                        }
                    }
                }
                acc(*x, Tensor::new(&[n, c, h, w], gx));
            }
            Op::GlobalAvgPool(x) => {
                let [n, c, h, w] = dims4(self.shape(*x));
                let inv = T::one() / T::of((h * w) as f64);
                let mut gx = Vec::with_capacity(n * c * h * w);
                for &gv in gout.data() {
                    gx.extend(std::iter::repeat_n(gv * inv, h * w));
                }
                acc(*x, Tensor::new(&[n, c, h, w], gx));
            }
            Op::MaxSpatial(x, arg) | Op::MaxChannels(x, arg) => {
                let mut gx = Tensor::zeros(self.shape(*x));
                let gxd = gx.data_mut();
                for (&a, &gv) in arg.iter().zip(gout.data()) {
                    gxd[a] += gv;
                }
                acc(*x, gx);
            }
            Op::MeanChannels(x) => {
                let [n, c, h, w] = dims4(self.shape(*x));
                let p = h * w;
                let inv = T::one() / T::of(c as f64);
                let mut gx = vec![T::zero(); n * c * p];
                for ni in 0..n {
                    for ci in 0..c {
                        for pi in 0..p {
                            gx[(ni * c + ci) * p + pi] = gout.data()[ni * p + pi] * inv;
                        }
                    }
                }
                acc(*x, Tensor::new(&[n, c, h, w], gx));
            }
            Op::Concat(parts, axis) => {
                let outer: usize = y.shape()[..*axis].iter().product();
                let inner: usize = y.shape()[axis + 1..].iter().product();
                let total = y.shape()[*axis];
                let mut off = 0;
                for &p in parts {
                    let dp = self.shape(p)[*axis];
                    if self.g(p) {
                        let mut gp = Vec::with_capacity(outer * dp * inner);
                        for o in 0..outer {
                            let start = (o * total + off) * inner;
                            gp.extend_from_slice(&gout.data()[start..start + dp * inner]);
                        }
                        acc(p, Tensor::new(self.shape(p), gp));
                    }
                    off += dp;
                }
            }
            Op::Relu(a) => acc(
                *a,
                self.value(*a)
                    .zip_map(gout, |x, g| if x > T::zero() { g } else { T::zero() }),
            ),
            Op::LeakyRelu(a, s) => {
                let s = *s;
                acc(
                    *a,
                    self.value(*a)
                        .zip_map(gout, move |x, g| if x > T::zero() { g } else { g * s }),
                )
            }
            Op::Sigmoid(a) => acc(*a, y.zip_map(gout, |s, g| g * s * (T::one() - s))),
            Op::Tanh(a) => acc(*a, y.zip_map(gout, |t, g| g * (T::one() - t * t))),
            Op::Silu(a) => acc(
                *a,
                self.value(*a).zip_map(gout, |x, g| {
                    let s = sigmoid(x);
                    g * (s + x * s * (T::one() - s))
                }),
            ),
            Op::Exp(a) => acc(*a, y.zip_map(gout, |e, g| g * e)),
            Op::Abs(a) => acc(
                *a,
                self.value(*a).zip_map(gout, |x, g| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                }),
            ),
            Op::Square(a) => acc(*a, self.value(*a).zip_map(gout, |x, g| g * (x + x))),
            Op::Softplus(a) => acc(*a, self.value(*a).zip_map(gout, |x, g| g * sigmoid(x))),
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                acc(*a, permute(gout, &inv));
            }
            Op::SoftmaxLast(a) => {
                let w = *y.shape().last().unwrap();
                let mut gx = gout.data().to_vec();
                for (gr, yr) in gx.chunks_mut(w).zip(y.data().chunks(w)) {
                    let dot: T = gr.iter().zip(yr).map(|(&g, &s)| g * s).sum();
                    for (g, &s) in gr.iter_mut().zip(yr) {
                        *g = s * (*g - dot);
                    }
                }
                acc(*a, Tensor::new(y.shape(), gx));
            }
            Op::LogSoftmaxLast(a) => {
                let w = *y.shape().last().unwrap();
                let mut gx = gout.data().to_vec();
                for (gr, yr) in gx.chunks_mut(w).zip(y.data().chunks(w)) {
                    let total: T = gr.iter().copied().sum();
                    for (g, &ls) in gr.iter_mut().zip(yr) {
                        *g -= ls.exp() * total;
                    }
                }
                acc(*a, Tensor::new(y.shape(), gx));
            }
            Op::SumAll(a) => acc(*a, Tensor::full(self.shape(*a), gout.data()[0])),
            Op::MeanAll(a) => {
                let n = T::of(self.value(*a).len() as f64);
                acc(*a, Tensor::full(self.shape(*a), gout.data()[0] / n))
            }
            Op::DiagMean(a) => {
                let b = self.shape(*a)[0];
                let mut gx = Tensor::zeros(self.shape(*a));
                let gv = gout.data()[0] / T::of(b as f64);
                for i in 0..b {
                    gx.data_mut()[i * b + i] = gv;
                }
                acc(*a, gx);
            }
            Op::L2NormalizeRows(a, norms) => {
                let w = y.shape()[1];
                let mut gx = gout.data().to_vec();
                for ((gr, yr), &nrm) in gx.chunks_mut(w).zip(y.data().chunks(w)).zip(norms) {
                    let dot: T = gr.iter().zip(yr).map(|(&g, &s)| g * s).sum();
                    for (g, &s) in gr.iter_mut().zip(yr) {
                        *g = (*g - s * dot) / nrm;
                    }
                }
                acc(*a, Tensor::new(y.shape(), gx));
            }
            Op::LayerNorm(a, rstd) => {
                let w = *y.shape().last().unwrap();
                let wn = T::of(w as f64);
                let mut gx = gout.data().to_vec();
                for ((gr, yr), &r) in gx.chunks_mut(w).zip(y.data().chunks(w)).zip(rstd) {
                    let mg = gr.iter().copied().sum::<T>() / wn;
                    let mgy = gr.iter().zip(yr).map(|(&g, &s)| g * s).sum::<T>() / wn;
                    for (g, &s) in gr.iter_mut().zip(yr) {
                        *g = r * (*g - mg - s * mgy);
                    }
                }
                acc(*a, Tensor::new(y.shape(), gx));
            }
        }
    }
}

fn reduce_to_t<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    reduce_impl(g, shape)
}

/// Gradient of a broadcast product w.r.t. one factor: reduce(gout * other).
fn bcast_product_reduce<T: Scalar>(gout: &Tensor<T>, other: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    let out = gout.shape();
    let mut r = Tensor::zeros(target);
    let st = bcast_strides(target, out);
    let so = bcast_strides(other.shape(), out);
    let (gd, od) = (gout.data(), other.data());
    let rd = r.data_mut();
    for_each_bcast(out, &st, &so, |o, i, j| rd[i] += gd[o] * od[j]);
    r
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn dims4(s: &[usize]) -> [usize; 4] {
    assert_eq!(s.len(), 4, "expected a 4-D tensor, got {s:?}");
    [s[0], s[1], s[2], s[3]]
}

pub(crate) fn softmax_rows<T: Scalar>(v: &Tensor<T>) -> Tensor<T> {
    let w = *v.shape().last().unwrap();
    let mut out = v.data().to_vec();
    for row in out.chunks_mut(w) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for z in row.iter_mut() {
            *z = (*z - m).exp();
            s += *z;
        }
        for z in row.iter_mut() {
            *z /= s;
        }
    }
    Tensor::new(v.shape(), out)
}

pub(crate) fn permute<T: Scalar>(v: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape = v.shape();
    assert_eq!(axes.len(), shape.len());
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides = strides(shape);
    let perm_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let zero = vec![0; axes.len()];
    let mut out = vec![T::zero(); v.len()];
    let d = v.data();
    for_each_bcast(&out_shape, &perm_strides, &zero, |o, i, _| out[o] = d[i]);
    Tensor::new(&out_shape, out)
}

pub(crate) fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
    let first = parts[0].shape();
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut shape = first.to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let dp = p.shape()[axis];
            out.extend_from_slice(&p.data()[o * dp * inner..(o + 1) * dp * inner]);
        }
    }
    Tensor::new(&shape, out)
}

/// Output positions `o` whose input index `o * stride + offset - pad` lies in
/// `0..in_len`.
fn valid_outputs(offset: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> std::ops::Range<usize> {
    let lo = pad.saturating_sub(offset).div_ceil(stride);
    let hi = if in_len + pad > offset {
        ((in_len + pad - offset - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    lo.min(hi)..hi
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.ho * g.wo;
    let np = g.n * p;
    let mut cols = vec![T::zero(); g.c * g.k * g.k * np];
    for c in 0..g.c {
        for ki in 0..g.k {
            let rows = valid_outputs(ki, g.pad, g.stride, g.h, g.ho);
            for kj in 0..g.k {
                let xs = valid_outputs(kj, g.pad, g.stride, g.w, g.wo);
                if xs.is_empty() {
                    continue;
                }
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in rows.clone() {
                        let src = &plane[(oy * g.stride + ki - g.pad) * g.w..];
                        let out = &mut dst[n * p + oy * g.wo..n * p + (oy + 1) * g.wo];
                        if g.stride == 1 {
                            let first = xs.start + kj - g.pad;
                            out[xs.clone()].copy_from_slice(&src[first..first + xs.len()]);
                        } else {
                            for ox in xs.clone() {
                                out[ox] = src[ox * g.stride + kj - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.ho * g.wo;
    let np = g.n * p;
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.k {
            let rows = valid_outputs(ki, g.pad, g.stride, g.h, g.ho);
            for kj in 0..g.k {
                let xs = valid_outputs(kj, g.pad, g.stride, g.w, g.wo);
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let base = (n * g.c + c) * g.h * g.w;
                    for oy in rows.clone() {
                        let line = base + (oy * g.stride + ki - g.pad) * g.w;
                        let from = &src[n * p + oy * g.wo..n * p + (oy + 1) * g.wo];
                        for ox in xs.clone() {
                            x[line + ox * g.stride + kj - g.pad] += from[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_input_grads;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data)
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_f64(
            shape,
            &(0..n)
                .map(|i| ((i as f64 * 0.7).sin() + 0.1 * i as f64 / n as f64) * scale)
                .collect::<Vec<_>>(),
        )
    }

    #[test]
    fn broadcast_add_matches_manual() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = g.constant(t(&[1, 3], &[10., 20., 30.]));
        let c = g.add(a, b);
        assert_eq!(g.value(c).data(), &[11., 22., 33., 14., 25., 36.]);
    }

    #[test]
    fn permute_then_inverse_is_identity() {
        let x = ramp(&[2, 3, 4], 1.0);
        let p = permute(&x, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = permute(&p, &[1, 2, 0]);
        assert_eq!(back, x);
    }

    fn direct_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
        let ([n, c, h, wd], [o, _, k, _]) = (dims4(x.shape()), dims4(w.shape()));
        let (ho, wo) = ((h + 2 * pad - k) / stride + 1, (wd + 2 * pad - k) / stride + 1);
        let mut out = Vec::new();
        for ni in 0..n {
            for oi in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = b[oi];
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if (0..h as isize).contains(&iy) && (0..wd as isize).contains(&ix) {
                                        s += x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((oi * c + ci) * k + ki) * k + kj];
                                    }
                                }
                            }
                        }
                        out.push(s);
                    }
                }
            }
        }
        out
    }

    proptest::proptest! {
        #[test]
        fn conv_matches_direct_sum(
            k in 1usize..5,
            stride in 1usize..4,
            pad in 0usize..3,
            h in 1usize..8,
            wd in 1usize..8,
            s in proptest::prelude::any::<u64>(),
        ) {
            proptest::prop_assume!(h + 2 * pad >= k && wd + 2 * pad >= k);
            let mut r = crate::seed::rng(s);
            let x = Tensor::new(&[2, 2, h, wd], crate::seed::normal_vec(&mut r, 4 * h * wd));
            let w = Tensor::new(&[3, 2, k, k], crate::seed::normal_vec(&mut r, 6 * k * k));
            let b = crate::seed::normal_vec(&mut r, 3);
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(Tensor::new(&[3], b.clone())));
            let y = g.conv2d(xv, wv, Some(bv), stride, pad);
            let want = direct_conv(&x, &w, &b, stride, pad);
            proptest::prop_assert_eq!(g.value(y).len(), want.len());
            for (got, want) in g.value(y).data().iter().zip(&want) {
                proptest::prop_assert!((got - want).abs() < 1e-10);
            }
        }

        #[test]
        fn col2im_is_the_adjoint_of_im2col(
            k in 1usize..5,
            stride in 1usize..4,
            pad in 0usize..3,
            h in 1usize..8,
            wd in 1usize..8,
            s in proptest::prelude::any::<u64>(),
        ) {
            proptest::prop_assume!(h + 2 * pad >= k && wd + 2 * pad >= k);
            let geom = ConvGeom {
                n: 2,
                c: 2,
                h,
                w: wd,
                o: 1,
                k,
                stride,
                pad,
                ho: (h + 2 * pad - k) / stride + 1,
                wo: (wd + 2 * pad - k) / stride + 1,
            };
            let mut r = crate::seed::rng(s);
            let x = crate::seed::normal_vec(&mut r, 4 * h * wd);
            let cols = im2col(&x, &geom);
            let c = crate::seed::normal_vec(&mut r, cols.len());
            let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(col2im(&c, &geom)).map(|(a, b)| a * b).sum();
            proptest::prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn elementwise_grads() {
        let a = ramp(&[2, 3], 1.0);
        let b = ramp(&[1, 3], 0.8).map(|x| x + 1.5);
        check_input_grads(&[a.clone(), b.clone()], |g, v| {
            let s = g.mul(v[0], v[1]);
            let d = g.sub(s, v[1]);
            let e = g.add(d, v[0]);
            let q = g.square(e);
            g.mean_all(q)
        });
        check_input_grads(std::slice::from_ref(&a), |g, v| {
            let x = g.tanh(v[0]);
            let y = g.sigmoid(x);
            let z = g.silu(y);
            let w = g.softplus(z);
            let e = g.exp(w);
            let l = g.leaky_relu(e, 0.1);
            let s = g.scale(l, 0.3);
            let s = g.add_scalar(s, 1.0);
            g.sum_all(s)
        });
        check_input_grads(&[a.map(|x| x + 0.05)], |g, v| {
            let x = g.abs(v[0]);
            let y = g.relu(v[0]);
            let z = g.add(x, y);
            g.sum_all(z)
        });
    }

    #[test]
    fn matmul_grads_all_layouts() {
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            let a = ramp(if ta { &[4, 3] } else { &[3, 4] }, 1.0);
            let b = ramp(if tb { &[2, 4] } else { &[4, 2] }, 0.7);
            check_input_grads(&[a, b], |g, v| {
                let c = g.matmul_t(v[0], v[1], ta, tb);
                let c = g.square(c);
                g.sum_all(c)
            });
        }
        for &(ta, tb) in &[(false, false), (true, false), (false, true)] {
            let a = ramp(if ta { &[2, 4, 3] } else { &[2, 3, 4] }, 1.0);
            let b = ramp(if tb { &[2, 5, 4] } else { &[2, 4, 5] }, 0.7);
            check_input_grads(&[a, b], |g, v| {
                let c = g.matmul_t(v[0], v[1], ta, tb);
                let c = g.square(c);
                g.sum_all(c)
            });
        }
        // shared rhs with folded leading axes
        check_input_grads(&[ramp(&[2, 3, 4], 1.0), ramp(&[4, 5], 0.5)], |g, v| {
            let c = g.matmul(v[0], v[1]);
            let c = g.square(c);
            g.sum_all(c)
        });
    }

    #[test]
    fn conv_and_pool_grads() {
        check_input_grads(
            &[ramp(&[2, 2, 6, 6], 1.0), ramp(&[3, 2, 3, 3], 0.5), ramp(&[3], 0.2)],
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1);
                let y = g.upsample2x(y);
                let y = g.avg_pool2x(y);
                let y = g.square(y);
                g.sum_all(y)
            },
        );
        check_input_grads(&[ramp(&[2, 3, 4, 4], 1.0)], |g, v| {
            let a = g.global_avg_pool(v[0]);
            let m = g.max_spatial(v[0]);
            let s = g.mul(a, m);
            let c = g.mean_channels(v[0]);
            let x = g.max_channels(v[0]);
            let cat = g.concat(&[c, x], 1);
            let q = g.square(cat);
            let l1 = g.sum_all(s);
            let l2 = g.sum_all(q);
            g.add(l1, l2)
        });
    }

    #[test]
    fn softmax_norm_and_reduction_grads() {
        check_input_grads(&[ramp(&[3, 4], 2.0), ramp(&[3, 4], 1.0)], |g, v| {
            let s = g.softmax_last(v[0]);
            let p = g.mul(s, v[1]);
            let l = g.log_softmax_last(v[1]);
            let q = g.mul(l, v[0]);
            let a = g.sum_all(p);
            let b = g.mean_all(q);
            g.add(a, b)
        });
        check_input_grads(&[ramp(&[3, 3], 2.0).map(|x| x + 0.3)], |g, v| {
            let n = g.l2_normalize_rows(v[0]);
            let t = g.transpose2d(n);
            let m = g.matmul(n, t);
            let d = g.diag_mean(m);
            let s = g.sum_all(m);
            let r = g.reshape(s, &[1]);
            g.add(d, r)
        });
        check_input_grads(&[ramp(&[2, 5], 3.0), ramp(&[2, 5], 1.0)], |g, v| {
            let n = g.layer_norm(v[0], 1e-5);
            let p = g.mul(n, v[1]);
            let p = g.permute(p, &[1, 0]);
            g.sum_all(p)
        });
    }

    #[test]
    fn param_grads_skip_frozen() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", "g", Tensor::from_f64(&[2], &[1.0, 2.0]));
        let b = store.add("b", "g", Tensor::from_f64(&[2], &[3.0, 4.0]));
        store.freeze_group("g", false);
        store.set_frozen(b, true);
        let mut g = Graph::new();
        let (va, vb) = (g.param(&store, a), g.param(&store, b));
        let p = g.mul(va, vb);
        let l = g.sum_all(p);
        let grads = g.backward(l);
        let pg = g.param_grads(&grads);
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].0, a);
        assert_eq!(pg[0].1.data(), &[3.0, 4.0]);
    }
}
