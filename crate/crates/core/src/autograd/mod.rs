//! A small reverse-mode autodiff tape.
//!
//! Every forward op appends a node holding its value and enough saved state to
//! run its vector-Jacobian product. [`Graph::backward`] walks the tape once in
//! reverse. Ops are fused where it pays off (layer norm, attention) and all
//! reductions run in a fixed order so repeated runs are bitwise identical.

mod tensor;

pub use tensor::{Scalar, Tensor};

use tensor::{batched_gemm, matrix_dims};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        a_trans: bool,
        b_trans: bool,
        batch: usize,
        a_batched: bool,
        b_batched: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqr(Var),
    Gelu(Var),
    ClampMin(Var, F),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: Vec<(F, F)>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<F>,
    },
    SumAll(Var),
    SumLast(Var),
    RowMean {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    DivRows {
        x: Var,
        s: Var,
    },
    StraightThrough(Var),
    Attention {
        qkv: Var,
        seqs: Vec<(usize, usize)>,
        heads: usize,
        probs: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients of a scalar output with respect to every node that required one.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Plain matrix product; leading axes of `a` are treated as batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.bmm(a, b, false, false)
    }

    /// Batched product of the last two axes with optional transposes. An
    /// operand with no leading axes is shared across the batch.
    pub fn bmm(&mut self, a: Var, b: Var, a_trans: bool, b_trans: bool) -> Var {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let (ba, ar, ac) = matrix_dims(&ash);
        let (bb, br, bc) = matrix_dims(&bsh);
        let (m, k) = if a_trans { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if b_trans { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "bmm inner dims differ: {ash:?} x {bsh:?}");
        let a_batched = ash.len() > 2;
        let b_batched = bsh.len() > 2;
        if a_batched && b_batched {
            assert_eq!(ba, bb, "bmm batch dims differ: {ash:?} x {bsh:?}");
        }
        let batch = ba.max(bb);
        let mut out_shape: Vec<usize> = if a_batched {
            ash[..ash.len() - 2].to_vec()
        } else if b_batched {
            bsh[..bsh.len() - 2].to_vec()
        } else {
            vec![]
        };
        out_shape.push(m);
        out_shape.push(n);

        // A batched, untransposed `a` against a shared `b` is one tall gemm.
        let (batch, m, a_batched) = if a_batched && !a_trans && !b_batched {
            (1, batch * m, false)
        } else {
            (batch, m, a_batched)
        };
        let mut out = vec![F::zero(); out_shape.iter().product()];
        batched_gemm(
            batch,
            m,
            k,
            n,
            self.value(a).data(),
            a_batched,
            a_trans,
            self.value(b).data(),
            b_batched,
            b_trans,
            &mut out,
            true,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(&out_shape, out),
            Op::MatMul {
                a,
                b,
                a_trans,
                b_trans,
                batch,
                a_batched,
                b_batched,
                m,
                k,
                n,
            },
            rg,
        )
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(av.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn bcast(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let bl = bv.len();
        assert!(
            bl > 0 && av.len() % bl == 0,
            "cannot broadcast {:?} over {:?}",
            bv.shape(),
            av.shape()
        );
        let bd = bv.data();
        let data = av
            .data()
            .chunks(bl)
            .flat_map(|ch| ch.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect();
        let t = Tensor::new(av.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    /// `a + b` where `b` is tiled over `a` (its element count divides `a`'s).
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Var {
        self.bcast(a, b, |x, y| x + y, Op::AddBcast(a, b))
    }

    /// `a * b` where `b` is tiled over `a`.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Var {
        self.bcast(a, b, |x, y| x * y, Op::MulBcast(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.shape(), av.data().iter().map(|&x| f(x)).collect());
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, |x| x.ln(), Op::Log(a))
    }

    pub fn sqr(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Sqr(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = F::cast_from(GELU_C);
        let k = F::cast_from(GELU_A);
        let half = F::cast_from(0.5);
        self.map(
            a,
            move |x| half * x * (F::one() + (c * (x + k * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn clamp_min(&mut self, a: Var, lo: F) -> Var {
        self.map(a, move |x| if x > lo { x } else { lo }, Op::ClampMin(a, lo))
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(av.shape(), out);
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Log-softmax over the last axis in fused log-sum-exp form.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let t = Tensor::new(av.shape(), out);
        let rg = self.rg(a);
        self.push(t, Op::LogSoftmax(a), rg)
    }

    /// Row-wise layer norm over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert_eq!(self.value(gain).len(), c);
        assert_eq!(self.value(bias).len(), c);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let nc = F::cast_from(c as f64);
        let eps = F::cast_from(eps);
        let mut stats = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            let mean = row.iter().fold(F::zero(), |s, &v| s + v) / nc;
            let var = row
                .iter()
                .fold(F::zero(), |s, &v| s + (v - mean) * (v - mean))
                / nc;
            let rstd = F::one() / (var + eps).sqrt();
            stats.push((mean, rstd));
            for j in 0..c {
                out.push((row[j] - mean) * rstd * g[j] + b[j]);
            }
        }
        let t = Tensor::new(xv.shape(), out);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            rg,
        )
    }

    /// Unit-L2 rows. Rows with (near) zero norm map to zero with zero gradient.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let tiny = F::cast_from(1e-12);
        let mut norms = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            let n = row.iter().fold(F::zero(), |s, &v| s + v * v).sqrt();
            norms.push(n);
            if n > tiny {
                out.extend(row.iter().map(|&v| v / n));
            } else {
                out.extend(std::iter::repeat(F::zero()).take(c));
            }
        }
        let t = Tensor::new(xv.shape(), out);
        let rg = self.rg(x);
        self.push(t, Op::L2Normalize { x, norms }, rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(F::zero(), |s, &v| s + v);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, F::one() / F::cast_from(n as f64))
    }

    /// Sum over the last axis; the result drops that axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let data: Vec<F> = av
            .data()
            .chunks(c)
            .map(|r| r.iter().fold(F::zero(), |s, &v| s + v))
            .collect();
        let mut shape = av.shape().to_vec();
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::new(&shape, data);
        let rg = self.rg(a);
        self.push(t, Op::SumLast(a), rg)
    }

    pub fn mean_last(&mut self, a: Var) -> Var {
        let c = self.value(a).cols();
        let s = self.sum_last(a);
        self.scale(s, F::one() / F::cast_from(c as f64))
    }

    /// Output row `g` is the mean of input rows `groups[g]` (input viewed as
    /// `[rows, last]`); an empty group yields a zero row.
    pub fn row_mean(&mut self, x: Var, groups: Vec<Vec<usize>>, out_shape: &[usize]) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert_eq!(out_shape.iter().product::<usize>(), groups.len() * c);
        let mut out = vec![F::zero(); groups.len() * c];
        for (g, idx) in groups.iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let dst = &mut out[g * c..(g + 1) * c];
            for &r in idx {
                for (d, &s) in dst.iter_mut().zip(xv.row(r)) {
                    *d += s;
                }
            }
            let inv = F::one() / F::cast_from(idx.len() as f64);
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let t = Tensor::new(out_shape, out);
        let rg = self.rg(x);
        self.push(t, Op::RowMean { x, groups }, rg)
    }

    /// Gather rows by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let c = self.value(table).cols();
        let groups = ids.iter().map(|&i| vec![i]).collect();
        self.row_mean(table, groups, &[ids.len(), c])
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (batch, rows, cols) = matrix_dims(xv.shape());
        let mut shape = xv.shape().to_vec();
        let n = shape.len();
        assert!(n >= 2, "transpose needs a matrix");
        shape.swap(n - 1, n - 2);
        let out = transpose_data(xv.data(), batch, rows, cols);
        let t = Tensor::new(&shape, out);
        let rg = self.rg(x);
        self.push(t, Op::Transpose { x, batch, rows, cols }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Divide row `r` of `x` by `s[r]`.
    pub fn div_rows(&mut self, x: Var, s: Var) -> Var {
        let xv = self.value(x);
        let sv = self.value(s);
        assert_eq!(xv.rows(), sv.len(), "div_rows: one divisor per row");
        let c = xv.cols();
        let out = xv
            .data()
            .chunks(c)
            .zip(sv.data())
            .flat_map(|(r, &d)| r.iter().map(move |&v| v / d))
            .collect();
        let t = Tensor::new(xv.shape(), out);
        let rg = self.rg(x) || self.rg(s);
        self.push(t, Op::DivRows { x, s }, rg)
    }

    /// Forward: one-hot of each row's argmax (first index on ties).
    /// Backward: identity, i.e. the gradient of the soft input.
    pub fn straight_through(&mut self, soft: Var) -> Var {
        let sv = self.value(soft);
        let c = sv.cols();
        let mut out = vec![F::zero(); sv.len()];
        for (r, row) in sv.data().chunks(c).enumerate() {
            out[r * c + argmax(row)] = F::one();
        }
        let t = Tensor::new(sv.shape(), out);
        let rg = self.rg(soft);
        self.push(t, Op::StraightThrough(soft), rg)
    }

    /// Multi-head self-attention over packed sequences.
    ///
    /// `qkv` is `[rows, 3d]` with query, key and value blocks side by side;
    /// each `(start, len)` in `seqs` is an independent sequence of rows that
    /// attends only within itself. Output is `[rows, d]`; rows not covered by
    /// any sequence are zero.
    pub fn attention(&mut self, qkv: Var, seqs: Vec<(usize, usize)>, heads: usize) -> Var {
        let qv = self.value(qkv);
        let rows = qv.rows();
        let d3 = qv.cols();
        assert_eq!(d3 % 3, 0);
        let d = d3 / 3;
        assert_eq!(d % heads, 0, "dim {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = F::one() / F::cast_from(dh as f64).sqrt();
        let total: usize = seqs.iter().map(|&(_, l)| l * l).sum::<usize>() * heads;
        let mut probs = vec![F::zero(); total];
        let mut out = vec![F::zero(); rows * d];
        let q = qv.data();
        let mut off = 0;
        for &(s, len) in &seqs {
            assert!(s + len <= rows);
            for h in 0..heads {
                let p = &mut probs[off..off + len * len];
                // SAFETY: views stay within row range [s, s+len) of a [rows, 3d] buffer.
                unsafe {
                    let qp = q.as_ptr().add(s * d3 + h * dh);
                    let kp = q.as_ptr().add(s * d3 + d + h * dh);
                    F::gemm(
                        len, dh, len, scale, qp, d3 as isize, 1, kp, 1, d3 as isize,
                        F::zero(), p.as_mut_ptr(), len as isize, 1,
                    );
                }
                for row in p.chunks_mut(len) {
                    softmax_in_place(row);
                }
                unsafe {
                    let vp = q.as_ptr().add(s * d3 + 2 * d + h * dh);
                    let op = out.as_mut_ptr().add(s * d + h * dh);
                    F::gemm(
                        len, len, dh, F::one(), p.as_ptr(), len as isize, 1, vp,
                        d3 as isize, 1, F::zero(), op, d as isize, 1,
                    );
                }
                off += len * len;
            }
        }
        let t = Tensor::new(&[rows, d], out);
        let rg = self.rg(qkv);
        self.push(
            t,
            Op::Attention {
                qkv,
                seqs,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, out: Var) -> Gradients<F> {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(out) {
            return Gradients { grads };
        }
        grads[out.0] = Some(vec![F::one()]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node<F>, dy: &[F], grads: &mut [Option<Vec<F>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                a_trans,
                b_trans,
                batch,
                a_batched,
                b_batched,
                m,
                k,
                n,
            } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.rg(a) {
                    let ga = grad_buf(grads, a, av.len());
                    if a_trans {
                        // a stored [k,m]: dA = op(B) * dY^T
                        batched_gemm(
                            batch, k, n, m, bv, b_batched, b_trans, dy, true, true, ga,
                            a_batched, true,
                        );
                    } else {
                        // dA = dY * op(B)^T
                        batched_gemm(
                            batch, m, n, k, dy, true, false, bv, b_batched, !b_trans, ga,
                            a_batched, true,
                        );
                    }
                }
                if self.rg(b) {
                    let gb = grad_buf(grads, b, bv.len());
                    if b_trans {
                        // b stored [n,k]: dB = dY^T * op(A)
                        batched_gemm(
                            batch, n, m, k, dy, true, true, av, a_batched, a_trans, gb,
                            b_batched, true,
                        );
                    } else {
                        // dB = op(A)^T * dY
                        batched_gemm(
                            batch, k, m, n, av, a_batched, !a_trans, dy, true, false, gb,
                            b_batched, true,
                        );
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(v) {
                        axpy(grad_buf(grads, v, dy.len()), dy, F::one());
                    }
                }
            }
            &Op::Sub(a, b) => {
                if self.rg(a) {
                    axpy(grad_buf(grads, a, dy.len()), dy, F::one());
                }
                if self.rg(b) {
                    axpy(grad_buf(grads, b, dy.len()), dy, -F::one());
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.rg(a) {
                    let g = grad_buf(grads, a, dy.len());
                    for ((g, &d), &o) in g.iter_mut().zip(dy).zip(bv) {
                        *g += d * o;
                    }
                }
                if self.rg(b) {
                    let g = grad_buf(grads, b, dy.len());
                    for ((g, &d), &o) in g.iter_mut().zip(dy).zip(av) {
                        *g += d * o;
                    }
                }
            }
            &Op::AddBcast(a, b) => {
                if self.rg(a) {
                    axpy(grad_buf(grads, a, dy.len()), dy, F::one());
                }
                if self.rg(b) {
                    let bl = self.value(b).len();
                    let g = grad_buf(grads, b, bl);
                    for ch in dy.chunks(bl) {
                        axpy(g, ch, F::one());
                    }
                }
            }
            &Op::MulBcast(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let bl = bv.len();
                if self.rg(a) {
                    let g = grad_buf(grads, a, dy.len());
                    for (gc, dc) in g.chunks_mut(bl).zip(dy.chunks(bl)) {
                        for ((g, &d), &o) in gc.iter_mut().zip(dc).zip(bv) {
                            *g += d * o;
                        }
                    }
                }
                if self.rg(b) {
                    let g = grad_buf(grads, b, bl);
                    for (ac, dc) in av.chunks(bl).zip(dy.chunks(bl)) {
                        for ((g, &d), &x) in g.iter_mut().zip(dc).zip(ac) {
                            *g += d * x;
                        }
                    }
                }
            }
            &Op::Scale(a, c) => axpy(grad_buf(grads, a, dy.len()), dy, c),
            &Op::AddScalar(a) | &Op::Reshape(a) | &Op::StraightThrough(a) => {
                axpy(grad_buf(grads, a, dy.len()), dy, F::one())
            }
            &Op::Exp(a) => {
                let g = grad_buf(grads, a, dy.len());
                for ((g, &d), &o) in g.iter_mut().zip(dy).zip(y) {
                    *g += d * o;
                }
            }
            &Op::Log(a) => {
                let av = self.value(a).data();
                let g = grad_buf(grads, a, dy.len());
                for ((g, &d), &x) in g.iter_mut().zip(dy).zip(av) {
                    *g += d / x;
                }
            }
            &Op::Sqr(a) => {
                let av = self.value(a).data();
                let g = grad_buf(grads, a, dy.len());
                let two = F::cast_from(2.0);
                for ((g, &d), &x) in g.iter_mut().zip(dy).zip(av) {
                    *g += two * d * x;
                }
            }
            &Op::Gelu(a) => {
                let av = self.value(a).data();
                let g = grad_buf(grads, a, dy.len());
                let c = F::cast_from(GELU_C);
                let k = F::cast_from(GELU_A);
                let half = F::cast_from(0.5);
                let three = F::cast_from(3.0);
                for ((g, &d), &x) in g.iter_mut().zip(dy).zip(av) {
                    let u = c * (x + k * x * x * x);
                    let th = u.tanh();
                    let du = c * (F::one() + three * k * x * x);
                    let dgelu = half * (F::one() + th) + half * x * (F::one() - th * th) * du;
                    *g += d * dgelu;
                }
            }
            &Op::ClampMin(a, lo) => {
                let av = self.value(a).data();
                let g = grad_buf(grads, a, dy.len());
                for ((g, &d), &x) in g.iter_mut().zip(dy).zip(av) {
                    if x > lo {
                        *g += d;
                    }
                }
            }
            &Op::Softmax(a) => {
                let c = node.value.cols();
                let g = grad_buf(grads, a, dy.len());
                for ((gr, dr), yr) in g.chunks_mut(c).zip(dy.chunks(c)).zip(y.chunks(c)) {
                    let dot = dr.iter().zip(yr).fold(F::zero(), |s, (&d, &p)| s + d * p);
                    for ((g, &d), &p) in gr.iter_mut().zip(dr).zip(yr) {
                        *g += p * (d - dot);
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                let c = node.value.cols();
                let g = grad_buf(grads, a, dy.len());
                for ((gr, dr), yr) in g.chunks_mut(c).zip(dy.chunks(c)).zip(y.chunks(c)) {
                    let total = dr.iter().fold(F::zero(), |s, &d| s + d);
                    for ((g, &d), &ly) in gr.iter_mut().zip(dr).zip(yr) {
                        *g += d - ly.exp() * total;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let xv = self.value(x).data();
                let gv = self.value(gain).data();
                let c = gv.len();
                let nc = F::cast_from(c as f64);
                if self.rg(gain) || self.rg(bias) {
                    let mut dg = vec![F::zero(); c];
                    let mut db = vec![F::zero(); c];
                    for ((xr, dr), &(mean, rstd)) in xv.chunks(c).zip(dy.chunks(c)).zip(stats) {
                        for j in 0..c {
                            dg[j] += dr[j] * (xr[j] - mean) * rstd;
                            db[j] += dr[j];
                        }
                    }
                    if self.rg(gain) {
                        axpy(grad_buf(grads, gain, c), &dg, F::one());
                    }
                    if self.rg(bias) {
                        axpy(grad_buf(grads, bias, c), &db, F::one());
                    }
                }
                if self.rg(x) {
                    let g = grad_buf(grads, x, xv.len());
                    let mut dxhat = vec![F::zero(); c];
                    for (((gr, xr), dr), &(mean, rstd)) in g
                        .chunks_mut(c)
                        .zip(xv.chunks(c))
                        .zip(dy.chunks(c))
                        .zip(stats)
                    {
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..c {
                            dxhat[j] = dr[j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * (xr[j] - mean) * rstd;
                        }
                        m1 = m1 / nc;
                        m2 = m2 / nc;
                        for j in 0..c {
                            let xhat = (xr[j] - mean) * rstd;
                            gr[j] += rstd * (dxhat[j] - m1 - xhat * m2);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let x = *x;
                let c = node.value.cols();
                let tiny = F::cast_from(1e-12);
                let g = grad_buf(grads, x, dy.len());
                for (((gr, dr), yr), &n) in g
                    .chunks_mut(c)
                    .zip(dy.chunks(c))
                    .zip(y.chunks(c))
                    .zip(norms)
                {
                    if n <= tiny {
                        continue;
                    }
                    let dot = dr.iter().zip(yr).fold(F::zero(), |s, (&d, &u)| s + d * u);
                    for ((g, &d), &u) in gr.iter_mut().zip(dr).zip(yr) {
                        *g += (d - u * dot) / n;
                    }
                }
            }
            &Op::SumAll(a) => {
                let n = self.value(a).len();
                let g = grad_buf(grads, a, n);
                g.iter_mut().for_each(|g| *g += dy[0]);
            }
            &Op::SumLast(a) => {
                let av = self.value(a);
                let c = av.cols();
                let g = grad_buf(grads, a, av.len());
                for (gr, &d) in g.chunks_mut(c).zip(dy) {
                    gr.iter_mut().for_each(|g| *g += d);
                }
            }
            Op::RowMean { x, groups } => {
                let x = *x;
                let xv = self.value(x);
                let c = xv.cols();
                let g = grad_buf(grads, x, xv.len());
                for (gi, idx) in groups.iter().enumerate() {
                    if idx.is_empty() {
                        continue;
                    }
                    let inv = F::one() / F::cast_from(idx.len() as f64);
                    let dr = &dy[gi * c..(gi + 1) * c];
                    for &r in idx {
                        axpy(&mut g[r * c..(r + 1) * c], dr, inv);
                    }
                }
            }
            &Op::Transpose {
                x,
                batch,
                rows,
                cols,
            } => {
                let back = transpose_data(dy, batch, cols, rows);
                axpy(grad_buf(grads, x, back.len()), &back, F::one());
            }
            &Op::DivRows { x, s } => {
                let xv = self.value(x).data();
                let sv = self.value(s).data();
                let c = node.value.cols();
                if self.rg(x) {
                    let g = grad_buf(grads, x, xv.len());
                    for ((gr, dr), &d) in g.chunks_mut(c).zip(dy.chunks(c)).zip(sv) {
                        axpy(gr, dr, F::one() / d);
                    }
                }
                if self.rg(s) {
                    let g = grad_buf(grads, s, sv.len());
                    for (((g, dr), xr), &d) in
                        g.iter_mut().zip(dy.chunks(c)).zip(xv.chunks(c)).zip(sv)
                    {
                        let dot = dr.iter().zip(xr).fold(F::zero(), |acc, (&a, &b)| acc + a * b);
                        *g -= dot / (d * d);
                    }
                }
            }
            Op::Attention {
                qkv,
                seqs,
                heads,
                probs,
            } => {
                let qkv = *qkv;
                let heads = *heads;
                let qv = self.value(qkv);
                let d3 = qv.cols();
                let d = d3 / 3;
                let dh = d / heads;
                let scale = F::one() / F::cast_from(dh as f64).sqrt();
                let q = qv.data();
                let g = grad_buf(grads, qkv, qv.len());
                let mut off = 0;
                let mut dp = Vec::new();
                for &(s, len) in seqs {
                    dp.resize(len * len, F::zero());
                    for h in 0..heads {
                        let p = &probs[off..off + len * len];
                        // SAFETY: all views lie inside rows [s, s+len) of their buffers.
                        unsafe {
                            let dyp = dy.as_ptr().add(s * d + h * dh);
                            let vp = q.as_ptr().add(s * d3 + 2 * d + h * dh);
                            // dP = dO V^T
                            F::gemm(
                                len, dh, len, F::one(), dyp, d as isize, 1, vp, 1,
                                d3 as isize, F::zero(), dp.as_mut_ptr(), len as isize, 1,
                            );
                            // dV += P^T dO
                            let gv = g.as_mut_ptr().add(s * d3 + 2 * d + h * dh);
                            F::gemm(
                                len, len, dh, F::one(), p.as_ptr(), 1, len as isize, dyp,
                                d as isize, 1, F::one(), gv, d3 as isize, 1,
                            );
                        }
                        for (dr, pr) in dp.chunks_mut(len).zip(p.chunks(len)) {
                            let dot = dr.iter().zip(pr).fold(F::zero(), |a, (&x, &y)| a + x * y);
                            for (x, &pp) in dr.iter_mut().zip(pr) {
                                *x = pp * (*x - dot);
                            }
                        }
                        unsafe {
                            let qp = q.as_ptr().add(s * d3 + h * dh);
                            let kp = q.as_ptr().add(s * d3 + d + h * dh);
                            let gq = g.as_mut_ptr().add(s * d3 + h * dh);
                            let gk = g.as_mut_ptr().add(s * d3 + d + h * dh);
                            // dQ += scale dS K
                            F::gemm(
                                len, len, dh, scale, dp.as_ptr(), len as isize, 1, kp,
                                d3 as isize, 1, F::one(), gq, d3 as isize, 1,
                            );
                            // dK += scale dS^T Q
                            F::gemm(
                                len, len, dh, scale, dp.as_ptr(), 1, len as isize, qp,
                                d3 as isize, 1, F::one(), gk, d3 as isize, 1,
                            );
                        }
                        off += len * len;
                    }
                }
            }
        }
    }
}

fn grad_buf<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut [F] {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn axpy<F: Scalar>(dst: &mut [F], src: &[F], alpha: F) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let mx = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let mut sum = F::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

pub(crate) fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let mx = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let s = row.iter().fold(F::zero(), |s, &v| s + (v - mx).exp());
    mx + s.ln()
}

/// First index of the maximum.
pub fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn transpose_data<F: Scalar>(src: &[F], batch: usize, rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); src.len()];
    for b in 0..batch {
        let o = b * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[o + c * rows + r] = src[o + r * cols + c];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
