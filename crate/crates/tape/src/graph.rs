use crate::kernels::{self, Conv1dDims, Conv2dDims};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sum(Var),
    Mean(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMulNt(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: Conv1dDims,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: Conv2dDims,
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<u32>,
    },
    InstanceNorm {
        x: Var,
        eps: T,
        inner: usize,
        centered: Vec<T>,
        sigma: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        channels: usize,
        inner: usize,
    },
    RowAffine {
        x: Var,
        scale: Var,
        shift: Var,
        inner: usize,
    },
    MeanInner {
        x: Var,
        inner: usize,
    },
    Permute3 {
        x: Var,
        perm: [usize; 3],
    },
    Reshape(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    IndexRows {
        x: Var,
        idx: Vec<usize>,
    },
    RowNorm(Var),
    Upsample2x(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    L1Mean(Var, Var),
    DvBound {
        u: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Define-by-run computation record. Every operation evaluates eagerly and
/// appends a node; [`Graph::backward`] walks the nodes in reverse.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn v(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let xv = self.v(x);
        let out = Tensor::new(xv.shape(), xv.data().iter().map(|&a| f(a)).collect());
        self.push(out, op, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (av, bv) = (self.v(a), self.v(b));
        same_shape(av, bv, "elementwise");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape(), data);
        self.push(out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.map(x, Op::Scale(x, s), |a| a * s)
    }

    pub fn offset(&mut self, x: Var, c: T) -> Var {
        self.map(x, Op::Offset(x), |a| a + c)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), |a| T::one() / (T::one() + (-a).exp()))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), |a| a.tanh())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |a| a.max(T::zero()))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.map(
            x,
            Op::LeakyRelu(x, slope),
            |a| if a > T::zero() { a } else { a * slope },
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = kernels::sum(self.v(x).data());
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.v(x);
        let s = kernels::sum(xv.data()) / T::of(xv.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// `x · wᵀ + b` with `x: [N, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.v(x), self.v(w));
        let (n, i) = (xv.dim(0), xv.dim(1));
        let o = wv.dim(0);
        assert_eq!(wv.dim(1), i, "linear: inner dimension");
        let bias = b.map(|b| self.v(b).data());
        let mut out = vec![T::zero(); n * o];
        for r in 0..n {
            let xr = &xv.data()[r * i..(r + 1) * i];
            for c in 0..o {
                let b0 = bias.map_or(T::zero(), |bv| bv[c]);
                out[r * o + c] = b0 + kernels::dot(xr, &wv.data()[c * i..(c + 1) * i]);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::new(&[n, o], out), Op::Linear { x, w, b }, &inputs)
    }

    /// `a · bᵀ` with `a: [N, K]`, `b: [M, K]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.v(a), self.v(b));
        let (n, k, m) = (av.dim(0), av.dim(1), bv.dim(0));
        assert_eq!(bv.dim(1), k, "matmul_nt: inner dimension");
        let mut out = vec![T::zero(); n * m];
        for r in 0..n {
            for c in 0..m {
                out[r * m + c] = kernels::dot(av.row(r), bv.row(c));
            }
        }
        self.push(Tensor::new(&[n, m], out), Op::MatMulNt(a, b), &[a, b])
    }

    /// Stride-1 convolution over `[B, Ci, L]` with zero padding `pad` each side.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Var {
        let (xv, wv) = (self.v(x), self.v(w));
        assert_eq!(xv.shape().len(), 3, "conv1d expects [B, C, L]");
        assert_eq!(xv.dim(1), wv.dim(1), "conv1d: channel mismatch");
        let dims = Conv1dDims {
            batch: xv.dim(0),
            in_ch: xv.dim(1),
            out_ch: wv.dim(0),
            len: xv.dim(2),
            kernel: wv.dim(2),
            pad,
        };
        let mut out = vec![T::zero(); dims.batch * dims.out_ch * dims.out_len()];
        kernels::conv1d_forward(dims, xv.data(), wv.data(), b.map(|b| self.v(b).data()), &mut out);
        let shape = [dims.batch, dims.out_ch, dims.out_len()];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::new(&shape, out), Op::Conv1d { x, w, b, dims }, &inputs)
    }

    /// Stride-1 square-kernel convolution over `[B, Ci, H, W]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Var {
        let (xv, wv) = (self.v(x), self.v(w));
        assert_eq!(xv.shape().len(), 4, "conv2d expects [B, C, H, W]");
        assert_eq!(xv.dim(1), wv.dim(1), "conv2d: channel mismatch");
        assert_eq!(wv.dim(2), wv.dim(3), "conv2d: square kernels only");
        let dims = Conv2dDims {
            batch: xv.dim(0),
            in_ch: xv.dim(1),
            out_ch: wv.dim(0),
            height: xv.dim(2),
            width: xv.dim(3),
            kernel: wv.dim(2),
            pad,
        };
        let (oh, ow) = dims.out_hw();
        let mut out = vec![T::zero(); dims.batch * dims.out_ch * oh * ow];
        kernels::conv2d_forward(dims, xv.data(), wv.data(), b.map(|b| self.v(b).data()), &mut out);
        let shape = [dims.batch, dims.out_ch, oh, ow];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::new(&shape, out), Op::Conv2d { x, w, b, dims }, &inputs)
    }

    /// Non-overlapping max pool along the last axis; a trailing remainder is dropped.
    pub fn max_pool1d(&mut self, x: Var, k: usize) -> Var {
        let xv = self.v(x);
        let shape = xv.shape();
        let len = *shape.last().unwrap();
        let rows = xv.len() / len;
        let out_len = len / k;
        assert!(out_len > 0, "max_pool1d: window {k} longer than input {len}");
        let mut out = Vec::with_capacity(rows * out_len);
        let mut argmax = Vec::with_capacity(rows * out_len);
        for r in 0..rows {
            let row = &xv.data()[r * len..(r + 1) * len];
            for o in 0..out_len {
                let mut best = o * k;
                for j in o * k + 1..(o + 1) * k {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                out.push(row[best]);
                argmax.push((r * len + best) as u32);
            }
        }
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = out_len;
        self.push(Tensor::new(&out_shape, out), Op::MaxPool1d { x, argmax }, &[x])
    }

    /// Standardizes each contiguous run of `inner` elements:
    /// `(x − μ) / (σ + eps)` with the population standard deviation σ.
    pub fn instance_norm(&mut self, x: Var, inner: usize, eps: T) -> Var {
        let xv = self.v(x);
        assert_eq!(xv.len() % inner, 0);
        let rows = xv.len() / inner;
        let n = T::of(inner as f64);
        let mut centered = Vec::with_capacity(xv.len());
        let mut sigma = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..rows {
            let row = &xv.data()[r * inner..(r + 1) * inner];
            let mu = kernels::sum(row) / n;
            let start = centered.len();
            centered.extend(row.iter().map(|&v| v - mu));
            let c = &centered[start..];
            let s = (kernels::dot(c, c) / n).sqrt();
            sigma.push(s);
            let d = s + eps;
            out.extend(c.iter().map(|&v| v / d));
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::new(&shape, out),
            Op::InstanceNorm {
                x,
                eps,
                inner,
                centered,
                sigma,
            },
            &[x],
        )
    }

    /// Per-channel `x · γ_c + β_c` for `x: [B, C, ...]`, `γ, β: [C]`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.v(x);
        let channels = xv.dim(1);
        let inner = xv.len() / (xv.dim(0) * channels);
        let (g, b) = (self.v(gamma).data(), self.v(beta).data());
        assert_eq!(g.len(), channels);
        assert_eq!(b.len(), channels);
        let mut out = xv.data().to_vec();
        for (blk, chunk) in out.chunks_mut(inner).enumerate() {
            let c = blk % channels;
            chunk.iter_mut().for_each(|v| *v = *v * g[c] + b[c]);
        }
        let shape = xv.shape().to_vec();
        let op = Op::ChannelAffine {
            x,
            gamma,
            beta,
            channels,
            inner,
        };
        self.push(Tensor::new(&shape, out), op, &[x, gamma, beta])
    }

    /// Per-row `x · s_r + t_r` where rows are the leading `scale.len()` blocks
    /// of `x` (e.g. `x: [B, C, ...]`, `scale, shift: [B, C]`).
    pub fn row_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let xv = self.v(x);
        let (s, t) = (self.v(scale).data(), self.v(shift).data());
        assert_eq!(s.len(), t.len());
        assert_eq!(xv.len() % s.len(), 0);
        let inner = xv.len() / s.len();
        let mut out = xv.data().to_vec();
        for (r, chunk) in out.chunks_mut(inner).enumerate() {
            chunk.iter_mut().for_each(|v| *v = *v * s[r] + t[r]);
        }
        let shape = xv.shape().to_vec();
        let op = Op::RowAffine { x, scale, shift, inner };
        self.push(Tensor::new(&shape, out), op, &[x, scale, shift])
    }

    /// Mean over all axes after the first `keep` ones.
    pub fn mean_inner(&mut self, x: Var, keep: usize) -> Var {
        let xv = self.v(x);
        let out_shape = xv.shape()[..keep].to_vec();
        let rows: usize = out_shape.iter().product();
        let inner = xv.len() / rows;
        let n = T::of(inner as f64);
        let out = xv.data().chunks(inner).map(|c| kernels::sum(c) / n).collect();
        self.push(Tensor::new(&out_shape, out), Op::MeanInner { x, inner }, &[x])
    }

    /// Axis permutation of a rank-3 tensor: output axis `i` is input axis `perm[i]`.
    pub fn permute3(&mut self, x: Var, perm: [usize; 3]) -> Var {
        let xv = self.v(x);
        let s = xv.shape();
        assert_eq!(s.len(), 3);
        let out_shape = [s[perm[0]], s[perm[1]], s[perm[2]]];
        let in_strides = [s[1] * s[2], s[2], 1];
        let st = [in_strides[perm[0]], in_strides[perm[1]], in_strides[perm[2]]];
        let mut out = Vec::with_capacity(xv.len());
        for i in 0..out_shape[0] {
            for j in 0..out_shape[1] {
                for k in 0..out_shape[2] {
                    out.push(xv.data()[i * st[0] + j * st[1] + k * st[2]]);
                }
            }
        }
        self.push(Tensor::new(&out_shape, out), Op::Permute3 { x, perm }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.v(x).clone().reshaped(shape);
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Entries `start..start + len` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.v(x);
        let stride = xv.len() / xv.dim(0);
        assert!(start + len <= xv.dim(0));
        let mut shape = xv.shape().to_vec();
        shape[0] = len;
        let out = xv.data()[start * stride..(start + len) * stride].to_vec();
        self.push(Tensor::new(&shape, out), Op::SliceRows { x, start }, &[x])
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.v(x);
        let (n, m) = (xv.dim(0), xv.dim(1));
        assert!(start + len <= m);
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&xv.data()[r * m + start..r * m + start + len]);
        }
        self.push(Tensor::new(&[n, len], out), Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.v(parts[0]).dim(0);
        let widths: Vec<usize> = parts.iter().map(|&p| self.v(p).dim(1)).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pv = self.v(p);
                assert_eq!(pv.dim(0), n, "concat_cols: row mismatch");
                out.extend_from_slice(&pv.data()[r * w..(r + 1) * w]);
            }
        }
        self.push(Tensor::new(&[n, total], out), Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Gathers rows of `x: [N, D]`; indices may repeat.
    pub fn index_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.v(x);
        let d = xv.dim(1);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(xv.row(i));
        }
        let op = Op::IndexRows { x, idx: idx.to_vec() };
        self.push(Tensor::new(&[idx.len(), d], out), op, &[x])
    }

    /// Euclidean norm of each row of `x: [N, D]`.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let xv = self.v(x);
        let n = xv.dim(0);
        let out = (0..n).map(|r| kernels::dot(xv.row(r), xv.row(r)).sqrt()).collect();
        self.push(Tensor::new(&[n], out), Op::RowNorm(x), &[x])
    }

    /// Nearest-neighbour ×2 upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = self.v(x);
        let s = xv.shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for r in 0..2 * h {
                for c in 0..2 * w {
                    dst[r * 2 * w + c] = src[(r / 2) * w + c / 2];
                }
            }
        }
        let shape = [s[0], s[1], 2 * h, 2 * w];
        self.push(Tensor::new(&shape, out), Op::Upsample2x(x), &[x])
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.v(logits);
        let (n, k) = (lv.dim(0), lv.dim(1));
        assert_eq!(targets.len(), n);
        let mut probs = Vec::with_capacity(n * k);
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < k, "cross_entropy: class {t} out of range {k}");
            let row = lv.row(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[t];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = total / T::of(n as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push(Tensor::scalar(loss), op, &[logits])
    }

    /// Mean absolute difference.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.v(a), self.v(b));
        same_shape(av, bv, "l1_mean");
        let s: T = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y).abs()).sum();
        let loss = s / T::of(av.len() as f64);
        self.push(Tensor::scalar(loss), Op::L1Mean(a, b), &[a, b])
    }

    /// Donsker–Varadhan bound from a square critic score matrix `u: [B, B]`
    /// whose diagonal holds jointly drawn pairs: the mean of the diagonal minus
    /// the log-mean-exp over all off-diagonal entries.
    pub fn dv_bound(&mut self, u: Var) -> Var {
        let uv = self.v(u);
        let b = uv.dim(0);
        assert_eq!(uv.dim(1), b, "dv_bound expects a square matrix");
        assert!(b >= 2, "dv_bound needs at least two rows");
        let d = uv.data();
        let joint = (0..b).map(|i| d[i * b + i]).sum::<T>() / T::of(b as f64);
        let mut m = T::neg_infinity();
        for i in 0..b {
            for j in 0..b {
                if i != j {
                    m = m.max(d[i * b + j]);
                }
            }
        }
        let mut weights = vec![T::zero(); b * b];
        let mut z = T::zero();
        for i in 0..b {
            for j in 0..b {
                if i != j {
                    let e = (d[i * b + j] - m).exp();
                    weights[i * b + j] = e;
                    z += e;
                }
            }
        }
        weights.iter_mut().for_each(|w| *w = *w / z);
        let margin = m + z.ln() - T::of(((b * (b - 1)) as f64).ln());
        self.push(Tensor::scalar(joint - margin), Op::DvBound { u, weights }, &[u])
    }

    /// Reverse pass from a scalar node. Gradients are kept only for leaves.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.v(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Grads { grads };
        }
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(node, g.data(), &mut grads);
        }
        Grads { grads }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut [T]> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(node.value.shape()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    /// Moves a gradient buffer out of `grads` so several can be borrowed at once.
    fn take_buf(&self, grads: &mut [Option<Tensor<T>>], v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].take().unwrap_or_else(|| Tensor::zeros(node.value.shape())))
    }

    fn put_buf(&self, grads: &mut [Option<Tensor<T>>], v: Var, buf: Option<Tensor<T>>) {
        if buf.is_some() {
            grads[v.0] = buf;
        }
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Tensor<T>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
                if let Some(db) = self.acc(grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.acc(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
                if let Some(db) = self.acc(grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv);
                }
            }
            Op::Mul(a, b) => {
                let bv = self.v(*b).data();
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &gv), &o) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * o;
                    }
                }
                let av = self.v(*a).data();
                if let Some(db) = self.acc(grads, *b) {
                    for ((d, &gv), &o) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * o;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = self.acc(grads, *x) {
                    kernels::axpy(*s, g, dx);
                }
            }
            Op::Offset(x) | Op::Reshape(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
            }
            Op::Sigmoid(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, &gv), &o) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * o * (T::one() - o);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, &gv), &o) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * (T::one() - o * o);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, &gv), &o) in dx.iter_mut().zip(g).zip(y) {
                        if o > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.v(*x).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for ((d, &gv), &i) in dx.iter_mut().zip(g).zip(xv) {
                        *d += if i > T::zero() { gv } else { gv * *slope };
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = T::of(self.v(*x).len() as f64);
                if let Some(dx) = self.acc(grads, *x) {
                    let gv = g[0] / n;
                    dx.iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.v(*x), self.v(*w));
                let (n, i, o) = (xv.dim(0), xv.dim(1), wv.dim(0));
                if let Some(dx) = self.acc(grads, *x) {
                    for r in 0..n {
                        for c in 0..o {
                            kernels::axpy(g[r * o + c], wv.row(c), &mut dx[r * i..(r + 1) * i]);
                        }
                    }
                }
                if let Some(dw) = self.acc(grads, *w) {
                    for r in 0..n {
                        for c in 0..o {
                            kernels::axpy(g[r * o + c], xv.row(r), &mut dw[c * i..(c + 1) * i]);
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(db) = self.acc(grads, *b) {
                        for r in 0..n {
                            for c in 0..o {
                                db[c] += g[r * o + c];
                            }
                        }
                    }
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.v(*a), self.v(*b));
                let (n, k, m) = (av.dim(0), av.dim(1), bv.dim(0));
                if let Some(da) = self.acc(grads, *a) {
                    for r in 0..n {
                        for c in 0..m {
                            kernels::axpy(g[r * m + c], bv.row(c), &mut da[r * k..(r + 1) * k]);
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for r in 0..n {
                        for c in 0..m {
                            kernels::axpy(g[r * m + c], av.row(r), &mut db[c * k..(c + 1) * k]);
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, dims } => {
                let (xv, wv) = (self.v(*x).data(), self.v(*w).data());
                let mut dx = self.take_buf(grads, *x);
                let mut dw = self.take_buf(grads, *w);
                let mut db = b.and_then(|b| self.take_buf(grads, b));
                kernels::conv1d_backward(
                    *dims,
                    xv,
                    wv,
                    g,
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                self.put_buf(grads, *x, dx);
                self.put_buf(grads, *w, dw);
                if let Some(b) = b {
                    self.put_buf(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, b, dims } => {
                let (xv, wv) = (self.v(*x).data(), self.v(*w).data());
                let mut dx = self.take_buf(grads, *x);
                let mut dw = self.take_buf(grads, *w);
                let mut db = b.and_then(|b| self.take_buf(grads, b));
                kernels::conv2d_backward(
                    *dims,
                    xv,
                    wv,
                    g,
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                self.put_buf(grads, *x, dx);
                self.put_buf(grads, *w, dw);
                if let Some(b) = b {
                    self.put_buf(grads, *b, db);
                }
            }
            Op::MaxPool1d { x, argmax } => {
                if let Some(dx) = self.acc(grads, *x) {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src as usize] += gv;
                    }
                }
            }
            Op::InstanceNorm {
                x,
                eps,
                inner,
                centered,
                sigma,
            } => {
                if let Some(dx) = self.acc(grads, *x) {
                    let n = T::of(*inner as f64);
                    for (r, &s) in sigma.iter().enumerate() {
                        let gr = &g[r * inner..(r + 1) * inner];
                        let cr = &centered[r * inner..(r + 1) * inner];
                        let dr = &mut dx[r * inner..(r + 1) * inner];
                        let d = s + *eps;
                        let gmean = kernels::sum(gr) / n;
                        let coef = if s > T::zero() {
                            kernels::dot(gr, cr) / (d * d * n * s)
                        } else {
                            T::zero()
                        };
                        for ((o, &gv), &c) in dr.iter_mut().zip(gr).zip(cr) {
                            *o += (gv - gmean) / d - coef * c;
                        }
                    }
                }
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                channels,
                inner,
            } => {
                let gam = self.v(*gamma).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for (blk, (dc, gc)) in dx.chunks_mut(*inner).zip(g.chunks(*inner)).enumerate() {
                        kernels::axpy(gam[blk % channels], gc, dc);
                    }
                }
                let xv = self.v(*x).data();
                if let Some(dg) = self.acc(grads, *gamma) {
                    for (blk, (xc, gc)) in xv.chunks(*inner).zip(g.chunks(*inner)).enumerate() {
                        dg[blk % channels] += kernels::dot(xc, gc);
                    }
                }
                if let Some(db) = self.acc(grads, *beta) {
                    for (blk, gc) in g.chunks(*inner).enumerate() {
                        db[blk % channels] += kernels::sum(gc);
                    }
                }
            }
            Op::RowAffine { x, scale, shift, inner } => {
                let s = self.v(*scale).data();
                if let Some(dx) = self.acc(grads, *x) {
                    for (r, (dc, gc)) in dx.chunks_mut(*inner).zip(g.chunks(*inner)).enumerate() {
                        kernels::axpy(s[r], gc, dc);
                    }
                }
                let xv = self.v(*x).data();
                if let Some(ds) = self.acc(grads, *scale) {
                    for (r, (xc, gc)) in xv.chunks(*inner).zip(g.chunks(*inner)).enumerate() {
                        ds[r] += kernels::dot(xc, gc);
                    }
                }
                if let Some(dt) = self.acc(grads, *shift) {
                    for (r, gc) in g.chunks(*inner).enumerate() {
                        dt[r] += kernels::sum(gc);
                    }
                }
            }
            Op::MeanInner { x, inner } => {
                if let Some(dx) = self.acc(grads, *x) {
                    let n = T::of(*inner as f64);
                    for (dc, &gv) in dx.chunks_mut(*inner).zip(g) {
                        let v = gv / n;
                        dc.iter_mut().for_each(|d| *d += v);
                    }
                }
            }
            Op::Permute3 { x, perm } => {
                let s = self.v(*x).shape().to_vec();
                if let Some(dx) = self.acc(grads, *x) {
                    let out_shape = [s[perm[0]], s[perm[1]], s[perm[2]]];
                    let in_strides = [s[1] * s[2], s[2], 1];
                    let st = [in_strides[perm[0]], in_strides[perm[1]], in_strides[perm[2]]];
                    let mut o = 0;
                    for i in 0..out_shape[0] {
                        for j in 0..out_shape[1] {
                            for k in 0..out_shape[2] {
                                dx[i * st[0] + j * st[1] + k * st[2]] += g[o];
                                o += 1;
                            }
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.v(*x);
                let stride = xv.len() / xv.dim(0);
                if let Some(dx) = self.acc(grads, *x) {
                    let dst = &mut dx[start * stride..start * stride + g.len()];
                    dst.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
            }
            Op::SliceCols { x, start } => {
                let m = self.v(*x).dim(1);
                let len = node.value.dim(1);
                if let Some(dx) = self.acc(grads, *x) {
                    for (r, gr) in g.chunks(len).enumerate() {
                        let dst = &mut dx[r * m + start..r * m + start + len];
                        dst.iter_mut().zip(gr).for_each(|(d, &gv)| *d += gv);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.dim(1);
                let mut col = 0;
                for &p in parts {
                    let w = self.v(p).dim(1);
                    if let Some(dp) = self.acc(grads, p) {
                        for (r, dr) in dp.chunks_mut(w).enumerate() {
                            let src = &g[r * total + col..r * total + col + w];
                            dr.iter_mut().zip(src).for_each(|(d, &gv)| *d += gv);
                        }
                    }
                    col += w;
                }
            }
            Op::IndexRows { x, idx } => {
                let d = self.v(*x).dim(1);
                if let Some(dx) = self.acc(grads, *x) {
                    for (o, &i) in idx.iter().enumerate() {
                        let src = &g[o * d..(o + 1) * d];
                        dx[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(dv, &gv)| *dv += gv);
                    }
                }
            }
            Op::RowNorm(x) => {
                let xv = self.v(*x);
                let d = xv.dim(1);
                if let Some(dx) = self.acc(grads, *x) {
                    for (r, (&norm, &gv)) in y.iter().zip(g).enumerate() {
                        if norm > T::zero() {
                            kernels::axpy(gv / norm, xv.row(r), &mut dx[r * d..(r + 1) * d]);
                        }
                    }
                }
            }
            Op::Upsample2x(x) => {
                let s = self.v(*x).shape().to_vec();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                if let Some(dx) = self.acc(grads, *x) {
                    for p in 0..planes {
                        let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dst = &mut dx[p * h * w..(p + 1) * h * w];
                        for r in 0..2 * h {
                            for c in 0..2 * w {
                                dst[(r / 2) * w + c / 2] += src[r * 2 * w + c];
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let k = self.v(*logits).dim(1);
                let scale = g[0] / T::of(targets.len() as f64);
                if let Some(dl) = self.acc(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            dl[r * k + c] += scale * (probs[r * k + c] - onehot);
                        }
                    }
                }
            }
            Op::L1Mean(a, b) => {
                let (av, bv) = (self.v(*a).data(), self.v(*b).data());
                let scale = g[0] / T::of(av.len() as f64);
                let sign = |x: T, y: T| {
                    if x > y {
                        scale
                    } else if x < y {
                        -scale
                    } else {
                        T::zero()
                    }
                };
                if let Some(da) = self.acc(grads, *a) {
                    for ((d, &x), &yv) in da.iter_mut().zip(av).zip(bv) {
                        *d += sign(x, yv);
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for ((d, &x), &yv) in db.iter_mut().zip(av).zip(bv) {
                        *d -= sign(x, yv);
                    }
                }
            }
            Op::DvBound { u, weights } => {
                let b = self.v(*u).dim(0);
                if let Some(du) = self.acc(grads, *u) {
                    let diag = g[0] / T::of(b as f64);
                    for i in 0..b {
                        for j in 0..b {
                            du[i * b + j] += if i == j { diag } else { -g[0] * weights[i * b + j] };
                        }
                    }
                }
            }
        }
    }
}
