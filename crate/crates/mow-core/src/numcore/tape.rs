//! Reverse-mode autodiff over a flat op tape. Forward values are computed
//! eagerly with the kernels in [`super::ops`]; `backward` replays the tape in
//! reverse and accumulates dense gradients.

use crate::numcore::ops;
use crate::numcore::param::{GradMap, ParamStore};
use crate::numcore::tensor::Tensor;

/// Handle to a tape node.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Const,
    Param { name: String },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// `max(x, c)`; gradient passes only where `x > c`.
    MaxScalar(Var, f64),
    Relu(Var),
    Exp(Var),
    Softplus(Var),
    StopGrad,
    /// Forward emits `value` (a sample or surrogate); backward routes the
    /// gradient to `probs` unchanged.
    StraightThrough { probs: Var },
    Dropout { x: Var, mask: Tensor },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    /// Divide by the sum over the last axis.
    NormalizeSum { x: Var },
    Matmul { a: Var, b: Var },
    /// Batched `[g,m,k] @ [g,k,n]`.
    Bmm { a: Var, b: Var },
    /// Batched `[g,m,k] @ [g,n,k]^T`.
    BmmNt { a: Var, b: Var },
    AddBias { x: Var, b: Var },
    /// Repeat the whole tensor along a new leading axis.
    Tile { x: Var, reps: usize },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    ConcatLast { parts: Vec<Var> },
    /// Rows `start..start+len` along axis 0.
    SliceRows { x: Var, start: usize, len: usize },
    /// Slice along axis 1 of a rank>=2 tensor.
    SliceTime { x: Var, start: usize, len: usize },
    SumLast { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvT2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, eps: f64, mean: Vec<f64>, var: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, means: Vec<f64>, rstds: Vec<f64> },
    /// Per-element binary cross-entropy on logits against fixed targets.
    BceLogits { logits: Var, targets: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Stop-gradient handling mode; see [`Tape::freeze_capture`].
enum FreezeState {
    Live,
    Capture(Vec<Tensor>),
    Replay(Vec<Tensor>, usize),
}

impl Default for FreezeState {
    fn default() -> Self {
        FreezeState::Live
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    freeze: FreezeState,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Bind a store parameter as a leaf; gradients are collected under its name.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        let t = store.get(name).clone();
        self.push(t, Op::Param { name: name.to_string() })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.nodes[x.0].value.map(|a| a * c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.nodes[x.0].value.map(|a| a + c);
        self.push(v, Op::AddScalar(x))
    }

    pub fn max_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.nodes[x.0].value.map(|a| a.max(c));
        self.push(v, Op::MaxScalar(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(|a| a.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(f64::exp);
        self.push(v, Op::Exp(x))
    }

    /// `ln(1 + e^x)`, stable at both tails.
    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(|a| a.max(0.0) + (-a.abs()).exp().ln_1p());
        self.push(v, Op::Softplus(x))
    }

    pub fn stop_grad(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        match &mut self.freeze {
            FreezeState::Live => self.push(v, Op::StopGrad),
            FreezeState::Capture(log) => {
                log.push(v.clone());
                self.push(v, Op::StopGrad)
            }
            FreezeState::Replay(vals, cursor) => {
                let frozen = vals
                    .get(*cursor)
                    .expect("freeze replay exhausted: graph structure changed")
                    .clone();
                *cursor += 1;
                assert_eq!(frozen.shape(), v.shape(), "frozen stop-grad shape");
                self.push(frozen, Op::Const)
            }
        }
    }

    /// Record the value seen at every stop-gradient node (finite-difference
    /// base pass). Combined with [`Tape::freeze_replay`], this turns the loss
    /// into the function the analytic gradient actually differentiates: the
    /// stop-graded branches held constant at the base point.
    pub fn freeze_capture(&mut self) {
        self.freeze = FreezeState::Capture(Vec::new());
    }

    /// The values captured by `freeze_capture`, in creation order.
    pub fn take_frozen(&mut self) -> Vec<Tensor> {
        match std::mem::take(&mut self.freeze) {
            FreezeState::Capture(log) => log,
            _ => panic!("take_frozen without freeze_capture"),
        }
    }

    /// Replay previously captured stop-gradient values as constants.
    pub fn freeze_replay(&mut self, frozen: Vec<Tensor>) {
        self.freeze = FreezeState::Replay(frozen, 0);
    }

    /// Straight-through node: forward takes `value` as given, backward treats
    /// the output as if it were `probs`.
    pub fn straight_through(&mut self, probs: Var, value: Tensor) -> Var {
        assert_eq!(self.shape(probs), value.shape(), "straight-through shape");
        self.push(value, Op::StraightThrough { probs })
    }

    /// Inverted dropout with a precomputed mask (entries are 0 or 1/(1-p)).
    pub fn dropout(&mut self, x: Var, mask: Tensor) -> Var {
        let v = self.nodes[x.0].value.zip_map(&mask, |a, m| a * m);
        self.push(v, Op::Dropout { x, mask })
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let f = *self.shape(x).last().expect("softmax on scalar");
        let v = ops::softmax_rows(&self.nodes[x.0].value, f);
        self.push(v, Op::Softmax { x })
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let f = *self.shape(x).last().expect("log_softmax on scalar");
        let v = ops::log_softmax_rows(&self.nodes[x.0].value, f);
        self.push(v, Op::LogSoftmax { x })
    }

    /// Divide each row by its sum over the last axis.
    pub fn normalize_sum(&mut self, x: Var) -> Var {
        let f = *self.shape(x).last().expect("normalize_sum on scalar");
        let xv = &self.nodes[x.0].value;
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(f) {
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let v = Tensor::new(xv.shape(), out);
        self.push(v, Op::NormalizeSum { x })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = ops::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.push(v, Op::Matmul { a, b })
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.rank(), 3);
        assert_eq!(bv.rank(), 3);
        let (g, m, k) = (av.dim(0), av.dim(1), av.dim(2));
        assert_eq!(bv.dim(0), g);
        assert_eq!(bv.dim(1), k);
        let n = bv.dim(2);
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            ops::gemm(
                m,
                k,
                n,
                1.0,
                &av.data()[gi * m * k..][..m * k],
                false,
                &bv.data()[gi * k * n..][..k * n],
                false,
                0.0,
                &mut out[gi * m * n..][..m * n],
            );
        }
        self.push(Tensor::new(&[g, m, n], out), Op::Bmm { a, b })
    }

    /// Batched `a @ b^T` with `a: [g,m,k]`, `b: [g,n,k]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.rank(), 3);
        assert_eq!(bv.rank(), 3);
        let (g, m, k) = (av.dim(0), av.dim(1), av.dim(2));
        assert_eq!(bv.dim(0), g);
        assert_eq!(bv.dim(2), k);
        let n = bv.dim(1);
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            ops::gemm(
                m,
                k,
                n,
                1.0,
                &av.data()[gi * m * k..][..m * k],
                false,
                &bv.data()[gi * n * k..][..n * k],
                true,
                0.0,
                &mut out[gi * m * n..][..m * n],
            );
        }
        self.push(Tensor::new(&[g, m, n], out), Op::BmmNt { a, b })
    }

    /// Broadcast-add a bias over the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let f = self.shape(b)[0];
        assert_eq!(self.shape(b).len(), 1, "bias must be rank 1");
        assert_eq!(*self.shape(x).last().unwrap(), f, "bias length");
        let mut out = self.nodes[x.0].value.data().to_vec();
        ops::add_bias_rows(&mut out, self.nodes[b.0].value.data());
        let v = Tensor::new(self.nodes[x.0].value.shape(), out);
        self.push(v, Op::AddBias { x, b })
    }

    /// `x` repeated `reps` times along a new leading axis.
    pub fn tile(&mut self, x: Var, reps: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut shape = vec![reps];
        shape.extend_from_slice(xv.shape());
        let mut data = Vec::with_capacity(xv.numel() * reps);
        for _ in 0..reps {
            data.extend_from_slice(xv.data());
        }
        self.push(Tensor::new(&shape, data), Op::Tile { x, reps })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.nodes[x.0].value.reshape(shape);
        self.push(v, Op::Reshape { x })
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let v = permute_copy(&self.nodes[x.0].value, perm);
        self.push(v, Op::Permute { x, perm: perm.to_vec() })
    }

    /// Concatenate along the last axis; leading dims must match.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let lead: Vec<usize> = {
            let s = self.shape(parts[0]);
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut fs = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(&s[..s.len() - 1], &lead[..], "concat leading dims");
            fs.push(*s.last().unwrap());
        }
        let f_out: usize = fs.iter().sum();
        let mut out = vec![0.0; rows * f_out];
        let mut off = 0;
        for (&p, &f) in parts.iter().zip(&fs) {
            let src = self.nodes[p.0].value.data();
            for r in 0..rows {
                out[r * f_out + off..r * f_out + off + f].copy_from_slice(&src[r * f..(r + 1) * f]);
            }
            off += f;
        }
        let mut shape = lead;
        shape.push(f_out);
        self.push(Tensor::new(&shape, out), Op::ConcatLast { parts: parts.to_vec() })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let rows = xv.dim(0);
        assert!(start + len <= rows, "slice_rows out of range");
        let rowsize = xv.numel() / rows;
        let mut shape = xv.shape().to_vec();
        shape[0] = len;
        let data = xv.data()[start * rowsize..(start + len) * rowsize].to_vec();
        self.push(Tensor::new(&shape, data), Op::SliceRows { x, start, len })
    }

    /// Slice `start..start+len` along axis 1.
    pub fn slice_time(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        assert!(xv.rank() >= 2);
        let (b, t) = (xv.dim(0), xv.dim(1));
        assert!(start + len <= t, "slice_time out of range");
        let inner = xv.numel() / (b * t);
        let mut shape = xv.shape().to_vec();
        shape[1] = len;
        let mut data = Vec::with_capacity(b * len * inner);
        for bi in 0..b {
            let base = (bi * t + start) * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        self.push(Tensor::new(&shape, data), Op::SliceTime { x, start, len })
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let f = *xv.shape().last().expect("sum_last on scalar");
        let rows = xv.numel() / f;
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            data.push(xv.data()[r * f..(r + 1) * f].iter().sum());
        }
        let shape = &xv.shape()[..xv.rank() - 1];
        let shape = if shape.is_empty() { vec![1] } else { shape.to_vec() };
        self.push(Tensor::new(&shape, data), Op::SumLast { x })
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.nodes[x.0].value.sum());
        self.push(v, Op::Sum { x })
    }

    /// Mean of all elements, as a scalar node.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let v = Tensor::scalar(xv.sum() / xv.numel() as f64);
        self.push(v, Op::Mean { x })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let v = ops::conv2d_fwd(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            stride,
            pad,
        );
        self.push(v, Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let v = ops::conv_transpose2d_fwd(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            stride,
            pad,
        );
        self.push(v, Op::ConvT2d { x, w, b, stride, pad })
    }

    /// Training-mode batch norm (batch statistics). Works on `[n,f]` and
    /// `[n,c,h,w]` inputs.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (n, c, sp) = bn_layout(&self.nodes[x.0].value);
        let fwd = ops::batchnorm_fwd(
            &self.nodes[x.0].value,
            n,
            c,
            sp,
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
            eps,
        );
        self.push(
            fwd.y,
            Op::BatchNorm { x, gamma, beta, eps, mean: fwd.mean, var: fwd.var },
        )
    }

    /// Batch statistics observed by a `batchnorm` node (for running-stat updates).
    pub fn bn_stats(&self, v: Var) -> (&[f64], &[f64]) {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, .. } => (mean, var),
            _ => panic!("bn_stats on a non-batchnorm node"),
        }
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let f = *self.shape(x).last().expect("layernorm on scalar");
        let (y, means, rstds) = ops::layernorm_fwd(
            &self.nodes[x.0].value,
            f,
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
            1e-5,
        );
        self.push(y, Op::LayerNorm { x, gamma, beta, means, rstds })
    }

    /// Per-element binary cross-entropy on logits against fixed targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor) -> Var {
        let lv = &self.nodes[logits.0].value;
        assert_eq!(lv.shape(), targets.shape(), "bce shapes");
        let v = lv.zip_map(&targets, |x, t| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p());
        self.push(v, Op::BceLogits { logits, targets })
    }

    /// Reverse pass from a scalar loss; returns per-node gradients.
    fn backward_raw(&self, loss: Var) -> Vec<Option<Tensor>> {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Const | Op::Param { .. } => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, a.0, g.clone());
                    acc(&mut grads, b.0, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, a.0, g.clone());
                    acc(&mut grads, b.0, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(&self.nodes[b.0].value, |gi, bv| gi * bv);
                    let gb = g.zip_map(&self.nodes[a.0].value, |gi, av| gi * av);
                    acc(&mut grads, a.0, ga);
                    acc(&mut grads, b.0, gb);
                }
                Op::Scale(x, c) => acc(&mut grads, x.0, g.map(|v| v * c)),
                Op::AddScalar(x) => acc(&mut grads, x.0, g),
                Op::MaxScalar(x, c) => {
                    let gx = g.zip_map(&self.nodes[x.0].value, |gi, xv| if xv > *c { gi } else { 0.0 });
                    acc(&mut grads, x.0, gx);
                }
                Op::Relu(x) => {
                    let gx = g.zip_map(&self.nodes[x.0].value, |gi, xv| if xv > 0.0 { gi } else { 0.0 });
                    acc(&mut grads, x.0, gx);
                }
                Op::Exp(x) => {
                    let gx = g.zip_map(&self.nodes[id].value, |gi, y| gi * y);
                    acc(&mut grads, x.0, gx);
                }
                Op::Softplus(x) => {
                    let gx = g.zip_map(&self.nodes[x.0].value, |gi, xv| gi * sigmoid(xv));
                    acc(&mut grads, x.0, gx);
                }
                Op::StopGrad => {}
                Op::StraightThrough { probs } => acc(&mut grads, probs.0, g),
                Op::Dropout { x, mask } => {
                    let gx = g.zip_map(mask, |gi, m| gi * m);
                    acc(&mut grads, x.0, gx);
                }
                Op::Softmax { x } => {
                    let y = &self.nodes[id].value;
                    let f = *y.shape().last().unwrap();
                    let mut gx = vec![0.0; y.numel()];
                    for (r, (grow, yrow)) in g.data().chunks(f).zip(y.data().chunks(f)).enumerate() {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for i in 0..f {
                            gx[r * f + i] = yrow[i] * (grow[i] - dot);
                        }
                    }
                    acc(&mut grads, x.0, Tensor::new(y.shape(), gx));
                }
                Op::LogSoftmax { x } => {
                    let y = &self.nodes[id].value;
                    let f = *y.shape().last().unwrap();
                    let mut gx = vec![0.0; y.numel()];
                    for (r, (grow, yrow)) in g.data().chunks(f).zip(y.data().chunks(f)).enumerate() {
                        let gsum: f64 = grow.iter().sum();
                        for i in 0..f {
                            gx[r * f + i] = grow[i] - yrow[i].exp() * gsum;
                        }
                    }
                    acc(&mut grads, x.0, Tensor::new(y.shape(), gx));
                }
                Op::NormalizeSum { x } => {
                    let xv = &self.nodes[x.0].value;
                    let y = &self.nodes[id].value;
                    let f = *y.shape().last().unwrap();
                    let mut gx = vec![0.0; y.numel()];
                    for r in 0..y.numel() / f {
                        let xrow = &xv.data()[r * f..(r + 1) * f];
                        let yrow = &y.data()[r * f..(r + 1) * f];
                        let grow = &g.data()[r * f..(r + 1) * f];
                        let s: f64 = xrow.iter().sum();
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for i in 0..f {
                            gx[r * f + i] = (grow[i] - dot) / s;
                        }
                    }
                    acc(&mut grads, x.0, Tensor::new(xv.shape(), gx));
                }
                Op::Matmul { a, b } => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k) = (av.dim(0), av.dim(1));
                    let n = bv.dim(1);
                    let mut da = vec![0.0; m * k];
                    ops::gemm(m, n, k, 1.0, g.data(), false, bv.data(), true, 0.0, &mut da);
                    let mut db = vec![0.0; k * n];
                    ops::gemm(k, m, n, 1.0, av.data(), true, g.data(), false, 0.0, &mut db);
                    acc(&mut grads, a.0, Tensor::new(&[m, k], da));
                    acc(&mut grads, b.0, Tensor::new(&[k, n], db));
                }
                Op::Bmm { a, b } => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (gq, m, k) = (av.dim(0), av.dim(1), av.dim(2));
                    let n = bv.dim(2);
                    let mut da = vec![0.0; gq * m * k];
                    let mut db = vec![0.0; gq * k * n];
                    for gi in 0..gq {
                        let gslice = &g.data()[gi * m * n..][..m * n];
                        ops::gemm(
                            m, n, k, 1.0,
                            gslice, false,
                            &bv.data()[gi * k * n..][..k * n], true,
                            0.0,
                            &mut da[gi * m * k..][..m * k],
                        );
                        ops::gemm(
                            k, m, n, 1.0,
                            &av.data()[gi * m * k..][..m * k], true,
                            gslice, false,
                            0.0,
                            &mut db[gi * k * n..][..k * n],
                        );
                    }
                    acc(&mut grads, a.0, Tensor::new(av.shape(), da));
                    acc(&mut grads, b.0, Tensor::new(bv.shape(), db));
                }
                Op::BmmNt { a, b } => {
                    // y[g,m,n] = a[g,m,k] @ b[g,n,k]^T
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (gq, m, k) = (av.dim(0), av.dim(1), av.dim(2));
                    let n = bv.dim(1);
                    let mut da = vec![0.0; gq * m * k];
                    let mut db = vec![0.0; gq * n * k];
                    for gi in 0..gq {
                        let gslice = &g.data()[gi * m * n..][..m * n];
                        // da = dy @ b
                        ops::gemm(
                            m, n, k, 1.0,
                            gslice, false,
                            &bv.data()[gi * n * k..][..n * k], false,
                            0.0,
                            &mut da[gi * m * k..][..m * k],
                        );
                        // db = dy^T @ a
                        ops::gemm(
                            n, m, k, 1.0,
                            gslice, true,
                            &av.data()[gi * m * k..][..m * k], false,
                            0.0,
                            &mut db[gi * n * k..][..n * k],
                        );
                    }
                    acc(&mut grads, a.0, Tensor::new(av.shape(), da));
                    acc(&mut grads, b.0, Tensor::new(bv.shape(), db));
                }
                Op::AddBias { x, b } => {
                    let f = self.nodes[b.0].value.numel();
                    let mut db = vec![0.0; f];
                    for row in g.data().chunks(f) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(&mut grads, b.0, Tensor::new(&[f], db));
                    acc(&mut grads, x.0, g);
                }
                Op::Tile { x, reps } => {
                    let inner = self.nodes[x.0].value.numel();
                    let mut gx = vec![0.0; inner];
                    for r in 0..*reps {
                        for (d, v) in gx.iter_mut().zip(&g.data()[r * inner..(r + 1) * inner]) {
                            *d += v;
                        }
                    }
                    acc(&mut grads, x.0, Tensor::new(self.nodes[x.0].value.shape(), gx));
                }
                Op::Reshape { x } => {
                    acc(&mut grads, x.0, g.reshape(self.nodes[x.0].value.shape()));
                }
                Op::Permute { x, perm } => {
                    let inv = invert_perm(perm);
                    acc(&mut grads, x.0, permute_copy(&g, &inv));
                }
                Op::ConcatLast { parts } => {
                    let f_out = *self.nodes[id].value.shape().last().unwrap();
                    let rows = self.nodes[id].value.numel() / f_out;
                    let mut off = 0;
                    for &p in parts {
                        let f = *self.nodes[p.0].value.shape().last().unwrap();
                        let mut gp = vec![0.0; rows * f];
                        for r in 0..rows {
                            gp[r * f..(r + 1) * f]
                                .copy_from_slice(&g.data()[r * f_out + off..r * f_out + off + f]);
                        }
                        acc(&mut grads, p.0, Tensor::new(self.nodes[p.0].value.shape(), gp));
                        off += f;
                    }
                }
                Op::SliceRows { x, start, len } => {
                    let xv = &self.nodes[x.0].value;
                    let rowsize = xv.numel() / xv.dim(0);
                    let mut gx = vec![0.0; xv.numel()];
                    gx[start * rowsize..(start + len) * rowsize].copy_from_slice(g.data());
                    acc(&mut grads, x.0, Tensor::new(xv.shape(), gx));
                }
                Op::SliceTime { x, start, len } => {
                    let xv = &self.nodes[x.0].value;
                    let (b, t) = (xv.dim(0), xv.dim(1));
                    let inner = xv.numel() / (b * t);
                    let mut gx = vec![0.0; xv.numel()];
                    for bi in 0..b {
                        let dst = (bi * t + start) * inner;
                        let src = bi * len * inner;
                        gx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    acc(&mut grads, x.0, Tensor::new(xv.shape(), gx));
                }
                Op::SumLast { x } => {
                    let xv = &self.nodes[x.0].value;
                    let f = *xv.shape().last().unwrap();
                    let mut gx = vec![0.0; xv.numel()];
                    for (r, chunk) in gx.chunks_mut(f).enumerate() {
                        chunk.fill(g.data()[r]);
                    }
                    acc(&mut grads, x.0, Tensor::new(xv.shape(), gx));
                }
                Op::Sum { x } => {
                    let xv = &self.nodes[x.0].value;
                    acc(&mut grads, x.0, Tensor::full(xv.shape(), g.item()));
                }
                Op::Mean { x } => {
                    let xv = &self.nodes[x.0].value;
                    acc(&mut grads, x.0, Tensor::full(xv.shape(), g.item() / xv.numel() as f64));
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) =
                        ops::conv2d_bwd(&g, &self.nodes[x.0].value, &self.nodes[w.0].value, *stride, *pad);
                    acc(&mut grads, x.0, dx);
                    acc(&mut grads, w.0, dw);
                    acc(&mut grads, b.0, db);
                }
                Op::ConvT2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = ops::conv_transpose2d_bwd(
                        &g,
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        *stride,
                        *pad,
                    );
                    acc(&mut grads, x.0, dx);
                    acc(&mut grads, w.0, dw);
                    acc(&mut grads, b.0, db);
                }
                Op::BatchNorm { x, gamma, beta, eps, mean, var } => {
                    let xv = &self.nodes[x.0].value;
                    let (n, c, sp) = bn_layout(xv);
                    let (dx, dgamma, dbeta) = ops::batchnorm_bwd(
                        &g,
                        xv,
                        n,
                        c,
                        sp,
                        self.nodes[gamma.0].value.data(),
                        mean,
                        var,
                        *eps,
                    );
                    acc(&mut grads, x.0, dx);
                    acc(&mut grads, gamma.0, dgamma);
                    acc(&mut grads, beta.0, dbeta);
                }
                Op::LayerNorm { x, gamma, beta, means, rstds } => {
                    let f = *self.nodes[x.0].value.shape().last().unwrap();
                    let (dx, dgamma, dbeta) = ops::layernorm_bwd(
                        &g,
                        &self.nodes[x.0].value,
                        f,
                        self.nodes[gamma.0].value.data(),
                        means,
                        rstds,
                    );
                    acc(&mut grads, x.0, dx);
                    acc(&mut grads, gamma.0, dgamma);
                    acc(&mut grads, beta.0, dbeta);
                }
                Op::BceLogits { logits, targets } => {
                    let lv = &self.nodes[logits.0].value;
                    let mut gx = vec![0.0; lv.numel()];
                    for i in 0..gx.len() {
                        gx[i] = g.data()[i] * (sigmoid(lv.data()[i]) - targets.data()[i]);
                    }
                    acc(&mut grads, logits.0, Tensor::new(lv.shape(), gx));
                }
            }
        }
        grads
    }

    /// Gradient of a scalar loss node with respect to one tape node.
    pub fn grad_of(&self, loss: Var, wrt: Var) -> Option<Tensor> {
        let mut grads = self.backward_raw(loss);
        grads[wrt.0].take()
    }

    /// Gradients of a scalar loss for every bound parameter, keyed by name.
    pub fn grads(&self, loss: Var) -> GradMap {
        let grads = self.backward_raw(loss);
        let mut map = GradMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param { name } = &node.op {
                if let Some(g) = &grads[id] {
                    map.accumulate(name, g.clone());
                }
            }
        }
        map
    }
}

fn bn_layout(x: &Tensor) -> (usize, usize, usize) {
    match x.rank() {
        2 => (x.dim(0), x.dim(1), 1),
        4 => (x.dim(0), x.dim(1), x.dim(2) * x.dim(3)),
        r => panic!("batchnorm expects rank 2 or 4, got {r}"),
    }
}

fn acc(grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
    match &mut grads[id] {
        Some(g) => {
            assert_eq!(g.shape(), delta.shape(), "gradient accumulation shape");
            let gd = g.data_mut();
            for (a, b) in gd.iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        None => grads[id] = Some(delta),
    }
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute_copy(x: &Tensor, perm: &[usize]) -> Tensor {
    let ish = x.shape();
    assert_eq!(perm.len(), ish.len(), "permute rank");
    let osh: Vec<usize> = perm.iter().map(|&p| ish[p]).collect();
    let rank = ish.len();
    let mut istrides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        istrides[i] = istrides[i + 1] * ish[i + 1];
    }
    // stride in the input for each output axis
    let strides_out: Vec<usize> = perm.iter().map(|&p| istrides[p]).collect();
    let mut out = vec![0.0; x.numel()];
    let mut idx = vec![0usize; rank];
    let src = x.data();
    for o in out.iter_mut() {
        let mut off = 0;
        for (i, &s) in idx.iter().zip(&strides_out) {
            off += i * s;
        }
        *o = src[off];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < osh[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(&osh, out)
}
