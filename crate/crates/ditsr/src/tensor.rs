//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A `Tensor` is an immutable node in a computation graph. Operations on
//! tensors record a backward closure; calling [`Tensor::backward`] on a
//! scalar loss accumulates gradients into every reachable leaf created with
//! `requires_grad = true`. Parameter tensors persist across iterations; each
//! forward pass builds a fresh graph on top of them.
//!
//! Data is row-major f64 throughout. Broadcasting is restricted to scalar
//! operands and trailing-dimension suffixes, which keeps the backward rules
//! small and auditable. Every op asserts that its output is finite; NaN
//! propagation is treated as a bug, not a value.

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use statrs::function::erf::erf;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

/// Standard normal CDF, exact-erf form.
pub fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / SQRT_2))
}

/// GELU with the exact Gaussian CDF (not the tanh approximation).
pub fn gelu_scalar(x: f64) -> f64 {
    x * gauss_cdf(x)
}

fn gelu_grad_scalar(x: f64) -> f64 {
    gauss_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

type BackFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    needs_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward_fn: Option<BackFn>,
    backward_done: Cell<bool>,
}

/// A dense n-dimensional f64 array, optionally tracked for gradients.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

fn assert_finite(data: &[f64], op: &str) {
    for (i, v) in data.iter().enumerate() {
        assert!(
            v.is_finite(),
            "non-finite value {v} at index {i} produced by op `{op}`"
        );
    }
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        assert_finite(&data, "leaf");
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape: shape.to_vec(),
                data: RefCell::new(data),
                requires_grad,
                needs_grad: requires_grad,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward_fn: None,
                backward_done: Cell::new(false),
            }),
        }
    }

    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::new(data, shape, false)
    }

    /// Trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::new(data, shape, true)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![v], &[1])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(vec![0.0; shape.iter().product()], shape)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::from_vec(vec![1.0; shape.iter().product()], shape)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::from_vec(vec![v; shape.iter().product()], shape)
    }

    /// Standard-normal leaf drawn from an explicit RNG stream.
    pub fn randn(shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(crate::rng::normal_vec(rng, n), shape)
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        op_name: &str,
        back: BackFn,
    ) -> Tensor {
        assert_finite(&data, op_name);
        let needs = parents.iter().any(|p| p.inner.needs_grad);
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                requires_grad: false,
                needs_grad: needs,
                grad: RefCell::new(None),
                parents,
                backward_fn: if needs { Some(back) } else { None },
                backward_done: Cell::new(false),
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() requires a single-element tensor");
        self.inner.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Replace the stored values in place (optimizer updates). The tensor
    /// keeps its identity so existing module structs see the new weights.
    pub fn set_data(&self, data: Vec<f64>) {
        assert_eq!(data.len(), self.numel(), "set_data length mismatch");
        assert_finite(&data, "set_data");
        *self.inner.data.borrow_mut() = data;
    }

    /// A fresh leaf sharing no graph history with `self`.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(self.to_vec(), self.shape())
    }

    // ── elementwise ops ──────────────────────────────────────────────

    pub fn add(&self, other: &Tensor) -> Tensor {
        binary_broadcast(self, other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        binary_broadcast(self, other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        binary_broadcast(self, other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.to_vec().iter().map(|v| v * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            "scale",
            Box::new(move |go| vec![go.iter().map(|g| g * c).collect()]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.to_vec().iter().map(|v| v + c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            "add_scalar",
            Box::new(|go| vec![go.to_vec()]),
        )
    }

    pub fn gelu(&self) -> Tensor {
        let x = self.to_vec();
        let data: Vec<f64> = x.iter().map(|&v| gelu_scalar(v)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            "gelu",
            Box::new(move |go| {
                vec![go
                    .iter()
                    .zip(&x)
                    .map(|(g, &v)| g * gelu_grad_scalar(v))
                    .collect()]
            }),
        )
    }

    // ── channel-broadcast ops (axis 0) ───────────────────────────────

    /// `out[c, ..] = x[c, ..] * v[c]` for a 1-D `v` of length `shape[0]`.
    pub fn mul_channels(&self, v: &Tensor) -> Tensor {
        let c = self.shape()[0];
        assert_eq!(v.shape(), &[c], "mul_channels expects v of shape [{c}]");
        let rest = self.numel() / c;
        let xd = self.to_vec();
        let vd = v.to_vec();
        let mut out = vec![0.0; xd.len()];
        for ch in 0..c {
            for r in 0..rest {
                out[ch * rest + r] = xd[ch * rest + r] * vd[ch];
            }
        }
        let xd2 = xd.clone();
        let vd2 = vd.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), v.clone()],
            "mul_channels",
            Box::new(move |go| {
                let mut gx = vec![0.0; xd2.len()];
                let mut gv = vec![0.0; c];
                for ch in 0..c {
                    for r in 0..rest {
                        let i = ch * rest + r;
                        gx[i] = go[i] * vd2[ch];
                        gv[ch] += go[i] * xd2[i];
                    }
                }
                vec![gx, gv]
            }),
        )
    }

    /// `out[c, ..] = x[c, ..] + v[c]`.
    pub fn add_channels(&self, v: &Tensor) -> Tensor {
        let c = self.shape()[0];
        assert_eq!(v.shape(), &[c], "add_channels expects v of shape [{c}]");
        let rest = self.numel() / c;
        let xd = self.to_vec();
        let vd = v.to_vec();
        let mut out = vec![0.0; xd.len()];
        for ch in 0..c {
            for r in 0..rest {
                out[ch * rest + r] = xd[ch * rest + r] + vd[ch];
            }
        }
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), v.clone()],
            "add_channels",
            Box::new(move |go| {
                let gx = go.to_vec();
                let mut gv = vec![0.0; c];
                for ch in 0..c {
                    for r in 0..rest {
                        gv[ch] += go[ch * rest + r];
                    }
                }
                vec![gx, gv]
            }),
        )
    }

    // ── matmul ───────────────────────────────────────────────────────

    /// Matrix product. `a` may carry leading batch dimensions; `b` is either
    /// 2-D (broadcast across batches) or has identical leading dimensions.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let ash = self.shape().to_vec();
        let bsh = other.shape().to_vec();
        assert!(ash.len() >= 2, "matmul lhs must be at least 2-D");
        let m = ash[ash.len() - 2];
        let k = ash[ash.len() - 1];
        let b_bcast = bsh.len() == 2;
        if b_bcast {
            assert_eq!(bsh[0], k, "matmul inner dims: {k} vs {}", bsh[0]);
        } else {
            assert_eq!(
                &bsh[..bsh.len() - 2],
                &ash[..ash.len() - 2],
                "matmul batch dims mismatch"
            );
            assert_eq!(bsh[bsh.len() - 2], k, "matmul inner dims mismatch");
        }
        let n = bsh[bsh.len() - 1];
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let mut out_shape = ash[..ash.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);

        let ad = self.to_vec();
        let bd = other.to_vec();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let a = &ad[bi * m * k..(bi + 1) * m * k];
            let b = if b_bcast {
                &bd[..]
            } else {
                &bd[bi * k * n..(bi + 1) * k * n]
            };
            matmul_2d(a, b, m, k, n, &mut out[bi * m * n..(bi + 1) * m * n]);
        }

        let ad2 = ad.clone();
        let bd2 = bd.clone();
        Tensor::from_op(
            out_shape,
            out,
            vec![self.clone(), other.clone()],
            "matmul",
            Box::new(move |go| {
                let mut ga = vec![0.0; ad2.len()];
                let mut gb = vec![0.0; bd2.len()];
                for bi in 0..batch {
                    let g = &go[bi * m * n..(bi + 1) * m * n];
                    let a = &ad2[bi * m * k..(bi + 1) * m * k];
                    let b = if b_bcast {
                        &bd2[..]
                    } else {
                        &bd2[bi * k * n..(bi + 1) * k * n]
                    };
                    // ga = go @ b^T
                    matmul_2d_nt(g, b, m, n, k, &mut ga[bi * m * k..(bi + 1) * m * k]);
                    // gb += a^T @ go
                    let gb_slice = if b_bcast {
                        &mut gb[..]
                    } else {
                        &mut gb[bi * k * n..(bi + 1) * k * n]
                    };
                    matmul_2d_tn_acc(a, g, m, k, n, gb_slice);
                }
                vec![ga, gb]
            }),
        )
    }

    // ── normalization / attention primitives ─────────────────────────

    /// Group normalization over `[C, ...]` input: per-group zero mean and
    /// unit variance across (channels-in-group x spatial), then a per-channel
    /// affine.
    pub fn group_norm(&self, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let c = self.shape()[0];
        assert!(
            c % groups == 0,
            "group_norm: {c} channels not divisible by {groups} groups"
        );
        assert_eq!(gamma.shape(), &[c], "gamma must have shape [C]");
        assert_eq!(beta.shape(), &[c], "beta must have shape [C]");
        let spatial = self.numel() / c;
        let cpg = c / groups;
        let n = cpg * spatial;

        let xd = self.to_vec();
        let gd = gamma.to_vec();
        let bd = beta.to_vec();

        let mut xhat = vec![0.0; xd.len()];
        let mut sigmas = vec![0.0; groups];
        for g in 0..groups {
            let base = g * cpg * spatial;
            let mut mean = 0.0;
            for i in 0..n {
                mean += xd[base + i];
            }
            mean /= n as f64;
            let mut var = 0.0;
            for i in 0..n {
                let d = xd[base + i] - mean;
                var += d * d;
            }
            var /= n as f64;
            let sigma = (var + eps).sqrt();
            sigmas[g] = sigma;
            for i in 0..n {
                xhat[base + i] = (xd[base + i] - mean) / sigma;
            }
        }
        let mut out = vec![0.0; xd.len()];
        for ch in 0..c {
            for s in 0..spatial {
                let i = ch * spatial + s;
                out[i] = gd[ch] * xhat[i] + bd[ch];
            }
        }

        let xhat2 = xhat.clone();
        let gd2 = gd.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            "group_norm",
            Box::new(move |go| {
                let mut gx = vec![0.0; xhat2.len()];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for ch in 0..c {
                    for s in 0..spatial {
                        let i = ch * spatial + s;
                        ggamma[ch] += go[i] * xhat2[i];
                        gbeta[ch] += go[i];
                    }
                }
                for g in 0..groups {
                    let base = g * cpg * spatial;
                    // dxhat_i = go_i * gamma_{c(i)}
                    let mut mean_dx = 0.0;
                    let mut mean_dx_xhat = 0.0;
                    for i in 0..n {
                        let ch = g * cpg + i / spatial;
                        let dxh = go[base + i] * gd2[ch];
                        mean_dx += dxh;
                        mean_dx_xhat += dxh * xhat2[base + i];
                    }
                    mean_dx /= n as f64;
                    mean_dx_xhat /= n as f64;
                    for i in 0..n {
                        let ch = g * cpg + i / spatial;
                        let dxh = go[base + i] * gd2[ch];
                        gx[base + i] =
                            (dxh - mean_dx - xhat2[base + i] * mean_dx_xhat) / sigmas[g];
                    }
                }
                vec![gx, ggamma, gbeta]
            }),
        )
    }

    /// Overflow-safe softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Tensor {
        let sh = self.shape().to_vec();
        assert!(axis < sh.len(), "softmax axis {axis} out of range");
        let len = sh[axis];
        let stride: usize = sh[axis + 1..].iter().product();
        let outer: usize = sh[..axis].iter().product();
        let xd = self.to_vec();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for s in 0..stride {
                let at = |l: usize| (o * len + l) * stride + s;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(xd[at(l)]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (xd[at(l)] - mx).exp();
                    out[at(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[at(l)] /= sum;
                }
            }
        }
        let sm = out.clone();
        Tensor::from_op(
            sh,
            out,
            vec![self.clone()],
            "softmax",
            Box::new(move |go| {
                let mut gx = vec![0.0; sm.len()];
                for o in 0..outer {
                    for s in 0..stride {
                        let at = |l: usize| (o * len + l) * stride + s;
                        let mut dot = 0.0;
                        for l in 0..len {
                            dot += go[at(l)] * sm[at(l)];
                        }
                        for l in 0..len {
                            gx[at(l)] = sm[at(l)] * (go[at(l)] - dot);
                        }
                    }
                }
                vec![gx]
            }),
        )
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.to_vec().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            "sum",
            Box::new(move |go| vec![vec![go[0]; n]]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.to_vec().iter().sum::<f64>() / n as f64;
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            "mean",
            Box::new(move |go| vec![vec![go[0] / n as f64; n]]),
        )
    }

    // ── shape / data movement ────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.numel(), "reshape numel mismatch");
        Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            "reshape",
            Box::new(|go| vec![go.to_vec()]),
        )
    }

    /// Generic gather: `out[i] = x[idx[i]]`. Backward scatter-adds, so the
    /// same index may appear more than once. This is the substrate for
    /// window fold/unfold, permutes, cyclic shifts and slicing.
    pub fn index_map(&self, out_shape: &[usize], idx: Rc<Vec<usize>>) -> Tensor {
        let out_numel: usize = out_shape.iter().product();
        assert_eq!(idx.len(), out_numel, "index_map length mismatch");
        let xd = self.to_vec();
        let in_numel = xd.len();
        let mut out = vec![0.0; out_numel];
        for (i, &src) in idx.iter().enumerate() {
            debug_assert!(src < in_numel);
            out[i] = xd[src];
        }
        let idx2 = idx.clone();
        Tensor::from_op(
            out_shape.to_vec(),
            out,
            vec![self.clone()],
            "index_map",
            Box::new(move |go| {
                let mut gx = vec![0.0; in_numel];
                for (i, &src) in idx2.iter().enumerate() {
                    gx[src] += go[i];
                }
                vec![gx]
            }),
        )
    }

    /// Axis permutation (transpose generalization).
    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let sh = self.shape();
        assert_eq!(axes.len(), sh.len(), "permute rank mismatch");
        let out_shape: Vec<usize> = axes.iter().map(|&a| sh[a]).collect();
        let in_strides = row_major_strides(sh);
        let out_numel: usize = out_shape.iter().product();
        let mut idx = Vec::with_capacity(out_numel);
        let mut coord = vec![0usize; out_shape.len()];
        for _ in 0..out_numel {
            let mut src = 0;
            for (d, &c) in coord.iter().enumerate() {
                src += c * in_strides[axes[d]];
            }
            idx.push(src);
            // row-major increment
            for d in (0..coord.len()).rev() {
                coord[d] += 1;
                if coord[d] < out_shape[d] {
                    break;
                }
                coord[d] = 0;
            }
        }
        self.index_map(&out_shape, Rc::new(idx))
    }

    /// Contiguous slice along axis 0.
    pub fn narrow0(&self, start: usize, len: usize) -> Tensor {
        let sh = self.shape();
        assert!(start + len <= sh[0], "narrow0 out of range");
        let rest: usize = sh[1..].iter().product();
        let mut out_shape = sh.to_vec();
        out_shape[0] = len;
        let idx: Vec<usize> = (start * rest..(start + len) * rest).collect();
        self.index_map(&out_shape, Rc::new(idx))
    }

    /// Concatenation along axis 0 (trailing dims must match).
    pub fn concat0(&self, other: &Tensor) -> Tensor {
        let (a, b) = (self.shape(), other.shape());
        assert_eq!(a[1..], b[1..], "concat0 trailing dims mismatch");
        let mut out_shape = a.to_vec();
        out_shape[0] = a[0] + b[0];
        let mut data = self.to_vec();
        data.extend_from_slice(&other.to_vec());
        let na = self.numel();
        let nb = other.numel();
        Tensor::from_op(
            out_shape,
            data,
            vec![self.clone(), other.clone()],
            "concat0",
            Box::new(move |go| vec![go[..na].to_vec(), go[na..na + nb].to_vec()]),
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into the
    /// `grad` buffers of all reachable `requires_grad` leaves. Running
    /// backward twice on the same loss node is an error.
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward requires a scalar loss");
        assert!(
            !self.inner.backward_done.get(),
            "backward already ran on this graph; rebuild the graph before calling again"
        );
        self.inner.backward_done.set(true);

        // Post-order DFS for a topological order.
        let mut topo: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((node, ci)) = stack.pop() {
            if ci < node.inner.parents.len() {
                let parent = node.inner.parents[ci].clone();
                stack.push((node, ci + 1));
                if parent.inner.needs_grad && visited.insert(parent.inner.id) {
                    stack.push((parent, 0));
                }
            } else {
                topo.push(node);
            }
        }

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.inner.id, vec![1.0]);
        for node in topo.iter().rev() {
            let Some(g) = grads.get(&node.inner.id).cloned() else {
                continue;
            };
            if let Some(bf) = &node.inner.backward_fn {
                let pgrads = bf(&g);
                assert_eq!(pgrads.len(), node.inner.parents.len());
                for (p, pg) in node.inner.parents.iter().zip(pgrads) {
                    if !p.inner.needs_grad {
                        continue;
                    }
                    grads
                        .entry(p.inner.id)
                        .and_modify(|acc| {
                            for (a, v) in acc.iter_mut().zip(&pg) {
                                *a += v;
                            }
                        })
                        .or_insert(pg);
                }
            }
            if node.inner.requires_grad {
                let mut slot = node.inner.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    None => *slot = Some(g),
                }
            }
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

// ── raw matmul kernels ──────────────────────────────────────────────

fn matmul_2d(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// `out = a @ b^T` for a[m,n], b[k,n] -> out[m,k].
fn matmul_2d_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for p in 0..n {
                s += arow[p] * brow[p];
            }
            out[i * k + j] = s;
        }
    }
}

/// `out += a^T @ g` for a[m,k], g[m,n] -> out[k,n].
fn matmul_2d_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let grow = &g[i * n..(i + 1) * n];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * grow[j];
            }
        }
    }
}

// ── broadcast machinery ─────────────────────────────────────────────

/// Applies an elementwise binary op with scalar or trailing-dim broadcast.
/// `d_da`/`d_db` give the local partials as functions of the operand values.
fn binary_broadcast(
    a: &Tensor,
    b: &Tensor,
    name: &str,
    f: fn(f64, f64) -> f64,
    d_da: fn(f64, f64) -> f64,
    d_db: fn(f64, f64) -> f64,
) -> Tensor {
    let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
    let (big, small, b_is_small) = if ash == bsh {
        (a, b, true)
    } else if b.numel() == 1 || suffix_of(&bsh, &ash) {
        (a, b, true)
    } else if a.numel() == 1 || suffix_of(&ash, &bsh) {
        (b, a, false)
    } else {
        panic!("{name}: shapes {ash:?} and {bsh:?} are not broadcast-compatible (only scalar and trailing-dim broadcast are supported)");
    };
    let bn = big.numel();
    let sn = small.numel();
    let bigd = big.to_vec();
    let smalld = small.to_vec();
    let out_shape = big.shape().to_vec();
    let mut out = vec![0.0; bn];
    for i in 0..bn {
        let (av, bv) = if b_is_small {
            (bigd[i], smalld[i % sn])
        } else {
            (smalld[i % sn], bigd[i])
        };
        out[i] = f(av, bv);
    }
    let bigd2 = bigd.clone();
    let smalld2 = smalld.clone();
    Tensor::from_op(
        out_shape,
        out,
        vec![a.clone(), b.clone()],
        name,
        Box::new(move |go| {
            let mut g_big = vec![0.0; bn];
            let mut g_small = vec![0.0; sn];
            for i in 0..bn {
                let (av, bv) = if b_is_small {
                    (bigd2[i], smalld2[i % sn])
                } else {
                    (smalld2[i % sn], bigd2[i])
                };
                if b_is_small {
                    g_big[i] = go[i] * d_da(av, bv);
                    g_small[i % sn] += go[i] * d_db(av, bv);
                } else {
                    g_small[i % sn] += go[i] * d_da(av, bv);
                    g_big[i] = go[i] * d_db(av, bv);
                }
            }
            if b_is_small {
                vec![g_big, g_small]
            } else {
                vec![g_small, g_big]
            }
        }),
    )
}

fn suffix_of(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

// ── finite-difference oracle ────────────────────────────────────────

/// Central-difference gradient of a scalar-valued function. Independent of
/// the autodiff path: only calls `f` forward.
pub fn finite_diff_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Vec<f64> {
    let base = x.to_vec();
    let shape = x.shape().to_vec();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = f(&Tensor::from_vec(plus, &shape));
        let fm = f(&Tensor::from_vec(minus, &shape));
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t1(data: &[f64]) -> Tensor {
        Tensor::from_vec(data.to_vec(), &[data.len()])
    }

    #[test]
    fn add_componentwise() {
        let c = t1(&[1.0, 2.0]).add(&t1(&[3.0, 4.0]));
        assert_eq!(c.to_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn gelu_at_zero_is_zero() {
        assert_eq!(gelu_scalar(0.0), 0.0);
    }

    #[test]
    fn gelu_matches_quadrature_cdf() {
        // Independent oracle: Phi(2) via Simpson quadrature of the normal pdf.
        let phi = |x: f64| INV_SQRT_2PI * (-0.5 * x * x).exp();
        let (a, b, n) = (-12.0f64, 2.0f64, 40_000usize);
        let h = (b - a) / n as f64;
        let mut s = phi(a) + phi(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * phi(a + i as f64 * h);
        }
        let cdf2 = s * h / 3.0;
        let expected = 2.0 * cdf2;
        assert!(
            (gelu_scalar(2.0) - expected).abs() < 1e-9,
            "gelu(2) = {}, quadrature oracle = {}",
            gelu_scalar(2.0),
            expected
        );
    }

    #[test]
    fn matmul_identity_and_hand_oracle() {
        let eye = Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]);
        let a = Tensor::from_vec((1..=9).map(|v| v as f64).collect(), &[3, 3]);
        assert_eq!(eye.matmul(&a).to_vec(), a.to_vec());

        let m = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let v = Tensor::from_vec(vec![5.0, 6.0], &[2, 1]);
        assert_eq!(m.matmul(&v).to_vec(), vec![17.0, 39.0]);

        let z = Tensor::zeros(&[3, 3]);
        assert_eq!(z.matmul(&a).to_vec(), vec![0.0; 9]);
    }

    #[test]
    #[should_panic(expected = "inner dims")]
    fn matmul_inner_dim_mismatch_panics() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let _ = a.matmul(&b);
    }

    #[test]
    fn softmax_examples() {
        let s = t1(&[0.0, 0.0]).softmax(0);
        assert_eq!(s.to_vec(), vec![0.5, 0.5]);
        let s = t1(&[1000.0, 1000.0]).softmax(0);
        assert_eq!(s.to_vec(), vec![0.5, 0.5]);
        let s = t1(&[0.0, 3.0f64.ln()]).softmax(0);
        let v = s.to_vec();
        assert!((v[0] - 0.25).abs() < 1e-12 && (v[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_and_row_sums() {
        let mut rng = crate::rng::seeded(7);
        let x = Tensor::randn(&[4, 6], &mut rng);
        let shifted = x.add_scalar(13.7);
        let (a, b) = (x.softmax(1).to_vec(), shifted.softmax(1).to_vec());
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
        for row in a.chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn group_norm_statistics() {
        let mut rng = crate::rng::seeded(3);
        let x = Tensor::randn(&[8, 4, 4], &mut rng);
        let gamma = Tensor::ones(&[8]);
        let beta = Tensor::zeros(&[8]);
        let y = x.group_norm(4, &gamma, &beta, 1e-6).to_vec();
        let per_group = 2 * 16;
        for g in 0..4 {
            let chunk = &y[g * per_group..(g + 1) * per_group];
            let mean = chunk.iter().sum::<f64>() / per_group as f64;
            let var =
                chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per_group as f64;
            assert!(mean.abs() < 1e-10, "group mean {mean}");
            // eps = 1e-6 in the denominator leaves variance just below 1
            assert!((var - 1.0).abs() < 1e-5, "group var {var}");
        }
    }

    #[test]
    fn group_norm_constant_input_and_affine() {
        let x = Tensor::full(&[4, 2, 2], 3.0);
        let y = x.group_norm(2, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-6);
        assert!(y.to_vec().iter().all(|v| v.abs() < 1e-6));
        let y = x.group_norm(2, &Tensor::zeros(&[4]), &Tensor::full(&[4], 5.0), 1e-6);
        assert!(y.to_vec().iter().all(|v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    #[should_panic(expected = "not divisible")]
    fn group_norm_indivisible_panics() {
        let x = Tensor::zeros(&[6, 2, 2]);
        let _ = x.group_norm(4, &Tensor::ones(&[6]), &Tensor::zeros(&[6]), 1e-6);
    }

    #[test]
    fn backward_sum_of_squares() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]);
        let loss = x.mul(&x).sum();
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_linear_in_weights() {
        let w = Tensor::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let x = Tensor::from_vec(vec![5.0, 7.0], &[2, 1]);
        let loss = w.matmul(&x).sum();
        loss.backward();
        // d/dW sum(Wx) = broadcast of x along rows
        assert_eq!(w.grad().unwrap(), vec![5.0, 7.0, 5.0, 7.0]);
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn backward_nonscalar_panics() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]);
        x.mul(&x).backward();
    }

    #[test]
    #[should_panic(expected = "backward already ran")]
    fn repeated_backward_panics() {
        let x = Tensor::param(vec![1.0], &[1]);
        let loss = x.mul(&x).sum();
        loss.backward();
        loss.backward();
    }

    #[test]
    fn finite_diff_examples() {
        let x = t1(&[3.0]);
        let g = finite_diff_grad(&|t| t.mul(t).sum().item(), &x, 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-8);

        let x = t1(&[0.0]);
        let g = finite_diff_grad(&|t| t.gelu().sum().item(), &x, 1e-5);
        assert!((g[0] - 0.5).abs() < 1e-6, "GELU'(0) = {}", g[0]);
    }

    #[test]
    fn backward_matches_finite_diff_on_mlp() {
        let mut rng = crate::rng::seeded(11);
        let w1 = Tensor::randn(&[5, 4], &mut rng);
        let w2 = Tensor::randn(&[1, 5], &mut rng);
        let x0 = Tensor::randn(&[4, 1], &mut rng);

        let f = |x: &Tensor| w2.matmul(&w1.matmul(x).gelu()).sum().item();
        let fd = finite_diff_grad(&f, &x0, 1e-5);

        let xp = Tensor::param(x0.to_vec(), &[4, 1]);
        let loss = w2.matmul(&w1.matmul(&xp).gelu()).sum();
        loss.backward();
        let an = xp.grad().unwrap();
        let err = crate::gradcheck::rel_err(&an, &fd);
        assert!(err < 1e-6, "2-layer MLP gradcheck rel err {err}");
    }

    #[test]
    fn broadcast_suffix_add() {
        let a = Tensor::from_vec((0..12).map(|v| v as f64).collect(), &[2, 2, 3]);
        let b = t1(&[10.0, 20.0, 30.0]);
        let c = a.add(&b);
        assert_eq!(c.to_vec()[..3], [10.0, 21.0, 32.0]);
        // gradient of the broadcast operand sums over leading dims
        let bp = Tensor::param(vec![10.0, 20.0, 30.0], &[3]);
        let loss = a.add(&bp).sum();
        loss.backward();
        assert_eq!(bp.grad().unwrap(), vec![4.0, 4.0, 4.0]);
    }

    #[test]
    #[should_panic(expected = "broadcast-compatible")]
    fn broadcast_mismatch_panics() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2]);
        let _ = a.add(&b);
    }

    #[test]
    fn determinism_same_seed_bit_identical() {
        let run = || {
            let mut rng = crate::rng::seeded(99);
            let x = Tensor::randn(&[4, 4], &mut rng);
            let w = Tensor::param(crate::rng::normal_vec(&mut rng, 16), &[4, 4]);
            let loss = w.matmul(&x).gelu().mean();
            loss.backward();
            (loss.item(), w.grad().unwrap())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    proptest! {
        #[test]
        fn prop_gradcheck_elementwise_chain(seed in 0u64..500) {
            let mut rng = crate::rng::seeded(seed);
            let n = 1 + (seed as usize % 16);
            let a = Tensor::randn(&[n], &mut rng);
            let xp = Tensor::param(crate::rng::normal_vec(&mut rng, n), &[n]);
            let forward = |x: &Tensor| x.mul(&a).gelu().add(x).mul(x).mean();
            let loss = forward(&xp);
            loss.backward();
            let an = xp.grad().unwrap();
            let fd = finite_diff_grad(&|x| forward(x).item(), &xp.detach(), 1e-5);
            let err = crate::gradcheck::rel_err(&an, &fd);
            prop_assert!(err < 1e-6, "rel err {}", err);
        }

        #[test]
        fn prop_gradcheck_softmax_matmul(seed in 0u64..200) {
            let mut rng = crate::rng::seeded(seed.wrapping_add(10_000));
            let w = Tensor::randn(&[3, 4], &mut rng);
            let xp = Tensor::param(crate::rng::normal_vec(&mut rng, 4 * 2), &[4, 2]);
            let forward = |x: &Tensor| w.matmul(x).softmax(0).mul(&w.matmul(x)).sum();
            let loss = forward(&xp);
            loss.backward();
            let an = xp.grad().unwrap();
            let fd = finite_diff_grad(&|x| forward(x).item(), &xp.detach(), 1e-5);
            prop_assert!(crate::gradcheck::rel_err(&an, &fd) < 1e-6);
        }
    }
}
