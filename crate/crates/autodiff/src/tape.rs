//! The recording tape and every differentiable operation it supports.
//!
//! Nodes are appended in evaluation order, so the node list is always a valid
//! topological order and backward is a single reverse sweep.

use crate::error::{AutodiffError, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Real, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Normalization statistics source for [`Tape::batch_norm`].
#[derive(Clone, Debug)]
pub enum BatchNormMode<'a> {
    /// Per-batch statistics; the batch must hold at least two samples.
    Train,
    /// Fixed running statistics.
    Eval {
        running_mean: &'a [f64],
        running_var: &'a [f64],
    },
}

/// Per-channel statistics observed by a training-mode batch-norm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n − 1) variance.
    pub var: Vec<f64>,
}

enum Op<T> {
    Leaf,
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: (usize, usize, usize),
    },
    Relu(Var),
    Abs(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<f64>,
        stats: Option<BatchStats>,
    },
    GlobalAvgPool {
        x: Var,
        spatial: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Trilinear {
        x: Var,
        planes: usize,
        input: [usize; 3],
        output: [usize; 3],
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    PairwiseNegL2 {
        x: Var,
        dist: Vec<f64>,
    },
    PairwiseCosine {
        x: Var,
        norms: Vec<f64>,
    },
    SubsetLogSumExp {
        x: Var,
        subsets: Vec<(usize, Vec<usize>)>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv3d { .. } => "conv3d",
            Op::Dense { .. } => "dense",
            Op::Relu(_) => "relu",
            Op::Abs(_) => "abs",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Reshape(_) => "reshape",
            Op::BatchNorm { .. } => "batch_norm",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::MaxPool { .. } => "max_pool3d",
            Op::Trilinear { .. } => "trilinear",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::PairwiseNegL2 { .. } => "pairwise_neg_l2",
            Op::PairwiseCosine { .. } => "pairwise_cosine",
            Op::SubsetLogSumExp { .. } => "subset_logsumexp",
            Op::Gather { .. } => "gather",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv3d { x, w, b, .. } | Op::Dense { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu(x)
            | Op::Abs(x)
            | Op::Scale(x, _)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::GlobalAvgPool { x, .. }
            | Op::MaxPool { x, .. }
            | Op::Trilinear { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::PairwiseNegL2 { x, .. }
            | Op::PairwiseCosine { x, .. }
            | Op::SubsetLogSumExp { x, .. }
            | Op::Gather { x, .. } => vec![*x],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const NORM_EPS: f64 = 1e-12;

/// A single-threaded reverse-mode recording.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Statistics seen by a training-mode batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<&BatchStats> {
        match &self.nodes.get(v.0)?.op {
            Op::BatchNorm { stats, .. } => stats.as_ref(),
            _ => None,
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_var(&self, v: Var, op: &'static str) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(AutodiffError::InvalidArgument {
                op,
                detail: format!("node {} is not on this tape", v.0),
            });
        }
        Ok(())
    }

    /// Cubic-kernel 3D convolution: `x [N, C, D, H, W]`, `w [O, C, K, K, K]`, `b [O]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "conv3d";
        self.check_var(x, OP)?;
        self.check_var(w, OP)?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 || xs[1] != ws[1] || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(mismatch(OP, format!("input {xs:?} incompatible with kernel {ws:?}")));
        }
        if let Some(b) = b {
            self.check_var(b, OP)?;
            if self.shape(b) != [ws[0]] {
                return Err(mismatch(OP, format!("bias {:?} for {} output channels", self.shape(b), ws[0])));
            }
        }
        let k = ws[2];
        let mut out_dims = [0; 3];
        for a in 0..3 {
            out_dims[a] = ConvGeometry::out_extent(xs[2 + a], k, stride, pad).ok_or_else(|| {
                mismatch(OP, format!("input {xs:?} too small for kernel {k} stride {stride} pad {pad}"))
            })?;
        }
        let geom = ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            out_channels: ws[0],
            in_dims: [xs[2], xs[3], xs[4]],
            kernel: k,
            stride,
            pad,
            out_dims,
        };
        let data = kernels::conv3d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(vec![xs[0], ws[0], out_dims[0], out_dims[1], out_dims[2]], data)?;
        self.push(value, Op::Conv3d { x, w, b, geom })
    }

    /// `x [N, K] · w [K, M] + b [M]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "dense";
        self.check_var(x, OP)?;
        self.check_var(w, OP)?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(mismatch(OP, format!("input {xs:?} incompatible with weight {ws:?}")));
        }
        if let Some(b) = b {
            self.check_var(b, OP)?;
            if self.shape(b) != [ws[1]] {
                return Err(mismatch(OP, format!("bias {:?} for {} outputs", self.shape(b), ws[1])));
            }
        }
        let (n, k, m) = (xs[0], xs[1], ws[1]);
        let data = kernels::dense_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            n,
            k,
            m,
        );
        self.push(Tensor::new(vec![n, m], data)?, Op::Dense { x, w, b, dims: (n, k, m) })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_var(x, "relu")?;
        let v = self.value(x).map(|a| if a > T::zero() { a } else { T::zero() });
        self.push(v, Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.check_var(x, "abs")?;
        let v = self.value(x).map(|a| a.abs());
        self.push(v, Op::Abs(x))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.check_var(a, op)?;
        self.check_var(b, op)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(op, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |p, q| p + q)?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |p, q| p - q)?;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |p, q| p * q)?;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.check_var(x, "scale")?;
        let f = T::from_f64_lossy(factor);
        let v = self.value(x).map(|a| a * f);
        self.push(v, Op::Scale(x, factor))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.check_var(x, "reshape")?;
        let v = self.value(x).clone().reshape(shape)?;
        self.push(v, Op::Reshape(x))
    }

    /// Per-channel batch normalization over `[N, C, ...]`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BatchNormMode<'_>, eps: f64) -> Result<Var> {
        const OP: &str = "batch_norm";
        for v in [x, gamma, beta] {
            self.check_var(v, OP)?;
        }
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(mismatch(
                OP,
                format!("input {xs:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let (n, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        let count = (n * spatial) as f64;
        let xd = self.value(x).data();
        let channel_iter = |ch: usize| {
            (0..n).flat_map(move |s| {
                let start = (s * c + ch) * spatial;
                start..start + spatial
            })
        };
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                if n < 2 {
                    return Err(AutodiffError::BatchTooSmall { batch: n });
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let m = channel_iter(ch).map(|i| xd[i].as_f64()).sum::<f64>() / count;
                    let v = channel_iter(ch)
                        .map(|i| {
                            let d = xd[i].as_f64() - m;
                            d * d
                        })
                        .sum::<f64>()
                        / count;
                    mean[ch] = m;
                    var[ch] = v;
                }
                let unbiased = var.iter().map(|v| v * count / (count - 1.0)).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(mismatch(
                        OP,
                        format!("running stats of length {} for {c} channels", running_mean.len()),
                    ));
                }
                (running_mean.to_vec(), running_var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let start = (s * c + ch) * spatial;
                let (gm, bt) = (g[ch].as_f64(), b[ch].as_f64());
                for i in start..start + spatial {
                    let h = (xd[i].as_f64() - mean[ch]) * inv_std[ch];
                    xhat[i] = T::from_f64_lossy(h);
                    out[i] = T::from_f64_lossy(gm * h + bt);
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                stats,
            },
        )
    }

    /// `[N, C, ...] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        const OP: &str = "global_avg_pool";
        self.check_var(x, OP)?;
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(mismatch(OP, format!("need [N, C, spatial...], got {xs:?}")));
        }
        let spatial: usize = xs[2..].iter().product();
        let data = self
            .value(x)
            .data()
            .chunks(spatial)
            .map(|ch| T::from_f64_lossy(ch.iter().map(|v| v.as_f64()).sum::<f64>() / spatial as f64))
            .collect();
        let value = Tensor::new(vec![xs[0], xs[1]], data)?;
        self.push(value, Op::GlobalAvgPool { x, spatial })
    }

    /// Cubic max pooling without padding; ties resolve to the first maximum in scan order.
    pub fn max_pool3d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        const OP: &str = "max_pool3d";
        self.check_var(x, OP)?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(mismatch(OP, format!("need [N, C, D, H, W], got {xs:?}")));
        }
        let mut od = [0; 3];
        for a in 0..3 {
            od[a] = ConvGeometry::out_extent(xs[2 + a], kernel, stride, 0)
                .filter(|_| kernel > 0)
                .ok_or_else(|| mismatch(OP, format!("input {xs:?} too small for kernel {kernel}")))?;
        }
        let planes = xs[0] * xs[1];
        let in_vol = xs[2] * xs[3] * xs[4];
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(planes * od.iter().product::<usize>());
        let mut argmax = Vec::with_capacity(out.capacity());
        for p in 0..planes {
            let base = p * in_vol;
            for z in 0..od[0] {
                for y in 0..od[1] {
                    for w in 0..od[2] {
                        let mut best = None::<(usize, T)>;
                        for kz in 0..kernel {
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    let at = base
                                        + ((z * stride + kz) * xs[3] + y * stride + ky) * xs[4]
                                        + w * stride
                                        + kx;
                                    let v = xd[at];
                                    if best.is_none_or(|(_, b)| v > b) {
                                        best = Some((at, v));
                                    }
                                }
                            }
                        }
                        let (at, v) = best.expect("kernel is non-empty");
                        out.push(v);
                        argmax.push(at);
                    }
                }
            }
        }
        let value = Tensor::new(vec![xs[0], xs[1], od[0], od[1], od[2]], out)?;
        self.push(value, Op::MaxPool { x, argmax })
    }

    /// Trilinear resize of `[N, C, D, H, W]` to new spatial dims (align-corners false).
    pub fn trilinear(&mut self, x: Var, output: [usize; 3]) -> Result<Var> {
        const OP: &str = "trilinear";
        self.check_var(x, OP)?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 || output.contains(&0) {
            return Err(mismatch(OP, format!("input {xs:?}, target {output:?}")));
        }
        let planes = xs[0] * xs[1];
        let input = [xs[2], xs[3], xs[4]];
        let data = kernels::trilinear_forward(self.value(x).data(), planes, input, output);
        let value = Tensor::new(vec![xs[0], xs[1], output[0], output[1], output[2]], data)?;
        self.push(
            value,
            Op::Trilinear {
                x,
                planes,
                input,
                output,
            },
        )
    }

    /// Row-wise unit-norm projection of `[N, D]`.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        const OP: &str = "l2_normalize";
        self.check_var(x, OP)?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(mismatch(OP, format!("need [N, D], got {xs:?}")));
        }
        let d = xs[1];
        let xd = self.value(x).data();
        let mut norms = Vec::with_capacity(xs[0]);
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(d) {
            let norm = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            let denom = norm.max(NORM_EPS);
            out.extend(row.iter().map(|v| T::from_f64_lossy(v.as_f64() / denom)));
            norms.push(norm);
        }
        let value = Tensor::new(xs, out)?;
        self.push(value, Op::L2Normalize { x, norms })
    }

    /// Sum of all entries, accumulated in f64.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_var(x, "sum")?;
        let s = self.value(x).sum_f64();
        self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::Sum(x))
    }

    /// Mean of all entries, accumulated in f64.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check_var(x, "mean")?;
        let t = self.value(x);
        let s = t.sum_f64() / t.len() as f64;
        self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::Mean(x))
    }

    fn rows(&self, x: Var, op: &'static str) -> Result<(usize, usize)> {
        self.check_var(x, op)?;
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(mismatch(op, format!("need [M, D], got {xs:?}")));
        }
        Ok((xs[0], xs[1]))
    }

    /// `S[i, j] = −‖x_i − x_j‖₂` for rows of `[M, D]`.
    pub fn pairwise_neg_l2(&mut self, x: Var) -> Result<Var> {
        let (m, d) = self.rows(x, "pairwise_neg_l2")?;
        let xd = self.value(x).data();
        let mut dist = vec![0.0; m * m];
        for i in 0..m {
            for j in (i + 1)..m {
                let s: f64 = (0..d)
                    .map(|c| {
                        let diff = xd[i * d + c].as_f64() - xd[j * d + c].as_f64();
                        diff * diff
                    })
                    .sum();
                dist[i * m + j] = s.sqrt();
                dist[j * m + i] = s.sqrt();
            }
        }
        let value = Tensor::new(vec![m, m], dist.iter().map(|&v| T::from_f64_lossy(-v)).collect())?;
        self.push(value, Op::PairwiseNegL2 { x, dist })
    }

    /// `S[i, j] = cos(x_i, x_j)` for rows of `[M, D]`.
    pub fn pairwise_cosine(&mut self, x: Var) -> Result<Var> {
        let (m, d) = self.rows(x, "pairwise_cosine")?;
        let xd = self.value(x).data();
        let norms: Vec<f64> = xd
            .chunks(d)
            .map(|r| r.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
            .collect();
        let mut sim = vec![T::zero(); m * m];
        for i in 0..m {
            for j in 0..m {
                let dot: f64 = (0..d).map(|c| xd[i * d + c].as_f64() * xd[j * d + c].as_f64()).sum();
                sim[i * m + j] = T::from_f64_lossy(dot / (norms[i].max(NORM_EPS) * norms[j].max(NORM_EPS)));
            }
        }
        let value = Tensor::new(vec![m, m], sim)?;
        self.push(value, Op::PairwiseCosine { x, norms })
    }

    /// For each `(row, cols)` entry, `log Σ_{c ∈ cols} exp(x[row, c])` on a 2-D input.
    pub fn subset_logsumexp(&mut self, x: Var, subsets: Vec<(usize, Vec<usize>)>) -> Result<Var> {
        const OP: &str = "subset_logsumexp";
        let (r, w) = self.rows(x, OP)?;
        if subsets.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: OP,
                detail: "no subsets".into(),
            });
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(subsets.len());
        for (row, cols) in &subsets {
            if *row >= r || cols.is_empty() || cols.iter().any(|&c| c >= w) {
                return Err(AutodiffError::InvalidArgument {
                    op: OP,
                    detail: format!("subset (row {row}, {} cols) invalid for [{r}, {w}]", cols.len()),
                });
            }
            let vals = cols.iter().map(|&c| xd[row * w + c].as_f64());
            let mx = vals.clone().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = vals.map(|v| (v - mx).exp()).sum();
            out.push(T::from_f64_lossy(mx + s.ln()));
        }
        let value = Tensor::new(vec![subsets.len()], out)?;
        self.push(value, Op::SubsetLogSumExp { x, subsets })
    }

    /// Picks flat entries of `x` into a 1-D tensor.
    pub fn gather(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        const OP: &str = "gather";
        self.check_var(x, OP)?;
        let xd = self.value(x).data();
        if index.is_empty() || index.iter().any(|&i| i >= xd.len()) {
            return Err(AutodiffError::InvalidArgument {
                op: OP,
                detail: format!("{} indices into {} values", index.len(), xd.len()),
            });
        }
        let out = index.iter().map(|&i| xd[i]).collect();
        let value = Tensor::new(vec![index.len()], out)?;
        self.push(value, Op::Gather { x, index })
    }

    /// Reverse sweep from `output` seeded with `seed`.
    pub fn backward(&self, output: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        if output.0 >= self.nodes.len() {
            return Err(AutodiffError::BackwardBeforeForward { node: output.0 });
        }
        let out_shape = self.shape(output);
        if seed.shape() != out_shape {
            return Err(AutodiffError::SeedShape {
                seed: seed.shape().to_vec(),
                output: out_shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed.clone());
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], to: Var, g: Tensor<T>) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => acc.accumulate(&g),
            slot => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), data).expect("gradient matches its node's shape")
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, geom } => {
                let need_dx = self.nodes[x.0].requires_grad;
                let cg = kernels::conv3d_backward(self.value(*x).data(), self.value(*w).data(), gd, geom, need_dx);
                if let Some(dx) = cg.dx {
                    self.send(grads, *x, self.like(*x, dx));
                }
                self.send(grads, *w, self.like(*w, cg.dw));
                if let Some(b) = b {
                    self.send(grads, *b, self.like(*b, cg.db));
                }
            }
            Op::Dense { x, w, b, dims } => {
                let (n, k, m) = *dims;
                let (dx, dw, db) =
                    kernels::dense_backward(self.value(*x).data(), self.value(*w).data(), gd, n, k, m);
                self.send(grads, *x, self.like(*x, dx));
                self.send(grads, *w, self.like(*w, dw));
                if let Some(b) = b {
                    self.send(grads, *b, self.like(*b, db));
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let dx = xd
                    .iter()
                    .zip(gd)
                    .map(|(&a, &gg)| if a > T::zero() { gg } else { T::zero() })
                    .collect();
                self.send(grads, *x, self.like(*x, dx));
            }
            Op::Abs(x) => {
                let xd = self.value(*x).data();
                let dx = xd
                    .iter()
                    .zip(gd)
                    .map(|(&a, &gg)| {
                        if a > T::zero() {
                            gg
                        } else if a < T::zero() {
                            -gg
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.send(grads, *x, self.like(*x, dx));
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let da = gd.iter().zip(bd).map(|(&gg, &q)| gg * q).collect();
                let db = gd.iter().zip(ad).map(|(&gg, &p)| gg * p).collect();
                self.send(grads, *a, self.like(*a, da));
                self.send(grads, *b, self.like(*b, db));
            }
            Op::Scale(x, f) => {
                let f = T::from_f64_lossy(*f);
                self.send(grads, *x, g.map(|v| v * f));
            }
            Op::Reshape(x) => {
                self.send(grads, *x, self.like(*x, gd.to_vec()));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                stats,
            } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let count = (n * spatial) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for s in 0..n {
                    for ch in 0..c {
                        let start = (s * c + ch) * spatial;
                        for i in start..start + spatial {
                            dgamma[ch] += gd[i].as_f64() * xhat[i].as_f64();
                            dbeta[ch] += gd[i].as_f64();
                        }
                    }
                }
                let mut dx = vec![T::zero(); gd.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let start = (s * c + ch) * spatial;
                        let gm = gam[ch].as_f64();
                        for i in start..start + spatial {
                            let v = if stats.is_some() {
                                // dL/dxhat summed terms: Σ g·γ = γ·dβ, Σ g·γ·x̂ = γ·dγ.
                                gm * inv_std[ch] / count
                                    * (count * gd[i].as_f64() - dbeta[ch] - xhat[i].as_f64() * dgamma[ch])
                            } else {
                                gm * inv_std[ch] * gd[i].as_f64()
                            };
                            dx[i] = T::from_f64_lossy(v);
                        }
                    }
                }
                self.send(grads, *x, self.like(*x, dx));
                self.send(grads, *gamma, self.like(*gamma, dgamma.into_iter().map(T::from_f64_lossy).collect()));
                self.send(grads, *beta, self.like(*beta, dbeta.into_iter().map(T::from_f64_lossy).collect()));
            }
            Op::GlobalAvgPool { x, spatial } => {
                let inv = 1.0 / *spatial as f64;
                let mut dx = Vec::with_capacity(gd.len() * spatial);
                for &gg in gd {
                    let v = T::from_f64_lossy(gg.as_f64() * inv);
                    dx.extend(std::iter::repeat_n(v, *spatial));
                }
                self.send(grads, *x, self.like(*x, dx));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&at, &gg) in argmax.iter().zip(gd) {
                    dx[at] = dx[at] + gg;
                }
                self.send(grads, *x, self.like(*x, dx));
            }
            Op::Trilinear {
                x,
                planes,
                input,
                output,
            } => {
                let dx = kernels::trilinear_backward(gd, *planes, *input, *output);
                self.send(grads, *x, self.like(*x, dx));
            }
            Op::L2Normalize { x, norms } => {
                let d = self.shape(*x)[1];
                let y = node.value.data();
                let mut dx = Vec::with_capacity(gd.len());
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    if norm > NORM_EPS {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                        dx.extend(
                            yr.iter()
                                .zip(gr)
                                .map(|(a, b)| T::from_f64_lossy((b.as_f64() - a.as_f64() * dot) / norm)),
                        );
                    } else {
                        dx.extend(gr.iter().map(|b| T::from_f64_lossy(b.as_f64() / NORM_EPS)));
                    }
                }
                self.send(grads, *x, self.like(*x, dx));
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.send(grads, *x, self.like(*x, vec![gd[0]; n]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let v = T::from_f64_lossy(gd[0].as_f64() / n as f64);
                self.send(grads, *x, self.like(*x, vec![v; n]));
            }
            Op::PairwiseNegL2 { x, dist } => {
                let (m, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let xd = self.value(*x).data();
                let mut dx = vec![0.0f64; m * d];
                for i in 0..m {
                    for j in 0..m {
                        let dij = dist[i * m + j];
                        if i == j || dij == 0.0 {
                            continue;
                        }
                        // dS_ij/dx_i = −(x_i − x_j)/d_ij; S_ij and S_ji both depend on x_i.
                        let coeff = -(gd[i * m + j].as_f64() + gd[j * m + i].as_f64()) / dij;
                        for c in 0..d {
                            dx[i * d + c] += coeff * (xd[i * d + c].as_f64() - xd[j * d + c].as_f64());
                        }
                    }
                }
                self.send(grads, *x, self.like(*x, dx.into_iter().map(T::from_f64_lossy).collect()));
            }
            Op::PairwiseCosine { x, norms } => {
                let (m, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let xd = self.value(*x).data();
                let unit: Vec<f64> = (0..m * d).map(|k| xd[k].as_f64() / norms[k / d].max(NORM_EPS)).collect();
                let mut dx = vec![0.0f64; m * d];
                for i in 0..m {
                    let mut du = vec![0.0f64; d];
                    for j in 0..m {
                        if i == j {
                            continue;
                        }
                        let coeff = gd[i * m + j].as_f64() + gd[j * m + i].as_f64();
                        for c in 0..d {
                            du[c] += coeff * unit[j * d + c];
                        }
                    }
                    let ui = &unit[i * d..(i + 1) * d];
                    let dot: f64 = ui.iter().zip(&du).map(|(a, b)| a * b).sum();
                    let norm = norms[i].max(NORM_EPS);
                    for c in 0..d {
                        dx[i * d + c] = (du[c] - ui[c] * dot) / norm;
                    }
                }
                self.send(grads, *x, self.like(*x, dx.into_iter().map(T::from_f64_lossy).collect()));
            }
            Op::SubsetLogSumExp { x, subsets } => {
                let w = self.shape(*x)[1];
                let xd = self.value(*x).data();
                let out = node.value.data();
                let mut dx = vec![0.0f64; xd.len()];
                for ((row, cols), (&gg, &lse)) in subsets.iter().zip(gd.iter().zip(out)) {
                    let (gg, lse) = (gg.as_f64(), lse.as_f64());
                    for &c in cols {
                        let at = row * w + c;
                        dx[at] += gg * (xd[at].as_f64() - lse).exp();
                    }
                }
                self.send(grads, *x, self.like(*x, dx.into_iter().map(T::from_f64_lossy).collect()));
            }
            Op::Gather { x, index } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&i, &gg) in index.iter().zip(gd) {
                    dx[i] = dx[i] + gg;
                }
                self.send(grads, *x, self.like(*x, dx));
            }
        }
        Ok(())
    }
}
