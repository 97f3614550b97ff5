//! Define-by-run computation tape with reverse-mode gradients.
//!
//! The graph is rebuilt for every forward pass; nodes own their values and
//! the backward sweep walks the tape in reverse creation order. Dense matrix
//! products go through gemm kernels; reductions that cross the graph-node
//! axis accumulate in f64 so relabeling nodes cannot perturb f32 outputs.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensorcore::ops::{
    col2im_causal, for_each_lane, gemm_nn, gemm_nt, gemm_tn, im2col_causal, softmax_lane,
};
use crate::tensorcore::scalar::Scalar;
use crate::tensorcore::store::ParameterStore;
use crate::tensorcore::tensor::Tensor;

const CLAMP_LO: f64 = 1e-7;
const CLAMP_HI: f64 = 1.0 - 1e-7;

/// Whether batch statistics are live (training) or frozen (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum OpRec<T: Scalar> {
    Leaf,
    Matmul(NodeId, NodeId),
    Bmm {
        a: NodeId,
        b: NodeId,
    },
    Conv1dCausal {
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        dilation: usize,
        cols: Vec<T>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train_stats: bool,
    },
    Add(NodeId, NodeId),
    AddBias {
        x: NodeId,
        b: NodeId,
    },
    Concat(Vec<NodeId>),
    Sigmoid(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Identity(NodeId),
    Softmax {
        x: NodeId,
        axis: usize,
    },
    // the saved output encodes the mask (excluded positions are exactly 0),
    // so backward needs no mask copy
    MaskedSoftmaxRows {
        x: NodeId,
    },
    ElemMul(NodeId, NodeId),
    Mean {
        x: NodeId,
        axis: usize,
    },
    Reshape(NodeId),
    Scale(NodeId, f64),
    OuterSum(NodeId, NodeId),
    Transpose12(NodeId),
    Glu(NodeId),
    BceLoss {
        y_hat: NodeId,
        targets: Arc<Vec<f64>>,
    },
    MaskedCeLoss {
        p: NodeId,
        onehot: Arc<Vec<f64>>,
        mask: Arc<Vec<bool>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: OpRec<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    grads: Vec<Option<Tensor<T>>>,
    /// name → leaf id for parameters registered via [`Tape::param`].
    pub(crate) param_nodes: BTreeMap<String, NodeId>,
    /// Batch-norm running statistics refreshed during a train-mode forward;
    /// the training loop commits these back to the store after the step.
    pub(crate) stat_updates: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Tape<T> {
    pub fn new(mode: Mode) -> Self {
        Tape {
            nodes: Vec::new(),
            mode,
            grads: Vec::new(),
            param_nodes: BTreeMap::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. node `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.param_nodes.get(name).copied()
    }

    pub fn stat_updates(&self) -> &[(String, Tensor<T>)] {
        &self.stat_updates
    }

    fn push(&mut self, value: Tensor<T>, op: OpRec<T>, needs_grad: bool, name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Raw data leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(value, OpRec::Leaf, false, "constant")
    }

    /// Leaf that participates in backward.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<NodeId> {
        self.push(value, OpRec::Leaf, requires_grad, "leaf")
    }

    /// Registers a store entry as a leaf, trainable entries with gradient.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<NodeId> {
        let tensor = store.get(name)?.clone();
        let id = self.leaf(tensor, store.is_trainable(name))?;
        self.param_nodes.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0) {
            return Err(Error::Shape {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.dim(0), av.dim(1), bv.dim(1));
        let mut out = Tensor::zeros(&[m, n]);
        gemm_nn(m, k, n, T::ONE, av.data(), bv.data(), T::ZERO, out.data_mut());
        let needs = self.needs(a) || self.needs(b);
        self.push(out, OpRec::Matmul(a, b), needs, "matmul")
    }

    /// Batched matmul [N,A,K] @ [N,K,C] → [N,A,C], f64 accumulation.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(1) {
            return Err(Error::Shape {
                op: "bmm",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (nb, m, k, n) = (av.dim(0), av.dim(1), av.dim(2), bv.dim(2));
        let mut out = Tensor::zeros(&[nb, m, n]);
        let (ad, bd) = (av.data(), bv.data());
        let slices: Vec<Vec<T>> = crate::par::par_map_range(nb, |s| {
            let a_s = &ad[s * m * k..(s + 1) * m * k];
            let b_s = &bd[s * k * n..(s + 1) * k * n];
            let mut o = vec![T::ZERO; m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0f64;
                    for p in 0..k {
                        acc += a_s[i * k + p].to_f64() * b_s[p * n + j].to_f64();
                    }
                    o[i * n + j] = T::from_f64(acc);
                }
            }
            o
        });
        for (s, sl) in slices.iter().enumerate() {
            out.data_mut()[s * m * n..(s + 1) * m * n].copy_from_slice(sl);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out, OpRec::Bmm { a, b }, needs, "bmm")
    }

    /// Batched matmul via gemm (f32 accumulation for f32 tapes). Faster than
    /// [`Tape::bmm`]; use where the summed axis is not the graph-node axis.
    pub fn bmm_fast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(1) {
            return Err(Error::Shape {
                op: "bmm",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (nb, m, k, n) = (av.dim(0), av.dim(1), av.dim(2), bv.dim(2));
        let mut out = Tensor::zeros(&[nb, m, n]);
        let (ad, bd) = (av.data(), bv.data());
        let slices: Vec<Vec<T>> = crate::par::par_map_range(nb, |s| {
            let mut o = vec![T::ZERO; m * n];
            gemm_nn(
                m,
                k,
                n,
                T::ONE,
                &ad[s * m * k..(s + 1) * m * k],
                &bd[s * k * n..(s + 1) * k * n],
                T::ZERO,
                &mut o,
            );
            o
        });
        for (s, sl) in slices.iter().enumerate() {
            out.data_mut()[s * m * n..(s + 1) * m * n].copy_from_slice(sl);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out, OpRec::Bmm { a, b }, needs, "bmm")
    }

    /// Causal dilated 1-D convolution: x [N,C_in,T], w [C_out,C_in,K],
    /// bias [C_out] → [N,C_out,T]. Output at t reads inputs at ≤ t only.
    pub fn conv1d_causal(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        dilation: usize,
    ) -> Result<NodeId> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let bv = &self.nodes[bias.0].value;
        if xv.rank() != 3 || wv.rank() != 3 || xv.dim(1) != wv.dim(1) {
            return Err(Error::Shape {
                op: "conv1d_causal",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        if dilation == 0 || wv.dim(2) == 0 {
            return Err(Error::config("conv1d_causal requires K >= 1 and dilation >= 1"));
        }
        if bv.shape() != [wv.dim(0)] {
            return Err(Error::Shape {
                op: "conv1d_causal bias",
                lhs: bv.shape().to_vec(),
                rhs: vec![wv.dim(0)],
            });
        }
        let (n, c_in, t_len) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let (c_out, k) = (wv.dim(0), wv.dim(2));
        let cols = im2col_causal(xv.data(), n, c_in, t_len, k, dilation);
        // y2[(n,t), c] = cols @ w2^T, w2 = w reshaped [C_out, C_in*K]
        let mut y2 = vec![T::ZERO; n * t_len * c_out];
        gemm_nt(n * t_len, c_in * k, c_out, T::ONE, &cols, wv.data(), T::ZERO, &mut y2);
        let mut out = Tensor::zeros(&[n, c_out, t_len]);
        {
            let od = out.data_mut();
            for ni in 0..n {
                for t in 0..t_len {
                    let row = (ni * t_len + t) * c_out;
                    for c in 0..c_out {
                        od[ni * c_out * t_len + c * t_len + t] = y2[row + c] + bv.data()[c];
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(bias);
        self.push(
            out,
            OpRec::Conv1dCausal {
                x,
                w,
                bias,
                dilation,
                cols,
            },
            needs,
            "conv1d_causal",
        )
    }

    /// Batch normalization over the channel axis (axis 1) of a [N,C] or
    /// [N,C,T] tensor. In train mode batch statistics normalize and the
    /// refreshed running statistics are queued under `name_prefix`; in eval
    /// mode the supplied running statistics make this a pure affine map.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm1d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        name_prefix: &str,
        momentum: f64,
        eps: f64,
    ) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 2 && xv.rank() != 3 {
            return Err(Error::Shape {
                op: "batchnorm1d",
                lhs: xv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let c = xv.dim(1);
        let gv = &self.nodes[gamma.0].value;
        if gv.shape() != [c] || running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(Error::Shape {
                op: "batchnorm1d stats",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let n = xv.dim(0);
        let t_len = if xv.rank() == 3 { xv.dim(2) } else { 1 };
        let count = (n * t_len) as f64;
        let xd = xv.data();

        let train_stats = self.mode == Mode::Train;
        let (mean, var): (Vec<f64>, Vec<f64>) = if train_stats {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ch in 0..c {
                let mut s = 0.0f64;
                for ni in 0..n {
                    let base = ni * c * t_len + ch * t_len;
                    for t in 0..t_len {
                        s += xd[base + t].to_f64();
                    }
                }
                let m = s / count;
                let mut v = 0.0f64;
                for ni in 0..n {
                    let base = ni * c * t_len + ch * t_len;
                    for t in 0..t_len {
                        let d = xd[base + t].to_f64() - m;
                        v += d * d;
                    }
                }
                mean[ch] = m;
                var[ch] = v / count;
            }
            mean
                .iter()
                .zip(var.iter())
                .for_each(|(_, _)| {});
            (mean, var)
        } else {
            (
                running_mean.data().iter().map(|v| v.to_f64()).collect(),
                running_var.data().iter().map(|v| v.to_f64()).collect(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

        let gd = self.nodes[gamma.0].value.data().to_vec();
        let bd = self.nodes[beta.0].value.data().to_vec();
        let mut out = Tensor::zeros(xv.shape());
        {
            let od = out.data_mut();
            for ni in 0..n {
                for ch in 0..c {
                    let base = ni * c * t_len + ch * t_len;
                    let (m, inv) = (mean[ch], inv_std[ch]);
                    let (g, b) = (gd[ch].to_f64(), bd[ch].to_f64());
                    for t in 0..t_len {
                        let xh = (xd[base + t].to_f64() - m) * inv;
                        od[base + t] = T::from_f64(g * xh + b);
                    }
                }
            }
        }
        if train_stats {
            let new_mean: Vec<T> = running_mean
                .data()
                .iter()
                .zip(mean.iter())
                .map(|(old, m)| T::from_f64(momentum * old.to_f64() + (1.0 - momentum) * m))
                .collect();
            let new_var: Vec<T> = running_var
                .data()
                .iter()
                .zip(var.iter())
                .map(|(old, v)| T::from_f64(momentum * old.to_f64() + (1.0 - momentum) * v))
                .collect();
            self.stat_updates.push((
                format!("{name_prefix}.running_mean"),
                Tensor::from_vec(&[c], new_mean)?,
            ));
            self.stat_updates.push((
                format!("{name_prefix}.running_var"),
                Tensor::from_vec(&[c], new_var)?,
            ));
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            OpRec::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train_stats,
            },
            needs,
            "batchnorm1d",
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op: "add",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| *x + *y)
            .collect();
        let out = Tensor::from_vec(av.shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, OpRec::Add(a, b), needs, "add")
    }

    /// Adds a [C] bias along the trailing axis of a [R,C] matrix.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        if xv.rank() != 2 || bv.shape() != [xv.dim(1)] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (r, c) = (xv.dim(0), xv.dim(1));
        let mut out = xv.clone();
        {
            let od = out.data_mut();
            for i in 0..r {
                for j in 0..c {
                    od[i * c + j] += bv.data()[j];
                }
            }
        }
        let needs = self.needs(x) || self.needs(b);
        self.push(out, OpRec::AddBias { x, b }, needs, "add_bias")
    }

    /// Concatenates rank-2 tensors along axis 1.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::config("concat of zero tensors"));
        }
        let rows = self.nodes[parts[0].0].value.dim(0);
        let mut total = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.rank() != 2 || v.dim(0) != rows {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.nodes[parts[0].0].value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            total += v.dim(1);
        }
        let mut out = Tensor::zeros(&[rows, total]);
        {
            let od = out.data_mut();
            let mut col0 = 0;
            for p in parts {
                let v = &self.nodes[p.0].value;
                let w = v.dim(1);
                for i in 0..rows {
                    od[i * total + col0..i * total + col0 + w]
                        .copy_from_slice(&v.data()[i * w..(i + 1) * w]);
                }
                col0 += w;
            }
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(out, OpRec::Concat(parts.to_vec()), needs, "concat")
    }

    fn unary(
        &mut self,
        x: NodeId,
        f: impl Fn(f64) -> f64,
        rec: impl Fn(NodeId) -> OpRec<T>,
        name: &'static str,
    ) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|v| T::from_f64(f(v.to_f64()))).collect();
        let out = Tensor::from_vec(xv.shape(), data)?;
        let needs = self.needs(x);
        self.push(out, rec(x), needs, name)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), OpRec::Sigmoid, "sigmoid")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, |v| v.max(0.0), OpRec::Relu, "relu")
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        self.unary(
            x,
            |v| if v > 0.0 { v } else { slope * v },
            |id| OpRec::LeakyRelu(id, slope),
            "leaky_relu",
        )
    }

    /// Where dropout would sit; passes values through untouched.
    pub fn identity(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, |v| v, OpRec::Identity, "identity")
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.rank() {
            return Err(Error::Shape {
                op: "softmax",
                lhs: xv.shape().to_vec(),
                rhs: vec![axis],
            });
        }
        let mut out = Tensor::zeros(xv.shape());
        let src = xv.data();
        let dst = out.data_mut();
        for_each_lane(xv.shape(), axis, |base, len, stride| {
            softmax_lane(src, dst, base, len, stride, None, 0);
        });
        let needs = self.needs(x);
        self.push(out, OpRec::Softmax { x, axis }, needs, "softmax")
    }

    /// Row-wise softmax over the last axis of [N,M,M], restricted to the
    /// positions allowed by `mask` (row-major [M,M]); excluded positions are
    /// exactly 0. Every row must allow at least one position.
    pub fn masked_softmax_rows(&mut self, x: NodeId, mask: Arc<Vec<bool>>) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 3 || xv.dim(1) != xv.dim(2) || mask.len() != xv.dim(1) * xv.dim(2) {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: xv.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let m = xv.dim(1);
        for a in 0..m {
            if !mask[a * m..(a + 1) * m].iter().any(|x| *x) {
                return Err(Error::data(format!(
                    "masked_softmax: node {a} has an empty neighborhood"
                )));
            }
        }
        let (nb, mm) = (xv.dim(0), m * m);
        let mut out = Tensor::zeros(xv.shape());
        let src = xv.data();
        let dst = out.data_mut();
        for s in 0..nb {
            for a in 0..m {
                let base = s * mm + a * m;
                softmax_lane(src, dst, base, m, 1, Some(mask.as_slice()), a * m);
            }
        }
        let needs = self.needs(x);
        self.push(out, OpRec::MaskedSoftmaxRows { x }, needs, "masked_softmax")
    }

    pub fn elem_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op: "elem_mul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| *x * *y)
            .collect();
        let out = Tensor::from_vec(av.shape(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, OpRec::ElemMul(a, b), needs, "elem_mul")
    }

    pub fn mean(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.rank() || xv.dim(axis) == 0 {
            return Err(Error::Shape {
                op: "mean",
                lhs: xv.shape().to_vec(),
                rhs: vec![axis],
            });
        }
        let out_shape: Vec<usize> = xv
            .shape()
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != axis)
            .map(|(_, d)| *d)
            .collect();
        let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        let mut out = Tensor::zeros(&out_shape);
        let src = xv.data();
        let dst = out.data_mut();
        let mut lane_idx = 0;
        for_each_lane(xv.shape(), axis, |base, len, stride| {
            let mut acc = 0.0f64;
            for k in 0..len {
                acc += src[base + k * stride].to_f64();
            }
            dst[lane_idx] = T::from_f64(acc / len as f64);
            lane_idx += 1;
        });
        let needs = self.needs(x);
        self.push(out, OpRec::Mean { x, axis }, needs, "mean")
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.nodes[x.0].value.clone().reshaped(shape)?;
        let needs = self.needs(x);
        self.push(out, OpRec::Reshape(x), needs, "reshape")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(x, |v| c * v, |id| OpRec::Scale(id, c), "scale")
    }

    /// out[n,a,b] = p[n,a] + q[n,b] for p,q of shape [N,M].
    pub fn outer_sum(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        let (pv, qv) = (&self.nodes[p.0].value, &self.nodes[q.0].value);
        if pv.rank() != 2 || pv.shape() != qv.shape() {
            return Err(Error::Shape {
                op: "outer_sum",
                lhs: pv.shape().to_vec(),
                rhs: qv.shape().to_vec(),
            });
        }
        let (n, m) = (pv.dim(0), pv.dim(1));
        let mut out = Tensor::zeros(&[n, m, m]);
        {
            let od = out.data_mut();
            for s in 0..n {
                for a in 0..m {
                    let pa = pv.data()[s * m + a];
                    for b in 0..m {
                        od[s * m * m + a * m + b] = pa + qv.data()[s * m + b];
                    }
                }
            }
        }
        let needs = self.needs(p) || self.needs(q);
        self.push(out, OpRec::OuterSum(p, q), needs, "outer_sum")
    }

    /// Swaps axes 1 and 2 of a rank-3 tensor.
    pub fn transpose12(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 3 {
            return Err(Error::Shape {
                op: "transpose12",
                lhs: xv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (n, a, b) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let mut out = Tensor::zeros(&[n, b, a]);
        {
            let od = out.data_mut();
            let xd = xv.data();
            for s in 0..n {
                for i in 0..a {
                    for j in 0..b {
                        od[s * a * b + j * a + i] = xd[s * a * b + i * b + j];
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, OpRec::Transpose12(x), needs, "transpose12")
    }

    /// Gated linear unit over a [R,2E] matrix: first half ⊗ σ(second half).
    pub fn glu(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 2 || xv.dim(1) % 2 != 0 {
            return Err(Error::Shape {
                op: "glu",
                lhs: xv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c2) = (xv.dim(0), xv.dim(1));
        let e = c2 / 2;
        let mut out = Tensor::zeros(&[r, e]);
        {
            let od = out.data_mut();
            let xd = xv.data();
            for i in 0..r {
                for j in 0..e {
                    let v = xd[i * c2 + j].to_f64();
                    let gate = 1.0 / (1.0 + (-xd[i * c2 + e + j].to_f64()).exp());
                    od[i * e + j] = T::from_f64(v * gate);
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, OpRec::Glu(x), needs, "glu")
    }

    /// Mean binary cross-entropy of predictions `y_hat` ([B], in (0,1))
    /// against fixed 0/1 targets, with probabilities clamped away from
    /// {0,1} before the logs.
    pub fn bce_loss(&mut self, y_hat: NodeId, targets: Arc<Vec<f64>>) -> Result<NodeId> {
        let yv = &self.nodes[y_hat.0].value;
        if yv.rank() != 1 || yv.len() != targets.len() {
            return Err(Error::Shape {
                op: "bce_loss",
                lhs: yv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let n = targets.len().max(1) as f64;
        let mut acc = 0.0f64;
        for (p, y) in yv.data().iter().zip(targets.iter()) {
            let p = p.to_f64().clamp(CLAMP_LO, CLAMP_HI);
            acc -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        let out = Tensor::scalar(T::from_f64(acc / n));
        let needs = self.needs(y_hat);
        self.push(out, OpRec::BceLoss { y_hat, targets }, needs, "bce_loss")
    }

    /// Mean cross-entropy −Σ_s c log p over the masked rows of `p` [B,M];
    /// rows with `mask[i] == false` contribute nothing. Zero when no row is
    /// masked in.
    pub fn masked_ce_loss(
        &mut self,
        p: NodeId,
        onehot: Arc<Vec<f64>>,
        mask: Arc<Vec<bool>>,
    ) -> Result<NodeId> {
        let pv = &self.nodes[p.0].value;
        if pv.rank() != 2 || pv.len() != onehot.len() || pv.dim(0) != mask.len() {
            return Err(Error::Shape {
                op: "masked_ce_loss",
                lhs: pv.shape().to_vec(),
                rhs: vec![onehot.len()],
            });
        }
        let m = pv.dim(1);
        let count = mask.iter().filter(|b| **b).count();
        let mut acc = 0.0f64;
        if count > 0 {
            for (i, flag) in mask.iter().enumerate() {
                if !flag {
                    continue;
                }
                for s in 0..m {
                    let c = onehot[i * m + s];
                    if c != 0.0 {
                        let prob = pv.data()[i * m + s].to_f64().clamp(CLAMP_LO, CLAMP_HI);
                        acc -= c * prob.ln();
                    }
                }
            }
            acc /= count as f64;
        }
        let out = Tensor::scalar(T::from_f64(acc));
        let needs = self.needs(p);
        self.push(out, OpRec::MaskedCeLoss { p, onehot, mask }, needs, "masked_ce_loss")
    }

    /// Reverse sweep from scalar node `loss`, accumulating gradients into
    /// every reachable leaf that requires them.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.nodes[loss.0].value.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(
            self.nodes[loss.0].value.shape(),
            vec![T::ONE],
        )?);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || grads[i].is_none() {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let g = upper[0].as_ref().expect("gradient present");
            self.backprop_node(i, g, lower)?;
        }

        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(Error::NonFinite("backward"));
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let val = |id: NodeId| &self.nodes[id.0].value;
        let needs = |id: NodeId| self.nodes[id.0].needs_grad;
        macro_rules! buf {
            ($id:expr) => {
                grads[$id.0].get_or_insert_with(|| Tensor::zeros(val($id).shape()))
            };
        }

        match &node.op {
            OpRec::Leaf => {}
            OpRec::Matmul(a, b) => {
                let (m, p) = (val(*a).dim(0), val(*a).dim(1));
                let q = val(*b).dim(1);
                if needs(*a) {
                    let bv = val(*b).data().to_vec();
                    gemm_nt(m, q, p, T::ONE, g.data(), &bv, T::ONE, buf!(*a).data_mut());
                }
                if needs(*b) {
                    let av = val(*a).data().to_vec();
                    gemm_tn(p, m, q, T::ONE, &av, g.data(), T::ONE, buf!(*b).data_mut());
                }
            }
            OpRec::Bmm { a, b } => {
                let (nb, m, k) = (val(*a).dim(0), val(*a).dim(1), val(*a).dim(2));
                let n = val(*b).dim(2);
                if needs(*a) {
                    let bv = val(*b).data().to_vec();
                    let da = buf!(*a).data_mut();
                    for s in 0..nb {
                        gemm_nt(
                            m,
                            n,
                            k,
                            T::ONE,
                            &g.data()[s * m * n..(s + 1) * m * n],
                            &bv[s * k * n..(s + 1) * k * n],
                            T::ONE,
                            &mut da[s * m * k..(s + 1) * m * k],
                        );
                    }
                }
                if needs(*b) {
                    let av = val(*a).data().to_vec();
                    let db = buf!(*b).data_mut();
                    for s in 0..nb {
                        gemm_tn(
                            k,
                            m,
                            n,
                            T::ONE,
                            &av[s * m * k..(s + 1) * m * k],
                            &g.data()[s * m * n..(s + 1) * m * n],
                            T::ONE,
                            &mut db[s * k * n..(s + 1) * k * n],
                        );
                    }
                }
            }
            OpRec::Conv1dCausal {
                x,
                w,
                bias,
                dilation,
                cols,
            } => {
                let (n, c_in, t_len) = (val(*x).dim(0), val(*x).dim(1), val(*x).dim(2));
                let (c_out, k) = (val(*w).dim(0), val(*w).dim(2));
                // g2[(n,t), c] = g[n,c,t]
                let mut g2 = vec![T::ZERO; n * t_len * c_out];
                for ni in 0..n {
                    for c in 0..c_out {
                        for t in 0..t_len {
                            g2[(ni * t_len + t) * c_out + c] =
                                g.data()[ni * c_out * t_len + c * t_len + t];
                        }
                    }
                }
                if needs(*w) {
                    gemm_tn(
                        c_out,
                        n * t_len,
                        c_in * k,
                        T::ONE,
                        &g2,
                        cols,
                        T::ONE,
                        buf!(*w).data_mut(),
                    );
                }
                if needs(*bias) {
                    let db = buf!(*bias).data_mut();
                    for (row, chunk) in g2.chunks(c_out).enumerate() {
                        let _ = row;
                        for (c, v) in chunk.iter().enumerate() {
                            db[c] += *v;
                        }
                    }
                }
                if needs(*x) {
                    let wv = val(*w).data().to_vec();
                    let mut dcols = vec![T::ZERO; n * t_len * c_in * k];
                    gemm_nn(
                        n * t_len,
                        c_out,
                        c_in * k,
                        T::ONE,
                        &g2,
                        &wv,
                        T::ZERO,
                        &mut dcols,
                    );
                    col2im_causal(&dcols, buf!(*x).data_mut(), n, c_in, t_len, k, *dilation);
                }
            }
            OpRec::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train_stats,
            } => {
                let xv = val(*x);
                let c = xv.dim(1);
                let n = xv.dim(0);
                let t_len = if xv.rank() == 3 { xv.dim(2) } else { 1 };
                let count = (n * t_len) as f64;
                let gd = val(*gamma).data();
                // per-channel reductions
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for ni in 0..n {
                    for ch in 0..c {
                        let base = ni * c * t_len + ch * t_len;
                        for t in 0..t_len {
                            let gi = g.data()[base + t].to_f64();
                            let xh = (xv.data()[base + t].to_f64() - mean[ch]) * inv_std[ch];
                            sum_g[ch] += gi;
                            sum_gx[ch] += gi * xh;
                        }
                    }
                }
                if needs(*gamma) {
                    let dg = buf!(*gamma).data_mut();
                    for ch in 0..c {
                        dg[ch] += T::from_f64(sum_gx[ch]);
                    }
                }
                if needs(*beta) {
                    let db = buf!(*beta).data_mut();
                    for ch in 0..c {
                        db[ch] += T::from_f64(sum_g[ch]);
                    }
                }
                if needs(*x) {
                    let dx = buf!(*x).data_mut();
                    for ni in 0..n {
                        for ch in 0..c {
                            let base = ni * c * t_len + ch * t_len;
                            let ginv = gd[ch].to_f64() * inv_std[ch];
                            for t in 0..t_len {
                                let gi = g.data()[base + t].to_f64();
                                let d = if *train_stats {
                                    let xh =
                                        (xv.data()[base + t].to_f64() - mean[ch]) * inv_std[ch];
                                    ginv * (gi - sum_g[ch] / count - xh * sum_gx[ch] / count)
                                } else {
                                    ginv * gi
                                };
                                dx[base + t] += T::from_f64(d);
                            }
                        }
                    }
                }
            }
            OpRec::Add(a, b) => {
                for id in [a, b] {
                    if needs(*id) {
                        let d = buf!(*id).data_mut();
                        for (dst, src) in d.iter_mut().zip(g.data()) {
                            *dst += *src;
                        }
                    }
                }
            }
            OpRec::AddBias { x, b } => {
                if needs(*x) {
                    let d = buf!(*x).data_mut();
                    for (dst, src) in d.iter_mut().zip(g.data()) {
                        *dst += *src;
                    }
                }
                if needs(*b) {
                    let c = val(*b).len();
                    let db = buf!(*b).data_mut();
                    for chunk in g.data().chunks(c) {
                        for (j, v) in chunk.iter().enumerate() {
                            db[j] += *v;
                        }
                    }
                }
            }
            OpRec::Concat(parts) => {
                let total = node.value.dim(1);
                let rows = node.value.dim(0);
                let mut col0 = 0;
                for p in parts {
                    let w = val(*p).dim(1);
                    if needs(*p) {
                        let dp = buf!(*p).data_mut();
                        for i in 0..rows {
                            for j in 0..w {
                                dp[i * w + j] += g.data()[i * total + col0 + j];
                            }
                        }
                    }
                    col0 += w;
                }
            }
            OpRec::Sigmoid(x) => {
                if needs(*x) {
                    let d = buf!(*x).data_mut();
                    for ((dst, gi), y) in d.iter_mut().zip(g.data()).zip(node.value.data()) {
                        let y = y.to_f64();
                        *dst += T::from_f64(gi.to_f64() * y * (1.0 - y));
                    }
                }
            }
            OpRec::Relu(x) => {
                if needs(*x) {
                    let d = buf!(*x).data_mut();
                    for ((dst, gi), xi) in d.iter_mut().zip(g.data()).zip(val(*x).data()) {
                        if xi.to_f64() > 0.0 {
                            *dst += *gi;
                        }
                    }
                }
            }
            OpRec::LeakyRelu(x, slope) => {
                if needs(*x) {
                    let d = buf!(*x).data_mut();
                    for ((dst, gi), xi) in d.iter_mut().zip(g.data()).zip(val(*x).data()) {
                        let f = if xi.to_f64() > 0.0 { 1.0 } else { *slope };
                        *dst += T::from_f64(gi.to_f64() * f);
                    }
                }
            }
            OpRec::Identity(x) | OpRec::Reshape(x) => {
                if needs(*x) {
                    let d = buf!(*x).data_mut();
                    for (dst, src) in d.iter_mut().zip(g.data()) {
                        *dst += *src;
                    }
                }
            }
            OpRec::Softmax { x, axis } => {
                if needs(*x) {
                    let y = node.value.data();
                    let shape = node.value.shape().to_vec();
                    let d = buf!(*x).data_mut();
                    for_each_lane(&shape, *axis, |base, len, stride| {
                        let mut dot = 0.0f64;
                        for k in 0..len {
                            let idx = base + k * stride;
                            dot += g.data()[idx].to_f64() * y[idx].to_f64();
                        }
                        for k in 0..len {
                            let idx = base + k * stride;
                            let yv = y[idx].to_f64();
                            d[idx] += T::from_f64(yv * (g.data()[idx].to_f64() - dot));
                        }
                    });
                }
            }
            OpRec::MaskedSoftmaxRows { x } => {
                if needs(*x) {
                    let y = node.value.data();
                    let (nb, m) = (node.value.dim(0), node.value.dim(1));
                    let d = buf!(*x).data_mut();
                    for s in 0..nb {
                        for a in 0..m {
                            let base = s * m * m + a * m;
                            let mut dot = 0.0f64;
                            for b in 0..m {
                                dot += g.data()[base + b].to_f64() * y[base + b].to_f64();
                            }
                            for b in 0..m {
                                let yv = y[base + b].to_f64();
                                d[base + b] +=
                                    T::from_f64(yv * (g.data()[base + b].to_f64() - dot));
                            }
                        }
                    }
                }
            }
            OpRec::ElemMul(a, b) => {
                if needs(*a) {
                    let bv = val(*b).data().to_vec();
                    let d = buf!(*a).data_mut();
                    for ((dst, gi), bi) in d.iter_mut().zip(g.data()).zip(bv.iter()) {
                        *dst += *gi * *bi;
                    }
                }
                if needs(*b) {
                    let av = val(*a).data().to_vec();
                    let d = buf!(*b).data_mut();
                    for ((dst, gi), ai) in d.iter_mut().zip(g.data()).zip(av.iter()) {
                        *dst += *gi * *ai;
                    }
                }
            }
            OpRec::Mean { x, axis } => {
                if needs(*x) {
                    let shape = val(*x).shape().to_vec();
                    let d = buf!(*x).data_mut();
                    let mut lane_idx = 0;
                    for_each_lane(&shape, *axis, |base, len, stride| {
                        let gv = g.data()[lane_idx].to_f64() / len as f64;
                        for k in 0..len {
                            d[base + k * stride] += T::from_f64(gv);
                        }
                        lane_idx += 1;
                    });
                }
            }
            OpRec::Scale(x, c) => {
                if needs(*x) {
                    let d = buf!(*x).data_mut();
                    for (dst, src) in d.iter_mut().zip(g.data()) {
                        *dst += T::from_f64(*c * src.to_f64());
                    }
                }
            }
            OpRec::OuterSum(p, q) => {
                let (n, m) = (val(*p).dim(0), val(*p).dim(1));
                if needs(*p) {
                    let d = buf!(*p).data_mut();
                    for s in 0..n {
                        for a in 0..m {
                            let mut acc = T::ZERO;
                            for b in 0..m {
                                acc += g.data()[s * m * m + a * m + b];
                            }
                            d[s * m + a] += acc;
                        }
                    }
                }
                if needs(*q) {
                    let d = buf!(*q).data_mut();
                    for s in 0..n {
                        for b in 0..m {
                            let mut acc = T::ZERO;
                            for a in 0..m {
                                acc += g.data()[s * m * m + a * m + b];
                            }
                            d[s * m + b] += acc;
                        }
                    }
                }
            }
            OpRec::Transpose12(x) => {
                if needs(*x) {
                    let (n, b, a) = (node.value.dim(0), node.value.dim(1), node.value.dim(2));
                    let d = buf!(*x).data_mut();
                    for s in 0..n {
                        for j in 0..b {
                            for i in 0..a {
                                d[s * a * b + i * b + j] += g.data()[s * a * b + j * a + i];
                            }
                        }
                    }
                }
            }
            OpRec::Glu(x) => {
                if needs(*x) {
                    let xv = val(*x);
                    let (r, c2) = (xv.dim(0), xv.dim(1));
                    let e = c2 / 2;
                    let d = buf!(*x).data_mut();
                    for i in 0..r {
                        for j in 0..e {
                            let gi = g.data()[i * e + j].to_f64();
                            let v = xv.data()[i * c2 + j].to_f64();
                            let s = 1.0 / (1.0 + (-xv.data()[i * c2 + e + j].to_f64()).exp());
                            d[i * c2 + j] += T::from_f64(gi * s);
                            d[i * c2 + e + j] += T::from_f64(gi * v * s * (1.0 - s));
                        }
                    }
                }
            }
            OpRec::BceLoss { y_hat, targets } => {
                if needs(*y_hat) {
                    let n = targets.len().max(1) as f64;
                    let gs = g.data()[0].to_f64();
                    let d = buf!(*y_hat).data_mut();
                    for (i, (p, y)) in val(*y_hat).data().iter().zip(targets.iter()).enumerate() {
                        let p = p.to_f64();
                        if p > CLAMP_LO && p < CLAMP_HI {
                            d[i] += T::from_f64(gs * (p - y) / (p * (1.0 - p)) / n);
                        }
                    }
                }
            }
            OpRec::MaskedCeLoss { p, onehot, mask } => {
                if needs(*p) {
                    let count = mask.iter().filter(|b| **b).count();
                    if count > 0 {
                        let m = val(*p).dim(1);
                        let gs = g.data()[0].to_f64();
                        let d = buf!(*p).data_mut();
                        for (i, flag) in mask.iter().enumerate() {
                            if !flag {
                                continue;
                            }
                            for s in 0..m {
                                let c = onehot[i * m + s];
                                if c == 0.0 {
                                    continue;
                                }
                                let pv = val(*p).data()[i * m + s].to_f64();
                                if pv > CLAMP_LO && pv < CLAMP_HI {
                                    d[i * m + s] += T::from_f64(-gs * c / pv / count as f64);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
