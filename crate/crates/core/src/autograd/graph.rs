use std::collections::BTreeMap;
use std::fmt;

use super::conv::{conv_output_extent, ConvGeometry};
use super::gemm::{gemm, MatRef};
use super::{AutogradError, Tensor};

/// Lower clamp applied before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-300;

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identity of a trainable parameter within a parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
    /// Index of the maximum; lowest flat index wins ties. Not differentiable.
    Argmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    All,
    Dim(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    /// Over the final axis.
    Softmax,
    /// Natural log, input clamped below at [`LOG_FLOOR`].
    Log,
}

/// Reverse rule for an operation defined outside this module.
pub trait CustomBackward: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients for each input, in input order. `None` means no contribution.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
    ) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Elementwise {
        kind: ElementwiseKind,
        a: Var,
        b: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geometry: ConvGeometry,
    },
    Activation {
        kind: ActivationKind,
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        label: usize,
    },
    KlDivergence {
        p: Var,
        q: Var,
        p_probs: Vec<f64>,
        log_ratio: Vec<f64>,
        q_probs: Vec<f64>,
    },
    Reduce {
        kind: ReduceKind,
        a: Var,
        outer: usize,
        extent: usize,
        inner: usize,
        arg: Vec<usize>,
    },
    StopGradient,
    SelectRows {
        a: Var,
        rows: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomBackward>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Elementwise { kind, .. } => match kind {
                ElementwiseKind::Add => "add",
                ElementwiseKind::Sub => "sub",
                ElementwiseKind::Mul => "mul",
                ElementwiseKind::Div => "div",
            },
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::Activation { kind, .. } => match kind {
                ActivationKind::Relu => "relu",
                ActivationKind::Softmax => "softmax",
                ActivationKind::Log => "log",
            },
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::KlDivergence { .. } => "kl_divergence",
            Op::Reduce { kind, .. } => match kind {
                ReduceKind::Sum => "sum",
                ReduceKind::Mean => "mean",
                ReduceKind::Max => "max",
                ReduceKind::Argmax => "argmax",
            },
            Op::StopGradient => "stop_gradient",
            Op::SelectRows { .. } => "select_rows",
            Op::Concat { .. } => "concat",
            Op::Custom { rule, .. } => rule.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recorded forward computation supporting one reverse traversal.
///
/// Each graph is single-threaded; independent graphs may live on separate
/// threads. After [`Graph::backward`] the graph is consumed and rejects both
/// new operations and a second reverse pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("consumed", &self.consumed)
            .finish()
    }
}

/// Gradients produced by one reverse pass.
///
/// Every leaf that requires a gradient gets an entry, zero-filled when the
/// loss does not reach it (or only reaches it through a stop-gradient).
#[derive(Clone, Debug, Default)]
pub struct GradientRecord {
    leaves: BTreeMap<Var, Tensor>,
    params: BTreeMap<ParamId, Var>,
    pub step: u64,
}

impl GradientRecord {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.leaves.get(v))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    /// Moves parameter gradients out, ordered by [`ParamId`].
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Tensor)> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .filter_map(|(id, var)| self.leaves.remove(&var).map(|g| (id, g)))
            .collect()
    }
}

fn check_same_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<(), AutogradError> {
    if t.rank() != rank {
        return Err(AutogradError::RankMismatch {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|v| v - lse).collect()
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn ensure_live(&self) -> Result<(), AutogradError> {
        if self.consumed {
            Err(AutogradError::GraphConsumed)
        } else {
            Ok(())
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf bound to a trainable parameter.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        let var = self.push(value, Op::Leaf, true);
        self.nodes[var.0].param = Some(id);
        var
    }

    pub fn elementwise(
        &mut self,
        kind: ElementwiseKind,
        a: Var,
        b: Var,
    ) -> Result<Var, AutogradError> {
        self.ensure_live()?;
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() || tb.is_scalar() {
            ta.shape().to_vec()
        } else if ta.is_scalar() {
            tb.shape().to_vec()
        } else {
            return Err(AutogradError::ShapeMismatch {
                op: "elementwise",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        let n: usize = shape.iter().product();
        let f = match kind {
            ElementwiseKind::Add => |x: f64, y: f64| x + y,
            ElementwiseKind::Sub => |x: f64, y: f64| x - y,
            ElementwiseKind::Mul => |x: f64, y: f64| x * y,
            ElementwiseKind::Div => |x: f64, y: f64| x / y,
        };
        let (da, db) = (ta.data(), tb.data());
        let at = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let data = (0..n).map(|i| f(at(da, i), at(db, i))).collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Elementwise { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.elementwise(ElementwiseKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.elementwise(ElementwiseKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.elementwise(ElementwiseKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.elementwise(ElementwiseKind::Div, a, b)
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, AutogradError> {
        let c = self.constant(Tensor::scalar(factor));
        self.mul(a, c)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.ensure_live()?;
        let (ta, tb) = (self.value(a), self.value(b));
        check_same_rank("matmul", ta, 2)?;
        check_same_rank("matmul", tb, 2)?;
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, p) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(AutogradError::InnerExtent {
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * p];
        gemm(
            MatRef::new(ta.data(), m, k),
            MatRef::new(tb.data(), k, p),
            0.0,
            &mut out,
        );
        let value = Tensor::new(vec![m, p], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutogradError> {
        self.ensure_live()?;
        let ta = self.value(a);
        check_same_rank("transpose", ta, 2)?;
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let src = ta.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Transpose { a }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var, AutogradError> {
        self.ensure_live()?;
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, AutogradError> {
        self.ensure_live()?;
        let (ti, tk) = (self.value(input), self.value(kernel));
        check_same_rank("conv2d", ti, 3)?;
        check_same_rank("conv2d", tk, 4)?;
        let (cin, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
        let (cout, kc, kh, kw) = (tk.shape()[0], tk.shape()[1], tk.shape()[2], tk.shape()[3]);
        if kc != cin || kh != kw {
            return Err(AutogradError::ShapeMismatch {
                op: "conv2d",
                lhs: ti.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        let oh = conv_output_extent(h, kh, stride, padding)?;
        let ow = conv_output_extent(w, kw, stride, padding)?;
        let geometry = ConvGeometry {
            in_channels: cin,
            height: h,
            width: w,
            out_channels: cout,
            kernel: kh,
            stride,
            padding,
        };
        let out = geometry.forward(ti.data(), tk.data());
        let value = Tensor::new(vec![cout, oh, ow], out)?;
        let rg = self.any_grad(&[input, kernel]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geometry,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, kind: ActivationKind, a: Var) -> Result<Var, AutogradError> {
        self.ensure_live()?;
        let ta = self.value(a);
        let value = match kind {
            ActivationKind::Relu => ta.map(|v| if v > 0.0 { v } else { 0.0 }),
            ActivationKind::Log => ta.map(|v| v.max(LOG_FLOOR).ln()),
            ActivationKind::Softmax => {
                let last = *ta.shape().last().ok_or(AutogradError::EmptyReduction)?;
                if last == 0 {
                    return Err(AutogradError::EmptyReduction);
                }
                let mut data = ta.data().to_vec();
                for row in data.chunks_mut(last) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
                Tensor::new(ta.shape().to_vec(), data)?
            }
        };
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Activation { kind, a }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutogradError> {
        self.activation(ActivationKind::Relu, a)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, AutogradError> {
        self.activation(ActivationKind::Softmax, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutogradError> {
        self.activation(ActivationKind::Log, a)
    }

    /// `−log softmax(logits)[label]` for a single logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, AutogradError> {
        self.ensure_live()?;
        let tl = self.value(logits);
        check_same_rank("cross_entropy", tl, 1)?;
        let classes = tl.len();
        if label >= classes {
            return Err(AutogradError::LabelOutOfRange { label, classes });
        }
        let lsm = log_softmax(tl.data());
        let loss = -lsm[label];
        let probs = lsm.iter().map(|v| v.exp()).collect();
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                label,
            },
            rg,
        ))
    }

    /// `KL(softmax(p) ‖ softmax(q)) = Σ p_i (log p_i − log q_i)`.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var, AutogradError> {
        self.ensure_live()?;
        let (tp, tq) = (self.value(p), self.value(q));
        check_same_rank("kl_divergence", tp, 1)?;
        check_same_rank("kl_divergence", tq, 1)?;
        if tp.shape() != tq.shape() {
            return Err(AutogradError::ShapeMismatch {
                op: "kl_divergence",
                lhs: tp.shape().to_vec(),
                rhs: tq.shape().to_vec(),
            });
        }
        if tp.is_empty() {
            return Err(AutogradError::EmptyReduction);
        }
        let lp = log_softmax(tp.data());
        let lq = log_softmax(tq.data());
        let p_probs: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        let q_probs: Vec<f64> = lq.iter().map(|v| v.exp()).collect();
        let log_ratio: Vec<f64> = lp.iter().zip(&lq).map(|(a, b)| a - b).collect();
        let kl = p_probs
            .iter()
            .zip(&log_ratio)
            .map(|(p, r)| p * r)
            .sum::<f64>();
        let rg = self.any_grad(&[p, q]);
        Ok(self.push(
            Tensor::scalar(kl),
            Op::KlDivergence {
                p,
                q,
                p_probs,
                log_ratio,
                q_probs,
            },
            rg,
        ))
    }

    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axis: Axis) -> Result<Var, AutogradError> {
        self.ensure_live()?;
        let ta = self.value(a);
        let (outer, extent, inner, out_shape) = match axis {
            Axis::All => (1, ta.len(), 1, Vec::new()),
            Axis::Dim(d) => {
                if d >= ta.rank() {
                    return Err(AutogradError::InvalidAxis {
                        axis: d,
                        shape: ta.shape().to_vec(),
                    });
                }
                let s = ta.shape();
                let mut out_shape = s.to_vec();
                out_shape.remove(d);
                (
                    s[..d].iter().product(),
                    s[d],
                    s[d + 1..].iter().product(),
                    out_shape,
                )
            }
        };
        if extent == 0 {
            return Err(AutogradError::EmptyReduction);
        }
        let src = ta.data();
        let mut out = vec![0.0; outer * inner];
        let mut arg = Vec::new();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| src[(o * extent + j) * inner + i];
                out[o * inner + i] = match kind {
                    ReduceKind::Sum => (0..extent).map(at).sum(),
                    ReduceKind::Mean => (0..extent).map(at).sum::<f64>() / extent as f64,
                    ReduceKind::Max | ReduceKind::Argmax => {
                        let mut best = 0;
                        for j in 1..extent {
                            if at(j) > at(best) {
                                best = j;
                            }
                        }
                        arg.push(best);
                        if kind == ReduceKind::Max {
                            at(best)
                        } else {
                            best as f64
                        }
                    }
                };
            }
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = kind != ReduceKind::Argmax && self.any_grad(&[a]);
        Ok(self.push(
            value,
            Op::Reduce {
                kind,
                a,
                outer,
                extent,
                inner,
                arg,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutogradError> {
        self.reduce(ReduceKind::Sum, a, Axis::All)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutogradError> {
        self.reduce(ReduceKind::Mean, a, Axis::All)
    }

    /// Forward identity; contributes nothing to the reverse pass.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var, AutogradError> {
        self.ensure_live()?;
        let value = self.value(a).clone();
        Ok(self.push(value, Op::StopGradient, false))
    }

    /// Gathers rows of a 2-D array, in the given order.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, AutogradError> {
        self.ensure_live()?;
        let ta = self.value(a);
        check_same_rank("select_rows", ta, 2)?;
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &row in rows {
            if row >= r {
                return Err(AutogradError::InvalidAxis {
                    axis: row,
                    shape: ta.shape().to_vec(),
                });
            }
            out.extend_from_slice(&ta.data()[row * c..(row + 1) * c]);
        }
        let value = Tensor::new(vec![rows.len(), c], out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            value,
            Op::SelectRows {
                a,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Flattens each part and concatenates into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutogradError> {
        self.ensure_live()?;
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
        }
        let value = Tensor::vector(out);
        let rg = self.any_grad(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Records an externally computed value with its reverse rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        rule: Box<dyn CustomBackward>,
    ) -> Result<Var, AutogradError> {
        self.ensure_live()?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            rg,
        ))
    }

    /// Smallest `|x|` over all ReLU inputs; finite-difference checks treat
    /// graphs with a small margin as sitting on a kink.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Activation {
                    kind: ActivationKind::Relu,
                    a,
                } => Some(a),
                _ => None,
            })
            .flat_map(|a| self.nodes[a.0].value.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Sign pattern (`x > 0`) of every ReLU input, in evaluation order.
    /// Two evaluations with equal patterns sit on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Activation {
                    kind: ActivationKind::Relu,
                    a,
                } => Some(a),
                _ => None,
            })
            .flat_map(|a| self.nodes[a.0].value.data().iter().map(|v| *v > 0.0))
            .collect()
    }

    /// First node (in evaluation order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (Var(i), n.op.name()))
    }

    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.name()
    }

    /// Reverse pass from a scalar loss. Consumes the graph.
    pub fn backward(&mut self, loss: Var) -> Result<GradientRecord, AutogradError> {
        self.ensure_live()?;
        let tl = self.value(loss);
        if !tl.is_scalar() {
            return Err(AutogradError::NonScalarLoss {
                shape: tl.shape().to_vec(),
            });
        }
        let seed = Tensor::full(tl.shape().to_vec(), 1.0);
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(seed);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            for (input, contribution) in self.reverse_rule(idx, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        let mut record = GradientRecord::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                record.leaves.insert(Var(idx), g);
                if let Some(id) = node.param {
                    record.params.insert(id, Var(idx));
                }
            }
        }
        Ok(record)
    }

    fn reverse_rule(&self, idx: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::StopGradient => Vec::new(),
            Op::Elementwise { kind, a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let at = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                let n = g.len();
                let gd = g.data();
                let (ga, gb): (Vec<f64>, Vec<f64>) = (0..n)
                    .map(|i| {
                        let (x, y) = (at(ta.data(), i), at(tb.data(), i));
                        match kind {
                            ElementwiseKind::Add => (gd[i], gd[i]),
                            ElementwiseKind::Sub => (gd[i], -gd[i]),
                            ElementwiseKind::Mul => (gd[i] * y, gd[i] * x),
                            ElementwiseKind::Div => (gd[i] / y, -gd[i] * x / (y * y)),
                        }
                    })
                    .unzip();
                let fold = |t: &Tensor, full: Vec<f64>| {
                    if t.len() == n {
                        Tensor::new(t.shape().to_vec(), full).expect("same extent")
                    } else {
                        Tensor::new(t.shape().to_vec(), vec![full.iter().sum()]).expect("scalar")
                    }
                };
                vec![(*a, fold(ta, ga)), (*b, fold(tb, gb))]
            }
            Op::MatMul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let p = tb.shape()[1];
                let mut ga = vec![0.0; m * k];
                gemm(
                    MatRef::new(g.data(), m, p),
                    MatRef::new(tb.data(), k, p).t(),
                    0.0,
                    &mut ga,
                );
                let mut gb = vec![0.0; k * p];
                gemm(
                    MatRef::new(ta.data(), m, k).t(),
                    MatRef::new(g.data(), m, p),
                    0.0,
                    &mut gb,
                );
                vec![
                    (*a, Tensor::new(vec![m, k], ga).expect("shape")),
                    (*b, Tensor::new(vec![k, p], gb).expect("shape")),
                ]
            }
            Op::Transpose { a } => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] = g.data()[j * r + i];
                    }
                }
                vec![(*a, Tensor::new(vec![r, c], out).expect("shape"))]
            }
            Op::Reshape { a } => {
                vec![(
                    *a,
                    g.clone()
                        .reshape(val(*a).shape().to_vec())
                        .expect("same extent"),
                )]
            }
            Op::Conv2d {
                input,
                kernel,
                geometry,
            } => {
                let (ti, tk) = (val(*input), val(*kernel));
                let (gi, gk) = geometry.backward(ti.data(), tk.data(), g.data());
                vec![
                    (*input, Tensor::new(ti.shape().to_vec(), gi).expect("shape")),
                    (
                        *kernel,
                        Tensor::new(tk.shape().to_vec(), gk).expect("shape"),
                    ),
                ]
            }
            Op::Activation { kind, a } => {
                let ta = val(*a);
                let data: Vec<f64> = match kind {
                    ActivationKind::Relu => ta
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                    ActivationKind::Log => ta
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(x, g)| if *x > LOG_FLOOR { g / x } else { 0.0 })
                        .collect(),
                    ActivationKind::Softmax => {
                        let y = &node.value;
                        let last = *y.shape().last().expect("rank ≥ 1");
                        let mut out = vec![0.0; y.len()];
                        for ((yr, gr), or) in y
                            .data()
                            .chunks(last)
                            .zip(g.data().chunks(last))
                            .zip(out.chunks_mut(last))
                        {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..last {
                                or[j] = yr[j] * (gr[j] - dot);
                            }
                        }
                        out
                    }
                };
                vec![(*a, Tensor::new(ta.shape().to_vec(), data).expect("shape"))]
            }
            Op::CrossEntropy {
                logits,
                probs,
                label,
            } => {
                let s = g.item();
                let data = probs
                    .iter()
                    .enumerate()
                    .map(|(j, p)| s * (p - if j == *label { 1.0 } else { 0.0 }))
                    .collect();
                vec![(*logits, Tensor::vector(data))]
            }
            Op::KlDivergence {
                p,
                q,
                p_probs,
                log_ratio,
                q_probs,
            } => {
                let s = g.item();
                let kl = node.value.item();
                let gp = p_probs
                    .iter()
                    .zip(log_ratio)
                    .map(|(pp, r)| s * pp * (r - kl))
                    .collect();
                let gq = q_probs
                    .iter()
                    .zip(p_probs)
                    .map(|(qq, pp)| s * (qq - pp))
                    .collect();
                vec![(*p, Tensor::vector(gp)), (*q, Tensor::vector(gq))]
            }
            Op::Reduce {
                kind,
                a,
                outer,
                extent,
                inner,
                arg,
            } => {
                let ta = val(*a);
                let mut out = vec![0.0; ta.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let gv = g.data()[o * inner + i];
                        match kind {
                            ReduceKind::Sum | ReduceKind::Mean => {
                                let v = if *kind == ReduceKind::Mean {
                                    gv / *extent as f64
                                } else {
                                    gv
                                };
                                for j in 0..*extent {
                                    out[(o * extent + j) * inner + i] = v;
                                }
                            }
                            ReduceKind::Max => {
                                let j = arg[o * inner + i];
                                out[(o * extent + j) * inner + i] = gv;
                            }
                            ReduceKind::Argmax => {}
                        }
                    }
                }
                vec![(*a, Tensor::new(ta.shape().to_vec(), out).expect("shape"))]
            }
            Op::SelectRows { a, rows } => {
                let ta = val(*a);
                let c = ta.shape()[1];
                let mut out = vec![0.0; ta.len()];
                for (k, &row) in rows.iter().enumerate() {
                    for j in 0..c {
                        out[row * c + j] += g.data()[k * c + j];
                    }
                }
                vec![(*a, Tensor::new(ta.shape().to_vec(), out).expect("shape"))]
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let tp = val(*p);
                    let slice = g.data()[offset..offset + tp.len()].to_vec();
                    offset += tp.len();
                    out.push((*p, Tensor::new(tp.shape().to_vec(), slice).expect("shape")));
                }
                out
            }
            Op::Custom { inputs, rule } => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                rule.backward(&tensors, &node.value, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(g, v)| g.map(|g| (*v, g)))
                    .collect()
            }
        }
    }
}
