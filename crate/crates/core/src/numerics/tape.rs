//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is topologically sorted
//! by construction. [`Tape::backward`] walks it once in reverse; every node is
//! visited at most once and gradients accumulate in a fixed order, which makes
//! replays bit-identical.

use std::sync::Arc;

use super::{ops, sum, Real, Tensor};
use crate::error::{Error, Result};
use crate::rope::RopeSchedule;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulLast(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, T),
    RmsNorm(Var, Var),
    Swiglu(Var),
    Rope {
        x: Var,
        positions: Vec<usize>,
        schedule: Arc<RopeSchedule>,
    },
    MaskedSoftmax {
        x: Var,
        scale: T,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SplitHeads(Var),
    MergeHeads(Var),
    Head(Var, usize),
    Stack(Vec<Var>),
    PairExpand(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        norm: T,
        probs: Tensor<T>,
    },
    Sum(Var),
}

impl<T: Real> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulBt(a, b) | Add(a, b) | Mul(a, b) | MulLast(a, b)
            | MulScalar(a, b) | RmsNorm(a, b) => vec![*a, *b],
            Scale(a, _) | Swiglu(a) | SplitHeads(a) | MergeHeads(a) | Head(a, _)
            | PairExpand(a) | Sum(a) => vec![*a],
            Rope { x, .. } | MaskedSoftmax { x, .. } => vec![*x],
            Gather { table, .. } => vec![*table],
            CrossEntropy { logits, .. } => vec![*logits],
            Stack(parts) => parts.clone(),
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            MatMul(..) => "matmul",
            MatMulBt(..) => "matmul_bt",
            Add(..) => "add",
            Mul(..) => "mul",
            MulLast(..) => "mul_last",
            MulScalar(..) => "mul_scalar",
            Scale(..) => "scale",
            RmsNorm(..) => "rmsnorm",
            Swiglu(..) => "swiglu",
            Rope { .. } => "rope",
            MaskedSoftmax { .. } => "masked_softmax",
            Gather { .. } => "gather",
            SplitHeads(..) => "split_heads",
            MergeHeads(..) => "merge_heads",
            Head(..) => "head",
            Stack(..) => "stack",
            PairExpand(..) => "pair_expand",
            CrossEntropy { .. } => "cross_entropy",
            Sum(..) => "sum",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T: Real> {
    op: Op<T>,
    value: Tensor<T>,
    scope: Option<usize>,
}

/// Records a computation for one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
    scope: Option<usize>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Real = f64> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when the variable does not influence the differentiated root.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            scope: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tags subsequently recorded nodes (the model uses the layer index).
    pub fn set_scope(&mut self, scope: Option<usize>) {
        self.scope = scope;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Evaluation(format!("{} produced a non-finite value", op.name())));
        }
        self.nodes.push(Node {
            op,
            value,
            scope: self.scope,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            scope: self.scope,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        self.push(Op::MatMul(a, b), v)
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul_bt(self.value(a), self.value(b))?;
        self.push(Op::MatMulBt(a, b), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        self.push(Op::Add(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), v)
    }

    /// Broadcasts a `[D]` vector over every last-axis row of `x`.
    pub fn mul_last(&mut self, x: Var, w: Var) -> Result<Var> {
        let wv = self.value(w);
        if wv.ndim() != 1 {
            return Err(Error::dim("mul_last", format!("weight shape {:?}", wv.shape())));
        }
        let v = ops::mul_last(self.value(x), wv.data())?;
        self.push(Op::MulLast(x, w), v)
    }

    /// Multiplies by a learnable scalar stored as a `[1]` tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(Error::dim("mul_scalar", format!("scalar shape {:?}", sv.shape())));
        }
        let c = sv.data()[0];
        let v = self.value(x).scale(c);
        self.push(Op::MulScalar(x, s), v)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let v = self.value(x).scale(c);
        self.push(Op::Scale(x, c), v)
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let v = ops::rmsnorm(self.value(x), self.value(gain))?;
        self.push(Op::RmsNorm(x, gain), v)
    }

    pub fn swiglu(&mut self, x: Var) -> Result<Var> {
        let v = ops::swiglu(self.value(x))?;
        self.push(Op::Swiglu(x), v)
    }

    /// Rotary embedding of a `[.. × s × D]` tensor at the given positions.
    pub fn rope(&mut self, x: Var, positions: &[usize], schedule: &Arc<RopeSchedule>) -> Result<Var> {
        let v = schedule.rotate(self.value(x), positions, false)?;
        self.push(
            Op::Rope {
                x,
                positions: positions.to_vec(),
                schedule: Arc::clone(schedule),
            },
            v,
        )
    }

    pub fn masked_softmax(
        &mut self,
        x: Var,
        scale: T,
        query_positions: &[usize],
        key_positions: &[usize],
    ) -> Result<Var> {
        let v = ops::masked_softmax(self.value(x), scale, query_positions, key_positions)?;
        self.push(Op::MaskedSoftmax { x, scale }, v)
    }

    pub fn softmax_causal(&mut self, x: Var, scale: T) -> Result<Var> {
        let v = ops::softmax_causal(self.value(x), scale)?;
        self.push(Op::MaskedSoftmax { x, scale }, v)
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let v = ops::gather_rows(self.value(table), ids)?;
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            v,
        )
    }

    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let v = ops::split_heads(self.value(x), heads)?;
        self.push(Op::SplitHeads(x), v)
    }

    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let v = ops::merge_heads(self.value(x))?;
        self.push(Op::MergeHeads(x), v)
    }

    pub fn head(&mut self, x: Var, h: usize) -> Result<Var> {
        let v = ops::head(self.value(x), h)?;
        self.push(Op::Head(x, h), v)
    }

    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::stack(&values)?;
        self.push(Op::Stack(parts.to_vec()), v)
    }

    /// Expands `D/2` free parameters to `D` entries with `w[2j] = w[2j+1]`.
    pub fn pair_expand(&mut self, free: Var) -> Result<Var> {
        let f = self.value(free);
        if f.ndim() != 1 {
            return Err(Error::dim("pair_expand", format!("free shape {:?}", f.shape())));
        }
        let v = Tensor::from_vec(f.data().iter().flat_map(|&x| [x, x]).collect());
        self.push(Op::PairExpand(free), v)
    }

    /// `Σᵢ weightᵢ · (−log softmax(logitsᵢ)[targetᵢ]) / norm` over rows of `logits`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[T],
        norm: T,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, vocab) = lv.dim2("cross_entropy")?;
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::dim(
                "cross_entropy",
                format!("{rows} rows, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Input(format!("target {t} outside vocabulary of {vocab}")));
        }
        let logp = ops::log_softmax(lv);
        let mut loss = T::zero();
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            loss -= w * logp.row(r)[t];
        }
        let probs = logp.map(T::exp);
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                norm,
                probs,
            },
            Tensor::scalar(loss / norm),
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), v)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::dim(
                "backward",
                format!("root must be scalar, got shape {:?}", rv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape().to_vec(), T::one()));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            for (parent, contrib) in self.local_grads(&node.op, &node.value, &g)? {
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        use Op::*;
        let val = |v: &Var| &self.nodes[v.0].value;
        Ok(match op {
            Leaf => vec![],
            MatMul(a, b) => vec![
                (*a, ops::matmul_bt(g, val(b))?),
                (*b, ops::matmul(&ops::transpose(val(a))?, g)?),
            ],
            MatMulBt(a, b) => vec![
                (*a, ops::matmul(g, val(b))?),
                (*b, ops::matmul(&ops::transpose(g)?, val(a))?),
            ],
            Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Mul(a, b) => vec![
                (*a, g.zip_map(val(b), "mul", |x, y| x * y)?),
                (*b, g.zip_map(val(a), "mul", |x, y| x * y)?),
            ],
            MulLast(x, w) => {
                let wv = val(w);
                let xv = val(x);
                let d = wv.numel();
                let mut dw = vec![T::zero(); d];
                for (grow, xrow) in g.data().chunks(d).zip(xv.data().chunks(d)) {
                    for j in 0..d {
                        dw[j] += grow[j] * xrow[j];
                    }
                }
                vec![
                    (*x, ops::mul_last(g, wv.data())?),
                    (*w, Tensor::from_parts(wv.shape().to_vec(), dw)),
                ]
            }
            MulScalar(x, s) => {
                let sv = val(s);
                let c = sv.data()[0];
                let ds = sum(g.data().iter().zip(val(x).data()).map(|(&a, &b)| a * b));
                vec![
                    (*x, g.scale(c)),
                    (*s, Tensor::from_parts(sv.shape().to_vec(), vec![ds])),
                ]
            }
            Scale(x, c) => vec![(*x, g.scale(*c))],
            RmsNorm(x, gain) => {
                let (xv, gv) = (val(x), val(gain));
                let d = gv.numel();
                let dt = T::of(d as f64);
                let eps = T::of(ops::RMSNORM_EPS);
                let mut dx = Vec::with_capacity(xv.numel());
                let mut dg = vec![T::zero(); d];
                for (xrow, grow) in xv.data().chunks(d).zip(g.data().chunks(d)) {
                    let ms = sum(xrow.iter().map(|&v| v * v)) / dt;
                    let inv = (ms + eps).sqrt().recip();
                    let mut dot = T::zero();
                    for j in 0..d {
                        dot += gv.data()[j] * grow[j] * xrow[j];
                        dg[j] += grow[j] * xrow[j] * inv;
                    }
                    let inv3 = inv * inv * inv;
                    for j in 0..d {
                        dx.push(inv * gv.data()[j] * grow[j] - inv3 * xrow[j] * dot / dt);
                    }
                }
                vec![
                    (*x, Tensor::from_parts(xv.shape().to_vec(), dx)),
                    (*gain, Tensor::from_parts(gv.shape().to_vec(), dg)),
                ]
            }
            Swiglu(x) => {
                let xv = val(x);
                let two_h = xv.last_dim();
                let h = two_h / 2;
                let mut dx = Vec::with_capacity(xv.numel());
                for (row, grow) in xv.data().chunks(two_h).zip(g.data().chunks(h)) {
                    let (gate, value) = row.split_at(h);
                    for j in 0..h {
                        let s = ops::sigmoid(gate[j]);
                        let dsilu = s * (T::one() + gate[j] * (T::one() - s));
                        dx.push(grow[j] * value[j] * dsilu);
                    }
                    for j in 0..h {
                        dx.push(grow[j] * ops::silu(gate[j]));
                    }
                }
                vec![(*x, Tensor::from_parts(xv.shape().to_vec(), dx))]
            }
            Rope {
                x,
                positions,
                schedule,
            } => vec![(*x, schedule.rotate(g, positions, true)?)],
            MaskedSoftmax { x, scale } => {
                let c = out.last_dim();
                let mut dx = Vec::with_capacity(out.numel());
                for (prow, grow) in out.data().chunks(c).zip(g.data().chunks(c)) {
                    let inner = ops::dot(prow, grow);
                    dx.extend(
                        prow.iter()
                            .zip(grow)
                            .map(|(&p, &gv)| *scale * p * (gv - inner)),
                    );
                }
                vec![(*x, Tensor::from_parts(out.shape().to_vec(), dx))]
            }
            Gather { table, ids } => {
                let tv = val(table);
                let d = tv.last_dim();
                let mut dt = Tensor::zeros(tv.shape().to_vec());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt.data_mut()[id * d..(id + 1) * d];
                    for (a, &b) in dst.iter_mut().zip(g.row(r)) {
                        *a += b;
                    }
                }
                vec![(*table, dt)]
            }
            SplitHeads(x) => vec![(*x, ops::merge_heads(g)?)],
            MergeHeads(x) => {
                let heads = val(x).shape()[0];
                vec![(*x, ops::split_heads(g, heads)?)]
            }
            Head(x, h) => {
                let xv = val(x);
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                let n = g.numel();
                dx.data_mut()[h * n..(h + 1) * n].copy_from_slice(g.data());
                vec![(*x, dx)]
            }
            Stack(parts) => {
                let n = g.numel() / parts.len();
                parts
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let shape = val(p).shape().to_vec();
                        (*p, Tensor::from_parts(shape, g.data()[i * n..(i + 1) * n].to_vec()))
                    })
                    .collect()
            }
            PairExpand(free) => {
                let dfree = g.data().chunks(2).map(|c| c[0] + c[1]).collect();
                vec![(*free, Tensor::from_vec(dfree))]
            }
            CrossEntropy {
                logits,
                targets,
                weights,
                norm,
                probs,
            } => {
                let upstream = g.data()[0];
                let vocab = probs.last_dim();
                let mut dl = probs.data().to_vec();
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let coef = upstream * w / *norm;
                    let row = &mut dl[r * vocab..(r + 1) * vocab];
                    row[t] -= T::one();
                    for v in row.iter_mut() {
                        *v *= coef;
                    }
                }
                vec![(*logits, Tensor::from_parts(probs.shape().to_vec(), dl))]
            }
            Sum(x) => vec![(*x, Tensor::full(val(x).shape().to_vec(), g.data()[0]))],
        })
    }

    /// Marks which nodes lie on some path to `root`.
    pub fn reaches(&self, root: Var) -> Vec<bool> {
        let mut live = vec![false; self.nodes.len()];
        live[root.0] = true;
        for idx in (0..=root.0).rev() {
            if live[idx] {
                for p in self.nodes[idx].op.parents() {
                    live[p.0] = true;
                }
            }
        }
        live
    }

    /// Scopes of the nodes that consume `var` directly and feed `root`.
    /// Each distinct scope is a separate gradient path back into `var`.
    pub fn consumer_scopes(&self, var: Var, root: Var) -> Vec<Option<usize>> {
        let live = self.reaches(root);
        let mut scopes: Vec<Option<usize>> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(i, n)| live[*i] && n.op.parents().contains(&var))
            .map(|(_, n)| n.scope)
            .collect();
        scopes.sort();
        scopes.dedup();
        scopes
    }
}
