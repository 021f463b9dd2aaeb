//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to compute its vector-Jacobian product. Nodes only reference
//! earlier nodes, so walking the tape backwards visits every node after all
//! of its consumers.

use super::ops::{self, BatchStats};
use super::tensor::{Real, Tensor};
use super::NnError;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BatchStats<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Dot {
        x: Var,
        weights: Tensor<T>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } => {
                let mut p = vec![*x, *w];
                p.extend(b);
                p
            }
            Op::BatchNormTrain { x, gamma, beta, .. } | Op::BatchNormEval { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Relu(x) | Op::GlobalAvgPool(x) | Op::Sum(x) | Op::Softmax(x) => vec![*x],
            Op::MaxPool { x, .. } | Op::Dot { x, .. } => vec![*x],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel batch moments produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Elements per channel that went into the moments.
    pub count: usize,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, NnError> {
        let y = ops::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        Ok(self.push(y, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchMoments<T>), NnError> {
        let (y, stats) = ops::batchnorm_train_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let d = self.value(x).dims();
        let moments = BatchMoments {
            mean: stats.mean.clone(),
            var: stats.var.clone(),
            count: d[0] * d[2] * d[3],
        };
        let v = self.push(
            y,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                stats,
            },
        );
        Ok((v, moments))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var, NnError> {
        let (y, inv_std) = ops::batchnorm_eval_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        Ok(self.push(
            y,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu_forward(self.value(x));
        self.push(y, Op::Relu(x))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var, NnError> {
        let (y, argmax) = ops::maxpool_forward(self.value(x), kernel, stride, pad)?;
        Ok(self.push(y, Op::MaxPool { x, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, NnError> {
        let y = ops::global_avg_pool_forward(self.value(x))?;
        Ok(self.push(y, Op::GlobalAvgPool(x)))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let y = ops::linear_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<(), NnError> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(NnError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).dims(),
                self.value(b).dims()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_dims(a, b, "add")?;
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_dims(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p * q)
            .collect();
        let y = Tensor::from_vec(self.value(a).dims(), data)?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `Σ x ⊙ weights` against a constant tensor.
    pub fn dot(&mut self, x: Var, weights: Tensor<T>) -> Result<Var, NnError> {
        if weights.dims() != self.value(x).dims() {
            return Err(NnError::ShapeMismatch(format!(
                "dot: {:?} vs {:?}",
                self.value(x).dims(),
                weights.dims()
            )));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, weights }))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, NnError> {
        let y = ops::softmax_rows(self.value(x))?;
        Ok(self.push(y, Op::Softmax(x)))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NnError> {
        let (loss, probs) = ops::cross_entropy_forward(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NnError> {
        if self.value(loss).len() != 1 {
            return Err(NnError::NotScalar(self.value(loss).dims().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).dims(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            if node.op.parents().iter().any(|p| p.0 >= i) {
                return Err(NnError::GraphCycle(i));
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &dy, &mut grads)?;
        }
        // only leaves keep their gradients
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<(), NnError> {
        let mut emit = |v: Var, g: Tensor<T>| {
            if self.wants(v) {
                accumulate(grads, v, g);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let g = ops::conv2d_backward(self.value(*x), self.value(*w), dy, *stride, *pad, self.wants(*x))?;
                if let Some(dx) = g.dx {
                    emit(*x, dx);
                }
                emit(*w, g.dweight);
                if let Some(b) = b {
                    emit(*b, g.dbias);
                }
            }
            Op::BatchNormTrain { x, gamma, beta, stats } => {
                let (dx, dg, db) = ops::batchnorm_train_backward(dy, self.value(*gamma), stats);
                emit(*x, dx);
                emit(*gamma, dg);
                emit(*beta, db);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let [b, c, h, w] = dy.nchw()?;
                let plane = h * w;
                let xv = self.value(*x).data();
                let mut dx = Tensor::zeros(dy.dims());
                let mut dg = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                for s in 0..b {
                    for ch in 0..c {
                        let off = (s * c + ch) * plane;
                        let k = self.value(*gamma).data()[ch] * inv_std[ch];
                        for i in off..off + plane {
                            let d = dy.data()[i];
                            dx.data_mut()[i] = d * k;
                            dg.data_mut()[ch] += d * (xv[i] - mean[ch]) * inv_std[ch];
                            dbeta.data_mut()[ch] += d;
                        }
                    }
                }
                emit(*x, dx);
                emit(*gamma, dg);
                emit(*beta, dbeta);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let data = dy
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                emit(*x, Tensor::from_vec(dy.dims(), data)?);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).dims());
                for (&src, &d) in argmax.iter().zip(dy.data()) {
                    dx.data_mut()[src] += d;
                }
                emit(*x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let dims = self.value(*x).dims().to_vec();
                let plane = dims[2] * dims[3];
                let inv = T::one() / T::from_usize(plane).unwrap();
                let mut dx = Tensor::zeros(&dims);
                for (chunk, &d) in dx.data_mut().chunks_exact_mut(plane).zip(dy.data()) {
                    chunk.fill(d * inv);
                }
                emit(*x, dx);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, inp, out) = ops::linear_dims(xv, wv, self.value(*b))?;
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(&[batch, inp]);
                    T::gemm(batch, out, inp, dy.data(), false, wv.data(), false, T::zero(), dx.data_mut());
                    emit(*x, dx);
                }
                let mut dw = Tensor::zeros(&[out, inp]);
                T::gemm(out, batch, inp, dy.data(), true, xv.data(), false, T::zero(), dw.data_mut());
                emit(*w, dw);
                let mut db = Tensor::zeros(&[out]);
                for row in dy.data().chunks_exact(out) {
                    db.data_mut().iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                }
                emit(*b, db);
            }
            Op::Add(a, b) => {
                emit(*a, dy.clone());
                emit(*b, dy.clone());
            }
            Op::Mul(a, b) => {
                let prod = |other: Var| -> Result<Tensor<T>, NnError> {
                    let data = dy
                        .data()
                        .iter()
                        .zip(self.value(other).data())
                        .map(|(&d, &v)| d * v)
                        .collect();
                    Tensor::from_vec(dy.dims(), data)
                };
                let (da, db) = (prod(*b)?, prod(*a)?);
                emit(*a, da);
                emit(*b, db);
            }
            Op::Sum(x) => emit(*x, Tensor::full(self.value(*x).dims(), dy.item())),
            Op::Dot { x, weights } => emit(*x, weights.map(|w| w * dy.item())),
            Op::Softmax(x) => {
                let y = &node.value;
                let n = y.dims()[1];
                let mut dx = Tensor::zeros(y.dims());
                for ((dxr, yr), dyr) in dx
                    .data_mut()
                    .chunks_exact_mut(n)
                    .zip(y.data().chunks_exact(n))
                    .zip(dy.data().chunks_exact(n))
                {
                    let inner: T = yr.iter().zip(dyr).map(|(&p, &d)| p * d).sum();
                    for ((o, &p), &d) in dxr.iter_mut().zip(yr).zip(dyr) {
                        *o = p * (d - inner);
                    }
                }
                emit(*x, dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = probs.dims()[1];
                let scale = dy.item() / T::from_usize(labels.len()).unwrap();
                let mut dx = probs.clone();
                for (row, &l) in dx.data_mut().chunks_exact_mut(n).zip(labels) {
                    row[l] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                emit(*logits, dx);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of a scalar with respect to the graph's trainable leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when the leaf does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`; exactly zero when `v` is unused.
    pub fn wrt(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).dims()))
    }

    pub fn take(&mut self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).dims()))
    }
}
