//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Leaves are either trainable inputs (gradients are accumulated for them)
//! or constants. [`Graph::backward`] walks the tape in reverse and returns
//! a [`Gradients`] table indexed by [`Var`].

use crate::error::{Error, Result};
use crate::ops::{self, BatchStats};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        stats: BatchStats<T>,
        train: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Concat(Vec<Var>),
    IndexChannels {
        input: Var,
        index: Vec<usize>,
    },
    AvgPool {
        input: Var,
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    GroupLasso {
        weight: Var,
        rows: usize,
        cols: usize,
        groups: usize,
        norms: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded forward computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Trainable leaf; its gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let out = ops::group_conv2d(
            self.value(input),
            self.value(weight),
            stride,
            padding,
            groups,
        )?;
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(
            out,
            Op::Conv {
                input,
                weight,
                stride,
                padding,
                groups,
            },
            rg,
        ))
    }

    /// Batch norm. In training mode the batch statistics are returned so the
    /// caller can update its running averages.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        train: bool,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let (out, stats) = ops::batch_norm(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            train,
            eps,
        )?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                stats: stats.clone(),
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e * factor).collect();
        let out = Tensor::from_vec(v.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.len() == 1 {
            return Ok(inputs[0]);
        }
        let refs: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&refs)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(out, Op::Concat(inputs.to_vec()), rg))
    }

    pub fn index_channels(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let out = ops::index_channels(self.value(input), index)?;
        let rg = self.rg(input);
        Ok(self.push(
            out,
            Op::IndexChannels {
                input,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Group shuffle of channels (see [`ops::shuffle_index`]).
    pub fn permute_channels(&mut self, input: Var, groups: usize) -> Result<Var> {
        if groups == 1 {
            return Ok(input);
        }
        let index = ops::shuffle_index(self.value(input).dim(1), groups)?;
        self.index_channels(input, &index)
    }

    pub fn avg_pool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let out = ops::avg_pool2d(self.value(input), kernel, stride)?;
        let rg = self.rg(input);
        Ok(self.push(
            out,
            Op::AvgPool {
                input,
                kernel,
                stride,
            },
            rg,
        ))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::GlobalAvgPool(input), rg))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = ops::linear(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        )?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Inverted dropout with a caller-supplied keep mask of 0/1 values.
    pub fn dropout(&mut self, input: Var, keep: &[bool], rate: f64) -> Result<Var> {
        let v = self.value(input);
        if keep.len() != v.len() {
            return Err(Error::ShapeMismatch {
                op: "dropout",
                left_name: "input length",
                left: v.len(),
                right_name: "mask length",
                right: keep.len(),
            });
        }
        let s = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> = keep
            .iter()
            .map(|&k| if k { s } else { T::zero() })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::from_vec(v.shape(), data)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::Dropout { input, mask }, rg))
    }

    /// Group-lasso penalty of an `O×R` (or `[O, R, 1, 1]`) weight whose rows
    /// are split into `groups` contiguous blocks.
    pub fn group_lasso(&mut self, weight: Var, groups: usize) -> Result<Var> {
        let w = self.value(weight);
        let rows = w.dim(0);
        let cols = w.len() / rows.max(1);
        let (value, norms) = ops::group_lasso(w.data(), rows, cols, groups)?;
        let rg = self.rg(weight);
        Ok(self.push(
            Tensor::scalar(value),
            Op::GroupLasso {
                weight,
                rows,
                cols,
                groups,
                norms,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("output must be scalar, got {:?}", out.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop(node, &g, &mut grads)?;
            // Only leaves keep their gradient in the returned table.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                stride,
                padding,
                groups,
            } => {
                let (dx, dw) = ops::group_conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    *stride,
                    *padding,
                    *groups,
                    self.rg(*input),
                )?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *weight, dw);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                stats,
                train,
            } => {
                let (dx, dg, db) = ops::batch_norm_backward(
                    self.value(*input),
                    self.value(*gamma),
                    stats,
                    g,
                    *train,
                );
                self.accumulate(grads, *input, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::Relu(x) => {
                let dx = ops::relu_backward(&node.value, g);
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.iter().zip(va).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Scale(x, f) => {
                self.accumulate(grads, *x, g.iter().map(|&d| d * *f).collect());
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Concat(inputs) => {
                let first = self.value(inputs[0]);
                let batch = first.dim(0);
                let plane: usize = first.shape()[2..].iter().product();
                let channels: Vec<usize> = inputs.iter().map(|&v| self.value(v).dim(1)).collect();
                let parts = ops::concat_channels_backward(g, batch, &channels, plane);
                for (&v, part) in inputs.iter().zip(parts) {
                    self.accumulate(grads, v, part);
                }
            }
            Op::IndexChannels { input, index } => {
                let dx = ops::index_channels_backward(self.value(*input).shape(), index, g);
                self.accumulate(grads, *input, dx);
            }
            Op::AvgPool {
                input,
                kernel,
                stride,
            } => {
                let dx = ops::avg_pool2d_backward(self.value(*input).shape(), *kernel, *stride, g);
                self.accumulate(grads, *input, dx);
            }
            Op::GlobalAvgPool(input) => {
                let dx = ops::global_avg_pool_backward(self.value(*input).shape(), g);
                self.accumulate(grads, *input, dx);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (dx, dw, db) = ops::linear_backward(self.value(*input), self.value(*weight), g);
                self.accumulate(grads, *input, dx);
                self.accumulate(grads, *weight, dw);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let d = ops::softmax_cross_entropy_backward(probs, labels, g[0]);
                self.accumulate(grads, *logits, d);
            }
            Op::Dropout { input, mask } => {
                let d = g.iter().zip(mask).map(|(&d, &m)| d * m).collect();
                self.accumulate(grads, *input, d);
            }
            Op::GroupLasso {
                weight,
                rows,
                cols,
                groups,
                norms,
            } => {
                let d = ops::group_lasso_backward(
                    self.value(*weight).data(),
                    norms,
                    *rows,
                    *cols,
                    *groups,
                    g[0],
                );
                self.accumulate(grads, *weight, d);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.input(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.input(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let m = g.constant(Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap());
        let p = g.mul(w, m).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[0.0, 1.0]);
        assert!(grads.get(m).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let w = g.input(Tensor::zeros(&[2]));
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let w = g.input(Tensor::from_vec(&[1], vec![3.0]).unwrap());
        let a = g.add(w, w).unwrap();
        let s = g.sum(a);
        assert_eq!(g.backward(s).unwrap().get(w).unwrap(), &[2.0]);
    }
}
