use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{self, ConvSpec};
use super::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        spec: ConvSpec,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Relu {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    Mse {
        pred: usize,
        target: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

/// Records a forward pass so that [`Tape::backward`] can replay it in reverse.
#[derive(Debug)]
pub struct Tape<T = f64> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape == self.id && v.index < self.nodes.len() {
            Ok(v.index)
        } else {
            Err(Error::MissingForward)
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let y = ops::conv2d(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            &self.nodes[bi].value,
            spec,
        )?;
        Ok(self.push(
            y,
            Op::Conv2d {
                x: xi,
                w: wi,
                b: bi,
                spec,
            },
        ))
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let (y, argmax) = ops::maxpool2d(&self.nodes[xi].value, k, stride)?;
        Ok(self.push(y, Op::MaxPool { x: xi, argmax }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let y = ops::linear(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            &self.nodes[bi].value,
        )?;
        Ok(self.push(
            y,
            Op::Linear {
                x: xi,
                w: wi,
                b: bi,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let y = ops::relu(&self.nodes[xi].value);
        Ok(self.push(y, Op::Relu { x: xi }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let y = self.nodes[xi].value.reshape(shape)?;
        Ok(self.push(y, Op::Reshape { x: xi }))
    }

    /// Flattens all but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x)?.shape().to_vec();
        let lead = shape.first().copied().unwrap_or(1);
        let rest: usize = shape.iter().skip(1).product();
        self.reshape(x, &[lead, rest])
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (pi, ti) = (self.idx(pred)?, self.idx(target)?);
        let loss = ops::mse(&self.nodes[pi].value, &self.nodes[ti].value)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred: pi,
                target: ti,
            },
        ))
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every
    /// recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[li] = Some(Tensor::full(self.nodes[li].value.shape(), T::one()));

        fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
            *slot = Some(match slot.take() {
                Some(prev) => prev.add(&g)?,
                None => g,
            });
            Ok(())
        }

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, spec } => {
                    let (gx, gw, gb) = ops::conv2d_backward(
                        &self.nodes[*x].value,
                        &self.nodes[*w].value,
                        &self.nodes[*b].value,
                        *spec,
                        &g,
                    )?;
                    accumulate(&mut grads[*x], gx)?;
                    accumulate(&mut grads[*w], gw)?;
                    accumulate(&mut grads[*b], gb)?;
                }
                Op::MaxPool { x, argmax } => {
                    let gx = ops::maxpool2d_backward(self.nodes[*x].value.shape(), argmax, &g)?;
                    accumulate(&mut grads[*x], gx)?;
                }
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) = ops::linear_backward(
                        &self.nodes[*x].value,
                        &self.nodes[*w].value,
                        &self.nodes[*b].value,
                        &g,
                    )?;
                    accumulate(&mut grads[*x], gx)?;
                    accumulate(&mut grads[*w], gw)?;
                    accumulate(&mut grads[*b], gb)?;
                }
                Op::Relu { x } => {
                    let gx = ops::relu_backward(&self.nodes[*x].value, &g)?;
                    accumulate(&mut grads[*x], gx)?;
                }
                Op::Reshape { x } => {
                    let gx = g.reshape(self.nodes[*x].value.shape())?;
                    accumulate(&mut grads[*x], gx)?;
                }
                Op::Mse { pred, target } => {
                    let (p, t) = (&self.nodes[*pred].value, &self.nodes[*target].value);
                    let gp = ops::mse_backward(p, t, g.item())?;
                    let gt = gp.scale(-T::one());
                    accumulate(&mut grads[*pred], gp)?;
                    accumulate(&mut grads[*target], gt)?;
                }
            }
            // leaves keep their gradient for the caller
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; zeros-shaped `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Result<Option<&Tensor<T>>> {
        if v.tape != self.tape || v.index >= self.grads.len() {
            return Err(Error::MissingForward);
        }
        Ok(self.grads[v.index].as_ref())
    }

    /// Gradient of a leaf, or zeros shaped like `like` when it is unused.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Result<Tensor<T>> {
        Ok(self.get(v)?.cloned().unwrap_or_else(|| Tensor::zeros(like)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn foreign_var_is_rejected() {
        let mut a = Tape::<f64>::new();
        let mut b = Tape::<f64>::new();
        let x = a.leaf(Tensor::scalar(1.0));
        assert!(matches!(b.relu(x), Err(Error::MissingForward)));
        let y = b.leaf(Tensor::scalar(2.0));
        assert!(matches!(a.backward(y), Err(Error::MissingForward)));
    }

    #[test]
    fn mse_gradient_by_hand() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_vec(&[2], vec![0.0, 2.0]).unwrap());
        let t = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap());
        let l = tape.mse(p, t).unwrap();
        assert_eq!(tape.value(l).unwrap().item(), 1.0);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().unwrap().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn reused_value_accumulates() {
        // loss = mse(relu(x), 0) with x used as both pred path and target
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[1], vec![3.0]).unwrap());
        let r = tape.relu(x).unwrap();
        let l = tape.mse(r, x).unwrap();
        let g = tape.backward(l).unwrap();
        // d/dx (relu(x) - x)^2 = 0 for x > 0
        assert_eq!(g.get(x).unwrap().unwrap().item(), 0.0);
    }
}
