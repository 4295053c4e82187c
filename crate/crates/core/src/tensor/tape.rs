use super::kernels::{self, ConvDims};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        dims: ConvDims,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu {
        x: Var,
    },
    Upsample2 {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    WeightedSq {
        pred: Var,
        target: Vec<T>,
        weight: Vec<T>,
        norm: T,
    },
    Combine {
        terms: Vec<(Var, T)>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records one forward pass; [`Tape::backward`] replays it in reverse.
///
/// Values are immutable once recorded. Gradients are written into each
/// node's tensor `grad` field.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        debug_assert!(value.is_finite() || matches!(op, Op::Input | Op::Param(_)));
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input)
    }

    /// Records a trainable parameter; `slot` identifies it in [`Tape::param_grads`].
    pub fn param(&mut self, slot: usize, value: &Tensor<T>) -> Var {
        let mut v = value.clone();
        v.clear_grad();
        self.push(v, Op::Param(slot))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Every recorded value in recording order.
    pub fn values(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.nodes.iter().map(|n| &n.value)
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (in_c, h, wd) = self.value(x).chw()?;
        let ws = self.value(w).shape().to_vec();
        let [out_c, wc, k, k2] = ws[..] else {
            return Err(Error::shape(format!(
                "conv weights must be 4-d, got {ws:?}"
            )));
        };
        if wc != in_c {
            return Err(Error::shape(format!(
                "conv input has {in_c} channels, weights expect {wc}"
            )));
        }
        if k != k2 || k % 2 == 0 || pad != (k - 1) / 2 {
            return Err(Error::shape(format!(
                "conv kernel {k}x{k2} with pad {pad}: need odd square kernel and pad (k-1)/2"
            )));
        }
        if self.value(b).len() != out_c {
            return Err(Error::shape(format!(
                "conv bias has {} entries, expected {out_c}",
                self.value(b).len()
            )));
        }
        let dims = ConvDims {
            in_c,
            out_c,
            h,
            w: wd,
            k,
            pad,
        };
        let out = kernels::conv2d_forward(
            dims,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let value = Tensor::new(vec![out_c, h, wd], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, dims }))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "maxpool2 needs even H and W, got {h}x{w}"
            )));
        }
        let (out, argmax) = kernels::maxpool2_forward(c, h, w, self.value(x).data());
        let value = Tensor::new(vec![c, h / 2, w / 2], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { x })
    }

    /// Bilinear x2 upsampling with half-pixel centres and clamped borders.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let out = kernels::resize_bilinear(c, h, w, self.value(x).data(), 2 * h, 2 * w);
        let value = Tensor::new(vec![c, 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Upsample2 { x }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, ha, wa) = self.value(a).chw()?;
        let (cb, hb, wb) = self.value(b).chw()?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::shape(format!(
                "concat spatial mismatch: {ha}x{wa} vs {hb}x{wb}"
            )));
        }
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(vec![ca + cb, ha, wa], data)?;
        Ok(self.push(value, Op::Concat { a, b }))
    }

    /// `sum(mask * (pred - target)^2) / max(1, count(mask == 1))`.
    pub fn masked_l2(&mut self, pred: Var, target: &Tensor<T>, mask: &Tensor<T>) -> Result<Var> {
        let count = mask.data().iter().filter(|&&m| m == T::one()).count();
        let norm = T::from_usize(count.max(1)).unwrap_or_else(T::one);
        self.weighted_sq_error(pred, target, mask, norm)
    }

    /// `sum(weight * (pred - target)^2) / norm`, a scalar.
    pub fn weighted_sq_error(
        &mut self,
        pred: Var,
        target: &Tensor<T>,
        weight: &Tensor<T>,
        norm: T,
    ) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.shape() != weight.shape() {
            return Err(Error::shape(format!(
                "loss shapes differ: pred {:?}, target {:?}, weight {:?}",
                p.shape(),
                target.shape(),
                weight.shape()
            )));
        }
        if !(norm > T::zero()) {
            return Err(Error::shape("loss normaliser must be positive".to_string()));
        }
        let mut s = T::zero();
        for ((&p, &t), &m) in p.data().iter().zip(target.data()).zip(weight.data()) {
            if m != T::zero() {
                let d = p - t;
                s += m * d * d;
            }
        }
        let op = Op::WeightedSq {
            pred,
            target: target.data().to_vec(),
            weight: weight.data().to_vec(),
            norm,
        };
        Ok(self.push(Tensor::scalar(s / norm), op))
    }

    /// `sum_i coeff_i * term_i` over scalar nodes.
    pub fn combine(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut s = T::zero();
        for &(v, c) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::shape(format!(
                    "combine expects scalars, got shape {:?}",
                    t.shape()
                )));
            }
            s += c * t.data()[0];
        }
        Ok(self.push(
            Tensor::scalar(s),
            Op::Combine {
                terms: terms.to_vec(),
            },
        ))
    }

    /// Reverse-mode sweep from the scalar `loss`. Previous gradients are replaced.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut done: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        fn add<T: Scalar>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
            match slot {
                Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
                None => *slot = Some(delta),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::Conv2d { x, w, dims, b } => {
                    let (gx, gw, gb) = kernels::conv2d_backward(
                        *dims,
                        self.nodes[x.0].value.data(),
                        self.nodes[w.0].value.data(),
                        &g,
                    );
                    add(&mut grads[x.0], gx);
                    add(&mut grads[w.0], gw);
                    add(&mut grads[b.0], gb);
                }
                Op::MaxPool2 { x, argmax } => {
                    let n = self.nodes[x.0].value.len();
                    add(&mut grads[x.0], kernels::maxpool2_backward(n, argmax, &g));
                }
                Op::Relu { x } => {
                    let gx = self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    add(&mut grads[x.0], gx);
                }
                Op::Upsample2 { x } => {
                    let (c, h, w) = self.nodes[x.0].value.chw()?;
                    add(
                        &mut grads[x.0],
                        kernels::resize_bilinear_backward(c, h, w, 2 * h, 2 * w, &g),
                    );
                }
                Op::Concat { a, b } => {
                    let na = self.nodes[a.0].value.len();
                    add(&mut grads[a.0], g[..na].to_vec());
                    add(&mut grads[b.0], g[na..].to_vec());
                }
                Op::WeightedSq {
                    pred,
                    target,
                    weight,
                    norm,
                } => {
                    let scale = g[0] * (T::one() + T::one()) / *norm;
                    let gp = self.nodes[pred.0]
                        .value
                        .data()
                        .iter()
                        .zip(target)
                        .zip(weight)
                        .map(|((&p, &t), &m)| {
                            if m == T::zero() {
                                T::zero()
                            } else {
                                scale * m * (p - t)
                            }
                        })
                        .collect();
                    add(&mut grads[pred.0], gp);
                }
                Op::Combine { terms } => {
                    for &(v, c) in terms {
                        add(&mut grads[v.0], vec![c * g[0]]);
                    }
                }
            }
            done[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(done) {
            node.value.clear_grad();
            if let Some(g) = g {
                node.value.set_grad(g)?;
            }
        }
        Ok(())
    }

    /// Gradients of every recorded parameter, keyed by slot. Parameters that
    /// did not influence the loss report no gradient.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.nodes.iter().filter_map(|n| match n.op {
            Op::Param(slot) => n.value.grad().map(|g| (slot, g)),
            _ => None,
        })
    }
}
