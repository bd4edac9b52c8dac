//! Define-by-run reverse-mode tape.
//!
//! A fresh [`Tape`] is built for every step. Nodes are appended in
//! evaluation order, so reverse index order is a valid topological order
//! for the backward sweep.

use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::{image_dims, image_shape, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Per-sample reduction used by [`Tape::restoration_loss`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Restoration {
    /// Euclidean norm of the flattened difference.
    L2Norm,
    /// Squared Euclidean norm of the flattened difference.
    SquaredL2,
}

enum Op<S: Scalar> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Upsample {
        x: Var,
        planes: usize,
        sp: [usize; 3],
        factor: [usize; 3],
    },
    Concat {
        a: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    GlobalAvgPool(Var),
    Flatten(Var),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax(Var),
    CrossEntropy {
        p: Var,
        y: Tensor<S>,
        eps: f64,
    },
    Restoration {
        pred: Var,
        target: Var,
        mode: Restoration,
        norms: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    Bce {
        p: Var,
        y: Tensor<S>,
        eps: f64,
    },
    WeightedSum(Vec<(Var, f64)>),
    Sum(Var),
    Mul(Var, Var),
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

/// Gradients of a scalar loss w.r.t. every leaf that requires grad.
#[derive(Debug)]
pub struct Gradients<S: Scalar> {
    grads: BTreeMap<Var, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.push_leaf(t, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, t: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, parents: &[Var], what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::usage("tape already consumed by backward"))
        } else {
            Ok(())
        }
    }

    /// Convolution with a uniform stride and zero padding on every spatial
    /// axis. Kernels are `[cout, cin, k...]` with the input's spatial rank.
    pub fn conv(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        self.check_live()?;
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (batch, cin, sp, rank) = image_dims(&xs)?;
        if ws.len() != rank + 2 {
            return Err(Error::config(format!(
                "kernel {ws:?} spatial rank does not match input {xs:?}"
            )));
        }
        if ws[1] != cin {
            return Err(Error::config(format!(
                "kernel expects {} input channels, input has {cin}",
                ws[1]
            )));
        }
        let cout = ws[0];
        if self.value(b).shape() != [cout] {
            return Err(Error::config(format!(
                "bias shape {:?} != [{cout}]",
                self.value(b).shape()
            )));
        }
        let (kernel, st, pad) = if rank == 2 {
            ([1, ws[2], ws[3]], [1, stride, stride], [0, padding, padding])
        } else {
            ([ws[2], ws[3], ws[4]], [stride; 3], [padding; 3])
        };
        let geom = ConvGeom::new(batch, cin, cout, sp, kernel, st, pad)?;
        let out = kernels::conv_forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let value = Tensor::new(image_shape(batch, cout, geom.output, rank), out)?;
        self.push(value, Op::Conv { x, w, b, geom }, &[x, w, b], "conv")
    }

    /// Nearest-neighbour upsampling of every spatial axis by `factor`.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.check_live()?;
        let (batch, ch, sp, rank) = image_dims(self.value(x).shape())?;
        let f = if rank == 2 { [1, factor, factor] } else { [factor; 3] };
        let planes = batch * ch;
        let out = kernels::upsample_forward(planes, sp, f, self.value(x).data());
        let osp = [sp[0] * f[0], sp[1] * f[1], sp[2] * f[2]];
        let value = Tensor::new(image_shape(batch, ch, osp, rank), out)?;
        self.push(
            value,
            Op::Upsample {
                x,
                planes,
                sp,
                factor: f,
            },
            &[x],
            "upsample",
        )
    }

    /// Concatenates two image tensors along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let (ba, ca, spa, ra) = image_dims(&sa)?;
        let (bb, cb, spb, rb) = image_dims(&sb)?;
        if ba != bb || spa != spb || ra != rb {
            return Err(Error::config(format!(
                "skip concatenation needs matching batch/spatial extents: {sa:?} vs {sb:?}"
            )));
        }
        let plane: usize = spa.iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for i in 0..ba {
            out.extend_from_slice(&da[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&db[i * cb * plane..(i + 1) * cb * plane]);
        }
        let value = Tensor::new(image_shape(ba, ca + cb, spa, ra), out)?;
        self.push(value, Op::Concat { a, b }, &[a, b], "concat")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let value = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        self.push(value, Op::Relu(x), &[x], "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let value = self.value(x).map(|v| S::one() / (S::one() + (-v).exp()));
        self.push(value, Op::Sigmoid(x), &[x], "sigmoid")
    }

    /// `[batch, channels, spatial...]` → `[batch, channels]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let (batch, ch, sp, _) = image_dims(self.value(x).shape())?;
        let plane: usize = sp.iter().product();
        let inv = S::from_f64(1.0 / plane as f64);
        let out: Vec<S> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<S>() * inv)
            .collect();
        let value = Tensor::new(vec![batch, ch], out)?;
        self.push(value, Op::GlobalAvgPool(x), &[x], "global_avg_pool")
    }

    /// `[batch, ...]` → `[batch, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let t = self.value(x).clone();
        let batch = t.shape()[0];
        let rest = t.len() / batch;
        let value = t.reshape(vec![batch, rest])?;
        self.push(value, Op::Flatten(x), &[x], "flatten")
    }

    /// Fully connected layer, `w: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(Error::config(format!(
                "dense layer: input {xs:?} incompatible with weight {ws:?}"
            )));
        }
        if self.value(b).shape() != [ws[0]] {
            return Err(Error::config("dense bias shape mismatch"));
        }
        let out = kernels::dense_forward(
            xs[0],
            xs[1],
            ws[0],
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let value = Tensor::new(vec![xs[0], ws[0]], out)?;
        self.push(value, Op::Dense { x, w, b }, &[x, w, b], "dense")
    }

    /// Softmax over the last axis of a `[batch, classes]` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 || xs[1] < 2 {
            return Err(Error::config(format!("softmax needs [batch, classes>=2], got {xs:?}")));
        }
        self.value(x).ensure_finite("softmax logits")?;
        let out = kernels::softmax_rows(xs[1], self.value(x).data());
        let value = Tensor::new(xs, out)?;
        self.push(value, Op::Softmax(x), &[x], "softmax")
    }

    /// Mean categorical cross-entropy of probabilities `p` against one-hot `y`.
    pub fn cross_entropy(&mut self, p: Var, y: Tensor<S>) -> Result<Var> {
        self.check_live()?;
        let eps = 1e-12;
        let loss = categorical_cross_entropy_value(self.value(p), &y, eps)?;
        self.push(
            Tensor::scalar(S::from_f64(loss)),
            Op::CrossEntropy { p, y, eps },
            &[p],
            "cross_entropy",
        )
    }

    /// Batch mean of the per-sample (squared) Euclidean norm of `pred - target`.
    pub fn restoration_loss(&mut self, pred: Var, target: Var, mode: Restoration) -> Result<Var> {
        self.check_live()?;
        let (loss, norms) = restoration_value(self.value(pred), self.value(target), mode)?;
        self.push(
            Tensor::scalar(S::from_f64(loss)),
            Op::Restoration {
                pred,
                target,
                mode,
                norms,
            },
            &[pred, target],
            "restoration_loss",
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check_live()?;
        let (a, b) = (self.value(pred), self.value(target));
        if a.shape() != b.shape() {
            return Err(Error::usage(format!(
                "mse shape mismatch {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let n = a.len() as f64;
        let s: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum();
        self.push(
            Tensor::scalar(S::from_f64(s / n)),
            Op::Mse { pred, target },
            &[pred, target],
            "mse",
        )
    }

    /// Mean binary cross-entropy of probabilities `p` against targets in {0,1}.
    pub fn binary_cross_entropy(&mut self, p: Var, y: Tensor<S>) -> Result<Var> {
        self.check_live()?;
        let eps = 1e-7;
        let pv = self.value(p);
        if pv.shape() != y.shape() {
            return Err(Error::usage("bce shape mismatch"));
        }
        let n = pv.len() as f64;
        let mut s = 0.0;
        for (&pp, &yy) in pv.data().iter().zip(y.data()) {
            let pp = pp.as_f64().clamp(eps, 1.0 - eps);
            let yy = yy.as_f64();
            s -= yy * pp.ln() + (1.0 - yy) * (1.0 - pp).ln();
        }
        self.push(
            Tensor::scalar(S::from_f64(s / n)),
            Op::Bce { p, y, eps },
            &[p],
            "binary_cross_entropy",
        )
    }

    /// `Σ w_k · term_k` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        self.check_live()?;
        if terms.is_empty() {
            return Err(Error::usage("weighted sum of no terms"));
        }
        let mut acc = 0.0;
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::usage("weighted sum terms must be scalars"));
            }
            acc += w * self.value(v).item().as_f64();
        }
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(
            Tensor::scalar(S::from_f64(acc)),
            Op::WeightedSum(terms.to_vec()),
            &parents,
            "weighted_sum",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let s: S = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::config("mul shape mismatch"));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(value, Op::Mul(a, b), &[a, b], "mul")
    }

    /// Runs the reverse sweep from scalar `loss`. The tape cannot be reused.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        self.check_live()?;
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            g.ensure_finite("backward")?;
            for (parent, pg) in self.local_grads(i, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, &d) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                g.ensure_finite("parameter gradient")?;
                out.insert(Var(i), g);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn local_grads(&self, i: usize, g: &Tensor<S>) -> Result<Vec<(Var, Tensor<S>)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let shaped = |v: Var, data: Vec<S>| -> Result<(Var, Tensor<S>)> {
            Ok((v, Tensor::new(self.value(v).shape().to_vec(), data)?))
        };
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv_backward(geom, self.value(*x).data(), self.value(*w).data(), g.data());
                vec![shaped(*x, dx)?, shaped(*w, dw)?, shaped(*b, db)?]
            }
            Op::Upsample { x, planes, sp, factor } => {
                vec![shaped(*x, kernels::upsample_backward(*planes, *sp, *factor, g.data()))?]
            }
            Op::Concat { a, b } => {
                let (batch, ca, sp, _) = image_dims(self.value(*a).shape())?;
                let cb = self.value(*b).shape()[1];
                let plane: usize = sp.iter().product();
                let mut da = Vec::with_capacity(batch * ca * plane);
                let mut dbv = Vec::with_capacity(batch * cb * plane);
                for row in g.data().chunks((ca + cb) * plane) {
                    da.extend_from_slice(&row[..ca * plane]);
                    dbv.extend_from_slice(&row[ca * plane..]);
                }
                vec![shaped(*a, da)?, shaped(*b, dbv)?]
            }
            Op::Relu(x) => {
                let d = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| if y > S::zero() { gv } else { S::zero() })
                    .collect();
                vec![shaped(*x, d)?]
            }
            Op::Sigmoid(x) => {
                let d = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| gv * y * (S::one() - y))
                    .collect();
                vec![shaped(*x, d)?]
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.value(*x);
                let plane = xs.len() / g.len();
                let inv = S::from_f64(1.0 / plane as f64);
                let mut d = Vec::with_capacity(xs.len());
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv * inv, plane));
                }
                vec![shaped(*x, d)?]
            }
            Op::Flatten(x) => vec![shaped(*x, g.data().to_vec())?],
            Op::Dense { x, w, b } => {
                let xs = self.value(*x).shape();
                let fout = self.value(*w).shape()[0];
                let (dx, dw, db) = kernels::dense_backward(
                    xs[0],
                    xs[1],
                    fout,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                );
                vec![shaped(*x, dx)?, shaped(*w, dw)?, shaped(*b, db)?]
            }
            Op::Softmax(x) => {
                let cols = out.shape()[1];
                vec![shaped(*x, kernels::softmax_rows_backward(cols, out.data(), g.data()))?]
            }
            Op::CrossEntropy { p, y, eps } => {
                let pv = self.value(*p);
                let batch = pv.shape()[0] as f64;
                let scale = g.item().as_f64() / batch;
                let d = pv
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&pp, &yy)| {
                        let pp = pp.as_f64();
                        let yy = yy.as_f64();
                        if yy == 0.0 || pp <= *eps {
                            S::zero()
                        } else {
                            S::from_f64(-scale * yy / pp)
                        }
                    })
                    .collect();
                vec![shaped(*p, d)?]
            }
            Op::Restoration {
                pred,
                target,
                mode,
                norms,
            } => {
                let a = self.value(*pred);
                let b = self.value(*target);
                let batch = a.shape()[0];
                let row = a.len() / batch;
                let gs = g.item().as_f64() / batch as f64;
                let mut da = Vec::with_capacity(a.len());
                for bi in 0..batch {
                    let coef = match mode {
                        Restoration::L2Norm => {
                            if norms[bi] > 0.0 {
                                gs / norms[bi]
                            } else {
                                0.0
                            }
                        }
                        Restoration::SquaredL2 => 2.0 * gs,
                    };
                    for j in bi * row..(bi + 1) * row {
                        da.push(S::from_f64(coef * (a.data()[j].as_f64() - b.data()[j].as_f64())));
                    }
                }
                let db: Vec<S> = da.iter().map(|&v| -v).collect();
                vec![shaped(*pred, da)?, shaped(*target, db)?]
            }
            Op::Mse { pred, target } => {
                let a = self.value(*pred);
                let b = self.value(*target);
                let c = 2.0 * g.item().as_f64() / a.len() as f64;
                let da: Vec<S> = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| S::from_f64(c * (x.as_f64() - y.as_f64())))
                    .collect();
                let db: Vec<S> = da.iter().map(|&v| -v).collect();
                vec![shaped(*pred, da)?, shaped(*target, db)?]
            }
            Op::Bce { p, y, eps } => {
                let pv = self.value(*p);
                let c = g.item().as_f64() / pv.len() as f64;
                let d = pv
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&pp, &yy)| {
                        let pp = pp.as_f64();
                        if pp <= *eps || pp >= 1.0 - *eps {
                            return S::zero();
                        }
                        let yy = yy.as_f64();
                        S::from_f64(c * (-yy / pp + (1.0 - yy) / (1.0 - pp)))
                    })
                    .collect();
                vec![shaped(*p, d)?]
            }
            Op::WeightedSum(terms) => terms
                .iter()
                .map(|&(v, w)| (v, Tensor::scalar(S::from_f64(w * g.item().as_f64()))))
                .collect(),
            Op::Sum(x) => {
                let xs = self.value(*x);
                vec![(*x, Tensor::full(xs.shape(), g.item()))]
            }
            Op::Mul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let da = vb.data().iter().zip(g.data()).map(|(&y, &gv)| y * gv).collect();
                let db = va.data().iter().zip(g.data()).map(|(&x, &gv)| x * gv).collect();
                vec![shaped(*a, da)?, shaped(*b, db)?]
            }
        })
    }
}

/// Validates one-hot rows and normalized probability rows, then returns
/// `-(1/B) Σ_b Σ_c Y_bc ln max(P_bc, eps)`.
pub fn categorical_cross_entropy_value<S: Scalar>(p: &Tensor<S>, y: &Tensor<S>, eps: f64) -> Result<f64> {
    if p.shape() != y.shape() || p.shape().len() != 2 {
        return Err(Error::usage(format!(
            "cross-entropy needs equal [batch, classes] shapes, got {:?} and {:?}",
            p.shape(),
            y.shape()
        )));
    }
    let classes = p.shape()[1];
    let tol = match S::PRECISION {
        super::Precision::F64 => 1e-9,
        super::Precision::F32 => 1e-5,
    };
    let mut total = 0.0;
    for (b, (pr, yr)) in p.data().chunks(classes).zip(y.data().chunks(classes)).enumerate() {
        let ones = yr.iter().filter(|v| v.as_f64() == 1.0).count();
        let zeros = yr.iter().filter(|v| v.as_f64() == 0.0).count();
        if ones != 1 || zeros != classes - 1 {
            return Err(Error::usage(format!("label row {b} is not one-hot")));
        }
        let s: f64 = pr.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > tol {
            return Err(Error::usage(format!("probability row {b} sums to {s}, not 1")));
        }
        for (&pp, &yy) in pr.iter().zip(yr) {
            let yy = yy.as_f64();
            if yy != 0.0 {
                total -= yy * pp.as_f64().max(eps).ln();
            }
        }
    }
    Ok(total / p.shape()[0] as f64)
}

/// Returns the batch-mean restoration loss and the per-sample norms.
pub fn restoration_value<S: Scalar>(
    pred: &Tensor<S>,
    target: &Tensor<S>,
    mode: Restoration,
) -> Result<(f64, Vec<f64>)> {
    if pred.shape() != target.shape() {
        return Err(Error::usage(format!(
            "restoration loss shape mismatch {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let batch = pred.shape()[0];
    let row = pred.len() / batch;
    let mut norms = Vec::with_capacity(batch);
    let mut total = 0.0;
    for bi in 0..batch {
        let sq: f64 = pred.data()[bi * row..(bi + 1) * row]
            .iter()
            .zip(&target.data()[bi * row..(bi + 1) * row])
            .map(|(&a, &b)| {
                let d = a.as_f64() - b.as_f64();
                d * d
            })
            .sum();
        let n = sq.sqrt();
        norms.push(n);
        total += match mode {
            Restoration::L2Norm => n,
            Restoration::SquaredL2 => sq,
        };
    }
    Ok((total / batch as f64, norms))
}
