use super::ops::{self, conv_dims};
use super::Tensor;
use crate::counters;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv1d { x: Var, kernel: Var, stride: usize },
    Relu(Var),
    AvgPool(Var),
    L2Normalize(Var),
    Add(Var, Var),
    ChannelBias(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SumSquares(Var),
    Reshape(Var),
    Mean(Vec<Var>),
    SoftmaxNll { logits: Var, label: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of primitive applications. Node indices are a
/// topological order, so the backward sweep is a reverse scan.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; exactly zero if `var` does not reach
    /// the loss.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

impl Tape {
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        let r = self.req(a) || self.req(b);
        Ok(self.push(v, Op::MatMul(a, b), r))
    }

    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let v = ops::conv1d(self.value(x), self.value(kernel), stride)?;
        let r = self.req(x) || self.req(kernel);
        Ok(self.push(v, Op::Conv1d { x, kernel, stride }, r))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = ops::relu(self.value(x));
        let r = self.req(x);
        self.push(v, Op::Relu(x), r)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = ops::global_avg_pool(self.value(x))?;
        let r = self.req(x);
        Ok(self.push(v, Op::AvgPool(x), r))
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let v = ops::l2_normalize(self.value(x))?;
        let r = self.req(x);
        Ok(self.push(v, Op::L2Normalize(x), r))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let r = self.req(a) || self.req(b);
        Ok(self.push(v, Op::Add(a, b), r))
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = ops::add_channel_bias(self.value(x), self.value(bias))?;
        let r = self.req(x) || self.req(bias);
        Ok(self.push(v, Op::ChannelBias(x, bias), r))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        let r = self.req(x);
        self.push(v, Op::Scale(x, s), r)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let r = self.req(x);
        self.push(v, Op::Sum(x), r)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        let r = self.req(x);
        self.push(Tensor::scalar(s), Op::SumSquares(x), r)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let r = self.req(x);
        Ok(self.push(v, Op::Reshape(x), r))
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Contract("mean of zero terms".into()));
        }
        let mut s = 0.0;
        for &x in xs {
            let v = self.value(x);
            if v.len() != 1 {
                return Err(Error::dim("mean", v.shape(), &[1]));
            }
            s += v.data()[0];
        }
        let r = xs.iter().any(|&x| self.req(x));
        Ok(self.push(Tensor::scalar(s / xs.len() as f64), Op::Mean(xs.to_vec()), r))
    }

    /// `−ln softmax(logits)[label]`, computed with max subtraction.
    pub fn softmax_nll(&mut self, logits: Var, label: usize) -> Result<Var> {
        let l = self.value(logits);
        if l.rank() != 1 || label >= l.len() {
            return Err(Error::Contract(format!(
                "softmax_nll label {label} out of range for logits {:?}",
                l.shape()
            )));
        }
        let v = log_sum_exp(l.data()) - l.data()[label];
        let r = self.req(logits);
        Ok(self.push(Tensor::scalar(v), Op::SoftmaxNll { logits, label }, r))
    }

    /// Reverse sweep from a scalar `loss`. Counts as one gradient computation.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        counters::record_backward();
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.req(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(1.0, &g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let av = self.value(a);
                let bv = self.value(b);
                let b_mat = if bv.rank() == 1 {
                    bv.reshape(&[bv.len(), 1])?
                } else {
                    bv.clone()
                };
                let g_mat = if g.rank() == 1 {
                    g.reshape(&[g.len(), 1])?
                } else {
                    g.clone()
                };
                if self.req(a) {
                    let ga = ops::matmul(&g_mat, &b_mat.transpose()?)?;
                    self.accumulate(grads, a, ga)?;
                }
                if self.req(b) {
                    let gb = ops::matmul(&av.transpose()?, &g_mat)?;
                    let gb = gb.reshape(bv.shape())?;
                    self.accumulate(grads, b, gb)?;
                }
            }
            &Op::Conv1d { x, kernel, stride } => {
                let xv = self.value(x);
                let kv = self.value(kernel);
                let (c_in, len, c_out, w, l_out) = conv_dims(xv.shape(), kv.shape(), stride)?;
                let (xd, kd, gd) = (xv.data(), kv.data(), g.data());
                if self.req(kernel) {
                    let mut gk = vec![0.0; c_out * c_in * w];
                    for o in 0..c_out {
                        let grow = &gd[o * l_out..(o + 1) * l_out];
                        for c in 0..c_in {
                            let xrow = &xd[c * len..(c + 1) * len];
                            let gkrow = &mut gk[(o * c_in + c) * w..(o * c_in + c + 1) * w];
                            for (t, &gv) in grow.iter().enumerate() {
                                if gv == 0.0 {
                                    continue;
                                }
                                let window = &xrow[t * stride..t * stride + w];
                                for (acc, &xv) in gkrow.iter_mut().zip(window) {
                                    *acc += gv * xv;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, kernel, Tensor::new(kv.shape().to_vec(), gk)?)?;
                }
                if self.req(x) {
                    let mut gx = vec![0.0; c_in * len];
                    for o in 0..c_out {
                        let grow = &gd[o * l_out..(o + 1) * l_out];
                        for c in 0..c_in {
                            let krow = &kd[(o * c_in + c) * w..(o * c_in + c + 1) * w];
                            let gxrow = &mut gx[c * len..(c + 1) * len];
                            for (t, &gv) in grow.iter().enumerate() {
                                if gv == 0.0 {
                                    continue;
                                }
                                let window = &mut gxrow[t * stride..t * stride + w];
                                for (acc, &k) in window.iter_mut().zip(krow) {
                                    *acc += gv * k;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, x, Tensor::new(xv.shape().to_vec(), gx)?)?;
                }
            }
            &Op::Relu(x) => {
                let xv = self.value(x);
                let gx = g.zip_with(xv, "relu", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, x, gx)?;
            }
            &Op::AvgPool(x) => {
                let xv = self.value(x);
                let (c, len) = xv.dims2()?;
                let mut gx = Vec::with_capacity(c * len);
                for &gv in g.data() {
                    gx.extend(std::iter::repeat_n(gv / len as f64, len));
                }
                self.accumulate(grads, x, Tensor::new(vec![c, len], gx)?)?;
            }
            &Op::L2Normalize(x) => {
                let xv = self.value(x);
                let y = &node.value;
                let inner = *xv.shape().last().expect("shape");
                let mut gx = vec![0.0; xv.len()];
                for ((gxr, (yr, gr)), xr) in gx
                    .chunks_mut(inner)
                    .zip(y.data().chunks(inner).zip(g.data().chunks(inner)))
                    .zip(xv.data().chunks(inner))
                {
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in gxr.iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * dot) / n;
                    }
                }
                self.accumulate(grads, x, Tensor::new(xv.shape().to_vec(), gx)?)?;
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.clone())?;
            }
            &Op::ChannelBias(x, b) => {
                self.accumulate(grads, x, g.clone())?;
                if self.req(b) {
                    let c = self.value(b).len();
                    let inner = g.len() / c;
                    let gb = g.data().chunks(inner).map(|ch| ch.iter().sum()).collect();
                    self.accumulate(grads, b, Tensor::vector(gb))?;
                }
            }
            &Op::Scale(x, s) => self.accumulate(grads, x, g.scale(s))?,
            &Op::Sum(x) => {
                let shape = self.value(x).shape().to_vec();
                self.accumulate(grads, x, Tensor::filled(&shape, g.data()[0]))?;
            }
            &Op::SumSquares(x) => {
                let gs = g.data()[0];
                self.accumulate(grads, x, self.value(x).scale(2.0 * gs))?;
            }
            &Op::Reshape(x) => {
                let shape = self.value(x).shape().to_vec();
                self.accumulate(grads, x, g.reshape(&shape)?)?;
            }
            Op::Mean(xs) => {
                let share = g.data()[0] / xs.len() as f64;
                for &x in xs {
                    self.accumulate(grads, x, Tensor::scalar(share))?;
                }
            }
            &Op::SoftmaxNll { logits, label } => {
                let l = self.value(logits).data();
                let lse = log_sum_exp(l);
                let gs = g.data()[0];
                let gl = l
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| gs * ((v - lse).exp() - if j == label { 1.0 } else { 0.0 }))
                    .collect();
                self.accumulate(grads, logits, Tensor::vector(gl))?;
            }
        }
        Ok(())
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
