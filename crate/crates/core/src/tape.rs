//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`GradTape`] records each primitive as it is evaluated. [`GradTape::backward`]
//! walks the record in reverse, applying each primitive's vector-Jacobian
//! product, and returns a gradient for every registered parameter.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, Window};
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, k: Var, b: Var, stride: (usize, usize) },
    MeanPool { x: Var, win: Window },
    Sigmoid { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64>, batch_stats: bool },
    Linear { x: Var, w: Var, b: Var },
    Reshape { x: Var },
    Slice { x: Var, start: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulConst { x: Var, c: Tensor },
    Scale { x: Var, s: f64 },
    AddScalar { x: Var },
    Exp { x: Var },
    Square { x: Var },
    Sum { x: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Per-channel batch statistics observed by a train-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    /// Number of values pooled per channel.
    pub count: usize,
}

#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Gradients returned by [`GradTape::backward`], keyed by parameter handle.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    /// Gradient of a parameter; panics if `v` was not registered as one.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.grads.get(&v).expect("not a parameter of this tape")
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`backward`](Self::backward).
    pub fn param(&mut self, t: Tensor) -> Var {
        let v = self.constant(t);
        self.params.push(v);
        v
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: (usize, usize)) -> Result<Var> {
        let y = kernels::conv2d_forward(self.value(x), self.value(k), self.value(b), stride)?;
        self.push(y, Op::Conv2d { x, k, b, stride })
    }

    pub fn mean_pool(&mut self, x: Var, win: Window) -> Result<Var> {
        let y = kernels::mean_pool_forward(self.value(x), win)?;
        self.push(y, Op::MeanPool { x, win })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(kernels::sigmoid_scalar);
        self.push(y, Op::Sigmoid { x })
    }

    /// Train-mode batch norm: normalise by the batch's own per-channel moments.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let (nb, _, s) = kernels::bn_dims(xv.shape())?;
        if nb < 2 {
            return shape_err("batch norm in train mode needs a batch of at least 2");
        }
        let (mean, var) = kernels::channel_moments(xv)?;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat = kernels::bn_normalize(xv, &mean, &inv_std)?;
        let y = kernels::bn_affine(&xhat, self.value(gamma).data(), self.value(beta).data())?;
        let stats = BatchStats { mean, var, count: nb * s };
        let v = self.push(y, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: true })?;
        Ok((v, stats))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batch_norm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat = kernels::bn_normalize(self.value(x), mean, &inv_std)?;
        let y = kernels::bn_affine(&xhat, self.value(gamma).data(), self.value(beta).data())?;
        self.push(y, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats: false })
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = kernels::linear_forward(self.value(x), self.value(w), self.value(b))?;
        self.push(y, Op::Linear { x, w, b })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        self.push(y, Op::Reshape { x })
    }

    /// Contiguous run of `shape.product()` elements starting at flat offset `start`.
    pub fn slice(&mut self, x: Var, start: usize, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let src = self.value(x).data();
        if start + n > src.len() {
            return shape_err(format!("slice {start}..{} out of range {}", start + n, src.len()));
        }
        let y = Tensor::new(shape, src[start..start + n].to_vec())?;
        self.push(y, Op::Slice { x, start })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        self.push(y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        self.push(y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        self.push(y, Op::Mul { a, b })
    }

    /// Elementwise product with a constant tensor (e.g. a dropout mask).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let y = self.value(x).zip_map(&c, |p, q| p * q)?;
        self.push(y, Op::MulConst { x, c })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let y = self.value(x).map(|v| v * s);
        self.push(y, Op::Scale { x, s })
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let y = self.value(x).map(|v| v + s);
        self.push(y, Op::AddScalar { x })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(f64::exp);
        self.push(y, Op::Exp { x })
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v * v);
        self.push(y, Op::Square { x })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x })
    }

    /// Gradient of the scalar `loss` with respect to every registered parameter.
    ///
    /// Parameters with no path to `loss` get an all-zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::Conv2d { x, k, b, stride } => {
                    let (gx, gk, gb) =
                        kernels::conv2d_backward(self.value(*x), self.value(*k), &gy, *stride)?;
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MeanPool { x, win } => {
                    let gx = kernels::mean_pool_backward(self.value(*x).shape(), &gy, *win)?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid { x } => {
                    let gx = gy.zip_map(y, |g, s| g * s * (1.0 - s))?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                    let (gx, gg, gb) = bn_backward(
                        &gy,
                        xhat,
                        inv_std,
                        self.value(*gamma).data(),
                        *batch_stats,
                    )?;
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, gg);
                    accumulate(&mut grads, *beta, gb);
                }
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) = kernels::linear_backward(self.value(*x), self.value(*w), &gy)?;
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Reshape { x } => {
                    let gx = gy.reshape(self.value(*x).shape())?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Slice { x, start } => {
                    let src = self.value(*x);
                    let mut gx = Tensor::zeros(src.shape());
                    gx.data_mut()[*start..*start + gy.len()].copy_from_slice(gy.data());
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, gy.clone());
                    accumulate(&mut grads, *b, gy);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads, *b, gy.map(|g| -g));
                    accumulate(&mut grads, *a, gy);
                }
                Op::Mul { a, b } => {
                    let ga = gy.zip_map(self.value(*b), |g, q| g * q)?;
                    let gb = gy.zip_map(self.value(*a), |g, p| g * p)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulConst { x, c } => {
                    accumulate(&mut grads, *x, gy.zip_map(c, |g, q| g * q)?);
                }
                Op::Scale { x, s } => {
                    accumulate(&mut grads, *x, gy.map(|g| g * s));
                }
                Op::AddScalar { x } => {
                    accumulate(&mut grads, *x, gy);
                }
                Op::Exp { x } => {
                    accumulate(&mut grads, *x, gy.zip_map(y, |g, e| g * e)?);
                }
                Op::Square { x } => {
                    accumulate(&mut grads, *x, gy.zip_map(self.value(*x), |g, v| 2.0 * g * v)?);
                }
                Op::Sum { x } => {
                    let g = gy.item();
                    accumulate(&mut grads, *x, Tensor::full(self.value(*x).shape(), g));
                }
            }
        }

        let mut out = HashMap::with_capacity(self.params.len());
        for &p in &self.params {
            let g = match grads.get_mut(p.0).and_then(Option::take) {
                Some(g) => g,
                None => Tensor::zeros(self.value(p).shape()),
            };
            out.insert(p, g);
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn bn_backward(
    gy: &Tensor,
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &[f64],
    batch_stats: bool,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (_, c, s) = kernels::bn_dims(gy.shape())?;
    let gd = gy.data();
    let xd = xhat.data();
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    let mut count = vec![0usize; c];
    for (idx, (gc, xc)) in gd.chunks(s).zip(xd.chunks(s)).enumerate() {
        let ch = idx % c;
        sum_g[ch] += gc.iter().sum::<f64>();
        sum_gx[ch] += gc.iter().zip(xc).map(|(g, x)| g * x).sum::<f64>();
        count[ch] += s;
    }
    let mut gx = gy.clone();
    for (idx, (dst, xc)) in gx.data_mut().chunks_mut(s).zip(xd.chunks(s)).enumerate() {
        let ch = idx % c;
        let k = gamma[ch] * inv_std[ch];
        if batch_stats {
            let n = count[ch] as f64;
            let mg = sum_g[ch] / n;
            let mgx = sum_gx[ch] / n;
            for (g, &xh) in dst.iter_mut().zip(xc) {
                *g = k * (*g - mg - xh * mgx);
            }
        } else {
            for g in dst.iter_mut() {
                *g *= k;
            }
        }
    }
    Ok((gx, Tensor::from_vec(sum_gx), Tensor::from_vec(sum_g)))
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::MeanPool { .. } => "mean_pool",
        Op::Sigmoid { .. } => "sigmoid",
        Op::BatchNorm { .. } => "batch_norm",
        Op::Linear { .. } => "linear",
        Op::Reshape { .. } => "reshape",
        Op::Slice { .. } => "slice",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::MulConst { .. } => "mul_const",
        Op::Scale { .. } => "scale",
        Op::AddScalar { .. } => "add_scalar",
        Op::Exp { .. } => "exp",
        Op::Square { .. } => "square",
        Op::Sum { .. } => "sum",
    }
}
