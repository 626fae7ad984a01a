//! Bayesian decision head.
//!
//! The head maps a latent vector `z` to a scalar output `f(z, w)`. Its weights
//! carry an isotropic Gaussian prior `N(0, 1/alpha)` and the output a Gaussian
//! likelihood with noise precision `beta`. Uncertainty at a point estimate is
//! obtained by linearising around it with a Gauss-Newton Hessian; the
//! resulting predictive variance is `1/beta + g^T (alpha I + beta H)^-1 g`.
//!
//! A mean-field Gaussian variational posterior trained on the evidence lower
//! bound is provided as an alternative to the point estimate.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::cg::conjugate_gradient;
use crate::error::{invalid, shape_err, Error, Result};
use crate::model::xavier_uniform;
use crate::tape::{GradTape, Var};
use crate::tensor::{axpy, dot, Tensor};

pub const DEFAULT_ALPHA: f64 = 1e-2;
pub const DEFAULT_BETA: f64 = 100.0;
/// Largest weight dimension for which the Hessian is materialised.
pub const DEFAULT_DENSE_LIMIT: usize = 4096;
/// Regression target for every real training sample.
pub const REAL_TARGET: f64 = 1.0;

/// Layer structure of the head: `z -> W1 z + b1 -> w2 . h + b2`, or a single
/// affine layer when `hidden` is `None`.
///
/// Flat weight layout: `[W1 (hidden x d_in), b1, w2, b2]` or `[w (d_in), b]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub d_in: usize,
    pub hidden: Option<usize>,
}

impl HeadLayout {
    pub fn two_layer(d_in: usize, hidden: usize) -> Self {
        HeadLayout { d_in, hidden: Some(hidden) }
    }

    pub fn linear(d_in: usize) -> Self {
        HeadLayout { d_in, hidden: None }
    }

    pub fn param_count(&self) -> usize {
        match self.hidden {
            Some(h) => h * self.d_in + 2 * h + 1,
            None => self.d_in + 1,
        }
    }

    /// Xavier-initialised weight matrices with zero biases.
    pub fn init(&self, rng: &mut impl Rng) -> Vec<f64> {
        let d = self.d_in;
        let mut w = vec![0.0; self.param_count()];
        match self.hidden {
            Some(h) => {
                w[..h * d].copy_from_slice(xavier_uniform(&[h, d], d, h, rng).data());
                let o = h * d + h;
                w[o..o + h].copy_from_slice(xavier_uniform(&[1, h], h, 1, rng).data());
            }
            None => w[..d].copy_from_slice(xavier_uniform(&[1, d], d, 1, rng).data()),
        }
        w
    }

    fn check(&self, w: &[f64], z: &[f64]) {
        debug_assert_eq!(w.len(), self.param_count());
        debug_assert_eq!(z.len(), self.d_in);
    }

    /// Hidden activations `W1 z + b1` (two-layer only).
    fn hidden_of(&self, w: &[f64], z: &[f64], h: usize) -> Vec<f64> {
        let d = self.d_in;
        (0..h)
            .map(|j| dot(&w[j * d..(j + 1) * d], z) + w[h * d + j])
            .collect()
    }

    pub fn forward(&self, w: &[f64], z: &[f64]) -> f64 {
        self.check(w, z);
        let d = self.d_in;
        match self.hidden {
            Some(h) => {
                let hid = self.hidden_of(w, z, h);
                let o = h * d + h;
                dot(&w[o..o + h], &hid) + w[o + h]
            }
            None => dot(&w[..d], z) + w[d],
        }
    }

    /// `g = d f(z, w) / d w`.
    pub fn gradient(&self, w: &[f64], z: &[f64]) -> Vec<f64> {
        self.check(w, z);
        let d = self.d_in;
        let mut g = vec![0.0; self.param_count()];
        match self.hidden {
            Some(h) => {
                let o = h * d + h;
                let w2 = &w[o..o + h];
                for j in 0..h {
                    let row = &mut g[j * d..(j + 1) * d];
                    for (gk, &zk) in row.iter_mut().zip(z) {
                        *gk = w2[j] * zk;
                    }
                }
                g[h * d..h * d + h].copy_from_slice(w2);
                let hid = self.hidden_of(w, z, h);
                g[o..o + h].copy_from_slice(&hid);
                g[o + h] = 1.0;
            }
            None => {
                g[..d].copy_from_slice(z);
                g[d] = 1.0;
            }
        }
        g
    }

    /// Records `f` for a `[B, d_in]` latent batch; returns a `[B]` output.
    /// `mask`, if given, multiplies the hidden layer (dropout).
    pub fn forward_taped(&self, tape: &mut GradTape, w: Var, z: Var, mask: Option<Tensor>) -> Result<Var> {
        let d = self.d_in;
        let nb = match *tape.value(z).shape() {
            [b, k] if k == d => b,
            ref s => return shape_err(format!("head expects [B,{d}] latents, got {s:?}")),
        };
        let out = match self.hidden {
            Some(h) => {
                let w1 = tape.slice(w, 0, &[h, d])?;
                let b1 = tape.slice(w, h * d, &[h])?;
                let mut hid = tape.linear(z, w1, b1)?;
                if let Some(m) = mask {
                    hid = tape.mul_const(hid, m)?;
                }
                let o = h * d + h;
                let w2 = tape.slice(w, o, &[1, h])?;
                let b2 = tape.slice(w, o + h, &[1])?;
                tape.linear(hid, w2, b2)?
            }
            None => {
                let wl = tape.slice(w, 0, &[1, d])?;
                let b = tape.slice(w, d, &[1])?;
                tape.linear(z, wl, b)?
            }
        };
        tape.reshape(out, &[nb])
    }
}

/// `ln N(w | 0, alpha^-1 I)`.
pub fn log_prior(w: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return invalid(format!("prior precision must be positive, got {alpha}"));
    }
    let dim = w.len() as f64;
    Ok(0.5 * dim * (alpha / (2.0 * PI)).ln() - 0.5 * alpha * dot(w, w))
}

/// `sum_n ln N(y_n | f_n, beta^-1)`.
pub fn log_likelihood(targets: &[f64], outputs: &[f64], beta: f64) -> Result<f64> {
    if targets.len() != outputs.len() {
        return shape_err(format!("{} targets vs {} outputs", targets.len(), outputs.len()));
    }
    if !(beta > 0.0) {
        return invalid(format!("noise precision must be positive, got {beta}"));
    }
    let half_log = 0.5 * (beta / (2.0 * PI)).ln();
    Ok(targets
        .iter()
        .zip(outputs)
        .map(|(y, f)| half_log - 0.5 * beta * (y - f) * (y - f))
        .sum())
}

/// A batch of latent rows with regression targets.
#[derive(Debug, Clone)]
pub struct LatentBatch {
    /// Row-major `[n, d]`.
    pub z: Vec<f64>,
    pub d: usize,
    pub targets: Vec<f64>,
}

impl LatentBatch {
    pub fn new(z: Vec<f64>, d: usize, targets: Vec<f64>) -> Result<Self> {
        if d == 0 || z.len() != d * targets.len() {
            return shape_err(format!(
                "{} latent values do not form {} rows of width {d}",
                z.len(),
                targets.len()
            ));
        }
        Ok(LatentBatch { z, d, targets })
    }

    /// All rows regressed to the same target.
    pub fn constant_target(z: &Tensor, target: f64) -> Result<Self> {
        let (n, d) = match *z.shape() {
            [n, d] => (n, d),
            ref s => return shape_err(format!("latent batch must be [N,d], got {s:?}")),
        };
        LatentBatch::new(z.data().to_vec(), d, vec![target; n])
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.z[n * self.d..(n + 1) * self.d]
    }

    pub fn as_tensor(&self) -> Result<Tensor> {
        Tensor::new(&[self.len(), self.d], self.z.clone())
    }
}

/// Negative log of prior times likelihood.
pub fn map_objective(batch: &LatentBatch, layout: &HeadLayout, w: &[f64], alpha: f64, beta: f64) -> Result<f64> {
    if batch.d != layout.d_in || w.len() != layout.param_count() {
        return shape_err("batch or weights do not match head layout");
    }
    let outputs: Vec<f64> = (0..batch.len()).map(|n| layout.forward(w, batch.row(n))).collect();
    Ok(-log_likelihood(&batch.targets, &outputs, beta)? - log_prior(w, alpha)?)
}

/// Records `-ln p(D|w) - ln p(w)` given outputs `f` (`[B]`) and weights `w`.
///
/// `data_weight` rescales the likelihood term so a minibatch can stand in for
/// the full data set.
pub fn map_objective_taped(
    tape: &mut GradTape,
    f: Var,
    targets: &[f64],
    w: Var,
    alpha: f64,
    beta: f64,
    data_weight: f64,
) -> Result<Var> {
    if !(alpha > 0.0 && beta > 0.0) {
        return invalid("precisions must be positive");
    }
    let n = targets.len() as f64;
    let dim = tape.value(w).len() as f64;
    let y = tape.constant(Tensor::new(tape.value(f).shape(), targets.to_vec())?);
    let r = tape.sub(y, f)?;
    let sq = tape.square(r)?;
    let sse = tape.sum(sq)?;
    let data = tape.scale(sse, 0.5 * beta * data_weight)?;
    let data = tape.add_scalar(data, -0.5 * n * data_weight * (beta / (2.0 * PI)).ln())?;
    let w2 = tape.square(w)?;
    let wsq = tape.sum(w2)?;
    let prior = tape.scale(wsq, 0.5 * alpha)?;
    let prior = tape.add_scalar(prior, -0.5 * dim * (alpha / (2.0 * PI)).ln())?;
    tape.add(data, prior)
}

/// Dense Gauss-Newton Hessian `sum_n g_n g_n^T` of the squared error.
pub fn gauss_newton_hessian(batch: &LatentBatch, layout: &HeadLayout, w: &[f64]) -> Result<DMatrix<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyData("Hessian needs at least one sample".into()));
    }
    let p = layout.param_count();
    let mut g_rows = DMatrix::<f64>::zeros(batch.len(), p);
    for n in 0..batch.len() {
        let g = layout.gradient(w, batch.row(n));
        g_rows.row_mut(n).copy_from_slice(&g);
    }
    Ok(g_rows.transpose() * &g_rows)
}

/// Predictive distribution at one input.
#[derive(Debug, Clone)]
pub struct LaplacePredictive {
    pub mean: f64,
    /// `d f / d w` at the point estimate.
    pub g: Vec<f64>,
    pub sigma2: f64,
}

#[derive(Debug, Clone)]
enum Solver {
    Dense(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Iterative,
}

/// Gauss-Newton Laplace approximation around fixed head weights.
///
/// Hessian-vector products use the head's rank structure, so `H` is never
/// formed unless the weight dimension is at most the dense limit.
#[derive(Debug, Clone)]
pub struct LaplaceApprox {
    layout: HeadLayout,
    w: Vec<f64>,
    alpha: f64,
    beta: f64,
    latents: LatentBatch,
    /// Hidden activations per training row, `[n, hidden]`.
    hidden_cache: Vec<f64>,
    solver: Solver,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
}

impl LaplaceApprox {
    pub fn new(
        layout: HeadLayout,
        w: Vec<f64>,
        alpha: f64,
        beta: f64,
        latents: LatentBatch,
        dense_limit: usize,
    ) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0) {
            return invalid("precisions must be positive");
        }
        if latents.is_empty() {
            return Err(Error::EmptyData("Laplace approximation needs training latents".into()));
        }
        if latents.d != layout.d_in || w.len() != layout.param_count() {
            return shape_err("latents or weights do not match head layout");
        }
        let hidden_cache = match layout.hidden {
            Some(h) => (0..latents.len())
                .into_par_iter()
                .flat_map_iter(|n| layout.hidden_of(&w, latents.row(n), h))
                .collect(),
            None => Vec::new(),
        };
        let p = layout.param_count();
        let solver = if p <= dense_limit {
            let h = gauss_newton_hessian(&latents, &layout, &w)?;
            let a = DMatrix::<f64>::identity(p, p) * alpha + h * beta;
            let chol = a
                .cholesky()
                .ok_or_else(|| Error::Numerical("alpha I + beta H is not positive definite".into()))?;
            Solver::Dense(chol)
        } else {
            Solver::Iterative
        };
        Ok(LaplaceApprox {
            layout,
            w,
            alpha,
            beta,
            latents,
            hidden_cache,
            solver,
            cg_tol: 1e-12,
            cg_max_iter: 2000,
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.param_count()
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.solver, Solver::Dense(_))
    }

    /// `out = H v` with `H = sum_n g_n g_n^T`.
    pub fn hessian_vector(&self, v: &[f64], out: &mut [f64]) {
        let d = self.layout.d_in;
        let n = self.latents.len();
        out.fill(0.0);
        match self.layout.hidden {
            Some(h) => {
                let o = h * d + h;
                let w2 = &self.w[o..o + h];
                // g_n . v = z_n . (V1^T w2) + w2 . vb1 + h_n . vw2 + vb2
                let mut u = vec![0.0; d];
                for j in 0..h {
                    axpy(w2[j], &v[j * d..(j + 1) * d], &mut u);
                }
                let shift = dot(w2, &v[h * d..h * d + h]) + v[o + h];
                let vw2 = &v[o..o + h];
                let c: Vec<f64> = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        dot(self.latents.row(i), &u) + dot(&self.hidden_cache[i * h..(i + 1) * h], vw2) + shift
                    })
                    .collect();
                // sum_n c_n g_n, using the rank-one structure of each g_n
                let mut a = vec![0.0; d];
                let mut csum = 0.0;
                for (i, &ci) in c.iter().enumerate() {
                    axpy(ci, self.latents.row(i), &mut a);
                    csum += ci;
                }
                for j in 0..h {
                    let row = &mut out[j * d..(j + 1) * d];
                    for (r, &ak) in row.iter_mut().zip(&a) {
                        *r = w2[j] * ak;
                    }
                    out[h * d + j] = w2[j] * csum;
                    out[o + j] = dot(&self.w[j * d..(j + 1) * d], &a) + self.w[h * d + j] * csum;
                }
                out[o + h] = csum;
            }
            None => {
                let c: Vec<f64> = (0..n)
                    .into_par_iter()
                    .map(|i| dot(self.latents.row(i), &v[..d]) + v[d])
                    .collect();
                for (i, &ci) in c.iter().enumerate() {
                    axpy(ci, self.latents.row(i), &mut out[..d]);
                    out[d] += ci;
                }
            }
        }
    }

    fn apply_precision(&self, v: &[f64], out: &mut [f64]) {
        self.hessian_vector(v, out);
        for (o, &vi) in out.iter_mut().zip(v) {
            *o = self.alpha * vi + self.beta * *o;
        }
    }

    /// `(alpha I + beta H)^-1 b` by conjugate gradients.
    pub fn solve_cg(&self, b: &[f64]) -> Result<Vec<f64>> {
        let out = conjugate_gradient(|v, o| self.apply_precision(v, o), b, self.cg_tol, self.cg_max_iter);
        if !out.converged && out.relative_residual > 1e-6 {
            return Err(Error::Numerical(format!(
                "CG did not converge: residual {:.3e} after {} iterations",
                out.relative_residual, out.iterations
            )));
        }
        Ok(out.x)
    }

    /// `(alpha I + beta H)^-1 b` by a dense Cholesky factorisation.
    pub fn solve_dense(&self, b: &[f64]) -> Result<Vec<f64>> {
        match &self.solver {
            Solver::Dense(chol) => Ok(chol.solve(&DVector::from_column_slice(b)).as_slice().to_vec()),
            Solver::Iterative => invalid(format!(
                "dimension {} is above the dense limit; use the CG solve",
                self.dim()
            )),
        }
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        match self.solver {
            Solver::Dense(_) => self.solve_dense(b),
            Solver::Iterative => self.solve_cg(b),
        }
    }

    /// `g^T (alpha I + beta H)^-1 g`.
    pub fn quadratic_form(&self, g: &[f64]) -> Result<f64> {
        Ok(dot(g, &self.solve(g)?))
    }

    pub fn predictive(&self, z: &[f64]) -> Result<LaplacePredictive> {
        if z.len() != self.layout.d_in {
            return shape_err(format!("latent has {} entries, head expects {}", z.len(), self.layout.d_in));
        }
        let mean = self.layout.forward(&self.w, z);
        let g = self.layout.gradient(&self.w, z);
        let q = self.quadratic_form(&g)?;
        Ok(LaplacePredictive { mean, g, sigma2: 1.0 / self.beta + q.max(0.0) })
    }
}

/// Head weights with their prior and noise precisions.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesianHead {
    pub layout: HeadLayout,
    pub alpha: f64,
    pub beta: f64,
    /// Point estimate (the MAP weights once trained).
    pub weights: Vec<f64>,
}

impl BayesianHead {
    pub fn new(layout: HeadLayout, alpha: f64, beta: f64, rng: &mut impl Rng) -> Result<Self> {
        Self::with_weights(layout, alpha, beta, layout.init(rng))
    }

    pub fn with_weights(layout: HeadLayout, alpha: f64, beta: f64, weights: Vec<f64>) -> Result<Self> {
        if !(alpha > 0.0) || !(beta > 0.0) {
            return invalid(format!("alpha and beta must be positive, got {alpha}, {beta}"));
        }
        if weights.len() != layout.param_count() {
            return shape_err(format!(
                "head needs {} weights, got {}",
                layout.param_count(),
                weights.len()
            ));
        }
        Ok(BayesianHead { layout, alpha, beta, weights })
    }

    pub fn predict(&self, z: &[f64]) -> f64 {
        self.layout.forward(&self.weights, z)
    }

    pub fn laplace(&self, latents: LatentBatch, dense_limit: usize) -> Result<LaplaceApprox> {
        LaplaceApprox::new(self.layout, self.weights.clone(), self.alpha, self.beta, latents, dense_limit)
    }

    /// Mean and variance of `p(y | z, D)` under the Laplace approximation.
    pub fn predictive(&self, z: &[f64], laplace: &LaplaceApprox) -> Result<LaplacePredictive> {
        if laplace.w != self.weights {
            return invalid("Laplace approximation was built for different weights");
        }
        laplace.predictive(z)
    }

    /// Damped Gauss-Newton refinement of the point estimate on fixed latents.
    ///
    /// For a linear head one step lands on the exact minimiser. Returns the
    /// final objective value.
    pub fn refine_map(&mut self, batch: &LatentBatch, steps: usize, dense_limit: usize) -> Result<f64> {
        let mut obj = map_objective(batch, &self.layout, &self.weights, self.alpha, self.beta)?;
        for _ in 0..steps {
            let mut grad: Vec<f64> = self.weights.iter().map(|w| self.alpha * w).collect();
            for n in 0..batch.len() {
                let z = batch.row(n);
                let r = self.layout.forward(&self.weights, z) - batch.targets[n];
                axpy(self.beta * r, &self.layout.gradient(&self.weights, z), &mut grad);
            }
            let lap = self.laplace(batch.clone(), dense_limit)?;
            let dir = lap.solve(&grad)?;
            let mut t = 1.0;
            let mut improved = false;
            for _ in 0..30 {
                let cand: Vec<f64> = self.weights.iter().zip(&dir).map(|(w, d)| w - t * d).collect();
                let c_obj = map_objective(batch, &self.layout, &cand, self.alpha, self.beta)?;
                if c_obj <= obj {
                    self.weights = cand;
                    obj = c_obj;
                    improved = true;
                    break;
                }
                t *= 0.5;
            }
            if !improved {
                break;
            }
        }
        Ok(obj)
    }
}

/// Mean-field Gaussian over head weights.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPosterior {
    pub means: Vec<f64>,
    pub log_stds: Vec<f64>,
}

impl VariationalPosterior {
    pub fn new(means: Vec<f64>, log_stds: Vec<f64>) -> Result<Self> {
        if means.len() != log_stds.len() {
            return shape_err("means and log_stds differ in length");
        }
        if log_stds.iter().any(|s| !s.is_finite()) {
            return invalid("log standard deviations must be finite");
        }
        Ok(VariationalPosterior { means, log_stds })
    }

    /// `q` equal to the prior `N(0, 1/alpha)` in every coordinate.
    pub fn from_prior(dim: usize, alpha: f64) -> Self {
        VariationalPosterior { means: vec![0.0; dim], log_stds: vec![-0.5 * alpha.ln(); dim] }
    }

    /// Centered on `means` with a common standard deviation.
    pub fn around(means: Vec<f64>, std: f64) -> Self {
        let n = means.len();
        VariationalPosterior { means, log_stds: vec![std.ln(); n] }
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn stds(&self) -> Vec<f64> {
        self.log_stds.iter().map(|s| s.exp()).collect()
    }

    /// `KL(q || N(0, alpha^-1 I))` in closed form.
    pub fn kl_to_prior(&self, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0) {
            return invalid("alpha must be positive");
        }
        Ok(self
            .means
            .iter()
            .zip(&self.log_stds)
            .map(|(m, ls)| {
                let var = (2.0 * ls).exp();
                0.5 * (alpha * (var + m * m) - 1.0 - alpha.ln() - 2.0 * ls)
            })
            .sum())
    }

    /// Reparameterised draws `means + stds * eps` for each noise row.
    pub fn sample_with(&self, noise: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let stds = self.stds();
        noise
            .iter()
            .map(|eps| {
                self.means
                    .iter()
                    .zip(&stds)
                    .zip(eps)
                    .map(|((m, s), e)| m + s * e)
                    .collect()
            })
            .collect()
    }
}

/// Widths up to this are fully whitened by [`standard_noise`].
pub const WHITEN_LIMIT: usize = 64;

/// `n` standard-normal noise rows of width `dim`.
///
/// With two or more rows each coordinate is re-centred and rescaled to zero
/// sample mean and unit sample second moment, which removes the first- and
/// second-moment Monte-Carlo error of the reparameterised estimator. When
/// `n > dim` and `dim <= WHITEN_LIMIT` the rows are also decorrelated, so the
/// sample covariance is exactly the identity.
pub fn standard_noise(n: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    if n < 2 {
        return rows;
    }
    for j in 0..dim {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        let s = var.sqrt();
        if s > 0.0 {
            for r in rows.iter_mut() {
                r[j] = (r[j] - mean) / s;
            }
        }
    }
    if n > dim && dim <= WHITEN_LIMIT {
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        for r in &rows {
            let v = DVector::from_column_slice(r);
            cov += &v * v.transpose();
        }
        cov /= n as f64;
        if let Some(chol) = cov.cholesky() {
            let l = chol.l();
            for r in rows.iter_mut() {
                let v = DVector::from_column_slice(r);
                if let Some(x) = l.solve_lower_triangular(&v) {
                    r.copy_from_slice(x.as_slice());
                }
            }
        }
    }
    rows
}

/// Monte-Carlo evidence lower bound `E_q[ln p(D|w)] - KL(q || prior)`.
pub fn elbo(
    batch: &LatentBatch,
    layout: &HeadLayout,
    q: &VariationalPosterior,
    alpha: f64,
    beta: f64,
    n_mc: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if n_mc == 0 {
        return invalid("need at least one Monte-Carlo sample");
    }
    let noise = standard_noise(n_mc, q.dim(), rng);
    elbo_with_noise(batch, layout, q, alpha, beta, &noise)
}

pub fn elbo_with_noise(
    batch: &LatentBatch,
    layout: &HeadLayout,
    q: &VariationalPosterior,
    alpha: f64,
    beta: f64,
    noise: &[Vec<f64>],
) -> Result<f64> {
    if q.dim() != layout.param_count() || batch.d != layout.d_in {
        return shape_err("variational posterior or batch does not match head layout");
    }
    let mut expected = 0.0;
    for w in q.sample_with(noise) {
        let outputs: Vec<f64> = (0..batch.len()).map(|n| layout.forward(&w, batch.row(n))).collect();
        expected += log_likelihood(&batch.targets, &outputs, beta)?;
    }
    expected /= noise.len() as f64;
    Ok(expected - q.kl_to_prior(alpha)?)
}

/// Records the negative ELBO (scaled by `data_weight` on the likelihood) for
/// gradients with respect to `means` and `log_stds`.
#[allow(clippy::too_many_arguments)]
pub fn neg_elbo_taped(
    tape: &mut GradTape,
    layout: &HeadLayout,
    means: Var,
    log_stds: Var,
    z: Var,
    targets: &[f64],
    noise: &[Vec<f64>],
    alpha: f64,
    beta: f64,
    data_weight: f64,
    mask: Option<&Tensor>,
) -> Result<Var> {
    if noise.is_empty() {
        return invalid("need at least one noise sample");
    }
    let dim = layout.param_count();
    let stds = tape.exp(log_stds)?;
    let mut total: Option<Var> = None;
    for eps in noise {
        let e = tape.constant(Tensor::new(&[dim], eps.clone())?);
        let scaled = tape.mul(stds, e)?;
        let w = tape.add(means, scaled)?;
        let f = layout.forward_taped(tape, w, z, mask.cloned())?;
        let y = tape.constant(Tensor::new(tape.value(f).shape(), targets.to_vec())?);
        let r = tape.sub(y, f)?;
        let sq = tape.square(r)?;
        let sse = tape.sum(sq)?;
        total = Some(match total {
            Some(t) => tape.add(t, sse)?,
            None => sse,
        });
    }
    let sse = total.expect("non-empty noise");
    let n = targets.len() as f64;
    let nll = tape.scale(sse, 0.5 * beta * data_weight / noise.len() as f64)?;
    let nll = tape.add_scalar(nll, -0.5 * n * data_weight * (beta / (2.0 * PI)).ln())?;

    // KL = sum 0.5 * (alpha (s^2 + m^2) - 1 - ln alpha - 2 ln s)
    let var = tape.square(stds)?;
    let m2 = tape.square(means)?;
    let second = tape.add(var, m2)?;
    let second = tape.sum(second)?;
    let second = tape.scale(second, 0.5 * alpha)?;
    let ls = tape.sum(log_stds)?;
    let ls = tape.scale(ls, -1.0)?;
    let kl = tape.add(second, ls)?;
    let kl = tape.add_scalar(kl, -0.5 * dim as f64 * (1.0 + alpha.ln()))?;
    tape.add(nll, kl)
}

/// Fits `q` to a fixed latent batch by gradient descent on the negative ELBO.
///
/// Returns the ELBO (estimated with the same noise) after every step.
#[allow(clippy::too_many_arguments)]
pub fn fit_variational(
    batch: &LatentBatch,
    layout: &HeadLayout,
    q: &mut VariationalPosterior,
    alpha: f64,
    beta: f64,
    steps: usize,
    lr: f64,
    n_mc: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if q.dim() != layout.param_count() || batch.d != layout.d_in {
        return shape_err("variational posterior or batch does not match head layout");
    }
    if n_mc == 0 {
        return invalid("need at least one Monte-Carlo sample");
    }
    let z = batch.as_tensor()?;
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let noise = standard_noise(n_mc, q.dim(), rng);
        let mut tape = GradTape::new();
        let m = tape.param(Tensor::from_vec(q.means.clone()));
        let ls = tape.param(Tensor::from_vec(q.log_stds.clone()));
        let zv = tape.constant(z.clone());
        let loss = neg_elbo_taped(&mut tape, layout, m, ls, zv, &batch.targets, &noise, alpha, beta, 1.0, None)?;
        let g = tape.backward(loss)?;
        axpy(-lr, g.wrt(m).data(), &mut q.means);
        axpy(-lr, g.wrt(ls).data(), &mut q.log_stds);
        trace.push(elbo_with_noise(batch, layout, q, alpha, beta, &noise)?);
    }
    Ok(trace)
}
