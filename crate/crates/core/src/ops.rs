//! Untaped layer primitives on single samples or batches.
//!
//! These are the same kernels the [`GradTape`](crate::tape::GradTape) records,
//! exposed for inference and for tests that need a forward pass only.

use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::kernels::{self, Window};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Runs a batched kernel on an unbatched `[C,H,W]` tensor.
fn unbatched(t: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshape(&shape)
}

fn rebatched(t: Tensor) -> Result<Tensor> {
    let shape = t.shape()[1..].to_vec();
    t.reshape(&shape)
}

/// Valid cross-correlation. Accepts `[C,H,W]` or batched `[B,C,H,W]` input.
pub fn conv2d_valid(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: (usize, usize)) -> Result<Tensor> {
    match input.ndim() {
        3 => rebatched(kernels::conv2d_forward(&unbatched(input)?, kernels, bias, stride)?),
        4 => kernels::conv2d_forward(input, kernels, bias, stride),
        _ => shape_err(format!("conv input must be 3-D or 4-D, got {:?}", input.shape())),
    }
}

pub fn mean_pool(input: &Tensor, kernel: (usize, usize), stride: (usize, usize)) -> Result<Tensor> {
    let win = Window { kh: kernel.0, kw: kernel.1, sh: stride.0, sw: stride.1 };
    match input.ndim() {
        3 => rebatched(kernels::mean_pool_forward(&unbatched(input)?, win)?),
        4 => kernels::mean_pool_forward(input, win),
        _ => shape_err(format!("pool input must be 3-D or 4-D, got {:?}", input.shape())),
    }
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(kernels::sigmoid_scalar)
}

pub fn linear(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    kernels::linear_forward(input, weights, bias)
}

/// Learnable scale/shift plus running statistics for one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Folds a batch's moments into the running estimates (unbiased variance).
    pub fn update_running(&mut self, mean: &[f64], var: &[f64], count: usize) {
        let m = self.momentum;
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * var[c] * unbias;
        }
    }
}

/// Batch normalisation over `[B, C, ...]`. Train mode updates `state`'s running stats.
pub fn batch_norm(input: &Tensor, state: &mut BatchNormState, mode: Mode) -> Result<Tensor> {
    let (nb, c, s) = kernels::bn_dims(input.shape())?;
    if c != state.channels() {
        return shape_err(format!("batch norm has {} channels, input has {c}", state.channels()));
    }
    let (mean, var) = match mode {
        Mode::Train => {
            if nb < 2 {
                return shape_err("batch norm in train mode needs a batch of at least 2");
            }
            let (mean, var) = kernels::channel_moments(input)?;
            state.update_running(&mean, &var, nb * s);
            (mean, var)
        }
        Mode::Infer => (state.running_mean.clone(), state.running_var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
    let xhat = kernels::bn_normalize(input, &mean, &inv_std)?;
    kernels::bn_affine(&xhat, &state.gamma, &state.beta)
}

/// Inverted-dropout keep mask: zeros with probability `rate`, survivors `1/(1-rate)`.
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return invalid(format!("dropout rate must lie in [0, 1), got {rate}"));
    }
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - rate);
    let data = (0..n)
        .map(|_| if rate > 0.0 && rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Tensor::new(shape, data)
}

pub fn dropout(input: &Tensor, rate: f64, mode: Mode, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return invalid(format!("dropout rate must lie in [0, 1), got {rate}"));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(input.clone());
    }
    let mask = dropout_mask(input.shape(), rate, rng)?;
    input.zip_map(&mask, |x, m| x * m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_scaling_case() {
        let x = Tensor::ones(&[1, 3, 3]);
        let k = Tensor::full(&[1, 1, 1, 1], 2.0);
        let y = conv2d_valid(&x, &k, &Tensor::zeros(&[1]), (1, 1)).unwrap();
        assert_eq!(y, Tensor::full(&[1, 3, 3], 2.0));
    }

    #[test]
    fn conv_hand_sum() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::ones(&[1, 1, 2, 2]);
        let y = conv2d_valid(&x, &k, &Tensor::zeros(&[1]), (1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn conv_full_scale_shape() {
        let x = Tensor::zeros(&[3, 224, 224]);
        let k = Tensor::zeros(&[16, 3, 5, 5]);
        let y = conv2d_valid(&x, &k, &Tensor::zeros(&[16]), (1, 1)).unwrap();
        assert_eq!(y.shape(), &[16, 220, 220]);
    }

    #[test]
    fn conv_channel_mismatch_rejected() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 2, 2]);
        assert!(matches!(
            conv2d_valid(&x, &k, &Tensor::zeros(&[1]), (1, 1)),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn conv_strided_matches_manual() {
        let x = Tensor::new(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let k = Tensor::ones(&[1, 1, 1, 1]);
        let y = conv2d_valid(&x, &k, &Tensor::full(&[1], 0.5), (2, 2)).unwrap();
        assert_eq!(y.data(), &[1.5, 3.5, 7.5, 9.5]);
    }

    #[test]
    fn pool_constant_and_hand_mean() {
        let c = Tensor::full(&[2, 7, 7], 0.3);
        let y = mean_pool(&c, (3, 3), (2, 2)).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));

        let x = Tensor::new(&[1, 4, 4], (1..=16).map(f64::from).collect()).unwrap();
        let y = mean_pool(&x, (4, 4), (2, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[8.5]);
    }

    #[test]
    fn pool_floor_shape_and_oversize() {
        let y = mean_pool(&Tensor::zeros(&[5, 47, 47]), (4, 4), (2, 2)).unwrap();
        assert_eq!(y.shape(), &[5, 22, 22]);
        assert!(mean_pool(&Tensor::zeros(&[1, 3, 3]), (4, 4), (2, 2)).is_err());
    }

    #[test]
    fn sigmoid_cases() {
        assert_eq!(sigmoid(&Tensor::scalar(0.0)).item(), 0.5);
        let s = sigmoid(&Tensor::scalar(-100.0)).item();
        assert!(s > 0.0 && s < 1e-40);
        let x = Tensor::from_vec(vec![-3.0, -0.5, 0.7, 40.0]);
        let a = sigmoid(&x);
        let b = sigmoid(&x.map(|v| -v));
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p + q - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_norm_train_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..4 * 3 * 5 * 5).map(|_| rng.random::<f64>() * 20.0 - 4.0).collect();
        let x = Tensor::new(&[4, 3, 5, 5], data).unwrap();
        let mut st = BatchNormState::new(3);
        let y = batch_norm(&x, &mut st, Mode::Train).unwrap();
        let (mean, var) = kernels::channel_moments(&y).unwrap();
        for c in 0..3 {
            assert!(mean[c].abs() < 1e-6);
            assert!((var[c] - 1.0).abs() < 1e-5, "var {}", var[c]);
        }
        assert!(st.running_mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn batch_norm_infer_identity_and_constant_channel() {
        let x = Tensor::new(&[2, 2, 2], vec![0.1, -2.0, 3.0, 4.5, 0.0, 1.0, 7.0, -1.0]).unwrap();
        let mut st = BatchNormState::new(2);
        st.eps = 0.0;
        assert_eq!(batch_norm(&x, &mut st, Mode::Infer).unwrap(), x);

        let c = Tensor::full(&[3, 2, 4], 5.0);
        let mut st = BatchNormState::new(2);
        let y = batch_norm(&c, &mut st, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_rejects_single_sample_training() {
        let mut st = BatchNormState::new(2);
        assert!(batch_norm(&Tensor::zeros(&[1, 2, 3]), &mut st, Mode::Train).is_err());
        assert!(batch_norm(&Tensor::zeros(&[1, 2, 3]), &mut st, Mode::Infer).is_ok());
    }

    #[test]
    fn linear_cases() {
        let x = Tensor::from_vec(vec![1.0, 1.0]);
        let w = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![0.0, 1.0]);
        assert_eq!(linear(&x, &w, &b).unwrap().data(), &[3.0, 8.0]);

        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = Tensor::from_vec(vec![-0.3, 9.0]);
        assert_eq!(linear(&v, &eye, &Tensor::zeros(&[2])).unwrap(), v);
        assert_eq!(linear(&v, &Tensor::zeros(&[2, 2]), &b).unwrap(), b);
        assert!(linear(&Tensor::zeros(&[3]), &w, &b).is_err());
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_vec(vec![1.0, -2.0, 3.0]);
        assert_eq!(dropout(&x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.7, Mode::Infer, &mut rng).unwrap(), x);
        assert!(dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_law_of_large_numbers() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::ones(&[1_000_000]);
        let y = dropout(&x, 0.5, Mode::Train, &mut rng).unwrap();
        let survivors = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e6;
        assert!((survivors - 0.5).abs() < 0.01);
        assert!((y.mean() - 1.0).abs() < 0.02);
    }
}
