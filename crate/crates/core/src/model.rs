//! The fine-to-coarse convolutional feature extractor.
//!
//! Three stages of convolution, mean pooling and sigmoid with strictly
//! increasing filter counts, then batch normalisation and flattening into the
//! latent vector consumed by [`BayesianHead`](crate::bayes::BayesianHead).

use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::kernels::{self, Window};
use crate::ops::{self, BatchNormState, Mode};
use crate::tape::{BatchStats, GradTape, Var};
use crate::tensor::Tensor;

pub const INPUT_CHANNELS: usize = 3;

/// Layer geometry of the extractor and head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Architecture {
    /// Side of the square network input (after center crop).
    pub input_size: usize,
    /// Filter count of each of the three stages.
    pub filters: [usize; 3],
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    /// Width of the first fully connected layer.
    pub hidden: usize,
    pub dropout: f64,
}

impl Architecture {
    /// Full-size network: 224 input, 5x5 convolutions, 4x4/2 mean pools, 15488 latent features.
    pub fn full() -> Self {
        Architecture {
            input_size: 224,
            filters: [16, 24, 32],
            conv_kernel: 5,
            conv_stride: 1,
            pool_kernel: 4,
            pool_stride: 2,
            hidden: 512,
            dropout: 0.5,
        }
    }

    /// Same stage layout at 32x32 input. The 5x5/4x4 windows cannot fit three
    /// valid stages into 32 pixels, so this uses 3x3 convolutions and 2x2/2 pools
    /// (32 -> 30 -> 15 -> 13 -> 6 -> 4 -> 2).
    pub fn reduced() -> Self {
        Architecture {
            input_size: 32,
            conv_kernel: 3,
            pool_kernel: 2,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.filters[0] < self.filters[1] && self.filters[1] < self.filters[2]) {
            return invalid(format!(
                "filter counts must strictly increase, got {:?}",
                self.filters
            ));
        }
        if self.hidden == 0 {
            return invalid("hidden width must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid(format!("dropout rate {} outside [0, 1)", self.dropout));
        }
        self.spatial_sizes().map(|_| ())
    }

    fn conv_window(&self) -> Window {
        Window::square(self.conv_kernel, self.conv_stride)
    }

    fn pool_window(&self) -> Window {
        Window::square(self.pool_kernel, self.pool_stride)
    }

    /// Spatial side after each conv and pool: `[conv1, pool1, conv2, pool2, conv3, pool3]`.
    pub fn spatial_sizes(&self) -> Result<[usize; 6]> {
        let mut sizes = [0; 6];
        let mut s = self.input_size;
        for stage in 0..3 {
            s = self.conv_window().out_dims(s, s)?.0;
            sizes[2 * stage] = s;
            s = self.pool_window().out_dims(s, s)?.0;
            sizes[2 * stage + 1] = s;
        }
        Ok(sizes)
    }

    /// Length of the flattened latent vector.
    pub fn feature_len(&self) -> usize {
        let s = self.spatial_sizes().map(|s| s[5]).unwrap_or(0);
        s * s * self.filters[2]
    }
}

/// Handles to the extractor's parameters on a tape.
#[derive(Debug, Clone)]
pub struct CnnVars {
    pub kernels: [Var; 3],
    pub biases: [Var; 3],
    pub bn_gamma: Var,
    pub bn_beta: Var,
}

/// Output of a taped forward pass.
#[derive(Debug)]
pub struct TapedFeatures {
    /// `[B, feature_len]` latent batch.
    pub z: Var,
    /// Last sigmoid output, before batch norm.
    pub pre_norm: Var,
    pub batch_stats: Option<BatchStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineToCoarseCnn {
    arch: Architecture,
    pub kernels: [Tensor; 3],
    pub biases: [Tensor; 3],
    pub bn: BatchNormState,
}

/// Uniform Xavier bound `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn xavier_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = xavier_bound(fan_in, fan_out);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape matches element count")
}

impl FineToCoarseCnn {
    /// Xavier-initialised kernels, zero biases, identity batch norm.
    pub fn xavier_init(arch: Architecture, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let k = arch.conv_kernel;
        let mut in_c = INPUT_CHANNELS;
        let mut kernels = Vec::with_capacity(3);
        let mut biases = Vec::with_capacity(3);
        for &out_c in &arch.filters {
            kernels.push(xavier_uniform(&[out_c, in_c, k, k], in_c * k * k, out_c * k * k, rng));
            biases.push(Tensor::zeros(&[out_c]));
            in_c = out_c;
        }
        let bn = BatchNormState::new(arch.filters[2]);
        Ok(FineToCoarseCnn {
            kernels: kernels.try_into().expect("three stages"),
            biases: biases.try_into().expect("three stages"),
            bn,
            arch,
        })
    }

    pub fn from_parts(arch: Architecture, kernels: [Tensor; 3], biases: [Tensor; 3], bn: BatchNormState) -> Result<Self> {
        arch.validate()?;
        let k = arch.conv_kernel;
        let mut in_c = INPUT_CHANNELS;
        for (i, &out_c) in arch.filters.iter().enumerate() {
            if kernels[i].shape() != [out_c, in_c, k, k] || biases[i].shape() != [out_c] {
                return shape_err(format!("stage {} parameter shapes do not match architecture", i + 1));
            }
            in_c = out_c;
        }
        if bn.channels() != arch.filters[2] {
            return shape_err("batch norm width does not match last stage");
        }
        Ok(FineToCoarseCnn { arch, kernels, biases, bn })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn feature_len(&self) -> usize {
        self.arch.feature_len()
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        let s = self.arch.input_size;
        match *shape {
            [c, h, w] if c == INPUT_CHANNELS && h == s && w == s => Ok(1),
            [b, c, h, w] if c == INPUT_CHANNELS && h == s && w == s => Ok(b),
            _ => shape_err(format!("model expects [3,{s},{s}] input (optionally batched), got {shape:?}")),
        }
    }

    /// Conv/pool/sigmoid stack without batch norm; entries lie in (0, 1).
    pub fn forward_stages(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.check_input(x.shape())?;
        let s = self.arch.input_size;
        let mut h = x.clone().reshape(&[b, INPUT_CHANNELS, s, s])?;
        let stride = (self.arch.conv_stride, self.arch.conv_stride);
        for i in 0..3 {
            h = kernels::conv2d_forward(&h, &self.kernels[i], &self.biases[i], stride)?;
            h = kernels::mean_pool_forward(&h, self.arch.pool_window())?;
            h = ops::sigmoid(&h);
        }
        Ok(h)
    }

    /// Latent features for one image `[3,S,S]` (-> `[F]`) or a batch (-> `[B,F]`).
    ///
    /// Train mode normalises with batch statistics and folds them into the
    /// running estimates, so it needs a batch of at least two.
    pub fn forward_features(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let single = x.ndim() == 3;
        let h = self.forward_stages(x)?;
        let b = h.shape()[0];
        let z = ops::batch_norm(&h, &mut self.bn, mode)?;
        if single {
            z.reshape(&[self.feature_len()])
        } else {
            z.reshape(&[b, self.feature_len()])
        }
    }

    /// Inference-mode features; does not touch any state.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut frozen = self.bn.clone();
        let single = x.ndim() == 3;
        let h = self.forward_stages(x)?;
        let b = h.shape()[0];
        let z = ops::batch_norm(&h, &mut frozen, Mode::Infer)?;
        if single {
            z.reshape(&[self.feature_len()])
        } else {
            z.reshape(&[b, self.feature_len()])
        }
    }

    pub fn register(&self, tape: &mut GradTape) -> CnnVars {
        CnnVars {
            kernels: self.kernels.clone().map(|k| tape.param(k)),
            biases: self.biases.clone().map(|b| tape.param(b)),
            bn_gamma: tape.param(Tensor::from_vec(self.bn.gamma.clone())),
            bn_beta: tape.param(Tensor::from_vec(self.bn.beta.clone())),
        }
    }

    /// Records the forward pass of a `[B,3,S,S]` batch on `tape`.
    pub fn forward_taped(&self, tape: &mut GradTape, vars: &CnnVars, x: Var, mode: Mode) -> Result<TapedFeatures> {
        let b = self.check_input(tape.value(x).shape())?;
        let stride = (self.arch.conv_stride, self.arch.conv_stride);
        let mut h = x;
        for i in 0..3 {
            h = tape.conv2d(h, vars.kernels[i], vars.biases[i], stride)?;
            h = tape.mean_pool(h, self.arch.pool_window())?;
            h = tape.sigmoid(h)?;
        }
        let pre_norm = h;
        let (z, batch_stats) = match mode {
            Mode::Train => {
                let (z, st) = tape.batch_norm_train(h, vars.bn_gamma, vars.bn_beta, self.bn.eps)?;
                (z, Some(st))
            }
            Mode::Infer => {
                let z = tape.batch_norm_fixed(
                    h,
                    vars.bn_gamma,
                    vars.bn_beta,
                    &self.bn.running_mean,
                    &self.bn.running_var,
                    self.bn.eps,
                )?;
                (z, None)
            }
        };
        let z = tape.reshape(z, &[b, self.feature_len()])?;
        Ok(TapedFeatures { z, pre_norm, batch_stats })
    }

    /// Parameters in a fixed order: kernels, biases, bn gamma, bn beta.
    pub fn param_tensors(&self) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = self.kernels.to_vec();
        out.extend(self.biases.iter().cloned());
        out.push(Tensor::from_vec(self.bn.gamma.clone()));
        out.push(Tensor::from_vec(self.bn.beta.clone()));
        out
    }

    /// Adds `step * delta[i]` to parameter `i` (same order as [`param_tensors`](Self::param_tensors)).
    pub fn apply_update(&mut self, deltas: &[&Tensor], step: f64) {
        let mut i = 0;
        for t in self.kernels.iter_mut().chain(self.biases.iter_mut()) {
            crate::tensor::axpy(step, deltas[i].data(), t.data_mut());
            i += 1;
        }
        crate::tensor::axpy(step, deltas[i].data(), &mut self.bn.gamma);
        crate::tensor::axpy(step, deltas[i + 1].data(), &mut self.bn.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_pipeline_sizes() {
        let a = Architecture::full();
        assert_eq!(a.spatial_sizes().unwrap(), [220, 109, 105, 51, 47, 22]);
        assert_eq!(a.feature_len(), 15488);
    }

    #[test]
    fn reduced_pipeline_sizes() {
        let a = Architecture::reduced();
        assert_eq!(a.spatial_sizes().unwrap(), [30, 15, 13, 6, 4, 2]);
        assert_eq!(a.feature_len(), 128);
    }

    #[test]
    fn non_increasing_filters_rejected() {
        let a = Architecture { filters: [16, 16, 32], ..Architecture::reduced() };
        assert!(a.validate().is_err());
    }

    #[test]
    fn xavier_conv1_bound() {
        let b = xavier_bound(75, 400);
        assert!((b - (6.0f64 / 475.0).sqrt()).abs() < 1e-15);
        assert!((b - 0.1124).abs() < 5e-5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cnn = FineToCoarseCnn::xavier_init(Architecture::full(), &mut rng).unwrap();
        assert!(cnn.kernels[0].data().iter().all(|v| v.abs() <= b));
        assert!(cnn.biases.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn xavier_sample_mean_clt() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = xavier_bound(75, 400);
        let t = xavier_uniform(&[100_000], 75, 400, &mut rng);
        assert!(t.mean().abs() < 3.0 * b / (1e5f64).sqrt());
    }

    #[test]
    fn zero_input_zero_bias_gives_half_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cnn = FineToCoarseCnn::xavier_init(Architecture::reduced(), &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 3, 32, 32]);
        let c = kernels::conv2d_forward(&x, &cnn.kernels[0], &cnn.biases[0], (1, 1)).unwrap();
        let p = kernels::mean_pool_forward(&c, Window::square(2, 2)).unwrap();
        assert!(ops::sigmoid(&p).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn taped_and_direct_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cnn = FineToCoarseCnn::xavier_init(Architecture::reduced(), &mut rng).unwrap();
        let x = Tensor::new(&[2, 3, 32, 32], (0..2 * 3 * 32 * 32).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
        let direct = cnn.features(&x).unwrap();
        let mut tape = GradTape::new();
        let vars = cnn.register(&mut tape);
        let xv = tape.constant(x);
        let out = cnn.forward_taped(&mut tape, &vars, xv, Mode::Infer).unwrap();
        assert_eq!(tape.value(out.z), &direct);
    }
}
