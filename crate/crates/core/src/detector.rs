//! A complete scorer: input statistics, feature extractor, Bayesian head and
//! the decision threshold.

use rand::Rng;
use rayon::prelude::*;

use crate::bayes::{BayesianHead, HeadLayout, LaplaceApprox, LaplacePredictive, LatentBatch, VariationalPosterior};
use crate::error::{Error, Result};
use crate::eval::{classify, Verdict};
use crate::model::{Architecture, FineToCoarseCnn};
use crate::preprocess::{prepare, NormStats};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    Map,
    Variational,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub norm: NormStats,
    pub cnn: FineToCoarseCnn,
    pub head: BayesianHead,
    /// Present when trained variationally; scores then use its means.
    pub posterior: Option<VariationalPosterior>,
    /// Threshold: an image is synthetic iff its score is at most `gamma`.
    pub gamma: Option<f64>,
    /// Real-validation percentile `gamma` was placed at.
    pub percentile: f64,
    pub trained: bool,
}

impl Detector {
    pub fn new(arch: Architecture, alpha: f64, beta: f64, rng: &mut impl Rng) -> Result<Self> {
        let cnn = FineToCoarseCnn::xavier_init(arch, rng)?;
        let layout = HeadLayout::two_layer(cnn.feature_len(), cnn.arch().hidden);
        let head = BayesianHead::new(layout, alpha, beta, rng)?;
        Ok(Detector {
            norm: NormStats::identity(),
            cnn,
            head,
            posterior: None,
            gamma: None,
            percentile: crate::eval::DEFAULT_PERCENTILE,
            trained: false,
        })
    }

    pub fn arch(&self) -> &Architecture {
        self.cnn.arch()
    }

    /// Weights used for scoring: the variational means if present, else the point estimate.
    pub fn scoring_weights(&self) -> &[f64] {
        match &self.posterior {
            Some(q) => &q.means,
            None => &self.head.weights,
        }
    }

    /// Decoded image -> cropped, normalised network input.
    pub fn prepare(&self, raw: &Tensor) -> Result<Tensor> {
        prepare(raw, self.arch().input_size, &self.norm)
    }

    /// Inference-mode latent vector of a prepared input.
    pub fn latent(&self, x: &Tensor) -> Result<Tensor> {
        self.cnn.features(x)
    }

    /// Predictive mean `f(w, x)` of a prepared input.
    pub fn posterior_score(&self, x: &Tensor) -> Result<f64> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        self.score_unchecked(x)
    }

    pub(crate) fn score_unchecked(&self, x: &Tensor) -> Result<f64> {
        let z = self.cnn.features(x)?;
        Ok(self.head.layout.forward(self.scoring_weights(), z.data()))
    }

    /// Scores decoded (uncropped) images in parallel.
    pub fn score_images(&self, raws: &[Tensor]) -> Result<Vec<f64>> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        raws.par_iter().map(|r| self.score_unchecked(&self.prepare(r)?)).collect()
    }

    pub fn verdict(&self, score: f64) -> Result<Verdict> {
        let gamma = self.gamma.ok_or(Error::Untrained)?;
        Ok(classify(score, gamma))
    }

    /// Laplace approximation of the head around its scoring weights, built on
    /// the latents of the given prepared training inputs.
    pub fn laplace(&self, prepared_train: &[Tensor], dense_limit: usize) -> Result<LaplaceApprox> {
        let z: Vec<Tensor> = prepared_train
            .par_iter()
            .map(|x| self.latent(x))
            .collect::<Result<_>>()?;
        let z = Tensor::stack(&z)?;
        let batch = LatentBatch::constant_target(&z, crate::bayes::REAL_TARGET)?;
        let head = BayesianHead::with_weights(
            self.head.layout,
            self.head.alpha,
            self.head.beta,
            self.scoring_weights().to_vec(),
        )?;
        head.laplace(batch, dense_limit)
    }

    /// Predictive mean and variance for a prepared input.
    pub fn predictive(&self, x: &Tensor, laplace: &LaplaceApprox) -> Result<LaplacePredictive> {
        let z = self.latent(x)?;
        laplace.predictive(z.data())
    }
}
