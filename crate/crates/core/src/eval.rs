//! Thresholding, average precision and the evaluation drivers.
//!
//! Synthetic (anomalous) images are the positive class. Lower posterior
//! scores mean "more anomalous".

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::detector::Detector;
use crate::error::{invalid, Error, Result};
use crate::perturb::TransformKind;
use crate::preprocess::{DatasetSplit, ImageRecord, Label};
use crate::tensor::Tensor;

pub const DEFAULT_PERCENTILE: f64 = 5.0;
pub const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Real,
    Synthetic,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Real => "real",
            Verdict::Synthetic => "synthetic",
        }
    }
}

/// Real iff `score > gamma`; ties go to synthetic.
pub fn classify(score: f64, gamma: f64) -> Verdict {
    if score > gamma {
        Verdict::Real
    } else {
        Verdict::Synthetic
    }
}

/// Linear-interpolation percentile (`p` in percent) of `scores`.
pub fn percentile(scores: &[f64], p: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyData("no scores to take a percentile of".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return invalid(format!("percentile must be in [0, 100], got {p}"));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (s.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(s[lo] + (rank - lo as f64) * (s[hi] - s[lo]))
}

/// Places `gamma` at a low percentile of the real validation scores.
pub fn select_threshold(real_val_scores: &[f64], pct: f64) -> Result<f64> {
    if !(pct > 0.0 && pct <= 50.0) {
        return invalid(format!("threshold percentile must be in (0, 50], got {pct}"));
    }
    percentile(real_val_scores, pct)
}

/// Average precision with synthetic as the positive class, ranking by
/// ascending posterior score (descending anomaly score). Ties keep input order.
pub fn average_precision(scores: &[f64], synthetic: &[bool]) -> Result<f64> {
    if scores.len() != synthetic.len() {
        return invalid(format!("{} scores vs {} labels", scores.len(), synthetic.len()));
    }
    let positives = synthetic.iter().filter(|&&s| s).count();
    if positives == 0 || positives == synthetic.len() {
        return invalid("average precision needs both classes");
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if synthetic[i] {
            hits += 1;
            ap += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(ap / positives as f64)
}

/// Binned score counts for the two classes over a shared range.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub real: Vec<u64>,
    pub anomalous: Vec<u64>,
}

impl Histogram {
    pub fn build(real: &[f64], anomalous: &[f64], bins: usize) -> Result<Self> {
        if real.is_empty() && anomalous.is_empty() {
            return Err(Error::EmptyData("no scores to histogram".into()));
        }
        let all = real.iter().chain(anomalous);
        let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
        let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
        let mut h = Histogram { lo, hi, real: vec![0; bins], anomalous: vec![0; bins] };
        for &s in real {
            let b = h.bin(s);
            h.real[b] += 1;
        }
        for &s in anomalous {
            let b = h.bin(s);
            h.anomalous[b] += 1;
        }
        Ok(h)
    }

    pub fn bins(&self) -> usize {
        self.real.len()
    }

    fn bin(&self, s: f64) -> usize {
        let n = self.bins();
        if self.hi <= self.lo {
            return 0;
        }
        (((s - self.lo) / (self.hi - self.lo) * n as f64) as usize).min(n - 1)
    }

    pub fn edges(&self, b: usize) -> (f64, f64) {
        let width = (self.hi - self.lo) / self.bins() as f64;
        (self.lo + b as f64 * width, self.lo + (b + 1) as f64 * width)
    }

    /// Probability that a random real score exceeds a random anomalous one,
    /// from binned counts (same-bin pairs count one half).
    pub fn auc(&self) -> f64 {
        let nr: u64 = self.real.iter().sum();
        let na: u64 = self.anomalous.iter().sum();
        let mut below = 0u64;
        let mut wins = 0.0;
        for b in 0..self.bins() {
            wins += self.real[b] as f64 * (below as f64 + 0.5 * self.anomalous[b] as f64);
            below += self.anomalous[b];
        }
        wins / (nr as f64 * na as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count_real,count_anomalous\n");
        for b in 0..self.bins() {
            let (lo, hi) = self.edges(b);
            let _ = writeln!(out, "{lo},{hi},{},{}", self.real[b], self.anomalous[b]);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    /// Synthetic flagged synthetic.
    pub tp: u64,
    /// Real flagged synthetic.
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn tally(real: &[f64], anomalous: &[f64], gamma: f64) -> Self {
        let mut c = Confusion::default();
        for &s in real {
            match classify(s, gamma) {
                Verdict::Real => c.tn += 1,
                Verdict::Synthetic => c.fp += 1,
            }
        }
        for &s in anomalous {
            match classify(s, gamma) {
                Verdict::Synthetic => c.tp += 1,
                Verdict::Real => c.fn_ += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceResult {
    pub source: String,
    pub ap: f64,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub split: f64,
    pub gamma: f64,
    pub sources: Vec<SourceResult>,
    pub map: f64,
    pub histogram: Histogram,
    pub real_scores: Vec<f64>,
    pub anomalous_scores: BTreeMap<String, Vec<f64>>,
}

impl EvalReport {
    /// Builds per-source AP against the shared real scores.
    pub fn from_scores(
        split: f64,
        gamma: f64,
        real_scores: Vec<f64>,
        anomalous_scores: BTreeMap<String, Vec<f64>>,
    ) -> Result<Self> {
        if real_scores.is_empty() {
            return Err(Error::EmptyData("no real test images".into()));
        }
        if anomalous_scores.is_empty() || anomalous_scores.values().any(Vec::is_empty) {
            return Err(Error::EmptyData("every anomaly source needs test images".into()));
        }
        let mut sources = Vec::new();
        for (name, scores) in &anomalous_scores {
            let mut all = real_scores.clone();
            all.extend_from_slice(scores);
            let mut labels = vec![false; real_scores.len()];
            labels.extend(std::iter::repeat_n(true, scores.len()));
            sources.push(SourceResult {
                source: name.clone(),
                ap: average_precision(&all, &labels)?,
                confusion: Confusion::tally(&real_scores, scores, gamma),
            });
        }
        let map = sources.iter().map(|s| s.ap).sum::<f64>() / sources.len() as f64;
        let all_anom: Vec<f64> = anomalous_scores.values().flatten().copied().collect();
        let histogram = Histogram::build(&real_scores, &all_anom, HISTOGRAM_BINS)?;
        Ok(EvalReport { split, gamma, sources, map, histogram, real_scores, anomalous_scores })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("source,split,ap,map,gamma,tp,fp,tn,fn\n");
        for s in &self.sources {
            let c = s.confusion;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                s.source, self.split, s.ap, self.map, self.gamma, c.tp, c.fp, c.tn, c.fn_
            );
        }
        out
    }
}

/// Decodes, optionally transforms, and scores the images at `indices`.
fn score_indices(
    det: &Detector,
    pool: &[ImageRecord],
    indices: &[usize],
    transform: Option<(TransformKind, f64)>,
) -> Result<Vec<f64>> {
    indices
        .par_iter()
        .map(|&i| {
            let mut raw = pool[i].pixels()?;
            if let Some((kind, p)) = transform {
                raw = kind.apply(&raw, p)?;
            }
            det.posterior_score(&det.prepare(&raw)?)
        })
        .collect()
}

fn evaluate_with(
    det: &Detector,
    pool: &[ImageRecord],
    split: &DatasetSplit,
    transform: Option<(TransformKind, f64)>,
) -> Result<EvalReport> {
    let gamma = det.gamma.ok_or(Error::Untrained)?;
    let reals: Vec<usize> = DatasetSplit::reals(pool, &split.test).collect();
    let mut by_source: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for &i in &split.test {
        if let Label::Anomalous(s) = &pool[i].label {
            by_source.entry(s.clone()).or_default().push(i);
        }
    }
    if reals.is_empty() || by_source.is_empty() {
        return Err(Error::EmptyData("test split needs real and anomalous images".into()));
    }
    let real_scores = score_indices(det, pool, &reals, transform)?;
    let mut anomalous = BTreeMap::new();
    for (name, idx) in by_source {
        anomalous.insert(name, score_indices(det, pool, &idx, transform)?);
    }
    EvalReport::from_scores(split.fraction, gamma, real_scores, anomalous)
}

/// Per-source AP and mAP on the test split.
pub fn evaluate(det: &Detector, pool: &[ImageRecord], split: &DatasetSplit) -> Result<EvalReport> {
    evaluate_with(det, pool, split, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub parameter: f64,
    pub map: f64,
}

/// Re-evaluates with every grid value of `kind` applied to the test images.
pub fn perturbation_sweep(
    det: &Detector,
    pool: &[ImageRecord],
    split: &DatasetSplit,
    kind: TransformKind,
    grid: &[f64],
) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return invalid("perturbation grid is empty");
    }
    grid.iter()
        .map(|&p| {
            let r = evaluate_with(det, pool, split, Some((kind, p)))?;
            Ok(SweepPoint { parameter: p, map: r.map })
        })
        .collect()
}

pub fn sweep_csv(kind: TransformKind, points: &[SweepPoint]) -> String {
    let mut out = String::from("transform,parameter,map\n");
    for p in points {
        let _ = writeln!(out, "{kind},{},{}", p.parameter, p.map);
    }
    out
}

/// Scores of already-prepared inputs (used by training for validation).
pub(crate) fn score_prepared(det: &Detector, xs: &[Tensor]) -> Result<Vec<f64>> {
    xs.par_iter().map(|x| det.score_unchecked(x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_cases() {
        assert_eq!(select_threshold(&[0.3; 7], 5.0).unwrap(), 0.3);
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((select_threshold(&s, 5.0).unwrap() - 5.95).abs() < 1e-12);
        assert!(select_threshold(&[], 5.0).is_err());
        assert!(select_threshold(&s, 60.0).is_err());
    }

    #[test]
    fn classify_ties_are_synthetic() {
        assert_eq!(classify(0.4, 0.4), Verdict::Synthetic);
        assert_eq!(classify(0.4 + 1e-12, 0.4), Verdict::Real);
    }

    #[test]
    fn ap_perfect_and_single_class() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let l = [true, true, false, false];
        assert_eq!(average_precision(&s, &l).unwrap(), 1.0);
        assert!(average_precision(&s, &[true; 4]).is_err());
    }

    #[test]
    fn ap_small_hand_case() {
        // posteriors real {0.9, 0.8}, synthetic {0.85, 0.1}
        // ranking by ascending posterior: 0.1(S) 0.8(R) 0.85(S) 0.9(R)
        // AP = (1/1 + 2/3) / 2
        let s = [0.9, 0.8, 0.85, 0.1];
        let l = [false, false, true, true];
        assert!((average_precision(&s, &l).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn histogram_auc_separated() {
        let h = Histogram::build(&[0.8, 0.9, 1.0], &[0.0, 0.1], 10).unwrap();
        assert_eq!(h.auc(), 1.0);
        assert_eq!(h.real.iter().sum::<u64>(), 3);
        assert!(h.to_csv().starts_with("bin_lo,bin_hi,count_real,count_anomalous\n"));
    }

    #[test]
    fn duplicate_sources_equal_ap() {
        let real = vec![0.9, 0.7, 0.95, 0.4];
        let anom = vec![0.2, 0.5, 0.75];
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), anom.clone());
        m.insert("b".to_string(), anom);
        let r = EvalReport::from_scores(0.8, 0.45, real, m).unwrap();
        assert_eq!(r.sources[0].ap, r.sources[1].ap);
        assert_eq!(r.map, r.sources[0].ap);
    }
}
