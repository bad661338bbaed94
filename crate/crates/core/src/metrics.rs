//! Sample-quality metrics on features of a frozen random convolutional network.
//!
//! The extractor stands in for a pretrained classifier, so absolute values are
//! only comparable between runs that share the extractor seed.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::networks::{generate_with, Model};
use crate::seeds::derive_seed;
use crate::tensor::{conv2d, leaky_relu, resample, Direction, Real, Tensor};

/// Feature dimension of [`FeatureExtractor`].
pub const FEATURES: usize = 64;
/// Classes of the inception-score proxy head.
pub const CLASSES: usize = 10;
/// Neighbour count for precision and recall.
pub const NEIGHBORS: usize = 3;
/// Ridge added to covariances estimated from fewer than `f + 1` samples.
pub const SHRINKAGE: f64 = 1e-6;
const EXTRACT_CHUNK: usize = 64;
const GENERATE_CHUNK: usize = 25;

/// Three `conv 3×3 → lrelu → 2×2 pool` stages and a global average, with
/// weights drawn once from a seed.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    weights: Vec<Tensor<f64>>,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [3, 16, 32, FEATURES];
        let weights = widths
            .windows(2)
            .map(|w| {
                let scale = (2.0 / (w[0] * 9) as f64).sqrt();
                Tensor::<f64>::randn([w[1], w[0], 3, 3], &mut rng).scale(scale)
            })
            .collect();
        FeatureExtractor { weights }
    }

    /// `[N, 3, R, R]` images in `[-1, 1]` (R ≥ 8, divisible by 8) → `[N, 64]`.
    pub fn extract(&self, images: &Tensor<f64>) -> Result<Tensor<f64>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] < 8 || s[2] % 8 != 0 || s[3] != s[2] {
            return Err(Error::shape("extract_features", s, &[0, 3, 32, 32]));
        }
        if let Some(v) = images.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [-1, 1]")));
        }
        let n = s[0];
        let per = 3 * s[2] * s[3];
        let mut out = Vec::with_capacity(n * FEATURES);
        for start in (0..n).step_by(EXTRACT_CHUNK) {
            let end = (start + EXTRACT_CHUNK).min(n);
            let mut x = Tensor::new([end - start, 3, s[2], s[3]], images.data()[start * per..end * per].to_vec())?;
            for w in &self.weights {
                x = resample(&leaky_relu(&conv2d(&x, w)?, 0.2), Direction::Down)?;
            }
            let hw = x.shape()[2] * x.shape()[3];
            for plane in x.data().chunks(hw) {
                out.push(plane.iter().sum::<f64>() / hw as f64);
            }
        }
        Tensor::new([n, FEATURES], out)
    }
}

pub fn extract_features<T: Real>(images: &Tensor<T>, extractor: &FeatureExtractor) -> Result<Tensor<f64>> {
    extractor.extract(&images.cast())
}

/// Mean and covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, count: usize) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::shape("gaussian stats", &[mean.len()], &[cov.nrows(), cov.ncols()]));
        }
        Ok(GaussianStats { mean, cov, count })
    }

    /// Unbiased estimate from `[N, f]` rows; adds [`SHRINKAGE`]·I when N < f + 1.
    pub fn from_features(features: &Tensor<f64>) -> Result<Self> {
        let s = features.shape();
        if s.len() != 2 || s[0] < 2 {
            return Err(Error::invalid(format!("need at least 2 feature rows, got shape {s:?}")));
        }
        let (n, f) = (s[0], s[1]);
        let x = DMatrix::from_row_slice(n, f, features.data());
        let mean = DVector::from_iterator(f, x.column_iter().map(|c| c.sum() / n as f64));
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut cov = centered.transpose() * &centered / (n - 1) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        if n < f + 1 {
            for i in 0..f {
                cov[(i, i)] += SHRINKAGE;
            }
        }
        GaussianStats::new(mean, cov, n)
    }
}

fn eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new((m + m.transpose()) * 0.5)
}

fn check_psd(e: &SymmetricEigen<f64, nalgebra::Dyn>) -> Result<()> {
    let scale = e.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    match e.eigenvalues.iter().copied().find(|&v| v < -1e-6 * scale) {
        Some(v) => Err(Error::invalid(format!("covariance is not PSD (eigenvalue {v:e})"))),
        None => Ok(()),
    }
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^½)`, with the trace term evaluated as
/// `Tr (S Σb S)^½` for `S = Σa^½`, both roots by symmetric eigendecomposition
/// with negative eigenvalues clamped to zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::shape("frechet_distance", &[a.mean.len()], &[b.mean.len()]));
    }
    let ea = eigen(&a.cov);
    check_psd(&ea)?;
    check_psd(&eigen(&b.cov))?;
    let roots = ea.eigenvalues.map(|v| v.max(0.0).sqrt());
    let sqrt_a = &ea.eigenvectors * DMatrix::from_diagonal(&roots) * ea.eigenvectors.transpose();
    let inner = eigen(&(&sqrt_a * &b.cov * &sqrt_a));
    let cross: f64 = inner.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = &a.mean - &b.mean;
    let d = diff.dot(&diff) + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Frozen random linear map from features to class logits, applied after a
/// per-feature standardization (identity until [`calibrate`](Self::calibrate)d).
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    weight: DMatrix<f64>,
    center: DVector<f64>,
    scale: DVector<f64>,
}

impl ClassifierHead {
    pub fn new(seed: u64, features: usize, classes: usize) -> Self {
        let w = Tensor::<f64>::randn([features, classes], &mut ChaCha8Rng::seed_from_u64(seed));
        ClassifierHead {
            weight: DMatrix::from_row_slice(features, classes, w.data()) * (4.0 / (features as f64).sqrt()),
            center: DVector::zeros(features),
            scale: DVector::from_element(features, 1.0),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.ncols()
    }

    /// Fixes the standardization to the mean and spread of a reference set.
    pub fn calibrate(&mut self, reference: &Tensor<f64>) -> Result<()> {
        let s = reference.shape();
        if s.len() != 2 || s[1] != self.weight.nrows() || s[0] < 2 {
            return Err(Error::shape("classifier calibration", s, &[0, self.weight.nrows()]));
        }
        let x = DMatrix::from_row_slice(s[0], s[1], reference.data());
        for (j, col) in x.column_iter().enumerate() {
            let mean = col.mean();
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            self.center[j] = mean;
            self.scale[j] = 1.0 / (sd + 1e-8);
        }
        Ok(())
    }

    /// Softmax class probabilities for each `[N, f]` feature row.
    pub fn probabilities(&self, features: &Tensor<f64>) -> Result<Vec<Vec<f64>>> {
        let s = features.shape();
        if s.len() != 2 || s[1] != self.weight.nrows() {
            return Err(Error::shape("classifier head", s, &[0, self.weight.nrows()]));
        }
        let mut x = DMatrix::from_row_slice(s[0], s[1], features.data());
        for (j, mut col) in x.column_iter_mut().enumerate() {
            let (c, k) = (self.center[j], self.scale[j]);
            col.apply(|v| *v = (*v - c) * k);
        }
        let logits = x * &self.weight;
        Ok(logits
            .row_iter()
            .map(|row| {
                let max = row.max();
                let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|v| v / z).collect()
            })
            .collect())
    }
}

/// `exp(mean_x KL(p(y|x) ‖ p(y)))` over rows of class probabilities.
pub fn inception_score(probs: &[Vec<f64>]) -> Result<f64> {
    let Some(first) = probs.first() else {
        return Err(Error::invalid("inception score of an empty set"));
    };
    let c = first.len();
    if c < 2 || probs.iter().any(|p| p.len() != c) {
        return Err(Error::invalid("inception score needs at least 2 classes and equal-length rows"));
    }
    let mut marginal = vec![0.0; c];
    for p in probs {
        for (m, v) in marginal.iter_mut().zip(p) {
            *m += v / probs.len() as f64;
        }
    }
    let kl: f64 = probs
        .iter()
        .map(|p| {
            p.iter()
                .zip(&marginal)
                .filter(|(&v, _)| v > 0.0)
                .map(|(&v, &m)| v * (v.ln() - m.ln()))
                .sum::<f64>()
        })
        .sum::<f64>()
        / probs.len() as f64;
    Ok(kl.exp().clamp(1.0, c as f64))
}

pub fn inception_score_proxy(features: &Tensor<f64>, head: &ClassifierHead) -> Result<f64> {
    inception_score(&head.probabilities(features)?)
}

fn rows(t: &Tensor<f64>) -> Result<Vec<&[f64]>> {
    match t.shape() {
        [_, f] if *f > 0 => Ok(t.data().chunks(*f).collect()),
        s => Err(Error::shape("feature rows", s, &[0, 0])),
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each point to its `k`-th nearest other point.
fn knn_radii(points: &[&[f64]], k: usize) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| sq_dist(p, q))
                .collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect()
}

fn coverage(manifold: &[&[f64]], radii: &[f64], probes: &[&[f64]]) -> f64 {
    let covered = probes
        .iter()
        .filter(|q| manifold.iter().zip(radii).any(|(p, &r)| sq_dist(p, q) <= r))
        .count();
    covered as f64 / probes.len() as f64
}

/// Precision: share of fake points inside the k-NN ball of some real point.
/// Recall: share of real points inside the k-NN ball of some fake point.
pub fn precision_recall(real: &Tensor<f64>, fake: &Tensor<f64>, k: usize) -> Result<(f64, f64)> {
    let (r, f) = (rows(real)?, rows(fake)?);
    if k == 0 || r.len() < k + 1 || f.len() < k + 1 {
        return Err(Error::invalid(format!(
            "precision/recall with k = {k} needs at least {} points per set, got {} and {}",
            k + 1,
            r.len(),
            f.len()
        )));
    }
    if r[0].len() != f[0].len() {
        return Err(Error::shape("precision_recall", real.shape(), fake.shape()));
    }
    let precision = coverage(&r, &knn_radii(&r, k), &f);
    let recall = coverage(&f, &knn_radii(&f, k), &r);
    Ok((precision, recall))
}

/// `100 · (baseline − model) / baseline`.
pub fn fid_improvement(baseline_fid: f64, model_fid: f64) -> Result<f64> {
    if baseline_fid.is_nan() || baseline_fid <= 0.0 {
        return Err(Error::invalid(format!("baseline FID must be positive, got {baseline_fid}")));
    }
    Ok(100.0 * (baseline_fid - model_fid) / baseline_fid)
}

/// Rounds to two decimals, as improvement percentages are reported.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// One evaluated model.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub label: String,
    pub kimg: f64,
    pub fid: f64,
    pub is: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Plain-text table with one row per report and the FID improvement relative
/// to the row labelled `baseline` (when present).
pub fn report_table(reports: &[MetricsReport], baseline: &str) -> String {
    let base = reports.iter().find(|r| r.label == baseline).map(|r| r.fid);
    let width = reports.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>7}  {:>8}  {:>8}  {:>9}  {:>7}  {:>16}",
        "model", "kimg", "FID", "IS*", "precision", "recall", "FID improvement"
    );
    for r in reports {
        let imp = match base.map(|b| fid_improvement(b, r.fid)) {
            Some(Ok(v)) => format!("{:+.2} %", round2(v)),
            _ => "-".to_string(),
        };
        let _ = writeln!(
            out,
            "{:<width$}  {:>7.1}  {:>8.3}  {:>8.3}  {:>9.4}  {:>7.4}  {:>16}",
            r.label, r.kimg, r.fid, r.is, r.precision, r.recall, imp
        );
    }
    out.push_str("* IS is computed with a frozen random classifier head (proxy).\n");
    out
}

/// Frozen extractor, proxy head and cached real-image statistics for one dataset.
#[derive(Clone, Debug)]
pub struct Evaluator {
    pub extractor: FeatureExtractor,
    pub head: ClassifierHead,
    pub samples: usize,
    pub seed: u64,
    real_features: Tensor<f64>,
    real_stats: GaussianStats,
}

/// Fixed seed of the extractor and proxy head, shared by every evaluation.
pub const EXTRACTOR_SEED: u64 = 0x000f_1d5e;

impl Evaluator {
    /// Uses `samples` real images drawn without replacement (cycling if the
    /// dataset is smaller) from a permutation seeded by `seed`.
    pub fn new(dataset: &DatasetHandle, samples: usize, seed: u64) -> Result<Self> {
        if samples < NEIGHBORS + 1 {
            return Err(Error::invalid(format!("evaluation needs at least {} samples", NEIGHBORS + 1)));
        }
        let extractor = FeatureExtractor::new(EXTRACTOR_SEED);
        let mut head = ClassifierHead::new(EXTRACTOR_SEED + 1, FEATURES, CLASSES);
        let mut perm: Vec<usize> = (0..dataset.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xe7a1, 0)));
        let indices: Vec<usize> = (0..samples).map(|i| perm[i % perm.len()]).collect();
        let real = dataset.gather(&indices)?;
        let real_features = extract_features(&real, &extractor)?;
        let real_stats = GaussianStats::from_features(&real_features)?;
        head.calibrate(&real_features)?;
        Ok(Evaluator {
            extractor,
            head,
            samples,
            seed,
            real_features,
            real_stats,
        })
    }

    /// EMA-generator samples for this evaluator's seed.
    pub fn generate<T: Real>(&self, model: &Model<T>) -> Result<Tensor<f64>> {
        let mut data = Vec::new();
        let mut shape = Vec::new();
        for (chunk, start) in (0..self.samples).step_by(GENERATE_CHUNK).enumerate() {
            let n = GENERATE_CHUNK.min(self.samples - start);
            let seed = derive_seed(self.seed, 0xe7a2, chunk as u64);
            let z = model.sample_latents(n, seed);
            let imgs = generate_with(&model.generator, &model.g_ema, &z, seed)?;
            shape = imgs.shape().to_vec();
            data.extend(imgs.data().iter().map(|v| v.to_f64_lossless()));
        }
        shape[0] = self.samples;
        Tensor::new(shape, data)
    }

    pub fn evaluate<T: Real>(&self, model: &Model<T>, label: &str, kimg: f64) -> Result<MetricsReport> {
        let fake = self.extractor.extract(&self.generate(model)?)?;
        let stats = GaussianStats::from_features(&fake)?;
        let fid = frechet_distance(&self.real_stats, &stats)?;
        let is = inception_score_proxy(&fake, &self.head)?;
        let (precision, recall) = precision_recall(&self.real_features, &fake, NEIGHBORS)?;
        Ok(MetricsReport {
            label: label.to_string(),
            kimg,
            fid,
            is,
            precision,
            recall,
        })
    }
}

/// FID of each checkpoint, sorted by kimg.
pub fn fid_curve(checkpoints: &[impl AsRef<Path>], evaluator: &Evaluator) -> Result<Vec<(f64, f64)>> {
    if checkpoints.is_empty() {
        return Err(Error::invalid("no checkpoints to evaluate"));
    }
    let mut rows = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        let state = crate::checkpoint::load::<f32>(path.as_ref())?;
        let r = evaluator.evaluate(&state.model, "", state.kimg())?;
        rows.push((r.kimg, r.fid));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(rows)
}
