//! Evaluation: clustering strength of labelled embeddings, the modality
//! ablation, linear interpolation between priors, a deterministic 2-D
//! principal-component projection, emotion accuracy, and metric reports.

mod generation;
mod report;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedder::{EmbedderModel, EmotionPrior};
use crate::error::{Error, Result};
use crate::synthdata::ClipRecord;

pub use generation::{
    code_purity, corpus_channel_means, generate_and_score, interpolation_curve, prompts_from_samples, CodePurity,
    GeneratedPair, GenerationReport,
};
pub use report::{write_csv, MetricReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Points produced by `interp`.
    pub interp_steps: usize,
    /// Generated latents per emotion for accuracy and swap tests.
    pub samples_per_emotion: usize,
    /// Noised latents scored per discriminator quartile evaluation.
    pub quartile_evals: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { interp_steps: 9, samples_per_emotion: 64, quartile_evals: 1024 }
    }
}

const INTRA_FLOOR: f64 = 1e-8;

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Clustering statistics of labelled embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterStats {
    /// Mean over classes of the mean point-to-centroid distance (floored).
    pub d_intra: f64,
    /// Mean pairwise distance between class centroids.
    pub d_inter: f64,
    /// `d_inter / d_intra`.
    pub d_cls: f64,
    /// Per class: mean distance from its centroid to the other centroids
    /// over its own (floored) intra-class distance.
    pub per_class: BTreeMap<usize, f64>,
}

pub fn cluster_stats(points: &[(Vec<f64>, usize)]) -> Result<ClusterStats> {
    let mut groups: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for (v, label) in points {
        groups.entry(*label).or_default().push(v);
    }
    if groups.len() < 2 {
        return Err(Error::data("clustering strength needs at least two classes"));
    }
    if let Some((label, g)) = groups.iter().find(|(_, g)| g.len() < 2) {
        return Err(Error::data(format!("class {label} has {} point(s), need at least 2", g.len())));
    }
    let d = points[0].0.len();
    if points.iter().any(|(v, _)| v.len() != d) {
        return Err(Error::argument("embeddings differ in length"));
    }
    let mut centroids = Vec::with_capacity(groups.len());
    let mut intra = Vec::with_capacity(groups.len());
    for g in groups.values() {
        let mut c = vec![0.0; d];
        for v in g {
            c.iter_mut().zip(v.iter()).for_each(|(a, x)| *a += x);
        }
        c.iter_mut().for_each(|a| *a /= g.len() as f64);
        let spread = g.iter().map(|v| dist(v, &c)).sum::<f64>() / g.len() as f64;
        intra.push(spread.max(INTRA_FLOOR));
        centroids.push(c);
    }
    let k = centroids.len();
    let d_intra = intra.iter().sum::<f64>() / k as f64;
    let mut pair_sum = 0.0;
    let mut pairs = 0usize;
    let mut per_class = BTreeMap::new();
    for (i, label) in groups.keys().enumerate() {
        let mut own = 0.0;
        for j in 0..k {
            if i != j {
                let dij = dist(&centroids[i], &centroids[j]);
                own += dij;
                if j > i {
                    pair_sum += dij;
                    pairs += 1;
                }
            }
        }
        per_class.insert(*label, own / (k - 1) as f64 / intra[i]);
    }
    let d_inter = pair_sum / pairs as f64;
    Ok(ClusterStats { d_intra, d_inter, d_cls: d_inter / d_intra, per_class })
}

/// `d_inter / d_intra` over labelled embeddings.
pub fn clustering_strength(points: &[(Vec<f64>, usize)]) -> Result<f64> {
    Ok(cluster_stats(points)?.d_cls)
}

/// Which streams the embedder sees in an ablation arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationArm {
    AudioOnly,
    VisualOnly,
    Both,
}

impl AblationArm {
    pub const ALL: [AblationArm; 3] = [AblationArm::AudioOnly, AblationArm::VisualOnly, AblationArm::Both];

    pub fn name(self) -> &'static str {
        match self {
            AblationArm::AudioOnly => "audio_only",
            AblationArm::VisualOnly => "visual_only",
            AblationArm::Both => "both",
        }
    }

    pub fn apply(self, clip: &ClipRecord) -> ClipRecord {
        let mut c = clip.clone();
        match self {
            AblationArm::AudioOnly => c.visual.drop_out(),
            AblationArm::VisualOnly => c.audio.drop_out(),
            AblationArm::Both => {}
        }
        c
    }
}

/// Per-emotion clustering strength for each ablation arm.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    /// `per_emotion[arm][emotion]`: per-class strength, computed among the
    /// clips of each identity and averaged over identities.
    pub per_emotion: BTreeMap<AblationArm, BTreeMap<usize, f64>>,
    /// Pooled strength over all clips with emotion labels.
    pub pooled: BTreeMap<AblationArm, f64>,
}

impl AblationResult {
    /// Whether `both > visual_only > audio_only` holds for every emotion.
    pub fn ordering_holds(&self) -> bool {
        let a = &self.per_emotion[&AblationArm::AudioOnly];
        let v = &self.per_emotion[&AblationArm::VisualOnly];
        let b = &self.per_emotion[&AblationArm::Both];
        a.keys().all(|e| b[e] > v[e] && v[e] > a[e])
    }
}

/// Prior means of every clip under one ablation arm, in corpus order.
pub fn ablation_means(corpus: &[ClipRecord], embedder: &EmbedderModel, arm: AblationArm) -> Result<Vec<Vec<f64>>> {
    let zeros = vec![0.0; embedder.d_s()];
    corpus
        .par_iter()
        .map(|clip| Ok(embedder.prior(&arm.apply(clip), &zeros)?.mu))
        .collect()
}

/// Clustering strength of prior means by emotion with the visual stream
/// removed, the audio stream removed, and both present. Emotion classes are
/// compared among clips of the same identity, then averaged over identities.
pub fn modality_ablation(corpus: &[ClipRecord], embedder: &EmbedderModel) -> Result<AblationResult> {
    let mut per_emotion = BTreeMap::new();
    let mut pooled = BTreeMap::new();
    for arm in AblationArm::ALL {
        let means = ablation_means(corpus, embedder, arm)?;
        let mut by_identity: BTreeMap<u32, Vec<(Vec<f64>, usize)>> = BTreeMap::new();
        for (clip, mu) in corpus.iter().zip(&means) {
            by_identity.entry(clip.identity).or_default().push((mu.clone(), clip.emotion as usize));
        }
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for points in by_identity.values() {
            for (e, v) in cluster_stats(points)?.per_class {
                let s = sums.entry(e).or_insert((0.0, 0));
                s.0 += v;
                s.1 += 1;
            }
        }
        per_emotion.insert(arm, sums.into_iter().map(|(e, (s, n))| (e, s / n as f64)).collect());
        let all: Vec<(Vec<f64>, usize)> = corpus.iter().zip(means).map(|(c, m)| (m, c.emotion as usize)).collect();
        pooled.insert(arm, clustering_strength(&all)?);
    }
    Ok(AblationResult { per_emotion, pooled })
}

/// `(1 − α)·s1.sample + α·s2.sample` for `α = i / (steps − 1)`.
pub fn interpolate(s1: &EmotionPrior, s2: &EmotionPrior, steps: usize) -> Result<Vec<Vec<f64>>> {
    if steps < 2 {
        return Err(Error::argument("interpolation needs at least 2 steps"));
    }
    if s1.sample.len() != s2.sample.len() {
        return Err(Error::argument("priors differ in length"));
    }
    let mut out = Vec::with_capacity(steps);
    for i in 0..steps {
        if i == 0 {
            out.push(s1.sample.clone());
        } else if i == steps - 1 {
            out.push(s2.sample.clone());
        } else {
            let alpha = i as f64 / (steps - 1) as f64;
            out.push(s1.sample.iter().zip(&s2.sample).map(|(a, b)| (1.0 - alpha) * a + alpha * b).collect());
        }
    }
    Ok(out)
}

/// Top-two principal-component coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    /// Unit principal directions (largest-magnitude loading positive).
    pub components: [Vec<f64>; 2],
    /// Variance captured by each component.
    pub explained: [f64; 2],
    pub total_variance: f64,
    /// Set when the covariance is (numerically) zero; coordinates are zeros.
    pub degenerate: bool,
}

pub fn project_2d(points: &[Vec<f64>]) -> Result<Projection> {
    if points.len() < 3 {
        return Err(Error::data("projection needs at least 3 embeddings"));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::argument("embeddings must share a non-zero length"));
    }
    let n = points.len();
    let mut mean = vec![0.0; d];
    for p in points {
        mean.iter_mut().zip(p).for_each(|(m, x)| *m += x / n as f64);
    }
    let centred = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = centred.transpose() * &centred / n as f64;
    let total_variance = cov.trace();
    if total_variance <= 1e-15 {
        return Ok(Projection {
            coords: vec![[0.0; 2]; n],
            components: [vec![0.0; d], vec![0.0; d]],
            explained: [0.0; 2],
            total_variance,
            degenerate: true,
        });
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components: [Vec<f64>; 2] = [vec![0.0; d], vec![0.0; d]];
    let mut explained = [0.0; 2];
    for (slot, &idx) in order.iter().take(2).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let lead = argmax(&v.iter().map(|x| x.abs()).collect::<Vec<_>>());
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        explained[slot] = eig.eigenvalues[idx].max(0.0);
        components[slot] = v;
    }
    let coords = (0..n)
        .map(|i| {
            let row = centred.row(i);
            let c = |k: usize| row.iter().zip(&components[k]).map(|(a, b)| a * b).sum::<f64>();
            [c(0), c(1)]
        })
        .collect();
    Ok(Projection { coords, components, explained, total_variance, degenerate: false })
}

/// Fraction of probability vectors whose argmax equals the target class.
pub fn emo_accuracy(probs: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::data("emotion accuracy needs at least one sample"));
    }
    if probs.len() != targets.len() {
        return Err(Error::argument("one target per sample required"));
    }
    let hits = probs.iter().zip(targets).filter(|(p, &t)| argmax(p) == t).count();
    Ok(hits as f64 / probs.len() as f64)
}
