//! ZSL and GZSL evaluation: Top-1 accuracy, harmonic mean, the seen-unseen
//! calibration-sweep AUC, and average-confidence tables.

use rand::Rng;

use crate::autodiff::{Tape, Tensor};
use crate::data::{ClassId, FeatureDataset, LabeledFeatures, SemanticTable};
use crate::error::{Error, Result};
use crate::models::{DiscriminatorNet, LsrGanModel, NoiseSpec};
use crate::similarity::{cosine_sim, ClassCentroids};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    Softmax,
    Similarity,
}

/// Per-sample class scores over a stated class set, with true labels.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    pub kind: ScoreKind,
    pub class_ids: Vec<ClassId>,
    pub scores: Tensor,
    pub labels: Vec<ClassId>,
}

impl ScoreMatrix {
    pub fn new(
        kind: ScoreKind,
        class_ids: Vec<ClassId>,
        scores: Tensor,
        labels: Vec<ClassId>,
    ) -> Result<Self> {
        if scores.cols() != class_ids.len() {
            return Err(Error::ShapeMismatch {
                op: "score_matrix",
                detail: format!("{} cols vs {} classes", scores.cols(), class_ids.len()),
            });
        }
        if scores.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "score_matrix",
                detail: format!("{} rows vs {} labels", scores.rows(), labels.len()),
            });
        }
        Ok(ScoreMatrix {
            kind,
            class_ids,
            scores,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn column_of(&self, class: ClassId) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }
}

/// Softmax probabilities of the classifier head over all classes.
pub fn classifier_scores(d: &DiscriminatorNet, samples: &LabeledFeatures) -> Result<ScoreMatrix> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let (_, logits) = d.discriminate(&samples.features)?;
    let mut tape = Tape::new();
    let l = tape.constant(&logits);
    let p = tape.softmax(l);
    let probs = tape.value_tensor(p);
    let class_ids = (1..=logits.cols() as u32).map(ClassId).collect();
    ScoreMatrix::new(ScoreKind::Softmax, class_ids, probs, samples.labels.clone())
}

/// Cosine similarities of each sample to the given class centroids.
pub fn centroid_scores(
    centroids: &ClassCentroids,
    samples: &LabeledFeatures,
) -> Result<ScoreMatrix> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let n = samples.len();
    let k = centroids.class_ids().len();
    let mut scores = Vec::with_capacity(n * k);
    for i in 0..n {
        let row = samples.features.row(i);
        for c in 0..k {
            scores.push(cosine_sim(row, centroids.matrix().row(c))?);
        }
    }
    ScoreMatrix::new(
        ScoreKind::Similarity,
        centroids.class_ids().to_vec(),
        Tensor::new(n, k, scores)?,
        samples.labels.clone(),
    )
}

/// Fraction of samples whose top class (optionally restricted to `allowed`)
/// equals the true label. Ties go to the earlier column.
pub fn top1_accuracy(scores: &ScoreMatrix, allowed: Option<&[ClassId]>) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let columns: Vec<usize> = match allowed {
        Some(set) => set
            .iter()
            .filter_map(|&c| scores.column_of(c))
            .collect(),
        None => (0..scores.class_ids.len()).collect(),
    };
    if columns.is_empty() {
        return Err(Error::InvalidArgument(
            "no allowed classes present in the score matrix".into(),
        ));
    }
    let mut hits = 0usize;
    for (i, &label) in scores.labels.iter().enumerate() {
        let row = scores.scores.row(i);
        let best = columns
            .iter()
            .copied()
            .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
            .expect("nonempty columns");
        if scores.class_ids[best] == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / scores.labels.len() as f64)
}

/// ZSL Top-1: argmax restricted to the unseen label set.
pub fn zsl_top1(scores: &ScoreMatrix, unseen: &[ClassId]) -> Result<f64> {
    top1_accuracy(scores, Some(unseen))
}

#[derive(Debug, Clone, Copy)]
pub enum ZslPredictor {
    Classifier,
    NearestCentroid,
}

/// ZSL accuracy of a trained model under the chosen predictor. The
/// nearest-centroid route generates `m_eval` samples per unseen class and
/// classifies by cosine similarity to the resulting centroids.
pub fn zsl_accuracy<R: Rng>(
    model: &LsrGanModel,
    dataset: &FeatureDataset,
    semantics: &SemanticTable,
    predictor: ZslPredictor,
    m_eval: usize,
    rng: &mut R,
) -> Result<f64> {
    match predictor {
        ZslPredictor::Classifier => {
            let scores = classifier_scores(&model.discriminator, dataset.test_unseen())?;
            zsl_top1(&scores, dataset.unseen_classes())
        }
        ZslPredictor::NearestCentroid => {
            let centroids =
                generated_centroids(model, semantics, dataset.unseen_classes(), m_eval, rng)?;
            let scores = centroid_scores(&centroids, dataset.test_unseen())?;
            zsl_top1(&scores, dataset.unseen_classes())
        }
    }
}

/// Per-class centroids of freshly generated features.
pub fn generated_centroids<R: Rng>(
    model: &LsrGanModel,
    semantics: &SemanticTable,
    classes: &[ClassId],
    samples_per_class: usize,
    rng: &mut R,
) -> Result<ClassCentroids> {
    let noise = NoiseSpec {
        dim: model.config.noise_dim,
    };
    let mut rows = Vec::with_capacity(classes.len());
    let mut labels = Vec::with_capacity(classes.len());
    for &c in classes {
        let t_raw = Tensor::row_vector(semantics.vector(c)?.to_vec());
        let cond = model.condition(&t_raw)?;
        let z = noise.sample(samples_per_class, rng);
        let fake = model.generator.generate(&z, &cond)?;
        let mut mean = vec![0.0; fake.cols()];
        for i in 0..fake.rows() {
            for (m, &v) in mean.iter_mut().zip(fake.row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= fake.rows() as f64;
        }
        rows.push(mean);
        labels.push(c);
    }
    ClassCentroids::new(labels, Tensor::from_rows(&rows)?)
}

/// Harmonic mean of unseen and seen accuracies; zero when both vanish.
pub fn gzsl_harmonic(unseen: f64, seen: f64) -> f64 {
    if unseen + seen == 0.0 {
        0.0
    } else {
        2.0 * unseen * seen / (unseen + seen)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GzslResult {
    pub unseen: f64,
    pub seen: f64,
    pub harmonic: f64,
}

/// GZSL accuracies with the full label space as the search space for both
/// test partitions.
pub fn gzsl_metrics(seen_scores: &ScoreMatrix, unseen_scores: &ScoreMatrix) -> Result<GzslResult> {
    let seen = top1_accuracy(seen_scores, None)?;
    let unseen = top1_accuracy(unseen_scores, None)?;
    Ok(GzslResult {
        unseen,
        seen,
        harmonic: gzsl_harmonic(unseen, seen),
    })
}

#[derive(Debug, Clone)]
pub struct AucResult {
    pub auc: f64,
    /// (seen accuracy, unseen accuracy) points with S ascending.
    pub curve: Vec<(f64, f64)>,
    pub degenerate: bool,
}

/// Seen-unseen AUC via a calibration sweep: a bias subtracted from every
/// seen-class score trades seen accuracy against unseen accuracy; the area
/// under the resulting U-vs-S curve summarizes the tradeoff on [0,1]^2.
pub fn seen_unseen_auc(
    seen_scores: &ScoreMatrix,
    unseen_scores: &ScoreMatrix,
    seen_set: &[ClassId],
) -> Result<AucResult> {
    if seen_scores.is_empty() || unseen_scores.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    if seen_scores.class_ids != unseen_scores.class_ids {
        return Err(Error::InvalidArgument(
            "score matrices cover different class sets".into(),
        ));
    }
    let is_seen: Vec<bool> = seen_scores
        .class_ids
        .iter()
        .map(|c| seen_set.contains(c))
        .collect();

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for m in [seen_scores, unseen_scores] {
        for &v in m.scores.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let range = hi - lo;
    let pad = 1e-9 * (1.0 + range.abs());
    let gamma_hi = range + pad;
    let gamma_lo = -gamma_hi;
    const POINTS: usize = 201;

    let accuracy_at = |m: &ScoreMatrix, gamma: f64| -> f64 {
        let mut hits = 0usize;
        for (i, &label) in m.labels.iter().enumerate() {
            let row = m.scores.row(i);
            let mut best = 0usize;
            let mut best_score = f64::NEG_INFINITY;
            for (j, &s) in row.iter().enumerate() {
                let adj = if is_seen[j] { s - gamma } else { s };
                if adj > best_score {
                    best_score = adj;
                    best = j;
                }
            }
            if m.class_ids[best] == label {
                hits += 1;
            }
        }
        hits as f64 / m.labels.len() as f64
    };

    let mut points = Vec::with_capacity(POINTS);
    for k in 0..POINTS {
        let gamma = gamma_lo + (gamma_hi - gamma_lo) * k as f64 / (POINTS - 1) as f64;
        points.push((accuracy_at(seen_scores, gamma), accuracy_at(unseen_scores, gamma)));
    }
    let unbiased = (
        accuracy_at(seen_scores, 0.0),
        accuracy_at(unseen_scores, 0.0),
    );

    // upper envelope: one point per distinct S, keeping the best U
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut curve: Vec<(f64, f64)> = Vec::new();
    for (s, u) in points {
        match curve.last() {
            Some(&(ls, _)) if ls == s => {}
            _ => curve.push((s, u)),
        }
    }

    // A sweep that flips between the axes at a single bias carries no
    // tradeoff information; report the rectangle at the unbiased point.
    let has_interior = curve.iter().any(|&(s, u)| s > 0.0 && u > 0.0);
    if curve.len() < 2 || !has_interior {
        log::warn!("calibration sweep degenerated; reporting the unbiased rectangle area");
        return Ok(AucResult {
            auc: unbiased.0 * unbiased.1,
            curve,
            degenerate: true,
        });
    }
    let mut auc = 0.0;
    for w in curve.windows(2) {
        let (s0, u0) = w[0];
        let (s1, u1) = w[1];
        auc += (s1 - s0) * (u0 + u1) / 2.0;
    }
    Ok(AucResult {
        auc,
        curve,
        degenerate: false,
    })
}

#[derive(Debug, Clone)]
pub struct ClassConfidence {
    pub class_id: ClassId,
    /// Top classes by mean assigned probability, descending.
    pub top3: Vec<(ClassId, f64)>,
}

#[derive(Debug, Clone)]
pub struct ConfidenceReport {
    /// Mean true-class softmax probability over seen test samples.
    pub seen_mean: f64,
    /// Mean true-class softmax probability over unseen test samples.
    pub unseen_mean: f64,
    pub per_class: Vec<ClassConfidence>,
}

/// True-class confidence means per partition plus per-class top-3 tables of
/// mean assigned probability.
pub fn avg_confidence(
    seen_scores: &ScoreMatrix,
    unseen_scores: &ScoreMatrix,
) -> Result<ConfidenceReport> {
    for m in [seen_scores, unseen_scores] {
        if m.kind != ScoreKind::Softmax {
            return Err(Error::InvalidArgument(
                "confidence tables need softmax scores".into(),
            ));
        }
    }
    let true_class_mean = |m: &ScoreMatrix| -> Result<f64> {
        if m.is_empty() {
            return Err(Error::InvalidArgument("empty test set".into()));
        }
        let mut total = 0.0;
        for (i, &label) in m.labels.iter().enumerate() {
            let col = m.column_of(label).ok_or_else(|| {
                Error::InvalidArgument(format!("label {label} missing from score matrix"))
            })?;
            total += m.scores.get(i, col);
        }
        Ok(total / m.labels.len() as f64)
    };

    let mut per_class = Vec::new();
    for m in [seen_scores, unseen_scores] {
        let mut classes: Vec<ClassId> = m.labels.clone();
        classes.sort();
        classes.dedup();
        for c in classes {
            let rows: Vec<usize> = m
                .labels
                .iter()
                .enumerate()
                .filter(|(_, l)| **l == c)
                .map(|(i, _)| i)
                .collect();
            let k = m.class_ids.len();
            let mut mean = vec![0.0; k];
            for &i in &rows {
                for (acc, &v) in mean.iter_mut().zip(m.scores.row(i)) {
                    *acc += v;
                }
            }
            for v in &mut mean {
                *v /= rows.len() as f64;
            }
            let mut ranked: Vec<(ClassId, f64)> = m
                .class_ids
                .iter()
                .copied()
                .zip(mean)
                .collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked.truncate(3);
            per_class.push(ClassConfidence {
                class_id: c,
                top3: ranked,
            });
        }
    }
    Ok(ConfidenceReport {
        seen_mean: true_class_mean(seen_scores)?,
        unseen_mean: true_class_mean(unseen_scores)?,
        per_class,
    })
}
