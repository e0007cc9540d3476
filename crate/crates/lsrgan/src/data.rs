//! Dataset representation, plain-text file ingestion, minibatch sampling and
//! the synthetic shared-latent dataset generator.
//!
//! File formats (whitespace-delimited UTF-8, `#` starts a comment):
//!   visual file    header `V n C`, then one `label v1 .. vV` line per sample
//!   semantic file  header `L C`, then one `class_id s1 .. sL` line per class
//!   split file     `seen: id ..` / `unseen: id ..` and an optional
//!                  `test_seen: i ..` line of 1-based sample indices
//!
//! External class ids may be arbitrary; loaders remap them to contiguous
//! 1-based ids with seen classes first and keep the mapping for reporting.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rand_util::{normal_matrix, standard_normal};

/// 1-based class label. Seen classes occupy 1..=C_s, unseen C_s+1..=C.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassId(pub u32);

impl ClassId {
    /// 0-based row index for tensors indexed by class.
    pub fn index(self) -> usize {
        debug_assert!(self.0 >= 1);
        self.0 as usize - 1
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SemanticMode {
    Attributes,
    Tfidf,
}

impl SemanticMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SemanticMode::Attributes => "attributes",
            SemanticMode::Tfidf => "tfidf",
        }
    }
}

impl std::str::FromStr for SemanticMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attributes" => Ok(SemanticMode::Attributes),
            "tfidf" => Ok(SemanticMode::Tfidf),
            other => Err(Error::Config(format!(
                "unknown semantic mode '{other}' (expected attributes|tfidf)"
            ))),
        }
    }
}

/// One semantic vector per class; row c-1 belongs to class c.
#[derive(Debug, Clone)]
pub struct SemanticTable {
    mode: SemanticMode,
    vectors: Tensor,
}

impl SemanticTable {
    pub fn new(mode: SemanticMode, vectors: Tensor) -> Result<Self> {
        for c in 0..vectors.rows() {
            if vectors.row(c).iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "semantic vector for class {} is all zero",
                    c + 1
                )));
            }
        }
        Ok(SemanticTable { mode, vectors })
    }

    pub fn mode(&self) -> SemanticMode {
        self.mode
    }

    pub fn class_count(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vector(&self, class: ClassId) -> Result<&[f64]> {
        if class.index() >= self.vectors.rows() {
            return Err(Error::InvalidArgument(format!(
                "class {class} outside semantic table of {} classes",
                self.vectors.rows()
            )));
        }
        Ok(self.vectors.row(class.index()))
    }

    pub fn matrix(&self) -> &Tensor {
        &self.vectors
    }

    /// Rows for a batch of labels, in batch order.
    pub fn rows_for(&self, labels: &[ClassId]) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(labels.len());
        for &l in labels {
            rows.push(self.vector(l)?.to_vec());
        }
        Tensor::from_rows(&rows)
    }
}

/// Feature rows with one label per row.
#[derive(Debug, Clone)]
pub struct LabeledFeatures {
    pub features: Tensor,
    pub labels: Vec<ClassId>,
}

impl LabeledFeatures {
    pub fn empty(dim: usize) -> Self {
        LabeledFeatures {
            features: Tensor::zeros(0, dim),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Visual features with a seen/unseen class split and held-out test
/// partitions. Training rows only ever carry seen labels.
#[derive(Debug, Clone)]
pub struct FeatureDataset {
    train: LabeledFeatures,
    test_seen: LabeledFeatures,
    test_unseen: LabeledFeatures,
    seen_classes: Vec<ClassId>,
    unseen_classes: Vec<ClassId>,
    /// external_ids[c.index()] = class id token used in the source files.
    external_ids: Vec<String>,
    /// train row indices per seen class, in dataset order.
    train_by_class: Vec<Vec<usize>>,
}

impl FeatureDataset {
    pub fn new(
        train: LabeledFeatures,
        test_seen: LabeledFeatures,
        test_unseen: LabeledFeatures,
        seen_count: usize,
        unseen_count: usize,
        external_ids: Vec<String>,
    ) -> Result<Self> {
        let total = seen_count + unseen_count;
        if external_ids.len() != total {
            return Err(Error::InvalidArgument(format!(
                "{} external ids for {} classes",
                external_ids.len(),
                total
            )));
        }
        let seen_classes: Vec<ClassId> = (1..=seen_count as u32).map(ClassId).collect();
        let unseen_classes: Vec<ClassId> = (seen_count as u32 + 1..=total as u32)
            .map(ClassId)
            .collect();
        for &l in &train.labels {
            if l.index() >= seen_count {
                return Err(Error::InvalidArgument(format!(
                    "training sample labeled with unseen class {l}"
                )));
            }
        }
        let mut train_by_class = vec![Vec::new(); seen_count];
        for (i, &l) in train.labels.iter().enumerate() {
            train_by_class[l.index()].push(i);
        }
        if let Some(empty) = train_by_class.iter().position(|v| v.is_empty()) {
            return Err(Error::InvalidArgument(format!(
                "seen class {} has no training samples",
                empty + 1
            )));
        }
        let v = train.features.cols();
        for part in [&test_seen, &test_unseen] {
            if part.features.cols() != v {
                return Err(Error::ShapeMismatch {
                    op: "dataset",
                    detail: format!("{} vs {} feature dims", part.features.cols(), v),
                });
            }
        }
        Ok(FeatureDataset {
            train,
            test_seen,
            test_unseen,
            seen_classes,
            unseen_classes,
            external_ids,
            train_by_class,
        })
    }

    pub fn train(&self) -> &LabeledFeatures {
        &self.train
    }

    pub fn test_seen(&self) -> &LabeledFeatures {
        &self.test_seen
    }

    pub fn test_unseen(&self) -> &LabeledFeatures {
        &self.test_unseen
    }

    pub fn seen_classes(&self) -> &[ClassId] {
        &self.seen_classes
    }

    pub fn unseen_classes(&self) -> &[ClassId] {
        &self.unseen_classes
    }

    pub fn class_count(&self) -> usize {
        self.seen_classes.len() + self.unseen_classes.len()
    }

    pub fn visual_dim(&self) -> usize {
        self.train.features.cols()
    }

    pub fn external_id(&self, class: ClassId) -> &str {
        &self.external_ids[class.index()]
    }

    pub fn summary(&self, table: &SemanticTable) -> String {
        format!(
            "C_s={} C_u={} V={} L={} train={} test_seen={} test_unseen={} mode={}",
            self.seen_classes.len(),
            self.unseen_classes.len(),
            self.visual_dim(),
            table.dim(),
            self.train.len(),
            self.test_seen.len(),
            self.test_unseen.len(),
            table.mode().as_str(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Seen,
    Unseen,
}

/// Seen-phase batch: visual features with matching labels.
#[derive(Debug, Clone)]
pub struct SeenBatch {
    pub features: Tensor,
    pub labels: Vec<ClassId>,
}

/// Unseen-phase batch: labels only. No visual features exist for these
/// classes, and the type makes that impossible to violate.
#[derive(Debug, Clone)]
pub struct UnseenBatch {
    pub labels: Vec<ClassId>,
}

#[derive(Debug, Clone)]
pub enum MiniBatch {
    Seen(SeenBatch),
    Unseen(UnseenBatch),
}

/// Draws `m` samples, classes uniform with replacement over the phase's
/// class set. Seen draws pick a uniform training row of the class.
pub fn sample_minibatch<R: Rng>(
    dataset: &FeatureDataset,
    phase: Phase,
    m: usize,
    rng: &mut R,
) -> Result<MiniBatch> {
    if m == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    match phase {
        Phase::Seen => {
            let mut rows = Vec::with_capacity(m);
            let mut labels = Vec::with_capacity(m);
            for _ in 0..m {
                let class = *dataset
                    .seen_classes
                    .choose(rng)
                    .expect("datasets always have seen classes");
                let row_idx = *dataset.train_by_class[class.index()]
                    .choose(rng)
                    .expect("every seen class has training rows");
                rows.push(dataset.train.features.row(row_idx).to_vec());
                labels.push(class);
            }
            Ok(MiniBatch::Seen(SeenBatch {
                features: Tensor::from_rows(&rows)?,
                labels,
            }))
        }
        Phase::Unseen => {
            let labels = (0..m)
                .map(|_| {
                    *dataset
                        .unseen_classes
                        .choose(rng)
                        .expect("unseen class set is nonempty")
                })
                .collect();
            Ok(MiniBatch::Unseen(UnseenBatch { labels }))
        }
    }
}

// ---------------------------------------------------------------------
// Synthetic shared-latent generator
// ---------------------------------------------------------------------

/// Parameters of the synthetic dataset. Semantic and visual features of a
/// class both derive from one latent vector through fixed random linear
/// maps, so their inter-class similarity structures correlate.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub latent_dim: usize,
    pub seen_classes: usize,
    pub unseen_classes: usize,
    pub visual_dim: usize,
    pub semantic_dim: usize,
    pub samples_per_class: usize,
    pub sigma_x: f64,
    pub sigma_t: f64,
    /// Uniform scale on visual features so they sit inside the generator's
    /// tanh output range; cosine structure is unaffected.
    pub visual_scale: f64,
    /// Fraction of each seen class held out as GZSL test samples.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            latent_dim: 8,
            seen_classes: 12,
            unseen_classes: 4,
            visual_dim: 32,
            semantic_dim: 16,
            samples_per_class: 100,
            sigma_x: 0.05,
            sigma_t: 0.05,
            visual_scale: 0.25,
            holdout_fraction: 0.2,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("seen_classes", self.seen_classes),
            ("unseen_classes", self.unseen_classes),
            ("visual_dim", self.visual_dim),
            ("semantic_dim", self.semantic_dim),
            ("samples_per_class", self.samples_per_class),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("synthetic {name} must be positive")));
            }
        }
        if self.sigma_x < 0.0 || self.sigma_t < 0.0 {
            return Err(Error::Config("synthetic sigma must be >= 0".into()));
        }
        if self.visual_scale <= 0.0 {
            return Err(Error::Config("visual_scale must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: FeatureDataset,
    pub semantics: SemanticTable,
    /// Ground-truth class latents, one row per class.
    pub latents: Tensor,
}

fn mat_vec(map: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..map.rows())
        .map(|i| map.row(i).iter().zip(v).map(|(&a, &u)| a * u).sum())
        .collect()
}

/// Random map with orthonormal columns (Gram-Schmidt on Gaussian columns).
/// Such a map preserves latent inner products, so the class-similarity
/// structure survives the projection into feature space instead of being
/// scrambled by the map's own correlations.
fn random_isometry<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    assert!(cols <= rows, "isometry needs rows >= cols");
    let raw = normal_matrix(rows, cols, 1.0, rng);
    let mut columns: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| raw.get(i, j)).collect())
        .collect();
    for j in 0..cols {
        for k in 0..j {
            let dot: f64 = columns[j].iter().zip(&columns[k]).map(|(a, b)| a * b).sum();
            let prev = columns[k].clone();
            for (x, p) in columns[j].iter_mut().zip(prev) {
                *x -= dot * p;
            }
        }
        let norm: f64 = columns[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut columns[j] {
            *x /= norm;
        }
    }
    let mut data = vec![0.0; rows * cols];
    for (j, col) in columns.iter().enumerate() {
        for i in 0..rows {
            data[i * cols + j] = col[i];
        }
    }
    Tensor::new(rows, cols, data).expect("shape matches")
}

/// Generates the shared-latent dataset. Per class: latent u ~ N(0, I);
/// semantics t = A u + noise; visual samples x = scale * (B u + noise),
/// with A, B fixed random column-orthonormal maps.
pub fn make_synthetic(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(spec.seed);
    use rand::SeedableRng;

    let total = spec.seen_classes + spec.unseen_classes;
    if spec.latent_dim > spec.semantic_dim || spec.latent_dim > spec.visual_dim {
        return Err(Error::Config(
            "latent_dim must not exceed semantic_dim or visual_dim".into(),
        ));
    }
    let a_map = random_isometry(spec.semantic_dim, spec.latent_dim, &mut rng);
    let b_map = random_isometry(spec.visual_dim, spec.latent_dim, &mut rng);
    let latents = normal_matrix(total, spec.latent_dim, 1.0, &mut rng);

    let mut semantic_rows = Vec::with_capacity(total);
    for c in 0..total {
        let mut t = mat_vec(&a_map, latents.row(c));
        for v in &mut t {
            *v += spec.sigma_t * standard_normal(&mut rng);
        }
        semantic_rows.push(t);
    }

    let holdout = ((spec.samples_per_class as f64) * spec.holdout_fraction).floor() as usize;
    let train_per_class = spec.samples_per_class - holdout;

    let mut train_rows = Vec::new();
    let mut train_labels = Vec::new();
    let mut ts_rows = Vec::new();
    let mut ts_labels = Vec::new();
    let mut tu_rows = Vec::new();
    let mut tu_labels = Vec::new();
    for c in 0..total {
        let class = ClassId(c as u32 + 1);
        for s in 0..spec.samples_per_class {
            let mut x = mat_vec(&b_map, latents.row(c));
            for v in &mut x {
                *v = spec.visual_scale * (*v + spec.sigma_x * standard_normal(&mut rng));
            }
            if c < spec.seen_classes {
                if s < train_per_class {
                    train_rows.push(x);
                    train_labels.push(class);
                } else {
                    ts_rows.push(x);
                    ts_labels.push(class);
                }
            } else {
                tu_rows.push(x);
                tu_labels.push(class);
            }
        }
    }

    let to_features = |rows: Vec<Vec<f64>>, labels: Vec<ClassId>| -> Result<LabeledFeatures> {
        Ok(LabeledFeatures {
            features: if rows.is_empty() {
                Tensor::zeros(0, spec.visual_dim)
            } else {
                Tensor::from_rows(&rows)?
            },
            labels,
        })
    };

    let dataset = FeatureDataset::new(
        to_features(train_rows, train_labels)?,
        to_features(ts_rows, ts_labels)?,
        to_features(tu_rows, tu_labels)?,
        spec.seen_classes,
        spec.unseen_classes,
        (1..=total).map(|c| c.to_string()).collect(),
    )?;
    let semantics = SemanticTable::new(SemanticMode::Attributes, Tensor::from_rows(&semantic_rows)?)?;
    Ok(SynthOutput {
        dataset,
        semantics,
        latents,
    })
}

// ---------------------------------------------------------------------
// File ingestion
// ---------------------------------------------------------------------

struct Lines<'a> {
    items: Vec<(usize, Vec<&'a str>)>,
}

fn content_lines(text: &str) -> Lines<'_> {
    let items = text
        .lines()
        .enumerate()
        .filter_map(|(i, line)| {
            let body = line.split('#').next().unwrap_or("");
            let tokens: Vec<&str> = body.split_whitespace().collect();
            if tokens.is_empty() {
                None
            } else {
                Some((i + 1, tokens))
            }
        })
        .collect();
    Lines { items }
}

fn parse_num<T: std::str::FromStr>(path: &str, line: usize, token: &str, what: &str) -> Result<T> {
    token
        .parse::<T>()
        .map_err(|_| Error::data(path, Some(line), format!("cannot parse {what} '{token}'")))
}

/// Loads and cross-validates the three dataset files, remapping external
/// class ids to contiguous 1-based ids (seen first).
pub fn load_dataset(
    visual_path: &Path,
    semantic_path: &Path,
    split_path: &Path,
    mode: SemanticMode,
) -> Result<(FeatureDataset, SemanticTable)> {
    // split file
    let split_text = fs::read_to_string(split_path)?;
    let split_name = split_path.display().to_string();
    let split = content_lines(&split_text);
    let mut seen_ext: Vec<String> = Vec::new();
    let mut unseen_ext: Vec<String> = Vec::new();
    let mut test_seen_idx: Option<Vec<usize>> = None;
    for (line, tokens) in &split.items {
        match tokens[0] {
            "seen:" => seen_ext = tokens[1..].iter().map(|s| s.to_string()).collect(),
            "unseen:" => unseen_ext = tokens[1..].iter().map(|s| s.to_string()).collect(),
            "test_seen:" => {
                let mut ids = Vec::new();
                for t in &tokens[1..] {
                    ids.push(parse_num::<usize>(&split_name, *line, t, "sample index")?);
                }
                test_seen_idx = Some(ids);
            }
            other => {
                return Err(Error::data(
                    &split_name,
                    Some(*line),
                    format!("unknown split section '{other}'"),
                ))
            }
        }
    }
    if seen_ext.is_empty() || unseen_ext.is_empty() {
        return Err(Error::data(
            &split_name,
            None,
            "split file must list both seen and unseen classes",
        ));
    }
    let mut remap: std::collections::HashMap<String, ClassId> = std::collections::HashMap::new();
    let mut external_ids = Vec::new();
    for ext in seen_ext.iter().chain(unseen_ext.iter()) {
        if remap
            .insert(ext.clone(), ClassId(external_ids.len() as u32 + 1))
            .is_some()
        {
            return Err(Error::data(
                &split_name,
                None,
                format!("class '{ext}' listed twice in the split"),
            ));
        }
        external_ids.push(ext.clone());
    }
    let c_s = seen_ext.len();
    let c_total = external_ids.len();

    // semantic file
    let sem_text = fs::read_to_string(semantic_path)?;
    let sem_name = semantic_path.display().to_string();
    let sem = content_lines(&sem_text);
    if sem.items.is_empty() {
        return Err(Error::data(&sem_name, None, "empty semantic file"));
    }
    let (hline, htok) = &sem.items[0];
    if htok.len() != 2 {
        return Err(Error::data(
            &sem_name,
            Some(*hline),
            "semantic header must be 'L C'",
        ));
    }
    let l_dim: usize = parse_num(&sem_name, *hline, htok[0], "semantic dimension")?;
    let header_classes: usize = parse_num(&sem_name, *hline, htok[1], "class count")?;
    if header_classes != c_total {
        return Err(Error::data(
            &sem_name,
            Some(*hline),
            format!("header claims {header_classes} classes, split lists {c_total}"),
        ));
    }
    let mut sem_rows: Vec<Option<Vec<f64>>> = vec![None; c_total];
    for (line, tokens) in &sem.items[1..] {
        let ext = tokens[0];
        let class = remap.get(ext).copied().ok_or_else(|| {
            Error::data(
                &sem_name,
                Some(*line),
                format!("semantic class '{ext}' is not in the split file"),
            )
        })?;
        if tokens.len() - 1 != l_dim {
            return Err(Error::data(
                &sem_name,
                Some(*line),
                format!("expected {l_dim} values, found {}", tokens.len() - 1),
            ));
        }
        let mut row = Vec::with_capacity(l_dim);
        for t in &tokens[1..] {
            row.push(parse_num::<f64>(&sem_name, *line, t, "semantic value")?);
        }
        if sem_rows[class.index()].replace(row).is_some() {
            return Err(Error::data(
                &sem_name,
                Some(*line),
                format!("duplicate semantic row for class '{ext}'"),
            ));
        }
    }
    let mut sem_matrix = Vec::with_capacity(c_total);
    for (i, row) in sem_rows.into_iter().enumerate() {
        match row {
            Some(r) => sem_matrix.push(r),
            None => {
                return Err(Error::data(
                    &sem_name,
                    None,
                    format!("missing semantic row for class '{}'", external_ids[i]),
                ))
            }
        }
    }
    let table = SemanticTable::new(mode, Tensor::from_rows(&sem_matrix)?)
        .map_err(|e| Error::data(&sem_name, None, e.to_string()))?;

    // visual file
    let vis_text = fs::read_to_string(visual_path)?;
    let vis_name = visual_path.display().to_string();
    let vis = content_lines(&vis_text);
    if vis.items.is_empty() {
        return Err(Error::data(&vis_name, None, "empty visual file"));
    }
    let (hline, htok) = &vis.items[0];
    if htok.len() != 3 {
        return Err(Error::data(
            &vis_name,
            Some(*hline),
            "visual header must be 'V n C'",
        ));
    }
    let v_dim: usize = parse_num(&vis_name, *hline, htok[0], "visual dimension")?;
    let n_samples: usize = parse_num(&vis_name, *hline, htok[1], "sample count")?;
    let c_claim: usize = parse_num(&vis_name, *hline, htok[2], "class count")?;
    if c_claim != c_total {
        return Err(Error::data(
            &vis_name,
            Some(*hline),
            format!("header claims {c_claim} classes, split lists {c_total}"),
        ));
    }
    if vis.items.len() - 1 != n_samples {
        return Err(Error::data(
            &vis_name,
            Some(*hline),
            format!(
                "header claims {n_samples} samples, file has {}",
                vis.items.len() - 1
            ),
        ));
    }
    let mut all_rows = Vec::with_capacity(n_samples);
    let mut all_labels = Vec::with_capacity(n_samples);
    for (line, tokens) in &vis.items[1..] {
        let ext = tokens[0];
        let class = remap.get(ext).copied().ok_or_else(|| {
            Error::data(
                &vis_name,
                Some(*line),
                format!("label '{ext}' references an unknown class"),
            )
        })?;
        if tokens.len() - 1 != v_dim {
            return Err(Error::data(
                &vis_name,
                Some(*line),
                format!("expected {v_dim} values, found {}", tokens.len() - 1),
            ));
        }
        let mut row = Vec::with_capacity(v_dim);
        for t in &tokens[1..] {
            row.push(parse_num::<f64>(&vis_name, *line, t, "feature value")?);
        }
        all_rows.push(row);
        all_labels.push(class);
    }

    // partitioning
    let is_test_seen = match &test_seen_idx {
        Some(ids) => {
            let mut flags = vec![false; n_samples];
            for &i in ids {
                if i == 0 || i > n_samples {
                    return Err(Error::data(
                        &split_name,
                        None,
                        format!("test_seen index {i} outside 1..={n_samples}"),
                    ));
                }
                flags[i - 1] = true;
            }
            flags
        }
        None => default_seen_holdout(&all_labels, c_s),
    };

    let mut train_rows = Vec::new();
    let mut train_labels = Vec::new();
    let mut ts_rows = Vec::new();
    let mut ts_labels = Vec::new();
    let mut tu_rows = Vec::new();
    let mut tu_labels = Vec::new();
    for (i, (row, &label)) in all_rows.into_iter().zip(&all_labels).enumerate() {
        if label.index() >= c_s {
            tu_rows.push(row);
            tu_labels.push(label);
        } else if is_test_seen[i] {
            ts_rows.push(row);
            ts_labels.push(label);
        } else {
            train_rows.push(row);
            train_labels.push(label);
        }
    }
    let build = |rows: Vec<Vec<f64>>, labels: Vec<ClassId>| -> Result<LabeledFeatures> {
        Ok(LabeledFeatures {
            features: if rows.is_empty() {
                Tensor::zeros(0, v_dim)
            } else {
                Tensor::from_rows(&rows)?
            },
            labels,
        })
    };
    let dataset = FeatureDataset::new(
        build(train_rows, train_labels)?,
        build(ts_rows, ts_labels)?,
        build(tu_rows, tu_labels)?,
        c_s,
        c_total - c_s,
        external_ids,
    )
    .map_err(|e| Error::data(&vis_name, None, e.to_string()))?;
    if table.dim() != l_dim {
        return Err(Error::data(&sem_name, None, "semantic dimension drifted"));
    }
    Ok((dataset, table))
}

/// Without an explicit test_seen list, the last fifth of each seen class's
/// samples (in file order) is held out.
fn default_seen_holdout(labels: &[ClassId], c_s: usize) -> Vec<bool> {
    let mut counts = vec![0usize; c_s];
    for &l in labels {
        if l.index() < c_s {
            counts[l.index()] += 1;
        }
    }
    let keep: Vec<usize> = counts
        .iter()
        .map(|&n| n - (n as f64 * 0.2).floor() as usize)
        .collect();
    let mut seen_so_far = vec![0usize; c_s];
    labels
        .iter()
        .map(|&l| {
            if l.index() >= c_s {
                return false;
            }
            seen_so_far[l.index()] += 1;
            seen_so_far[l.index()] > keep[l.index()]
        })
        .collect()
}

// ---------------------------------------------------------------------
// File emission
// ---------------------------------------------------------------------

fn fmt_row(label: &str, values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 12 + label.len());
    s.push_str(label);
    for v in values {
        s.push(' ');
        s.push_str(&v.to_string());
    }
    s.push('\n');
    s
}

/// Writes visual.txt / semantic.txt / split.txt under `dir`. Sample order is
/// train, then test_seen, then test_unseen, with explicit test_seen indices,
/// so a reload reproduces the partitions exactly.
pub fn save_dataset(
    dir: &Path,
    dataset: &FeatureDataset,
    table: &SemanticTable,
    header_comment: &str,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let comment: String = header_comment
        .lines()
        .map(|l| format!("# {l}\n"))
        .collect();

    let n_total = dataset.train.len() + dataset.test_seen.len() + dataset.test_unseen.len();
    let mut visual = comment.clone();
    visual.push_str(&format!(
        "{} {} {}\n",
        dataset.visual_dim(),
        n_total,
        dataset.class_count()
    ));
    for part in [&dataset.train, &dataset.test_seen, &dataset.test_unseen] {
        for (i, &label) in part.labels.iter().enumerate() {
            visual.push_str(&fmt_row(dataset.external_id(label), part.features.row(i)));
        }
    }
    fs::write(dir.join("visual.txt"), visual)?;

    let mut semantic = comment.clone();
    semantic.push_str(&format!("{} {}\n", table.dim(), table.class_count()));
    for c in 0..table.class_count() {
        let class = ClassId(c as u32 + 1);
        semantic.push_str(&fmt_row(dataset.external_id(class), table.matrix().row(c)));
    }
    fs::write(dir.join("semantic.txt"), semantic)?;

    let mut split = comment;
    split.push_str("seen:");
    for &c in dataset.seen_classes() {
        split.push(' ');
        split.push_str(dataset.external_id(c));
    }
    split.push_str("\nunseen:");
    for &c in dataset.unseen_classes() {
        split.push(' ');
        split.push_str(dataset.external_id(c));
    }
    split.push('\n');
    // always explicit, so an empty holdout survives a reload unchanged
    split.push_str("test_seen:");
    let start = dataset.train.len() + 1;
    for i in 0..dataset.test_seen.len() {
        split.push_str(&format!(" {}", start + i));
    }
    split.push('\n');
    fs::write(dir.join("split.txt"), split)?;
    Ok(())
}

/// Writes the ground-truth latents emitted by the synthetic generator.
pub fn save_latents(dir: &Path, latents: &Tensor, header_comment: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut text: String = header_comment
        .lines()
        .map(|l| format!("# {l}\n"))
        .collect();
    text.push_str(&format!("{} {}\n", latents.cols(), latents.rows()));
    for c in 0..latents.rows() {
        text.push_str(&fmt_row(&(c + 1).to_string(), latents.row(c)));
    }
    fs::write(dir.join("latents.txt"), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::{cosine_sim, spearman};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn synthetic_default_respects_invariants() {
        let out = make_synthetic(&SynthSpec::default()).unwrap();
        let ds = &out.dataset;
        assert_eq!(ds.seen_classes().len(), 12);
        assert_eq!(ds.unseen_classes().len(), 4);
        assert_eq!(ds.visual_dim(), 32);
        assert_eq!(out.semantics.dim(), 16);
        assert_eq!(ds.train().len(), 12 * 80);
        assert_eq!(ds.test_seen().len(), 12 * 20);
        assert_eq!(ds.test_unseen().len(), 4 * 100);
        assert!(ds.train().labels.iter().all(|l| l.index() < 12));
    }

    #[test]
    fn synthetic_is_deterministic_per_seed() {
        let a = make_synthetic(&SynthSpec::default()).unwrap();
        let b = make_synthetic(&SynthSpec::default()).unwrap();
        assert_eq!(a.dataset.train().features.data(), b.dataset.train().features.data());
        assert_eq!(a.semantics.matrix().data(), b.semantics.matrix().data());
        let c = make_synthetic(&SynthSpec {
            seed: 8,
            ..SynthSpec::default()
        })
        .unwrap();
        assert_ne!(a.dataset.train().features.data(), c.dataset.train().features.data());
    }

    #[test]
    fn noiseless_square_maps_give_identical_similarity_matrices() {
        // With sigma = 0 and square (hence orthogonal) maps, both feature
        // spaces preserve latent cosines exactly, so the semantic and
        // true-visual class-similarity matrices coincide.
        let spec = SynthSpec {
            latent_dim: 6,
            visual_dim: 6,
            semantic_dim: 6,
            sigma_x: 0.0,
            sigma_t: 0.0,
            samples_per_class: 5,
            seen_classes: 5,
            unseen_classes: 2,
            visual_scale: 1.0,
            holdout_fraction: 0.2,
            seed: 3,
        };
        let out = make_synthetic(&spec).unwrap();
        let ds = &out.dataset;
        // visual samples of one class are all equal to B u_c
        let f = &ds.train().features;
        for i in 0..4 {
            assert_eq!(f.row(i), f.row(0));
        }
        let classes: Vec<ClassId> = (1..=5).map(ClassId).collect();
        let means =
            crate::similarity::class_means(&ds.train().features, &ds.train().labels, &classes)
                .unwrap();
        for &ci in &classes {
            for &cj in &classes {
                let sem = cosine_sim(
                    out.semantics.vector(ci).unwrap(),
                    out.semantics.vector(cj).unwrap(),
                )
                .unwrap();
                let vis = cosine_sim(means.get(ci).unwrap(), means.get(cj).unwrap()).unwrap();
                assert!((sem - vis).abs() < 1e-9, "{ci},{cj}: {sem} vs {vis}");
            }
        }
    }

    #[test]
    fn synthetic_similarity_profiles_correlate() {
        let out = make_synthetic(&SynthSpec::default()).unwrap();
        let ds = &out.dataset;
        let seen: Vec<ClassId> = ds.seen_classes().to_vec();
        let means = crate::similarity::class_means(
            &ds.train().features,
            &ds.train().labels,
            &seen,
        )
        .unwrap();
        // per-class profile of similarities to every other seen class
        let mut rhos = Vec::new();
        for &ci in &seen {
            let mut sem = Vec::new();
            let mut vis = Vec::new();
            for &cj in &seen {
                if ci == cj {
                    continue;
                }
                sem.push(
                    cosine_sim(
                        out.semantics.vector(ci).unwrap(),
                        out.semantics.vector(cj).unwrap(),
                    )
                    .unwrap(),
                );
                vis.push(cosine_sim(means.get(ci).unwrap(), means.get(cj).unwrap()).unwrap());
            }
            rhos.push(spearman(&sem, &vis));
        }
        let avg = rhos.iter().sum::<f64>() / rhos.len() as f64;
        assert!(avg > 0.9, "avg spearman {avg}, per-class {rhos:?}");
    }

    #[test]
    fn minibatch_shapes_and_determinism() {
        let out = make_synthetic(&SynthSpec::default()).unwrap();
        let mut r1 = ChaCha12Rng::seed_from_u64(5);
        let mut r2 = ChaCha12Rng::seed_from_u64(5);
        let b1 = sample_minibatch(&out.dataset, Phase::Seen, 16, &mut r1).unwrap();
        let b2 = sample_minibatch(&out.dataset, Phase::Seen, 16, &mut r2).unwrap();
        match (b1, b2) {
            (MiniBatch::Seen(x), MiniBatch::Seen(y)) => {
                assert_eq!(x.labels, y.labels);
                assert_eq!(x.features.data(), y.features.data());
                assert_eq!(x.features.shape(), (16, 32));
            }
            _ => panic!("expected seen batches"),
        }
        let bu = sample_minibatch(&out.dataset, Phase::Unseen, 8, &mut r1).unwrap();
        match bu {
            MiniBatch::Unseen(u) => {
                assert_eq!(u.labels.len(), 8);
                assert!(u.labels.iter().all(|l| l.index() >= 12));
            }
            _ => panic!("unseen batch carries no visual features"),
        }
    }

    #[test]
    fn minibatch_covers_every_seen_class() {
        let out = make_synthetic(&SynthSpec::default()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut hit = vec![false; 12];
        for _ in 0..100 {
            if let MiniBatch::Seen(b) =
                sample_minibatch(&out.dataset, Phase::Seen, 100, &mut rng).unwrap()
            {
                for l in b.labels {
                    hit[l.index()] = true;
                }
            }
        }
        assert!(hit.iter().all(|&h| h), "coverage {hit:?}");
    }

    #[test]
    fn round_trip_through_files() {
        for holdout in [0.2, 0.0] {
            let dir = tempfile::tempdir().unwrap();
            let out = make_synthetic(&SynthSpec {
                samples_per_class: 10,
                holdout_fraction: holdout,
                ..SynthSpec::default()
            })
            .unwrap();
            save_dataset(dir.path(), &out.dataset, &out.semantics, "round trip").unwrap();
            let (ds2, table2) = load_dataset(
                &dir.path().join("visual.txt"),
                &dir.path().join("semantic.txt"),
                &dir.path().join("split.txt"),
                SemanticMode::Attributes,
            )
            .unwrap();
            assert_eq!(out.dataset.train().features.data(), ds2.train().features.data());
            assert_eq!(out.dataset.train().labels, ds2.train().labels);
            assert_eq!(out.dataset.test_seen().labels, ds2.test_seen().labels);
            assert_eq!(
                out.dataset.test_seen().features.data(),
                ds2.test_seen().features.data()
            );
            assert_eq!(out.dataset.test_unseen().labels, ds2.test_unseen().labels);
            assert_eq!(
                out.dataset.test_unseen().features.data(),
                ds2.test_unseen().features.data()
            );
            assert_eq!(out.semantics.matrix().data(), table2.matrix().data());
        }
    }

    #[test]
    fn loader_rejects_missing_semantic_class() {
        let dir = tempfile::tempdir().unwrap();
        let out = make_synthetic(&SynthSpec {
            samples_per_class: 5,
            ..SynthSpec::default()
        })
        .unwrap();
        save_dataset(dir.path(), &out.dataset, &out.semantics, "x").unwrap();
        // drop one semantic row
        let sem_path = dir.path().join("semantic.txt");
        let text = fs::read_to_string(&sem_path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let last_data = lines.len() - 1;
        lines.remove(last_data);
        // keep the header count unchanged so the missing row is the failure
        fs::write(&sem_path, lines.join("\n")).unwrap();
        let err = load_dataset(
            &dir.path().join("visual.txt"),
            &sem_path,
            &dir.path().join("split.txt"),
            SemanticMode::Attributes,
        )
        .unwrap_err();
        assert!(err.to_string().contains("missing semantic row"), "{err}");
    }

    #[test]
    fn loader_rejects_duplicate_semantic_row_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let out = make_synthetic(&SynthSpec {
            samples_per_class: 5,
            ..SynthSpec::default()
        })
        .unwrap();
        save_dataset(dir.path(), &out.dataset, &out.semantics, "x").unwrap();
        let sem_path = dir.path().join("semantic.txt");
        let text = fs::read_to_string(&sem_path).unwrap();
        let dup = text.lines().nth(2).unwrap().to_string();
        fs::write(&sem_path, format!("{text}{dup}\n")).unwrap();
        let err = load_dataset(
            &dir.path().join("visual.txt"),
            &sem_path,
            &dir.path().join("split.txt"),
            SemanticMode::Attributes,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("duplicate") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn loader_rejects_unknown_label() {
        let dir = tempfile::tempdir().unwrap();
        let out = make_synthetic(&SynthSpec {
            samples_per_class: 5,
            ..SynthSpec::default()
        })
        .unwrap();
        save_dataset(dir.path(), &out.dataset, &out.semantics, "x").unwrap();
        let vis_path = dir.path().join("visual.txt");
        let text = fs::read_to_string(&vis_path).unwrap();
        let rewritten = text.replacen("\n1 ", "\n999 ", 1);
        fs::write(&vis_path, rewritten).unwrap();
        let err = load_dataset(
            &vis_path,
            &dir.path().join("semantic.txt"),
            &dir.path().join("split.txt"),
            SemanticMode::Attributes,
        )
        .unwrap_err();
        assert!(err.to_string().contains("unknown class"), "{err}");
    }

    fn write_shaped_files(
        dir: &Path,
        v: usize,
        l: usize,
        c_s: usize,
        c_u: usize,
    ) -> (PathBuf, PathBuf, PathBuf) {
        use std::fmt::Write as _;
        let total = c_s + c_u;
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut visual = format!("{} {} {}\n", v, 2 * total, total);
        for class in 1..=total {
            for _ in 0..2 {
                write!(visual, "{class}").unwrap();
                for _ in 0..v {
                    write!(visual, " {:.3}", rng.gen_range(-1.0..1.0f64)).unwrap();
                }
                visual.push('\n');
            }
        }
        let mut semantic = format!("{} {}\n", l, total);
        for class in 1..=total {
            write!(semantic, "{class}").unwrap();
            for _ in 0..l {
                write!(semantic, " {:.3}", rng.gen_range(0.0..1.0f64) + 0.001).unwrap();
            }
            semantic.push('\n');
        }
        let mut split = String::from("seen:");
        for c in 1..=c_s {
            write!(split, " {c}").unwrap();
        }
        split.push_str("\nunseen:");
        for c in c_s + 1..=total {
            write!(split, " {c}").unwrap();
        }
        split.push('\n');
        let vp = dir.join("visual.txt");
        let sp = dir.join("semantic.txt");
        let pp = dir.join("split.txt");
        fs::write(&vp, visual).unwrap();
        fs::write(&sp, semantic).unwrap();
        fs::write(&pp, split).unwrap();
        (vp, sp, pp)
    }

    use std::path::PathBuf;

    #[test]
    fn loader_accepts_benchmark_shaped_dimensions() {
        // coarse-grained animal benchmark shape: V=2048, L=85, 40/10 classes
        let dir = tempfile::tempdir().unwrap();
        let (v, s, p) = write_shaped_files(dir.path(), 2048, 85, 40, 10);
        let (ds, table) = load_dataset(&v, &s, &p, SemanticMode::Attributes).unwrap();
        assert_eq!(ds.visual_dim(), 2048);
        assert_eq!(table.dim(), 85);
        assert_eq!(ds.seen_classes().len(), 40);
        assert_eq!(ds.unseen_classes().len(), 10);

        // wide text-feature bird benchmark shape: L=7551, 150/50 classes
        let dir = tempfile::tempdir().unwrap();
        let (v, s, p) = write_shaped_files(dir.path(), 64, 7551, 150, 50);
        let (ds, table) = load_dataset(&v, &s, &p, SemanticMode::Tfidf).unwrap();
        assert_eq!(table.dim(), 7551);
        assert_eq!(ds.seen_classes().len(), 150);
        assert_eq!(ds.unseen_classes().len(), 50);
    }

    #[test]
    fn loader_rejects_dimension_mismatch_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let (v, s, p) = write_shaped_files(dir.path(), 4, 3, 3, 1);
        let text = fs::read_to_string(&v).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        lines[2] = "1 0.5 0.5".to_string(); // two values short
        fs::write(&v, lines.join("\n")).unwrap();
        let err = load_dataset(&v, &s, &p, SemanticMode::Attributes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains("expected 4"), "{msg}");
    }

    #[test]
    fn default_holdout_takes_last_fifth() {
        let labels: Vec<ClassId> = (0..10).map(|_| ClassId(1)).collect();
        let flags = default_seen_holdout(&labels, 1);
        assert_eq!(flags.iter().filter(|&&f| f).count(), 2);
        assert!(flags[8] && flags[9]);
    }
}
