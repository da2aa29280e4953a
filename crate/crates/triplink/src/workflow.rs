//! The resolution steps around the learned representation: blocking by
//! embedding nearest neighbors, connected-component clustering of matched
//! pairs, and the end-to-end pipeline.
//!
//! Blocking is exact top-k over all-pairs cosine; the dataset sizes this
//! crate targets make O(n^2) search cheap and reproducible.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::corpus::{Dataset, SplitSpec};
use crate::corruptor::{generate_benchmark, NoiseConfig};
use crate::encoder::{Encoder, EncoderConfig, NgramEncoder, TfidfEncoder};
use crate::hash::{derive_seed, fnv1a64};
use crate::matcher::{pair_features, predict, train_logreg, LogRegModel};
use crate::report::{
    confusion, cosine_similarity, metrics, ConfusionMatrix, EvalReport, Metrics,
};
use crate::scalar::{to_f64, Scalar};
use crate::train::{train_encoder, TrainConfig, TrainHistory};
use crate::triplets::{build_triplets, derive_pairs, PairSet, TripletError, TripletSet};

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("blocking requires k >= 1, got {0}")]
    InvalidK(usize),
    #[error("blocking requires at least 2 records, got {0}")]
    TooFewRecords(usize),
    #[error("unknown record id '{0}'")]
    UnknownRecordId(String),
    #[error("record '{0}' has no truth id to score against")]
    MissingTruth(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {reason}")]
    Malformed {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[error(transparent)]
    Report(#[from] crate::report::ReportError),
}

fn stage<T, E>(name: &str, result: Result<T, E>) -> Result<T, WorkflowError>
where
    E: std::error::Error + Send + Sync + 'static,
{
    result.map_err(|e| WorkflowError::Stage {
        stage: name.to_string(),
        source: Box::new(e),
    })
}

/// An unordered candidate pair in canonical form: `record_id_a` sorts
/// lexicographically before `record_id_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePair {
    pub record_id_a: String,
    pub record_id_b: String,
    pub cosine: f64,
}

/// Exact top-k blocking: embed every record, keep each record's k
/// highest-cosine neighbors (ties broken by record id), and deduplicate
/// the resulting unordered pairs.
pub fn block<F: Scalar, E: Encoder<F> + ?Sized>(
    encoder: &E,
    records: &Dataset,
    k: usize,
) -> Result<Vec<CandidatePair>, WorkflowError> {
    if k < 1 {
        return Err(WorkflowError::InvalidK(k));
    }
    let n = records.records.len();
    if n < 2 {
        return Err(WorkflowError::TooFewRecords(n));
    }
    let ids: Vec<&str> = records.records.iter().map(|r| r.record_id.as_str()).collect();
    let embeddings: Vec<Vec<F>> = records
        .records
        .iter()
        .map(|r| encoder.encode(&r.serialized_text()))
        .collect::<Result<_, _>>()?;

    let mut selected: BTreeMap<(String, String), f64> = BTreeMap::new();
    for i in 0..n {
        let mut neighbors: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
        for j in 0..n {
            if j == i {
                continue;
            }
            neighbors.push((to_f64(cosine_similarity(&embeddings[i], &embeddings[j])?), j));
        }
        neighbors.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| ids[a.1].cmp(ids[b.1]))
        });
        for &(cos, j) in neighbors.iter().take(k) {
            let (a, b) = if ids[i] < ids[j] {
                (ids[i], ids[j])
            } else {
                (ids[j], ids[i])
            };
            selected.insert((a.to_string(), b.to_string()), cos);
        }
    }
    Ok(selected
        .into_iter()
        .map(|((record_id_a, record_id_b), cosine)| CandidatePair {
            record_id_a,
            record_id_b,
            cosine,
        })
        .collect())
}

/// Write candidate pairs as `id_a,id_b,cosine`.
pub fn save_candidates(
    pairs: &[CandidatePair],
    path: impl AsRef<Path>,
) -> Result<(), WorkflowError> {
    let path = path.as_ref();
    let io_err = |source| WorkflowError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = String::from("id_a,id_b,cosine\n");
    for pair in pairs {
        out.push_str(&format!(
            "{},{},{}\n",
            pair.record_id_a, pair.record_id_b, pair.cosine
        ));
    }
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(out.as_bytes()).map_err(io_err)?;
    Ok(())
}

pub fn load_candidates(path: impl AsRef<Path>) -> Result<Vec<CandidatePair>, WorkflowError> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let content = std::fs::read_to_string(path).map_err(|source| WorkflowError::Io {
        path: path_str.clone(),
        source,
    })?;
    let malformed = |line: usize, reason: String| WorkflowError::Malformed {
        path: path_str.clone(),
        line,
        reason,
    };
    let mut lines = content.lines().enumerate();
    match lines.next() {
        Some((_, "id_a,id_b,cosine")) => {}
        _ => return Err(malformed(1, "expected header 'id_a,id_b,cosine'".into())),
    }
    let mut pairs = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, ',');
        let a = parts.next().unwrap_or_default();
        let b = parts
            .next()
            .ok_or_else(|| malformed(idx + 1, "missing id_b".into()))?;
        let cosine: f64 = parts
            .next()
            .ok_or_else(|| malformed(idx + 1, "missing cosine".into()))?
            .parse()
            .map_err(|_| malformed(idx + 1, "bad cosine".into()))?;
        pairs.push(CandidatePair {
            record_id_a: a.to_string(),
            record_id_b: b.to_string(),
            cosine,
        });
    }
    Ok(pairs)
}

/// record_id -> dense cluster id. Cluster ids count up from 0 in order of
/// each component's smallest record id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClusterAssignment {
    pub assignments: BTreeMap<String, usize>,
}

impl ClusterAssignment {
    pub fn cluster_count(&self) -> usize {
        self.assignments.values().max().map_or(0, |&m| m + 1)
    }

    /// Members of each cluster, indexed by cluster id.
    pub fn clusters(&self) -> Vec<Vec<&str>> {
        let mut out = vec![Vec::new(); self.cluster_count()];
        for (id, &cluster) in &self.assignments {
            out[cluster].push(id.as_str());
        }
        out
    }

    /// Write as `record_id,cluster_id`, rows sorted by record id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WorkflowError> {
        let path = path.as_ref();
        let io_err = |source| WorkflowError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = String::from("record_id,cluster_id\n");
        for (id, cluster) in &self.assignments {
            out.push_str(&format!("{id},{cluster}\n"));
        }
        let mut file = std::fs::File::create(path).map_err(io_err)?;
        file.write_all(out.as_bytes()).map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WorkflowError> {
        let path = path.as_ref();
        let path_str = path.display().to_string();
        let content = std::fs::read_to_string(path).map_err(|source| WorkflowError::Io {
            path: path_str.clone(),
            source,
        })?;
        let malformed = |line: usize, reason: String| WorkflowError::Malformed {
            path: path_str.clone(),
            line,
            reason,
        };
        let mut lines = content.lines().enumerate();
        match lines.next() {
            Some((_, "record_id,cluster_id")) => {}
            _ => return Err(malformed(1, "expected header 'record_id,cluster_id'".into())),
        }
        let mut assignments = BTreeMap::new();
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let (id, cluster) = line
                .rsplit_once(',')
                .ok_or_else(|| malformed(idx + 1, "missing cluster id".into()))?;
            let cluster: usize = cluster
                .parse()
                .map_err(|_| malformed(idx + 1, "bad cluster id".into()))?;
            assignments.insert(id.to_string(), cluster);
        }
        Ok(ClusterAssignment { assignments })
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Connected components of the matched-pair graph. Records untouched by
/// any edge become singletons.
pub fn cluster(
    edges: &[(String, String)],
    all_record_ids: &[String],
) -> Result<ClusterAssignment, WorkflowError> {
    let index: BTreeMap<&str, usize> = all_record_ids
        .iter()
        .map(String::as_str)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i))
        .collect();
    let lookup = |id: &str| {
        index
            .get(id)
            .copied()
            .ok_or_else(|| WorkflowError::UnknownRecordId(id.to_string()))
    };
    let mut uf = UnionFind::new(index.len());
    for (a, b) in edges {
        uf.union(lookup(a)?, lookup(b)?);
    }
    // Iterating ids lexicographically makes each component surface at its
    // smallest member, which fixes the dense numbering.
    let mut cluster_of_root: BTreeMap<usize, usize> = BTreeMap::new();
    let mut assignments = BTreeMap::new();
    for (&id, &idx) in &index {
        let root = uf.find(idx);
        let next = cluster_of_root.len();
        let cluster = *cluster_of_root.entry(root).or_insert(next);
        assignments.insert(id.to_string(), cluster);
    }
    Ok(ClusterAssignment { assignments })
}

/// All unordered same-truth record pairs of a dataset, in canonical form.
pub fn truth_pairs(dataset: &Dataset) -> BTreeSet<(String, String)> {
    let mut by_truth: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for record in &dataset.records {
        if let Some(truth) = record.truth_id.as_deref() {
            by_truth.entry(truth).or_default().push(&record.record_id);
        }
    }
    let mut pairs = BTreeSet::new();
    for members in by_truth.values() {
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                let (a, b) = if members[i] < members[j] {
                    (members[i], members[j])
                } else {
                    (members[j], members[i])
                };
                pairs.insert((a.to_string(), b.to_string()));
            }
        }
    }
    pairs
}

/// Fraction of `truth` pairs present among the candidates. An empty truth
/// set counts as full recall.
pub fn pair_recall(candidates: &[CandidatePair], truth: &BTreeSet<(String, String)>) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let found = candidates
        .iter()
        .filter(|p| truth.contains(&(p.record_id_a.clone(), p.record_id_b.clone())))
        .count();
    found as f64 / truth.len() as f64
}

fn choose2(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Pairwise confusion of a clustering against truth ids: over all record
/// pairs, predicted positive iff co-clustered, actually positive iff same
/// truth id.
pub fn pairwise_metrics(
    assignment: &ClusterAssignment,
    truths: &BTreeMap<String, String>,
) -> Result<(ConfusionMatrix, Metrics), WorkflowError> {
    let mut cluster_sizes: BTreeMap<usize, u64> = BTreeMap::new();
    let mut truth_sizes: BTreeMap<&str, u64> = BTreeMap::new();
    let mut joint_sizes: BTreeMap<(usize, &str), u64> = BTreeMap::new();
    for (id, &cluster) in &assignment.assignments {
        let truth = truths
            .get(id)
            .ok_or_else(|| WorkflowError::MissingTruth(id.clone()))?;
        *cluster_sizes.entry(cluster).or_default() += 1;
        *truth_sizes.entry(truth).or_default() += 1;
        *joint_sizes.entry((cluster, truth)).or_default() += 1;
    }
    let tp: u64 = joint_sizes.values().map(|&m| choose2(m)).sum();
    let predicted: u64 = cluster_sizes.values().map(|&m| choose2(m)).sum();
    let actual: u64 = truth_sizes.values().map(|&m| choose2(m)).sum();
    let total = choose2(assignment.assignments.len() as u64);
    // total + tp first: predicted + actual - tp (the union) never exceeds
    // total, but total - predicted alone can underflow.
    let cm = ConfusionMatrix {
        tp,
        tn: total + tp - predicted - actual,
        fp: predicted - tp,
        fn_: actual - tp,
    };
    let m = metrics(&cm)?;
    Ok((cm, m))
}

/// Pairwise confusion of a raw edge set against truth ids, over all pairs of
/// the records in `truths`. This is the score the matcher's decisions earn
/// before transitive closure; clustering is judged against it.
pub fn edge_pairwise_metrics(
    edges: &[(String, String)],
    truths: &BTreeMap<String, String>,
) -> Result<(ConfusionMatrix, Metrics), WorkflowError> {
    let mut predicted: BTreeSet<(&str, &str)> = BTreeSet::new();
    for (a, b) in edges {
        if !truths.contains_key(a) || !truths.contains_key(b) {
            continue;
        }
        let pair = if a <= b {
            (a.as_str(), b.as_str())
        } else {
            (b.as_str(), a.as_str())
        };
        if pair.0 != pair.1 {
            predicted.insert(pair);
        }
    }
    let tp = predicted
        .iter()
        .filter(|(a, b)| truths[*a] == truths[*b])
        .count() as u64;
    let mut truth_sizes: BTreeMap<&str, u64> = BTreeMap::new();
    for truth in truths.values() {
        *truth_sizes.entry(truth).or_default() += 1;
    }
    let actual: u64 = truth_sizes.values().map(|&m| choose2(m)).sum();
    let total = choose2(truths.len() as u64);
    let predicted = predicted.len() as u64;
    let cm = ConfusionMatrix {
        tp,
        tn: total + tp - predicted - actual,
        fp: predicted - tp,
        fn_: actual - tp,
    };
    let m = metrics(&cm)?;
    Ok((cm, m))
}

/// Where the pipeline's records come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Path {
        path: PathBuf,
        id_column: String,
        truth_column: Option<String>,
    },
    Generator {
        entities: usize,
        noise: NoiseConfig,
    },
}

/// How clustering edges are decided.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EdgeMode {
    /// The matcher labels each candidate pair.
    Matcher,
    /// A raw cosine cut, for ablation.
    CosineThreshold(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub source: DatasetSource,
    pub split: SplitSpec,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub matcher_learning_rate: f64,
    pub matcher_epochs: usize,
    pub matcher_l2_lambda: f64,
    pub matcher_threshold: f64,
    pub blocking_k: usize,
    pub edge_mode: EdgeMode,
    /// Run blocking and clustering on the test split after evaluation.
    pub run_blocking: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            source: DatasetSource::Generator {
                entities: 50,
                noise: NoiseConfig::default(),
            },
            split: SplitSpec::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            matcher_learning_rate: 0.1,
            matcher_epochs: 300,
            matcher_l2_lambda: 1e-4,
            matcher_threshold: 0.5,
            blocking_k: 10,
            edge_mode: EdgeMode::Matcher,
            run_blocking: true,
            seed: 42,
        }
    }
}

impl PipelineConfig {
    pub fn dataset_name(&self) -> String {
        match &self.source {
            DatasetSource::Path { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".to_string()),
            DatasetSource::Generator { .. } => "synthetic".to_string(),
        }
    }
}

/// 16-hex-digit digest of every semantically meaningful config field.
/// Reports and run manifests embed it so artifacts from different configs
/// never mix silently.
pub fn config_digest(config: &PipelineConfig) -> String {
    let mut canon = String::new();
    match &config.source {
        DatasetSource::Path {
            path,
            id_column,
            truth_column,
        } => {
            canon.push_str(&format!(
                "source=path\npath={}\nid_column={id_column}\ntruth_column={}\n",
                path.display(),
                truth_column.as_deref().unwrap_or("")
            ));
        }
        DatasetSource::Generator { entities, noise } => {
            canon.push_str(&format!(
                "source=generator\nentities={entities}\ntypo_rate={}\ntoken_drop_rate={}\nduplicates_per_entity={}\ngenerator_seed={}\n",
                noise.typo_rate, noise.token_drop_rate, noise.duplicates_per_entity, noise.seed
            ));
        }
    }
    canon.push_str(&format!(
        "split={},{},{},{},{}\n",
        config.split.train_fraction,
        config.split.val_fraction,
        config.split.test_fraction,
        config.split.seed,
        config.split.by_cluster
    ));
    let orders: Vec<String> = config.encoder.ngram_orders.iter().map(|o| o.to_string()).collect();
    canon.push_str(&format!(
        "encoder={},{},{},{},{}\n",
        config.encoder.dim,
        config.encoder.bucket_count,
        orders.join("+"),
        config.encoder.normalize,
        config.encoder.seed
    ));
    canon.push_str(&format!(
        "train={},{},{},{},{},{}\n",
        config.train.margin,
        config.train.batch_size,
        config.train.epochs,
        config.train.learning_rate,
        config.train.shuffle_seed,
        config.train.early_stop_patience.map_or(-1i64, |p| p as i64)
    ));
    canon.push_str(&format!(
        "matcher={},{},{},{}\n",
        config.matcher_learning_rate,
        config.matcher_epochs,
        config.matcher_l2_lambda,
        config.matcher_threshold
    ));
    let edge = match config.edge_mode {
        EdgeMode::Matcher => "matcher".to_string(),
        EdgeMode::CosineThreshold(t) => format!("cosine:{t}"),
    };
    canon.push_str(&format!(
        "blocking_k={}\nedge_mode={edge}\nrun_blocking={}\nseed={}\n",
        config.blocking_k, config.run_blocking, config.seed
    ));
    format!("{:016x}", fnv1a64(canon.as_bytes()))
}

/// Everything the pipeline produced, ready to persist or inspect.
pub struct PipelineOutput<F: Scalar> {
    pub dataset: Dataset,
    pub train_data: Dataset,
    pub val_data: Dataset,
    pub test_data: Dataset,
    pub train_triplets: TripletSet,
    pub val_triplets: TripletSet,
    pub test_triplets: TripletSet,
    pub train_pairs: PairSet,
    pub test_pairs: PairSet,
    pub trained: NgramEncoder<F>,
    pub untrained: NgramEncoder<F>,
    pub tfidf: TfidfEncoder<F>,
    pub history: TrainHistory,
    /// Matcher per model name ("trained", "untrained", "tfidf").
    pub matchers: BTreeMap<String, LogRegModel<F>>,
    /// One report per (model, split in {train, test}).
    pub reports: Vec<EvalReport>,
    pub candidates: Option<Vec<CandidatePair>>,
    pub clusters: Option<ClusterAssignment>,
    /// Pairwise scores of the raw matched edges over the test records,
    /// before transitive closure.
    pub edge_scores: Option<(ConfusionMatrix, Metrics)>,
    pub clustering_scores: Option<(ConfusionMatrix, Metrics)>,
    pub config_digest: String,
}

fn pair_feature_matrix<F: Scalar, E: Encoder<F> + ?Sized>(
    encoder: &E,
    pairs: &PairSet,
) -> Result<(Vec<Vec<F>>, Vec<bool>), WorkflowError> {
    let mut features = Vec::with_capacity(pairs.pairs.len());
    let mut labels = Vec::with_capacity(pairs.pairs.len());
    for pair in &pairs.pairs {
        let a = encoder.encode(&pair.text1)?;
        let b = encoder.encode(&pair.text2)?;
        features.push(stage("features", pair_features(&a, &b))?);
        labels.push(pair.label == 1);
    }
    Ok((features, labels))
}

struct ReportContext<'a> {
    dataset_name: &'a str,
    digest: &'a str,
    timestamp: &'a str,
}

fn score_split<F: Scalar>(
    matcher: &LogRegModel<F>,
    features: &[Vec<F>],
    labels: &[bool],
    model_name: &str,
    split_name: &str,
    ctx: &ReportContext<'_>,
) -> Result<EvalReport, WorkflowError> {
    let mut predictions = Vec::with_capacity(features.len());
    for row in features {
        predictions.push(stage("evaluate", predict(matcher, row))?.1);
    }
    let cm = stage("evaluate", confusion(labels, &predictions))?;
    let m = stage("evaluate", metrics(&cm))?;
    Ok(EvalReport {
        dataset_name: ctx.dataset_name.to_string(),
        split_name: split_name.to_string(),
        model_name: model_name.to_string(),
        confusion: cm,
        metrics: m,
        timestamp: ctx.timestamp.to_string(),
        config_digest: ctx.digest.to_string(),
    })
}

fn evaluate_model<F: Scalar, E: Encoder<F> + ?Sized>(
    model_name: &str,
    encoder: &E,
    train_pairs: &PairSet,
    test_pairs: &PairSet,
    config: &PipelineConfig,
    ctx: &ReportContext<'_>,
) -> Result<(LogRegModel<F>, Vec<EvalReport>), WorkflowError> {
    let (train_x, train_y) = pair_feature_matrix(encoder, train_pairs)?;
    let matcher = stage(
        "matcher/train",
        train_logreg(
            &train_x,
            &train_y,
            config.matcher_learning_rate,
            config.matcher_epochs,
            config.matcher_l2_lambda,
            derive_seed(config.seed, "matcher"),
        )
        .and_then(|m| m.with_threshold(config.matcher_threshold)),
    )?;

    let (test_x, test_y) = pair_feature_matrix(encoder, test_pairs)?;
    let reports = vec![
        score_split(&matcher, &train_x, &train_y, model_name, "train", ctx)?,
        score_split(&matcher, &test_x, &test_y, model_name, "test", ctx)?,
    ];
    Ok((matcher, reports))
}

/// Triplets for a split, tolerating splits too small to support them.
/// `required` distinguishes the test split (must yield triplets) from the
/// validation split (may be empty).
fn split_triplets(
    data: &Dataset,
    seed: u64,
    required: bool,
    stage_name: &str,
) -> Result<TripletSet, WorkflowError> {
    match build_triplets(data, seed) {
        Ok(set) => Ok(set),
        Err(TripletError::NoTruthIds | TripletError::SingleTruthId) if !required => {
            Ok(TripletSet {
                triplets: Vec::new(),
                seed,
            })
        }
        Err(e) => stage(stage_name, Err(e)),
    }
}

/// The full run: acquire data, split, build triplets, train the encoder
/// with validation-based selection, train one matcher per representation,
/// evaluate on train and test pairs, then optionally block and cluster the
/// test split with the trained representation.
pub fn run_pipeline<F: Scalar>(config: &PipelineConfig) -> Result<PipelineOutput<F>, WorkflowError> {
    let digest = config_digest(config);
    let dataset_name = config.dataset_name();
    let timestamp = chrono::Utc::now().to_rfc3339();

    let dataset = match &config.source {
        DatasetSource::Path {
            path,
            id_column,
            truth_column,
        } => stage(
            "load",
            Dataset::load(path, id_column, truth_column.as_deref()),
        )?,
        DatasetSource::Generator { entities, noise } => {
            stage("generate", generate_benchmark(*entities, noise))?
        }
    };

    let (train_data, val_data, test_data) = stage("split", dataset.split(&config.split))?;

    let train_triplets = split_triplets(
        &train_data,
        derive_seed(config.seed, "triplets/train"),
        true,
        "triplets/train",
    )?;
    let val_triplets = split_triplets(
        &val_data,
        derive_seed(config.seed, "triplets/val"),
        false,
        "triplets/val",
    )?;
    let test_triplets = split_triplets(
        &test_data,
        derive_seed(config.seed, "triplets/test"),
        true,
        "triplets/test",
    )?;

    // With cluster-respecting splits no entity may straddle the matcher's
    // train and test pairs; a violation is an internal bug, not bad input.
    if config.split.by_cluster {
        let train_truths: BTreeSet<&str> = train_triplets
            .triplets
            .iter()
            .flat_map(|t| {
                t.anchor_truth_id.as_deref().into_iter().chain(t.negative_truth_id.as_deref())
            })
            .collect();
        let leaked = test_triplets
            .triplets
            .iter()
            .flat_map(|t| {
                t.anchor_truth_id.as_deref().into_iter().chain(t.negative_truth_id.as_deref())
            })
            .find(|truth| train_truths.contains(truth));
        assert!(
            leaked.is_none(),
            "truth id {:?} leaked across the train/test pair split",
            leaked
        );
    }

    let untrained = stage("encoder/init", NgramEncoder::<F>::init(config.encoder.clone()))?;
    let mut trained = untrained.clone();
    let history = stage(
        "encoder/train",
        train_encoder(&mut trained, &train_triplets, &val_triplets, &config.train),
    )?;

    // Document frequencies are a corpus statistic, and the baseline must
    // embed every record for blocking and clustering, so it is fit on the
    // whole dataset under resolution. No labels are involved.
    let texts: Vec<String> = dataset
        .records
        .iter()
        .map(|r| r.serialized_text())
        .collect();
    let tfidf = stage("tfidf/fit", TfidfEncoder::<F>::fit(&texts))?;

    let train_pairs = derive_pairs(&train_triplets);
    let test_pairs = derive_pairs(&test_triplets);

    let ctx = ReportContext {
        dataset_name: &dataset_name,
        digest: &digest,
        timestamp: &timestamp,
    };
    let mut matchers = BTreeMap::new();
    let mut reports = Vec::with_capacity(6);
    let lanes: [(&str, &dyn Encoder<F>); 3] = [
        ("trained", &trained),
        ("untrained", &untrained),
        ("tfidf", &tfidf),
    ];
    for (model_name, encoder) in lanes {
        let (matcher, model_reports) =
            evaluate_model(model_name, encoder, &train_pairs, &test_pairs, config, &ctx)?;
        matchers.insert(model_name.to_string(), matcher);
        reports.extend(model_reports);
    }

    let mut candidates = None;
    let mut clusters = None;
    let mut edge_scores = None;
    let mut clustering_scores = None;
    if config.run_blocking {
        let pairs = stage("block", block(&trained, &test_data, config.blocking_k))?;
        let edges = match config.edge_mode {
            EdgeMode::Matcher => {
                let matcher = &matchers["trained"];
                let mut embeddings: BTreeMap<&str, Vec<F>> = BTreeMap::new();
                for record in &test_data.records {
                    embeddings
                        .insert(&record.record_id, trained.encode(&record.serialized_text())?);
                }
                let mut edges = Vec::new();
                for pair in &pairs {
                    let a = &embeddings[pair.record_id_a.as_str()];
                    let b = &embeddings[pair.record_id_b.as_str()];
                    let row = stage("cluster/edges", pair_features(a, b))?;
                    if stage("cluster/edges", predict(matcher, &row))?.1 {
                        edges.push((pair.record_id_a.clone(), pair.record_id_b.clone()));
                    }
                }
                edges
            }
            EdgeMode::CosineThreshold(t) => pairs
                .iter()
                .filter(|p| p.cosine >= t)
                .map(|p| (p.record_id_a.clone(), p.record_id_b.clone()))
                .collect(),
        };
        let ids: Vec<String> = test_data.records.iter().map(|r| r.record_id.clone()).collect();
        let assignment = stage("cluster", cluster(&edges, &ids))?;
        let truths: BTreeMap<String, String> = test_data
            .records
            .iter()
            .filter_map(|r| r.truth_id.clone().map(|t| (r.record_id.clone(), t)))
            .collect();
        // Truthless records cannot be scored; keep them out of the metric
        // but leave them in the assignment.
        if truths.len() >= 2 {
            let scored = ClusterAssignment {
                assignments: assignment
                    .assignments
                    .iter()
                    .filter(|(id, _)| truths.contains_key(*id))
                    .map(|(id, &c)| (id.clone(), c))
                    .collect(),
            };
            edge_scores = Some(stage("cluster/score", edge_pairwise_metrics(&edges, &truths))?);
            clustering_scores = Some(stage("cluster/score", pairwise_metrics(&scored, &truths))?);
        }
        candidates = Some(pairs);
        clusters = Some(assignment);
    }

    Ok(PipelineOutput {
        dataset,
        train_data,
        val_data,
        test_data,
        train_triplets,
        val_triplets,
        test_triplets,
        train_pairs,
        test_pairs,
        trained,
        untrained,
        tfidf,
        history,
        matchers,
        reports,
        candidates,
        clusters,
        edge_scores,
        clustering_scores,
        config_digest: digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Provenance, Record};
    use crate::encoder::PooledEncoder;
    use proptest::prelude::*;

    fn tiny_encoder() -> NgramEncoder<f64> {
        NgramEncoder::init(EncoderConfig {
            dim: 16,
            bucket_count: 512,
            ngram_orders: vec![3],
            normalize: true,
            seed: 5,
        })
        .unwrap()
    }

    fn dataset_from(texts: &[(&str, &str)]) -> Dataset {
        Dataset {
            schema: vec!["text".into()],
            records: texts
                .iter()
                .map(|(id, text)| Record {
                    record_id: id.to_string(),
                    truth_id: None,
                    fields: vec![("text".into(), Some(text.to_string()))],
                })
                .collect(),
            provenance: Provenance::Memory,
        }
    }

    #[test]
    fn exhaustive_k_yields_all_pairs() {
        let encoder = tiny_encoder();
        let data = dataset_from(&[
            ("r1", "jane doe"),
            ("r2", "john smith"),
            ("r3", "mary miller"),
            ("r4", "ava brown"),
        ]);
        for k in [3, 10] {
            let pairs = block(&encoder, &data, k).unwrap();
            assert_eq!(pairs.len(), 6);
        }
    }

    #[test]
    fn identical_records_collapse() {
        let encoder = tiny_encoder();
        let data = dataset_from(&[("r1", "jane doe"), ("r2", "jane doe"), ("r3", "jane doe")]);
        let pairs = block(&encoder, &data, 1).unwrap();
        assert!(pairs.len() <= 3);
        for pair in &pairs {
            assert!((pair.cosine - 1.0).abs() < 1e-9, "cosine {}", pair.cosine);
            assert!(pair.record_id_a < pair.record_id_b);
        }
    }

    #[test]
    fn blocking_rejects_bad_inputs() {
        let encoder = tiny_encoder();
        let data = dataset_from(&[("r1", "a"), ("r2", "b")]);
        assert!(matches!(
            block(&encoder, &data, 0),
            Err(WorkflowError::InvalidK(0))
        ));
        let single = dataset_from(&[("r1", "a")]);
        assert!(matches!(
            block(&encoder, &single, 3),
            Err(WorkflowError::TooFewRecords(1))
        ));
    }

    #[test]
    fn candidate_sets_nest_as_k_grows() {
        let encoder = tiny_encoder();
        let data = dataset_from(&[
            ("r1", "jane doe"),
            ("r2", "jane d"),
            ("r3", "john smith"),
            ("r4", "jon smith"),
            ("r5", "mary miller"),
            ("r6", "marie miller"),
        ]);
        let mut previous: BTreeSet<(String, String)> = BTreeSet::new();
        for k in [1, 2, 3, 5] {
            let pairs = block(&encoder, &data, k).unwrap();
            assert!(pairs.len() <= 6 * k);
            let set: BTreeSet<(String, String)> = pairs
                .into_iter()
                .map(|p| (p.record_id_a, p.record_id_b))
                .collect();
            assert!(previous.is_subset(&set), "top-{k} lost earlier candidates");
            previous = set;
        }
    }

    #[test]
    fn candidates_csv_round_trip() {
        let pairs = vec![
            CandidatePair {
                record_id_a: "a".into(),
                record_id_b: "b".into(),
                cosine: 0.25,
            },
            CandidatePair {
                record_id_a: "a".into(),
                record_id_b: "c".into(),
                cosine: 1.0,
            },
        ];
        let f = tempfile::NamedTempFile::new().unwrap();
        save_candidates(&pairs, f.path()).unwrap();
        let loaded = load_candidates(f.path()).unwrap();
        assert_eq!(loaded, pairs);

        std::fs::write(f.path(), "wrong,header\n").unwrap();
        assert!(matches!(
            load_candidates(f.path()),
            Err(WorkflowError::Malformed { line: 1, .. })
        ));
    }

    fn edges(list: &[(&str, &str)]) -> Vec<(String, String)> {
        list.iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    }

    fn ids(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn transitive_edges_merge_components() {
        let assignment = cluster(
            &edges(&[("A", "B"), ("B", "C")]),
            &ids(&["A", "B", "C", "D"]),
        )
        .unwrap();
        assert_eq!(assignment.assignments["A"], 0);
        assert_eq!(assignment.assignments["B"], 0);
        assert_eq!(assignment.assignments["C"], 0);
        assert_eq!(assignment.assignments["D"], 1);
        assert_eq!(assignment.cluster_count(), 2);
    }

    #[test]
    fn no_edges_means_all_singletons() {
        let assignment = cluster(&[], &ids(&["C", "A", "B"])).unwrap();
        assert_eq!(assignment.assignments["A"], 0);
        assert_eq!(assignment.assignments["B"], 1);
        assert_eq!(assignment.assignments["C"], 2);
    }

    #[test]
    fn unknown_edge_id_is_an_error() {
        assert!(matches!(
            cluster(&edges(&[("A", "X")]), &ids(&["A", "B"])),
            Err(WorkflowError::UnknownRecordId(id)) if id == "X"
        ));
    }

    #[test]
    fn cluster_csv_round_trip() {
        let assignment = cluster(&edges(&[("A", "B")]), &ids(&["A", "B", "C"])).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        assignment.save(f.path()).unwrap();
        let loaded = ClusterAssignment::load(f.path()).unwrap();
        assert_eq!(loaded, assignment);
    }

    #[test]
    fn pairwise_metrics_hand_examples() {
        let perfect = cluster(&edges(&[("A", "B")]), &ids(&["A", "B", "C"])).unwrap();
        let truths: BTreeMap<String, String> = [("A", "t1"), ("B", "t1"), ("C", "t2")]
            .into_iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        let (cm, m) = pairwise_metrics(&perfect, &truths).unwrap();
        assert_eq!((cm.tp, cm.tn, cm.fp, cm.fn_), (1, 2, 0, 0));
        assert_eq!(m.f1, 1.0);

        let overmerged =
            cluster(&edges(&[("A", "B"), ("B", "C")]), &ids(&["A", "B", "C"])).unwrap();
        let (cm, m) = pairwise_metrics(&overmerged, &truths).unwrap();
        assert_eq!((cm.tp, cm.tn, cm.fp, cm.fn_), (1, 0, 2, 0));
        assert!((m.precision - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.recall, 1.0);
        assert!((m.f1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pairwise_metrics_requires_truths() {
        let assignment = cluster(&[], &ids(&["A", "B"])).unwrap();
        let truths: BTreeMap<String, String> =
            [("A".to_string(), "t1".to_string())].into_iter().collect();
        assert!(matches!(
            pairwise_metrics(&assignment, &truths),
            Err(WorkflowError::MissingTruth(id)) if id == "B"
        ));
    }

    #[test]
    fn truth_pairs_and_recall() {
        let mut data = dataset_from(&[("r1", "x"), ("r2", "x"), ("r3", "y"), ("r4", "z")]);
        data.records[0].truth_id = Some("t1".into());
        data.records[1].truth_id = Some("t1".into());
        data.records[2].truth_id = Some("t1".into());
        data.records[3].truth_id = Some("t2".into());
        let truth = truth_pairs(&data);
        assert_eq!(truth.len(), 3);
        let candidates = vec![
            CandidatePair {
                record_id_a: "r1".into(),
                record_id_b: "r2".into(),
                cosine: 1.0,
            },
            CandidatePair {
                record_id_a: "r1".into(),
                record_id_b: "r4".into(),
                cosine: 0.2,
            },
        ];
        assert!((pair_recall(&candidates, &truth) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(pair_recall(&candidates, &BTreeSet::new()), 1.0);
    }

    fn tiny_pipeline_config() -> PipelineConfig {
        PipelineConfig {
            source: DatasetSource::Generator {
                entities: 15,
                noise: NoiseConfig {
                    typo_rate: 0.02,
                    token_drop_rate: 0.15,
                    duplicates_per_entity: 3,
                    seed: 42,
                },
            },
            encoder: EncoderConfig {
                dim: 16,
                bucket_count: 2048,
                ngram_orders: vec![3],
                normalize: true,
                seed: 0,
            },
            train: TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            },
            matcher_epochs: 100,
            blocking_k: 5,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn pipeline_emits_six_reports_and_all_artifacts() {
        let config = tiny_pipeline_config();
        let out: PipelineOutput<f64> = run_pipeline(&config).unwrap();
        assert_eq!(out.reports.len(), 6);
        let names: Vec<(&str, &str)> = out
            .reports
            .iter()
            .map(|r| (r.model_name.as_str(), r.split_name.as_str()))
            .collect();
        assert_eq!(
            names,
            vec![
                ("trained", "train"),
                ("trained", "test"),
                ("untrained", "train"),
                ("untrained", "test"),
                ("tfidf", "train"),
                ("tfidf", "test"),
            ]
        );
        for report in &out.reports {
            assert_eq!(report.dataset_name, "synthetic");
            assert_eq!(report.config_digest, out.config_digest);
            assert!(report.confusion.total() > 0);
        }
        assert_eq!(out.matchers.len(), 3);
        assert!(out.candidates.is_some());
        assert!(out.clusters.is_some());
        assert!(out.clustering_scores.is_some());
        assert_eq!(out.test_pairs.pairs.len(), 2 * out.test_triplets.triplets.len());
        assert!(!out.history.epochs.is_empty());

        // Every test record lands in exactly one cluster.
        let clusters = out.clusters.as_ref().unwrap();
        assert_eq!(clusters.assignments.len(), out.test_data.records.len());
    }

    #[test]
    fn pipeline_is_deterministic_modulo_timestamp() {
        let config = tiny_pipeline_config();
        let a: PipelineOutput<f64> = run_pipeline(&config).unwrap();
        let b: PipelineOutput<f64> = run_pipeline(&config).unwrap();
        assert_eq!(a.config_digest, b.config_digest);
        for (ra, rb) in a.reports.iter().zip(&b.reports) {
            let mut ra = ra.clone();
            let mut rb = rb.clone();
            ra.timestamp = String::new();
            rb.timestamp = String::new();
            assert_eq!(ra.to_json().unwrap(), rb.to_json().unwrap());
        }
        assert_eq!(a.trained.params(), b.trained.params());
        assert_eq!(a.candidates.unwrap(), b.candidates.unwrap());
        assert_eq!(a.clusters.unwrap(), b.clusters.unwrap());
    }

    #[test]
    fn pipeline_split_keeps_matcher_truths_disjoint() {
        let config = tiny_pipeline_config();
        let out: PipelineOutput<f64> = run_pipeline(&config).unwrap();
        let train_truths: BTreeSet<&str> = out
            .train_triplets
            .triplets
            .iter()
            .flat_map(|t| {
                t.anchor_truth_id.as_deref().into_iter().chain(t.negative_truth_id.as_deref())
            })
            .collect();
        let test_truths: BTreeSet<&str> = out
            .test_triplets
            .triplets
            .iter()
            .flat_map(|t| {
                t.anchor_truth_id.as_deref().into_iter().chain(t.negative_truth_id.as_deref())
            })
            .collect();
        assert!(train_truths.is_disjoint(&test_truths));
    }

    #[test]
    fn cosine_threshold_edges_cluster_exact_duplicates() {
        let mut data = dataset_from(&[
            ("r1", "jane mary doe 12 oak st"),
            ("r2", "jane mary doe 12 oak st"),
            ("r3", "completely different person record"),
            ("r4", "completely different person record"),
        ]);
        for (i, truth) in ["t1", "t1", "t2", "t2"].iter().enumerate() {
            data.records[i].truth_id = Some(truth.to_string());
        }
        let encoder = tiny_encoder();
        let pairs = block(&encoder, &data, 3).unwrap();
        let edges: Vec<(String, String)> = pairs
            .iter()
            .filter(|p| p.cosine >= 0.999)
            .map(|p| (p.record_id_a.clone(), p.record_id_b.clone()))
            .collect();
        let ids: Vec<String> = data.records.iter().map(|r| r.record_id.clone()).collect();
        let assignment = cluster(&edges, &ids).unwrap();
        assert_eq!(assignment.assignments["r1"], assignment.assignments["r2"]);
        assert_eq!(assignment.assignments["r3"], assignment.assignments["r4"]);
        assert_ne!(assignment.assignments["r1"], assignment.assignments["r3"]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn clustering_is_a_partition_respecting_edges(
            edge_list in proptest::collection::vec((0usize..12, 0usize..12), 0..20)
        ) {
            let all: Vec<String> = (0..12).map(|i| format!("n{i:02}")).collect();
            let named: Vec<(String, String)> = edge_list
                .iter()
                .map(|&(a, b)| (format!("n{a:02}"), format!("n{b:02}")))
                .collect();
            let assignment = cluster(&named, &all).unwrap();

            // Partition: every record assigned once, ids dense from 0.
            prop_assert_eq!(assignment.assignments.len(), 12);
            let max = *assignment.assignments.values().max().unwrap();
            let distinct: BTreeSet<usize> = assignment.assignments.values().copied().collect();
            prop_assert_eq!(distinct.len(), max + 1);

            // Edges respected.
            for (a, b) in &named {
                prop_assert_eq!(assignment.assignments[a], assignment.assignments[b]);
            }

            // Maximality: component count from an independent BFS matches.
            let mut adjacency: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
            for (a, b) in &named {
                adjacency.entry(a).or_default().push(b);
                adjacency.entry(b).or_default().push(a);
            }
            let mut seen: BTreeSet<&str> = BTreeSet::new();
            let mut components = 0;
            for id in &all {
                if seen.contains(id.as_str()) {
                    continue;
                }
                components += 1;
                let mut queue = vec![id.as_str()];
                while let Some(node) = queue.pop() {
                    if !seen.insert(node) {
                        continue;
                    }
                    for &next in adjacency.get(node).into_iter().flatten() {
                        if !seen.contains(next) {
                            queue.push(next);
                        }
                    }
                }
            }
            prop_assert_eq!(assignment.cluster_count(), components);
        }

        #[test]
        fn blocking_candidate_count_is_bounded(
            k in 1usize..5,
            count in 2usize..8,
        ) {
            let encoder = tiny_encoder();
            let texts: Vec<(String, String)> = (0..count)
                .map(|i| (format!("r{i}"), format!("record number {i} text")))
                .collect();
            let refs: Vec<(&str, &str)> = texts
                .iter()
                .map(|(a, b)| (a.as_str(), b.as_str()))
                .collect();
            let data = dataset_from(&refs);
            let pairs = block(&encoder, &data, k).unwrap();
            prop_assert!(pairs.len() <= count * k);
            let set: BTreeSet<(&str, &str)> = pairs
                .iter()
                .map(|p| (p.record_id_a.as_str(), p.record_id_b.as_str()))
                .collect();
            prop_assert_eq!(set.len(), pairs.len());
        }
    }
}
