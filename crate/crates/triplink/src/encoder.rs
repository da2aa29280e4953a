//! Text encoders: a trainable hashed n-gram mean-pool encoder, a TF-IDF
//! baseline, and a trainable projection head over frozen external vectors.
//!
//! The n-gram encoder owns a `bucket_count x dim` table of parameters.
//! Encoding a text means featurizing it (word unigrams plus boundary-padded
//! character n-grams, hashed into buckets), mean-pooling the touched table
//! rows with multiplicity, and optionally L2-normalizing. Both trainable
//! encoders expose their pooling as sparse row weights so one trainer can
//! backpropagate through either.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::hash::fnv1a64;
use crate::scalar::{from_f64, l2_normalize, to_f64, Scalar};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("no embedding for id '{0}'")]
    UnknownId(String),
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
    #[error("{path} line {line}: expected {expected} components, found {got}")]
    DimensionMismatch {
        path: String,
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("{path}: duplicate id '{id}'")]
    DuplicateId { path: String, id: String },
    #[error("cannot fit tf-idf on an empty corpus")]
    EmptyCorpus,
}

/// Shape and featurization settings for the n-gram encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub bucket_count: usize,
    /// Character n-gram orders; word unigrams are always extracted.
    pub ngram_orders: Vec<usize>,
    pub normalize: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 64,
            bucket_count: 1 << 16,
            ngram_orders: vec![3, 4],
            normalize: true,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.dim < 2 {
            return Err(EncoderError::InvalidConfig(format!(
                "dim must be at least 2, got {}",
                self.dim
            )));
        }
        if self.bucket_count < self.dim {
            return Err(EncoderError::InvalidConfig(format!(
                "bucket_count {} is smaller than dim {}",
                self.bucket_count, self.dim
            )));
        }
        if self.ngram_orders.iter().any(|&k| k == 0) {
            return Err(EncoderError::InvalidConfig(
                "ngram orders must be positive".into(),
            ));
        }
        Ok(())
    }

    fn canonical_orders(&self) -> Vec<usize> {
        let mut orders = self.ngram_orders.clone();
        orders.sort_unstable();
        orders.dedup();
        orders
    }
}

/// Anything that maps a key (text or record id) to a fixed-dimension vector.
pub trait Encoder<F: Scalar> {
    fn dim(&self) -> usize;
    fn encode(&self, key: &str) -> Result<Vec<F>, EncoderError>;
}

/// A trainable encoder whose raw output is a weighted sum of table rows.
///
/// `pool_weights` returns the sparse (row, weight) pairs for a key, sorted
/// by row, so encoding and backpropagation visit rows in one fixed order:
/// raw = sum of weight * row, then optional L2 normalization.
pub trait PooledEncoder<F: Scalar>: Encoder<F> {
    fn rows(&self) -> usize;
    fn pool_weights(&self, key: &str) -> Result<Vec<(usize, F)>, EncoderError>;
    fn params(&self) -> &[F];
    fn params_mut(&mut self) -> &mut [F];
    fn normalizes(&self) -> bool;
}

fn pooled_encode<F: Scalar, E: PooledEncoder<F> + ?Sized>(
    enc: &E,
    key: &str,
) -> Result<Vec<F>, EncoderError> {
    let dim = enc.dim();
    let params = enc.params();
    let mut out = vec![F::zero(); dim];
    for (row, weight) in enc.pool_weights(key)? {
        let base = row * dim;
        for (o, &x) in out.iter_mut().zip(&params[base..base + dim]) {
            *o = *o + weight * x;
        }
    }
    if enc.normalizes() {
        l2_normalize(&mut out);
    }
    Ok(out)
}

/// Lowercase word tokens: maximal alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// The feature multiset of a text, as strings, in deterministic order:
/// per word, the unigram first, then each order's n-grams left to right
/// over the word padded with `^` and `$`.
pub fn feature_strings(text: &str, orders: &[usize]) -> Vec<String> {
    let mut sorted_orders = orders.to_vec();
    sorted_orders.sort_unstable();
    sorted_orders.dedup();

    let mut features = Vec::new();
    for word in tokenize(text) {
        let padded: Vec<char> = std::iter::once('^')
            .chain(word.chars())
            .chain(std::iter::once('$'))
            .collect();
        features.push(word);
        for &k in &sorted_orders {
            if padded.len() < k {
                continue;
            }
            for window in padded.windows(k) {
                features.push(window.iter().collect());
            }
        }
    }
    features
}

/// Bucket counts for a text's features, sorted by bucket.
fn feature_buckets(text: &str, orders: &[usize], bucket_count: usize) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for feature in feature_strings(text, orders) {
        let bucket = (fnv1a64(feature.as_bytes()) % bucket_count as u64) as usize;
        *counts.entry(bucket).or_insert(0) += 1;
    }
    counts
}

/// Hashed character-n-gram mean-pool encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramEncoder<F: Scalar> {
    config: EncoderConfig,
    /// bucket_count x dim, row-major.
    table: Vec<F>,
}

impl<F: Scalar> NgramEncoder<F> {
    /// Fresh encoder with table entries i.i.d. uniform on
    /// [-1/sqrt(dim), +1/sqrt(dim)], deterministic per config seed.
    pub fn init(config: EncoderConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let config = EncoderConfig {
            ngram_orders: config.canonical_orders(),
            ..config
        };
        let bound = 1.0 / (config.dim as f64).sqrt();
        let mut rng = StdRng::seed_from_u64(config.seed);
        let table = (0..config.bucket_count * config.dim)
            .map(|_| from_f64(rng.random_range(-bound..=bound)))
            .collect();
        Ok(NgramEncoder { config, table })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Persist as a header line
    /// `ngram dim=<k> buckets=<b> orders=<o1,o2> normalize=<0|1>`
    /// followed by the table in the embedding file format, bucket index as id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EncoderError> {
        let path = path.as_ref();
        let io_err = |source| EncoderError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = std::fs::File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        let orders = self
            .config
            .ngram_orders
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        writeln!(
            w,
            "ngram dim={} buckets={} orders={} normalize={}",
            self.config.dim,
            self.config.bucket_count,
            orders,
            u8::from(self.config.normalize)
        )
        .map_err(io_err)?;
        write_embedding_body(
            &mut w,
            self.config.dim,
            (0..self.config.bucket_count).map(|b| {
                let row = &self.table[b * self.config.dim..(b + 1) * self.config.dim];
                (b.to_string(), row)
            }),
        )
        .map_err(io_err)?;
        w.flush().map_err(io_err)?;
        Ok(())
    }

    /// Load an encoder persisted by [`NgramEncoder::save`]. The init seed is
    /// not stored; the loaded config carries seed 0.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EncoderError> {
        let path = path.as_ref();
        let path_str = path.display().to_string();
        let file = std::fs::File::open(path).map_err(|source| EncoderError::Io {
            path: path_str.clone(),
            source,
        })?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|source| EncoderError::Io {
                path: path_str.clone(),
                source,
            })?
            .ok_or_else(|| EncoderError::Malformed {
                path: path_str.clone(),
                line: 1,
                reason: "empty file".into(),
            })?;
        let config = parse_ngram_header(&header, &path_str)?;

        let (ids, vectors, dim) = read_embedding_body(lines, &path_str, 2)?;
        if dim != config.dim {
            return Err(EncoderError::Malformed {
                path: path_str,
                line: 2,
                reason: format!("body dim {} does not match header dim {}", dim, config.dim),
            });
        }
        let mut table = vec![F::zero(); config.bucket_count * config.dim];
        let mut seen = vec![false; config.bucket_count];
        for (id, vector) in ids.iter().zip(vectors) {
            let bucket: usize = id.parse().map_err(|_| EncoderError::Malformed {
                path: path_str.clone(),
                line: 0,
                reason: format!("bucket id '{id}' is not an integer"),
            })?;
            if bucket >= config.bucket_count {
                return Err(EncoderError::Malformed {
                    path: path_str.clone(),
                    line: 0,
                    reason: format!(
                        "bucket id {bucket} out of range for {} buckets",
                        config.bucket_count
                    ),
                });
            }
            if seen[bucket] {
                return Err(EncoderError::DuplicateId {
                    path: path_str.clone(),
                    id: id.clone(),
                });
            }
            seen[bucket] = true;
            table[bucket * config.dim..(bucket + 1) * config.dim].copy_from_slice(&vector);
        }
        Ok(NgramEncoder { config, table })
    }
}

fn parse_ngram_header(header: &str, path: &str) -> Result<EncoderConfig, EncoderError> {
    let malformed = |reason: String| EncoderError::Malformed {
        path: path.to_string(),
        line: 1,
        reason,
    };
    let mut parts = header.split_whitespace();
    if parts.next() != Some("ngram") {
        return Err(malformed("expected 'ngram' header".into()));
    }
    let mut dim = None;
    let mut buckets = None;
    let mut orders = None;
    let mut normalize = None;
    for part in parts {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| malformed(format!("expected key=value, found '{part}'")))?;
        match key {
            "dim" => dim = Some(value.parse().map_err(|_| malformed(format!("bad dim '{value}'")))?),
            "buckets" => {
                buckets =
                    Some(value.parse().map_err(|_| malformed(format!("bad buckets '{value}'")))?)
            }
            "orders" => {
                let parsed: Result<Vec<usize>, _> = if value.is_empty() {
                    Ok(Vec::new())
                } else {
                    value.split(',').map(str::parse).collect()
                };
                orders = Some(parsed.map_err(|_| malformed(format!("bad orders '{value}'")))?);
            }
            "normalize" => {
                normalize = Some(match value {
                    "0" => false,
                    "1" => true,
                    _ => return Err(malformed(format!("bad normalize '{value}'"))),
                })
            }
            _ => return Err(malformed(format!("unknown key '{key}'"))),
        }
    }
    let config = EncoderConfig {
        dim: dim.ok_or_else(|| malformed("missing dim".into()))?,
        bucket_count: buckets.ok_or_else(|| malformed("missing buckets".into()))?,
        ngram_orders: orders.ok_or_else(|| malformed("missing orders".into()))?,
        normalize: normalize.ok_or_else(|| malformed("missing normalize".into()))?,
        seed: 0,
    };
    config.validate()?;
    Ok(config)
}

impl<F: Scalar> Encoder<F> for NgramEncoder<F> {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn encode(&self, key: &str) -> Result<Vec<F>, EncoderError> {
        pooled_encode(self, key)
    }
}

impl<F: Scalar> PooledEncoder<F> for NgramEncoder<F> {
    fn rows(&self) -> usize {
        self.config.bucket_count
    }

    fn pool_weights(&self, key: &str) -> Result<Vec<(usize, F)>, EncoderError> {
        let counts = feature_buckets(key, &self.config.ngram_orders, self.config.bucket_count);
        let total: usize = counts.values().sum();
        if total == 0 {
            return Ok(Vec::new());
        }
        let total_f = from_f64::<F>(total as f64);
        Ok(counts
            .into_iter()
            .map(|(bucket, count)| (bucket, from_f64::<F>(count as f64) / total_f))
            .collect())
    }

    fn params(&self) -> &[F] {
        &self.table
    }

    fn params_mut(&mut self) -> &mut [F] {
        &mut self.table
    }

    fn normalizes(&self) -> bool {
        self.config.normalize
    }
}

/// TF-IDF bag-of-words encoder over the fitted vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TfidfEncoder<F: Scalar> {
    vocabulary: HashMap<String, usize>,
    idf: Vec<F>,
    document_count: usize,
}

impl<F: Scalar> TfidfEncoder<F> {
    /// Fit on a corpus of texts. Vocabulary indices follow first
    /// appearance; idf(t) = ln((1 + n) / (1 + df(t))) + 1.
    pub fn fit(corpus: &[String]) -> Result<Self, EncoderError> {
        if corpus.is_empty() {
            return Err(EncoderError::EmptyCorpus);
        }
        let mut vocabulary: HashMap<String, usize> = HashMap::new();
        let mut document_frequency: Vec<usize> = Vec::new();
        for text in corpus {
            let mut seen_here: Vec<usize> = Vec::new();
            for token in tokenize(text) {
                let next_index = vocabulary.len();
                let index = *vocabulary.entry(token).or_insert(next_index);
                if index == document_frequency.len() {
                    document_frequency.push(0);
                }
                if !seen_here.contains(&index) {
                    seen_here.push(index);
                    document_frequency[index] += 1;
                }
            }
        }
        let n = corpus.len();
        let idf = document_frequency
            .iter()
            .map(|&df| from_f64(((1.0 + n as f64) / (1.0 + df as f64)).ln() + 1.0))
            .collect();
        Ok(TfidfEncoder {
            vocabulary,
            idf,
            document_count: n,
        })
    }

    pub fn vocabulary_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn document_count(&self) -> usize {
        self.document_count
    }

    /// The fitted idf weight of a token, if in vocabulary.
    pub fn idf(&self, token: &str) -> Option<F> {
        self.vocabulary.get(token).map(|&i| self.idf[i])
    }
}

impl<F: Scalar> Encoder<F> for TfidfEncoder<F> {
    fn dim(&self) -> usize {
        self.vocabulary.len()
    }

    fn encode(&self, key: &str) -> Result<Vec<F>, EncoderError> {
        let mut out = vec![F::zero(); self.vocabulary.len()];
        for token in tokenize(key) {
            if let Some(&index) = self.vocabulary.get(&token) {
                out[index] = out[index] + self.idf[index];
            }
        }
        l2_normalize(&mut out);
        Ok(out)
    }
}

/// Trainable projection head over frozen externally supplied vectors,
/// keyed by record id.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenHeadEncoder<F: Scalar> {
    ids: Vec<String>,
    base: HashMap<String, Vec<F>>,
    base_dim: usize,
    /// base_dim x dim, row-major. The raw embedding of id is
    /// sum over i of base[id][i] * head_row(i).
    head: Vec<F>,
    dim: usize,
    normalize: bool,
}

impl<F: Scalar> FrozenHeadEncoder<F> {
    /// Load base vectors from an embedding file and initialize a fresh head
    /// (uniform on [-1/sqrt(dim), +1/sqrt(dim)], seeded).
    pub fn from_embedding_file(
        path: impl AsRef<Path>,
        dim: usize,
        normalize: bool,
        seed: u64,
    ) -> Result<Self, EncoderError> {
        let (ids, vectors, base_dim) = load_embeddings::<F>(&path)?;
        if dim < 2 {
            return Err(EncoderError::InvalidConfig(format!(
                "dim must be at least 2, got {dim}"
            )));
        }
        let mut base = HashMap::with_capacity(ids.len());
        for (id, vector) in ids.iter().zip(vectors) {
            base.insert(id.clone(), vector);
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let mut rng = StdRng::seed_from_u64(seed);
        let head = (0..base_dim * dim)
            .map(|_| from_f64(rng.random_range(-bound..=bound)))
            .collect();
        Ok(FrozenHeadEncoder {
            ids,
            base,
            base_dim,
            head,
            dim,
            normalize,
        })
    }

    pub fn base_dim(&self) -> usize {
        self.base_dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Persist head and base together:
    /// `frozen dim=<k> basedim=<m> normalize=<0|1>`, a `head` section with
    /// the head rows (row index as id), then a `base` section with the
    /// frozen vectors, both in the embedding file format.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EncoderError> {
        let path = path.as_ref();
        let io_err = |source| EncoderError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = std::fs::File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        writeln!(
            w,
            "frozen dim={} basedim={} normalize={}",
            self.dim,
            self.base_dim,
            u8::from(self.normalize)
        )
        .map_err(io_err)?;
        writeln!(w, "head").map_err(io_err)?;
        write_embedding_body(
            &mut w,
            self.dim,
            (0..self.base_dim).map(|r| {
                let row = &self.head[r * self.dim..(r + 1) * self.dim];
                (r.to_string(), row)
            }),
        )
        .map_err(io_err)?;
        writeln!(w, "base").map_err(io_err)?;
        write_embedding_body(
            &mut w,
            self.base_dim,
            self.ids.iter().map(|id| (id.clone(), self.base[id].as_slice())),
        )
        .map_err(io_err)?;
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EncoderError> {
        let path = path.as_ref();
        let path_str = path.display().to_string();
        let content = std::fs::read_to_string(path).map_err(|source| EncoderError::Io {
            path: path_str.clone(),
            source,
        })?;
        let malformed = |line: usize, reason: String| EncoderError::Malformed {
            path: path_str.clone(),
            line,
            reason,
        };
        let mut lines = content.lines();
        let header = lines.next().ok_or_else(|| malformed(1, "empty file".into()))?;
        let mut dim = None;
        let mut base_dim = None;
        let mut normalize = None;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("frozen") {
            return Err(malformed(1, "expected 'frozen' header".into()));
        }
        for part in parts {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| malformed(1, format!("expected key=value, found '{part}'")))?;
            match key {
                "dim" => dim = value.parse().ok(),
                "basedim" => base_dim = value.parse().ok(),
                "normalize" => {
                    normalize = match value {
                        "0" => Some(false),
                        "1" => Some(true),
                        _ => None,
                    }
                }
                _ => return Err(malformed(1, format!("unknown key '{key}'"))),
            }
        }
        let dim: usize = dim.ok_or_else(|| malformed(1, "missing or bad dim".into()))?;
        let base_dim: usize = base_dim.ok_or_else(|| malformed(1, "missing or bad basedim".into()))?;
        let normalize = normalize.ok_or_else(|| malformed(1, "missing or bad normalize".into()))?;

        if lines.next() != Some("head") {
            return Err(malformed(2, "expected 'head' section".into()));
        }
        let head_lines: Vec<&str> = lines.by_ref().take_while(|l| *l != "base").collect();
        let (head_ids, head_rows, head_dim) =
            parse_embedding_lines(head_lines.iter().copied(), &path_str, 3)?;
        if head_dim != dim || head_ids.len() != base_dim {
            return Err(malformed(
                3,
                format!(
                    "head shape {}x{} does not match header {}x{}",
                    head_ids.len(),
                    head_dim,
                    base_dim,
                    dim
                ),
            ));
        }
        let mut head = vec![F::zero(); base_dim * dim];
        for (id, row) in head_ids.iter().zip(&head_rows) {
            let r: usize = id
                .parse()
                .map_err(|_| malformed(0, format!("head row id '{id}' is not an integer")))?;
            if r >= base_dim {
                return Err(malformed(0, format!("head row id {r} out of range")));
            }
            for (slot, &x) in head[r * dim..(r + 1) * dim].iter_mut().zip(row) {
                *slot = from_f64(x);
            }
        }

        let (ids, vectors, parsed_base_dim) =
            parse_embedding_lines(lines, &path_str, 4 + base_dim)?;
        if parsed_base_dim != base_dim {
            return Err(malformed(
                0,
                format!("base dim {parsed_base_dim} does not match header basedim {base_dim}"),
            ));
        }
        let mut base = HashMap::with_capacity(ids.len());
        for (id, vector) in ids.iter().zip(vectors) {
            base.insert(id.clone(), vector.into_iter().map(from_f64).collect());
        }
        Ok(FrozenHeadEncoder {
            ids,
            base,
            base_dim,
            head,
            dim,
            normalize,
        })
    }
}

impl<F: Scalar> Encoder<F> for FrozenHeadEncoder<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, key: &str) -> Result<Vec<F>, EncoderError> {
        pooled_encode(self, key)
    }
}

impl<F: Scalar> PooledEncoder<F> for FrozenHeadEncoder<F> {
    fn rows(&self) -> usize {
        self.base_dim
    }

    fn pool_weights(&self, key: &str) -> Result<Vec<(usize, F)>, EncoderError> {
        let base = self
            .base
            .get(key)
            .ok_or_else(|| EncoderError::UnknownId(key.to_string()))?;
        Ok(base.iter().copied().enumerate().collect())
    }

    fn params(&self) -> &[F] {
        &self.head
    }

    fn params_mut(&mut self) -> &mut [F] {
        &mut self.head
    }

    fn normalizes(&self) -> bool {
        self.normalize
    }
}

fn write_embedding_body<'a, F: Scalar + 'a, W: Write>(
    w: &mut W,
    dim: usize,
    rows: impl Iterator<Item = (String, &'a [F])>,
) -> std::io::Result<()> {
    writeln!(w, "dim={dim}")?;
    for (id, vector) in rows {
        write!(w, "{id}\t")?;
        for (i, &v) in vector.iter().enumerate() {
            if i > 0 {
                write!(w, " ")?;
            }
            write!(w, "{}", to_f64(v))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Write id -> vector rows in the embedding file format:
/// `dim=<k>` then `<id>\t<v1> <v2> ... <vk>` per row.
pub fn save_embeddings<F: Scalar>(
    path: impl AsRef<Path>,
    dim: usize,
    rows: &[(String, Vec<F>)],
) -> Result<(), EncoderError> {
    let path = path.as_ref();
    let io_err = |source| EncoderError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    write_embedding_body(&mut w, dim, rows.iter().map(|(id, v)| (id.clone(), v.as_slice())))
        .map_err(io_err)?;
    w.flush().map_err(io_err)?;
    Ok(())
}

fn parse_embedding_lines<'a>(
    lines: impl Iterator<Item = &'a str>,
    path: &str,
    first_line_number: usize,
) -> Result<(Vec<String>, Vec<Vec<f64>>, usize), EncoderError> {
    let mut lines = lines.enumerate().map(|(i, l)| (first_line_number + i, l));
    let (line_no, dim_line) = lines.next().ok_or_else(|| EncoderError::Malformed {
        path: path.to_string(),
        line: first_line_number,
        reason: "missing dim line".into(),
    })?;
    let dim: usize = dim_line
        .strip_prefix("dim=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| EncoderError::Malformed {
            path: path.to_string(),
            line: line_no,
            reason: format!("expected 'dim=<k>', found '{dim_line}'"),
        })?;
    let mut ids = Vec::new();
    let mut vectors = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (line_no, line) in lines {
        if line.is_empty() {
            continue;
        }
        let (id, rest) = line.split_once('\t').ok_or_else(|| EncoderError::Malformed {
            path: path.to_string(),
            line: line_no,
            reason: "missing tab separator".into(),
        })?;
        if !seen.insert(id.to_string()) {
            return Err(EncoderError::DuplicateId {
                path: path.to_string(),
                id: id.to_string(),
            });
        }
        let components: Result<Vec<f64>, _> =
            rest.split_whitespace().map(str::parse::<f64>).collect();
        let components = components.map_err(|e| EncoderError::Malformed {
            path: path.to_string(),
            line: line_no,
            reason: format!("bad float: {e}"),
        })?;
        if components.len() != dim {
            return Err(EncoderError::DimensionMismatch {
                path: path.to_string(),
                line: line_no,
                expected: dim,
                got: components.len(),
            });
        }
        ids.push(id.to_string());
        vectors.push(components);
    }
    Ok((ids, vectors, dim))
}

fn read_embedding_body<F: Scalar, B: BufRead>(
    lines: std::io::Lines<B>,
    path: &str,
    first_line_number: usize,
) -> Result<(Vec<String>, Vec<Vec<F>>, usize), EncoderError> {
    let collected: Result<Vec<String>, _> = lines.collect();
    let collected = collected.map_err(|source| EncoderError::Io {
        path: path.to_string(),
        source,
    })?;
    let (ids, vectors, dim) =
        parse_embedding_lines(collected.iter().map(String::as_str), path, first_line_number)?;
    let vectors = vectors
        .into_iter()
        .map(|v| v.into_iter().map(from_f64).collect())
        .collect();
    Ok((ids, vectors, dim))
}

/// Load an embedding file: (ids in file order, vectors, dim).
pub fn load_embeddings<F: Scalar>(
    path: impl AsRef<Path>,
) -> Result<(Vec<String>, Vec<Vec<F>>, usize), EncoderError> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let content = std::fs::read_to_string(path).map_err(|source| EncoderError::Io {
        path: path_str.clone(),
        source,
    })?;
    let (ids, vectors, dim) = parse_embedding_lines(content.lines(), &path_str, 1)?;
    let vectors = vectors
        .into_iter()
        .map(|v| v.into_iter().map(from_f64).collect())
        .collect();
    Ok((ids, vectors, dim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::{dot, l2_norm};
    use proptest::prelude::*;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            dim: 8,
            bucket_count: 64,
            ngram_orders: vec![3],
            normalize: true,
            seed: 42,
        }
    }

    #[test]
    fn featurize_empty_text() {
        assert!(feature_strings("", &[3]).is_empty());
        assert!(feature_strings("  .,;  ", &[3]).is_empty());
    }

    #[test]
    fn featurize_doe_order_three() {
        let feats = feature_strings("Doe", &[3]);
        assert_eq!(feats, vec!["doe", "^do", "doe", "oe$"]);
    }

    #[test]
    fn featurize_orders_three_and_four() {
        let feats = feature_strings("doe", &[3, 4]);
        assert_eq!(feats, vec!["doe", "^do", "doe", "oe$", "^doe", "doe$"]);
        // Order list direction and duplicates must not matter.
        assert_eq!(feature_strings("doe", &[4, 3, 3]), feats);
    }

    #[test]
    fn featurize_splits_on_punctuation() {
        let feats = feature_strings("Jane M. Doe", &[3]);
        let words: Vec<&str> = feats.iter().map(String::as_str).collect();
        assert!(words.contains(&"jane"));
        assert!(words.contains(&"m"));
        assert!(words.contains(&"doe"));
        // "m" pads to "^m$", exactly one 3-gram.
        assert_eq!(words.iter().filter(|&&w| w == "^m$").count(), 1);
    }

    #[test]
    fn featurize_short_word_skips_long_orders() {
        // "^m$" has length 3: no 4-grams exist.
        let feats = feature_strings("m", &[4]);
        assert_eq!(feats, vec!["m"]);
    }

    #[test]
    fn featurize_is_deterministic() {
        let a = feature_strings("Jane Mary Doe", &[3, 4]);
        let b = feature_strings("Jane Mary Doe", &[3, 4]);
        assert_eq!(a, b);
    }

    #[test]
    fn encode_single_feature_is_normalized_row() {
        // Unigrams only: a one-word text touches exactly one bucket.
        let config = EncoderConfig {
            ngram_orders: vec![],
            ..small_config()
        };
        let enc: NgramEncoder<f64> = NgramEncoder::init(config.clone()).unwrap();
        let bucket = (fnv1a64(b"jane") % config.bucket_count as u64) as usize;
        let mut expected: Vec<f64> =
            enc.params()[bucket * config.dim..(bucket + 1) * config.dim].to_vec();
        l2_normalize(&mut expected);
        assert_eq!(enc.encode("Jane").unwrap(), expected);
    }

    #[test]
    fn encode_empty_is_zero_vector() {
        let enc: NgramEncoder<f64> = NgramEncoder::init(small_config()).unwrap();
        let v = enc.encode("").unwrap();
        assert_eq!(v, vec![0.0; 8]);
    }

    #[test]
    fn encode_matches_mean_pool_oracle() {
        let config = EncoderConfig {
            dim: 8,
            bucket_count: 64,
            ngram_orders: vec![3, 4],
            normalize: true,
            seed: 9,
        };
        let enc: NgramEncoder<f64> = NgramEncoder::init(config.clone()).unwrap();
        let text = "jane mary doe little rock arkansas 72201";

        let feats = feature_strings(text, &config.ngram_orders);
        assert!(feats.len() >= 20);
        let mut oracle = vec![0.0f64; config.dim];
        for feat in &feats {
            let bucket = (fnv1a64(feat.as_bytes()) % config.bucket_count as u64) as usize;
            for (o, &x) in oracle
                .iter_mut()
                .zip(&enc.params()[bucket * config.dim..(bucket + 1) * config.dim])
            {
                *o += x;
            }
        }
        for o in oracle.iter_mut() {
            *o /= feats.len() as f64;
        }
        let norm = l2_norm(&oracle);
        for o in oracle.iter_mut() {
            *o /= norm;
        }

        let got = enc.encode(text).unwrap();
        for (g, o) in got.iter().zip(&oracle) {
            assert!((g - o).abs() < 1e-9, "encode disagrees with oracle");
        }
    }

    #[test]
    fn encode_normalized_output_is_unit() {
        let enc: NgramEncoder<f64> = NgramEncoder::init(small_config()).unwrap();
        let v = enc.encode("William Peters Smith").unwrap();
        assert!((l2_norm(&v) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn encode_word_permutation_invariant_with_unigrams() {
        let config = EncoderConfig {
            ngram_orders: vec![],
            ..small_config()
        };
        let enc: NgramEncoder<f64> = NgramEncoder::init(config).unwrap();
        assert_eq!(enc.encode("a b").unwrap(), enc.encode("b a").unwrap());
    }

    #[test]
    fn init_is_deterministic_and_in_bounds() {
        let config = EncoderConfig::default();
        let a: NgramEncoder<f64> = NgramEncoder::init(config.clone()).unwrap();
        let b: NgramEncoder<f64> = NgramEncoder::init(config.clone()).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.params().len(), 65_536 * 64);

        let bound = 1.0 / 8.0;
        let n = a.params().len() as f64;
        let mut sum = 0.0;
        for &x in a.params() {
            assert!(x.abs() <= bound + 1e-12);
            sum += x;
        }
        let mean = sum / n;
        let sigma_of_mean = bound / (3.0 * n).sqrt();
        assert!(mean.abs() <= 3.0 * sigma_of_mean, "table mean {mean} too far from 0");
    }

    #[test]
    fn init_rejects_bad_config() {
        let mut config = small_config();
        config.dim = 1;
        assert!(NgramEncoder::<f64>::init(config).is_err());
        let mut config = small_config();
        config.bucket_count = 4;
        assert!(NgramEncoder::<f64>::init(config).is_err());
        let mut config = small_config();
        config.ngram_orders = vec![0];
        assert!(NgramEncoder::<f64>::init(config).is_err());
    }

    #[test]
    fn ngram_save_load_round_trip() {
        let enc: NgramEncoder<f64> = NgramEncoder::init(EncoderConfig {
            dim: 4,
            bucket_count: 32,
            ngram_orders: vec![3, 4],
            normalize: true,
            seed: 5,
        })
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        enc.save(f.path()).unwrap();
        let loaded: NgramEncoder<f64> = NgramEncoder::load(f.path()).unwrap();
        assert_eq!(loaded.params(), enc.params());
        assert_eq!(loaded.config().dim, 4);
        assert_eq!(loaded.config().bucket_count, 32);
        assert_eq!(loaded.config().ngram_orders, vec![3, 4]);
        assert!(loaded.config().normalize);
        assert_eq!(
            loaded.encode("Jane Mary Doe").unwrap(),
            enc.encode("Jane Mary Doe").unwrap()
        );
    }

    #[test]
    fn tfidf_idf_formula() {
        let corpus: Vec<String> = vec![
            "jane doe".into(),
            "jane smith".into(),
            "william jane".into(),
            "doe street jane".into(),
        ];
        let enc: TfidfEncoder<f64> = TfidfEncoder::fit(&corpus).unwrap();
        // In every document: idf = ln(5/5) + 1 = 1.
        assert!((enc.idf("jane").unwrap() - 1.0).abs() < 1e-12);
        // In one document of four: idf = ln(5/2) + 1.
        let expected = (5.0f64 / 2.0).ln() + 1.0;
        assert!((enc.idf("street").unwrap() - expected).abs() < 1e-12);
        // In two documents: idf = ln(5/3) + 1.
        let expected = (5.0f64 / 3.0).ln() + 1.0;
        assert!((enc.idf("doe").unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn tfidf_single_document_all_idf_one() {
        let corpus: Vec<String> = vec!["jane mary doe".into()];
        let enc: TfidfEncoder<f64> = TfidfEncoder::fit(&corpus).unwrap();
        for token in ["jane", "mary", "doe"] {
            assert!((enc.idf(token).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tfidf_self_cosine_is_one() {
        let corpus: Vec<String> = vec![
            "jane mary doe little rock".into(),
            "william peters smith dallas".into(),
        ];
        let enc: TfidfEncoder<f64> = TfidfEncoder::fit(&corpus).unwrap();
        let v = enc.encode("jane mary doe little rock").unwrap();
        assert!((dot(&v, &v) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn tfidf_ignores_unseen_tokens() {
        let corpus: Vec<String> = vec!["jane doe".into(), "william smith".into()];
        let enc: TfidfEncoder<f64> = TfidfEncoder::fit(&corpus).unwrap();
        assert_eq!(
            enc.encode("jane zzz qqq").unwrap(),
            enc.encode("jane").unwrap()
        );
    }

    #[test]
    fn tfidf_empty_corpus_is_error() {
        assert!(matches!(
            TfidfEncoder::<f64>::fit(&[]),
            Err(EncoderError::EmptyCorpus)
        ));
    }

    #[test]
    fn embedding_file_round_trip() {
        let rows = vec![
            ("r1".to_string(), vec![0.25f64, -1.5, 3.0, 0.0001]),
            ("r2".to_string(), vec![1.0, 2.0, 3.0, 4.0]),
            ("r3".to_string(), vec![-0.3333333333333333, 0.1, 0.2, 0.7]),
        ];
        let f = tempfile::NamedTempFile::new().unwrap();
        save_embeddings(f.path(), 4, &rows).unwrap();
        let (ids, vectors, dim) = load_embeddings::<f64>(f.path()).unwrap();
        assert_eq!(dim, 4);
        assert_eq!(ids, vec!["r1", "r2", "r3"]);
        for ((_, original), loaded) in rows.iter().zip(&vectors) {
            for (a, b) in original.iter().zip(loaded) {
                assert!((a - b).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn embedding_file_rejects_bad_rows() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), "dim=3\na\t1 2 3\nb\t1 2\n").unwrap();
        assert!(matches!(
            load_embeddings::<f64>(f.path()),
            Err(EncoderError::DimensionMismatch { line: 3, .. })
        ));
        std::fs::write(f.path(), "dim=2\na\t1 2\na\t3 4\n").unwrap();
        assert!(matches!(
            load_embeddings::<f64>(f.path()),
            Err(EncoderError::DuplicateId { .. })
        ));
        std::fs::write(f.path(), "notadim\n").unwrap();
        assert!(matches!(
            load_embeddings::<f64>(f.path()),
            Err(EncoderError::Malformed { line: 1, .. })
        ));
        std::fs::write(f.path(), "dim=2\na\t1 x\n").unwrap();
        assert!(matches!(
            load_embeddings::<f64>(f.path()),
            Err(EncoderError::Malformed { line: 2, .. })
        ));
    }

    fn frozen_fixture() -> (tempfile::NamedTempFile, FrozenHeadEncoder<f64>) {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(
            f.path(),
            "dim=4\nr1\t1 0 0 0\nr2\t0 1 0 0\nr3\t0.5 0.5 0 0.7\n",
        )
        .unwrap();
        let enc = FrozenHeadEncoder::from_embedding_file(f.path(), 8, true, 3).unwrap();
        (f, enc)
    }

    #[test]
    fn frozen_head_shape_and_encode() {
        let (_f, enc) = frozen_fixture();
        assert_eq!(enc.base_dim(), 4);
        assert_eq!(enc.ids().len(), 3);
        assert_eq!(Encoder::<f64>::dim(&enc), 8);
        let v = enc.encode("r3").unwrap();
        assert_eq!(v.len(), 8);
        assert!((l2_norm(&v) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn frozen_head_unknown_id_is_error() {
        let (_f, enc) = frozen_fixture();
        match enc.encode("r9").unwrap_err() {
            EncoderError::UnknownId(id) => assert_eq!(id, "r9"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn frozen_head_matches_linear_oracle() {
        let (_f, enc) = frozen_fixture();
        // raw_j = sum_i base_i * head[i][j] for id r3.
        let base = [0.5, 0.5, 0.0, 0.7];
        let mut oracle = vec![0.0f64; 8];
        for (i, &b) in base.iter().enumerate() {
            for (j, o) in oracle.iter_mut().enumerate() {
                *o += b * enc.params()[i * 8 + j];
            }
        }
        l2_normalize(&mut oracle);
        let got = enc.encode("r3").unwrap();
        for (g, o) in got.iter().zip(&oracle) {
            assert!((g - o).abs() < 1e-9);
        }
    }

    #[test]
    fn frozen_save_load_round_trip() {
        let (_f, enc) = frozen_fixture();
        let out = tempfile::NamedTempFile::new().unwrap();
        enc.save(out.path()).unwrap();
        let loaded: FrozenHeadEncoder<f64> = FrozenHeadEncoder::load(out.path()).unwrap();
        assert_eq!(loaded.base_dim(), enc.base_dim());
        assert_eq!(loaded.ids(), enc.ids());
        assert_eq!(loaded.encode("r3").unwrap(), enc.encode("r3").unwrap());
    }

    proptest! {
        #[test]
        fn encode_is_unit_or_zero(text in "[a-z ]{0,30}") {
            let enc: NgramEncoder<f64> = NgramEncoder::init(small_config()).unwrap();
            let v = enc.encode(&text).unwrap();
            let norm = l2_norm(&v);
            prop_assert!(
                norm == 0.0 || (norm - 1.0).abs() < 1e-6,
                "norm was {norm}"
            );
        }

        #[test]
        fn equal_texts_encode_equally(text in "[a-z ]{1,30}") {
            let enc: NgramEncoder<f64> = NgramEncoder::init(small_config()).unwrap();
            prop_assert_eq!(enc.encode(&text).unwrap(), enc.encode(&text).unwrap());
        }
    }
}
