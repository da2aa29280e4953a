//! Labeled record datasets: loading, validation, serialization, splitting.
//!
//! A [`Record`] is an identified row of optional text fields plus an
//! optional truth id (the entity label: records sharing a truth id denote
//! the same real-world entity). Datasets load from CSV (RFC 4180, UTF-8,
//! header row), where a designated column supplies the record id and an
//! optional column supplies the truth id; every other column becomes a
//! field. Empty cells are absent values, not empty strings.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("id column '{0}' not found in header")]
    MissingIdColumn(String),
    #[error("truth column '{0}' not found in header")]
    MissingTruthColumn(String),
    #[error("duplicate record id '{0}'")]
    DuplicateRecordId(String),
    #[error("empty record id at line {0}")]
    EmptyRecordId(u64),
    #[error("line {line}: row has {got} fields, header has {expected}")]
    ArityMismatch { line: u64, got: usize, expected: usize },
    #[error("record '{id}' has {got} fields, schema has {expected}")]
    SchemaMismatch { id: String, got: usize, expected: usize },
    #[error("invalid split fractions {train}/{val}/{test}: {reason}")]
    InvalidSplit {
        train: f64,
        val: f64,
        test: f64,
        reason: String,
    },
    #[error("cannot split an empty dataset")]
    EmptyDataset,
}

/// Where a dataset came from, for report provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Path(String),
    Generator { seed: u64 },
    Memory,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Path(p) => write!(f, "file:{p}"),
            Provenance::Generator { seed } => write!(f, "generator:seed={seed}"),
            Provenance::Memory => write!(f, "memory"),
        }
    }
}

/// One identified text record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    /// Non-empty, unique within its dataset.
    pub record_id: String,
    /// Entity label. Equal truth ids mean the same real-world entity.
    pub truth_id: Option<String>,
    /// (column name, value) in source column order. `None` is an absent cell.
    pub fields: Vec<(String, Option<String>)>,
}

impl Record {
    /// Deterministic text form: non-null values joined by single spaces in
    /// schema order. All-null records serialize to the empty string.
    pub fn serialized_text(&self) -> String {
        let mut out = String::new();
        for (_, value) in &self.fields {
            if let Some(v) = value {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(v);
            }
        }
        out
    }
}

/// An ordered collection of records sharing one schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    /// Field column names, in source order (id/truth columns excluded).
    pub schema: Vec<String>,
    pub records: Vec<Record>,
    pub provenance: Provenance,
}

/// How to partition a dataset into train/val/test.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    /// When set, the splitting unit is the truth-id cluster rather than the
    /// record, so no entity straddles two splits.
    pub by_cluster: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.6,
            val_fraction: 0.2,
            test_fraction: 0.2,
            seed: 0,
            by_cluster: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let (t, v, s) = (self.train_fraction, self.val_fraction, self.test_fraction);
        let invalid = |reason: &str| CorpusError::InvalidSplit {
            train: t,
            val: v,
            test: s,
            reason: reason.to_string(),
        };
        if !(t.is_finite() && v.is_finite() && s.is_finite()) {
            return Err(invalid("non-finite fraction"));
        }
        if t < 0.0 || v < 0.0 || s < 0.0 {
            return Err(invalid("negative fraction"));
        }
        if ((t + v + s) - 1.0).abs() > 1e-9 {
            return Err(invalid("fractions must sum to 1"));
        }
        Ok(())
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Check the structural invariants: non-empty unique record ids and
    /// schema-conforming fields on every record.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for rec in &self.records {
            if rec.record_id.is_empty() {
                return Err(CorpusError::EmptyRecordId(0));
            }
            if !seen.insert(rec.record_id.as_str()) {
                return Err(CorpusError::DuplicateRecordId(rec.record_id.clone()));
            }
            if rec.fields.len() != self.schema.len()
                || rec.fields.iter().zip(&self.schema).any(|((n, _), s)| n != s)
            {
                return Err(CorpusError::SchemaMismatch {
                    id: rec.record_id.clone(),
                    got: rec.fields.len(),
                    expected: self.schema.len(),
                });
            }
        }
        Ok(())
    }

    /// Load a dataset from a headered CSV file.
    ///
    /// `id_column` names the record-id column; `truth_column`, when given,
    /// names the entity-label column. All remaining columns become fields.
    pub fn load(
        path: impl AsRef<Path>,
        id_column: &str,
        truth_column: Option<&str>,
    ) -> Result<Dataset, CorpusError> {
        let path = path.as_ref();
        let path_str = path.display().to_string();
        let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
            path: path_str.clone(),
            source,
        })?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(file);

        let header = reader
            .headers()
            .map_err(|source| CorpusError::Csv {
                path: path_str.clone(),
                source,
            })?
            .clone();
        let id_idx = header
            .iter()
            .position(|h| h == id_column)
            .ok_or_else(|| CorpusError::MissingIdColumn(id_column.to_string()))?;
        let truth_idx = match truth_column {
            Some(name) => Some(
                header
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| CorpusError::MissingTruthColumn(name.to_string()))?,
            ),
            None => None,
        };

        let schema: Vec<String> = header
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != id_idx && Some(*i) != truth_idx)
            .map(|(_, h)| h.to_string())
            .collect();

        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for row in reader.records() {
            let row = row.map_err(|source| CorpusError::Csv {
                path: path_str.clone(),
                source,
            })?;
            let line = row.position().map_or(0, |p| p.line());
            if row.len() != header.len() {
                return Err(CorpusError::ArityMismatch {
                    line,
                    got: row.len(),
                    expected: header.len(),
                });
            }
            let record_id = row.get(id_idx).unwrap_or("").to_string();
            if record_id.is_empty() {
                return Err(CorpusError::EmptyRecordId(line));
            }
            if !seen.insert(record_id.clone()) {
                return Err(CorpusError::DuplicateRecordId(record_id));
            }
            let truth_id = truth_idx
                .and_then(|i| row.get(i))
                .filter(|v| !v.is_empty())
                .map(str::to_string);
            let fields = header
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != id_idx && Some(*i) != truth_idx)
                .map(|(i, name)| {
                    let cell = row.get(i).unwrap_or("");
                    let value = if cell.is_empty() {
                        None
                    } else {
                        Some(cell.to_string())
                    };
                    (name.to_string(), value)
                })
                .collect();
            records.push(Record {
                record_id,
                truth_id,
                fields,
            });
        }

        Ok(Dataset {
            schema,
            records,
            provenance: Provenance::Path(path_str),
        })
    }

    /// Write the dataset back out as CSV. Null fields become empty cells;
    /// the truth column is written only when a name is given for it.
    pub fn save(
        &self,
        path: impl AsRef<Path>,
        id_column: &str,
        truth_column: Option<&str>,
    ) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let path_str = path.display().to_string();
        let mut writer = csv::WriterBuilder::new()
            .from_path(path)
            .map_err(|source| CorpusError::Csv {
                path: path_str.clone(),
                source,
            })?;

        let mut header = vec![id_column.to_string()];
        if let Some(t) = truth_column {
            header.push(t.to_string());
        }
        header.extend(self.schema.iter().cloned());
        writer.write_record(&header).map_err(|source| CorpusError::Csv {
            path: path_str.clone(),
            source,
        })?;

        for rec in &self.records {
            let mut row = vec![rec.record_id.clone()];
            if truth_column.is_some() {
                row.push(rec.truth_id.clone().unwrap_or_default());
            }
            row.extend(
                rec.fields
                    .iter()
                    .map(|(_, v)| v.clone().unwrap_or_default()),
            );
            writer.write_record(&row).map_err(|source| CorpusError::Csv {
                path: path_str.clone(),
                source,
            })?;
        }
        writer.flush().map_err(|source| CorpusError::Io {
            path: path_str.clone(),
            source,
        })?;
        Ok(())
    }

    /// Partition into (train, val, test).
    ///
    /// The splitting unit is the record, or the truth-id cluster when
    /// `spec.by_cluster` is set (records without a truth id stay singleton
    /// units). Unit counts round as: train = round(fraction * total) half
    /// up, val likewise capped by what remains, test takes the remainder.
    /// Deterministic for a fixed seed; record order within each split
    /// follows the input order.
    pub fn split(&self, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset), CorpusError> {
        spec.validate()?;
        if self.records.is_empty() {
            return Err(CorpusError::EmptyDataset);
        }

        // A unit is a list of record indices that must stay together.
        let units: Vec<Vec<usize>> = if spec.by_cluster {
            let mut order: Vec<String> = Vec::new();
            let mut by_key: HashMap<String, Vec<usize>> = HashMap::new();
            for (idx, rec) in self.records.iter().enumerate() {
                // Truthless records form singleton units keyed off the record id.
                let key = match &rec.truth_id {
                    Some(t) => format!("t:{t}"),
                    None => format!("r:{}", rec.record_id),
                };
                if !by_key.contains_key(&key) {
                    order.push(key.clone());
                }
                by_key.entry(key).or_default().push(idx);
            }
            order.into_iter().map(|k| by_key.remove(&k).unwrap()).collect()
        } else {
            (0..self.records.len()).map(|i| vec![i]).collect()
        };

        let total = units.len();
        let train_count = round_half_up(spec.train_fraction * total as f64).min(total);
        let val_count = round_half_up(spec.val_fraction * total as f64).min(total - train_count);

        let mut unit_order: Vec<usize> = (0..total).collect();
        let mut rng = rand::rngs::StdRng::seed_from_u64(spec.seed);
        unit_order.shuffle(&mut rng);

        // destination per record: 0 train, 1 val, 2 test
        let mut dest = vec![2u8; self.records.len()];
        for (rank, &unit_idx) in unit_order.iter().enumerate() {
            let d = if rank < train_count {
                0
            } else if rank < train_count + val_count {
                1
            } else {
                2
            };
            for &rec_idx in &units[unit_idx] {
                dest[rec_idx] = d;
            }
        }

        let subset = |which: u8| Dataset {
            schema: self.schema.clone(),
            records: self
                .records
                .iter()
                .enumerate()
                .filter(|(i, _)| dest[*i] == which)
                .map(|(_, r)| r.clone())
                .collect(),
            provenance: self.provenance.clone(),
        };
        Ok((subset(0), subset(1), subset(2)))
    }

    /// Distinct truth ids present, in first-appearance order.
    pub fn truth_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for rec in &self.records {
            if let Some(t) = &rec.truth_id {
                if seen.insert(t.as_str()) {
                    out.push(t.as_str());
                }
            }
        }
        out
    }
}
