//! Triplet sampling and the derived balanced pair dataset.
//!
//! Every record whose truth id is shared by at least one other record
//! becomes an anchor. Its positive is drawn uniformly from the other
//! records of the same entity, its negative uniformly from records of any
//! other entity. Each triplet then expands to one matching and one
//! non-matching pair, so the pair dataset is balanced by construction.

use std::collections::HashMap;
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::corpus::Dataset;
use crate::hash::mix64;

#[derive(Debug, Error)]
pub enum TripletError {
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
    #[error("no records carry truth ids; cannot sample triplets")]
    NoTruthIds,
    #[error("only one distinct truth id present; no negative can be drawn")]
    SingleTruthId,
    #[error("{path}: expected header `{expected}`, found `{found}`")]
    BadHeader {
        path: String,
        expected: String,
        found: String,
    },
    #[error("{path} line {line}: empty text field")]
    EmptyText { path: String, line: u64 },
    #[error("{path} line {line}: label must be 0 or 1, found '{found}'")]
    BadLabel {
        path: String,
        line: u64,
        found: String,
    },
}

/// One (anchor, positive, negative) training example.
///
/// Truth ids are carried for provenance when the triplet was sampled
/// in-process; they are `None` for triplets loaded from a file, which
/// stores only the three texts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletExample {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
    pub anchor_truth_id: Option<String>,
    pub negative_truth_id: Option<String>,
}

/// An ordered triplet sample, deterministic given (dataset order, seed).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletSet {
    pub triplets: Vec<TripletExample>,
    /// Sampling seed; 0 for sets loaded from a file, which does not carry it.
    pub seed: u64,
}

/// One pairwise-classification example. Label 1 means match.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairExample {
    pub text1: String,
    pub text2: String,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub pairs: Vec<PairExample>,
}

/// Sample one triplet per eligible anchor, in dataset order.
///
/// Records without a truth id take no part (they can be neither anchors
/// nor draws, since matching them is undefined). Anchors whose truth id
/// is unique are skipped. Triplets in which any member serializes to the
/// empty string are dropped after sampling.
///
/// Each anchor draws from its own generator seeded by (seed, record
/// position), so the output is deterministic and independent of
/// evaluation order.
pub fn build_triplets(dataset: &Dataset, seed: u64) -> Result<TripletSet, TripletError> {
    let labeled: Vec<usize> = dataset
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.truth_id.is_some())
        .map(|(i, _)| i)
        .collect();
    if labeled.is_empty() {
        return Err(TripletError::NoTruthIds);
    }

    let mut clusters: HashMap<&str, Vec<usize>> = HashMap::new();
    for &i in &labeled {
        let truth = dataset.records[i].truth_id.as_deref().unwrap();
        clusters.entry(truth).or_default().push(i);
    }
    if clusters.len() < 2 {
        return Err(TripletError::SingleTruthId);
    }

    let mut triplets = Vec::new();
    for &anchor_idx in &labeled {
        let anchor = &dataset.records[anchor_idx];
        let truth = anchor.truth_id.as_deref().unwrap();
        let same = &clusters[truth];
        if same.len() < 2 {
            continue;
        }
        let mut rng = StdRng::seed_from_u64(mix64(seed, anchor_idx as u64));

        // Uniform over the cluster minus the anchor: draw from a range one
        // short and shift past the anchor's own slot.
        let anchor_slot = same.iter().position(|&i| i == anchor_idx).unwrap();
        let mut draw = rng.random_range(0..same.len() - 1);
        if draw >= anchor_slot {
            draw += 1;
        }
        let pos_idx = same[draw];

        // Rejection sampling stays uniform over the complement; it
        // terminates because a second truth id exists.
        let neg_idx = loop {
            let candidate = labeled[rng.random_range(0..labeled.len())];
            if dataset.records[candidate].truth_id.as_deref() != Some(truth) {
                break candidate;
            }
        };

        let anchor_text = anchor.serialized_text();
        let positive = dataset.records[pos_idx].serialized_text();
        let negative = dataset.records[neg_idx].serialized_text();
        if anchor_text.is_empty() || positive.is_empty() || negative.is_empty() {
            continue;
        }
        triplets.push(TripletExample {
            anchor: anchor_text,
            positive,
            negative,
            anchor_truth_id: Some(truth.to_string()),
            negative_truth_id: dataset.records[neg_idx].truth_id.clone(),
        });
    }
    Ok(TripletSet { triplets, seed })
}

/// Expand each triplet into (anchor, positive, 1) then (anchor, negative, 0).
pub fn derive_pairs(set: &TripletSet) -> PairSet {
    let mut pairs = Vec::with_capacity(set.triplets.len() * 2);
    for t in &set.triplets {
        pairs.push(PairExample {
            text1: t.anchor.clone(),
            text2: t.positive.clone(),
            label: 1,
        });
        pairs.push(PairExample {
            text1: t.anchor.clone(),
            text2: t.negative.clone(),
            label: 0,
        });
    }
    PairSet { pairs }
}

const TRIPLET_HEADER: [&str; 3] = ["anchor", "positive", "negative"];
const PAIR_HEADER: [&str; 3] = ["record1", "record2", "label"];

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>, TripletError> {
    let file = std::fs::File::open(path).map_err(|source| TripletError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn check_header(
    path: &Path,
    reader: &mut csv::Reader<std::fs::File>,
    expected: &[&str],
) -> Result<(), TripletError> {
    let header = reader.headers().map_err(|source| TripletError::Csv {
        path: path.display().to_string(),
        source,
    })?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(TripletError::BadHeader {
            path: path.display().to_string(),
            expected: expected.join(","),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    Ok(())
}

impl TripletSet {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TripletError> {
        let path = path.as_ref();
        let to_err = |source| TripletError::Csv {
            path: path.display().to_string(),
            source,
        };
        let mut writer = csv::Writer::from_path(path).map_err(to_err)?;
        writer.write_record(TRIPLET_HEADER).map_err(to_err)?;
        for t in &self.triplets {
            writer
                .write_record([&t.anchor, &t.positive, &t.negative])
                .map_err(to_err)?;
        }
        writer.flush().map_err(|source| TripletError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<TripletSet, TripletError> {
        let path = path.as_ref();
        let mut reader = open_reader(path)?;
        check_header(path, &mut reader, &TRIPLET_HEADER)?;
        let mut triplets = Vec::new();
        for row in reader.records() {
            let row = row.map_err(|source| TripletError::Csv {
                path: path.display().to_string(),
                source,
            })?;
            let line = row.position().map_or(0, |p| p.line());
            let get = |i: usize| row.get(i).unwrap_or("").to_string();
            let (anchor, positive, negative) = (get(0), get(1), get(2));
            if anchor.is_empty() || positive.is_empty() || negative.is_empty() {
                return Err(TripletError::EmptyText {
                    path: path.display().to_string(),
                    line,
                });
            }
            triplets.push(TripletExample {
                anchor,
                positive,
                negative,
                anchor_truth_id: None,
                negative_truth_id: None,
            });
        }
        Ok(TripletSet { triplets, seed: 0 })
    }
}

impl PairSet {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TripletError> {
        let path = path.as_ref();
        let to_err = |source| TripletError::Csv {
            path: path.display().to_string(),
            source,
        };
        let mut writer = csv::Writer::from_path(path).map_err(to_err)?;
        writer.write_record(PAIR_HEADER).map_err(to_err)?;
        for p in &self.pairs {
            writer
                .write_record([p.text1.as_str(), p.text2.as_str(), if p.label == 1 { "1" } else { "0" }])
                .map_err(to_err)?;
        }
        writer.flush().map_err(|source| TripletError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PairSet, TripletError> {
        let path = path.as_ref();
        let mut reader = open_reader(path)?;
        check_header(path, &mut reader, &PAIR_HEADER)?;
        let mut pairs = Vec::new();
        for row in reader.records() {
            let row = row.map_err(|source| TripletError::Csv {
                path: path.display().to_string(),
                source,
            })?;
            let line = row.position().map_or(0, |p| p.line());
            let text1 = row.get(0).unwrap_or("").to_string();
            let text2 = row.get(1).unwrap_or("").to_string();
            if text1.is_empty() || text2.is_empty() {
                return Err(TripletError::EmptyText {
                    path: path.display().to_string(),
                    line,
                });
            }
            let label = match row.get(2).unwrap_or("") {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(TripletError::BadLabel {
                        path: path.display().to_string(),
                        line,
                        found: other.to_string(),
                    })
                }
            };
            pairs.push(PairExample { text1, text2, label });
        }
        Ok(PairSet { pairs })
    }
}
