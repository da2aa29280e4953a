//! Synthetic duplicate generation: a small person-record generator plus
//! controllable text noise (typos and token drops) for building labeled
//! benchmark datasets.
//!
//! Noise is deterministic per (text, seed) and generation is pure per
//! entity, so datasets regenerate bit-identically from their seed.

use std::sync::OnceLock;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::corpus::{Dataset, Provenance, Record};
use crate::hash::{derive_seed, hash_str, mix64};

const POOL_ASSET: &str = include_str!("../assets/person_pools.txt");

#[derive(Debug, Error)]
pub enum CorruptorError {
    #[error("invalid noise config: {0}")]
    InvalidConfig(String),
    #[error("cannot generate duplicates from an empty base set")]
    EmptyBaseSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    /// Per-character probability of a typo; split evenly between random
    /// letter substitution and adjacent transposition.
    pub typo_rate: f64,
    /// Per-token probability of deletion. At least one token always
    /// survives.
    pub token_drop_rate: f64,
    /// Total records emitted per entity, the clean one included.
    pub duplicates_per_entity: usize,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            typo_rate: 0.02,
            token_drop_rate: 0.1,
            duplicates_per_entity: 3,
            seed: 42,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), CorruptorError> {
        for (name, rate) in [
            ("typo_rate", self.typo_rate),
            ("token_drop_rate", self.token_drop_rate),
        ] {
            if !(rate.is_finite() && (0.0..=1.0).contains(&rate)) {
                return Err(CorruptorError::InvalidConfig(format!(
                    "{name} must lie in [0, 1], got {rate}"
                )));
            }
        }
        if self.duplicates_per_entity < 1 {
            return Err(CorruptorError::InvalidConfig(
                "duplicates_per_entity must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Apply token drops then character typos. Deterministic per (text, seed).
///
/// Panics if the config rates are outside [0, 1]; use
/// [`NoiseConfig::validate`] on untrusted configs first.
pub fn corrupt_text(text: &str, config: &NoiseConfig) -> String {
    config.validate().expect("noise rates out of range");
    let mut rng = StdRng::seed_from_u64(mix64(config.seed, hash_str(text)));

    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.is_empty() {
        return String::new();
    }
    let mut dropped: Vec<bool> = (0..tokens.len())
        .map(|_| rng.random::<f64>() < config.token_drop_rate)
        .collect();
    if dropped.iter().all(|&d| d) {
        let keep = rng.random_range(0..tokens.len());
        dropped[keep] = false;
    }
    let survivors: Vec<&str> = tokens
        .iter()
        .zip(&dropped)
        .filter(|(_, &d)| !d)
        .map(|(&t, _)| t)
        .collect();

    let mut chars: Vec<char> = survivors.join(" ").chars().collect();
    let half = config.typo_rate / 2.0;
    let mut i = 0;
    while i < chars.len() {
        let u = rng.random::<f64>();
        if u < half || (u < config.typo_rate && i + 1 == chars.len()) {
            chars[i] = random_other_letter(&mut rng, chars[i]);
            i += 1;
        } else if u < config.typo_rate {
            chars.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }
    chars.into_iter().collect()
}

/// A lowercase letter guaranteed to differ from `current`, so a
/// substitution always changes the character.
fn random_other_letter(rng: &mut StdRng, current: char) -> char {
    let pick = rng.random_range(0u32..26);
    let letter = char::from(b'a' + pick as u8);
    if letter == current {
        char::from(b'a' + ((pick as u8 + 1) % 26))
    } else {
        letter
    }
}

struct Pools {
    first_names: Vec<String>,
    middle_names: Vec<String>,
    last_names: Vec<String>,
    streets: Vec<String>,
    places: Vec<(String, String, String)>,
}

fn pools() -> &'static Pools {
    static POOLS: OnceLock<Pools> = OnceLock::new();
    POOLS.get_or_init(|| {
        let mut out = Pools {
            first_names: Vec::new(),
            middle_names: Vec::new(),
            last_names: Vec::new(),
            streets: Vec::new(),
            places: Vec::new(),
        };
        let mut section = String::new();
        for line in POOL_ASSET.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.to_string();
                continue;
            }
            match section.as_str() {
                "first_names" => out.first_names.push(line.to_string()),
                "middle_names" => out.middle_names.push(line.to_string()),
                "last_names" => out.last_names.push(line.to_string()),
                "streets" => out.streets.push(line.to_string()),
                "places" => {
                    let mut parts = line.splitn(3, ',');
                    let city = parts.next().unwrap_or_default().to_string();
                    let state = parts.next().expect("place entry needs a state").to_string();
                    let zip = parts.next().expect("place entry needs a zip").to_string();
                    assert!(
                        zip.len() == 5 && zip.bytes().all(|b| b.is_ascii_digit()),
                        "place zip must be five digits"
                    );
                    out.places.push((city, state, zip));
                }
                other => panic!("unknown pool section '{other}'"),
            }
        }
        assert!(
            !out.first_names.is_empty()
                && !out.middle_names.is_empty()
                && !out.last_names.is_empty()
                && !out.streets.is_empty()
                && !out.places.is_empty(),
            "pool asset is missing a section"
        );
        assert_eq!(
            out.first_names.len(),
            out.middle_names.len(),
            "name pools pair by position"
        );
        assert_eq!(
            out.first_names.len(),
            out.last_names.len(),
            "name pools pair by position"
        );
        out
    })
}

pub const PERSON_SCHEMA: [&str; 5] = ["name", "address", "zip", "city", "state"];

const HOUSE_NUMBER: u32 = 214;

/// Name pools combined per identity level; with a pool length coprime to
/// the step 2, any two identities agree on at most one name part.
const NAME_LEVELS: usize = 4;

/// `count` synthetic person entities, one record each, truth ids attached.
/// Pure per entity: record `i` depends only on (seed, i).
///
/// An identity is a full name: level `q` and offset `r` pick the first,
/// middle, and last name from their pools at indices r, r+q, and r+2q,
/// so two distinct identities share at most one name part and most
/// share none. Identities are drawn without replacement from a seeded
/// shuffle of the combination space, so no two entities collide until
/// the space is exhausted; past that point identities recycle. The
/// address block is one shared building, carrying no identity.
pub fn generate_entities(count: usize, seed: u64) -> Result<Dataset, CorruptorError> {
    if count == 0 {
        return Err(CorruptorError::InvalidConfig(
            "entity count must be at least 1".into(),
        ));
    }
    let pools = pools();
    let len = pools.first_names.len();
    let mut identities: Vec<(usize, usize)> = Vec::new();
    for q in 0..NAME_LEVELS.min(len) {
        for r in 0..len {
            identities.push((q, r));
        }
    }
    let mut shuffle_rng = StdRng::seed_from_u64(derive_seed(seed, "identity"));
    identities.shuffle(&mut shuffle_rng);

    let width = count.to_string().len().max(3);
    let records = (0..count)
        .map(|i| {
            let (q, r) = identities[i % identities.len()];
            let name = format!(
                "{} {} {}",
                pools.first_names[r],
                pools.middle_names[(r + q) % len],
                pools.last_names[(r + 2 * q) % len]
            );
            let address = format!("{} {}", HOUSE_NUMBER, pools.streets[0]);
            let (city, state, zip) = &pools.places[0];
            Record {
                record_id: format!("e{i:0width$}"),
                truth_id: Some(format!("t{i:0width$}")),
                fields: vec![
                    ("name".into(), Some(name)),
                    ("address".into(), Some(address)),
                    ("zip".into(), Some(zip.clone())),
                    ("city".into(), Some(city.clone())),
                    ("state".into(), Some(state.clone())),
                ],
            }
        })
        .collect();
    Ok(Dataset {
        schema: PERSON_SCHEMA.iter().map(|s| s.to_string()).collect(),
        records,
        provenance: Provenance::Generator { seed },
    })
}

/// Each base entity once clean plus (duplicates_per_entity - 1) corrupted
/// variants, all sharing the base truth_id. Record ids are fresh. A base
/// record without a truth_id uses its record_id as the cluster label.
pub fn generate_duplicates(
    base: &Dataset,
    config: &NoiseConfig,
) -> Result<Dataset, CorruptorError> {
    config.validate()?;
    if base.records.is_empty() {
        return Err(CorruptorError::EmptyBaseSet);
    }
    let mut records = Vec::with_capacity(base.records.len() * config.duplicates_per_entity);
    for record in &base.records {
        let truth_id = record
            .truth_id
            .clone()
            .unwrap_or_else(|| record.record_id.clone());
        for variant in 0..config.duplicates_per_entity {
            let record_id = format!("{}-d{variant}", record.record_id);
            let fields = if variant == 0 {
                record.fields.clone()
            } else {
                record
                    .fields
                    .iter()
                    .map(|(name, value)| {
                        let corrupted = value.as_ref().map(|text| {
                            let field_seed = derive_seed(
                                config.seed,
                                &format!("{}/{variant}/{name}", record.record_id),
                            );
                            corrupt_text(
                                text,
                                &NoiseConfig {
                                    seed: field_seed,
                                    ..config.clone()
                                },
                            )
                        });
                        (name.clone(), corrupted)
                    })
                    .collect()
            };
            records.push(Record {
                record_id,
                truth_id: Some(truth_id.clone()),
                fields,
            });
        }
    }
    Ok(Dataset {
        schema: base.schema.clone(),
        records,
        provenance: Provenance::Generator { seed: config.seed },
    })
}

/// Built-in generator then duplication in one step: `entity_count` people,
/// `config.duplicates_per_entity` records each.
pub fn generate_benchmark(
    entity_count: usize,
    config: &NoiseConfig,
) -> Result<Dataset, CorruptorError> {
    let base = generate_entities(entity_count, config.seed)?;
    generate_duplicates(&base, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn noise(typo: f64, drop: f64, dup: usize, seed: u64) -> NoiseConfig {
        NoiseConfig {
            typo_rate: typo,
            token_drop_rate: drop,
            duplicates_per_entity: dup,
            seed,
        }
    }

    #[test]
    fn zero_rates_are_identity() {
        let config = noise(0.0, 0.0, 1, 9);
        for text in ["Jane M. Doe", "2022 Sunset Dr", "a", ""] {
            assert_eq!(corrupt_text(text, &config), text);
        }
    }

    #[test]
    fn token_drops_keep_a_subsequence() {
        let input = "John Tim Joe";
        let mut saw_middle_drop = false;
        for seed in 0..200 {
            let out = corrupt_text(input, &noise(0.0, 0.4, 1, seed));
            let out_tokens: Vec<&str> = out.split_whitespace().collect();
            assert!(!out_tokens.is_empty());
            assert!(out_tokens.len() <= 3);
            let mut remaining = ["John", "Tim", "Joe"].iter();
            for token in &out_tokens {
                assert!(
                    remaining.any(|r| r == token),
                    "'{out}' is not a subsequence of '{input}'"
                );
            }
            if out == "John Joe" {
                saw_middle_drop = true;
            }
        }
        assert!(saw_middle_drop, "some seed should drop only the middle token");
    }

    #[test]
    fn full_drop_rate_still_keeps_one_token() {
        let input = "alpha beta gamma delta";
        let mut survivors = std::collections::BTreeSet::new();
        for seed in 0..50 {
            let out = corrupt_text(input, &noise(0.0, 1.0, 1, seed));
            let tokens: Vec<&str> = out.split_whitespace().collect();
            assert_eq!(tokens.len(), 1, "exactly one token must survive, got '{out}'");
            survivors.insert(tokens[0].to_string());
        }
        assert!(survivors.len() >= 2, "the forced keep should vary by seed");
    }

    #[test]
    fn full_typo_rate_alters_every_position() {
        // Adjacent characters are pairwise distinct, so transpositions are
        // visible at both positions.
        let input = "jane doe";
        for seed in 0..20 {
            let out = corrupt_text(input, &noise(1.0, 0.0, 1, seed));
            assert_eq!(out.chars().count(), input.chars().count());
            for (a, b) in input.chars().zip(out.chars()) {
                assert_ne!(a, b, "seed {seed}: position kept '{a}' in '{out}'");
            }
        }
    }

    #[test]
    fn corruption_is_deterministic_per_text_and_seed() {
        let config = noise(0.3, 0.3, 1, 77);
        let a = corrupt_text("Jane M. Doe 12 Oak St", &config);
        let b = corrupt_text("Jane M. Doe 12 Oak St", &config);
        assert_eq!(a, b);
        let other_seed = corrupt_text("Jane M. Doe 12 Oak St", &noise(0.3, 0.3, 1, 78));
        assert_ne!(a, other_seed, "different seeds should usually differ");
    }

    #[test]
    fn entity_generator_shape_and_determinism() {
        let a = generate_entities(50, 7).unwrap();
        assert_eq!(a.schema, PERSON_SCHEMA);
        assert_eq!(a.records.len(), 50);
        let ids: std::collections::BTreeSet<_> =
            a.records.iter().map(|r| r.record_id.as_str()).collect();
        assert_eq!(ids.len(), 50);
        for record in &a.records {
            assert!(record.truth_id.is_some());
            for (name, value) in &record.fields {
                let value = value.as_ref().unwrap_or_else(|| panic!("{name} missing"));
                assert!(!value.is_empty());
            }
            let zip = record.fields[2].1.as_ref().unwrap();
            assert_eq!(zip.len(), 5);
            assert!(zip.bytes().all(|b| b.is_ascii_digit()));
        }
        let b = generate_entities(50, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_entities(50, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn duplicate_counts_match_the_contract() {
        let base = generate_entities(50, 1).unwrap();
        let out = generate_duplicates(&base, &noise(0.02, 0.1, 3, 42)).unwrap();
        assert_eq!(out.records.len(), 150);
        let mut multiplicity: BTreeMap<&str, usize> = BTreeMap::new();
        for record in &out.records {
            *multiplicity
                .entry(record.truth_id.as_deref().unwrap())
                .or_default() += 1;
        }
        assert_eq!(multiplicity.len(), 50);
        assert!(multiplicity.values().all(|&m| m == 3));
        let ids: std::collections::BTreeSet<_> =
            out.records.iter().map(|r| r.record_id.as_str()).collect();
        assert_eq!(ids.len(), 150);
    }

    #[test]
    fn single_duplicate_emits_clean_base_only() {
        let base = generate_entities(10, 3).unwrap();
        let out = generate_duplicates(&base, &noise(0.5, 0.5, 1, 42)).unwrap();
        assert_eq!(out.records.len(), 10);
        for (base_rec, out_rec) in base.records.iter().zip(&out.records) {
            assert_eq!(out_rec.fields, base_rec.fields);
            assert_ne!(out_rec.record_id, base_rec.record_id);
        }
    }

    #[test]
    fn zero_noise_duplicates_serialize_identically() {
        let base = generate_entities(20, 5).unwrap();
        let out = generate_duplicates(&base, &noise(0.0, 0.0, 3, 11)).unwrap();
        let mut by_truth: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        for record in &out.records {
            by_truth
                .entry(record.truth_id.as_deref().unwrap())
                .or_default()
                .push(record.serialized_text());
        }
        for (truth, texts) in by_truth {
            assert!(
                texts.iter().all(|t| t == &texts[0]),
                "cluster {truth} is not string-equal"
            );
        }
    }

    #[test]
    fn heavy_corruption_never_empties_a_record() {
        let base = generate_entities(30, 9).unwrap();
        let out = generate_duplicates(&base, &noise(0.5, 0.9, 4, 13)).unwrap();
        assert_eq!(out.records.len(), 120);
        for record in &out.records {
            assert!(!record.serialized_text().is_empty(), "{} went empty", record.record_id);
        }
    }

    #[test]
    fn benchmark_regenerates_identically_from_its_seed() {
        let config = NoiseConfig::default();
        let a = generate_benchmark(50, &config).unwrap();
        let b = generate_benchmark(50, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truthless_base_records_use_record_id_as_cluster() {
        let base = Dataset {
            schema: vec!["name".into()],
            records: vec![Record {
                record_id: "r1".into(),
                truth_id: None,
                fields: vec![("name".into(), Some("Jane Doe".into()))],
            }],
            provenance: Provenance::Memory,
        };
        let out = generate_duplicates(&base, &noise(0.0, 0.0, 2, 4)).unwrap();
        assert_eq!(out.records.len(), 2);
        assert!(out.records.iter().all(|r| r.truth_id.as_deref() == Some("r1")));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = generate_entities(2, 0).unwrap();
        assert!(matches!(
            generate_duplicates(&base, &noise(1.5, 0.0, 2, 0)),
            Err(CorruptorError::InvalidConfig(_))
        ));
        assert!(matches!(
            generate_duplicates(&base, &noise(0.0, -0.1, 2, 0)),
            Err(CorruptorError::InvalidConfig(_))
        ));
        assert!(matches!(
            generate_duplicates(&base, &noise(0.0, 0.0, 0, 0)),
            Err(CorruptorError::InvalidConfig(_))
        ));
        let empty = Dataset {
            schema: vec!["name".into()],
            records: vec![],
            provenance: Provenance::Memory,
        };
        assert!(matches!(
            generate_duplicates(&empty, &NoiseConfig::default()),
            Err(CorruptorError::EmptyBaseSet)
        ));
        assert!(generate_entities(0, 1).is_err());
    }

    proptest! {
        #[test]
        fn corruption_keeps_at_least_one_token(
            words in proptest::collection::vec("[a-z]{1,8}", 1..6),
            typo in 0.0f64..1.0,
            drop in 0.0f64..1.0,
            seed in 0u64..1000,
        ) {
            let text = words.join(" ");
            let out = corrupt_text(&text, &noise(typo, drop, 1, seed));
            prop_assert!(!out.trim().is_empty());
            let replay = corrupt_text(&text, &noise(typo, drop, 1, seed));
            prop_assert_eq!(out, replay);
        }
    }
}
