//! Flat `key = value` config files with section prefixes, e.g.
//! `train.margin = 0.2`. No nesting, no quoting; `#` starts a comment.
//!
//! Module seeds omitted from the file derive deterministically from the
//! global seed as hash64(global_seed, module_name), so one `seed` line
//! pins the whole pipeline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::corpus::SplitSpec;
use crate::corruptor::NoiseConfig;
use crate::encoder::EncoderConfig;
use crate::hash::derive_seed;
use crate::train::TrainConfig;
use crate::workflow::{DatasetSource, EdgeMode, PipelineConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("config line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// A parsed config file: the pipeline settings plus the file's optional
/// output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct FileConfig {
    pub pipeline: PipelineConfig,
    pub out_dir: Option<PathBuf>,
}

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "out",
    "dataset.path",
    "dataset.id_column",
    "dataset.truth_column",
    "generator.entities",
    "generator.typo_rate",
    "generator.token_drop_rate",
    "generator.duplicates_per_entity",
    "generator.seed",
    "split.train",
    "split.val",
    "split.test",
    "split.seed",
    "split.by_cluster",
    "encoder.dim",
    "encoder.buckets",
    "encoder.orders",
    "encoder.normalize",
    "encoder.seed",
    "train.margin",
    "train.batch_size",
    "train.epochs",
    "train.learning_rate",
    "train.shuffle_seed",
    "train.patience",
    "matcher.learning_rate",
    "matcher.epochs",
    "matcher.l2_lambda",
    "matcher.threshold",
    "blocking.k",
    "cluster.edge_mode",
    "run.blocking",
];

struct Entries {
    values: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Parse {
                line,
                reason: format!("expected 'key = value', found '{content}'"),
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey { line, key });
            }
            if values.insert(key.clone(), (line, value)).is_some() {
                return Err(ConfigError::Parse {
                    line,
                    reason: format!("duplicate key '{key}'"),
                });
            }
        }
        Ok(Entries { values })
    }

    fn take<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.values.get(key) {
            None => Ok(None),
            Some((line, value)) => value.parse::<T>().map(Some).map_err(|_| ConfigError::Parse {
                line: *line,
                reason: format!("bad value '{value}' for {key}"),
            }),
        }
    }

    fn take_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(_, v)| v.as_str())
    }

    fn has_prefix(&self, prefix: &str) -> bool {
        self.values.keys().any(|k| k.starts_with(prefix))
    }
}

/// Parse config text. `seed_override` (the `--seed` flag) replaces the
/// file's global seed before module seeds are derived from it.
pub fn parse_config(text: &str, seed_override: Option<u64>) -> Result<FileConfig, ConfigError> {
    let entries = Entries::parse(text)?;
    let defaults = PipelineConfig::default();

    let seed = seed_override
        .or(entries.take("seed")?)
        .unwrap_or(defaults.seed);

    let source = match (entries.take_str("dataset.path"), entries.has_prefix("generator.")) {
        (Some(_), true) => {
            return Err(ConfigError::Invalid(
                "config sets both dataset.path and generator.* keys; pick one source".into(),
            ))
        }
        (Some(path), false) => DatasetSource::Path {
            path: PathBuf::from(path),
            id_column: entries
                .take_str("dataset.id_column")
                .unwrap_or("record_id")
                .to_string(),
            truth_column: match entries.take_str("dataset.truth_column") {
                Some("none") => None,
                Some(column) => Some(column.to_string()),
                None => Some("truth_id".to_string()),
            },
        },
        (None, _) => DatasetSource::Generator {
            entities: entries.take("generator.entities")?.unwrap_or(50),
            noise: NoiseConfig {
                typo_rate: entries.take("generator.typo_rate")?.unwrap_or(0.02),
                token_drop_rate: entries.take("generator.token_drop_rate")?.unwrap_or(0.1),
                duplicates_per_entity: entries
                    .take("generator.duplicates_per_entity")?
                    .unwrap_or(3),
                seed: entries
                    .take("generator.seed")?
                    .unwrap_or_else(|| derive_seed(seed, "generator")),
            },
        },
    };

    let split = SplitSpec {
        train_fraction: entries.take("split.train")?.unwrap_or(0.6),
        val_fraction: entries.take("split.val")?.unwrap_or(0.2),
        test_fraction: entries.take("split.test")?.unwrap_or(0.2),
        seed: entries
            .take("split.seed")?
            .unwrap_or_else(|| derive_seed(seed, "split")),
        by_cluster: entries.take("split.by_cluster")?.unwrap_or(true),
    };

    let orders = match entries.take_str("encoder.orders") {
        None => vec![3, 4],
        Some(value) => value
            .split(',')
            .map(|part| {
                part.trim().parse::<usize>().map_err(|_| ConfigError::Invalid(
                    format!("bad encoder.orders entry '{part}'"),
                ))
            })
            .collect::<Result<_, _>>()?,
    };
    let encoder = EncoderConfig {
        dim: entries.take("encoder.dim")?.unwrap_or(64),
        bucket_count: entries.take("encoder.buckets")?.unwrap_or(65_536),
        ngram_orders: orders,
        normalize: entries.take("encoder.normalize")?.unwrap_or(true),
        seed: entries
            .take("encoder.seed")?
            .unwrap_or_else(|| derive_seed(seed, "encoder")),
    };

    let train = TrainConfig {
        margin: entries.take("train.margin")?.unwrap_or(0.2),
        batch_size: entries.take("train.batch_size")?.unwrap_or(64),
        epochs: entries.take("train.epochs")?.unwrap_or(10),
        learning_rate: entries.take("train.learning_rate")?.unwrap_or(0.05),
        shuffle_seed: entries
            .take("train.shuffle_seed")?
            .unwrap_or_else(|| derive_seed(seed, "train")),
        early_stop_patience: match entries.take_str("train.patience") {
            None | Some("none") => None,
            Some(_) => Some(entries.take::<usize>("train.patience")?.unwrap()),
        },
    };

    let edge_mode = match entries.take_str("cluster.edge_mode") {
        None | Some("matcher") => EdgeMode::Matcher,
        Some(value) => match value.strip_prefix("cosine:") {
            Some(threshold) => EdgeMode::CosineThreshold(threshold.parse().map_err(|_| {
                ConfigError::Invalid(format!("bad cosine threshold '{threshold}'"))
            })?),
            None => {
                return Err(ConfigError::Invalid(format!(
                    "cluster.edge_mode must be 'matcher' or 'cosine:<threshold>', got '{value}'"
                )))
            }
        },
    };

    let pipeline = PipelineConfig {
        source,
        split,
        encoder,
        train,
        matcher_learning_rate: entries.take("matcher.learning_rate")?.unwrap_or(0.1),
        matcher_epochs: entries.take("matcher.epochs")?.unwrap_or(300),
        matcher_l2_lambda: entries.take("matcher.l2_lambda")?.unwrap_or(1e-4),
        matcher_threshold: entries.take("matcher.threshold")?.unwrap_or(0.5),
        blocking_k: entries.take("blocking.k")?.unwrap_or(10),
        edge_mode,
        run_blocking: entries.take("run.blocking")?.unwrap_or(true),
        seed,
    };
    validate(&pipeline)?;

    Ok(FileConfig {
        pipeline,
        out_dir: entries.take_str("out").map(PathBuf::from),
    })
}

fn validate(config: &PipelineConfig) -> Result<(), ConfigError> {
    let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
    config.split.validate().map_err(|e| invalid(&e))?;
    config.encoder.validate().map_err(|e| invalid(&e))?;
    config.train.validate().map_err(|e| invalid(&e))?;
    if let DatasetSource::Generator { entities, noise } = &config.source {
        noise.validate().map_err(|e| invalid(&e))?;
        if *entities == 0 {
            return Err(ConfigError::Invalid("generator.entities must be at least 1".into()));
        }
    }
    if !(config.matcher_learning_rate.is_finite() && config.matcher_learning_rate >= 0.0) {
        return Err(ConfigError::Invalid(format!(
            "matcher.learning_rate must be finite and non-negative, got {}",
            config.matcher_learning_rate
        )));
    }
    if config.matcher_epochs == 0 {
        return Err(ConfigError::Invalid("matcher.epochs must be at least 1".into()));
    }
    if !(config.matcher_l2_lambda.is_finite() && config.matcher_l2_lambda >= 0.0) {
        return Err(ConfigError::Invalid(format!(
            "matcher.l2_lambda must be finite and non-negative, got {}",
            config.matcher_l2_lambda
        )));
    }
    if !(config.matcher_threshold > 0.0 && config.matcher_threshold < 1.0) {
        return Err(ConfigError::Invalid(format!(
            "matcher.threshold must lie strictly between 0 and 1, got {}",
            config.matcher_threshold
        )));
    }
    if config.blocking_k == 0 {
        return Err(ConfigError::Invalid("blocking.k must be at least 1".into()));
    }
    if let EdgeMode::CosineThreshold(t) = config.edge_mode {
        if !t.is_finite() {
            return Err(ConfigError::Invalid(format!(
                "cosine edge threshold must be finite, got {t}"
            )));
        }
    }
    Ok(())
}

pub fn load_config(
    path: impl AsRef<Path>,
    seed_override: Option<u64>,
) -> Result<FileConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text, seed_override)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults_with_derived_seeds() {
        let config = parse_config("", None).unwrap();
        let p = &config.pipeline;
        assert_eq!(p.seed, 42);
        assert_eq!(p.split.seed, derive_seed(42, "split"));
        assert_eq!(p.encoder.seed, derive_seed(42, "encoder"));
        assert_eq!(p.train.shuffle_seed, derive_seed(42, "train"));
        match &p.source {
            DatasetSource::Generator { entities, noise } => {
                assert_eq!(*entities, 50);
                assert_eq!(noise.seed, derive_seed(42, "generator"));
            }
            other => panic!("expected generator source, got {other:?}"),
        }
        assert!(config.out_dir.is_none());
    }

    #[test]
    fn seed_override_wins_and_rederives() {
        let config = parse_config("seed = 7\n", Some(99)).unwrap();
        assert_eq!(config.pipeline.seed, 99);
        assert_eq!(config.pipeline.split.seed, derive_seed(99, "split"));
    }

    #[test]
    fn explicit_module_seed_survives_override() {
        let config = parse_config("split.seed = 5\n", Some(99)).unwrap();
        assert_eq!(config.pipeline.split.seed, 5);
    }

    #[test]
    fn full_file_round_trips_every_section() {
        let text = "\
# benchmark run
seed = 11
out = runs/bench
generator.entities = 20
generator.typo_rate = 0.05
generator.token_drop_rate = 0.2
generator.duplicates_per_entity = 4
generator.seed = 3
split.train = 0.5
split.val = 0.25
split.test = 0.25
split.seed = 1
split.by_cluster = false
encoder.dim = 32
encoder.buckets = 4096
encoder.orders = 2, 3
encoder.normalize = true
encoder.seed = 2
train.margin = 0.3
train.batch_size = 16
train.epochs = 5
train.learning_rate = 0.1
train.shuffle_seed = 4
train.patience = 2
matcher.learning_rate = 0.2
matcher.epochs = 150
matcher.l2_lambda = 0.001
matcher.threshold = 0.6
blocking.k = 4
cluster.edge_mode = cosine:0.8
run.blocking = false
";
        let config = parse_config(text, None).unwrap();
        let p = &config.pipeline;
        assert_eq!(p.seed, 11);
        assert_eq!(config.out_dir.as_deref(), Some(Path::new("runs/bench")));
        assert_eq!(
            p.source,
            DatasetSource::Generator {
                entities: 20,
                noise: NoiseConfig {
                    typo_rate: 0.05,
                    token_drop_rate: 0.2,
                    duplicates_per_entity: 4,
                    seed: 3,
                },
            }
        );
        assert_eq!(p.split.train_fraction, 0.5);
        assert!(!p.split.by_cluster);
        assert_eq!(p.encoder.ngram_orders, vec![2, 3]);
        assert_eq!(p.train.early_stop_patience, Some(2));
        assert_eq!(p.matcher_threshold, 0.6);
        assert_eq!(p.edge_mode, EdgeMode::CosineThreshold(0.8));
        assert!(!p.run_blocking);
        assert_eq!(p.blocking_k, 4);
    }

    #[test]
    fn path_source_with_columns() {
        let text = "\
dataset.path = data/people.csv
dataset.id_column = id
dataset.truth_column = entity
";
        let config = parse_config(text, None).unwrap();
        assert_eq!(
            config.pipeline.source,
            DatasetSource::Path {
                path: PathBuf::from("data/people.csv"),
                id_column: "id".into(),
                truth_column: Some("entity".into()),
            }
        );

        let no_truth = parse_config(
            "dataset.path = x.csv\ndataset.truth_column = none\n",
            None,
        )
        .unwrap();
        match no_truth.pipeline.source {
            DatasetSource::Path { truth_column, .. } => assert_eq!(truth_column, None),
            other => panic!("expected path source, got {other:?}"),
        }
    }

    #[test]
    fn conflicting_sources_are_rejected() {
        let err = parse_config("dataset.path = x.csv\ngenerator.entities = 5\n", None)
            .unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }

    #[test]
    fn unknown_keys_and_syntax_errors_carry_line_numbers() {
        let err = parse_config("seed = 1\ntrain.momentum = 0.9\n", None).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: 2, ref key } if key == "train.momentum"));

        let err = parse_config("seed\n", None).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 1, .. }));

        let err = parse_config("seed = 1\nseed = 2\n", None).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 2, .. }));

        let err = parse_config("encoder.dim = tiny\n", None).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 1, .. }));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let config = parse_config("\n# a comment\nseed = 5 # trailing\n\n", None).unwrap();
        assert_eq!(config.pipeline.seed, 5);
    }

    #[test]
    fn semantic_validation_runs() {
        assert!(matches!(
            parse_config("matcher.threshold = 1.0\n", None),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            parse_config("split.train = 0.9\nsplit.val = 0.9\nsplit.test = 0.2\n", None),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            parse_config("blocking.k = 0\n", None),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            parse_config("generator.typo_rate = 1.5\n", None),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            parse_config("cluster.edge_mode = random\n", None),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn digest_is_stable_for_equal_configs_and_differs_across_seeds() {
        let a = parse_config("seed = 1\n", None).unwrap();
        let b = parse_config("# same\nseed = 1\n", None).unwrap();
        let c = parse_config("seed = 2\n", None).unwrap();
        use crate::workflow::config_digest;
        assert_eq!(config_digest(&a.pipeline), config_digest(&b.pipeline));
        assert_ne!(config_digest(&a.pipeline), config_digest(&c.pipeline));
    }
}
