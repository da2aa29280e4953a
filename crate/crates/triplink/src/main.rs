//! Command-line front end: each subcommand is one pipeline stage, and
//! `run` chains them all. Artifacts live under one output directory whose
//! manifest pins the config digest, so stages from different configs
//! cannot mix silently.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use triplink::config::{load_config, parse_config, FileConfig};
use triplink::corpus::Dataset;
use triplink::corruptor::generate_benchmark;
use triplink::encoder::{save_embeddings, Encoder, NgramEncoder};
use triplink::hash::derive_seed;
use triplink::matcher::{pair_features, predict, train_logreg, LogRegModel};
use triplink::report::render_table;
use triplink::train::train_encoder;
use triplink::triplets::{build_triplets, derive_pairs, PairSet, TripletSet};
use triplink::workflow::{
    block, cluster, config_digest, load_candidates, run_pipeline, save_candidates,
    DatasetSource, EdgeMode, PipelineConfig, PipelineOutput,
};

#[derive(Parser)]
#[command(
    name = "triplink",
    about = "Entity resolution with contrastively trained n-gram embeddings",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Global seed; overrides the config file and re-derives module seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config file (flat `key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory (default: config `out` key, then ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write into an output directory built from a different config.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark dataset to <out>/dataset.csv.
    Generate,
    /// Split the dataset and write triplet and pair CSVs per split.
    PrepareTriplets,
    /// Train the n-gram encoder on prepared triplets.
    TrainEmbedder,
    /// Embed every record with the trained encoder.
    Embed,
    /// Train the logistic-regression matcher on prepared training pairs.
    TrainMatcher,
    /// Run the full evaluation protocol and write reports plus a table.
    Evaluate,
    /// Write top-k candidate pairs for the whole dataset.
    Block,
    /// Cluster candidate pairs into entities.
    Cluster,
    /// Everything end to end: generate/load through reports and clusters.
    Run,
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

struct Workspace {
    config: PipelineConfig,
    out: PathBuf,
    digest: String,
    force: bool,
}

impl Workspace {
    fn path(&self, relative: &str) -> PathBuf {
        self.out.join(relative)
    }

    /// Create the output directory, enforcing the digest guard: an
    /// existing manifest with a different digest blocks the write unless
    /// --force was given.
    fn ensure_out(&self) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.out)
            .with_context(|| format!("stage workspace failed: cannot create {}", self.out.display()))?;
        let manifest_path = self.path("manifest.json");
        if manifest_path.exists() {
            let text = std::fs::read_to_string(&manifest_path)
                .with_context(|| "stage workspace failed: unreadable manifest".to_string())?;
            let manifest: serde_json::Value = serde_json::from_str(&text)
                .with_context(|| "stage workspace failed: malformed manifest".to_string())?;
            let existing = manifest
                .get("config_digest")
                .and_then(|v| v.as_str())
                .unwrap_or("");
            if existing != self.digest && !self.force {
                bail!(
                    "stage workspace failed: {} holds artifacts for config digest {existing}, \
                     this config is {}; pass --force to overwrite",
                    self.out.display(),
                    self.digest
                );
            }
        }
        let manifest = serde_json::json!({
            "config_digest": self.digest,
            "created": chrono::Utc::now().to_rfc3339(),
        });
        std::fs::write(
            &manifest_path,
            format!("{}\n", serde_json::to_string_pretty(&manifest).expect("static shape")),
        )
        .with_context(|| "stage workspace failed: cannot write manifest".to_string())?;
        Ok(())
    }

    fn subdir(&self, name: &str) -> anyhow::Result<PathBuf> {
        let dir = self.out.join(name);
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("stage workspace failed: cannot create {}", dir.display()))?;
        Ok(dir)
    }

    /// The source dataset: an explicit path, a previously generated
    /// <out>/dataset.csv, or a fresh in-memory generation.
    fn dataset(&self) -> anyhow::Result<Dataset> {
        match &self.config.source {
            DatasetSource::Path {
                path,
                id_column,
                truth_column,
            } => Dataset::load(path, id_column, truth_column.as_deref())
                .with_context(|| "stage load failed".to_string()),
            DatasetSource::Generator { entities, noise } => {
                let cached = self.path("dataset.csv");
                if cached.exists() {
                    Dataset::load(&cached, "record_id", Some("truth_id"))
                        .with_context(|| "stage load failed".to_string())
                } else {
                    generate_benchmark(*entities, noise)
                        .with_context(|| "stage generate failed".to_string())
                }
            }
        }
    }

    /// Column names for dataset CSVs: path sources keep their own, the
    /// generator uses the standard pair.
    fn columns(&self) -> (String, Option<String>) {
        match &self.config.source {
            DatasetSource::Path {
                id_column,
                truth_column,
                ..
            } => (id_column.clone(), truth_column.clone()),
            DatasetSource::Generator { .. } => ("record_id".into(), Some("truth_id".into())),
        }
    }

    fn save_dataset(&self, data: &Dataset, path: &Path) -> anyhow::Result<()> {
        let (id_column, truth_column) = self.columns();
        data.save(path, &id_column, truth_column.as_deref())
            .with_context(|| "stage save failed".to_string())
    }

    fn encoder(&self) -> anyhow::Result<NgramEncoder<f64>> {
        let path = self.path("models/encoder.txt");
        if !path.exists() {
            bail!(
                "stage load failed: {} is missing; run train-embedder first",
                path.display()
            );
        }
        NgramEncoder::load(&path).with_context(|| "stage load failed".to_string())
    }

    fn matcher(&self) -> anyhow::Result<LogRegModel<f64>> {
        let path = self.path("models/matcher.txt");
        if !path.exists() {
            bail!(
                "stage load failed: {} is missing; run train-matcher first",
                path.display()
            );
        }
        LogRegModel::load(&path).with_context(|| "stage load failed".to_string())
    }
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    let file_config: FileConfig = match &cli.config {
        Some(path) => load_config(path, cli.seed).with_context(|| "stage config failed".to_string())?,
        None => parse_config("", cli.seed).with_context(|| "stage config failed".to_string())?,
    };
    let out = cli
        .out
        .clone()
        .or(file_config.out_dir)
        .unwrap_or_else(|| PathBuf::from("out"));
    let workspace = Workspace {
        digest: config_digest(&file_config.pipeline),
        config: file_config.pipeline,
        out,
        force: cli.force,
    };

    match cli.command {
        Command::Generate => cmd_generate(&workspace),
        Command::PrepareTriplets => cmd_prepare_triplets(&workspace),
        Command::TrainEmbedder => cmd_train_embedder(&workspace),
        Command::Embed => cmd_embed(&workspace),
        Command::TrainMatcher => cmd_train_matcher(&workspace),
        Command::Evaluate => cmd_evaluate(&workspace),
        Command::Block => cmd_block(&workspace),
        Command::Cluster => cmd_cluster(&workspace),
        Command::Run => cmd_run(&workspace),
    }
}

fn log_written(path: &Path, detail: &str) {
    println!("wrote {} ({detail})", path.display());
}

fn cmd_generate(ws: &Workspace) -> anyhow::Result<()> {
    let DatasetSource::Generator { entities, noise } = &ws.config.source else {
        bail!("stage generate failed: config names a dataset path, nothing to generate");
    };
    let dataset =
        generate_benchmark(*entities, noise).with_context(|| "stage generate failed".to_string())?;
    ws.ensure_out()?;
    let path = ws.path("dataset.csv");
    ws.save_dataset(&dataset, &path)?;
    log_written(&path, &format!("{} records", dataset.records.len()));
    Ok(())
}

fn cmd_prepare_triplets(ws: &Workspace) -> anyhow::Result<()> {
    let dataset = ws.dataset()?;
    let (train, val, test) = dataset
        .split(&ws.config.split)
        .with_context(|| "stage split failed".to_string())?;
    ws.ensure_out()?;
    let splits_dir = ws.subdir("splits")?;
    let triplets_dir = ws.subdir("triplets")?;
    let pairs_dir = ws.subdir("pairs")?;

    for (name, data) in [("train", &train), ("val", &val), ("test", &test)] {
        let split_path = splits_dir.join(format!("{name}.csv"));
        ws.save_dataset(data, &split_path)?;
        log_written(&split_path, &format!("{} records", data.records.len()));

        // The validation split may legitimately be too small for triplets;
        // an empty set then simply disables model selection downstream.
        let seed = derive_seed(ws.config.seed, &format!("triplets/{name}"));
        let triplets = if data.records.is_empty() || name == "val" {
            build_triplets(data, seed).unwrap_or(TripletSet {
                triplets: Vec::new(),
                seed,
            })
        } else {
            build_triplets(data, seed).with_context(|| format!("stage triplets/{name} failed"))?
        };
        let triplet_path = triplets_dir.join(format!("{name}.csv"));
        triplets
            .save(&triplet_path)
            .with_context(|| format!("stage triplets/{name} failed"))?;
        log_written(&triplet_path, &format!("{} triplets", triplets.triplets.len()));

        let pairs = derive_pairs(&triplets);
        let pair_path = pairs_dir.join(format!("{name}.csv"));
        pairs
            .save(&pair_path)
            .with_context(|| format!("stage pairs/{name} failed"))?;
        log_written(&pair_path, &format!("{} pairs", pairs.pairs.len()));
    }
    Ok(())
}

fn load_triplets(path: &Path, required: bool) -> anyhow::Result<TripletSet> {
    if !path.exists() {
        if required {
            bail!(
                "stage load failed: {} is missing; run prepare-triplets first",
                path.display()
            );
        }
        return Ok(TripletSet {
            triplets: Vec::new(),
            seed: 0,
        });
    }
    TripletSet::load(path).with_context(|| "stage load failed".to_string())
}

fn cmd_train_embedder(ws: &Workspace) -> anyhow::Result<()> {
    let train = load_triplets(&ws.path("triplets/train.csv"), true)?;
    let val = load_triplets(&ws.path("triplets/val.csv"), false)?;
    let mut encoder = NgramEncoder::<f64>::init(ws.config.encoder.clone())
        .with_context(|| "stage encoder/init failed".to_string())?;
    let history = train_encoder(&mut encoder, &train, &val, &ws.config.train)
        .with_context(|| "stage encoder/train failed".to_string())?;
    ws.ensure_out()?;
    let models_dir = ws.subdir("models")?;
    let encoder_path = models_dir.join("encoder.txt");
    encoder
        .save(&encoder_path)
        .with_context(|| "stage encoder/save failed".to_string())?;
    log_written(&encoder_path, &format!("dim {}", ws.config.encoder.dim));
    let history_path = ws.path("history.csv");
    history
        .save(&history_path)
        .with_context(|| "stage encoder/save failed".to_string())?;
    log_written(&history_path, &format!("{} epochs", history.epochs.len()));
    Ok(())
}

fn cmd_embed(ws: &Workspace) -> anyhow::Result<()> {
    let dataset = ws.dataset()?;
    let encoder = ws.encoder()?;
    let mut rows = Vec::with_capacity(dataset.records.len());
    for record in &dataset.records {
        let vector = encoder
            .encode(&record.serialized_text())
            .with_context(|| "stage embed failed".to_string())?;
        rows.push((record.record_id.clone(), vector));
    }
    ws.ensure_out()?;
    let path = ws.path("embeddings.txt");
    save_embeddings(&path, encoder.dim(), &rows)
        .with_context(|| "stage embed failed".to_string())?;
    log_written(&path, &format!("{} embeddings", rows.len()));
    Ok(())
}

fn pair_matrix(
    encoder: &NgramEncoder<f64>,
    pairs: &PairSet,
) -> anyhow::Result<(Vec<Vec<f64>>, Vec<bool>)> {
    let mut features = Vec::with_capacity(pairs.pairs.len());
    let mut labels = Vec::with_capacity(pairs.pairs.len());
    for pair in &pairs.pairs {
        let a = encoder
            .encode(&pair.text1)
            .with_context(|| "stage features failed".to_string())?;
        let b = encoder
            .encode(&pair.text2)
            .with_context(|| "stage features failed".to_string())?;
        features.push(pair_features(&a, &b).with_context(|| "stage features failed".to_string())?);
        labels.push(pair.label == 1);
    }
    Ok((features, labels))
}

fn cmd_train_matcher(ws: &Workspace) -> anyhow::Result<()> {
    let pairs_path = ws.path("pairs/train.csv");
    if !pairs_path.exists() {
        bail!(
            "stage load failed: {} is missing; run prepare-triplets first",
            pairs_path.display()
        );
    }
    let pairs = PairSet::load(&pairs_path).with_context(|| "stage load failed".to_string())?;
    let encoder = ws.encoder()?;
    let (features, labels) = pair_matrix(&encoder, &pairs)?;
    let matcher = train_logreg(
        &features,
        &labels,
        ws.config.matcher_learning_rate,
        ws.config.matcher_epochs,
        ws.config.matcher_l2_lambda,
        derive_seed(ws.config.seed, "matcher"),
    )
    .and_then(|m| m.with_threshold(ws.config.matcher_threshold))
    .with_context(|| "stage matcher/train failed".to_string())?;
    ws.ensure_out()?;
    let models_dir = ws.subdir("models")?;
    let path = models_dir.join("matcher.txt");
    matcher
        .save(&path)
        .with_context(|| "stage matcher/save failed".to_string())?;
    log_written(&path, &format!("dim {}", matcher.dim()));
    Ok(())
}

fn write_reports(ws: &Workspace, output: &PipelineOutput<f64>) -> anyhow::Result<()> {
    let reports_dir = ws.subdir("reports")?;
    for report in &output.reports {
        let path = reports_dir.join(format!("{}-{}.json", report.model_name, report.split_name));
        std::fs::write(
            &path,
            format!(
                "{}\n",
                report.to_json().with_context(|| "stage report failed".to_string())?
            ),
        )
        .with_context(|| "stage report failed".to_string())?;
    }
    let table = render_table(&output.reports);
    let table_path = reports_dir.join("table.txt");
    std::fs::write(&table_path, format!("{table}\n"))
        .with_context(|| "stage report failed".to_string())?;
    log_written(&reports_dir, &format!("{} reports", output.reports.len()));
    println!("{table}");
    Ok(())
}

fn cmd_evaluate(ws: &Workspace) -> anyhow::Result<()> {
    let mut config = ws.config.clone();
    config.run_blocking = false;
    let output: PipelineOutput<f64> = run_pipeline(&config)?;
    ws.ensure_out()?;
    write_reports(ws, &output)?;
    Ok(())
}

fn cmd_block(ws: &Workspace) -> anyhow::Result<()> {
    let dataset = ws.dataset()?;
    let encoder = ws.encoder()?;
    let candidates = block(&encoder, &dataset, ws.config.blocking_k)
        .with_context(|| "stage block failed".to_string())?;
    ws.ensure_out()?;
    let path = ws.path("candidates.csv");
    save_candidates(&candidates, &path).with_context(|| "stage block failed".to_string())?;
    log_written(&path, &format!("{} pairs", candidates.len()));
    Ok(())
}

fn cmd_cluster(ws: &Workspace) -> anyhow::Result<()> {
    let candidates_path = ws.path("candidates.csv");
    if !candidates_path.exists() {
        bail!(
            "stage load failed: {} is missing; run block first",
            candidates_path.display()
        );
    }
    let candidates =
        load_candidates(&candidates_path).with_context(|| "stage load failed".to_string())?;
    let dataset = ws.dataset()?;

    let edges: Vec<(String, String)> = match ws.config.edge_mode {
        EdgeMode::CosineThreshold(t) => candidates
            .iter()
            .filter(|p| p.cosine >= t)
            .map(|p| (p.record_id_a.clone(), p.record_id_b.clone()))
            .collect(),
        EdgeMode::Matcher => {
            let encoder = ws.encoder()?;
            let matcher = ws.matcher()?;
            let mut embeddings: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            for record in &dataset.records {
                embeddings.insert(
                    &record.record_id,
                    encoder
                        .encode(&record.serialized_text())
                        .with_context(|| "stage cluster/edges failed".to_string())?,
                );
            }
            let mut edges = Vec::new();
            for pair in &candidates {
                let a = embeddings.get(pair.record_id_a.as_str()).ok_or_else(|| {
                    anyhow::anyhow!(
                        "stage cluster/edges failed: candidate id '{}' is not in the dataset",
                        pair.record_id_a
                    )
                })?;
                let b = embeddings.get(pair.record_id_b.as_str()).ok_or_else(|| {
                    anyhow::anyhow!(
                        "stage cluster/edges failed: candidate id '{}' is not in the dataset",
                        pair.record_id_b
                    )
                })?;
                let row = pair_features(a, b)
                    .with_context(|| "stage cluster/edges failed".to_string())?;
                if predict(&matcher, &row)
                    .with_context(|| "stage cluster/edges failed".to_string())?
                    .1
                {
                    edges.push((pair.record_id_a.clone(), pair.record_id_b.clone()));
                }
            }
            edges
        }
    };

    let ids: Vec<String> = dataset.records.iter().map(|r| r.record_id.clone()).collect();
    let assignment = cluster(&edges, &ids).with_context(|| "stage cluster failed".to_string())?;
    ws.ensure_out()?;
    let path = ws.path("clusters.csv");
    assignment
        .save(&path)
        .with_context(|| "stage cluster failed".to_string())?;
    log_written(&path, &format!("{} clusters", assignment.cluster_count()));
    Ok(())
}

fn cmd_run(ws: &Workspace) -> anyhow::Result<()> {
    let output: PipelineOutput<f64> = run_pipeline(&ws.config)?;
    ws.ensure_out()?;

    if matches!(ws.config.source, DatasetSource::Generator { .. }) {
        let path = ws.path("dataset.csv");
        ws.save_dataset(&output.dataset, &path)?;
        log_written(&path, &format!("{} records", output.dataset.records.len()));
    }

    let splits_dir = ws.subdir("splits")?;
    let triplets_dir = ws.subdir("triplets")?;
    let pairs_dir = ws.subdir("pairs")?;
    for (name, data, triplets) in [
        ("train", &output.train_data, &output.train_triplets),
        ("val", &output.val_data, &output.val_triplets),
        ("test", &output.test_data, &output.test_triplets),
    ] {
        ws.save_dataset(data, &splits_dir.join(format!("{name}.csv")))?;
        triplets
            .save(triplets_dir.join(format!("{name}.csv")))
            .with_context(|| "stage save failed".to_string())?;
    }
    output
        .train_pairs
        .save(pairs_dir.join("train.csv"))
        .with_context(|| "stage save failed".to_string())?;
    output
        .test_pairs
        .save(pairs_dir.join("test.csv"))
        .with_context(|| "stage save failed".to_string())?;

    let models_dir = ws.subdir("models")?;
    output
        .trained
        .save(models_dir.join("encoder.txt"))
        .with_context(|| "stage save failed".to_string())?;
    output
        .untrained
        .save(models_dir.join("encoder-untrained.txt"))
        .with_context(|| "stage save failed".to_string())?;
    for (name, matcher) in &output.matchers {
        matcher
            .save(models_dir.join(format!("matcher-{name}.txt")))
            .with_context(|| "stage save failed".to_string())?;
    }
    // The trained lane's matcher doubles as the standalone-stage artifact.
    output.matchers["trained"]
        .save(models_dir.join("matcher.txt"))
        .with_context(|| "stage save failed".to_string())?;
    output
        .history
        .save(ws.path("history.csv"))
        .with_context(|| "stage save failed".to_string())?;
    log_written(&models_dir, "encoders and matchers");

    if let Some(candidates) = &output.candidates {
        let path = ws.path("candidates.csv");
        save_candidates(candidates, &path).with_context(|| "stage save failed".to_string())?;
        log_written(&path, &format!("{} pairs", candidates.len()));
    }
    if let Some(clusters) = &output.clusters {
        let path = ws.path("clusters.csv");
        clusters
            .save(&path)
            .with_context(|| "stage save failed".to_string())?;
        log_written(&path, &format!("{} clusters", clusters.cluster_count()));
    }

    write_reports(ws, &output)?;
    if let Some((_, metrics)) = &output.edge_scores {
        println!("matched-edge pairwise F1 on test records: {:.4}", metrics.f1);
    }
    if let Some((_, metrics)) = &output.clustering_scores {
        println!(
            "clustering pairwise F1 on test records: {:.4}",
            metrics.f1
        );
    }
    Ok(())
}
