//! Benchmark calibration probe: runs the pipeline over several seeds at two
//! training intensities and prints the quantities the acceptance thresholds
//! care about.

use triplink::encoder::Encoder;
use triplink::hash::derive_seed;
use triplink::report::cosine_similarity;
use triplink::workflow::{
    block, pair_recall, run_pipeline, truth_pairs, DatasetSource, PipelineConfig,
};
use triplink::NoiseConfig;

fn seeded_config(seed: u64, epochs: usize, margin: f64, k: usize) -> PipelineConfig {
    let mut config = PipelineConfig::default();
    config.seed = seed;
    config.source = DatasetSource::Generator {
        entities: 50,
        noise: NoiseConfig {
            seed: derive_seed(seed, "generator"),
            ..NoiseConfig::default()
        },
    };
    config.split.seed = derive_seed(seed, "split");
    config.encoder.seed = derive_seed(seed, "encoder");
    config.train.shuffle_seed = derive_seed(seed, "train");
    config.train.epochs = epochs;
    config.train.margin = margin;
    config.blocking_k = k;
    config
}

fn run_suite(epochs: usize, margin: f64, k: usize) {
    println!("==== epochs = {epochs} margin = {margin} k = {k} ====");
    let mut margins_untrained = Vec::new();
    let mut margins_tfidf = Vec::new();
    for seed in [42u64, 43, 44, 45, 46] {
        let config = seeded_config(seed, epochs, margin, k);
        let out = run_pipeline::<f64>(&config).expect("pipeline");

        let f1 = |model: &str| {
            out.reports
                .iter()
                .find(|r| r.model_name == model && r.split_name == "test")
                .map(|r| r.metrics.f1)
                .unwrap()
        };
        let trained = f1("trained");
        let untrained = f1("untrained");
        let tfidf = f1("tfidf");
        margins_untrained.push(trained - untrained);
        margins_tfidf.push(trained - tfidf);

        let final_val_rel = out.history.epochs.last().unwrap().val_relative_acc;
        let first = &out.history.epochs[0];
        let last = out.history.epochs.last().unwrap();
        let activity = format!(
            "loss {:.4}->{:.4} active {:.2}->{:.2}",
            first.mean_loss, last.mean_loss, first.active_fraction, last.active_fraction
        );
        let val_rel: Vec<f64> = out.history.epochs.iter().map(|e| e.val_relative_acc).collect();
        let val_thr: Vec<f64> = out.history.epochs.iter().map(|e| e.val_threshold_acc).collect();
        println!("  val_rel {:.3?}", &val_rel[..val_rel.len().min(12)]);
        println!("  val_thr {:.3?}", &val_thr[..val_thr.len().min(12)]);

        // Blocking recall on the full benchmark at several k.
        let truths = truth_pairs(&out.dataset);
        let mut recalls = Vec::new();
        for k in [1usize, 2, 5, 10] {
            let cands = block(&out.trained, &out.dataset, k).expect("block");
            recalls.push(pair_recall(&cands, &truths));
        }

        let edge = out
            .edge_scores
            .as_ref()
            .map(|(_, m)| format!("{:.3}/{:.3}/{:.3}", m.precision, m.recall, m.f1))
            .unwrap_or_default();
        let cluster = out
            .clustering_scores
            .as_ref()
            .map(|(_, m)| format!("{:.3}/{:.3}/{:.3}", m.precision, m.recall, m.f1))
            .unwrap_or_default();

        // Raw cosine separation of the test pairs per lane.
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let mut lane_stats = Vec::new();
        for lane in ["trained", "untrained", "tfidf"] {
            let enc: &dyn Encoder<f64> = match lane {
                "trained" => &out.trained,
                "untrained" => &out.untrained,
                _ => &out.tfidf,
            };
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for pair in &out.test_pairs.pairs {
                let a = enc.encode(&pair.text1).unwrap();
                let b = enc.encode(&pair.text2).unwrap();
                let c = cosine_similarity(&a, &b).unwrap();
                if pair.label == 1 {
                    pos.push(c);
                } else {
                    neg.push(c);
                }
            }
            lane_stats.push(format!("{lane} pos {:.3} neg {:.3}", mean(&pos), mean(&neg)));
        }

        println!(
            "seed {seed}: F1 trained {trained:.4} untrained {untrained:.4} tfidf {tfidf:.4} \
             | val_rel(final) {final_val_rel:.4} | {activity} | recall@k {recalls:.4?} \
             | edge p/r/f {edge} cluster p/r/f {cluster}\n  cos: {}",
            lane_stats.join(" | "),
        );
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "margin over untrained: avg {:.2} pts, over tfidf: avg {:.2} pts (need >= 3)",
        100.0 * avg(&margins_untrained),
        100.0 * avg(&margins_tfidf),
    );
}

fn geometry() {
    use triplink::corruptor::generate_benchmark;
    use triplink::encoder::{EncoderConfig, NgramEncoder};
    let data = generate_benchmark(50, &NoiseConfig::default()).expect("benchmark");
    let enc = NgramEncoder::<f64>::init(EncoderConfig::default()).expect("encoder");
    let embed: Vec<(String, Vec<f64>, String)> = data
        .records
        .iter()
        .map(|r| {
            let name = r.fields[0].1.clone().unwrap_or_default();
            (
                r.truth_id.clone().unwrap(),
                enc.encode(&r.serialized_text()).unwrap(),
                name,
            )
        })
        .collect();
    let mut pos = Vec::new();
    let mut twin = Vec::new();
    let mut cross = Vec::new();
    // Clean records are every third (variant 0); twins share the clean name.
    for i in 0..embed.len() {
        for j in (i + 1)..embed.len() {
            let c = cosine_similarity(&embed[i].1, &embed[j].1).unwrap();
            if embed[i].0 == embed[j].0 {
                pos.push(c);
            } else if i % 3 == 0 && j % 3 == 0 {
                // Clean-clean pair: same name unit means twin.
                let last = |s: &str| s.split_whitespace().last().unwrap_or("").to_string();
                if last(&embed[i].2) == last(&embed[j].2) {
                    twin.push(c);
                } else {
                    cross.push(c);
                }
            }
        }
    }
    let stats = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if v.is_empty() {
            return "none".to_string();
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        format!(
            "n={} mean {:.3} min {:.3} p10 {:.3} p90 {:.3} max {:.3}",
            v.len(),
            mean,
            v[0],
            v[v.len() / 10],
            v[v.len() * 9 / 10],
            v[v.len() - 1]
        )
    };
    println!("init geometry (seed-42 benchmark, default encoder):");
    println!("  pos   {}", stats(&mut pos));
    println!("  twin  {}", stats(&mut twin));
    println!("  cross {}", stats(&mut cross));
}

fn main() {
    geometry();
    run_suite(60, 1.4, 3);
    run_suite(100, 1.8, 3);
    run_suite(150, 1.8, 3);

    // Error anatomy at seed 42, intensified training.
    let out = run_pipeline::<f64>(&seeded_config(42, 100, 1.8, 3)).expect("pipeline");

    // Generalization check: clean-record cross cosines grouped by how many
    // name tokens the pair shares and by split membership.
    let clean: Vec<(&str, Vec<&str>, Vec<f64>)> = out
        .dataset
        .records
        .iter()
        .filter(|r| r.record_id.ends_with("-d0"))
        .map(|r| {
            let text = r.fields[0].1.as_deref().unwrap();
            let split = if out.train_data.records.iter().any(|t| t.record_id == r.record_id) {
                "train"
            } else if out.test_data.records.iter().any(|t| t.record_id == r.record_id) {
                "test"
            } else {
                "val"
            };
            (
                split,
                text.split_whitespace().collect(),
                out.trained.encode(&r.serialized_text()).unwrap(),
            )
        })
        .collect();
    let mut groups: std::collections::BTreeMap<(usize, &str), Vec<f64>> =
        std::collections::BTreeMap::new();
    for i in 0..clean.len() {
        for j in i + 1..clean.len() {
            let (sa, ta, va) = &clean[i];
            let (sb, tb, vb) = &clean[j];
            let shared = ta.iter().filter(|t| tb.contains(t)).count();
            if ta == tb {
                continue;
            }
            let pairing = match (*sa, *sb) {
                ("train", "train") => "train/train",
                ("test", "test") => "test/test",
                _ => "mixed",
            };
            groups
                .entry((shared, pairing))
                .or_default()
                .push(cosine_similarity(va, vb).unwrap());
        }
    }
    println!("-- clean cross cosines by (shared name tokens, split pairing):");
    for ((shared, pairing), vals) in &groups {
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let max = vals.iter().cloned().fold(f64::MIN, f64::max);
        println!(
            "  shared={shared} {pairing:<11} n={:<4} mean {mean:.3} max {max:.3}",
            vals.len()
        );
    }

    // Which blocked candidate pairs become wrong edges.
    let matcher = &out.matchers["trained"];
    let truth: std::collections::BTreeMap<&str, &str> = out
        .test_data
        .records
        .iter()
        .map(|r| (r.record_id.as_str(), r.truth_id.as_deref().unwrap()))
        .collect();
    let text: std::collections::BTreeMap<&str, String> = out
        .test_data
        .records
        .iter()
        .map(|r| (r.record_id.as_str(), r.serialized_text()))
        .collect();
    println!("-- blocked edge decisions (seed 42, k=3):");
    for pair in out.candidates.as_ref().unwrap() {
        let a = out.trained.encode(&text[pair.record_id_a.as_str()]).unwrap();
        let b = out.trained.encode(&text[pair.record_id_b.as_str()]).unwrap();
        let row = triplink::pair_features(&a, &b).unwrap();
        let (p, accept) = triplink::predict(matcher, &row).unwrap();
        let same = truth[pair.record_id_a.as_str()] == truth[pair.record_id_b.as_str()];
        if accept != same {
            let kind = if same { "FN-edge" } else { "FP-edge" };
            println!(
                "  {kind} p={p:.3} cos={:.3}\n    [{}]\n    [{}]",
                pair.cosine,
                text[pair.record_id_a.as_str()],
                text[pair.record_id_b.as_str()],
            );
        }
    }
    for lane in ["trained", "untrained", "tfidf"] {
        let enc: &dyn Encoder<f64> = match lane {
            "trained" => &out.trained,
            "untrained" => &out.untrained,
            _ => &out.tfidf,
        };
        let matcher = &out.matchers[lane];
        println!("-- {lane} errors on test pairs:");
        for pair in &out.test_pairs.pairs {
            let a = enc.encode(&pair.text1).unwrap();
            let b = enc.encode(&pair.text2).unwrap();
            let row = triplink::pair_features(&a, &b).unwrap();
            let (p, label) = triplink::predict(matcher, &row).unwrap();
            if (pair.label == 1) != label {
                let cos = cosine_similarity(&a, &b).unwrap();
                println!(
                    "  y={} p={p:.3} cos={cos:.3}\n    [{}]\n    [{}]",
                    pair.label, pair.text1, pair.text2
                );
            }
        }
    }
}
