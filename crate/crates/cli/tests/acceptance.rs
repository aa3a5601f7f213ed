//! Acceptance report: one PASS/FAIL line per criterion; exits nonzero if any
//! criterion fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::path::Path;
use std::time::Instant;

use clap::Parser;
use revela_cli::{apply_model_flags, Cli, Command};
use revela_core::corpus::synthetic::{topic_corpus, topic_of, TopicCorpusSpec};
use revela_core::corpus::{parse_batches, write_corpus, Document};
use revela_core::evalretrieval::{embed_corpus, roc_auc};
use revela_core::numkernel::Tape;
use revela_core::retriever::{Encoder, Role};
use revela_core::training::{gradcheck_setup, revela_gradcheck, Checkpoint, GradcheckConfig, ModelPair, Trainer, TrainConfig};
use revela_core::transformer::{lm_forward, ModelConfig};
use support::checks::{self, Check};

fn gradient_fidelity() -> Check {
    let cfg = GradcheckConfig::default();
    let start = Instant::now();
    let (models, batch, train) = gradcheck_setup(&cfg, 0).map_err(|e| e.to_string())?;
    let report = revela_gradcheck(&models, &batch, &train, 1e-5).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let summary = format!(
        "max relative error {:.2e} over {} parameters in {secs:.0}s",
        report.max_rel_error, report.coordinates
    );
    if report.max_rel_error < 1e-5 && secs < 120.0 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn v_normalization_with_flag() -> Check {
    let lib = checks::v_normalization(40)?;
    let cli = Cli::try_parse_from(["revela", "train", "--batches", "b", "--out", "o", "--no-vnorm"]).map_err(|e| e.to_string())?;
    let Command::Train { model, .. } = cli.command else {
        return Err("train did not parse".into());
    };
    let mut s = revela_cli::config::Settings::default();
    apply_model_flags(&mut s, &model);
    let resolved = s.resolve().map_err(|e| e.to_string())?;
    if resolved.model.v_normalization_enabled {
        return Err("--no-vnorm left V-normalization enabled".into());
    }
    Ok(format!("{lib}; --no-vnorm disables it"))
}

fn cli(args: &[&str]) -> Result<(), String> {
    let mut full = vec!["revela"];
    full.extend_from_slice(args);
    match revela_cli::run(full) {
        0 => Ok(()),
        code => Err(format!("`revela {}` exited with {code}", args.join(" "))),
    }
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

/// Same-document versus cross-document passage cosine AUC.
fn topic_auc(encoder: &Encoder, docs: &[Document]) -> Result<f64, String> {
    let z = embed_corpus(encoder, docs, Role::Passage).map_err(|e| e.to_string())?;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for i in 0..docs.len() {
        for j in i + 1..docs.len() {
            let s: f64 = z[i].iter().zip(&z[j]).map(|(a, b)| a * b).sum();
            if topic_of(&docs[i].id) == topic_of(&docs[j].id) {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
    }
    Ok(roc_auc(&pos, &neg))
}

fn load_pair(p: &str) -> Result<ModelPair, String> {
    let ck = Checkpoint::load(Path::new(p)).map_err(|e| e.to_string())?;
    Ok(ModelPair::from_checkpoint(&ck).map_err(|e| e.to_string())?.0)
}

const SYNTHETIC_CONFIG: &str = r#"{
  "seed": 0,
  "model.d_model": 32, "model.n_heads": 2, "model.n_layers": 2, "model.d_ff": 64,
  "model.max_seq_len": 96, "model.init_std": 0.07,
  "retriever.d_model": 32, "retriever.n_heads": 2, "retriever.n_layers": 2, "retriever.d_ff": 64,
  "retriever.max_seq_len": 96, "retriever.init_std": 0.02,
  "train.learning_rate": 0.003, "train.warmup_steps": 50, "train.total_steps": 500, "train.tau": 0.05,
  "data.batch_size": 4
}"#;

fn synthetic_learning() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let docs = topic_corpus(&TopicCorpusSpec::default());
    write_corpus(&d.join("corpus.jsonl"), &docs).map_err(|e| e.to_string())?;
    std::fs::write(d.join("cfg.json"), SYNTHETIC_CONFIG).map_err(|e| e.to_string())?;
    let (corpus, cfg) = (path(d, "corpus.jsonl"), path(d, "cfg.json"));
    let start = Instant::now();
    let mut auc = Vec::new();
    for (name, random) in [("seq", false), ("rnd", true)] {
        let (batches, model) = (path(d, &format!("{name}.jsonl")), path(d, &format!("{name}.ckpt")));
        let mut args = vec!["chunk", "--corpus", &corpus, "--out", &batches, "--config", &cfg];
        if random {
            args.push("--random");
        }
        cli(&args)?;
        cli(&["train", "--batches", &batches, "--out", &model, "--config", &cfg])?;
        auc.push(topic_auc(&load_pair(&model)?.retriever, &docs)?);
    }
    let secs = start.elapsed().as_secs_f64();
    let summary = format!(
        "AUC sequential {:.3} (need >= 0.70), random {:.3} (need <= 0.60), {secs:.0}s",
        auc[0], auc[1]
    );
    if auc[0] >= 0.70 && auc[1] <= 0.60 && secs < 900.0 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

const PIPELINE_CONFIG: &str = r#"{
  "seed": 11,
  "model.d_model": 8, "model.n_heads": 2, "model.n_layers": 1, "model.d_ff": 16, "model.max_seq_len": 64,
  "retriever.d_model": 8, "retriever.n_heads": 2, "retriever.n_layers": 1, "retriever.d_ff": 16, "retriever.max_seq_len": 64,
  "train.learning_rate": 0.003, "train.tau": 0.1,
  "data.batch_size": 4, "eval.top_k": 10
}"#;

fn pipeline_once(d: &Path, tag: &str) -> Result<Vec<Vec<u8>>, String> {
    let p = |n: &str| path(d, &format!("{tag}-{n}"));
    let (corpus, queries, qrels, cfg) = (path(d, "corpus.jsonl"), path(d, "queries.jsonl"), path(d, "qrels.tsv"), path(d, "cfg.json"));
    cli(&["chunk", "--corpus", &corpus, "--out", &p("batches.jsonl"), "--config", &cfg, "--random"])?;
    cli(&["train", "--batches", &p("batches.jsonl"), "--out", &p("model.ckpt"), "--metrics", &p("train.jsonl"), "--config", &cfg])?;
    cli(&["search", "--checkpoint", &p("model.ckpt"), "--corpus", &corpus, "--queries", &queries, "--out", &p("run.txt"), "--config", &cfg])?;
    cli(&["eval", "--run", &p("run.txt"), "--qrels", &qrels, "--out", &p("eval.json"), "--config", &cfg])?;
    ["batches.jsonl", "model.ckpt", "train.jsonl", "run.txt", "eval.json"]
        .iter()
        .map(|n| std::fs::read(p(n)).map_err(|e| e.to_string()))
        .collect()
}

fn checkpoint_roundtrip() -> Result<(), String> {
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        max_seq_len: 32,
        init_std: 0.2,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        learning_rate: 1e-2,
        warmup_steps: 1,
        total_steps: 3,
        tau: 0.1,
        seed: 5,
        ..TrainConfig::default()
    };
    let docs = topic_corpus(&TopicCorpusSpec {
        n_docs: 2,
        ..TopicCorpusSpec::default()
    });
    let batches = revela_core::corpus::prepare_batches(&docs, 20, 4);
    let mut trainer = Trainer::init(cfg.clone(), cfg.clone(), train).map_err(|e| e.to_string())?;
    trainer.run(&batches, |_| {}).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let file = dir.path().join("m.ckpt");
    trainer.checkpoint(serde_json::json!({})).and_then(|c| c.save(&file)).map_err(|e| e.to_string())?;
    let loaded = load_pair(&file.to_string_lossy())?;

    let forward = |m: &ModelPair| -> Result<Vec<f64>, String> {
        let texts: Vec<Vec<u32>> = batches[0].texts().iter().map(|t| t.bytes().take(30).map(u32::from).collect()).collect();
        let mut tape = Tape::new();
        let w = m.lm.bind(&mut tape);
        let sim = tape.constant(support::sim_tensor(&support::random_sim(texts.len(), &mut revela_core::rng::seeded(1))));
        let out = lm_forward(&mut tape, &w, &texts, sim, &m.lm_config).map_err(|e| e.to_string())?;
        let mut v: Vec<f64> = out.h_logits.iter().flat_map(|&x| tape.value(x).data().to_vec()).collect();
        for t in &texts {
            v.extend(m.retriever.embed_text(t, Role::Query).map_err(|e| e.to_string())?);
        }
        Ok(v)
    };
    let (a, b) = (forward(&trainer.models)?, forward(&loaded)?);
    if a.iter().map(|x| x.to_bits()).ne(b.iter().map(|x| x.to_bits())) {
        return Err("reloaded checkpoint gives different forward outputs".into());
    }
    Ok(())
}

fn pipeline_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let docs = topic_corpus(&TopicCorpusSpec {
        n_docs: 8,
        ..TopicCorpusSpec::default()
    });
    write_corpus(&d.join("corpus.jsonl"), &docs).map_err(|e| e.to_string())?;
    let queries: Vec<Document> = docs.iter().step_by(6).cloned().map(|mut q| {
        q.id = format!("q-{}", topic_of(&q.id));
        q
    }).collect();
    write_corpus(&d.join("queries.jsonl"), &queries).map_err(|e| e.to_string())?;
    let qrels: String = docs
        .iter()
        .filter(|p| !p.id.ends_with("-p0"))
        .map(|p| format!("q-{}\t{}\t1\n", topic_of(&p.id), p.id))
        .collect();
    std::fs::write(d.join("qrels.tsv"), qrels).map_err(|e| e.to_string())?;
    std::fs::write(d.join("cfg.json"), PIPELINE_CONFIG).map_err(|e| e.to_string())?;

    let first = pipeline_once(d, "a")?;
    let second = pipeline_once(d, "b")?;
    let names = ["batches", "checkpoint", "train metrics", "run", "eval metrics"];
    for ((x, y), n) in first.iter().zip(&second).zip(names) {
        if x != y {
            return Err(format!("{n} file differs between identical runs"));
        }
    }
    if parse_batches(&d.join("a-batches.jsonl")).map_err(|e| e.to_string())?.is_empty() {
        return Err("no batches produced".into());
    }
    checkpoint_roundtrip()?;
    Ok("chunk/train/search/eval byte-identical on rerun; reloaded checkpoint forward is bitwise equal".into())
}

fn main() {
    std::env::set_var("REVELA_LOG_LEVEL", "error");
    #[allow(clippy::type_complexity)]
    let criteria: Vec<(&str, Box<dyn Fn() -> Check>)> = vec![
        ("gradient fidelity", Box::new(gradient_fidelity)),
        ("equation oracle", Box::new(|| checks::equation_oracle(10))),
        ("similarity contract", Box::new(|| checks::similarity_contract(60))),
        ("V-normalization", Box::new(v_normalization_with_flag)),
        ("masking and causality", Box::new(|| checks::masking(20))),
        ("synthetic learning", Box::new(synthetic_learning)),
        ("REPLUG contract", Box::new(checks::replug_contract)),
        ("metric oracles", Box::new(|| checks::metric_oracles(100))),
        ("RRF", Box::new(|| checks::rrf_oracle(50))),
        ("pipeline determinism", Box::new(pipeline_determinism)),
        ("fused path", Box::new(|| checks::fused_path(5))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(s) => println!("PASS {:>2} {name}: {s}", i + 1),
            Err(s) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {s}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
