use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use revela_core::baselines::ReplugTrainer;
use revela_core::corpus::{
    merge_batch_files, parse_batches, parse_corpus, prepare_batches, shuffle_chunks_global, write_batches, TrainingBatch,
};
use revela_core::evalretrieval::{
    bm25_search, dense_search, embed_corpus, evaluate_run, load_run, rrf_fuse, save_run, write_run, Bm25Index, EvalReport,
    Metric, Qrels, RankedList, Run,
};
use revela_core::retriever::{Encoder, Role};
use revela_core::rng;
use revela_core::training::{
    gradcheck_setup, revela_gradcheck, write_metrics_line, Checkpoint, ModelPair, StepMetrics, Trainer,
};

use crate::config::{RunConfig, Settings};
use crate::error::{CliError, Context};
use crate::{apply_model_flags, resolve, settings, Command};

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Chunk {
            corpus,
            out,
            batch_size,
            max_words,
            random,
            merge,
            common,
        } => {
            let mut s = settings(&common)?;
            if let Some(b) = batch_size {
                s.set("data.batch_size", b);
            }
            if let Some(w) = max_words {
                s.set("data.max_words", w);
            }
            let cfg = resolve(&s)?;
            chunk(&cfg, corpus.as_deref(), &out, random, &merge)
        }
        Command::Train {
            batches,
            out,
            metrics,
            model,
            common,
        } => {
            let mut s = settings(&common)?;
            apply_model_flags(&mut s, &model);
            train(s, &batches, &out, metrics.as_deref())
        }
        Command::TrainReplug {
            batches,
            lm,
            out,
            metrics,
            steps,
            common,
        } => {
            let mut s = settings(&common)?;
            if let Some(n) = steps {
                s.set("replug.total_steps", n);
            }
            train_replug(s, &batches, &lm, &out, metrics.as_deref())
        }
        Command::Encode {
            checkpoint,
            corpus,
            role,
            out,
            common,
        } => {
            resolve(&settings(&common)?)?;
            let role: Role = role.parse()?;
            encode(&checkpoint, &corpus, role, &out)
        }
        Command::Search {
            checkpoint,
            bm25,
            corpus,
            queries,
            out,
            top_k,
            tag,
            common,
        } => {
            let mut s = settings(&common)?;
            if let Some(k) = top_k {
                s.set("eval.top_k", k);
            }
            let cfg = resolve(&s)?;
            let tag = tag.unwrap_or_else(|| if bm25 { "bm25".into() } else { "dense".into() });
            search(&cfg, checkpoint.as_deref(), &corpus, &queries, &out, &tag)
        }
        Command::Eval {
            run,
            qrels,
            metrics,
            out,
            common,
        } => {
            let mut s = settings(&common)?;
            if !metrics.is_empty() {
                s.set("eval.metrics", metrics);
            }
            let cfg = resolve(&s)?;
            eval(&cfg, &run, &qrels, out.as_deref())
        }
        Command::Fuse {
            run1,
            run2,
            out,
            rrf_k,
            depth,
            tag,
        } => fuse(&run1, &run2, out.as_deref(), rrf_k, depth, &tag),
        Command::Gradcheck {
            threshold,
            delta,
            common,
        } => {
            let mut s = settings(&common)?;
            if let Some(t) = threshold {
                s.set("gradcheck.threshold", t);
            }
            if let Some(d) = delta {
                s.set("gradcheck.delta", d);
            }
            gradcheck(&resolve(&s)?)
        }
    }
}

fn chunk(cfg: &RunConfig, corpus: Option<&Path>, out: &Path, random: bool, merge: &[std::path::PathBuf]) -> Result<(), CliError> {
    if cfg.data.batch_size < 2 {
        return Err(CliError::config("data.batch_size must be at least 2"));
    }
    if cfg.data.max_words == 0 {
        return Err(CliError::config("data.max_words must be positive"));
    }
    if corpus.is_none() && merge.is_empty() {
        return Err(CliError::config("chunk needs --corpus or --merge"));
    }
    let mut sources = Vec::new();
    if let Some(path) = corpus {
        let docs = parse_corpus(path).context(format!("reading corpus {}", path.display()))?;
        let mut batches = prepare_batches(&docs, cfg.data.max_words, cfg.data.batch_size);
        if random {
            batches = shuffle_chunks_global(&batches, cfg.seed);
        }
        log::info!("{} documents -> {} batches", docs.len(), batches.len());
        sources.push(batches);
    }
    for path in merge {
        sources.push(parse_batches(path).context(format!("reading batches {}", path.display()))?);
    }
    let batches = if merge.is_empty() {
        sources.pop().unwrap_or_default()
    } else {
        merge_batch_files(sources, cfg.seed)?
    };
    if batches.is_empty() {
        log::warn!("no complete batch could be formed");
    }
    write_batches(out, &batches).context(format!("writing {}", out.display()))?;
    Ok(())
}

fn load_batches(path: &Path) -> Result<Vec<TrainingBatch>, CliError> {
    let batches = parse_batches(path).context(format!("reading batches {}", path.display()))?;
    if batches.is_empty() {
        return Err(CliError::data(format!("{}: no batches", path.display())));
    }
    Ok(batches)
}

/// Without an explicit step count, one pass over the batch file.
fn one_pass_default(s: &mut Settings, section: &str, n_batches: usize) {
    let key = format!("{section}.total_steps");
    if !s.contains(&key) {
        s.set(&key, n_batches as u64);
    }
}

fn metrics_sink(path: Option<&Path>) -> Result<Option<BufWriter<File>>, CliError> {
    path.map(|p| File::create(p).map(BufWriter::new).context(format!("creating {}", p.display())))
        .transpose()
}

fn run_logged<F>(sink: &mut Option<BufWriter<File>>, total: u64, run: F) -> Result<(), CliError>
where
    F: FnOnce(&mut dyn FnMut(&StepMetrics)) -> revela_core::Result<Vec<StepMetrics>>,
{
    let mut write_err = None;
    let mut on_step = |m: &StepMetrics| {
        if let Some(w) = sink.as_mut() {
            if let Err(e) = write_metrics_line(w, m) {
                write_err.get_or_insert(e);
            }
        }
        if m.step == total || m.step.is_multiple_of(50) {
            log::info!("step {} loss {:.5} lr {:.3e} sim_entropy {:.4}", m.step, m.loss, m.lr, m.sim_entropy);
        }
    };
    run(&mut on_step)?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    if let Some(w) = sink.as_mut() {
        w.flush()?;
    }
    Ok(())
}

fn save_checkpoint(ck: &Checkpoint, out: &Path) -> Result<(), CliError> {
    ck.save(out).context(format!("writing checkpoint {}", out.display()))
}

fn train(mut s: Settings, batches: &Path, out: &Path, metrics: Option<&Path>) -> Result<(), CliError> {
    s.resolve()?;
    let data = load_batches(batches)?;
    one_pass_default(&mut s, "train", data.len());
    let cfg = resolve(&s)?;
    let mut trainer = Trainer::init(cfg.model.clone(), cfg.retriever.clone(), cfg.train.clone())?;
    let mut sink = metrics_sink(metrics)?;
    run_logged(&mut sink, cfg.train.total_steps, |f| trainer.run(&data, f))?;
    save_checkpoint(&trainer.checkpoint(cfg.snapshot())?, out)
}

fn load_models(path: &Path) -> Result<ModelPair, CliError> {
    let ck = Checkpoint::load(path).context(format!("reading checkpoint {}", path.display()))?;
    let (models, meta, _) = ModelPair::from_checkpoint(&ck).context(format!("loading checkpoint {}", path.display()))?;
    log::info!("loaded {} checkpoint at step {}", meta.kind, meta.step);
    Ok(models)
}

fn train_replug(mut s: Settings, batches: &Path, lm: &Path, out: &Path, metrics: Option<&Path>) -> Result<(), CliError> {
    s.resolve()?;
    let data = load_batches(batches)?;
    one_pass_default(&mut s, "replug", data.len());
    let cfg = resolve(&s)?;
    let frozen = load_models(lm)?;
    let retriever = Encoder::init(
        cfg.retriever.clone(),
        &mut rng::stream(cfg.seed, rng::purpose::RETRIEVER_INIT),
    )?;
    let models = ModelPair {
        lm_config: frozen.lm_config,
        lm: frozen.lm,
        retriever,
    };
    let mut trainer = ReplugTrainer::new(models, cfg.replug.clone())?;
    let mut sink = metrics_sink(metrics)?;
    run_logged(&mut sink, cfg.replug.total_steps, |f| trainer.run(&data, f))?;
    save_checkpoint(&trainer.checkpoint(cfg.snapshot())?, out)
}

#[derive(serde::Serialize)]
struct EmbeddingRecord<'a> {
    id: &'a str,
    embedding: &'a [f64],
}

fn encode(checkpoint: &Path, corpus: &Path, role: Role, out: &Path) -> Result<(), CliError> {
    let models = load_models(checkpoint)?;
    let docs = parse_corpus(corpus).context(format!("reading corpus {}", corpus.display()))?;
    let vecs = embed_corpus(&models.retriever, &docs, role)?;
    let mut w = BufWriter::new(File::create(out).context(format!("creating {}", out.display()))?);
    for (d, v) in docs.iter().zip(&vecs) {
        serde_json::to_writer(&mut w, &EmbeddingRecord { id: &d.id, embedding: v }).map_err(revela_core::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn search(cfg: &RunConfig, checkpoint: Option<&Path>, corpus: &Path, queries: &Path, out: &Path, tag: &str) -> Result<(), CliError> {
    if cfg.eval.top_k == 0 {
        return Err(CliError::config("eval.top_k must be positive"));
    }
    let docs = parse_corpus(corpus).context(format!("reading corpus {}", corpus.display()))?;
    let qs = parse_corpus(queries).context(format!("reading queries {}", queries.display()))?;
    let lists: Vec<RankedList> = match checkpoint {
        Some(path) => {
            let models = load_models(path)?;
            dense_search(&models.retriever, &qs, &docs, cfg.eval.top_k)?
        }
        None => {
            let index = Bm25Index::build(&docs);
            qs.iter().map(|q| bm25_search(&q.id, &q.text, &index, cfg.eval.top_k)).collect()
        }
    };
    let run: Run = lists.into_iter().map(|l| (l.query_id.clone(), l)).collect();
    save_run(out, &run, tag).context(format!("writing {}", out.display()))?;
    Ok(())
}

fn format_table(report: &EvalReport) -> String {
    let mut s = format!("{:<14} {:>10} {:>8}\n", "metric", "mean", "queries");
    for (name, mean) in &report.mean {
        s.push_str(&format!("{:<14} {:>10.4} {:>8}\n", name, mean, report.queries[name]));
    }
    s
}

fn eval(cfg: &RunConfig, run: &Path, qrels: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let metrics: Vec<Metric> = cfg
        .eval
        .metrics
        .iter()
        .map(|m| m.parse::<Metric>())
        .collect::<Result<_, _>>()?;
    if metrics.is_empty() {
        return Err(CliError::config("no metrics requested"));
    }
    let run = load_run(run).context(format!("reading run {}", run.display()))?;
    let qrels = Qrels::load(qrels).context(format!("reading qrels {}", qrels.display()))?;
    let report = evaluate_run(&run, &qrels, &metrics)?;
    print!("{}", format_table(&report));
    if let Some(path) = out {
        let mut w = BufWriter::new(File::create(path).context(format!("creating {}", path.display()))?);
        serde_json::to_writer_pretty(&mut w, &report).map_err(revela_core::Error::from)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    Ok(())
}

fn fuse(run1: &Path, run2: &Path, out: Option<&Path>, k: usize, depth: usize, tag: &str) -> Result<(), CliError> {
    if depth == 0 {
        return Err(CliError::config("--depth must be positive"));
    }
    let a = load_run(run1).context(format!("reading run {}", run1.display()))?;
    let b = load_run(run2).context(format!("reading run {}", run2.display()))?;
    let qids: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    let mut fused = Run::new();
    for qid in qids {
        let empty = RankedList {
            query_id: qid.clone(),
            entries: Vec::new(),
        };
        let l = rrf_fuse(a.get(qid).unwrap_or(&empty), b.get(qid).unwrap_or(&empty), k, depth)?;
        fused.insert(qid.clone(), l);
    }
    match out {
        Some(path) => save_run(path, &fused, tag).context(format!("writing {}", path.display()))?,
        None => {
            let mut lock = std::io::stdout().lock();
            let res = write_run(&mut lock, &fused, tag).and_then(|()| Ok(lock.flush()?));
            match res {
                Err(revela_core::Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                other => other?,
            }
        }
    }
    Ok(())
}

fn gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let g = &cfg.gradcheck;
    let (models, batch, train) = gradcheck_setup(g, cfg.seed)?;
    let report = revela_gradcheck(&models, &batch, &train, g.delta)?;
    println!(
        "max_rel_error {:e} over {} coordinates (worst {}: analytic {:e}, numeric {:e}); threshold {:e}",
        report.max_rel_error,
        report.coordinates,
        report.worst_coordinate,
        report.worst_analytic,
        report.worst_numeric,
        g.threshold
    );
    if report.max_rel_error.is_nan() || report.max_rel_error >= g.threshold {
        return Err(CliError::verify(format!(
            "gradient check failed: {:e} >= {:e}",
            report.max_rel_error, g.threshold
        )));
    }
    Ok(())
}
