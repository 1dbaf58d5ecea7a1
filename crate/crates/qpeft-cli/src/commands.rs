//! Command implementations. Each command reads the inputs named by its
//! resolved settings, writes artifacts only under the output directory, and
//! finishes by writing a `run.log` with the resolved settings and counters.
//! Identical settings produce byte-identical outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

use qpeft::bm25::{search, InvertedIndex, ScoredRun};
use qpeft::evalrank::{
    emit_csv, hit_at_k, hit_at_k_from_qrels, recall_at_k, report, rerank, Exemplar, PromptPreset,
    ScoreMode, ScoreSetup,
};
use qpeft::minilm::{pretrain_lm, LMConfig, LMParams};
use qpeft::numcore::{finite_diff_check, Adam, AdamConfig, GradMap, ParamStore, Scalar, Tape};
use qpeft::qdmodule::{init_qd_params, QDConfig, QDParams, QDVariant};
use qpeft::textdata::{
    load_answers, load_corpus, load_qrels, load_queries, make_synthetic_dataset, tokenize,
    tokenize_queries, Corpus, Dataset, Instance, Qrels, Query, Vocab,
};
use qpeft::trainer::{
    fit, load_checkpoint, log_to_csv, loss_total_node, save_checkpoint, Checkpoint, ModelRefs,
    TrainConfig,
};

use crate::settings::Settings;

/// Run a generic command body at the configured floating-point precision
/// (f64 by default, f32 opt-in).
macro_rules! with_precision {
    ($settings:expr, $body:ident) => {
        match $settings.str("precision") {
            "f64" => $body::<f64>($settings),
            "f32" => $body::<f32>($settings),
            other => anyhow::bail!("precision must be \"f64\" or \"f32\", got {other:?}"),
        }
    };
}

/// Dispatch a resolved command by name.
pub fn run(settings: &Settings) -> Result<()> {
    match settings.command() {
        "synth" => cmd_synth(settings),
        "build-vocab" => cmd_build_vocab(settings),
        "pretrain-lm" => with_precision!(settings, pretrain_lm_impl),
        "index" => cmd_index(settings),
        "retrieve" => cmd_retrieve(settings),
        "train" => with_precision!(settings, train_impl),
        "rerank" => with_precision!(settings, rerank_impl),
        "eval" => cmd_eval(settings),
        "gradcheck" => with_precision!(settings, gradcheck_impl),
        "sweep" => with_precision!(settings, sweep_impl),
        other => bail!("unknown command {other:?}"),
    }
}

// --- parsing helpers --------------------------------------------------------

fn parse_variant(raw: &str) -> Result<QDVariant> {
    match raw {
        "r" => Ok(QDVariant::R),
        "a" => Ok(QDVariant::A),
        other => bail!("variant must be \"r\" or \"a\", got {other:?}"),
    }
}

fn variant_label(v: QDVariant) -> &'static str {
    match v {
        QDVariant::R => "r",
        QDVariant::A => "a",
    }
}

fn parse_prompt(raw: &str) -> Result<PromptPreset> {
    raw.parse::<PromptPreset>()
        .map_err(|e| anyhow::anyhow!("{e}"))
}

fn parse_mode(raw: &str) -> Result<ScoreMode> {
    raw.parse::<ScoreMode>().map_err(|e| anyhow::anyhow!("{e}"))
}

fn qd_config_from(s: &Settings) -> Result<QDConfig> {
    Ok(QDConfig {
        variant: parse_variant(s.str("variant"))?,
        k: s.usize("k")?,
        heads: s.usize("heads")?,
        mlp_layers: s.usize("mlp-layers")?,
    })
}

fn lm_config_from(s: &Settings, vocab_size: usize) -> Result<LMConfig> {
    Ok(LMConfig {
        vocab_size,
        model_dim: s.usize("model-dim")?,
        layers: s.usize("lm-layers")?,
        heads: s.usize("lm-heads")?,
        ffn_dim: s.usize("ffn-dim")?,
        max_seq_len: s.usize("max-seq-len")?,
        seed: s.u64("seed")?,
    })
}

fn train_config_from(s: &Settings) -> Result<TrainConfig> {
    Ok(TrainConfig {
        batch_size: s.usize("batch-size")?,
        max_epochs: s.usize("max-epochs")?,
        patience: s.usize("patience")?,
        lr: s.f64("lr")?,
        train_size: s.opt_usize("train-size")?,
        eval_size: s.opt_usize("eval-size")?,
        seed: s.u64("seed")?,
        prompt: parse_prompt(s.str("prompt"))?,
    })
}

// --- input loading ----------------------------------------------------------

fn load_vocab_file(s: &Settings) -> Result<Vocab> {
    let path = s.require_file("vocab")?;
    Ok(Vocab::load(&path)?)
}

fn load_corpus_tokenized(s: &Settings, vocab: &Vocab) -> Result<Corpus> {
    let path = s.require_file("corpus")?;
    let mut corpus = load_corpus(&path)?;
    corpus.tokenize_all(vocab);
    Ok(corpus)
}

fn load_query_file(path: &Path, vocab: &Vocab) -> Result<Vec<Query>> {
    let mut queries = load_queries(path)?;
    tokenize_queries(&mut queries, vocab);
    Ok(queries)
}

/// Load a checkpoint into a fresh store and rebind the LM handles. The LM
/// tensors come back frozen regardless of how they were saved: everything a
/// checkpoint restores is held fixed unless a command re-marks it.
fn read_lm_checkpoint<S: Scalar>(path: &Path) -> Result<(ParamStore<S>, LMConfig, LMParams, Checkpoint)> {
    let ckpt = load_checkpoint(path)?;
    let lm_value = ckpt
        .configs
        .get("lm")
        .cloned()
        .with_context(|| format!("checkpoint {} has no lm config", path.display()))?;
    let lm_config: LMConfig = serde_json::from_value(lm_value)
        .with_context(|| format!("checkpoint {}: bad lm config", path.display()))?;
    let mut store: ParamStore<S> = ParamStore::new();
    ckpt.insert_into(&mut store)?;
    store.freeze_all();
    let lm_params = LMParams::from_store(&store, &lm_config)?;
    Ok((store, lm_config, lm_params, ckpt))
}

fn check_vocab_matches(lm_config: &LMConfig, vocab: &Vocab) -> Result<()> {
    if lm_config.vocab_size != vocab.len() {
        bail!(
            "checkpoint was built for a vocabulary of {} entries but the vocab file has {}",
            lm_config.vocab_size,
            vocab.len()
        );
    }
    Ok(())
}

// --- dataset assembly -------------------------------------------------------

struct BuiltDataset {
    dataset: Dataset,
    skipped_no_relevant: usize,
    skipped_no_candidates: usize,
    skipped_no_negatives: usize,
}

/// Build training instances: the positive is the query's first relevant
/// document (by id order), negatives are the top non-relevant candidates
/// from the query's first-stage run. Queries that cannot form a full
/// instance are skipped and counted.
fn build_train_dataset(
    split: &str,
    corpus: &Corpus,
    queries: &[Query],
    qrels: &Qrels,
    run: &ScoredRun,
    n_negatives: usize,
    vocab: &Vocab,
) -> Result<BuiltDataset> {
    let mut instances = Vec::new();
    let (mut no_rel, mut no_cand, mut no_neg) = (0usize, 0usize, 0usize);
    for q in queries {
        let relevant = qrels.relevant_docs(&q.query_id);
        let Some(&pos_id) = relevant.first() else {
            no_rel += 1;
            continue;
        };
        let Some(cands) = run.get(&q.query_id) else {
            no_cand += 1;
            continue;
        };
        let mut negatives = Vec::new();
        for (doc_id, _) in cands {
            if negatives.len() == n_negatives {
                break;
            }
            if qrels.is_relevant(&q.query_id, doc_id) {
                continue;
            }
            let doc = corpus
                .get(doc_id)
                .with_context(|| format!("run names unknown document {doc_id:?}"))?;
            negatives.push(doc.clone());
        }
        if negatives.is_empty() {
            no_neg += 1;
            continue;
        }
        let positive = corpus
            .get(pos_id)
            .with_context(|| format!("qrels name unknown document {pos_id:?}"))?
            .clone();
        instances.push(Instance::new(&q.query_id, &q.text, positive, negatives)?);
    }
    let mut dataset = Dataset::new(split, instances)?;
    dataset.tokenize_all(vocab);
    Ok(BuiltDataset {
        dataset,
        skipped_no_relevant: no_rel,
        skipped_no_candidates: no_cand,
        skipped_no_negatives: no_neg,
    })
}

/// Build evaluation instances: query plus its first relevant document, no
/// negatives (model selection only reranks candidate lists).
fn build_eval_dataset(
    split: &str,
    corpus: &Corpus,
    queries: &[Query],
    qrels: &Qrels,
    vocab: &Vocab,
) -> Result<(Dataset, usize)> {
    let mut instances = Vec::new();
    let mut skipped = 0usize;
    for q in queries {
        let relevant = qrels.relevant_docs(&q.query_id);
        let Some(&pos_id) = relevant.first() else {
            skipped += 1;
            continue;
        };
        let positive = corpus
            .get(pos_id)
            .with_context(|| format!("qrels name unknown document {pos_id:?}"))?
            .clone();
        instances.push(Instance::new(&q.query_id, &q.text, positive, Vec::new())?);
    }
    let mut dataset = Dataset::new(split, instances)?;
    dataset.tokenize_all(vocab);
    Ok((dataset, skipped))
}

/// Pick the in-context exemplar: the first query in file order with at
/// least one relevant document, paired with its first relevant document.
fn build_exemplar(
    corpus: &Corpus,
    queries: &[Query],
    qrels: &Qrels,
) -> Result<(Exemplar, String)> {
    for q in queries {
        let relevant = qrels.relevant_docs(&q.query_id);
        if let Some(&doc_id) = relevant.first() {
            let doc = corpus
                .get(doc_id)
                .with_context(|| format!("qrels name unknown document {doc_id:?}"))?;
            return Ok((
                Exemplar {
                    doc_ids: doc.token_ids.clone(),
                    query_ids: q.token_ids.clone(),
                },
                format!("{} + {}", q.query_id, doc_id),
            ));
        }
    }
    bail!("no query with a relevant document to use as the exemplar");
}

// --- data generation and plain-text artifacts -------------------------------

fn cmd_synth(s: &Settings) -> Result<()> {
    let out = s.out_dir()?;
    let synth = make_synthetic_dataset(
        s.u64("seed")?,
        s.usize("num-docs")?,
        s.usize("num-queries")?,
        s.usize("synth-vocab")?,
        s.usize("negatives")?,
    )?;
    synth.write_files(&out)?;
    let notes = vec![
        format!("documents = {}", synth.corpus.len()),
        format!(
            "queries train/eval/test = {}/{}/{}",
            synth.train.len(),
            synth.eval.len(),
            synth.test.len()
        ),
    ];
    s.write_run_log(&out, &notes)?;
    println!(
        "wrote synthetic dataset: {} documents, {}/{}/{} train/eval/test queries -> {}",
        synth.corpus.len(),
        synth.train.len(),
        synth.eval.len(),
        synth.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_build_vocab(s: &Settings) -> Result<()> {
    let out = s.out_dir()?;
    let corpus = load_corpus(&s.require_file("corpus")?)?;
    let mut queries = Vec::new();
    for path in s.file_list("queries")? {
        queries.extend(load_queries(&path)?);
    }
    let vocab = Vocab::build(&corpus, &queries, s.usize("vocab-max")?)?;
    vocab.save(&out.join("vocab.tsv"))?;
    let notes = vec![format!("vocab size = {}", vocab.len())];
    s.write_run_log(&out, &notes)?;
    println!("wrote vocabulary of {} entries -> {}", vocab.len(), out.join("vocab.tsv").display());
    Ok(())
}

fn cmd_index(s: &Settings) -> Result<()> {
    let out = s.out_dir()?;
    let vocab = load_vocab_file(s)?;
    let corpus = load_corpus_tokenized(s, &vocab)?;
    let index = InvertedIndex::build(&corpus)?;

    let mut text = String::new();
    let _ = writeln!(text, "# n_docs={} avgdl={:.6}", index.n_docs(), index.avgdl());
    for i in 0..index.n_docs() {
        let _ = writeln!(text, "doc\t{i}\t{}\t{}", index.doc_id(i), index.doc_len(i));
    }
    let mut postings_count = 0usize;
    let mut tokens_count = 0usize;
    for tok in 0..vocab.len() {
        let postings = index.postings(tok);
        if postings.is_empty() {
            continue;
        }
        tokens_count += 1;
        for &(doc, tf) in postings {
            let _ = writeln!(text, "post\t{tok}\t{doc}\t{tf}");
            postings_count += 1;
        }
    }
    fs::write(out.join("index.tsv"), text)?;
    let notes = vec![
        format!("documents = {}", index.n_docs()),
        format!("tokens with postings = {tokens_count}"),
        format!("postings = {postings_count}"),
    ];
    s.write_run_log(&out, &notes)?;
    println!(
        "wrote inverted index: {} documents, {} postings -> {}",
        index.n_docs(),
        postings_count,
        out.join("index.tsv").display()
    );
    Ok(())
}

fn cmd_retrieve(s: &Settings) -> Result<()> {
    let out = s.out_dir()?;
    let vocab = load_vocab_file(s)?;
    let corpus = load_corpus_tokenized(s, &vocab)?;
    let queries = load_query_file(&s.require_file("queries")?, &vocab)?;
    let index = InvertedIndex::build(&corpus)?;
    let (depth, k1, b) = (s.usize("depth")?, s.f64("k1")?, s.f64("b")?);

    let mut run = ScoredRun::new();
    for q in &queries {
        run.set_query(&q.query_id, search(&q.token_ids, &index, depth, k1, b))?;
    }
    run.save(&out.join("retrieved.run"), "bm25")?;
    let notes = vec![format!("queries retrieved = {}", queries.len())];
    s.write_run_log(&out, &notes)?;
    println!(
        "retrieved top-{depth} for {} queries -> {}",
        queries.len(),
        out.join("retrieved.run").display()
    );
    Ok(())
}

// --- model training ---------------------------------------------------------

fn pretrain_lm_impl<S: Scalar>(s: &Settings) -> Result<()> {
    let out = s.out_dir()?;
    let vocab = load_vocab_file(s)?;
    let corpus = load_corpus_tokenized(s, &vocab)?;
    let mut queries = Vec::new();
    for path in s.file_list("queries")? {
        queries.extend(load_query_file(&path, &vocab)?);
    }
    let config = lm_config_from(s, vocab.len())?;
    let (store, params): (ParamStore<S>, LMParams) = pretrain_lm(
        &corpus,
        &queries,
        &config,
        s.usize("pretrain-steps")?,
        s.f64("pretrain-lr")?,
        s.u64("seed")?,
    )?;
    save_checkpoint(
        &out.join("lm.ckpt"),
        "lm",
        &serde_json::json!({ "lm": config }),
        &store,
        &params.all_ids(),
    )?;
    let notes = vec![
        format!("pretraining sequences = {} documents + {} queries", corpus.len(), queries.len()),
        format!("steps = {}", s.usize("pretrain-steps")?),
    ];
    s.write_run_log(&out, &notes)?;
    println!(
        "pretrained language model ({} steps) -> {}",
        s.usize("pretrain-steps")?,
        out.join("lm.ckpt").display()
    );
    Ok(())
}

fn train_impl<S: Scalar>(s: &Settings) -> Result<()> {
    let out = s.out_dir()?;
    let vocab = load_vocab_file(s)?;
    let corpus = load_corpus_tokenized(s, &vocab)?;
    let (mut store, lm_config, lm_params, _) =
        read_lm_checkpoint::<S>(&s.require_file("checkpoint")?)?;
    check_vocab_matches(&lm_config, &vocab)?;

    let train_queries = load_query_file(&s.require_file("queries")?, &vocab)?;
    let train_qrels = load_qrels(&s.require_file("qrels")?, &corpus)?;
    let train_run = ScoredRun::load(&s.require_file("run")?)?;
    let built = build_train_dataset(
        "train",
        &corpus,
        &train_queries,
        &train_qrels,
        &train_run,
        s.usize("negatives")?,
        &vocab,
    )?;

    let eval_queries = load_query_file(&s.require_file("eval-queries")?, &vocab)?;
    let eval_qrels = load_qrels(&s.require_file("eval-qrels")?, &corpus)?;
    let eval_run = ScoredRun::load(&s.require_file("eval-run")?)?;
    let (eval_dataset, eval_skipped) =
        build_eval_dataset("eval", &corpus, &eval_queries, &eval_qrels, &vocab)?;

    let qd_config = qd_config_from(s)?;
    let seed = s.u64("seed")?;
    let qd_params = init_qd_params(&mut store, &lm_params, &lm_config, &qd_config, seed)?;
    let train_config = train_config_from(s)?;

    let model = ModelRefs {
        lm_params: &lm_params,
        lm_config: &lm_config,
        qd_params: &qd_params,
        qd_config: &qd_config,
        vocab: &vocab,
        corpus: &corpus,
    };
    let report = fit(
        &mut store,
        &model,
        &built.dataset,
        &eval_dataset,
        &eval_run,
        &eval_qrels,
        &train_config,
    )?;

    fs::write(out.join("train_log.csv"), log_to_csv(&report.log))?;
    let mut ids = lm_params.all_ids();
    ids.extend(qd_params.all_ids());
    save_checkpoint(
        &out.join("qpeft.ckpt"),
        "qpeft",
        &serde_json::json!({ "lm": lm_config, "qd": qd_config, "train": train_config }),
        &store,
        &ids,
    )?;

    let notes = vec![
        format!("train instances = {}", built.dataset.len()),
        format!(
            "train queries skipped (no relevant / no candidates / no negatives) = {}/{}/{}",
            built.skipped_no_relevant, built.skipped_no_candidates, built.skipped_no_negatives
        ),
        format!("eval instances = {}", eval_dataset.len()),
        format!("eval queries skipped (no relevant) = {eval_skipped}"),
        format!("eval queries without candidates = {}", report.skipped_eval_queries),
        format!("documents truncated while scoring = {}", report.truncated_docs),
        format!("best epoch = {}", report.best_epoch),
        format!("best eval R@10 = {:.6}", report.best_eval),
    ];
    s.write_run_log(&out, &notes)?;
    println!(
        "trained {} epochs; best epoch {} with eval R@10 {:.6} -> {}",
        report.log.len() - 1,
        report.best_epoch,
        report.best_eval,
        out.join("qpeft.ckpt").display()
    );
    Ok(())
}

// --- inference --------------------------------------------------------------

fn rerank_impl<S: Scalar>(s: &Settings) -> Result<()> {
    let out = s.out_dir()?;
    let vocab = load_vocab_file(s)?;
    let corpus = load_corpus_tokenized(s, &vocab)?;
    let (store, lm_config, lm_params, ckpt) =
        read_lm_checkpoint::<S>(&s.require_file("checkpoint")?)?;
    check_vocab_matches(&lm_config, &vocab)?;

    let system = match s.str("system") {
        "" => {
            if ckpt.kind == "qpeft" {
                "qpeft"
            } else {
                "upr"
            }
        }
        other => other,
    };
    let qd_storage: Option<(QDParams, QDConfig)> = match system {
        "qpeft" => {
            if ckpt.kind != "qpeft" {
                bail!("checkpoint kind {:?} carries no trained hint module", ckpt.kind);
            }
            let qd_config: QDConfig = serde_json::from_value(
                ckpt.configs
                    .get("qd")
                    .cloned()
                    .context("checkpoint has no qd config")?,
            )?;
            let qd_params = QDParams::from_store(&store, &lm_config, &qd_config)?;
            Some((qd_params, qd_config))
        }
        "upr" => None,
        other => bail!("system must be \"qpeft\" or \"upr\", got {other:?}"),
    };

    let exemplar_info = match s.str("exemplar") {
        "none" => None,
        "first" => {
            if qd_storage.is_some() {
                bail!("the in-context exemplar is only available with the plain baseline (system=upr)");
            }
            let ex_queries = load_query_file(&s.require_file("exemplar-queries")?, &vocab)?;
            let ex_qrels = load_qrels(&s.require_file("exemplar-qrels")?, &corpus)?;
            Some(build_exemplar(&corpus, &ex_queries, &ex_qrels)?)
        }
        other => bail!("exemplar must be \"none\" or \"first\", got {other:?}"),
    };

    let prompt = parse_prompt(s.str("prompt"))?;
    let prompt_ids = tokenize(prompt.text(), &vocab);
    let mode = parse_mode(s.str("score-mode"))?;
    let setup = ScoreSetup {
        store: &store,
        lm_params: &lm_params,
        lm_config: &lm_config,
        qd: qd_storage.as_ref().map(|(p, c)| (p, c)),
        prompt_ids: &prompt_ids,
        mode,
        exemplar: exemplar_info.as_ref().map(|(e, _)| e),
    };

    let queries = load_query_file(&s.require_file("queries")?, &vocab)?;
    let candidates = ScoredRun::load(&s.require_file("run")?)?;
    let mut truncated = 0usize;
    let (reranked, missing) = rerank(&candidates, &queries, s.usize("depth")?, |q, doc_id| {
        let doc = corpus
            .get(doc_id)
            .ok_or_else(|| qpeft::Error::Contract(format!("run names unknown document {doc_id:?}")))?;
        let (score, was_truncated) = setup.score(&q.token_ids, &doc.token_ids)?;
        if was_truncated {
            truncated += 1;
        }
        Ok(score)
    })?;

    let tag = match &qd_storage {
        Some((_, cfg)) => match cfg.variant {
            QDVariant::R => "qpeft-r",
            QDVariant::A => "qpeft-a",
        },
        None => "upr",
    };
    reranked.save(&out.join("reranked.run"), tag)?;
    let mut notes = vec![
        format!("system = {tag}"),
        format!("queries reranked = {}", reranked.len()),
        format!("queries missing from candidates = {missing}"),
        format!("documents truncated while scoring = {truncated}"),
    ];
    if let Some((_, label)) = &exemplar_info {
        notes.push(format!("exemplar = {label}"));
    }
    s.write_run_log(&out, &notes)?;
    println!(
        "reranked {} queries with {tag} -> {}",
        reranked.len(),
        out.join("reranked.run").display()
    );
    Ok(())
}

fn cmd_eval(s: &Settings) -> Result<()> {
    let out = s.out_dir()?;
    let corpus = load_corpus(&s.require_file("corpus")?)?;
    let qrels = load_qrels(&s.require_file("qrels")?, &corpus)?;
    let answers = match s.opt_file("answers")? {
        Some(path) => load_answers(&path)?,
        None => BTreeMap::new(),
    };
    let run_paths = s.file_list("runs")?;
    if run_paths.is_empty() {
        bail!("command \"eval\" needs the \"runs\" setting (comma-separated run files)");
    }
    let mut systems = Vec::new();
    for path in &run_paths {
        let stem = path
            .file_stem()
            .and_then(|x| x.to_str())
            .with_context(|| format!("run path {} has no usable stem", path.display()))?
            .to_string();
        if systems.iter().any(|(name, _)| *name == stem) {
            bail!("two run files share the system name {stem:?}");
        }
        systems.push((stem, ScoredRun::load(path)?));
    }
    let retriever = match s.str("retriever") {
        "" => systems[0].0.clone(),
        named => named.to_string(),
    };
    let upr = match s.str("upr") {
        "" => None,
        named => Some(named.to_string()),
    };
    let ks = s.usize_list("ks")?;
    if ks.is_empty() {
        bail!("command \"eval\" needs at least one k in the \"ks\" setting");
    }

    let eval_report = report(
        &systems,
        &retriever,
        upr.as_deref(),
        &qrels,
        &answers,
        &corpus,
        &ks,
    )?;
    let csv = emit_csv(&eval_report.rows);
    fs::write(out.join("report.csv"), &csv)?;

    for row in &eval_report.rows {
        let imp = eval_report
            .improvements
            .get(&(row.system.clone(), row.metric.clone(), row.k))
            .map(|v| format!(" ({v:+.2}% vs {retriever})"))
            .unwrap_or_default();
        println!("{} {}@{} = {:.6}{imp}", row.system, row.metric, row.k, row.value);
    }
    let notes = vec![
        format!("systems = {}", systems.len()),
        format!("queries excluded from metrics = {}", eval_report.excluded_queries),
        format!("hit metric used qrels fallback = {}", eval_report.hit_used_qrels_fallback),
    ];
    s.write_run_log(&out, &notes)?;
    println!("wrote {}", out.join("report.csv").display());
    Ok(())
}

// --- gradient checking ------------------------------------------------------

/// Optimizer steps taken before the finite-difference comparison.
const GRADCHECK_BURNIN: usize = 25;

/// Self-contained fixture: a seeded synthetic corpus, a briefly pretrained
/// then frozen LM, and a hint module of the given variant burned in for a
/// few optimizer steps. Returns the max-relative-error report line for the
/// combined ranking loss on one (query, positive, negative) triple.
fn gradcheck_variant<S: Scalar>(
    s: &Settings,
    variant: QDVariant,
    lm_values: &[(String, qpeft::numcore::Matrix<S>)],
    lm_config: &LMConfig,
    vocab: &Vocab,
    triple: &(Vec<usize>, Vec<usize>, Vec<usize>),
) -> Result<String> {
    let mut store: ParamStore<S> = ParamStore::new();
    for (name, value) in lm_values {
        store.insert(name, value.clone(), false);
    }
    let lm_params = LMParams::from_store(&store, lm_config)?;
    let qd_config = QDConfig {
        variant,
        k: s.usize("k")?,
        heads: s.usize("heads")?,
        mlp_layers: s.usize("mlp-layers")?,
    };
    let qd_params = init_qd_params(&mut store, &lm_params, lm_config, &qd_config, s.u64("seed")?)?;
    let prompt_ids = tokenize(parse_prompt(s.str("prompt"))?.text(), vocab);
    let (query_ids, pos_ids, neg_ids) = triple;

    let loss = |store: &ParamStore<S>, want_grad: bool| -> qpeft::Result<(S, Option<GradMap<S>>)> {
        let mut tape = Tape::new(store);
        let setup = ScoreSetup {
            store,
            lm_params: &lm_params,
            lm_config,
            qd: Some((&qd_params, &qd_config)),
            prompt_ids: &prompt_ids,
            mode: ScoreMode::Sum,
            exemplar: None,
        };
        let pos = setup.score_node(&mut tape, query_ids, pos_ids)?;
        let neg = setup.score_node(&mut tape, query_ids, neg_ids)?;
        let loss = loss_total_node(&mut tape, pos.node, neg.node)?;
        let value = tape.scalar(loss)?;
        let grads = if want_grad {
            Some(tape.backward(loss)?)
        } else {
            None
        };
        Ok((value, grads))
    };

    // Short seeded burn-in before the comparison: at a cold start the
    // attention projections sit in a plateau where their true gradients are
    // below the finite-difference noise floor, so the check would measure
    // arithmetic roundoff instead of gradient fidelity. A few optimizer
    // steps move θ onto the region training actually traverses.
    let mut adam = Adam::new(AdamConfig::with_lr(S::from_c(0.03)));
    for _ in 0..GRADCHECK_BURNIN {
        let (_, grads) = loss(&store, true)?;
        store.accumulate_grads(&grads.expect("gradients requested"), S::one())?;
        adam.step(&mut store)?;
    }

    let report = finite_diff_check(
        &mut store,
        loss,
        s.f64("eps")?,
        s.usize("samples")?,
        s.u64("seed")?,
    )?;
    let worst = report
        .worst
        .map(|(name, idx, a, n)| format!("worst {name}[{idx}] analytic {a:.3e} numeric {n:.3e}"))
        .unwrap_or_else(|| "no coordinates sampled".to_string());
    Ok(format!(
        "variant {}: max relative error {:.3e} over {} coordinates ({worst})",
        variant_label(variant),
        report.max_rel_err,
        report.samples
    ))
}

fn gradcheck_impl<S: Scalar>(s: &Settings) -> Result<()> {
    let out = s.out_dir()?;
    let synth = make_synthetic_dataset(s.u64("seed")?, 60, 12, s.usize("synth-vocab")?, 3)?;
    let all_queries: Vec<Query> = [&synth.train, &synth.eval, &synth.test]
        .iter()
        .flat_map(|split| synth.queries_of(split))
        .collect();
    let vocab = Vocab::build(&synth.corpus, &all_queries, s.usize("vocab-max")?)?;
    let mut corpus = synth.corpus.clone();
    corpus.tokenize_all(&vocab);
    let mut train = synth.train.clone();
    train.tokenize_all(&vocab);

    let lm_config = lm_config_from(s, vocab.len())?;
    let (pretrained, lm_params): (ParamStore<S>, LMParams) = pretrain_lm(
        &corpus,
        &[],
        &lm_config,
        s.usize("pretrain-steps")?,
        s.f64("pretrain-lr")?,
        s.u64("seed")?,
    )?;
    let lm_values: Vec<(String, qpeft::numcore::Matrix<S>)> = lm_params
        .all_ids()
        .iter()
        .map(|&id| {
            let t = pretrained.tensor(id);
            (t.name().to_string(), t.value().clone())
        })
        .collect();

    let inst = &train.instances[0];
    let triple = (
        inst.query_ids.clone(),
        inst.positive.token_ids.clone(),
        inst.negatives[0].token_ids.clone(),
    );

    let mut lines = Vec::new();
    for variant in [QDVariant::R, QDVariant::A] {
        lines.push(gradcheck_variant(
            s, variant, &lm_values, &lm_config, &vocab, &triple,
        )?);
    }
    let text = lines.join("\n") + "\n";
    fs::write(out.join("gradcheck.txt"), &text)?;
    print!("{text}");
    s.write_run_log(&out, &lines)?;
    Ok(())
}

// --- sweep ------------------------------------------------------------------

/// Shared, immutable inputs for every sweep cell.
struct SweepInputs<'a> {
    vocab: &'a Vocab,
    corpus: &'a Corpus,
    lm_config: &'a LMConfig,
    ckpt: &'a Checkpoint,
    train_dataset: &'a Dataset,
    eval_dataset: &'a Dataset,
    eval_run: &'a ScoredRun,
    eval_qrels: &'a Qrels,
    test_queries: &'a [Query],
    test_run: &'a ScoredRun,
    test_qrels: &'a Qrels,
    answers: &'a BTreeMap<String, Vec<String>>,
    depth: usize,
}

/// One sweep cell: train a fresh hint module at the given settings, rerank
/// the test candidates, and return (R@10, Hit@10) on the test split.
fn sweep_cell<S: Scalar>(
    s: &Settings,
    inputs: &SweepInputs<'_>,
    variant: QDVariant,
    prompt: PromptPreset,
    train_size: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut store: ParamStore<S> = ParamStore::new();
    inputs.ckpt.insert_into(&mut store)?;
    store.freeze_all();
    let lm_params = LMParams::from_store(&store, inputs.lm_config)?;
    let qd_config = QDConfig {
        variant,
        k: s.usize("k")?,
        heads: s.usize("heads")?,
        mlp_layers: s.usize("mlp-layers")?,
    };
    let qd_params = init_qd_params(&mut store, &lm_params, inputs.lm_config, &qd_config, seed)?;
    let train_config = TrainConfig {
        batch_size: s.usize("batch-size")?,
        max_epochs: s.usize("max-epochs")?,
        patience: s.usize("patience")?,
        lr: s.f64("lr")?,
        train_size: Some(train_size),
        eval_size: s.opt_usize("eval-size")?,
        seed,
        prompt,
    };
    let model = ModelRefs {
        lm_params: &lm_params,
        lm_config: inputs.lm_config,
        qd_params: &qd_params,
        qd_config: &qd_config,
        vocab: inputs.vocab,
        corpus: inputs.corpus,
    };
    fit(
        &mut store,
        &model,
        inputs.train_dataset,
        inputs.eval_dataset,
        inputs.eval_run,
        inputs.eval_qrels,
        &train_config,
    )?;

    let prompt_ids = tokenize(prompt.text(), inputs.vocab);
    let setup = ScoreSetup {
        store: &store,
        lm_params: &lm_params,
        lm_config: inputs.lm_config,
        qd: Some((&qd_params, &qd_config)),
        prompt_ids: &prompt_ids,
        mode: ScoreMode::Sum,
        exemplar: None,
    };
    let (reranked, _) = rerank(
        inputs.test_run,
        inputs.test_queries,
        inputs.depth,
        |q, doc_id| {
            let doc = inputs.corpus.get(doc_id).ok_or_else(|| {
                qpeft::Error::Contract(format!("run names unknown document {doc_id:?}"))
            })?;
            Ok(setup.score(&q.token_ids, &doc.token_ids)?.0)
        },
    )?;
    let r10 = recall_at_k(&reranked, inputs.test_qrels, 10).macro_mean;
    let h10 = if inputs.answers.is_empty() {
        hit_at_k_from_qrels(&reranked, inputs.test_qrels, 10).macro_mean
    } else {
        hit_at_k(&reranked, inputs.answers, inputs.corpus, 10).macro_mean
    };
    Ok((r10, h10))
}

fn sweep_impl<S: Scalar>(s: &Settings) -> Result<()> {
    let out = s.out_dir()?;
    let vocab = load_vocab_file(s)?;
    let corpus = load_corpus_tokenized(s, &vocab)?;
    let ckpt = load_checkpoint(&s.require_file("checkpoint")?)?;
    let lm_config: LMConfig = serde_json::from_value(
        ckpt.configs
            .get("lm")
            .cloned()
            .context("checkpoint has no lm config")?,
    )?;
    check_vocab_matches(&lm_config, &vocab)?;

    let train_sizes = s.usize_list("train-sizes")?;
    if train_sizes.is_empty() {
        bail!("command \"sweep\" needs the \"train-sizes\" setting (comma-separated)");
    }
    let seeds = s.u64_list("seeds")?;
    if seeds.is_empty() {
        bail!("command \"sweep\" needs at least one seed in \"seeds\"");
    }
    let depth = s.usize("depth")?;
    if depth < 10 {
        bail!("sweep reports metrics at k=10; depth must be >= 10, got {depth}");
    }

    let train_queries = load_query_file(&s.require_file("queries")?, &vocab)?;
    let train_qrels = load_qrels(&s.require_file("qrels")?, &corpus)?;
    let train_run = ScoredRun::load(&s.require_file("run")?)?;
    let built = build_train_dataset(
        "train",
        &corpus,
        &train_queries,
        &train_qrels,
        &train_run,
        s.usize("negatives")?,
        &vocab,
    )?;
    let eval_queries = load_query_file(&s.require_file("eval-queries")?, &vocab)?;
    let eval_qrels = load_qrels(&s.require_file("eval-qrels")?, &corpus)?;
    let eval_run = ScoredRun::load(&s.require_file("eval-run")?)?;
    let (eval_dataset, _) = build_eval_dataset("eval", &corpus, &eval_queries, &eval_qrels, &vocab)?;
    let test_queries = load_query_file(&s.require_file("test-queries")?, &vocab)?;
    let test_qrels = load_qrels(&s.require_file("test-qrels")?, &corpus)?;
    let test_run = ScoredRun::load(&s.require_file("test-run")?)?;
    let answers = match s.opt_file("answers")? {
        Some(path) => load_answers(&path)?,
        None => BTreeMap::new(),
    };

    let inputs = SweepInputs {
        vocab: &vocab,
        corpus: &corpus,
        lm_config: &lm_config,
        ckpt: &ckpt,
        train_dataset: &built.dataset,
        eval_dataset: &eval_dataset,
        eval_run: &eval_run,
        eval_qrels: &eval_qrels,
        test_queries: &test_queries,
        test_run: &test_run,
        test_qrels: &test_qrels,
        answers: &answers,
        depth,
    };

    let prompts: Vec<PromptPreset> = ["p1", "p2", "p3", "p4", "p5"]
        .iter()
        .map(|p| parse_prompt(p))
        .collect::<Result<_>>()?;
    let mut csv = String::from("variant,prompt,train_size,seed,R10,H10\n");
    let mut cells = 0usize;
    for variant in [QDVariant::R, QDVariant::A] {
        for &prompt in &prompts {
            for &size in &train_sizes {
                for &seed in &seeds {
                    let (r10, h10) =
                        sweep_cell::<S>(s, &inputs, variant, prompt, size, seed)?;
                    let _ = writeln!(
                        csv,
                        "{},{},{size},{seed},{r10:.6},{h10:.6}",
                        variant_label(variant),
                        prompt.id()
                    );
                    cells += 1;
                }
            }
        }
    }
    fs::write(out.join("sweep.csv"), &csv)?;
    let notes = vec![format!("sweep cells = {cells}")];
    s.write_run_log(&out, &notes)?;
    println!("wrote {cells} sweep rows -> {}", out.join("sweep.csv").display());
    Ok(())
}
