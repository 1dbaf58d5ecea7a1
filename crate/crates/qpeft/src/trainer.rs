//! Training: pointwise + pairwise (hinge) losses over in-batch-expanded
//! triples, scoring-prefix assembly, the seeded epoch loop with Adam and
//! early stopping, and the binary checkpoint container.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bm25::ScoredRun;
use crate::error::{Error, Result};
use crate::evalrank::{recall_at_k, rerank, PromptPreset, ScoreMode, ScoreSetup};
use crate::minilm::{embed, LMConfig, LMParams};
use crate::numcore::{
    Adam, AdamConfig, DetRng, Matrix, NodeId, ParamId, ParamStore, Scalar, Tape,
};
use crate::qdmodule::{QDConfig, QDParams};
use crate::textdata::{tokenize, Corpus, Dataset, Document, Instance, Qrels, Query, Vocab};

// --- configuration ----------------------------------------------------------

/// Training-loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many consecutive epochs without eval improvement.
    pub patience: usize,
    pub lr: f64,
    /// Train on this many instances (seeded subsample); None = all.
    pub train_size: Option<usize>,
    /// Evaluate on this many instances (seeded subsample); None = all.
    pub eval_size: Option<usize>,
    pub seed: u64,
    pub prompt: PromptPreset,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            max_epochs: 20,
            patience: 5,
            lr: 3e-2,
            train_size: None,
            eval_size: None,
            seed: 0,
            prompt: PromptPreset::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, train_len: usize, eval_len: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if let Some(x) = self.train_size {
            if x > train_len {
                return Err(Error::Config(format!(
                    "train_size {x} exceeds {train_len} available instances"
                )));
            }
        }
        if let Some(y) = self.eval_size {
            if y > eval_len {
                return Err(Error::Config(format!(
                    "eval_size {y} exceeds {eval_len} available instances"
                )));
            }
        }
        Ok(())
    }
}

// --- triples ----------------------------------------------------------------

/// One contrastive example ⟨query, d⁺, d⁻⟩; `query` indexes into the batch
/// whose expansion produced the triple.
#[derive(Debug, Clone)]
pub struct Triple {
    pub query: usize,
    pub positive: Document,
    pub negative: Document,
}

impl Triple {
    fn new(query: usize, positive: &Document, negative: &Document) -> Result<Triple> {
        if positive.doc_id == negative.doc_id {
            return Err(Error::Contract(format!(
                "triple for query {query} pairs document {:?} against itself",
                positive.doc_id
            )));
        }
        Ok(Triple {
            query,
            positive: positive.clone(),
            negative: negative.clone(),
        })
    }
}

/// Expand a batch of b instances into b×(2b−1) triples.
///
/// One negative is drawn (seeded, uniform) per instance from its own pool,
/// excluding every positive in the batch; query i is then paired against
/// the other b−1 positives plus all b sampled negatives.
pub fn build_in_batch_negatives(batch: &[&Instance], rng: &mut DetRng) -> Result<Vec<Triple>> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let positives: Vec<&Document> = batch.iter().map(|inst| &inst.positive).collect();
    {
        let mut seen = std::collections::BTreeSet::new();
        for p in &positives {
            if !seen.insert(p.doc_id.as_str()) {
                return Err(Error::Contract(format!(
                    "duplicate positive {:?} inside one batch",
                    p.doc_id
                )));
            }
        }
    }
    let mut sampled: Vec<&Document> = Vec::with_capacity(b);
    for inst in batch {
        let pool: Vec<&Document> = inst
            .negatives
            .iter()
            .filter(|n| positives.iter().all(|p| p.doc_id != n.doc_id))
            .collect();
        if pool.is_empty() {
            return Err(Error::Contract(format!(
                "instance {:?} has no negative outside the batch positives",
                inst.query_id
            )));
        }
        sampled.push(pool[rng.below(pool.len())]);
    }
    let mut triples = Vec::with_capacity(b * (2 * b - 1));
    for i in 0..b {
        for j in 0..b {
            if j != i {
                triples.push(Triple::new(i, positives[i], positives[j])?);
            }
        }
        for &neg in &sampled {
            triples.push(Triple::new(i, positives[i], neg)?);
        }
    }
    Ok(triples)
}

// --- input assembly ---------------------------------------------------------

/// Scoring-prefix layout: [embed(doc) ; hint rows ; embed(prompt)].
/// Query target embeddings follow during scoring; an absent hint leaves the
/// plain [doc ; prompt] baseline layout.
pub fn assemble_input<S: Scalar>(
    tape: &mut Tape<'_, S>,
    lm_params: &LMParams,
    doc_ids: &[usize],
    hint: Option<NodeId>,
    prompt_ids: &[usize],
) -> Result<NodeId> {
    let mut parts = Vec::with_capacity(3);
    parts.push(embed(tape, lm_params, doc_ids)?);
    if let Some(h) = hint {
        parts.push(h);
    }
    parts.push(embed(tape, lm_params, prompt_ids)?);
    tape.concat_rows(&parts)
}

// --- losses -----------------------------------------------------------------

/// Pointwise loss: −I(q | d⁺, s).
pub fn loss_point_node<S: Scalar>(tape: &mut Tape<'_, S>, score_pos: NodeId) -> Result<NodeId> {
    tape.scale(score_pos, S::from_c(-1.0))
}

/// Pairwise hinge: max(0, I(q | d⁻, s) − I(q | d⁺, s)).
pub fn loss_pair_node<S: Scalar>(
    tape: &mut Tape<'_, S>,
    score_pos: NodeId,
    score_neg: NodeId,
) -> Result<NodeId> {
    let margin = tape.sub(score_neg, score_pos)?;
    tape.relu(margin)
}

/// Per-triple total: pointwise plus hinge on the same pair of scores.
pub fn loss_total_node<S: Scalar>(
    tape: &mut Tape<'_, S>,
    score_pos: NodeId,
    score_neg: NodeId,
) -> Result<NodeId> {
    let point = loss_point_node(tape, score_pos)?;
    let pair = loss_pair_node(tape, score_pos, score_neg)?;
    tape.add(point, pair)
}

/// Scalar hinge on two scores, for callers outside a tape.
pub fn hinge(i_pos: f64, i_neg: f64) -> f64 {
    (i_neg - i_pos).max(0.0)
}

// --- training loop ----------------------------------------------------------

/// Borrowed model pieces `fit` trains (θ) and scores with (frozen Φ).
pub struct ModelRefs<'a> {
    pub lm_params: &'a LMParams,
    pub lm_config: &'a LMConfig,
    pub qd_params: &'a QDParams,
    pub qd_config: &'a QDConfig,
    pub vocab: &'a Vocab,
    pub corpus: &'a Corpus,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    /// None on the epoch-0 row (evaluation before any update).
    pub train_loss: Option<f64>,
    pub eval_r10: f64,
    pub best_so_far: f64,
}

/// What `fit` hands back: the log, where the best θ came from, and
/// operational counters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub log: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_eval: f64,
    pub truncated_docs: usize,
    pub skipped_eval_queries: usize,
}

/// Serialize the log as `epoch,train_loss,eval_R10,best_so_far`.
pub fn log_to_csv(log: &[EpochRow]) -> String {
    let mut s = String::from("epoch,train_loss,eval_R10,best_so_far\n");
    for row in log {
        s.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch,
            row.train_loss.map(|l| l.to_string()).unwrap_or_default(),
            row.eval_r10,
            row.best_so_far
        ));
    }
    s
}

/// Score every (query, document) pair the batch's triples need — each pair
/// once — combine per-triple losses into the batch mean, backpropagate, and
/// apply one Adam step to the trainable tensors.
fn train_batch<S: Scalar>(
    store: &mut ParamStore<S>,
    model: &ModelRefs<'_>,
    prompt_ids: &[usize],
    batch: &[&Instance],
    triples: &[Triple],
    adam: &mut Adam<S>,
) -> Result<(f64, usize)> {
    let (loss, grads, truncated) = {
        let mut tape = Tape::new(&*store);
        let setup = ScoreSetup {
            store: &*store,
            lm_params: model.lm_params,
            lm_config: model.lm_config,
            qd: Some((model.qd_params, model.qd_config)),
            prompt_ids,
            mode: ScoreMode::Sum,
            exemplar: None,
        };
        let mut truncated = 0usize;
        let mut cache: BTreeMap<(usize, &str), NodeId> = BTreeMap::new();
        let mut losses: Vec<NodeId> = Vec::with_capacity(triples.len());
        for t in triples {
            for doc in [&t.positive, &t.negative] {
                let key = (t.query, doc.doc_id.as_str());
                if !cache.contains_key(&key) {
                    let scored =
                        setup.score_node(&mut tape, &batch[t.query].query_ids, &doc.token_ids)?;
                    if scored.truncated {
                        truncated += 1;
                    }
                    cache.insert(key, scored.node);
                }
            }
            let pos = cache[&(t.query, t.positive.doc_id.as_str())];
            let neg = cache[&(t.query, t.negative.doc_id.as_str())];
            losses.push(loss_total_node(&mut tape, pos, neg)?);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        let mean = tape.scale(total, S::from_c(1.0 / losses.len() as f64))?;
        let loss = tape.scalar(mean)?.into_f64();
        let grads = tape.backward(mean)?;
        (loss, grads, truncated)
    };
    store.accumulate_grads(&grads, S::from_c(1.0))?;
    adam.step(store)?;
    Ok((loss, truncated))
}

/// Mean Recall@10 of reranking the eval candidate lists with the current θ,
/// plus how many eval queries had no candidates.
fn eval_metric<S: Scalar>(
    store: &ParamStore<S>,
    model: &ModelRefs<'_>,
    prompt_ids: &[usize],
    eval_queries: &[Query],
    candidates: &ScoredRun,
    qrels: &Qrels,
) -> Result<(f64, usize)> {
    let setup = ScoreSetup {
        store,
        lm_params: model.lm_params,
        lm_config: model.lm_config,
        qd: Some((model.qd_params, model.qd_config)),
        prompt_ids,
        mode: ScoreMode::Sum,
        exemplar: None,
    };
    let (run, missing) = rerank(candidates, eval_queries, usize::MAX, |q, doc_id| {
        let doc = model
            .corpus
            .get(doc_id)
            .ok_or_else(|| Error::UnknownId(format!("candidate document {doc_id:?}")))?;
        Ok(setup.score(&q.token_ids, &doc.token_ids)?.0)
    })?;
    Ok((recall_at_k(&run, qrels, 10).macro_mean, missing))
}

/// Seeded subsample of `0..len` (identity when size is None).
fn subsample(len: usize, size: Option<usize>, rng: &mut DetRng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if let Some(s) = size {
        rng.shuffle(&mut idx);
        idx.truncate(s);
        idx.sort_unstable();
    }
    idx
}

fn check_tokenized(split: &Dataset) -> Result<()> {
    for inst in &split.instances {
        let untokenized = (inst.query_ids.is_empty() && !inst.query_text.trim().is_empty())
            || (inst.positive.token_ids.is_empty()
                && !inst.positive.joined_text().trim().is_empty());
        if untokenized {
            return Err(Error::Contract(format!(
                "split {:?}, instance {:?}: empty token ids — tokenize the dataset first",
                split.split, inst.query_id
            )));
        }
    }
    Ok(())
}

/// Train θ against the frozen LM on in-batch-expanded triples with Adam,
/// evaluating mean R@10 on the eval candidates after every epoch, keeping
/// the θ with the best (strictly improved) metric, and stopping early after
/// `patience` consecutive non-improving epochs.
///
/// The epoch-0 log row records the evaluation before any update. On return
/// the store holds the best θ seen. Any non-finite value aborts with the
/// failing operation named.
pub fn fit<S: Scalar>(
    store: &mut ParamStore<S>,
    model: &ModelRefs<'_>,
    train: &Dataset,
    eval_data: &Dataset,
    eval_candidates: &ScoredRun,
    eval_qrels: &Qrels,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate(train.instances.len(), eval_data.instances.len())?;
    check_tokenized(train)?;
    check_tokenized(eval_data)?;
    let prompt_ids = tokenize(config.prompt.text(), model.vocab);

    let train_idx = subsample(
        train.instances.len(),
        config.train_size,
        &mut DetRng::derived(config.seed, "train-subsample"),
    );
    let eval_idx = subsample(
        eval_data.instances.len(),
        config.eval_size,
        &mut DetRng::derived(config.seed, "eval-subsample"),
    );
    let eval_queries: Vec<Query> = eval_idx
        .iter()
        .map(|&i| {
            let inst = &eval_data.instances[i];
            Query {
                query_id: inst.query_id.clone(),
                text: inst.query_text.clone(),
                token_ids: inst.query_ids.clone(),
            }
        })
        .collect();

    let theta: Vec<ParamId> = model.qd_params.all_ids();
    let snapshot = |store: &ParamStore<S>| -> Vec<Matrix<S>> {
        theta.iter().map(|&id| store.value(id).clone()).collect()
    };

    let mut adam = Adam::new(AdamConfig::with_lr(S::from_c(config.lr)));
    let mut report = TrainReport {
        log: Vec::new(),
        best_epoch: 0,
        best_eval: f64::NEG_INFINITY,
        truncated_docs: 0,
        skipped_eval_queries: 0,
    };

    let (r10, missing) = eval_metric(
        store,
        model,
        &prompt_ids,
        &eval_queries,
        eval_candidates,
        eval_qrels,
    )?;
    report.skipped_eval_queries = missing;
    report.best_eval = r10;
    let mut best_theta = snapshot(store);
    report.log.push(EpochRow {
        epoch: 0,
        train_loss: None,
        eval_r10: r10,
        best_so_far: r10,
    });

    let mut stale = 0usize;
    for epoch in 1..=config.max_epochs {
        let mut order = train_idx.clone();
        DetRng::derived(config.seed, &format!("shuffle-epoch-{epoch}")).shuffle(&mut order);
        let mut neg_rng = DetRng::derived(config.seed, &format!("negatives-epoch-{epoch}"));

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &train.instances[i]).collect();
            let triples = build_in_batch_negatives(&batch, &mut neg_rng)?;
            let (loss, truncated) =
                train_batch(store, model, &prompt_ids, &batch, &triples, &mut adam)?;
            loss_sum += loss;
            report.truncated_docs += truncated;
            batches += 1;
        }
        let train_loss = loss_sum / batches.max(1) as f64;

        let (r10, _) = eval_metric(
            store,
            model,
            &prompt_ids,
            &eval_queries,
            eval_candidates,
            eval_qrels,
        )?;
        if r10 > report.best_eval {
            report.best_eval = r10;
            report.best_epoch = epoch;
            best_theta = snapshot(store);
            stale = 0;
        } else {
            stale += 1;
        }
        report.log.push(EpochRow {
            epoch,
            train_loss: Some(train_loss),
            eval_r10: r10,
            best_so_far: report.best_eval,
        });
        if stale >= config.patience {
            break;
        }
    }

    for (&id, value) in theta.iter().zip(best_theta) {
        *store.tensor_mut(id).value_mut() = value;
    }
    Ok(report)
}

// --- checkpoint container ---------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"QPEFTCKP";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
    trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    configs: serde_json::Value,
    tensors: Vec<ManifestTensor>,
}

/// One tensor loaded back from a checkpoint.
#[derive(Debug, Clone)]
pub struct CheckpointTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
    pub data: Vec<f32>,
}

/// A parsed checkpoint: kind tag, config JSON, tensors in file order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub version: u32,
    pub configs: serde_json::Value,
    pub tensors: Vec<CheckpointTensor>,
}

impl Checkpoint {
    /// Insert every tensor into `store` under its saved name, returning the
    /// new ids in file order. Names already present are an error.
    pub fn insert_into<S: Scalar>(&self, store: &mut ParamStore<S>) -> Result<Vec<ParamId>> {
        let mut ids = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            if store.id_of(&t.name).is_some() {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?} already present in the store",
                    t.name
                )));
            }
            let mut m = Matrix::zeros(t.rows, t.cols);
            for (o, &x) in m.as_mut_slice().iter_mut().zip(&t.data) {
                *o = S::from_c(x as f64);
            }
            ids.push(store.insert(&t.name, m, t.trainable));
        }
        Ok(ids)
    }
}

/// Write the named tensors as magic bytes + version + length-prefixed JSON
/// manifest + concatenated little-endian f32 payloads. Identical inputs
/// produce byte-identical files.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    kind: &str,
    configs: &serde_json::Value,
    store: &ParamStore<S>,
    ids: &[ParamId],
) -> Result<()> {
    let mut tensors = Vec::with_capacity(ids.len());
    let mut payload: Vec<u8> = Vec::new();
    for &id in ids {
        let t = store.tensor(id);
        let v = t.value();
        tensors.push(ManifestTensor {
            name: t.name().to_string(),
            rows: v.rows(),
            cols: v.cols(),
            offset: payload.len() as u64,
            trainable: t.trainable(),
        });
        for &x in v.as_slice() {
            payload.extend_from_slice(&x.into_f32().to_le_bytes());
        }
    }
    let manifest = serde_json::to_vec(&Manifest {
        kind: kind.to_string(),
        configs: configs.clone(),
        tensors,
    })?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(CKPT_MAGIC)?;
    file.write_all(&CKPT_VERSION.to_le_bytes())?;
    file.write_all(&(manifest.len() as u64).to_le_bytes())?;
    file.write_all(&manifest)?;
    file.write_all(&payload)?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`], validating structure
/// and finiteness.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 {
        return Err(bad("file too short"));
    }
    if &bytes[..8] != CKPT_MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let manifest_end = 20usize
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("manifest length overruns file"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[20..manifest_end])
        .map_err(|e| bad(&format!("manifest: {e}")))?;
    let payload = &bytes[manifest_end..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for t in manifest.tensors {
        let count = t.rows * t.cols;
        let start = t.offset as usize;
        let end = start
            .checked_add(count * 4)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| bad(&format!("tensor {} overruns payload", t.name)))?;
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(bad(&format!("tensor {} holds non-finite values", t.name)));
        }
        tensors.push(CheckpointTensor {
            name: t.name,
            rows: t.rows,
            cols: t.cols,
            trainable: t.trainable,
            data,
        });
    }
    Ok(Checkpoint {
        kind: manifest.kind,
        version,
        configs: manifest.configs,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minilm::init_lm_params;
    use crate::qdmodule::{init_qd_params, QDVariant};

    fn doc(id: &str) -> Document {
        Document::new(id, "", "body text")
    }

    fn instance(qid: &str, pos: &str, negs: &[&str]) -> Instance {
        Instance::new(
            qid,
            "what is it",
            doc(pos),
            negs.iter().map(|id| doc(id)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn triple_counts_follow_batch_size() {
        for b in 1..=4usize {
            let insts: Vec<Instance> = (0..b)
                .map(|i| instance(&format!("q{i}"), &format!("p{i}"), &[&format!("n{i}")]))
                .collect();
            let batch: Vec<&Instance> = insts.iter().collect();
            let mut rng = DetRng::new(1);
            let triples = build_in_batch_negatives(&batch, &mut rng).unwrap();
            assert_eq!(triples.len(), b * (2 * b - 1));
            for t in &triples {
                assert_ne!(t.positive.doc_id, t.negative.doc_id);
                assert_ne!(batch[t.query].positive.doc_id, t.negative.doc_id);
                assert_eq!(t.positive.doc_id, batch[t.query].positive.doc_id);
            }
        }
    }

    #[test]
    fn b2_expansion_matches_hand_enumeration() {
        let i0 = instance("q0", "p0", &["n0"]);
        let i1 = instance("q1", "p1", &["n1"]);
        let batch = [&i0, &i1];
        let mut rng = DetRng::new(1);
        let triples = build_in_batch_negatives(&batch, &mut rng).unwrap();
        assert_eq!(triples.len(), 6);
        let negs_of = |q: usize| -> Vec<&str> {
            triples
                .iter()
                .filter(|t| t.query == q)
                .map(|t| t.negative.doc_id.as_str())
                .collect()
        };
        assert_eq!(negs_of(0), vec!["p1", "n0", "n1"]);
        assert_eq!(negs_of(1), vec!["p0", "n0", "n1"]);
    }

    #[test]
    fn sampled_negatives_avoid_all_batch_positives() {
        // Instance 1's pool contains instance 0's positive; the draw must
        // never produce it under any seed.
        let i0 = instance("q0", "p0", &["n0"]);
        let i1 = instance("q1", "p1", &["p0", "n1"]);
        let batch = [&i0, &i1];
        for seed in 0..50 {
            let mut rng = DetRng::new(seed);
            let triples = build_in_batch_negatives(&batch, &mut rng).unwrap();
            for t in &triples {
                assert_ne!(t.negative.doc_id, batch[t.query].positive.doc_id);
            }
        }
        // A pool holding nothing but batch positives is an error.
        let i2 = instance("q2", "p2", &["p0"]);
        let batch = [&i0, &i2];
        let mut rng = DetRng::new(0);
        assert!(build_in_batch_negatives(&batch, &mut rng).is_err());
    }

    #[test]
    fn duplicate_batch_positives_are_rejected() {
        let i0 = instance("q0", "same", &["n0"]);
        let i1 = instance("q1", "same", &["n1"]);
        let mut rng = DetRng::new(0);
        assert!(build_in_batch_negatives(&[&i0, &i1], &mut rng).is_err());
    }

    #[test]
    fn assembled_prefix_is_doc_then_hint_then_prompt() {
        let config = LMConfig {
            vocab_size: 12,
            model_dim: 4,
            layers: 1,
            heads: 2,
            ffn_dim: 8,
            max_seq_len: 64,
            seed: 5,
        };
        let mut store: ParamStore<f64> = ParamStore::new();
        let params = init_lm_params(&mut store, &config).unwrap();
        let doc_ids = [4, 5, 6, 7, 8];
        let prompt_ids = [9, 10, 11, 4, 5, 6, 7, 8, 9];

        let mut tape = Tape::new(&store);
        let hint = tape
            .constant(Matrix::from_fn(10, 4, |r, c| (r * 4 + c) as f64))
            .unwrap();
        let prefix = assemble_input(&mut tape, &params, &doc_ids, Some(hint), &prompt_ids).unwrap();
        assert_eq!(tape.value(prefix).shape(), (5 + 10 + 9, 4));
        // Leading rows are bitwise the document embeddings; middle rows are
        // the hint itself.
        let demb = embed(&mut tape, &params, &doc_ids).unwrap();
        for r in 0..5 {
            assert_eq!(tape.value(prefix).row(r), tape.value(demb).row(r));
        }
        assert_eq!(tape.value(prefix).get(5, 0), 0.0);
        assert_eq!(tape.value(prefix).get(6, 1), 5.0);

        // No hint: exactly the [doc ; prompt] layout.
        let plain = assemble_input(&mut tape, &params, &doc_ids, None, &prompt_ids).unwrap();
        let pemb = embed(&mut tape, &params, &prompt_ids).unwrap();
        let both = tape.concat_rows(&[demb, pemb]).unwrap();
        assert_eq!(
            tape.value(plain).max_abs_diff(tape.value(both)).unwrap(),
            0.0
        );
    }

    #[test]
    fn hinge_examples_are_exact() {
        assert_eq!(hinge(-5.0, -7.0), 0.0);
        assert_eq!(hinge(-7.0, -5.0), 2.0);
        assert_eq!(hinge(-5.0, -5.0), 0.0);
    }

    #[test]
    fn loss_nodes_compute_point_and_hinge_exactly() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let pos_id = store.insert("pos", Matrix::filled(1, 1, -7.0), true);
        let neg_id = store.insert("neg", Matrix::filled(1, 1, -5.0), true);
        let mut tape = Tape::new(&store);
        let pos = tape.param(pos_id);
        let neg = tape.param(neg_id);
        let total = loss_total_node(&mut tape, pos, neg).unwrap();
        // point = 7, pair = 2.
        assert_eq!(tape.scalar(total).unwrap(), 9.0);
        let grads = tape.backward(total).unwrap();
        // d/dpos = −1 (point) − 1 (active hinge) = −2; d/dneg = +1.
        assert_eq!(grads[&pos_id].get(0, 0), -2.0);
        assert_eq!(grads[&neg_id].get(0, 0), 1.0);

        // Interior of the hinge's zero region: pair gradient exactly zero.
        *store.tensor_mut(neg_id).value_mut() = Matrix::filled(1, 1, -9.0);
        let mut tape = Tape::new(&store);
        let pos = tape.param(pos_id);
        let neg = tape.param(neg_id);
        let total = loss_total_node(&mut tape, pos, neg).unwrap();
        assert_eq!(tape.scalar(total).unwrap(), 7.0);
        let grads = tape.backward(total).unwrap();
        assert_eq!(grads[&pos_id].get(0, 0), -1.0);
        assert_eq!(grads[&neg_id].get(0, 0), 0.0);

        // Equal scores: the hinge contributes nothing and the total
        // degenerates to the point loss.
        let mut tape = Tape::new(&store);
        let pos = tape.param(pos_id);
        let total = loss_total_node(&mut tape, pos, pos).unwrap();
        assert_eq!(tape.scalar(total).unwrap(), 7.0);
    }

    #[test]
    fn uniform_logit_lm_gives_length_times_log_vocab() {
        let config = LMConfig {
            vocab_size: 10,
            model_dim: 4,
            layers: 1,
            heads: 2,
            ffn_dim: 8,
            max_seq_len: 32,
            seed: 2,
        };
        let mut store: ParamStore<f64> = ParamStore::new();
        let params = init_lm_params(&mut store, &config).unwrap();
        let (r, c) = store.value(params.w_out).shape();
        *store.tensor_mut(params.w_out).value_mut() = Matrix::zeros(r, c);
        let (_, bc) = store.value(params.b_out).shape();
        *store.tensor_mut(params.b_out).value_mut() = Matrix::zeros(1, bc);

        let setup = ScoreSetup {
            store: &store,
            lm_params: &params,
            lm_config: &config,
            qd: None,
            prompt_ids: &[4, 5],
            mode: ScoreMode::Sum,
            exemplar: None,
        };
        let (score, _) = setup.score(&[4, 5, 6], &[6, 7, 8]).unwrap();
        let mut tape = Tape::new(&store);
        let node = tape.constant(Matrix::filled(1, 1, score)).unwrap();
        let point = loss_point_node(&mut tape, node).unwrap();
        let loss = tape.scalar(point).unwrap();
        assert!((loss - 3.0 * 10.0_f64.ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn fd_gradients_match_loss_total() {
        // The end-to-end loss spans gradient magnitudes from O(1e-2) down to
        // O(1e-9): no single step size keeps both regimes inside a pure
        // relative tolerance (roundoff in the central difference is about
        // loss·machine-eps/step ≈ 2e-10 at step 1e-4, while larger steps add
        // visible curvature error on the healthy coordinates). Each sampled
        // coordinate therefore passes on either a relative tolerance or an
        // absolute floor set just above that roundoff level — a genuinely
        // wrong gradient of visible magnitude still trips both arms.
        for variant in [QDVariant::A, QDVariant::R] {
            let lm_config = LMConfig {
                vocab_size: 14,
                model_dim: 4,
                layers: 1,
                heads: 2,
                ffn_dim: 8,
                max_seq_len: 48,
                seed: 3,
            };
            let mut store: ParamStore<f64> = ParamStore::new();
            let lm_params = init_lm_params(&mut store, &lm_config).unwrap();
            store.freeze_all();
            let mut qd_config = QDConfig::new(variant);
            qd_config.k = 3;
            let qd_params =
                init_qd_params(&mut store, &lm_params, &lm_config, &qd_config, 9).unwrap();
            let mut inflate = vec![(qd_params.f_embed, 10.0)];
            if let Some(attn) = &qd_params.attn {
                // Query/key projections need a larger boost: with near-zero
                // logits the softmax is flat and their gradients sit at
                // roundoff scale.
                inflate.extend([
                    (attn.wq, 40.0),
                    (attn.wk, 40.0),
                    (attn.wv, 10.0),
                    (attn.wo, 10.0),
                ]);
            }
            for (id, factor) in inflate {
                let m = store.tensor_mut(id).value_mut();
                *m = m.scale(factor);
            }

            let query_ids = [4, 5, 6];
            let pos_ids = [7, 8, 9, 10];
            let neg_ids = [11, 12, 13];
            let prompt_ids = [4, 7];
            let eval = |store: &ParamStore<f64>, want_grads: bool| {
                let setup = ScoreSetup {
                    store,
                    lm_params: &lm_params,
                    lm_config: &lm_config,
                    qd: Some((&qd_params, &qd_config)),
                    prompt_ids: &prompt_ids,
                    mode: ScoreMode::Sum,
                    exemplar: None,
                };
                let mut tape = Tape::new(store);
                let pos = setup.score_node(&mut tape, &query_ids, &pos_ids).unwrap().node;
                let neg = setup.score_node(&mut tape, &query_ids, &neg_ids).unwrap().node;
                let total = loss_total_node(&mut tape, pos, neg).unwrap();
                let value = tape.scalar(total).unwrap();
                let grads = want_grads.then(|| tape.backward(total).unwrap());
                (value, grads)
            };
            let (_, grads) = eval(&store, true);
            let grads = grads.unwrap();

            let mut coords: Vec<(crate::numcore::ParamId, usize)> = Vec::new();
            for id in store.ids() {
                let t = store.tensor(id);
                if t.trainable() {
                    for k in 0..t.value().len() {
                        coords.push((id, k));
                    }
                }
            }
            DetRng::new(17).shuffle(&mut coords);
            coords.truncate(50);
            let eps = 1e-4;
            for (id, k) in coords {
                let orig = store.value(id).as_slice()[k];
                store.tensor_mut(id).value_mut().as_mut_slice()[k] = orig + eps;
                let loss_p = eval(&store, false).0;
                store.tensor_mut(id).value_mut().as_mut_slice()[k] = orig - eps;
                let loss_m = eval(&store, false).0;
                store.tensor_mut(id).value_mut().as_mut_slice()[k] = orig;
                let numeric = (loss_p - loss_m) / (2.0 * eps);
                let analytic = grads.get(&id).map(|g| g.as_slice()[k]).unwrap_or(0.0);
                let diff = (analytic - numeric).abs();
                let tol = (1e-4 * analytic.abs().max(numeric.abs())).max(1e-9);
                assert!(
                    diff <= tol,
                    "{variant:?} {:?}[{k}]: analytic {analytic} vs numeric {numeric}",
                    store.tensor(id).name()
                );
            }
        }
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let cfg = TrainConfig::default();
        assert!(cfg.validate(10, 10).is_ok());
        let mut bad = cfg.clone();
        bad.batch_size = 0;
        assert!(bad.validate(10, 10).is_err());
        let mut bad = cfg.clone();
        bad.patience = 21;
        assert!(bad.validate(10, 10).is_err());
        let mut bad = cfg.clone();
        bad.train_size = Some(11);
        assert!(bad.validate(10, 10).is_err());
        let mut bad = cfg.clone();
        bad.eval_size = Some(11);
        assert!(bad.validate(10, 10).is_err());
    }

    #[test]
    fn checkpoint_roundtrips_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = DetRng::new(3);
        let a = store.insert("alpha", rng.normal_matrix(3, 4, 1.0), true);
        let b = store.insert("beta", rng.normal_matrix(1, 2, 1.0), false);
        let configs = serde_json::json!({"detail": {"x": 1}});
        save_checkpoint(&path, "test", &configs, &store, &[a, b]).unwrap();

        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.kind, "test");
        assert_eq!(ck.version, 1);
        assert_eq!(ck.configs, configs);
        assert_eq!(ck.tensors.len(), 2);
        assert_eq!(ck.tensors[0].name, "alpha");
        assert_eq!((ck.tensors[0].rows, ck.tensors[0].cols), (3, 4));
        assert!(ck.tensors[0].trainable);
        assert!(!ck.tensors[1].trainable);
        // Values survive the container's f32 round-trip at f32 precision.
        for (have, want) in ck.tensors[0].data.iter().zip(store.value(a).as_slice()) {
            assert_eq!(*have, *want as f32);
        }

        let mut restored: ParamStore<f64> = ParamStore::new();
        let ids = ck.insert_into(&mut restored).unwrap();
        assert_eq!(restored.value(ids[0]).shape(), (3, 4));
        assert!(ck.insert_into(&mut restored).is_err(), "duplicate names");

        // Same inputs → byte-identical file.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&path2, "test", &configs, &store, &[a, b]).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        // Corrupted inputs are rejected.
        std::fs::write(dir.path().join("bad.ckpt"), b"NOTMAGIC rest of file").unwrap();
        assert!(load_checkpoint(&dir.path().join("bad.ckpt")).is_err());
        let mut truncated = std::fs::read(&path).unwrap();
        truncated.truncate(truncated.len() - 5);
        std::fs::write(dir.path().join("short.ckpt"), &truncated).unwrap();
        assert!(load_checkpoint(&dir.path().join("short.ckpt")).is_err());
    }

    #[test]
    fn log_csv_has_blank_loss_for_epoch_zero() {
        let log = vec![
            EpochRow {
                epoch: 0,
                train_loss: None,
                eval_r10: 0.25,
                best_so_far: 0.25,
            },
            EpochRow {
                epoch: 1,
                train_loss: Some(3.5),
                eval_r10: 0.5,
                best_so_far: 0.5,
            },
        ];
        assert_eq!(
            log_to_csv(&log),
            "epoch,train_loss,eval_R10,best_so_far\n0,,0.25,0.25\n1,3.5,0.5,0.5\n"
        );
    }
}
