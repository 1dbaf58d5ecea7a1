//! Tokenization, vocabulary, corpus/query/qrels/answers ingestion in fixed
//! TSV formats, and a seeded synthetic dataset generator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::DetRng;

/// Reserved token ids.
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercased alphanumeric runs; everything else is a separator.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for lc in ch.to_lowercase() {
                cur.push(lc);
            }
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Bidirectional token map with reserved PAD/BOS/EOS/UNK ids 0..3.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: BTreeMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Rank tokens of the corpus and queries by frequency (ties broken
    /// lexicographically), keep the best `max_size - 4`, and assign dense
    /// ids after the reserved ones.
    pub fn build(corpus: &Corpus, queries: &[Query], max_size: usize) -> Result<Vocab> {
        if corpus.is_empty() {
            return Err(Error::Contract("build_vocab on empty corpus".into()));
        }
        if max_size < 4 {
            return Err(Error::Config(format!(
                "vocab max_size {max_size} < 4 reserved entries"
            )));
        }
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for doc in corpus.docs() {
            for tok in split_tokens(&doc.joined_text()) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        for q in queries {
            for tok in split_tokens(&q.text) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - 4);

        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(ranked.into_iter().map(|(t, _)| t));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Id for a normalized token; UNK when absent.
    pub fn id_of(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for tok in &self.id_to_token {
            out.push_str(tok);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path)?;
        let pathname = path.display().to_string();
        let mut id_to_token = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                return Err(Error::parse(&pathname, i + 1, "empty vocab line"));
            }
            if !seen.insert(line.to_string()) {
                return Err(Error::parse(
                    &pathname,
                    i + 1,
                    format!("duplicate token {line:?}"),
                ));
            }
            id_to_token.push(line.to_string());
        }
        if id_to_token.len() < 4 || id_to_token[..4] != SPECIALS.map(String::from) {
            return Err(Error::parse(
                &pathname,
                1,
                "vocab must begin with <pad>, <bos>, <eos>, <unk>",
            ));
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }
}

/// Normalize and encode text; unknown tokens become UNK. Never emits the
/// reserved ids for surface text.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<usize> {
    split_tokens(text)
        .iter()
        .map(|t| vocab.id_of(t))
        .collect()
}

/// One corpus document with its cached token ids.
#[derive(Debug, Clone)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub text: String,
    /// `tokenize(title + " " + text)`, filled by `tokenize_all`.
    pub token_ids: Vec<usize>,
}

impl Document {
    pub fn new(doc_id: &str, title: &str, text: &str) -> Document {
        Document {
            doc_id: doc_id.to_string(),
            title: title.to_string(),
            text: text.to_string(),
            token_ids: Vec::new(),
        }
    }

    pub fn joined_text(&self) -> String {
        format!("{} {}", self.title, self.text)
    }

    pub fn tokenize_with(&mut self, vocab: &Vocab) {
        self.token_ids = tokenize(&self.joined_text(), vocab);
    }
}

/// Immutable-after-load document collection indexed by doc_id.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    docs: Vec<Document>,
    by_id: BTreeMap<String, usize>,
}

impl Corpus {
    pub fn from_documents(docs: Vec<Document>) -> Result<Corpus> {
        let mut by_id = BTreeMap::new();
        for (i, d) in docs.iter().enumerate() {
            if by_id.insert(d.doc_id.clone(), i).is_some() {
                return Err(Error::Contract(format!(
                    "duplicate doc_id {:?}",
                    d.doc_id
                )));
            }
        }
        Ok(Corpus { docs, by_id })
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.by_id.get(doc_id).map(|&i| &self.docs[i])
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.by_id.contains_key(doc_id)
    }

    /// Fill every document's token cache.
    pub fn tokenize_all(&mut self, vocab: &Vocab) {
        for d in &mut self.docs {
            d.tokenize_with(vocab);
        }
    }
}

/// One query with its cached token ids.
#[derive(Debug, Clone)]
pub struct Query {
    pub query_id: String,
    pub text: String,
    pub token_ids: Vec<usize>,
}

impl Query {
    pub fn new(query_id: &str, text: &str) -> Query {
        Query {
            query_id: query_id.to_string(),
            text: text.to_string(),
            token_ids: Vec::new(),
        }
    }

    pub fn tokenize_with(&mut self, vocab: &Vocab) {
        self.token_ids = tokenize(&self.text, vocab);
    }
}

pub fn tokenize_queries(queries: &mut [Query], vocab: &Vocab) {
    for q in queries {
        q.tokenize_with(vocab);
    }
}

/// Relevance judgments: query_id → doc_id → label (0 or 1).
#[derive(Debug, Clone, Default)]
pub struct Qrels {
    by_query: BTreeMap<String, BTreeMap<String, u8>>,
}

impl Qrels {
    pub fn insert(&mut self, query_id: &str, doc_id: &str, label: u8) -> bool {
        self.by_query
            .entry(query_id.to_string())
            .or_default()
            .insert(doc_id.to_string(), label)
            .is_none()
    }

    /// Doc ids judged relevant (label 1) for a query, in doc_id order.
    pub fn relevant_docs(&self, query_id: &str) -> Vec<&str> {
        self.by_query
            .get(query_id)
            .map(|m| {
                m.iter()
                    .filter(|&(_, &l)| l == 1)
                    .map(|(d, _)| d.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn is_relevant(&self, query_id: &str, doc_id: &str) -> bool {
        self.by_query
            .get(query_id)
            .and_then(|m| m.get(doc_id))
            .map(|&l| l == 1)
            .unwrap_or(false)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.by_query.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.by_query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_query.is_empty()
    }
}

fn split_fields<'a>(
    line: &'a str,
    n: usize,
    path: &str,
    lineno: usize,
) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != n {
        return Err(Error::parse(
            path,
            lineno,
            format!("expected {n} tab-separated fields, got {}", fields.len()),
        ));
    }
    Ok(fields)
}

/// `doc_id<TAB>title<TAB>text`, UTF-8, LF, no header.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path)?;
    let pathname = path.display().to_string();
    let mut docs = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let f = split_fields(line, 3, &pathname, i + 1)?;
        if f[0].is_empty() {
            return Err(Error::parse(&pathname, i + 1, "empty doc_id"));
        }
        if !seen.insert(f[0].to_string()) {
            return Err(Error::parse(
                &pathname,
                i + 1,
                format!("duplicate doc_id {:?}", f[0]),
            ));
        }
        docs.push(Document::new(f[0], f[1], f[2]));
    }
    Corpus::from_documents(docs)
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = String::new();
    for d in corpus.docs() {
        writeln!(out, "{}\t{}\t{}", d.doc_id, d.title, d.text).expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

/// `query_id<TAB>text`.
pub fn load_queries(path: &Path) -> Result<Vec<Query>> {
    let text = fs::read_to_string(path)?;
    let pathname = path.display().to_string();
    let mut queries = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let f = split_fields(line, 2, &pathname, i + 1)?;
        if f[0].is_empty() {
            return Err(Error::parse(&pathname, i + 1, "empty query_id"));
        }
        if !seen.insert(f[0].to_string()) {
            return Err(Error::parse(
                &pathname,
                i + 1,
                format!("duplicate query_id {:?}", f[0]),
            ));
        }
        queries.push(Query::new(f[0], f[1]));
    }
    Ok(queries)
}

pub fn save_queries(queries: &[Query], path: &Path) -> Result<()> {
    let mut out = String::new();
    for q in queries {
        writeln!(out, "{}\t{}", q.query_id, q.text).expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

/// `query_id<TAB>doc_id<TAB>label`, label in {0,1}; every doc_id must exist
/// in the corpus.
pub fn load_qrels(path: &Path, corpus: &Corpus) -> Result<Qrels> {
    let text = fs::read_to_string(path)?;
    let pathname = path.display().to_string();
    let mut qrels = Qrels::default();
    for (i, line) in text.lines().enumerate() {
        let f = split_fields(line, 3, &pathname, i + 1)?;
        let label: u8 = f[2]
            .parse()
            .ok()
            .filter(|l| *l <= 1)
            .ok_or_else(|| {
                Error::parse(&pathname, i + 1, format!("label {:?} not in {{0,1}}", f[2]))
            })?;
        if !corpus.contains(f[1]) {
            return Err(Error::parse(
                &pathname,
                i + 1,
                format!("unknown doc_id {:?}", f[1]),
            ));
        }
        if !qrels.insert(f[0], f[1], label) {
            return Err(Error::parse(
                &pathname,
                i + 1,
                format!("duplicate judgment for ({:?}, {:?})", f[0], f[1]),
            ));
        }
    }
    Ok(qrels)
}

pub fn save_qrels(qrels: &Qrels, path: &Path) -> Result<()> {
    let mut out = String::new();
    for qid in qrels.query_ids() {
        let m = &qrels.by_query[qid];
        for (doc_id, label) in m {
            writeln!(out, "{qid}\t{doc_id}\t{label}").expect("string write");
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// `query_id<TAB>answer1||answer2||...`.
pub fn load_answers(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let text = fs::read_to_string(path)?;
    let pathname = path.display().to_string();
    let mut answers = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let f = split_fields(line, 2, &pathname, i + 1)?;
        let spans: Vec<String> = f[1].split("||").map(|s| s.to_string()).collect();
        if spans.iter().any(|s| s.is_empty()) {
            return Err(Error::parse(&pathname, i + 1, "empty answer span"));
        }
        if answers.insert(f[0].to_string(), spans).is_some() {
            return Err(Error::parse(
                &pathname,
                i + 1,
                format!("duplicate query_id {:?}", f[0]),
            ));
        }
    }
    Ok(answers)
}

pub fn save_answers(answers: &BTreeMap<String, Vec<String>>, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (qid, spans) in answers {
        writeln!(out, "{qid}\t{}", spans.join("||")).expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

/// One training/eval example: a query, its positive document, and a pool of
/// negative documents.
#[derive(Debug, Clone)]
pub struct Instance {
    pub query_id: String,
    pub query_text: String,
    pub query_ids: Vec<usize>,
    pub positive: Document,
    pub negatives: Vec<Document>,
}

impl Instance {
    pub fn new(
        query_id: &str,
        query_text: &str,
        positive: Document,
        negatives: Vec<Document>,
    ) -> Result<Instance> {
        if negatives.iter().any(|n| n.doc_id == positive.doc_id) {
            return Err(Error::Contract(format!(
                "instance {query_id:?}: positive {:?} also listed as negative",
                positive.doc_id
            )));
        }
        Ok(Instance {
            query_id: query_id.to_string(),
            query_text: query_text.to_string(),
            query_ids: Vec::new(),
            positive,
            negatives,
        })
    }

    pub fn tokenize_with(&mut self, vocab: &Vocab) {
        self.query_ids = tokenize(&self.query_text, vocab);
        self.positive.tokenize_with(vocab);
        for n in &mut self.negatives {
            n.tokenize_with(vocab);
        }
    }
}

/// A split's worth of instances with unique query ids.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: String,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn new(split: &str, instances: Vec<Instance>) -> Result<Dataset> {
        let mut seen = BTreeSet::new();
        for inst in &instances {
            if !seen.insert(inst.query_id.clone()) {
                return Err(Error::Contract(format!(
                    "split {split:?}: duplicate query_id {:?}",
                    inst.query_id
                )));
            }
        }
        Ok(Dataset {
            split: split.to_string(),
            instances,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn tokenize_all(&mut self, vocab: &Vocab) {
        for inst in &mut self.instances {
            inst.tokenize_with(vocab);
        }
    }
}

/// Everything the synthetic generator produces.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub corpus: Corpus,
    pub train: Dataset,
    pub eval: Dataset,
    pub test: Dataset,
    pub answers: BTreeMap<String, Vec<String>>,
}

impl SynthData {
    pub fn queries_of(&self, split: &Dataset) -> Vec<Query> {
        split
            .instances
            .iter()
            .map(|i| Query::new(&i.query_id, &i.query_text))
            .collect()
    }

    pub fn qrels_of(&self, split: &Dataset) -> Qrels {
        let mut qrels = Qrels::default();
        for inst in &split.instances {
            qrels.insert(&inst.query_id, &inst.positive.doc_id, 1);
        }
        qrels
    }

    /// Write the standard file layout into a directory.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        save_corpus(&self.corpus, &dir.join("corpus.tsv"))?;
        for split in [&self.train, &self.eval, &self.test] {
            let qs = self.queries_of(split);
            save_queries(&qs, &dir.join(format!("queries.{}.tsv", split.split)))?;
            save_qrels(
                &self.qrels_of(split),
                &dir.join(format!("qrels.{}.tsv", split.split)),
            )?;
        }
        save_answers(&self.answers, &dir.join("answers.tsv"))?;
        Ok(())
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const TEMPLATES: [&str; 6] = ["what", "which", "where", "when", "who", "how"];

/// Deterministic pronounceable surface form for inventory index `i`.
fn surface_token(i: usize) -> String {
    let syl = |n: usize| {
        let c = CONSONANTS[n % CONSONANTS.len()] as char;
        let v = VOWELS[(n / CONSONANTS.len()) % VOWELS.len()] as char;
        format!("{c}{v}")
    };
    let n_syl = CONSONANTS.len() * VOWELS.len();
    let mut s = syl(i % n_syl);
    s.push_str(&syl((i / n_syl) % n_syl));
    if i >= n_syl * n_syl {
        s.push_str(&syl(i / (n_syl * n_syl)));
    }
    s
}

/// Generate a topic-structured corpus with extractive queries and answers.
///
/// Documents draw ~70% of tokens from a per-topic ranked distribution and
/// the rest from a global background; each query is a question-template
/// token plus a few salient tokens of its positive document (chosen to be
/// frequent in the document but globally rare) with optional noise; answers
/// are short spans copied from the positive document's text. Negatives mix
/// same-topic and random documents. Equal seeds give identical output.
pub fn make_synthetic_dataset(
    seed: u64,
    num_docs: usize,
    num_queries: usize,
    vocab_size: usize,
    negatives_per_query: usize,
) -> Result<SynthData> {
    if num_docs < num_queries {
        return Err(Error::Config(format!(
            "num_docs {num_docs} < num_queries {num_queries}"
        )));
    }
    if vocab_size < 50 {
        return Err(Error::Config(format!("vocab_size {vocab_size} < 50")));
    }
    if num_queries < 6 {
        return Err(Error::Config(format!(
            "num_queries {num_queries} < 6 (cannot form three nonempty splits)"
        )));
    }
    if negatives_per_query == 0 || num_docs < 2 {
        return Err(Error::Config(
            "need at least one negative per query and two documents".into(),
        ));
    }

    let inventory: Vec<String> = (0..vocab_size).map(surface_token).collect();
    let n_topics = (vocab_size / 30).clamp(4, 40);
    let core_size = 30.min(vocab_size);

    // Per-topic ranked core: a seeded permutation prefix of the inventory,
    // sampled with harmonic weights (rank r picked with weight 1/(r+1)).
    let mut topic_cores: Vec<Vec<usize>> = Vec::with_capacity(n_topics);
    for t in 0..n_topics {
        let mut perm: Vec<usize> = (0..vocab_size).collect();
        let mut rng = DetRng::derived(seed, &format!("synth-topic-{t}"));
        rng.shuffle(&mut perm);
        perm.truncate(core_size);
        topic_cores.push(perm);
    }
    let harmonic: Vec<f64> = (0..core_size).map(|r| 1.0 / (r + 1) as f64).collect();
    let harmonic_total: f64 = harmonic.iter().sum();
    let draw_core = |rng: &mut DetRng, core: &[usize]| -> usize {
        let mut x: f64 = rng.uniform::<f64>() * harmonic_total;
        for (r, w) in harmonic.iter().enumerate() {
            x -= w;
            if x <= 0.0 {
                return core[r];
            }
        }
        core[core_size - 1]
    };

    let id_width = (num_docs.max(num_queries).saturating_sub(1))
        .to_string()
        .len();

    // Documents.
    let mut doc_rng = DetRng::derived(seed, "synth-docs");
    let mut docs = Vec::with_capacity(num_docs);
    let mut doc_topics = Vec::with_capacity(num_docs);
    for i in 0..num_docs {
        let topic = doc_rng.below(n_topics);
        doc_topics.push(topic);
        let len = 30 + doc_rng.below(31);
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            let u: f64 = doc_rng.uniform();
            let tok = if u < 0.7 {
                draw_core(&mut doc_rng, &topic_cores[topic])
            } else {
                doc_rng.below(vocab_size)
            };
            words.push(inventory[tok].clone());
        }
        let title = format!(
            "{} {}",
            inventory[topic_cores[topic][0]], inventory[topic_cores[topic][1]]
        );
        docs.push(Document::new(
            &format!("d{i:0id_width$}"),
            &title,
            &words.join(" "),
        ));
    }

    // Global counts for salience: frequent-in-document, rare-in-corpus.
    let mut global_counts: BTreeMap<String, u64> = BTreeMap::new();
    for d in &docs {
        for tok in split_tokens(&d.text) {
            *global_counts.entry(tok).or_insert(0) += 1;
        }
    }

    // Positives: a seeded choice of distinct documents.
    let mut order: Vec<usize> = (0..num_docs).collect();
    DetRng::derived(seed, "synth-positives").shuffle(&mut order);
    let positives = &order[..num_queries];

    let mut query_rng = DetRng::derived(seed, "synth-queries");
    let mut neg_rng = DetRng::derived(seed, "synth-negatives");
    let mut instances = Vec::with_capacity(num_queries);
    let mut answers = BTreeMap::new();
    for (qi, &di) in positives.iter().enumerate() {
        let doc = &docs[di];
        let words = split_tokens(&doc.text);

        // Salience score: count in document divided by corpus count.
        let mut in_doc: BTreeMap<&str, u64> = BTreeMap::new();
        for w in &words {
            *in_doc.entry(w.as_str()).or_insert(0) += 1;
        }
        let mut salient: Vec<(&str, f64)> = in_doc
            .iter()
            .map(|(&w, &c)| (w, c as f64 / global_counts[w] as f64))
            .collect();
        salient.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(b.0)));

        let n_salient = (3 + query_rng.below(3)).min(salient.len());
        let mut qwords = vec![TEMPLATES[query_rng.below(TEMPLATES.len())].to_string()];
        for (w, _) in &salient[..n_salient] {
            qwords.push(w.to_string());
        }
        if query_rng.uniform::<f64>() < 0.3 {
            qwords.push(inventory[query_rng.below(vocab_size)].clone());
        }
        let query_id = format!("q{qi:0id_width$}");
        let query_text = qwords.join(" ");

        // Answer: a 1-2 token contiguous span of the positive text.
        let span_len = 1 + query_rng.below(2).min(words.len() - 1);
        let start = query_rng.below(words.len() - span_len + 1);
        answers.insert(
            query_id.clone(),
            vec![words[start..start + span_len].join(" ")],
        );

        // Negatives: alternate same-topic and random documents.
        let same_topic: Vec<usize> = (0..num_docs)
            .filter(|&j| j != di && doc_topics[j] == doc_topics[di])
            .collect();
        let mut neg_ids = BTreeSet::new();
        let mut negatives = Vec::new();
        let mut guard = 0;
        while negatives.len() < negatives_per_query.min(num_docs - 1) && guard < 10_000 {
            guard += 1;
            let pick = if negatives.len() % 2 == 0 && !same_topic.is_empty() {
                same_topic[neg_rng.below(same_topic.len())]
            } else {
                neg_rng.below(num_docs)
            };
            if pick != di && neg_ids.insert(pick) {
                negatives.push(docs[pick].clone());
            }
        }
        instances.push(Instance::new(&query_id, &query_text, doc.clone(), negatives)?);
    }

    // Contiguous splits: 4/6 train, 1/6 eval, remainder test.
    let n_train = num_queries * 4 / 6;
    let n_eval = num_queries / 6;
    let eval_start = n_train;
    let test_start = n_train + n_eval;
    let train = Dataset::new("train", instances[..n_train].to_vec())?;
    let eval = Dataset::new("eval", instances[eval_start..test_start].to_vec())?;
    let test = Dataset::new("test", instances[test_start..].to_vec())?;

    Ok(SynthData {
        corpus: Corpus::from_documents(docs)?,
        train,
        eval,
        test,
        answers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_corpus(lines: &[(&str, &str, &str)]) -> Corpus {
        Corpus::from_documents(
            lines
                .iter()
                .map(|&(i, t, x)| Document::new(i, t, x))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn tokenize_empty_is_empty() {
        let corpus = tiny_corpus(&[("d1", "", "paris france")]);
        let vocab = Vocab::build(&corpus, &[], 100).unwrap();
        assert_eq!(tokenize("", &vocab), Vec::<usize>::new());
    }

    #[test]
    fn tokenize_normalizes_case_and_punctuation() {
        let corpus = tiny_corpus(&[("d1", "", "paris france")]);
        let vocab = Vocab::build(&corpus, &[], 100).unwrap();
        assert_eq!(
            tokenize("Paris, France", &vocab),
            vec![vocab.id_of("paris"), vocab.id_of("france")]
        );
        assert!(tokenize("Paris, France", &vocab).iter().all(|&id| id != UNK));
    }

    #[test]
    fn tokenize_maps_oov_to_unk() {
        let corpus = tiny_corpus(&[("d1", "", "paris france")]);
        let vocab = Vocab::build(&corpus, &[], 100).unwrap();
        assert_eq!(tokenize("paris zanzibar", &vocab), vec![vocab.id_of("paris"), UNK]);
    }

    #[test]
    fn vocab_orders_by_frequency_then_lexicographic() {
        let corpus = tiny_corpus(&[("d1", "", "a a b")]);
        let vocab = Vocab::build(&corpus, &[], 100).unwrap();
        assert!(vocab.id_of("a") < vocab.id_of("b"));

        let tied = tiny_corpus(&[("d1", "", "b a")]);
        let vocab = Vocab::build(&tied, &[], 100).unwrap();
        assert!(vocab.id_of("a") < vocab.id_of("b"));
    }

    #[test]
    fn vocab_truncates_to_max_size() {
        let corpus = tiny_corpus(&[("d1", "", "t0 t1 t2 t3 t4 t5 t6 t7 t8 t9")]);
        let vocab = Vocab::build(&corpus, &[], 5).unwrap();
        assert_eq!(vocab.len(), 5);
        // Exactly one non-reserved token kept: the lexicographically first
        // of the tied-frequency tokens.
        assert_eq!(vocab.token_of(4), Some("t0"));
    }

    #[test]
    fn vocab_rejects_empty_corpus() {
        let corpus = Corpus::from_documents(vec![]).unwrap();
        assert!(Vocab::build(&corpus, &[], 100).is_err());
    }

    #[test]
    fn vocab_save_load_roundtrip() {
        let corpus = tiny_corpus(&[("d1", "", "alpha beta beta")]);
        let vocab = Vocab::build(&corpus, &[], 100).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        vocab.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(loaded.len(), vocab.len());
        assert_eq!(loaded.id_of("beta"), vocab.id_of("beta"));
    }

    #[test]
    fn corpus_loader_parses_and_rejects() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tsv");
        fs::write(&path, "d1\tTitle\tBody\n").unwrap();
        let corpus = load_corpus(&path).unwrap();
        assert_eq!(corpus.get("d1").unwrap().title, "Title");
        assert_eq!(corpus.get("d1").unwrap().text, "Body");

        fs::write(&path, "d1\tTitle\tBody\nd2\tonly two\n").unwrap();
        let err = load_corpus(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "error names line 2: {err}");

        fs::write(&path, "d1\ta\tb\nd1\tc\td\n").unwrap();
        assert!(load_corpus(&path).is_err());
    }

    #[test]
    fn qrels_loader_validates_docs_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(&[("d1", "", "x")]);
        let path = dir.path().join("qrels.tsv");
        fs::write(&path, "q1\td1\t1\n").unwrap();
        let qrels = load_qrels(&path, &corpus).unwrap();
        assert_eq!(qrels.relevant_docs("q1"), vec!["d1"]);

        fs::write(&path, "q1\td9\t1\n").unwrap();
        let err = load_qrels(&path, &corpus).unwrap_err().to_string();
        assert!(err.contains("d9"), "error names the offending id: {err}");

        fs::write(&path, "q1\td1\t2\n").unwrap();
        assert!(load_qrels(&path, &corpus).is_err());

        fs::write(&path, "q1\td1\t1\nq1\td1\t1\n").unwrap();
        assert!(load_qrels(&path, &corpus).is_err());
    }

    #[test]
    fn answers_loader_splits_on_double_pipe() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("answers.tsv");
        fs::write(&path, "q1\tparis||the capital\n").unwrap();
        let answers = load_answers(&path).unwrap();
        assert_eq!(answers["q1"], vec!["paris", "the capital"]);
    }

    #[test]
    fn instance_rejects_positive_among_negatives() {
        let d = Document::new("d1", "", "x");
        assert!(Instance::new("q1", "x", d.clone(), vec![d]).is_err());
    }

    #[test]
    fn dataset_rejects_duplicate_query_ids() {
        let d = Document::new("d1", "", "x");
        let n = Document::new("d2", "", "y");
        let i1 = Instance::new("q1", "x", d.clone(), vec![n.clone()]).unwrap();
        let i2 = Instance::new("q1", "x", d, vec![n]).unwrap();
        assert!(Dataset::new("train", vec![i1, i2]).is_err());
    }

    #[test]
    fn synth_is_deterministic() {
        let a = make_synthetic_dataset(7, 40, 12, 120, 4).unwrap();
        let b = make_synthetic_dataset(7, 40, 12, 120, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (da, db) = (dir.path().join("a"), dir.path().join("b"));
        fs::create_dir_all(&da).unwrap();
        fs::create_dir_all(&db).unwrap();
        a.write_files(&da).unwrap();
        b.write_files(&db).unwrap();
        for entry in fs::read_dir(&da).unwrap() {
            let name = entry.unwrap().file_name();
            let x = fs::read(da.join(&name)).unwrap();
            let y = fs::read(db.join(&name)).unwrap();
            assert_eq!(x, y, "file {name:?} differs between equal seeds");
        }
    }

    #[test]
    fn synth_answers_are_spans_of_positive_text() {
        let data = make_synthetic_dataset(3, 40, 12, 120, 4).unwrap();
        for split in [&data.train, &data.eval, &data.test] {
            for inst in &split.instances {
                let ans = &data.answers[&inst.query_id][0];
                let words = split_tokens(&inst.positive.text);
                let span = split_tokens(ans);
                let found = words
                    .windows(span.len())
                    .any(|w| w == span.as_slice());
                assert!(found, "answer {ans:?} not a token span of positive text");
            }
        }
    }

    #[test]
    fn synth_splits_are_disjoint_and_sized() {
        let data = make_synthetic_dataset(5, 60, 30, 150, 4).unwrap();
        assert_eq!(data.train.len(), 20);
        assert_eq!(data.eval.len(), 5);
        assert_eq!(data.test.len(), 5);
        let ids = |d: &Dataset| -> BTreeSet<String> {
            d.instances.iter().map(|i| i.query_id.clone()).collect()
        };
        let (a, b, c) = (ids(&data.train), ids(&data.eval), ids(&data.test));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
    }

    #[test]
    fn synth_rejects_infeasible_sizes() {
        assert!(make_synthetic_dataset(1, 5, 10, 120, 4).is_err());
        assert!(make_synthetic_dataset(1, 40, 12, 30, 4).is_err());
        assert!(make_synthetic_dataset(1, 40, 4, 120, 4).is_err());
    }
}
