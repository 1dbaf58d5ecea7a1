//! BM25 first-stage retrieval: inverted index, Okapi scoring with
//! Lucene-style nonnegative idf, exhaustive top-K search, and run-file I/O.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::textdata::{Corpus, Document};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

/// Inverted index over a tokenized corpus.
#[derive(Debug, Clone)]
pub struct InvertedIndex {
    /// token id → (doc index, term frequency), sorted by doc index
    /// (doc indices follow corpus order; doc_ids resolve through `doc_ids`).
    postings: BTreeMap<usize, Vec<(usize, usize)>>,
    doc_ids: Vec<String>,
    /// Per-document term-frequency maps (the scoring source of truth).
    doc_terms: Vec<BTreeMap<usize, usize>>,
    doc_lens: Vec<usize>,
    avgdl: f64,
    n_docs: usize,
}

impl InvertedIndex {
    /// Index a corpus whose token caches are filled.
    pub fn build(corpus: &Corpus) -> Result<InvertedIndex> {
        if corpus.is_empty() {
            return Err(Error::Contract("build_index on empty corpus".into()));
        }
        let mut postings: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        let mut doc_ids = Vec::with_capacity(corpus.len());
        let mut doc_terms = Vec::with_capacity(corpus.len());
        let mut doc_lens = Vec::with_capacity(corpus.len());
        for (i, doc) in corpus.docs().iter().enumerate() {
            doc_ids.push(doc.doc_id.clone());
            doc_lens.push(doc.token_ids.len());
            let mut terms: BTreeMap<usize, usize> = BTreeMap::new();
            for &t in &doc.token_ids {
                *terms.entry(t).or_insert(0) += 1;
            }
            for (&t, &tf) in &terms {
                postings.entry(t).or_default().push((i, tf));
            }
            doc_terms.push(terms);
        }
        let total: usize = doc_lens.iter().sum();
        let avgdl = total as f64 / doc_lens.len() as f64;
        if avgdl <= 0.0 {
            return Err(Error::Contract("corpus has no tokens (avgdl = 0)".into()));
        }
        Ok(InvertedIndex {
            postings,
            doc_ids,
            doc_terms,
            doc_lens,
            avgdl,
            n_docs: corpus.len(),
        })
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_freq(&self, token: usize) -> usize {
        self.postings.get(&token).map_or(0, |p| p.len())
    }

    pub fn postings(&self, token: usize) -> &[(usize, usize)] {
        self.postings.get(&token).map_or(&[], |p| p.as_slice())
    }

    pub fn doc_len(&self, doc: usize) -> usize {
        self.doc_lens[doc]
    }

    pub fn doc_id(&self, doc: usize) -> &str {
        &self.doc_ids[doc]
    }

    /// ln(1 + (N − df + 0.5) / (df + 0.5)); nonnegative for any df ≤ N.
    pub fn idf(&self, token: usize) -> f64 {
        let n = self.n_docs as f64;
        let df = self.doc_freq(token) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Score from a document's term-frequency map; the single code path
    /// shared by `bm25_score` and `search` so both produce identical floats.
    fn score_terms(
        &self,
        query_ids: &[usize],
        terms: &BTreeMap<usize, usize>,
        dl: usize,
        k1: f64,
        b: f64,
    ) -> f64 {
        let norm = k1 * (1.0 - b + b * dl as f64 / self.avgdl);
        let mut score = 0.0;
        for &t in query_ids {
            let tf = terms.get(&t).copied().unwrap_or(0) as f64;
            if tf > 0.0 {
                score += self.idf(t) * tf * (k1 + 1.0) / (tf + norm);
            }
        }
        score
    }
}

/// Okapi BM25 score of one document for a query; query term multiplicity
/// counts (a repeated query term contributes once per repetition).
pub fn bm25_score(
    query_ids: &[usize],
    doc: &Document,
    index: &InvertedIndex,
    k1: f64,
    b: f64,
) -> f64 {
    let mut terms: BTreeMap<usize, usize> = BTreeMap::new();
    for &t in &doc.token_ids {
        *terms.entry(t).or_insert(0) += 1;
    }
    index.score_terms(query_ids, &terms, doc.token_ids.len(), k1, b)
}

/// Exhaustive top-K search: every document sharing at least one term with
/// the query is scored; descending score, ties by ascending doc_id.
pub fn search(
    query_ids: &[usize],
    index: &InvertedIndex,
    k: usize,
    k1: f64,
    b: f64,
) -> Vec<(String, f64)> {
    assert!(k >= 1, "search with K = 0");
    let mut candidates: BTreeSet<usize> = BTreeSet::new();
    for &t in query_ids {
        for &(doc, _) in index.postings(t) {
            candidates.insert(doc);
        }
    }
    let mut scored: Vec<(String, f64)> = candidates
        .into_iter()
        .map(|d| {
            let s = index.score_terms(query_ids, &index.doc_terms[d], index.doc_lens[d], k1, b);
            (index.doc_ids[d].clone(), s)
        })
        .collect();
    sort_run_entries(&mut scored);
    scored.truncate(k);
    scored
}

fn sort_run_entries(entries: &mut [(String, f64)]) {
    entries.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite scores")
            .then_with(|| a.0.cmp(&b.0))
    });
}

/// Per-query ordered candidate lists, serializable as a run file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredRun {
    by_query: BTreeMap<String, Vec<(String, f64)>>,
}

impl ScoredRun {
    pub fn new() -> ScoredRun {
        ScoredRun::default()
    }

    /// Install a query's candidates; entries are sorted by the run order
    /// (score descending, doc_id ascending) and duplicates rejected.
    pub fn set_query(&mut self, query_id: &str, mut entries: Vec<(String, f64)>) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (d, s) in &entries {
            if !s.is_finite() {
                return Err(Error::NonFinite(format!("score of ({query_id}, {d})")));
            }
            if !seen.insert(d.clone()) {
                return Err(Error::Contract(format!(
                    "duplicate doc {d:?} for query {query_id:?}"
                )));
            }
        }
        sort_run_entries(&mut entries);
        self.by_query.insert(query_id.to_string(), entries);
        Ok(())
    }

    pub fn get(&self, query_id: &str) -> Option<&[(String, f64)]> {
        self.by_query.get(query_id).map(|v| v.as_slice())
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

    /// `query_id Q0 doc_id rank score tag`, ranks from 1, 6-decimal scores.
    pub fn save(&self, path: &Path, tag: &str) -> Result<()> {
        let mut out = String::new();
        for (qid, entries) in &self.by_query {
            for (rank, (doc_id, score)) in entries.iter().enumerate() {
                writeln!(out, "{qid} Q0 {doc_id} {} {score:.6} {tag}", rank + 1)
                    .expect("string write");
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Parse a run file; entries are re-sorted per the tie rule, so
    /// out-of-order ranks are tolerated. Duplicate (query, doc) pairs error.
    pub fn load(path: &Path) -> Result<ScoredRun> {
        let text = fs::read_to_string(path)?;
        let pathname = path.display().to_string();
        let mut acc: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(Error::parse(
                    &pathname,
                    i + 1,
                    format!("expected 6 space-separated fields, got {}", f.len()),
                ));
            }
            if f[1] != "Q0" {
                return Err(Error::parse(
                    &pathname,
                    i + 1,
                    format!("second field must be Q0, got {:?}", f[1]),
                ));
            }
            let score: f64 = f[4].parse().map_err(|_| {
                Error::parse(&pathname, i + 1, format!("bad score {:?}", f[4]))
            })?;
            if !seen.insert((f[0].to_string(), f[2].to_string())) {
                return Err(Error::parse(
                    &pathname,
                    i + 1,
                    format!("duplicate ({:?}, {:?})", f[0], f[2]),
                ));
            }
            acc.entry(f[0].to_string())
                .or_default()
                .push((f[2].to_string(), score));
        }
        let mut run = ScoredRun::new();
        for (qid, entries) in acc {
            run.set_query(&qid, entries)?;
        }
        Ok(run)
    }
}
