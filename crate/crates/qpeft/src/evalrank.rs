//! Inference-time scoring and evaluation: hint-conditioned and plain
//! query-likelihood scoring, candidate-list reranking, Recall@k / Hit@k,
//! paired significance testing, and the report CSV.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bm25::ScoredRun;
use crate::error::{Error, Result};
use crate::minilm::{continuation_loglik, embed, LMConfig, LMParams};
use crate::numcore::{NodeId, ParamStore, Scalar, Tape};
use crate::qdmodule::{qd_a_hint, qd_r_hint, QDConfig, QDParams, QDVariant};
use crate::textdata::{split_tokens, Corpus, Qrels, Query};
use crate::trainer::assemble_input;

// --- prompt presets ---------------------------------------------------------

/// The five fixed instruction prompts; p4 is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptPreset {
    P1,
    P2,
    P3,
    #[default]
    P4,
    P5,
}

impl PromptPreset {
    pub const ALL: [PromptPreset; 5] = [
        PromptPreset::P1,
        PromptPreset::P2,
        PromptPreset::P3,
        PromptPreset::P4,
        PromptPreset::P5,
    ];

    pub fn id(self) -> &'static str {
        match self {
            PromptPreset::P1 => "p1",
            PromptPreset::P2 => "p2",
            PromptPreset::P3 => "p3",
            PromptPreset::P4 => "p4",
            PromptPreset::P5 => "p5",
        }
    }

    pub fn text(self) -> &'static str {
        match self {
            PromptPreset::P1 => "please generate a question for the input passage",
            PromptPreset::P2 => "please generate a Question for the input Passage",
            PromptPreset::P3 => "what is the question for the input passage",
            PromptPreset::P4 => "given the hints, please generate a question for the input passage",
            PromptPreset::P5 => "please generate a question for the input passage based on the hints",
        }
    }
}

impl std::str::FromStr for PromptPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<PromptPreset> {
        PromptPreset::ALL
            .into_iter()
            .find(|p| p.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown prompt preset {s:?}")))
    }
}

/// Whether a query's score is the summed or the length-averaged token
/// log-likelihood. Per query the two differ by a constant factor, so
/// rankings are identical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    #[default]
    Sum,
    Mean,
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<ScoreMode> {
        match s {
            "sum" => Ok(ScoreMode::Sum),
            "mean" => Ok(ScoreMode::Mean),
            other => Err(Error::Config(format!("unknown score mode {other:?}"))),
        }
    }
}

/// One in-context demonstration, prepended as
/// [exemplar doc ; prompt ; exemplar query] before the scored document.
#[derive(Debug, Clone)]
pub struct Exemplar {
    pub doc_ids: Vec<usize>,
    pub query_ids: Vec<usize>,
}

// --- scoring ----------------------------------------------------------------

/// Everything needed to score (query, document) pairs: the frozen LM, the
/// optional trained hint module, the prompt, and the scoring options.
pub struct ScoreSetup<'a, S: Scalar> {
    pub store: &'a ParamStore<S>,
    pub lm_params: &'a LMParams,
    pub lm_config: &'a LMConfig,
    /// Hint module; `None` scores with an empty hint (the plain baseline).
    pub qd: Option<(&'a QDParams, &'a QDConfig)>,
    pub prompt_ids: &'a [usize],
    pub mode: ScoreMode,
    pub exemplar: Option<&'a Exemplar>,
}

/// A score plus whether the document had to be tail-truncated to fit.
pub struct Scored {
    pub node: NodeId,
    pub truncated: bool,
}

impl<'a, S: Scalar> ScoreSetup<'a, S> {
    /// Upper bound on hint rows, known before the hint is computed (the
    /// document truncation budget depends on it).
    fn hint_bound(&self, query_len: usize) -> usize {
        match self.qd {
            None => 0,
            Some((_, cfg)) => match cfg.variant {
                QDVariant::R => cfg.k,
                QDVariant::A => query_len,
            },
        }
    }

    /// Build the score I(q | d, s) as a tape node:
    /// prefix = [exemplar? ; doc ; hint? ; prompt], targets = query tokens.
    pub fn score_node(
        &self,
        tape: &mut Tape<'_, S>,
        query_ids: &[usize],
        doc_ids: &[usize],
    ) -> Result<Scored> {
        if self.exemplar.is_some() && self.qd.is_some() {
            return Err(Error::Contract(
                "exemplars are a plain-baseline option; hint scoring takes none".into(),
            ));
        }
        let ex_len = self
            .exemplar
            .map(|e| e.doc_ids.len() + self.prompt_ids.len() + e.query_ids.len())
            .unwrap_or(0);
        let fixed = ex_len
            + self.hint_bound(query_ids.len())
            + self.prompt_ids.len()
            + query_ids.len();
        let budget = self
            .lm_config
            .max_seq_len
            .checked_sub(fixed)
            .ok_or_else(|| {
                Error::Contract(format!(
                    "prompt/hint/query occupy {fixed} rows alone; max_seq_len is {}",
                    self.lm_config.max_seq_len
                ))
            })?;
        let truncated = doc_ids.len() > budget;
        let doc_kept = &doc_ids[..doc_ids.len().min(budget)];

        let hint = match self.qd {
            None => None,
            Some((params, cfg)) => Some(match cfg.variant {
                QDVariant::R => qd_r_hint(
                    tape,
                    self.store,
                    self.lm_params,
                    params,
                    cfg,
                    query_ids,
                    doc_kept,
                )?,
                QDVariant::A => qd_a_hint(
                    tape,
                    self.lm_params,
                    self.lm_config,
                    params,
                    cfg,
                    query_ids,
                    doc_kept,
                )?,
            }),
        };
        let core = assemble_input(tape, self.lm_params, doc_kept, hint, self.prompt_ids)?;
        let prefix = match self.exemplar {
            None => core,
            Some(e) => {
                let mut ids = e.doc_ids.clone();
                ids.extend_from_slice(self.prompt_ids);
                ids.extend_from_slice(&e.query_ids);
                let ex = embed(tape, self.lm_params, &ids)?;
                tape.concat_rows(&[ex, core])?
            }
        };
        let ll = continuation_loglik(tape, self.lm_params, self.lm_config, prefix, query_ids)?;
        let node = match self.mode {
            ScoreMode::Sum => ll,
            ScoreMode::Mean => {
                if query_ids.is_empty() {
                    ll
                } else {
                    tape.scale(ll, S::from_c(1.0 / query_ids.len() as f64))?
                }
            }
        };
        Ok(Scored { node, truncated })
    }

    /// Score on a fresh tape, returning the plain value.
    pub fn score(&self, query_ids: &[usize], doc_ids: &[usize]) -> Result<(f64, bool)> {
        let mut tape = Tape::new(self.store);
        let scored = self.score_node(&mut tape, query_ids, doc_ids)?;
        Ok((tape.scalar(scored.node)?.into_f64(), scored.truncated))
    }
}

/// Hint-conditioned query log-likelihood of `query_ids` given `doc_ids`.
#[allow(clippy::too_many_arguments)]
pub fn score_qpeft<S: Scalar>(
    store: &ParamStore<S>,
    lm_params: &LMParams,
    lm_config: &LMConfig,
    qd_params: &QDParams,
    qd_config: &QDConfig,
    prompt_ids: &[usize],
    mode: ScoreMode,
    query_ids: &[usize],
    doc_ids: &[usize],
) -> Result<f64> {
    let setup = ScoreSetup {
        store,
        lm_params,
        lm_config,
        qd: Some((qd_params, qd_config)),
        prompt_ids,
        mode,
        exemplar: None,
    };
    Ok(setup.score(query_ids, doc_ids)?.0)
}

/// Plain query log-likelihood (empty hint), with an optional in-context
/// exemplar.
#[allow(clippy::too_many_arguments)]
pub fn score_upr<S: Scalar>(
    store: &ParamStore<S>,
    lm_params: &LMParams,
    lm_config: &LMConfig,
    prompt_ids: &[usize],
    mode: ScoreMode,
    exemplar: Option<&Exemplar>,
    query_ids: &[usize],
    doc_ids: &[usize],
) -> Result<f64> {
    let setup = ScoreSetup {
        store,
        lm_params,
        lm_config,
        qd: None,
        prompt_ids,
        mode,
        exemplar,
    };
    Ok(setup.score(query_ids, doc_ids)?.0)
}

// --- reranking --------------------------------------------------------------

/// Rescore the top `depth` candidates of each query and reorder them by the
/// new scores (descending, ties by ascending doc_id). Candidates below the
/// reranked block keep their original order, carried on synthetic scores
/// strictly below the block minimum so the run stays properly ordered.
/// Queries absent from `candidates` are skipped and counted.
pub fn rerank<F>(
    candidates: &ScoredRun,
    queries: &[Query],
    depth: usize,
    mut scorer: F,
) -> Result<(ScoredRun, usize)>
where
    F: FnMut(&Query, &str) -> Result<f64>,
{
    if depth == 0 {
        return Err(Error::Contract("rerank depth must be >= 1".into()));
    }
    let mut out = ScoredRun::default();
    let mut missing = 0usize;
    for query in queries {
        let Some(entries) = candidates.get(&query.query_id) else {
            missing += 1;
            continue;
        };
        let cut = depth.min(entries.len());
        let mut block: Vec<(String, f64)> = Vec::with_capacity(cut);
        for (doc_id, _) in &entries[..cut] {
            let s = scorer(query, doc_id)?;
            if !s.is_finite() {
                return Err(Error::NonFinite(format!(
                    "score for query {} doc {doc_id}",
                    query.query_id
                )));
            }
            block.push((doc_id.clone(), s));
        }
        block.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));
        let floor = block.last().map(|&(_, s)| s).unwrap_or(0.0);
        for (i, (doc_id, _)) in entries[cut..].iter().enumerate() {
            block.push((doc_id.clone(), floor - 1.0 - i as f64));
        }
        out.set_query(&query.query_id, block)?;
    }
    Ok((out, missing))
}

// --- metrics ----------------------------------------------------------------

/// Per-query metric values plus their macro mean and the count of queries
/// excluded for missing ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricResult {
    pub per_query: BTreeMap<String, f64>,
    pub macro_mean: f64,
    pub excluded: usize,
}

fn finish(per_query: BTreeMap<String, f64>, excluded: usize) -> MetricResult {
    let macro_mean = if per_query.is_empty() {
        0.0
    } else {
        per_query.values().sum::<f64>() / per_query.len() as f64
    };
    MetricResult {
        per_query,
        macro_mean,
        excluded,
    }
}

/// Fraction of a query's relevant documents found in its top k, averaged
/// over queries. Queries with no relevant documents are excluded.
pub fn recall_at_k(run: &ScoredRun, qrels: &Qrels, k: usize) -> MetricResult {
    let mut per_query = BTreeMap::new();
    let mut excluded = 0usize;
    for qid in run.query_ids() {
        let relevant = qrels.relevant_docs(qid);
        if relevant.is_empty() {
            excluded += 1;
            continue;
        }
        let entries = run.get(qid).unwrap_or(&[]);
        let hits = entries
            .iter()
            .take(k)
            .filter(|(d, _)| relevant.contains(&d.as_str()))
            .count();
        per_query.insert(qid.to_string(), hits as f64 / relevant.len() as f64);
    }
    finish(per_query, excluded)
}

/// Does `answer` occur in `text` as a case-insensitive token-boundary span?
pub fn span_matches(text: &str, answer: &str) -> bool {
    let doc = split_tokens(text);
    let span = split_tokens(answer);
    if span.is_empty() || span.len() > doc.len() {
        return false;
    }
    doc.windows(span.len()).any(|w| w == span.as_slice())
}

/// 1 if any top-k document's text contains any annotated answer span for
/// the query, else 0; macro mean over queries with answers.
pub fn hit_at_k(
    run: &ScoredRun,
    answers: &BTreeMap<String, Vec<String>>,
    corpus: &Corpus,
    k: usize,
) -> MetricResult {
    let mut per_query = BTreeMap::new();
    let mut excluded = 0usize;
    for qid in run.query_ids() {
        let Some(spans) = answers.get(qid).filter(|s| !s.is_empty()) else {
            excluded += 1;
            continue;
        };
        let entries = run.get(qid).unwrap_or(&[]);
        let hit = entries.iter().take(k).any(|(doc_id, _)| {
            corpus
                .get(doc_id)
                .map(|d| spans.iter().any(|a| span_matches(&d.joined_text(), a)))
                .unwrap_or(false)
        });
        per_query.insert(qid.to_string(), if hit { 1.0 } else { 0.0 });
    }
    finish(per_query, excluded)
}

/// Qrels-membership fallback for Hit@k when no answer spans exist: 1 iff
/// any top-k document is judged relevant.
pub fn hit_at_k_from_qrels(run: &ScoredRun, qrels: &Qrels, k: usize) -> MetricResult {
    let mut per_query = BTreeMap::new();
    let mut excluded = 0usize;
    for qid in run.query_ids() {
        if qrels.relevant_docs(qid).is_empty() {
            excluded += 1;
            continue;
        }
        let entries = run.get(qid).unwrap_or(&[]);
        let hit = entries.iter().take(k).any(|(d, _)| qrels.is_relevant(qid, d));
        per_query.insert(qid.to_string(), if hit { 1.0 } else { 0.0 });
    }
    finish(per_query, excluded)
}

// --- paired t-test ----------------------------------------------------------

/// Two-sided paired t-test on aligned per-query values.
///
/// Returns (t, p) with p from the t distribution with n−1 degrees of
/// freedom. Zero-variance differences short-circuit: p = 1 when the mean
/// difference is 0, else p = 0.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "paired_ttest: {} vs {} values",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Contract("paired_ttest needs >= 2 pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n as f64 - 1.0);
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(mean), 0.0)
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let df = n as f64 - 1.0;
    let p = incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
    Ok((t, p.clamp(0.0, 1.0)))
}

/// ln Γ(x) by the Lanczos approximation (g = 7, 9 terms).
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection: Γ(x)Γ(1−x) = π / sin(πx).
        return std::f64::consts::PI.ln()
            - (std::f64::consts::PI * x).sin().ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta I_x(a, b) via Lentz's continued fraction.
fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-14;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=200 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

// --- report -----------------------------------------------------------------

/// One CSV-visible report line.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub system: String,
    pub metric: String,
    pub k: usize,
    pub value: f64,
    pub p_vs_retriever: Option<f64>,
    pub p_vs_upr: Option<f64>,
}

/// Metrics, significance, and improvements for a set of systems against
/// the first-stage retriever (and optionally a plain-baseline system).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    /// (system, metric, k) → per-query values backing the macro means.
    pub per_query: BTreeMap<(String, String, usize), BTreeMap<String, f64>>,
    /// (system, metric, k) → relative improvement over the retriever, in %.
    pub improvements: BTreeMap<(String, String, usize), f64>,
    pub excluded_queries: usize,
    /// True when Hit@k fell back to qrels membership (no answer spans).
    pub hit_used_qrels_fallback: bool,
}

/// Build the evaluation report over `systems` (name → run). `retriever`
/// must name one of them; `upr` optionally names the plain baseline for
/// the second p-value column.
#[allow(clippy::too_many_arguments)]
pub fn report(
    systems: &[(String, ScoredRun)],
    retriever: &str,
    upr: Option<&str>,
    qrels: &Qrels,
    answers: &BTreeMap<String, Vec<String>>,
    corpus: &Corpus,
    ks: &[usize],
) -> Result<EvalReport> {
    let find = |name: &str| -> Result<&ScoredRun> {
        systems
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r)
            .ok_or_else(|| Error::Contract(format!("system {name:?} not in report inputs")))
    };
    find(retriever)?;
    if let Some(u) = upr {
        find(u)?;
    }
    let hit_fallback = answers.is_empty();

    // Metric vectors for every system × metric × k.
    let mut results: BTreeMap<(String, String, usize), MetricResult> = BTreeMap::new();
    let mut excluded = 0usize;
    for (name, run) in systems {
        for &k in ks {
            let r = recall_at_k(run, qrels, k);
            excluded = excluded.max(r.excluded);
            results.insert((name.clone(), "recall".into(), k), r);
            let h = if hit_fallback {
                hit_at_k_from_qrels(run, qrels, k)
            } else {
                hit_at_k(run, answers, corpus, k)
            };
            excluded = excluded.max(h.excluded);
            results.insert((name.clone(), "hit".into(), k), h);
        }
    }

    // Paired p-values over the intersection of scored queries.
    let pvalue = |sys: &MetricResult, base: &MetricResult| -> Result<Option<f64>> {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (qid, &v) in &sys.per_query {
            if let Some(&w) = base.per_query.get(qid) {
                a.push(v);
                b.push(w);
            }
        }
        if a.len() < 2 {
            return Ok(None);
        }
        Ok(Some(paired_ttest(&a, &b)?.1))
    };

    let mut out = EvalReport {
        hit_used_qrels_fallback: hit_fallback,
        excluded_queries: excluded,
        ..EvalReport::default()
    };
    for (name, _) in systems {
        for metric in ["recall", "hit"] {
            for &k in ks {
                let key = (name.clone(), metric.to_string(), k);
                let res = &results[&key];
                let ret_res = &results[&(retriever.to_string(), metric.to_string(), k)];
                let p_ret = pvalue(res, ret_res)?;
                let p_upr = match upr {
                    Some(u) => pvalue(res, &results[&(u.to_string(), metric.to_string(), k)])?,
                    None => None,
                };
                if ret_res.macro_mean != 0.0 {
                    out.improvements.insert(
                        key.clone(),
                        (res.macro_mean - ret_res.macro_mean) / ret_res.macro_mean * 100.0,
                    );
                }
                out.per_query.insert(key, res.per_query.clone());
                out.rows.push(ReportRow {
                    system: name.clone(),
                    metric: metric.to_string(),
                    k,
                    value: res.macro_mean,
                    p_vs_retriever: p_ret,
                    p_vs_upr: p_upr,
                });
            }
        }
    }
    Ok(out)
}

/// Serialize report rows as `system,metric,k,value,p_vs_retriever,p_vs_upr`.
pub fn emit_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("system,metric,k,value,p_vs_retriever,p_vs_upr\n");
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.system,
            r.metric,
            r.k,
            r.value,
            fmt(r.p_vs_retriever),
            fmt(r.p_vs_upr)
        ));
    }
    s
}

/// Parse the exact output of [`emit_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "system,metric,k,value,p_vs_retriever,p_vs_upr")) => {}
        _ => return Err(Error::parse("report.csv", 1, "bad or missing header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::parse("report.csv", i + 1, "expected 6 fields"));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::parse("report.csv", i + 1, format!("bad {what}: {s:?}")))
        };
        let opt = |s: &str, what: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s, what).map(Some)
            }
        };
        rows.push(ReportRow {
            system: f[0].to_string(),
            metric: f[1].to_string(),
            k: f[2]
                .parse()
                .map_err(|_| Error::parse("report.csv", i + 1, format!("bad k: {:?}", f[2])))?,
            value: num(f[3], "value")?,
            p_vs_retriever: opt(f[4], "p_vs_retriever")?,
            p_vs_upr: opt(f[5], "p_vs_upr")?,
        });
    }
    Ok(rows)
}
