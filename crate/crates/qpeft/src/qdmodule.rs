//! Query-dependent hint modules: map a (query, document) token pair to a
//! short sequence of soft prefix embeddings for the frozen LM.
//!
//! Variant R selects the document tokens most similar to the query (by
//! cosine, outside the gradient path) and passes their trainable embeddings
//! through a small MLP. Variant A cross-attends query embeddings over
//! document embeddings with multi-head attention, then applies the MLP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::minilm::{embed, LMConfig, LMParams};
use crate::numcore::{DetRng, Matrix, NodeId, ParamId, ParamStore, Scalar, Tape};

/// Which hint module produces the soft prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QDVariant {
    R,
    A,
}

impl std::str::FromStr for QDVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<QDVariant> {
        match s {
            "r" | "R" => Ok(QDVariant::R),
            "a" | "A" => Ok(QDVariant::A),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Hint-module shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QDConfig {
    pub variant: QDVariant,
    /// Distinct document tokens kept by variant R.
    pub k: usize,
    /// Attention heads used by variant A.
    pub heads: usize,
    /// Affine layers in the output MLP (0, 1, or 2).
    pub mlp_layers: usize,
}

impl QDConfig {
    pub fn new(variant: QDVariant) -> QDConfig {
        QDConfig {
            variant,
            k: 10,
            heads: 2,
            mlp_layers: 1,
        }
    }

    pub fn validate(&self, lm: &LMConfig) -> Result<()> {
        if self.mlp_layers > 2 {
            return Err(Error::Config(format!(
                "mlp_layers {} not in 0..=2",
                self.mlp_layers
            )));
        }
        match self.variant {
            QDVariant::R => {
                if self.k == 0 {
                    return Err(Error::Config("variant r needs k >= 1".into()));
                }
            }
            QDVariant::A => {
                if self.heads == 0 || lm.model_dim % self.heads != 0 {
                    return Err(Error::Config(format!(
                        "model_dim {} not divisible by heads {}",
                        lm.model_dim, self.heads
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Trainable hint-module tensors (the θ that training updates).
#[derive(Debug, Clone)]
pub struct QDParams {
    /// Trainable copy of the LM token embedding, V̂×d.
    pub f_embed: ParamId,
    /// Cross-attention projections; present for variant A only.
    pub attn: Option<AttnParams>,
    /// (weight d×d, bias 1×d) per MLP layer.
    pub mlp: Vec<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
pub struct AttnParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl QDParams {
    /// Every tensor id in fixed declaration order.
    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.f_embed];
        if let Some(a) = &self.attn {
            ids.extend([a.wq, a.wk, a.wv, a.wo]);
        }
        for &(w, b) in &self.mlp {
            ids.extend([w, b]);
        }
        ids
    }

    /// Rebind the handle set by tensor name against a store that already
    /// holds the hint-module tensors (e.g. loaded from a checkpoint).
    pub fn from_store<S: Scalar>(
        store: &ParamStore<S>,
        lm_config: &LMConfig,
        config: &QDConfig,
    ) -> Result<QDParams> {
        config.validate(lm_config)?;
        let find = |name: &str| -> Result<ParamId> {
            store.id_of(name).ok_or_else(|| {
                Error::Contract(format!("store is missing hint tensor {name:?}"))
            })
        };
        let attn = match config.variant {
            QDVariant::R => None,
            QDVariant::A => Some(AttnParams {
                wq: find("qd.attn.wq")?,
                wk: find("qd.attn.wk")?,
                wv: find("qd.attn.wv")?,
                wo: find("qd.attn.wo")?,
            }),
        };
        let mut mlp = Vec::with_capacity(config.mlp_layers);
        for i in 0..config.mlp_layers {
            mlp.push((find(&format!("qd.mlp{i}.w"))?, find(&format!("qd.mlp{i}.b"))?));
        }
        Ok(QDParams {
            f_embed: find("qd.f_embed")?,
            attn,
            mlp,
        })
    }
}

/// Register freshly initialized hint-module tensors (trainable).
///
/// `f_embed` starts as an exact copy of the LM token embedding; attention
/// projections start at N(0, 0.02); MLP layers start near the identity
/// (I + N(0, 0.02), zero bias) so the hint initially passes the selected
/// or attended embeddings through almost unchanged.
pub fn init_qd_params<S: Scalar>(
    store: &mut ParamStore<S>,
    lm_params: &LMParams,
    lm_config: &LMConfig,
    config: &QDConfig,
    seed: u64,
) -> Result<QDParams> {
    config.validate(lm_config)?;
    let d = lm_config.model_dim;
    let mut rng = DetRng::derived(seed, "qd-init");
    let std = S::from_c(0.02);

    let f_embed = store.insert("qd.f_embed", store.value(lm_params.token_embed).clone(), true);
    let attn = match config.variant {
        QDVariant::R => None,
        QDVariant::A => Some(AttnParams {
            wq: store.insert("qd.attn.wq", rng.normal_matrix(d, d, std), true),
            wk: store.insert("qd.attn.wk", rng.normal_matrix(d, d, std), true),
            wv: store.insert("qd.attn.wv", rng.normal_matrix(d, d, std), true),
            wo: store.insert("qd.attn.wo", rng.normal_matrix(d, d, std), true),
        }),
    };
    let mut mlp = Vec::with_capacity(config.mlp_layers);
    for i in 0..config.mlp_layers {
        // The last layer starts at zero so the whole module is a no-op at
        // initialization: hint rows contribute nothing until training opens
        // them up, and the scoring model starts from the plain-likelihood
        // baseline instead of from randomly perturbed inputs. Earlier layers
        // start near the identity so the zero layer still sees a full-rank
        // input once its gradient arrives.
        let w = if i + 1 == config.mlp_layers {
            Matrix::zeros(d, d)
        } else {
            let mut w = rng.normal_matrix(d, d, std);
            for j in 0..d {
                let v = w.get(j, j) + S::one();
                w.set(j, j, v);
            }
            w
        };
        let wid = store.insert(&format!("qd.mlp{i}.w"), w, true);
        let bid = store.insert(&format!("qd.mlp{i}.b"), Matrix::zeros(1, d), true);
        mlp.push((wid, bid));
    }
    Ok(QDParams { f_embed, attn, mlp })
}

/// Pairwise cosine similarity between the rows of `a` and the rows of `b`.
/// A zero-norm row yields cosine 0 against everything.
pub fn cosine_matrix<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>) -> Result<Matrix<S>> {
    if a.cols() != b.cols() {
        return Err(Error::Dim(format!(
            "cosine_matrix: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let norms = |m: &Matrix<S>| -> Vec<S> {
        (0..m.rows())
            .map(|i| {
                m.row(i)
                    .iter()
                    .fold(S::zero(), |acc, &x| acc + x * x)
                    .sqrt()
            })
            .collect()
    };
    let an = norms(a);
    let bn = norms(b);
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            if an[i] > S::zero() && bn[j] > S::zero() {
                let dot = a
                    .row(i)
                    .iter()
                    .zip(b.row(j))
                    .fold(S::zero(), |acc, (&x, &y)| acc + x * y);
                out.set(i, j, dot / (an[i] * bn[j]));
            }
        }
    }
    out.check_finite("cosine_matrix")?;
    Ok(out)
}

/// The up-to-k distinct document token ids with the highest similarity to
/// any query position. A token's score is the maximum over all of its
/// occurrences and all query rows; ties break toward the smaller token id.
pub fn topk_unique<S: Scalar>(
    scores: &Matrix<S>,
    doc_ids: &[usize],
    k: usize,
) -> Result<Vec<usize>> {
    if scores.cols() != doc_ids.len() {
        return Err(Error::Dim(format!(
            "topk_unique: {} score columns vs {} doc tokens",
            scores.cols(),
            doc_ids.len()
        )));
    }
    let mut best: std::collections::BTreeMap<usize, S> = std::collections::BTreeMap::new();
    for i in 0..scores.rows() {
        for (j, &tok) in doc_ids.iter().enumerate() {
            let s = scores.get(i, j);
            best.entry(tok)
                .and_modify(|m| {
                    if s > *m {
                        *m = s;
                    }
                })
                .or_insert(s);
        }
    }
    let mut ranked: Vec<(usize, S)> = best.into_iter().collect();
    ranked.sort_by(|x, y| {
        y.1.partial_cmp(&x.1)
            .expect("finite scores")
            .then(x.0.cmp(&y.0))
    });
    Ok(ranked.into_iter().take(k).map(|(tok, _)| tok).collect())
}

/// Apply the output MLP: affine layers with tanh in between, nothing after
/// the last. Zero layers is the identity.
pub fn mlp_apply<S: Scalar>(
    tape: &mut Tape<'_, S>,
    mlp: &[(ParamId, ParamId)],
    mut x: NodeId,
) -> Result<NodeId> {
    for (i, &(w, b)) in mlp.iter().enumerate() {
        let wn = tape.param(w);
        let bn = tape.param(b);
        x = tape.matmul(x, wn)?;
        x = tape.add_row(x, bn)?;
        if i + 1 < mlp.len() {
            x = tape.tanh(x)?;
        }
    }
    Ok(x)
}

/// Variant R hint: k'×d rows for the k' ≤ k selected distinct doc tokens.
///
/// The cosine scoring and selection happen outside the tape, so gradients
/// flow only through the selected `f_embed` rows and the MLP. An empty
/// document (or a selection of nothing) yields a 0×d hint.
pub fn qd_r_hint<S: Scalar>(
    tape: &mut Tape<'_, S>,
    store: &ParamStore<S>,
    lm_params: &LMParams,
    params: &QDParams,
    config: &QDConfig,
    query_ids: &[usize],
    doc_ids: &[usize],
) -> Result<NodeId> {
    debug_assert!(matches!(config.variant, QDVariant::R));
    let selected = select_r_tokens(store, lm_params, params, config, query_ids, doc_ids)?;
    let f = tape.param(params.f_embed);
    let rows = tape.gather_rows(f, &selected)?;
    mlp_apply(tape, &params.mlp, rows)
}

/// The detached token selection used by variant R.
pub fn select_r_tokens<S: Scalar>(
    store: &ParamStore<S>,
    lm_params: &LMParams,
    params: &QDParams,
    config: &QDConfig,
    query_ids: &[usize],
    doc_ids: &[usize],
) -> Result<Vec<usize>> {
    if doc_ids.is_empty() {
        return Ok(Vec::new());
    }
    let gather = |table: &Matrix<S>, ids: &[usize]| -> Result<Matrix<S>> {
        let mut m = Matrix::zeros(ids.len(), table.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id >= table.rows() {
                return Err(Error::UnknownId(format!("token id {id} out of range")));
            }
            m.row_mut(r).copy_from_slice(table.row(id));
        }
        Ok(m)
    };
    let q = gather(store.value(params.f_embed), query_ids)?;
    let d = gather(store.value(lm_params.token_embed), doc_ids)?;
    let cos = cosine_matrix(&q, &d)?;
    topk_unique(&cos, doc_ids, config.k)
}

/// Variant A hint: |q|×d, one row per query token, computed by multi-head
/// cross-attention from query embeddings over document embeddings
/// (no causal mask, no positional terms), then the MLP.
/// An empty document is an error; an empty query yields a 0×d hint.
pub fn qd_a_hint<S: Scalar>(
    tape: &mut Tape<'_, S>,
    lm_params: &LMParams,
    lm_config: &LMConfig,
    params: &QDParams,
    config: &QDConfig,
    query_ids: &[usize],
    doc_ids: &[usize],
) -> Result<NodeId> {
    debug_assert!(matches!(config.variant, QDVariant::A));
    let attn = params
        .attn
        .as_ref()
        .ok_or_else(|| Error::Contract("variant a called without attention tensors".into()))?;
    if doc_ids.is_empty() {
        return Err(Error::Contract(
            "variant a needs a non-empty document".into(),
        ));
    }
    let d = lm_config.model_dim;
    let dh = d / config.heads;
    let scale = S::from_c(1.0 / (dh as f64).sqrt());

    let f = tape.param(params.f_embed);
    let q_rows = tape.gather_rows(f, query_ids)?;
    let d_rows = embed(tape, lm_params, doc_ids)?;

    let wq = tape.param(attn.wq);
    let wk = tape.param(attn.wk);
    let wv = tape.param(attn.wv);
    let q = tape.matmul(q_rows, wq)?;
    let k = tape.matmul(d_rows, wk)?;
    let v = tape.matmul(d_rows, wv)?;
    let mut heads = Vec::with_capacity(config.heads);
    for i in 0..config.heads {
        let qh = tape.slice_cols(q, i * dh, dh)?;
        let kh = tape.slice_cols(k, i * dh, dh)?;
        let vh = tape.slice_cols(v, i * dh, dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let attn_w = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(attn_w, vh)?);
    }
    let cat = tape.concat_cols(&heads)?;
    let wo = tape.param(attn.wo);
    let out = tape.matmul(cat, wo)?;
    mlp_apply(tape, &params.mlp, out)
}

/// Dispatch on the configured variant.
pub fn qd_hint<S: Scalar>(
    tape: &mut Tape<'_, S>,
    store: &ParamStore<S>,
    lm_params: &LMParams,
    lm_config: &LMConfig,
    params: &QDParams,
    config: &QDConfig,
    query_ids: &[usize],
    doc_ids: &[usize],
) -> Result<NodeId> {
    match config.variant {
        QDVariant::R => qd_r_hint(tape, store, lm_params, params, config, query_ids, doc_ids),
        QDVariant::A => qd_a_hint(
            tape, lm_params, lm_config, params, config, query_ids, doc_ids,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minilm::init_lm_params;

    fn lm_fixture(vocab: usize) -> (ParamStore<f64>, LMParams, LMConfig) {
        let mut config = LMConfig::new(vocab);
        config.model_dim = 8;
        config.layers = 1;
        config.heads = 2;
        config.ffn_dim = 16;
        config.max_seq_len = 32;
        config.seed = 21;
        let mut store = ParamStore::new();
        let params = init_lm_params(&mut store, &config).unwrap();
        store.freeze_all();
        (store, params, config)
    }

    fn qd_fixture(
        variant: QDVariant,
        mlp_layers: usize,
    ) -> (ParamStore<f64>, LMParams, LMConfig, QDParams, QDConfig) {
        let (mut store, lm_params, lm_config) = lm_fixture(20);
        let mut config = QDConfig::new(variant);
        config.k = 3;
        config.mlp_layers = mlp_layers;
        let params = init_qd_params(&mut store, &lm_params, &lm_config, &config, 5).unwrap();
        (store, lm_params, lm_config, params, config)
    }

    #[test]
    fn cosine_matches_hand_values() {
        let a = Matrix::from_vec(3, 2, vec![1.0, 0.0, 3.0, 4.0, 0.0, 0.0]).unwrap();
        let b = Matrix::from_vec(2, 2, vec![0.0, 2.0, 1.0, 0.0]).unwrap();
        let c: Matrix<f64> = cosine_matrix(&a, &b).unwrap();
        assert_eq!(c.get(0, 0), 0.0);
        assert_eq!(c.get(0, 1), 1.0);
        assert!((c.get(1, 0) - 0.8).abs() < 1e-15);
        assert!((c.get(1, 1) - 0.6).abs() < 1e-15);
        // Zero-norm row: cosine 0 everywhere by convention.
        assert_eq!(c.get(2, 0), 0.0);
        assert_eq!(c.get(2, 1), 0.0);
    }

    #[test]
    fn topk_takes_max_over_occurrences_and_breaks_ties_upward() {
        // doc tokens:      7    3    7    5
        // query row 0:   0.1  0.9  0.3  0.5
        // query row 1:   0.2  0.0  0.8  0.5
        // per-token max: 7→0.8, 3→0.9, 5→0.5
        let scores: Matrix<f64> =
            Matrix::from_vec(2, 4, vec![0.1, 0.9, 0.3, 0.5, 0.2, 0.0, 0.8, 0.5]).unwrap();
        let doc = [7, 3, 7, 5];
        assert_eq!(topk_unique(&scores, &doc, 2).unwrap(), vec![3, 7]);
        assert_eq!(topk_unique(&scores, &doc, 10).unwrap(), vec![3, 7, 5]);

        // Exact tie between ids 9 and 2: ascending id wins.
        let scores: Matrix<f64> = Matrix::from_vec(1, 2, vec![0.5, 0.5]).unwrap();
        assert_eq!(topk_unique(&scores, &[9, 2], 1).unwrap(), vec![2]);

        assert!(topk_unique(&scores, &[1], 1).is_err());
    }

    #[test]
    fn topk_matches_brute_force_on_random_cases() {
        let mut rng = DetRng::new(44);
        for _ in 0..200 {
            let q = 1 + rng.below(4) as usize;
            let m = 1 + rng.below(12) as usize;
            let k = 1 + rng.below(6) as usize;
            let doc: Vec<usize> = (0..m).map(|_| rng.below(8) as usize).collect();
            let scores: Matrix<f64> =
                Matrix::from_fn(q, m, |_, _| (rng.uniform::<f64>() * 16.0).floor() / 16.0);

            let mut want: Vec<(usize, f64)> = Vec::new();
            for tok in 0..8 {
                let mut best = f64::NEG_INFINITY;
                for i in 0..q {
                    for (j, &t) in doc.iter().enumerate() {
                        if t == tok {
                            best = best.max(scores.get(i, j));
                        }
                    }
                }
                if best > f64::NEG_INFINITY {
                    want.push((tok, best));
                }
            }
            want.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
            let want: Vec<usize> = want.into_iter().take(k).map(|(t, _)| t).collect();
            assert_eq!(topk_unique(&scores, &doc, k).unwrap(), want);
        }
    }

    #[test]
    fn f_embed_starts_as_exact_copy_of_lm_embedding() {
        let (store, lm_params, _, params, _) = qd_fixture(QDVariant::R, 1);
        assert_eq!(store.value(params.f_embed), store.value(lm_params.token_embed));
        assert!(store.tensor(params.f_embed).trainable());
        assert!(!store.tensor(lm_params.token_embed).trainable());
    }

    #[test]
    fn r_hint_has_selected_rows_and_identityish_start() {
        let (store, lm_params, lm_config, params, config) = qd_fixture(QDVariant::R, 0);
        let query = [1, 2, 3];
        let doc = [4, 5, 6, 5, 7, 8];
        let selected =
            select_r_tokens(&store, &lm_params, &params, &config, &query, &doc).unwrap();
        assert_eq!(selected.len(), 3);

        let mut tape = Tape::new(&store);
        let hint = qd_r_hint(
            &mut tape, &store, &lm_params, &params, &config, &query, &doc,
        )
        .unwrap();
        assert_eq!(tape.value(hint).shape(), (3, lm_config.model_dim));
        // Zero MLP layers: the hint is exactly the selected embedding rows.
        for (r, &tok) in selected.iter().enumerate() {
            assert_eq!(tape.value(hint).row(r), store.value(params.f_embed).row(tok));
        }

        // Empty document: empty hint.
        let mut tape = Tape::new(&store);
        let hint = qd_r_hint(&mut tape, &store, &lm_params, &params, &config, &query, &[]).unwrap();
        assert_eq!(tape.value(hint).shape(), (0, lm_config.model_dim));
    }

    #[test]
    fn r_gradients_touch_only_selected_rows_and_mlp() {
        let (mut store, lm_params, lm_config, params, config) = qd_fixture(QDVariant::R, 1);
        // The last MLP layer initializes to zero (no-op hint), which would
        // numerically mask the f_embed gradient; open the path so the
        // structural sparsity pattern is visible.
        let d = lm_config.model_dim;
        let mut eye = Matrix::zeros(d, d);
        for j in 0..d {
            eye.set(j, j, 1.0);
        }
        let (w_last, _) = *params.mlp.last().unwrap();
        *store.tensor_mut(w_last).value_mut() = eye;
        let query = [1, 2];
        let doc = [4, 5, 6];
        let selected =
            select_r_tokens(&store, &lm_params, &params, &config, &query, &doc).unwrap();

        let mut tape = Tape::new(&store);
        let hint = qd_r_hint(
            &mut tape, &store, &lm_params, &params, &config, &query, &doc,
        )
        .unwrap();
        let ones_l = tape
            .constant(Matrix::filled(1, tape.value(hint).rows(), 1.0))
            .unwrap();
        let ones_r = tape
            .constant(Matrix::filled(lm_config.model_dim, 1, 1.0))
            .unwrap();
        let s = tape.matmul(ones_l, hint).unwrap();
        let s = tape.matmul(s, ones_r).unwrap();
        let grads = tape.backward(s).unwrap();

        let keys: Vec<ParamId> = grads.keys().copied().collect();
        let mut want = vec![params.f_embed];
        want.extend(params.mlp.iter().flat_map(|&(w, b)| [w, b]));
        want.sort();
        assert_eq!(keys, want, "gradients only for hint-module tensors");

        let fg = &grads[&params.f_embed];
        for r in 0..fg.rows() {
            let nonzero = fg.row(r).iter().any(|&x| x != 0.0);
            assert_eq!(nonzero, selected.contains(&r), "row {r}");
        }
    }

    #[test]
    fn a_hint_shape_and_empty_rules() {
        let (store, lm_params, lm_config, params, config) = qd_fixture(QDVariant::A, 1);
        let mut tape = Tape::new(&store);
        let hint = qd_a_hint(
            &mut tape, &lm_params, &lm_config, &params, &config, &[1, 2, 3, 4], &[5, 6],
        )
        .unwrap();
        assert_eq!(tape.value(hint).shape(), (4, lm_config.model_dim));

        let mut tape = Tape::new(&store);
        assert!(qd_a_hint(
            &mut tape, &lm_params, &lm_config, &params, &config, &[1], &[],
        )
        .is_err());

        let mut tape = Tape::new(&store);
        let empty_q = qd_a_hint(
            &mut tape, &lm_params, &lm_config, &params, &config, &[], &[5, 6],
        )
        .unwrap();
        assert_eq!(tape.value(empty_q).shape(), (0, lm_config.model_dim));
    }

    #[test]
    fn a_hint_ignores_document_token_order() {
        let (store, lm_params, lm_config, params, config) = qd_fixture(QDVariant::A, 2);
        let query = [1, 2, 3];
        let run = |doc: &[usize]| -> Matrix<f64> {
            let mut tape = Tape::new(&store);
            let hint = qd_a_hint(
                &mut tape, &lm_params, &lm_config, &params, &config, &query, doc,
            )
            .unwrap();
            tape.value(hint).clone()
        };
        let a = run(&[4, 5, 6, 7, 8]);
        let b = run(&[8, 6, 4, 7, 5]);
        let diff = a.max_abs_diff(&b).unwrap();
        assert!(diff < 1e-6, "diff {diff}");
    }

    #[test]
    fn a_hint_single_key_closed_form() {
        // One document token: every softmax weight is exactly 1, so the
        // attention output is embed(doc)·W_V broadcast to each query row,
        // then ·W_O and the MLP.
        let (store, lm_params, lm_config, params, config) = qd_fixture(QDVariant::A, 1);
        let attn = params.attn.as_ref().unwrap();
        let query = [1, 2, 3];
        let doc = [9];

        let mut tape = Tape::new(&store);
        let hint = qd_a_hint(
            &mut tape, &lm_params, &lm_config, &params, &config, &query, &doc,
        )
        .unwrap();

        let e_doc = {
            let table = store.value(lm_params.token_embed);
            Matrix::from_vec(1, lm_config.model_dim, table.row(9).to_vec()).unwrap()
        };
        let v_row = e_doc
            .matmul(store.value(attn.wv))
            .unwrap()
            .matmul(store.value(attn.wo))
            .unwrap();
        let (w0, b0) = params.mlp[0];
        let mlp_row = v_row.matmul(store.value(w0)).unwrap();
        for i in 0..query.len() {
            for j in 0..lm_config.model_dim {
                let want = mlp_row.get(0, j) + store.value(b0).get(0, j);
                assert!(
                    (tape.value(hint).get(i, j) - want).abs() < 1e-12,
                    "({i},{j})"
                );
            }
        }
    }

    #[test]
    fn hint_gradients_match_finite_differences() {
        use crate::numcore::finite_diff_check;
        for variant in [QDVariant::R, QDVariant::A] {
            let (mut store, lm_params, lm_config, params, config) = qd_fixture(variant, 2);
            // Fresh-init weights are so small that attention gradients sit
            // at roundoff scale; inflate them so every path carries signal.
            let mut inflate = vec![params.f_embed];
            if let Some(a) = &params.attn {
                inflate.extend([a.wq, a.wk, a.wv, a.wo]);
            }
            for id in inflate {
                let m = store.tensor_mut(id).value_mut();
                *m = m.scale(10.0);
            }
            let query = [1, 2, 3];
            let doc = [4, 5, 6, 7];
            let mut wrng = DetRng::new(77);
            let d = lm_config.model_dim;
            let rows = match variant {
                QDVariant::R => select_r_tokens(&store, &lm_params, &params, &config, &query, &doc)
                    .unwrap()
                    .len(),
                QDVariant::A => query.len(),
            };
            let u = wrng.normal_matrix(1, rows, 1.0);
            let w = wrng.normal_matrix(d, 1, 1.0);
            let report = finite_diff_check(
                &mut store,
                |store, want_grad| {
                    let mut tape = Tape::new(store);
                    let hint = qd_hint(
                        &mut tape, store, &lm_params, &lm_config, &params, &config, &query, &doc,
                    )?;
                    let un = tape.constant(u.clone())?;
                    let wn = tape.constant(w.clone())?;
                    let s = tape.matmul(un, hint)?;
                    let s = tape.matmul(s, wn)?;
                    let loss = tape.scalar(s)?;
                    let grads = if want_grad {
                        Some(tape.backward(s)?)
                    } else {
                        None
                    };
                    Ok((loss, grads))
                },
                1e-5,
                60,
                9,
            )
            .unwrap();
            assert!(
                report.max_rel_err < 1e-6,
                "{variant:?}: max rel err {} at {:?}",
                report.max_rel_err,
                report.worst
            );
        }
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let (store_a, .., params_a, _) = qd_fixture(QDVariant::A, 2);
        let (store_b, .., params_b, _) = qd_fixture(QDVariant::A, 2);
        for (ia, ib) in params_a.all_ids().into_iter().zip(params_b.all_ids()) {
            assert_eq!(store_a.value(ia), store_b.value(ib));
        }

        let (mut store, lm_params, lm_config) = lm_fixture(10);
        let mut bad = QDConfig::new(QDVariant::A);
        bad.heads = 3;
        assert!(init_qd_params(&mut store, &lm_params, &lm_config, &bad, 0).is_err());
        let mut bad = QDConfig::new(QDVariant::R);
        bad.mlp_layers = 3;
        assert!(init_qd_params(&mut store, &lm_params, &lm_config, &bad, 0).is_err());
    }
}
