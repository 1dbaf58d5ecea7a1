//! Miniature decoder-only causal language model: learned token + absolute
//! positional embeddings, pre-norm transformer blocks, final layer norm,
//! output projection. Computes continuation log-likelihoods over arbitrary
//! prefix embedding sequences; pretrainable, then frozen.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{
    Adam, AdamConfig, DetRng, GradMap, Matrix, NodeId, ParamId, ParamStore, Scalar, Tape,
};
use crate::textdata::{Corpus, Query, BOS, EOS};

/// Mini-LM shape and seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LMConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl LMConfig {
    pub fn new(vocab_size: usize) -> LMConfig {
        LMConfig {
            vocab_size,
            model_dim: 32,
            layers: 2,
            heads: 2,
            ffn_dim: 128,
            max_seq_len: 256,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config("vocab_size < 4".into()));
        }
        if self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.layers == 0 || self.ffn_dim == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("zero-sized model dimension".into()));
        }
        Ok(())
    }
}

/// Parameter handles for one transformer block.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub fc1: ParamId,
    pub fc1_bias: ParamId,
    pub fc2: ParamId,
    pub fc2_bias: ParamId,
}

/// Handles to every mini-LM tensor (the frozen Φ after pretraining).
#[derive(Debug, Clone)]
pub struct LMParams {
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<LayerParams>,
    pub final_ln_gain: ParamId,
    pub final_ln_bias: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl LMParams {
    /// Every tensor id in fixed declaration order.
    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.token_embed, self.pos_embed];
        for b in &self.blocks {
            ids.extend([
                b.ln1_gain, b.ln1_bias, b.wq, b.wk, b.wv, b.wo, b.ln2_gain, b.ln2_bias,
                b.fc1, b.fc1_bias, b.fc2, b.fc2_bias,
            ]);
        }
        ids.extend([
            self.final_ln_gain,
            self.final_ln_bias,
            self.w_out,
            self.b_out,
        ]);
        ids
    }

    /// Rebind the handle set by tensor name against a store that already
    /// holds the LM tensors (e.g. loaded from a checkpoint).
    pub fn from_store<S: Scalar>(store: &ParamStore<S>, config: &LMConfig) -> Result<LMParams> {
        config.validate()?;
        let find = |name: &str| -> Result<ParamId> {
            store
                .id_of(name)
                .ok_or_else(|| Error::Contract(format!("store is missing LM tensor {name:?}")))
        };
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |suffix: &str| format!("lm.block{l}.{suffix}");
            blocks.push(LayerParams {
                ln1_gain: find(&p("ln1.gain"))?,
                ln1_bias: find(&p("ln1.bias"))?,
                wq: find(&p("wq"))?,
                wk: find(&p("wk"))?,
                wv: find(&p("wv"))?,
                wo: find(&p("wo"))?,
                ln2_gain: find(&p("ln2.gain"))?,
                ln2_bias: find(&p("ln2.bias"))?,
                fc1: find(&p("fc1"))?,
                fc1_bias: find(&p("fc1.bias"))?,
                fc2: find(&p("fc2"))?,
                fc2_bias: find(&p("fc2.bias"))?,
            });
        }
        let params = LMParams {
            token_embed: find("lm.token_embed")?,
            pos_embed: find("lm.pos_embed")?,
            blocks,
            final_ln_gain: find("lm.final_ln.gain")?,
            final_ln_bias: find("lm.final_ln.bias")?,
            w_out: find("lm.w_out")?,
            b_out: find("lm.b_out")?,
        };
        let embed = store.value(params.token_embed);
        if embed.rows() != config.vocab_size || embed.cols() != config.model_dim {
            return Err(Error::Contract(format!(
                "lm.token_embed is {}x{} but the config declares {}x{}",
                embed.rows(),
                embed.cols(),
                config.vocab_size,
                config.model_dim
            )));
        }
        Ok(params)
    }
}

/// Register freshly initialized LM tensors (trainable) into the store.
///
/// Token embeddings and projections start at N(0, 0.02); the residual-path
/// output projections are shrunk by 1/sqrt(2·layers); position embeddings,
/// layer-norm biases, and all other biases start at 0; layer-norm gains at 1.
pub fn init_lm_params<S: Scalar>(store: &mut ParamStore<S>, config: &LMConfig) -> Result<LMParams> {
    config.validate()?;
    let mut rng = DetRng::derived(config.seed, "lm-init");
    let std = S::from_c(0.02);
    let resid_std = S::from_c(0.02 / (2.0 * config.layers as f64).sqrt());
    let (v, d, f) = (config.vocab_size, config.model_dim, config.ffn_dim);

    let token_embed = store.insert("lm.token_embed", rng.normal_matrix(v, d, std), true);
    // Positions start at zero rather than noise: rows beyond the lengths seen
    // during pretraining then contribute nothing at scoring time, instead of
    // injecting length-correlated noise into every token that lands there.
    let pos_embed = store.insert(
        "lm.pos_embed",
        Matrix::zeros(config.max_seq_len, d),
        true,
    );
    let mut blocks = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let p = |suffix: &str| format!("lm.block{l}.{suffix}");
        blocks.push(LayerParams {
            ln1_gain: store.insert(&p("ln1.gain"), Matrix::filled(1, d, S::one()), true),
            ln1_bias: store.insert(&p("ln1.bias"), Matrix::zeros(1, d), true),
            wq: store.insert(&p("wq"), rng.normal_matrix(d, d, std), true),
            wk: store.insert(&p("wk"), rng.normal_matrix(d, d, std), true),
            wv: store.insert(&p("wv"), rng.normal_matrix(d, d, std), true),
            wo: store.insert(&p("wo"), rng.normal_matrix(d, d, resid_std), true),
            ln2_gain: store.insert(&p("ln2.gain"), Matrix::filled(1, d, S::one()), true),
            ln2_bias: store.insert(&p("ln2.bias"), Matrix::zeros(1, d), true),
            fc1: store.insert(&p("fc1"), rng.normal_matrix(d, f, std), true),
            fc1_bias: store.insert(&p("fc1.bias"), Matrix::zeros(1, f), true),
            fc2: store.insert(&p("fc2"), rng.normal_matrix(f, d, resid_std), true),
            fc2_bias: store.insert(&p("fc2.bias"), Matrix::zeros(1, d), true),
        });
    }
    let final_ln_gain = store.insert("lm.final_ln.gain", Matrix::filled(1, d, S::one()), true);
    let final_ln_bias = store.insert("lm.final_ln.bias", Matrix::zeros(1, d), true);
    let w_out = store.insert("lm.w_out", rng.normal_matrix(d, v, std), true);
    let b_out = store.insert("lm.b_out", Matrix::zeros(1, v), true);
    Ok(LMParams {
        token_embed,
        pos_embed,
        blocks,
        final_ln_gain,
        final_ln_bias,
        w_out,
        b_out,
    })
}

/// Embedding rows for a token sequence (no positional component).
pub fn embed<S: Scalar>(
    tape: &mut Tape<'_, S>,
    params: &LMParams,
    ids: &[usize],
) -> Result<NodeId> {
    let table = tape.param(params.token_embed);
    tape.gather_rows(table, ids)
}

/// Transformer forward up to (and including) the final layer norm: T×d.
///
/// Positions are added by absolute index over the whole input, hint rows
/// included; attention is causally masked.
pub fn lm_hidden<S: Scalar>(
    tape: &mut Tape<'_, S>,
    params: &LMParams,
    config: &LMConfig,
    input: NodeId,
) -> Result<NodeId> {
    let t_len = tape.value(input).rows();
    if t_len > config.max_seq_len {
        return Err(Error::Contract(format!(
            "sequence length {t_len} exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    if tape.value(input).cols() != config.model_dim {
        return Err(Error::Dim(format!(
            "lm input width {} != model_dim {}",
            tape.value(input).cols(),
            config.model_dim
        )));
    }
    let d = config.model_dim;
    let dh = d / config.heads;
    let scale = S::from_c(1.0 / (dh as f64).sqrt());

    let pos_table = tape.param(params.pos_embed);
    let positions: Vec<usize> = (0..t_len).collect();
    let pos = tape.gather_rows(pos_table, &positions)?;
    let mut x = tape.add(input, pos)?;

    for block in &params.blocks {
        let ln1_g = tape.param(block.ln1_gain);
        let ln1_b = tape.param(block.ln1_bias);
        let h = tape.layer_norm(x, ln1_g, ln1_b)?;

        let wq = tape.param(block.wq);
        let wk = tape.param(block.wk);
        let wv = tape.param(block.wv);
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let mut heads = Vec::with_capacity(config.heads);
        for i in 0..config.heads {
            let qh = tape.slice_cols(q, i * dh, dh)?;
            let kh = tape.slice_cols(k, i * dh, dh)?;
            let vh = tape.slice_cols(v, i * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.causal_softmax_rows(scores)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let wo = tape.param(block.wo);
        let attn_out = tape.matmul(cat, wo)?;
        x = tape.add(x, attn_out)?;

        let ln2_g = tape.param(block.ln2_gain);
        let ln2_b = tape.param(block.ln2_bias);
        let h2 = tape.layer_norm(x, ln2_g, ln2_b)?;
        let fc1 = tape.param(block.fc1);
        let fc1_b = tape.param(block.fc1_bias);
        let fc2 = tape.param(block.fc2);
        let fc2_b = tape.param(block.fc2_bias);
        let f = tape.matmul(h2, fc1)?;
        let f = tape.add_row(f, fc1_b)?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, fc2)?;
        let ffn_out = tape.add_row(f, fc2_b)?;
        x = tape.add(x, ffn_out)?;
    }

    let fg = tape.param(params.final_ln_gain);
    let fb = tape.param(params.final_ln_bias);
    tape.layer_norm(x, fg, fb)
}

/// Project hidden rows to vocabulary logits.
pub fn lm_logits_from_hidden<S: Scalar>(
    tape: &mut Tape<'_, S>,
    params: &LMParams,
    hidden: NodeId,
) -> Result<NodeId> {
    let w = tape.param(params.w_out);
    let b = tape.param(params.b_out);
    let logits = tape.matmul(hidden, w)?;
    tape.add_row(logits, b)
}

/// Full forward: input embeddings T×d → logits T×V̂.
pub fn lm_forward<S: Scalar>(
    tape: &mut Tape<'_, S>,
    params: &LMParams,
    config: &LMConfig,
    input: NodeId,
) -> Result<NodeId> {
    let hidden = lm_hidden(tape, params, config, input)?;
    lm_logits_from_hidden(tape, params, hidden)
}

/// Σ_l log p(target_l | prefix, target_<l), natural log, as a 1x1 node.
///
/// One forward pass over [prefix ; embed(target_0..n-1)] suffices: the
/// conditional for target_l sits at the row immediately preceding it, and
/// only those n rows are projected to logits. An empty prefix with targets
/// is anchored on a BOS embedding so the first conditional exists.
pub fn continuation_loglik<S: Scalar>(
    tape: &mut Tape<'_, S>,
    params: &LMParams,
    config: &LMConfig,
    prefix: NodeId,
    target_ids: &[usize],
) -> Result<NodeId> {
    let n = target_ids.len();
    if n == 0 {
        return tape.constant(Matrix::zeros(1, 1));
    }
    let prefix = if tape.value(prefix).rows() == 0 {
        embed(tape, params, &[BOS])?
    } else {
        prefix
    };
    let p_len = tape.value(prefix).rows();
    if p_len + n > config.max_seq_len {
        return Err(Error::Contract(format!(
            "prefix {p_len} + targets {n} exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    let input = if n > 1 {
        let tail = embed(tape, params, &target_ids[..n - 1])?;
        tape.concat_rows(&[prefix, tail])?
    } else {
        prefix
    };
    let hidden = lm_hidden(tape, params, config, input)?;
    let rows = tape.slice_rows(hidden, p_len - 1, n)?;
    let logits = lm_logits_from_hidden(tape, params, rows)?;
    let logp = tape.log_softmax_rows(logits)?;
    let picks: Vec<(usize, usize)> = target_ids.iter().enumerate().map(|(l, &t)| (l, t)).collect();
    tape.pick_sum(logp, &picks)
}

/// Next-token cross-entropy training over corpus (and optionally query)
/// text, then freeze everything. Each step consumes one [BOS]+text+[EOS]
/// sequence in seeded-shuffled order, reshuffling per epoch.
pub fn pretrain_lm<S: Scalar>(
    corpus: &Corpus,
    queries: &[Query],
    config: &LMConfig,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<(ParamStore<S>, LMParams)> {
    config.validate()?;
    let mut sequences: Vec<Vec<usize>> = Vec::new();
    for doc in corpus.docs() {
        sequences.push(wrap_sequence(&doc.token_ids, config.max_seq_len));
    }
    for q in queries {
        sequences.push(wrap_sequence(&q.token_ids, config.max_seq_len));
    }
    sequences.retain(|s| s.len() >= 2);
    if sequences.is_empty() {
        return Err(Error::Contract(
            "pretrain_lm: no non-empty sequences (was the corpus tokenized?)".into(),
        ));
    }

    let mut store = ParamStore::new();
    let params = init_lm_params(&mut store, config)?;
    let mut adam = Adam::new(AdamConfig::with_lr(S::from_c(lr)));
    let mut shuffle_rng = DetRng::derived(seed, "pretrain-shuffle");
    let mut order: Vec<usize> = Vec::new();
    for step in 0..steps {
        if order.is_empty() {
            order = (0..sequences.len()).collect();
            shuffle_rng.shuffle(&mut order);
        }
        let seq = &sequences[order.pop().expect("nonempty order")];
        let grads = sequence_ce_grads(&store, &params, config, seq)
            .map_err(|e| Error::Contract(format!("pretrain step {step}: {e}")))?;
        store.accumulate_grads(&grads, S::one())?;
        adam.step(&mut store)?;
    }
    store.freeze_all();
    Ok((store, params))
}

fn wrap_sequence(ids: &[usize], max_len: usize) -> Vec<usize> {
    let body = &ids[..ids.len().min(max_len - 2)];
    let mut seq = Vec::with_capacity(body.len() + 2);
    seq.push(BOS);
    seq.extend_from_slice(body);
    seq.push(EOS);
    seq
}

/// Gradients of mean next-token cross-entropy for one sequence.
fn sequence_ce_grads<S: Scalar>(
    store: &ParamStore<S>,
    params: &LMParams,
    config: &LMConfig,
    seq: &[usize],
) -> Result<GradMap<S>> {
    let mut tape = Tape::new(store);
    let inputs = embed(&mut tape, params, &seq[..seq.len() - 1])?;
    let logits = lm_forward(&mut tape, params, config, inputs)?;
    let logp = tape.log_softmax_rows(logits)?;
    let picks: Vec<(usize, usize)> = seq[1..].iter().enumerate().map(|(l, &t)| (l, t)).collect();
    let total = tape.pick_sum(logp, &picks)?;
    let loss = tape.scale(total, S::from_c(-1.0 / picks.len() as f64))?;
    tape.backward(loss)
}
