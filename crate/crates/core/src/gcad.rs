//! Gated cross-attention decoder.
//!
//! Each layer runs causal self-attention over the shifted answer, then fuses
//! two cross-attentions (onto the encoder context and onto the grounding
//! features) through elementwise sigmoid gates, then an FFN:
//!
//! ```text
//! E = MultiHead(J, c_t, c_t)        α = σ(W_E [J, E] + b_E)
//! G = MultiHead(J, v_g, v_g)        β = σ(W_G [J, G] + b_G)
//! P = α ∘ E + β ∘ G
//! ```

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::{sublayer, AttentionMask, FeedForward, LayerNormParams, Linear, MultiHeadAttention, TextEmbedder};
use crate::params::ParamStore;
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Debug)]
pub struct GatedCrossAttention {
    pub context_attn: MultiHeadAttention,
    pub grounding_attn: MultiHeadAttention,
    /// `W_E`, `b_E`
    pub context_gate: Linear,
    /// `W_G`, `b_G`
    pub grounding_gate: Linear,
}

impl GatedCrossAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let m = cfg.d_model;
        Ok(Self {
            context_attn: MultiHeadAttention::new(store, &format!("{prefix}.context_attn"), m, cfg.heads, rng)?,
            grounding_attn: MultiHeadAttention::new(store, &format!("{prefix}.grounding_attn"), m, cfg.heads, rng)?,
            context_gate: Linear::new(store, &format!("{prefix}.gate_e"), 2 * m, m, true, rng),
            grounding_gate: Linear::new(store, &format!("{prefix}.gate_g"), 2 * m, m, true, rng),
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        j: Var,
        context: Var,
        grounding: Var,
    ) -> Result<Var> {
        let e = self.context_attn.forward(tape, store, j, context, None)?;
        let g = self.grounding_attn.forward(tape, store, j, grounding, None)?;
        let je = tape.concat(&[j, e], 1)?;
        let alpha = self.context_gate.forward(tape, store, je)?;
        let alpha = tape.sigmoid(alpha);
        let jg = tape.concat(&[j, g], 1)?;
        let beta = self.grounding_gate.forward(tape, store, jg)?;
        let beta = tape.sigmoid(beta);
        tape.record("gate_alpha", alpha);
        tape.record("gate_beta", beta);
        tape.record("context_attn_out", e);
        tape.record("grounding_attn_out", g);
        let ae = tape.mul(alpha, e)?;
        let bg = tape.mul(beta, g)?;
        tape.add(ae, bg)
    }
}

#[derive(Clone, Debug)]
pub struct GcaLayer {
    self_attn: MultiHeadAttention,
    self_norm: LayerNormParams,
    pub gca: GatedCrossAttention,
    gca_norm: LayerNormParams,
    ffn: FeedForward,
    ffn_norm: LayerNormParams,
}

impl GcaLayer {
    fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (m, eps) = (cfg.d_model, cfg.layer_norm_eps);
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{prefix}.self_attn"), m, cfg.heads, rng)?,
            self_norm: LayerNormParams::new(store, &format!("{prefix}.self_attn_norm"), m, eps),
            gca: GatedCrossAttention::new(store, &format!("{prefix}.gca"), cfg, rng)?,
            gca_norm: LayerNormParams::new(store, &format!("{prefix}.gca_norm"), m, eps),
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), m, cfg.d_ff, rng),
            ffn_norm: LayerNormParams::new(store, &format!("{prefix}.ffn_norm"), m, eps),
        })
    }

    fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        r: Var,
        mask: &AttentionMask,
        context: Var,
        grounding: Var,
    ) -> Result<Var> {
        let j = self.self_attn.forward(tape, store, r, r, Some(mask))?;
        let j = sublayer(tape, store, &self.self_norm, r, j)?;
        let p = self.gca.forward(tape, store, j, context, grounding)?;
        let p = sublayer(tape, store, &self.gca_norm, j, p)?;
        let f = self.ffn.forward(tape, store, p)?;
        sublayer(tape, store, &self.ffn_norm, p, f)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<GcaLayer>,
    /// Output projection to vocabulary logits.
    pub head: Linear,
    max_answer_len: usize,
    length_normalize: bool,
}

impl Decoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let layers = (0..cfg.decoder_layers)
            .map(|n| GcaLayer::new(store, &format!("decoder.layer{n}"), cfg, rng))
            .collect::<Result<_>>()?;
        let head = Linear::new(store, "output_head", cfg.d_model, cfg.vocab_size, true, rng);
        Ok(Self {
            layers,
            head,
            max_answer_len: cfg.max_answer_len,
            length_normalize: cfg.length_normalize,
        })
    }

    /// Vocabulary logits for every input position (`Z × vocab`); position `z`
    /// sees inputs `0..=z` only.
    #[allow(clippy::too_many_arguments)]
    pub fn logits<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        embedder: &TextEmbedder<T>,
        inputs: &[usize],
        context: Var,
        grounding: Var,
    ) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::contract("decoder needs at least the BOS input"));
        }
        let mask = AttentionMask::causal(inputs.len());
        let mut r = embedder.embed(tape, store, inputs)?;
        for layer in &self.layers {
            r = layer.forward(tape, store, r, &mask, context, grounding)?;
        }
        self.head.forward(tape, store, r)
    }

    /// Teacher-forced word probabilities for `BOS, answer…`; row `z` predicts
    /// answer token `z` (the final row predicts EOS).
    pub fn decode_teacher_forced<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        embedder: &TextEmbedder<T>,
        answer: &[usize],
        context: Var,
        grounding: Var,
    ) -> Result<Var> {
        if answer.is_empty() {
            return Err(Error::contract("empty answer"));
        }
        let inputs = shifted_inputs(answer);
        let logits = self.logits(tape, store, embedder, &inputs, context, grounding)?;
        tape.softmax(logits, 1)
    }

    /// Mean cross-entropy over the answer tokens and the closing EOS.
    pub fn loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        embedder: &TextEmbedder<T>,
        answer: &[usize],
        context: Var,
        grounding: Var,
    ) -> Result<Var> {
        if answer.is_empty() {
            return Err(Error::contract("empty answer"));
        }
        let inputs = shifted_inputs(answer);
        let targets = shifted_targets(answer);
        let logits = self.logits(tape, store, embedder, &inputs, context, grounding)?;
        let logp = tape.log_softmax(logits, 1)?;
        let picked = tape.pick(logp, &targets)?;
        let mean = tape.mean(picked);
        Ok(tape.scale(mean, -T::one()))
    }

    /// Greedy decoding from BOS until EOS or `max_len` tokens.
    pub fn generate<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        embedder: &TextEmbedder<T>,
        context: Var,
        grounding: Var,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let mut inputs = vec![BOS];
        let mut out = Vec::new();
        while out.len() < max_len {
            let logits = self.logits(tape, store, embedder, &inputs, context, grounding)?;
            let vocab = tape.shape(logits)[1];
            let last = &tape.value(logits)[(inputs.len() - 1) * vocab..];
            let next = argmax(last);
            if next == EOS {
                break;
            }
            out.push(next);
            inputs.push(next);
        }
        Ok(out)
    }

    /// Log-likelihood of `candidate` followed by EOS (summed, or averaged per
    /// token when length normalization is on). Candidates longer than the
    /// answer limit are truncated.
    pub fn score_candidate<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        embedder: &TextEmbedder<T>,
        candidate: &[usize],
        context: Var,
        grounding: Var,
    ) -> Result<f64> {
        let cand = &candidate[..candidate.len().min(self.max_answer_len)];
        let inputs = shifted_inputs(cand);
        let targets = shifted_targets(cand);
        let logits = self.logits(tape, store, embedder, &inputs, context, grounding)?;
        let logp = tape.log_softmax(logits, 1)?;
        let picked = tape.pick(logp, &targets)?;
        let total: f64 = tape.value(picked).iter().map(|v| v.as_f64()).sum();
        Ok(if self.length_normalize {
            total / targets.len() as f64
        } else {
            total
        })
    }

    pub fn max_answer_len(&self) -> usize {
        self.max_answer_len
    }
}

pub fn shifted_inputs(answer: &[usize]) -> Vec<usize> {
    std::iter::once(BOS).chain(answer.iter().copied()).collect()
}

pub fn shifted_targets(answer: &[usize]) -> Vec<usize> {
    answer.iter().copied().chain(std::iter::once(EOS)).collect()
}

/// First index of the maximum.
fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
