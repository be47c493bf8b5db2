//! Incremental multimodal encoder.
//!
//! Round `i` encodes its utterance against that round's grounding features and
//! the previous context state, producing `c_i`. The recursion starts from the
//! caption embedding (`c_0 = u_0`); the current question is encoded last with
//! the same structure.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::{EncodedDialogue, SEP};
use crate::error::{Error, Result};
use crate::grounding::GroundingEncoder;
use crate::nn::{sublayer, FeedForward, LayerNormParams, MultiHeadAttention, TextEmbedder};
use crate::params::ParamStore;
use crate::tensor::{Real, Tape, Var};

/// Context state `c_i` carried from round `i` to round `i + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContextState {
    pub round: usize,
    pub state: Var,
}

impl ContextState {
    /// `c_0`: the caption features, untouched by any layer.
    pub fn initial(caption: Var) -> Self {
        Self {
            round: 0,
            state: caption,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MiteLayer {
    self_attn: MultiHeadAttention,
    self_norm: LayerNormParams,
    cross_attn: MultiHeadAttention,
    cross_norm: LayerNormParams,
    history_attn: MultiHeadAttention,
    history_norm: LayerNormParams,
    ffn: FeedForward,
    ffn_norm: LayerNormParams,
}

impl MiteLayer {
    fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (m, eps) = (cfg.d_model, cfg.layer_norm_eps);
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{prefix}.self_attn"), m, cfg.heads, rng)?,
            self_norm: LayerNormParams::new(store, &format!("{prefix}.self_attn_norm"), m, eps),
            cross_attn: MultiHeadAttention::new(store, &format!("{prefix}.cross_attn"), m, cfg.heads, rng)?,
            cross_norm: LayerNormParams::new(store, &format!("{prefix}.cross_attn_norm"), m, eps),
            history_attn: MultiHeadAttention::new(store, &format!("{prefix}.history_attn"), m, cfg.heads, rng)?,
            history_norm: LayerNormParams::new(store, &format!("{prefix}.history_attn_norm"), m, eps),
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), m, cfg.d_ff, rng),
            ffn_norm: LayerNormParams::new(store, &format!("{prefix}.ffn_norm"), m, eps),
        })
    }

    fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        grounding: Var,
        history: Var,
    ) -> Result<Var> {
        let a = self.self_attn.forward(tape, store, x, x, None)?;
        let a = sublayer(tape, store, &self.self_norm, x, a)?;
        let b = self.cross_attn.forward(tape, store, a, grounding, None)?;
        let b = sublayer(tape, store, &self.cross_norm, a, b)?;
        let f = self.history_attn.forward(tape, store, b, history, None)?;
        let f = sublayer(tape, store, &self.history_norm, b, f)?;
        let c = self.ffn.forward(tape, store, f)?;
        sublayer(tape, store, &self.ffn_norm, f, c)
    }
}

/// A stack of N_h encoder layers.
#[derive(Clone, Debug)]
pub struct MiteStack {
    layers: Vec<MiteLayer>,
}

impl MiteStack {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let layers = (0..cfg.encoder_layers)
            .map(|n| MiteLayer::new(store, &format!("{prefix}.layer{n}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// `c_i = MITE(v_g, u, c_{i-1})`. `prev` must belong to round `round - 1`.
    pub fn encode_round<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        grounding: Var,
        utterance: Var,
        prev: ContextState,
        round: usize,
    ) -> Result<ContextState> {
        if prev.round + 1 != round {
            return Err(Error::contract(format!(
                "round {round} encoded after context of round {}",
                prev.round
            )));
        }
        let mut x = utterance;
        for layer in &self.layers {
            x = layer.forward(tape, store, x, grounding, prev.state)?;
        }
        Ok(ContextState { round, state: x })
    }
}

/// Output of encoding a dialogue up to the current question.
#[derive(Clone, Debug)]
pub struct DialogueEncoding {
    /// `c_0 ..= c_t`
    pub contexts: Vec<ContextState>,
    /// Grounding features `v_{g_t}` of the current question.
    pub grounding: Var,
}

impl DialogueEncoding {
    pub fn current(&self) -> ContextState {
        *self.contexts.last().expect("at least c_0 is present")
    }
}

/// History encoder plus the encoder for the current question, which shares
/// the history weights unless configured otherwise.
#[derive(Clone, Debug)]
pub struct IncrementalEncoder {
    history: MiteStack,
    current: Option<MiteStack>,
}

impl IncrementalEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let history = MiteStack::new(store, "encoder", cfg, rng)?;
        let current = if cfg.tie_final_round {
            None
        } else {
            Some(MiteStack::new(store, "encoder_current", cfg, rng)?)
        };
        Ok(Self { history, current })
    }

    pub fn current_stack(&self) -> &MiteStack {
        self.current.as_ref().unwrap_or(&self.history)
    }

    pub fn history_stack(&self) -> &MiteStack {
        &self.history
    }

    /// Encodes rounds `1..t` as question+SEP+answer history, then the question of
    /// round `t` alone.
    #[allow(clippy::too_many_arguments)]
    pub fn encode_dialogue<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        embedder: &TextEmbedder<T>,
        grounding: &GroundingEncoder,
        dialogue: &EncodedDialogue,
        t: usize,
        use_vg: bool,
    ) -> Result<DialogueEncoding> {
        let current = dialogue.round(t)?;
        let caption = embedder.embed(tape, store, &dialogue.caption)?;
        let mut contexts = vec![ContextState::initial(caption)];
        for i in 1..t {
            let r = &dialogue.rounds[i - 1];
            let answer = r.answer.as_ref().ok_or_else(|| {
                Error::data(
                    format!("rounds[{}].answer", i - 1),
                    format!("history round {i} of image {} has no answer", dialogue.image_id),
                )
            })?;
            let mut tokens = Vec::with_capacity(r.question.len() + answer.len() + 1);
            tokens.extend_from_slice(&r.question);
            tokens.push(SEP);
            tokens.extend_from_slice(answer);
            let u = embedder.embed(tape, store, &tokens)?;
            let vg = grounding.for_round(tape, store, &dialogue.image, &r.grounding, i, use_vg)?;
            let prev = *contexts.last().expect("non-empty");
            contexts.push(self.history.encode_round(tape, store, vg, u, prev, i)?);
        }
        let q = embedder.embed(tape, store, &current.question)?;
        let vg = grounding.for_round(tape, store, &dialogue.image, &current.grounding, t, use_vg)?;
        let prev = *contexts.last().expect("non-empty");
        contexts.push(self.current_stack().encode_round(tape, store, vg, q, prev, t)?);
        Ok(DialogueEncoding {
            contexts,
            grounding: vg,
        })
    }
}
