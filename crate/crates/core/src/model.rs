//! The assembled model: shared text embedding, grounding encoder, incremental
//! encoder and gated decoder over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::ModelConfig;
use crate::data::EncodedDialogue;
use crate::error::{Error, Result};
use crate::gcad::Decoder;
use crate::grounding::GroundingEncoder;
use crate::mite::{DialogueEncoding, IncrementalEncoder};
use crate::nn::{EmbeddingTable, PositionalEncoder, TextEmbedder};
use crate::params::ParamStore;
use crate::tensor::{grad_check, GradCheckReport, Real, Tape, Tensor, Var};

/// Encoder outputs for one question, detached from any tape.
#[derive(Clone, Debug)]
pub struct QuestionContext<T> {
    /// `c_t`
    pub context: Tensor<T>,
    /// `v_{g_t}`
    pub grounding: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct MitvgModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub embedder: TextEmbedder<T>,
    pub grounding: GroundingEncoder,
    pub encoder: IncrementalEncoder,
    pub decoder: Decoder,
}

impl<T: Real> MitvgModel<T> {
    /// Builds a freshly initialized model; all randomness comes from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let table = EmbeddingTable::new(&mut params, config.vocab_size, config.d_model, &mut rng);
        let grounding = GroundingEncoder::new(&mut params, &config, &mut rng)?;
        let encoder = IncrementalEncoder::new(&mut params, &config, &mut rng)?;
        let decoder = Decoder::new(&mut params, &config, &mut rng)?;
        let embedder = TextEmbedder {
            table,
            positions: PositionalEncoder::new(config.d_model, config.max_positions()),
        };
        Ok(Self {
            config,
            params,
            embedder,
            grounding,
            encoder,
            decoder,
        })
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Real>(&self) -> MitvgModel<U> {
        MitvgModel {
            config: self.config.clone(),
            params: self.params.cast(),
            embedder: TextEmbedder {
                table: self.embedder.table.clone(),
                positions: PositionalEncoder::new(self.config.d_model, self.config.max_positions()),
            },
            grounding: self.grounding.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }

    fn check_image(&self, dialogue: &EncodedDialogue) -> Result<()> {
        if dialogue.image.dim() != self.config.feature_dim {
            return Err(Error::data(
                "features",
                format!(
                    "image {} has feature width {} but the model expects {}",
                    dialogue.image_id,
                    dialogue.image.dim(),
                    self.config.feature_dim
                ),
            ));
        }
        Ok(())
    }

    /// Encodes history rounds `1..t` and question `t` using `store`'s weights.
    pub fn encode_with(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        dialogue: &EncodedDialogue,
        t: usize,
    ) -> Result<DialogueEncoding> {
        self.check_image(dialogue)?;
        self.encoder.encode_dialogue(
            tape,
            store,
            &self.embedder,
            &self.grounding,
            dialogue,
            t,
            self.config.use_vg,
        )
    }

    pub fn encode(&self, tape: &mut Tape<T>, dialogue: &EncodedDialogue, t: usize) -> Result<DialogueEncoding> {
        self.encode_with(&self.params, tape, dialogue, t)
    }

    /// Teacher-forced mean cross-entropy of round `t`'s reference answer.
    pub fn loss_with(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        dialogue: &EncodedDialogue,
        t: usize,
    ) -> Result<Var> {
        let answer = dialogue.round(t)?.answer.as_ref().ok_or_else(|| {
            Error::data(
                format!("rounds[{}].answer", t - 1),
                format!("round {t} of image {} has no reference answer", dialogue.image_id),
            )
        })?;
        let enc = self.encode_with(store, tape, dialogue, t)?;
        self.decoder
            .loss(tape, store, &self.embedder, answer, enc.current().state, enc.grounding)
    }

    pub fn loss(&self, tape: &mut Tape<T>, dialogue: &EncodedDialogue, t: usize) -> Result<Var> {
        self.loss_with(&self.params, tape, dialogue, t)
    }

    /// Runs the encoder once and detaches `c_t` and `v_{g_t}`.
    pub fn question_context(&self, dialogue: &EncodedDialogue, t: usize) -> Result<QuestionContext<T>> {
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, dialogue, t)?;
        Ok(QuestionContext {
            context: tape.to_tensor(enc.current().state),
            grounding: tape.to_tensor(enc.grounding),
        })
    }

    /// Log-likelihood score of one candidate answer given detached encoder outputs.
    pub fn score_with_context(&self, ctx: &QuestionContext<T>, candidate: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let c = tape.constant(ctx.context.clone());
        let g = tape.constant(ctx.grounding.clone());
        self.decoder
            .score_candidate(&mut tape, &self.params, &self.embedder, candidate, c, g)
    }

    /// Scores every candidate of round `t`, in candidate order, in parallel.
    pub fn score_candidates(&self, dialogue: &EncodedDialogue, t: usize) -> Result<Vec<f64>> {
        let round = dialogue.round(t)?;
        let cands = round.candidates.as_ref().ok_or_else(|| {
            Error::data(
                format!("rounds[{}].candidates", t - 1),
                format!("round {t} of image {} has no candidate list", dialogue.image_id),
            )
        })?;
        let ctx = self.question_context(dialogue, t)?;
        cands
            .answers
            .par_iter()
            .map(|a| self.score_with_context(&ctx, a))
            .collect()
    }

    /// Greedy answer for round `t`, at most `max_len` tokens.
    pub fn generate(&self, dialogue: &EncodedDialogue, t: usize, max_len: usize) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, dialogue, t)?;
        self.decoder.generate(
            &mut tape,
            &self.params,
            &self.embedder,
            enc.current().state,
            enc.grounding,
            max_len,
        )
    }
}

impl MitvgModel<f64> {
    /// Compares tape gradients of round `t`'s loss with central differences.
    pub fn grad_check(&self, dialogue: &EncodedDialogue, t: usize, h: f64) -> Result<GradCheckReport> {
        grad_check(&self.params, |store, tape| self.loss_with(store, tape, dialogue, t), h)
    }
}
