//! Per-round visual grounding features.
//!
//! The grounded object rows (an oracle index list per question) are projected
//! to model width and refined by a stack of self-attention + FFN blocks. An
//! empty index list falls back to every object in the image. Object rows carry
//! no positional encoding, so the encoder is permutation-equivariant.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::ImageFeatures;
use crate::error::{Error, Result};
use crate::nn::{sublayer, FeedForward, LayerNormParams, Linear, MultiHeadAttention};
use crate::params::ParamStore;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Rows of `img` named by `indices` in the given order; all rows when empty.
pub fn select_grounding<T: Real>(img: &ImageFeatures, indices: &[usize], round: usize) -> Result<Tensor<T>> {
    if indices.is_empty() {
        return Ok(img.to_tensor());
    }
    let mut data = Vec::with_capacity(indices.len() * img.dim());
    for &k in indices {
        if k >= img.objects() {
            return Err(Error::data(
                "grounding",
                format!(
                    "round {round}: object index {k} out of range for image {} with {} objects",
                    img.image_id,
                    img.objects()
                ),
            ));
        }
        data.extend(img.row(k).iter().map(|&v| T::of_f64(v as f64)));
    }
    Tensor::new(vec![indices.len(), img.dim()], data)
}

#[derive(Clone, Debug)]
struct GroundingBlock {
    attn: MultiHeadAttention,
    attn_norm: LayerNormParams,
    ffn: FeedForward,
    ffn_norm: LayerNormParams,
}

#[derive(Clone, Debug)]
pub struct GroundingEncoder {
    projection: Linear,
    blocks: Vec<GroundingBlock>,
}

impl GroundingEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let projection = Linear::new(store, "grounding.projection", cfg.feature_dim, cfg.d_model, true, rng);
        let blocks = (0..cfg.grounding_layers)
            .map(|n| {
                let p = format!("grounding.block{n}");
                Ok(GroundingBlock {
                    attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), cfg.d_model, cfg.heads, rng)?,
                    attn_norm: LayerNormParams::new(
                        store,
                        &format!("{p}.self_attn_norm"),
                        cfg.d_model,
                        cfg.layer_norm_eps,
                    ),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), cfg.d_model, cfg.d_ff, rng),
                    ffn_norm: LayerNormParams::new(store, &format!("{p}.ffn_norm"), cfg.d_model, cfg.layer_norm_eps),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { projection, blocks })
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Projects `K' × V` object features to `K' × M` and refines them.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, objects: Var) -> Result<Var> {
        let mut x = self.projection.forward(tape, store, objects)?;
        for b in &self.blocks {
            let a = b.attn.forward(tape, store, x, x, None)?;
            let h = sublayer(tape, store, &b.attn_norm, x, a)?;
            let f = b.ffn.forward(tape, store, h)?;
            x = sublayer(tape, store, &b.ffn_norm, h, f)?;
        }
        Ok(x)
    }

    /// Grounding features for question round `round`. With `use_vg` off every
    /// object is used regardless of the index list.
    pub fn for_round<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        img: &ImageFeatures,
        indices: &[usize],
        round: usize,
        use_vg: bool,
    ) -> Result<Var> {
        let selected = if use_vg { indices } else { &[] };
        let rows = select_grounding(img, selected, round)?;
        let v0 = tape.constant(rows);
        self.encode(tape, store, v0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn image() -> ImageFeatures {
        ImageFeatures::new(5, 4, 3, (0..12).map(|i| i as f32 * 0.25 - 1.0).collect()).unwrap()
    }

    #[test]
    fn selection_examples() {
        let img = image();
        let one: Tensor<f64> = select_grounding(&img, &[2], 1).unwrap();
        assert_eq!(one.shape(), &[1, 3]);
        assert_eq!(one.data(), &[0.5, 0.75, 1.0]);

        let all: Tensor<f64> = select_grounding(&img, &[], 1).unwrap();
        assert_eq!(all.shape(), &[4, 3]);

        let dup: Tensor<f64> = select_grounding(&img, &[1, 1], 1).unwrap();
        assert_eq!(dup.row(0), dup.row(1));

        let err = select_grounding::<f64>(&img, &[4], 3).unwrap_err().to_string();
        assert!(err.contains("round 3") && err.contains("index 4"), "{err}");
    }

    #[test]
    fn zero_layers_is_projection_only() {
        let mut cfg = ModelConfig::tiny();
        cfg.grounding_layers = 0;
        cfg.feature_dim = 3;
        let mut store = ParamStore::<f64>::new();
        let enc = GroundingEncoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(select_grounding(&image(), &[0, 3], 1).unwrap());
        let out = enc.encode(&mut tape, &store, v).unwrap();
        let mut tape2 = Tape::new();
        let v2 = tape2.constant(select_grounding(&image(), &[0, 3], 1).unwrap());
        let proj = enc.projection.forward(&mut tape2, &store, v2).unwrap();
        assert_eq!(tape.value(out), tape2.value(proj));
        assert_eq!(tape.shape(out), &[2, cfg.d_model]);
    }
}
