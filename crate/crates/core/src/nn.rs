//! Transformer building blocks: embeddings, positional encoding, multi-head
//! attention, position-wise feed-forward and post-norm residual wiring.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Additive value for disallowed attention positions.
pub const MASK_VALUE: f64 = -1e9;

/// Affine map `x·W (+ b)` applied row-wise.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.uniform(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = bias.then(|| store.zeros(format!("{name}.bias"), &[fan_out]));
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Word embeddings shared by captions, questions and answers.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub weight: ParamId,
    pub vocab_size: usize,
    pub d_model: usize,
}

impl EmbeddingTable {
    pub fn new<T: Real>(store: &mut ParamStore<T>, vocab_size: usize, d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (d_model as f64).sqrt();
        let weight = store.uniform_bounded("embedding.weight", &[vocab_size, d_model], bound, rng);
        Self {
            weight,
            vocab_size,
            d_model,
        }
    }
}

/// Fixed sinusoidal position table.
#[derive(Clone, Debug)]
pub struct PositionalEncoder<T> {
    d_model: usize,
    table: Vec<T>,
}

impl<T: Real> PositionalEncoder<T> {
    pub fn new(d_model: usize, max_len: usize) -> Self {
        let mut table = Vec::with_capacity(max_len * d_model);
        for pos in 0..max_len {
            for dim in 0..d_model {
                let pair = (dim / 2) * 2;
                let angle = pos as f64 / 10000f64.powf(pair as f64 / d_model as f64);
                table.push(T::of_f64(if dim % 2 == 0 { angle.sin() } else { angle.cos() }));
            }
        }
        Self { d_model, table }
    }

    pub fn max_len(&self) -> usize {
        self.table.len() / self.d_model
    }

    pub fn row(&self, pos: usize) -> &[T] {
        &self.table[pos * self.d_model..(pos + 1) * self.d_model]
    }

    /// Rows `0..len` as a `len × d_model` tensor.
    pub fn rows(&self, len: usize) -> Result<Tensor<T>> {
        if len > self.max_len() {
            return Err(Error::contract(format!(
                "sequence of {len} tokens exceeds positional table of {}",
                self.max_len()
            )));
        }
        Tensor::new(vec![len, self.d_model], self.table[..len * self.d_model].to_vec())
    }
}

/// Embeds token ids and adds positional encodings (positions start at 0).
pub fn embed_sequence<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    table: &EmbeddingTable,
    pe: &PositionalEncoder<T>,
    tokens: &[usize],
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::contract("cannot embed an empty sequence"));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= table.vocab_size) {
        return Err(Error::contract(format!(
            "token id {bad} outside vocabulary of {}",
            table.vocab_size
        )));
    }
    let w = tape.param(store, table.weight);
    let words = tape.gather_rows(w, tokens)?;
    let pos = tape.constant(pe.rows(tokens.len())?);
    tape.add(words, pos)
}

/// Shared embedding table together with the positional table.
#[derive(Clone, Debug)]
pub struct TextEmbedder<T> {
    pub table: EmbeddingTable,
    pub positions: PositionalEncoder<T>,
}

impl<T: Real> TextEmbedder<T> {
    pub fn embed(&self, tape: &mut Tape<T>, store: &ParamStore<T>, tokens: &[usize]) -> Result<Var> {
        embed_sequence(tape, store, &self.table, &self.positions, tokens)
    }
}

/// Boolean `rows × cols` matrix; `true` marks an allowed query→key pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::shape("mask", &[rows, cols], &[allowed.len()]));
        }
        Ok(Self { rows, cols, allowed })
    }

    /// Query `i` may attend to keys `0..=i`.
    pub fn causal(n: usize) -> Self {
        let allowed = (0..n * n).map(|ix| ix % n <= ix / n).collect();
        Self {
            rows: n,
            cols: n,
            allowed,
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    fn additive<T: Real>(&self) -> Tensor<T> {
        let data = self
            .allowed
            .iter()
            .map(|&ok| if ok { T::zero() } else { T::of_f64(MASK_VALUE) })
            .collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("mask dims are positive")
    }
}

/// Scaled dot-product attention with `heads` parallel heads.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::contract(format!(
                "d_model {d_model} not divisible by {heads} heads"
            )));
        }
        let mut proj = |p: &str| store.uniform(format!("{name}.{p}"), d_model, d_model, rng);
        Ok(Self {
            wq: proj("wq"),
            wk: proj("wk"),
            wv: proj("wv"),
            wo: proj("wo"),
            heads,
            d_model,
        })
    }

    /// Attention of `query` rows over `memory` rows used as both keys and values.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        query: Var,
        memory: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        self.forward_qkv(tape, store, query, memory, memory, mask)
    }

    pub fn forward_qkv<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let lq = tape.shape(q)[0];
        let lk = tape.shape(k)[0];
        if tape.shape(k) != tape.shape(v) {
            return Err(Error::shape("multi_head", tape.shape(k), tape.shape(v)));
        }
        for x in [q, k] {
            if tape.shape(x).len() != 2 || tape.shape(x)[1] != self.d_model {
                return Err(Error::shape("multi_head", tape.shape(x), &[self.d_model]));
            }
        }
        let mask = match mask {
            Some(m) if m.shape() != [lq, lk] => {
                return Err(Error::shape("attention mask", &m.shape(), &[lq, lk]));
            }
            Some(m) => Some(tape.constant(m.additive())),
            None => None,
        };

        let wq = tape.param(store, self.wq);
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        let wo = tape.param(store, self.wo);
        let qp = tape.matmul(q, wq)?;
        let kp = tape.matmul(k, wk)?;
        let vp = tape.matmul(v, wv)?;

        let dk = self.d_model / self.heads;
        let inv_sqrt = T::of_f64(1.0 / (dk as f64).sqrt());
        let mut outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (qp, kp, vp)
            } else {
                (
                    tape.slice_cols(qp, h * dk, dk)?,
                    tape.slice_cols(kp, h * dk, dk)?,
                    tape.slice_cols(vp, h * dk, dk)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let raw = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(raw, inv_sqrt);
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let weights = tape.softmax(scores, 1)?;
            tape.record("attention", weights);
            outputs.push(tape.matmul(weights, vh)?);
        }
        let joined = if outputs.len() == 1 {
            outputs[0]
        } else {
            tape.concat(&outputs, 1)?
        };
        tape.matmul(joined, wo)
    }
}

/// Position-wise `relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.w1"), d_model, d_ff, true, rng),
            outer: Linear::new(store, &format!("{name}.w2"), d_ff, d_model, true, rng),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.outer.forward(tape, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d_model: usize, eps: f64) -> Self {
        Self {
            gain: store.filled(format!("{name}.gain"), &[d_model], 1.0),
            bias: store.zeros(format!("{name}.bias"), &[d_model]),
            eps,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, T::of_f64(self.eps))
    }
}

/// Post-norm residual wiring: `LayerNorm(x + dropout(fx))`, where `fx = f(x)`.
pub fn sublayer<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    norm: &LayerNormParams,
    x: Var,
    fx: Var,
) -> Result<Var> {
    if tape.shape(x) != tape.shape(fx) {
        return Err(Error::shape("sublayer", tape.shape(x), tape.shape(fx)));
    }
    let fx = tape.dropout(fx)?;
    let sum = tape.add(x, fx)?;
    norm.forward(tape, store, sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn positional_encoding_values() {
        let pe = PositionalEncoder::<f64>::new(512, 4);
        let r0 = pe.row(0);
        assert!(r0.iter().step_by(2).all(|&v| v == 0.0));
        assert!(r0.iter().skip(1).step_by(2).all(|&v| v == 1.0));
        assert!((pe.row(1)[0] - 0.841471).abs() < 1e-6);
        // dim 2k+1 shares the frequency of dim 2k
        let expected = (3.0f64 / 10000f64.powf(10.0 / 512.0)).cos();
        assert!((PositionalEncoder::<f64>::new(512, 4).row(3)[11] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_table_embeds_to_positional_rows() {
        let mut store = ParamStore::<f64>::new();
        let table = EmbeddingTable::new(&mut store, 10, 6, &mut rng());
        store.get_mut(table.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let pe = PositionalEncoder::new(6, 8);
        let mut tape = Tape::new();
        let x = embed_sequence(&mut tape, &store, &table, &pe, &[3, 9, 3]).unwrap();
        assert_eq!(tape.value(x), pe.rows(3).unwrap().data());
    }

    #[test]
    fn embedding_rejects_oov_and_empty() {
        let mut store = ParamStore::<f64>::new();
        let table = EmbeddingTable::new(&mut store, 10, 4, &mut rng());
        let pe = PositionalEncoder::new(4, 8);
        let mut tape = Tape::new();
        assert!(embed_sequence(&mut tape, &store, &table, &pe, &[10]).is_err());
        assert!(embed_sequence(&mut tape, &store, &table, &pe, &[]).is_err());
    }

    #[test]
    fn causal_mask_layout() {
        let m = AttentionMask::causal(3);
        assert_eq!(m.allowed, vec![true, false, false, true, true, false, true, true, true]);
    }

    #[test]
    fn mask_shape_mismatch_is_shape_error() {
        let mut store = ParamStore::<f64>::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 2, &mut rng()).unwrap();
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[2, 4]));
        let kv = tape.constant(Tensor::zeros(&[3, 4]));
        let mask = AttentionMask::causal(2);
        let err = mha.forward(&mut tape, &store, q, kv, Some(&mask));
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn constant_row_normalizes_to_zero() {
        let mut store = ParamStore::<f64>::new();
        let ln = LayerNormParams::new(&mut store, "ln", 4, 1e-6);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 4], |_| 2.5));
        let y = ln.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y), &[0.0; 4]);
    }

    #[test]
    fn sublayer_with_zero_function_is_layer_norm() {
        let mut store = ParamStore::<f64>::new();
        let ln = LayerNormParams::new(&mut store, "ln", 2, 1e-12);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 3.0]]).unwrap());
        let zero = tape.constant(Tensor::zeros(&[1, 2]));
        let y = sublayer(&mut tape, &store, &ln, x, zero).unwrap();
        let v = tape.value(y);
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);

        let wrong = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            sublayer(&mut tape, &store, &ln, x, wrong),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn dropout_is_identity_by_default_and_rescales_when_on() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1000], |_| 1.0));
        assert_eq!(tape.dropout(x).unwrap(), x);
        tape.set_dropout(0.5, 3);
        let y = tape.dropout(x).unwrap();
        let vals = tape.value(y);
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = vals.iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept));
    }
}
