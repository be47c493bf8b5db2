//! Adam with the inverse-square-root warmup schedule, the training loop, and
//! the binary checkpoint format.
//!
//! One training instance is one `(dialogue, round)` pair; an optimizer step
//! consumes `grad_accum` instances. Instance order is a seeded shuffle per
//! epoch, so the stream position alone (derived from the optimizer step)
//! determines what comes next and a resumed run follows the same trajectory.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::EncodedDialogue;
use crate::error::{Error, Result};
use crate::model::MitvgModel;
use crate::params::ParamStore;
use crate::tensor::{Real, Tape, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

/// `d^-0.5 · min(step^-0.5, step · warmup^-1.5)` for `step ≥ 1`.
pub fn lr_at(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::contract("learning rate is defined from step 1"));
    }
    if warmup == 0 {
        return Err(Error::contract("warmup must be at least 1 step"));
    }
    let s = step as f64;
    let decay = s.powf(-0.5);
    let ramp = s * (warmup as f64).powf(-1.5);
    Ok((d_model as f64).powf(-0.5) * decay.min(ramp))
}

/// First and second moment buffers, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected Adam update from the gradients held in `store`.
    pub fn update(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::contract(format!(
                "optimizer state for {} parameters applied to {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let (b1, b2) = (T::of_f64(ADAM_BETA1), T::of_f64(ADAM_BETA2));
        let c1 = T::of_f64(1.0 - ADAM_BETA1.powf(self.step as f64));
        let c2 = T::of_f64(1.0 - ADAM_BETA2.powf(self.step as f64));
        let (lr, eps) = (T::of_f64(lr), T::of_f64(ADAM_EPS));
        let one = T::one();
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let Some(g) = p.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

impl StepRecord {
    pub fn to_json_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("plain struct serializes");
        s.push('\n');
        s
    }
}

/// Every `(dialogue index, round)` pair with a reference answer.
pub fn training_instances(data: &[EncodedDialogue]) -> Vec<(usize, usize)> {
    data.iter()
        .enumerate()
        .flat_map(|(d, dlg)| {
            dlg.rounds
                .iter()
                .enumerate()
                .filter(|(_, r)| r.answer.as_ref().is_some_and(|a| !a.is_empty()))
                .map(move |(i, _)| (d, i + 1))
        })
        .collect()
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// Owns the model, the optimizer state and the training stream.
#[derive(Debug)]
pub struct Trainer<T> {
    pub model: MitvgModel<T>,
    pub adam: AdamState<T>,
    data: Vec<EncodedDialogue>,
    instances: Vec<(usize, usize)>,
    order: Vec<usize>,
    order_epoch: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: MitvgModel<T>, data: Vec<EncodedDialogue>) -> Result<Self> {
        let adam = AdamState::new(&model.params);
        Self::resume(model, adam, data)
    }

    /// Continues from a saved model and optimizer state.
    pub fn resume(model: MitvgModel<T>, adam: AdamState<T>, data: Vec<EncodedDialogue>) -> Result<Self> {
        let instances = training_instances(&data);
        if instances.is_empty() {
            return Err(Error::data("dataset", "no round with a reference answer to train on"));
        }
        let order = epoch_order(instances.len(), model.config.seed, 0);
        Ok(Self {
            model,
            adam,
            data,
            instances,
            order,
            order_epoch: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn num_instances(&self) -> usize {
        self.instances.len()
    }

    fn instance_at(&mut self, position: u64) -> (usize, usize) {
        let n = self.instances.len() as u64;
        let epoch = position / n;
        if epoch != self.order_epoch {
            self.order = epoch_order(self.instances.len(), self.model.config.seed, epoch);
            self.order_epoch = epoch;
        }
        self.instances[self.order[(position % n) as usize]]
    }

    /// One optimizer step. Parameters are left untouched when the loss or a
    /// gradient is not finite.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.adam.step + 1;
        let accum = self.model.config.grad_accum as u64;
        let cfg_dropout = self.model.config.dropout;
        let seed = self.model.config.seed;
        self.model.params.zero_grads();
        let mut total = 0.0;
        for k in 0..accum {
            let position = (step - 1) * accum + k;
            let (d, t) = self.instance_at(position);
            let mut tape = Tape::new();
            tape.set_dropout(
                cfg_dropout,
                seed.wrapping_add(position.wrapping_mul(0xA24B_AED4_963E_E407)),
            );
            let loss = self.model.loss(&mut tape, &self.data[d], t)?;
            let value = tape.value(loss)[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Numerical {
                    step,
                    message: format!("loss is {value} on image {} round {t}", self.data[d].image_id),
                });
            }
            total += value;
            let grads = tape.backward(loss)?;
            grads.accumulate_into(&tape, &mut self.model.params)?;
        }
        let scale = T::of_f64(1.0 / accum as f64);
        let ids: Vec<_> = self.model.params.ids().collect();
        for id in ids {
            let bad = self
                .model
                .params
                .get(id)
                .grad()
                .is_some_and(|g| g.iter().any(|x| !x.is_finite()));
            if bad {
                return Err(Error::Numerical {
                    step,
                    message: format!("non-finite gradient in {}", self.model.params.name(id)),
                });
            }
            let p = self.model.params.get_mut(id);
            if let Some(g) = p.grad() {
                if accum > 1 {
                    let scaled: Vec<T> = g.iter().map(|&x| x * scale).collect();
                    p.zero_grad();
                    p.accumulate_grad(&scaled)?;
                }
            }
        }
        let lr = lr_at(step, self.model.config.d_model, self.model.config.warmup_steps)?;
        self.adam.update(&mut self.model.params, lr)?;
        Ok(StepRecord {
            step,
            loss: total / accum as f64,
            lr,
        })
    }

    /// Runs until the optimizer has taken `until` steps in total, calling
    /// `on_step` after each one.
    pub fn train_until(&mut self, until: u64, mut on_step: impl FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        while self.adam.step < until {
            let rec = self.train_step()?;
            on_step(&rec)?;
        }
        Ok(())
    }

    pub fn data(&self) -> &[EncodedDialogue] {
        &self.data
    }
}

/// Teacher-forced token accuracy and mean loss over every answered round.
pub fn teacher_forced_accuracy<T: Real>(model: &MitvgModel<T>, data: &[EncodedDialogue]) -> Result<(f64, f64)> {
    let (mut correct, mut tokens, mut loss_sum, mut n) = (0usize, 0usize, 0.0, 0usize);
    for (d, t) in training_instances(data) {
        let dlg = &data[d];
        let answer = dlg.rounds[t - 1].answer.as_ref().expect("instances have answers");
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, dlg, t)?;
        let probs = model.decoder.decode_teacher_forced(
            &mut tape,
            &model.params,
            &model.embedder,
            answer,
            enc.current().state,
            enc.grounding,
        )?;
        let vocab = tape.shape(probs)[1];
        let targets = crate::gcad::shifted_targets(answer);
        let p = tape.value(probs);
        for (z, &target) in targets.iter().enumerate() {
            let row = &p[z * vocab..(z + 1) * vocab];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            correct += usize::from(best == target);
            tokens += 1;
            loss_sum -= row[target].as_f64().max(f64::MIN_POSITIVE).ln();
        }
        n += targets.len();
    }
    if tokens == 0 {
        return Err(Error::data("dataset", "no answered rounds"));
    }
    Ok((correct as f64 / tokens as f64, loss_sum / n as f64))
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MITV";
pub const CHECKPOINT_VERSION: u16 = 1;
const ADAM_M_PREFIX: &str = "adam.m:";
const ADAM_V_PREFIX: &str = "adam.v:";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: ModelConfig,
    adam_step: u64,
    tensors: Vec<ManifestEntry>,
}

/// Serializes parameters and optimizer moments.
///
/// Layout: `MITV`, version (u16 LE), header length (u32 LE), JSON header, then
/// little-endian f32 values in manifest order.
pub fn checkpoint_bytes<T: Real>(model: &MitvgModel<T>, adam: &AdamState<T>) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut values: Vec<f32> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: &[T]| {
        tensors.push(ManifestEntry {
            name,
            shape,
            offset: (values.len() * 4) as u64,
        });
        values.extend(data.iter().map(|v| v.as_f64() as f32));
    };
    for (name, t) in model.params.iter() {
        push(name.to_string(), t.shape().to_vec(), t.data());
    }
    for (i, (name, t)) in model.params.iter().enumerate() {
        push(format!("{ADAM_M_PREFIX}{name}"), t.shape().to_vec(), &adam.m[i]);
        push(format!("{ADAM_V_PREFIX}{name}"), t.shape().to_vec(), &adam.v[i]);
    }
    let header = CheckpointHeader {
        config: model.config.clone(),
        adam_step: adam.step,
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(10 + json.len() + values.len() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a checkpoint into a model of precision `T` and its optimizer state.
/// Nothing is returned unless the whole file is consistent.
pub fn checkpoint_from_bytes<T: Real>(bytes: &[u8]) -> Result<(MitvgModel<T>, AdamState<T>)> {
    if bytes.len() < 10 {
        return Err(Error::format("checkpoint shorter than its fixed header"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let body = &bytes[10..];
    if hlen > body.len() {
        return Err(Error::format("checkpoint header runs past end of file"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
    let data = &body[hlen..];
    header
        .config
        .validate()
        .map_err(|e| Error::format(format!("checkpoint config: {e}")))?;

    let mut model = MitvgModel::<T>::new(header.config.clone())?;
    let mut adam = AdamState::new(&model.params);
    adam.step = header.adam_step;
    let mut seen = vec![[false; 3]; model.params.len()];
    for entry in &header.tensors {
        let (slot, pname) = if let Some(p) = entry.name.strip_prefix(ADAM_M_PREFIX) {
            (1, p)
        } else if let Some(p) = entry.name.strip_prefix(ADAM_V_PREFIX) {
            (2, p)
        } else {
            (0, entry.name.as_str())
        };
        let id = model
            .params
            .find(pname)
            .ok_or_else(|| Error::format(format!("checkpoint tensor {:?} is not a model parameter", entry.name)))?;
        let expected = model.params.get(id).shape();
        if entry.shape != expected {
            return Err(Error::format(format!(
                "checkpoint tensor {:?} has shape {:?}, model expects {:?}",
                entry.name, entry.shape, expected
            )));
        }
        let numel: usize = expected.iter().product();
        let start = usize::try_from(entry.offset).map_err(|_| Error::format("offset overflow"))?;
        let end = numel
            .checked_mul(4)
            .and_then(|n| n.checked_add(start))
            .ok_or_else(|| Error::format("offset overflow"))?;
        if end > data.len() {
            return Err(Error::format(format!(
                "checkpoint tensor {:?} runs past end of file",
                entry.name
            )));
        }
        let values: Vec<T> = data[start..end]
            .chunks_exact(4)
            .map(|c| T::of_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        if seen[id.index()][slot] {
            return Err(Error::format(format!(
                "checkpoint tensor {:?} appears twice",
                entry.name
            )));
        }
        seen[id.index()][slot] = true;
        match slot {
            0 => model.params.assign(pname, &values)?,
            1 => adam.m[id.index()] = values,
            _ => adam.v[id.index()] = values,
        }
    }
    if let Some(i) = seen.iter().position(|s| !s.iter().all(|&x| x)) {
        let name = model.params.name(model.params.ids().nth(i).expect("index in range"));
        return Err(Error::format(format!("checkpoint is missing tensors for {name:?}")));
    }
    let expected_len = header
        .tensors
        .iter()
        .map(|e| e.shape.iter().product::<usize>() * 4)
        .sum::<usize>();
    if data.len() != expected_len {
        return Err(Error::format(format!(
            "checkpoint data section is {} bytes, manifest describes {expected_len}",
            data.len()
        )));
    }
    Ok((model, adam))
}

pub fn save_checkpoint<T: Real>(path: &Path, model: &MitvgModel<T>, adam: &AdamState<T>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&checkpoint_bytes(model, adam))?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(MitvgModel<T>, AdamState<T>)> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

/// Parameter values of `store` as a detached copy, for comparisons.
pub fn snapshot<T: Real>(store: &ParamStore<T>) -> Vec<Tensor<T>> {
    store
        .iter()
        .map(|(_, t)| Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid shape"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let peak = lr_at(4000, 512, 4000).unwrap();
        assert!((peak - 512f64.powf(-0.5) * 4000f64.powf(-0.5)).abs() < 1e-15);
        assert!((peak - 6.9877e-4).abs() < 1e-7, "{peak}");
        let half = lr_at(2000, 512, 4000).unwrap();
        assert!((half - peak / 2.0).abs() < 1e-15);
        assert!(matches!(lr_at(0, 512, 4000), Err(Error::Contract(_))));
        let (a, b) = (lr_at(3999, 512, 4000).unwrap(), lr_at(4001, 512, 4000).unwrap());
        // one step away from the peak both branches move by about 1/warmup
        assert!((a - peak).abs() < 1e-3 * peak && (b - peak).abs() < 1e-3 * peak);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::<f64>::new();
        store.filled("w", &[2, 2], 0.5);
        let mut adam = AdamState::new(&store);
        let before = snapshot(&store);
        adam.update(&mut store, 1e-2).unwrap();
        assert_eq!(snapshot(&store), before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // with bias correction, the first update is lr * sign(g)
        let mut store = ParamStore::<f64>::new();
        let id = store.filled("w", &[3], 1.0);
        store.get_mut(id).accumulate_grad(&[2.0, -0.5, 0.0]).unwrap();
        let mut adam = AdamState::new(&store);
        adam.update(&mut store, 0.1).unwrap();
        let w = store.get(id).data();
        assert!(
            (w[0] - 0.9).abs() < 1e-9 && (w[1] - 1.1).abs() < 1e-9 && w[2] == 1.0,
            "{w:?}"
        );
    }

    #[test]
    fn epoch_orders_are_permutations() {
        let a = epoch_order(50, 3, 0);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(50, 3, 0));
        assert_ne!(a, epoch_order(50, 3, 1));
    }

    #[test]
    fn corrupt_headers_are_format_errors() {
        assert!(matches!(checkpoint_from_bytes::<f32>(b"MIT"), Err(Error::Format(_))));
        assert!(matches!(
            checkpoint_from_bytes::<f32>(b"XXXX\x01\x00\x00\x00\x00\x00"),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            checkpoint_from_bytes::<f32>(b"MITV\x02\x00\x00\x00\x00\x00"),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            checkpoint_from_bytes::<f32>(b"MITV\x01\x00\xff\xff\xff\xff"),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            checkpoint_from_bytes::<f32>(b"MITV\x01\x00\x02\x00\x00\x00{}"),
            Err(Error::Format(_))
        ));
    }
}
