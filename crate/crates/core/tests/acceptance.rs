//! Acceptance criteria A1–A7. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use mitvg::data::{FeatureSet, SyntheticWorld, Vocabulary};
use mitvg::eval::{aggregate, evaluate, ndcg, rank_of_gt};
use mitvg::train::{checkpoint_bytes, checkpoint_from_bytes, teacher_forced_accuracy, Trainer};
use mitvg::{MitvgModel, ModelConfig, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{synthetic_corpus, tiny_dialogue};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

// Written as `!cond` on purpose: a NaN comparison must count as a failure.
macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("A1 gradient fidelity", a1),
        ("A2 structural invariants", a2),
        ("A3 overfit one dialogue", a3),
        ("A4 synthetic task learning", a4),
        ("A5 metric oracles", a5),
        ("A6 determinism and formats", a6),
        ("A7 hyperparameter conformance", a7),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(f).unwrap_or_else(|e| {
            Err(format!(
                "panicked: {}",
                e.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            ))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- A1

fn a1() -> Outcome {
    let start = Instant::now();
    let model = MitvgModel::<f64>::new(ModelConfig::tiny()).map_err(|e| e.to_string())?;
    let dialogue = tiny_dialogue(11, 2);
    let report = model.grad_check(&dialogue, 2, 1e-5).map_err(|e| e.to_string())?;
    ensure!(
        report.scalars_checked == model.params.num_scalars(),
        "checked {} of {} scalars",
        report.scalars_checked,
        model.params.num_scalars()
    );

    // every named group must be present and receive a non-zero gradient
    let mut tape = Tape::new();
    let loss = model.loss(&mut tape, &dialogue, 2).map_err(|e| e.to_string())?;
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;
    let mut store = model.params.clone();
    store.zero_grads();
    grads.accumulate_into(&tape, &mut store).map_err(|e| e.to_string())?;
    let groups = [
        "embedding.weight",
        "grounding.projection.weight",
        "grounding.projection.bias",
        "encoder.layer0.self_attn.wq",
        "encoder.layer0.cross_attn.wk",
        "encoder.layer0.history_attn.wv",
        "encoder.layer0.ffn.w1.weight",
        "decoder.layer0.self_attn.wo",
        "decoder.layer0.gca.context_attn.wq",
        "decoder.layer0.gca.grounding_attn.wq",
        "decoder.layer0.gca.gate_e.weight",
        "decoder.layer0.gca.gate_e.bias",
        "decoder.layer0.gca.gate_g.weight",
        "decoder.layer0.gca.gate_g.bias",
        "output_head.weight",
    ];
    for g in groups {
        let id = store.find(g).ok_or_else(|| format!("missing parameter group {g}"))?;
        let norm: f64 = store.get(id).grad().unwrap().iter().map(|x| x * x).sum();
        ensure!(norm > 0.0, "{g} receives no gradient");
        ensure!(report.error_for(g).is_some(), "{g} not checked");
    }
    let elapsed = start.elapsed();
    ensure!(
        report.max_rel_error < 1e-5,
        "max relative error {:.3e}",
        report.max_rel_error
    );
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!(
        "max rel error {:.2e} over {} scalars in {} tensors",
        report.max_rel_error,
        report.scalars_checked,
        report.per_param.len()
    ))
}

// ---------------------------------------------------------------- A2

fn a2() -> Outcome {
    let model = MitvgModel::<f64>::new(ModelConfig::tiny()).map_err(|e| e.to_string())?;
    let dlg = tiny_dialogue(5, 3);
    let err = |e: mitvg::Error| e.to_string();

    // attention rows sum to one
    let mut tape = Tape::new();
    tape.enable_trace();
    let loss = model.loss(&mut tape, &dlg, 3).map_err(err)?;
    let _ = loss;
    let weights = tape.traced("attention");
    ensure!(!weights.is_empty(), "no attention traced");
    let mut worst = 0.0f64;
    for w in &weights {
        let cols = tape.shape(*w)[1];
        for row in tape.value(*w).chunks(cols) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure!(worst < 1e-6, "attention row sum off by {worst:.2e}");

    // gates lie strictly inside (0, 1)
    let gates: Vec<_> = tape
        .traced("gate_alpha")
        .into_iter()
        .chain(tape.traced("gate_beta"))
        .collect();
    ensure!(gates.len() == 2, "expected two traced gates, got {}", gates.len());
    for g in gates {
        ensure!(
            tape.value(g).iter().all(|&v| v > 0.0 && v < 1.0),
            "gate value outside (0, 1)"
        );
    }

    // decoder causality: logits at z ignore later tokens
    let answer = vec![7, 8, 9, 10];
    let probs_for = |ans: &[usize]| -> Result<Vec<f64>, String> {
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, &dlg, 2).map_err(err)?;
        let p = model
            .decoder
            .decode_teacher_forced(
                &mut tape,
                &model.params,
                &model.embedder,
                ans,
                enc.current().state,
                enc.grounding,
            )
            .map_err(err)?;
        Ok(tape.value(p).to_vec())
    };
    let base = probs_for(&answer)?;
    let vocab = model.config.vocab_size;
    for z in 0..answer.len() {
        let mut changed = answer.clone();
        for t in changed.iter_mut().skip(z) {
            *t = 5 + (*t + 3) % (vocab - 5);
        }
        // input position z + 1 onwards differs; rows 0..=z must be bit-identical
        let other = probs_for(&changed)?;
        ensure!(
            base[..(z + 1) * vocab] == other[..(z + 1) * vocab],
            "decoder row {z} depends on later tokens"
        );
    }

    // incremental causality: c_i ignores rounds after i
    let contexts = |d: &mitvg::data::EncodedDialogue| -> Result<Vec<Vec<f64>>, String> {
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, d, 3).map_err(err)?;
        Ok(enc.contexts.iter().map(|c| tape.value(c.state).to_vec()).collect())
    };
    let base = contexts(&dlg)?;
    ensure!(base.len() == 4, "expected c_0..c_3, got {}", base.len());
    for i in 0..3 {
        let mut changed = dlg.clone();
        for r in changed.rounds.iter_mut().skip(i) {
            r.question = r.question.iter().map(|&t| 5 + (t + 1) % (vocab - 5)).collect();
            r.answer = Some(vec![6, 6]);
            r.grounding = vec![2];
        }
        let other = contexts(&changed)?;
        for j in 0..=i {
            ensure!(base[j] == other[j], "c_{j} changed when rounds > {i} changed");
        }
        ensure!(base[i + 1] != other[i + 1], "c_{} ignores its own round", i + 1);
    }

    // grounding encoder is permutation-equivariant over object rows
    let img = &dlg.image;
    let perm = [2usize, 0, 1];
    let run = |indices: &[usize]| -> Result<(Vec<f64>, usize), String> {
        let mut tape = Tape::new();
        let v = model
            .grounding
            .for_round(&mut tape, &model.params, img, indices, 1, true)
            .map_err(err)?;
        Ok((tape.value(v).to_vec(), tape.shape(v)[1]))
    };
    let (a, m) = run(&[0, 1, 2])?;
    let (b, _) = run(&perm)?;
    let mut dev = 0.0f64;
    for (row, &src) in perm.iter().enumerate() {
        for c in 0..m {
            dev = dev.max((b[row * m + c] - a[src * m + c]).abs());
        }
    }
    ensure!(dev < 1e-6, "permutation changes grounding rows by {dev:.2e}");

    // with empty grounding everywhere, the two arms are identical
    let mut empty = dlg.clone();
    for r in &mut empty.rounds {
        r.grounding.clear();
    }
    let mut no_vg = model.clone();
    no_vg.config.use_vg = false;
    let loss_of = |m: &MitvgModel<f64>| -> Result<f64, String> {
        let mut tape = Tape::new();
        let l = m.loss(&mut tape, &empty, 3).map_err(err)?;
        Ok(tape.value(l)[0])
    };
    let (x, y) = (loss_of(&model)?, loss_of(&no_vg)?);
    ensure!(x.to_bits() == y.to_bits(), "arms differ on empty grounding: {x} vs {y}");
    let sx = model.score_candidates(&empty, 3).map_err(err)?;
    let sy = no_vg.score_candidates(&empty, 3).map_err(err)?;
    ensure!(sx == sy, "candidate scores differ on empty grounding");

    Ok(format!(
        "{} attention maps (row error {worst:.1e}), causal decoder and encoder, equivariance {dev:.1e}",
        weights.len()
    ))
}

// ---------------------------------------------------------------- A3

fn a3() -> Outcome {
    let start = Instant::now();
    let corpus = synthetic_corpus(200, 1, 10, 7, ModelConfig::toy());
    let one = vec![corpus.train[0].clone()];
    let model = MitvgModel::<f32>::new(corpus.config.clone()).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(model, one.clone()).map_err(|e| e.to_string())?;
    let mut status = String::new();
    let mut done = None;
    for checkpoint in (50..=500).step_by(50) {
        trainer.train_until(checkpoint, |_| Ok(())).map_err(|e| e.to_string())?;
        let m = &trainer.model;
        let (acc, _) = teacher_forced_accuracy(m, &one).map_err(|e| e.to_string())?;
        let mut exact = 0;
        for t in 1..=one[0].num_rounds() {
            let out = m.generate(&one[0], t, 20).map_err(|e| e.to_string())?;
            exact += usize::from(Some(&out) == one[0].rounds[t - 1].answer.as_ref());
        }
        let (report, _) = evaluate(m, &one).map_err(|e| e.to_string())?;
        status = format!(
            "step {checkpoint}: token acc {acc:.3}, exact {exact}/{}, MRR {:.3}",
            one[0].num_rounds(),
            report.mrr
        );
        if acc == 1.0 && exact == one[0].num_rounds() && report.mrr == 1.0 {
            done = Some(checkpoint);
            break;
        }
    }
    let elapsed = start.elapsed();
    ensure!(done.is_some(), "not memorized within 500 steps ({status})");
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    Ok(status)
}

// ---------------------------------------------------------------- A4

const A4_STEPS: u64 = 2000;

fn a4_arm(seed: u64, use_vg: bool) -> Result<f64, String> {
    let mut cfg = ModelConfig::toy();
    cfg.seed = seed;
    cfg.use_vg = use_vg;
    let corpus = synthetic_corpus(500, 100, 10, 1000 + seed, cfg);
    let model = MitvgModel::<f32>::new(corpus.config.clone()).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(model, corpus.train).map_err(|e| e.to_string())?;
    trainer.train_until(A4_STEPS, |_| Ok(())).map_err(|e| e.to_string())?;
    let (report, _) = evaluate(&trainer.model, &corpus.val).map_err(|e| e.to_string())?;
    Ok(report.mrr)
}

fn a4() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut wins = 0;
    let mut worst_vg = f64::INFINITY;
    for seed in 0..3 {
        let vg = a4_arm(seed, true)?;
        let no_vg = a4_arm(seed, false)?;
        wins += usize::from(vg > no_vg);
        worst_vg = worst_vg.min(vg);
        lines.push(format!("seed {seed}: MRR {vg:.3} vs w/o VG {no_vg:.3}"));
    }
    let elapsed = start.elapsed();
    let summary = lines.join("; ");
    ensure!(worst_vg >= 0.85, "VG arm MRR below 0.85 ({summary})");
    ensure!(wins == 3, "VG arm wins {wins}/3 ({summary})");
    ensure!(elapsed < Duration::from_secs(45 * 60), "took {elapsed:?}");
    Ok(format!("{summary}; {A4_STEPS} steps of 8 instances"))
}

// ---------------------------------------------------------------- A5

/// Position of `gt` after a stable descending sort.
fn oracle_rank(scores: &[f64], gt: usize) -> usize {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    idx.iter().position(|&i| i == gt).unwrap() + 1
}

fn oracle_dcg(rels: &[f64]) -> f64 {
    let mut s = 0.0;
    for (p, r) in rels.iter().enumerate() {
        s += r / (2.0 + p as f64).ln() * std::f64::consts::LN_2;
    }
    s
}

/// Best DCG over every ordering of `rel`, cut at `k`.
fn brute_idcg(rel: &[f64], k: usize) -> f64 {
    fn go(rest: &mut Vec<f64>, acc: &mut Vec<f64>, k: usize, best: &mut f64) {
        if acc.len() == k || rest.is_empty() {
            *best = best.max(oracle_dcg(acc));
            return;
        }
        for i in 0..rest.len() {
            let x = rest.remove(i);
            acc.push(x);
            go(rest, acc, k, best);
            acc.pop();
            rest.insert(i, x);
        }
    }
    let mut best = 0.0;
    go(&mut rel.to_vec(), &mut Vec::new(), k, &mut best);
    best
}

fn oracle_ndcg(scores: &[f64], rel: &[f64], exhaustive: bool) -> f64 {
    let k = rel.iter().filter(|&&r| r > 0.0).count();
    if k == 0 {
        return 0.0;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let got: Vec<f64> = idx.iter().take(k).map(|&i| rel[i]).collect();
    let ideal = if exhaustive {
        brute_idcg(rel, k)
    } else {
        let mut r = rel.to_vec();
        r.sort_by(|a, b| b.partial_cmp(a).unwrap());
        oracle_dcg(&r[..k])
    };
    oracle_dcg(&got) / ideal
}

fn a5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let rel_levels = [0.0, 0.5, 1.0];
    let mut worst = 0.0f64;
    let mut cases = 0usize;

    let mut check = |scores: &[f64], rel: &[f64], gt: usize, exhaustive: bool| -> Result<(), String> {
        let r = rank_of_gt(scores, gt).map_err(|e| e.to_string())?;
        ensure!(r == oracle_rank(scores, gt), "rank mismatch for {scores:?} gt {gt}");
        let n = ndcg(scores, rel).map_err(|e| e.to_string())?;
        let o = oracle_ndcg(scores, rel, exhaustive);
        worst = worst.max((n - o).abs());
        ensure!((n - o).abs() < 1e-9, "ndcg {n} vs oracle {o} for {scores:?} {rel:?}");
        ensure!((0.0..=1.0 + 1e-12).contains(&n), "ndcg {n} outside [0, 1]");
        // strictly increasing transform leaves everything unchanged
        let warped: Vec<f64> = scores.iter().map(|s| (s * 0.5).exp() * 3.0 - 1.0).collect();
        ensure!(
            rank_of_gt(&warped, gt).unwrap() == r,
            "rank not invariant under monotone map"
        );
        ensure!(
            ndcg(&warped, rel).unwrap() == n,
            "ndcg not invariant under monotone map"
        );
        cases += 1;
        Ok(())
    };

    // exhaustive small cases over a 3-letter score alphabet
    for n in 1..=6usize {
        let total = 3usize.pow(n as u32);
        for code in 0..total {
            let scores: Vec<f64> = (0..n).map(|i| ((code / 3usize.pow(i as u32)) % 3) as f64).collect();
            let rel: Vec<f64> = (0..n).map(|_| rel_levels[rng.gen_range(0..3)]).collect();
            for gt in 0..n {
                check(&scores, &rel, gt, true)?;
            }
        }
    }
    // 1000 random 100-candidate sets, half with heavy ties
    let mut mrr_gap = 0.0f64;
    let mut ranks = Vec::new();
    for trial in 0..1000 {
        let scores: Vec<f64> = (0..100)
            .map(|_| {
                if trial % 2 == 0 {
                    rng.gen_range(-50.0..0.0)
                } else {
                    rng.gen_range(0..8) as f64
                }
            })
            .collect();
        let rel: Vec<f64> = (0..100)
            .map(|_| {
                if rng.gen_bool(0.1) {
                    rng.gen_range(0.0..=1.0)
                } else {
                    0.0
                }
            })
            .collect();
        let gt = rng.gen_range(0..100);
        check(&scores, &rel, gt, false)?;
        ranks.push(oracle_rank(&scores, gt));
    }
    let report = aggregate(&ranks, &[]).map_err(|e| e.to_string())?;
    let n = ranks.len() as f64;
    let o_mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    let o_mean = ranks.iter().sum::<usize>() as f64 / n;
    mrr_gap = mrr_gap
        .max((report.mrr - o_mrr).abs())
        .max((report.mean - o_mean).abs());
    for (k, got) in [(1, report.r1), (5, report.r5), (10, report.r10)] {
        let o = ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        mrr_gap = mrr_gap.max((got - o).abs());
    }
    ensure!(mrr_gap < 1e-9, "aggregate differs from oracle by {mrr_gap:.2e}");
    ensure!(report.r1 <= report.r5 && report.r5 <= report.r10, "recall not monotone");

    // hand case: ordering [0.5, 1, 0]
    let hand = ndcg(&[2.0, 0.0, 3.0], &[1.0, 0.0, 0.5]).map_err(|e| e.to_string())?;
    let expected = (0.5 + 1.0 / 3f64.log2()) / (1.0 + 0.5 / 3f64.log2());
    ensure!(
        (hand - 0.8597).abs() < 1e-4 && (hand - expected).abs() < 1e-12,
        "hand NDCG {hand}"
    );
    Ok(format!("{cases} cases, max NDCG gap {worst:.1e}, hand case {hand:.4}"))
}

// ---------------------------------------------------------------- A6

fn a6() -> Outcome {
    let err = |e: mitvg::Error| e.to_string();
    // datasets
    let w = SyntheticWorld::default();
    let (a, b) = (w.generate(20, 5, 9), w.generate(20, 5, 9));
    let jsonl = mitvg::data::records_to_jsonl(&a.records);
    ensure!(
        jsonl == mitvg::data::records_to_jsonl(&b.records),
        "dataset text differs"
    );
    ensure!(a.features.to_bytes() == b.features.to_bytes(), "feature bytes differ");
    let va = Vocabulary::build(a.clone().into_dataset(Default::default()).map_err(err)?.texts(), 5);
    let vb = Vocabulary::build(b.clone().into_dataset(Default::default()).map_err(err)?.texts(), 5);
    ensure!(va.to_text() == vb.to_text(), "vocabulary differs");
    let fbytes = a.features.to_bytes();
    let back = FeatureSet::from_bytes(&fbytes).map_err(err)?;
    ensure!(
        back.to_bytes() == fbytes && back == a.features,
        "feature round trip not exact"
    );

    // checkpoints: two runs, and an interrupted run resumed from disk
    let mut cfg = ModelConfig::toy();
    cfg.d_model = 16;
    cfg.d_ff = 32;
    cfg.grad_accum = 2;
    let corpus = synthetic_corpus(20, 4, 4, 3, cfg);
    let run = |steps: u64| -> Result<Trainer<f32>, String> {
        let m = MitvgModel::<f32>::new(corpus.config.clone()).map_err(err)?;
        let mut t = Trainer::new(m, corpus.train.clone()).map_err(err)?;
        t.train_until(steps, |_| Ok(())).map_err(err)?;
        Ok(t)
    };
    let full = checkpoint_bytes(&run(30)?.model, &run(30)?.adam);
    let again = run(30)?;
    ensure!(
        checkpoint_bytes(&again.model, &again.adam) == full,
        "same seed, different checkpoint"
    );
    let half = run(13)?;
    let saved = checkpoint_bytes(&half.model, &half.adam);
    let (m, adam) = checkpoint_from_bytes::<f32>(&saved).map_err(err)?;
    ensure!(checkpoint_bytes(&m, &adam) == saved, "save-load-save not identical");
    let mut resumed = Trainer::resume(m, adam, corpus.train.clone()).map_err(err)?;
    resumed.train_until(30, |_| Ok(())).map_err(err)?;
    ensure!(
        checkpoint_bytes(&resumed.model, &resumed.adam) == full,
        "resumed run diverged"
    );
    let (wide, _) = checkpoint_from_bytes::<f64>(&full).map_err(err)?;
    for ((_, x), (_, y)) in again.model.params.iter().zip(wide.params.iter()) {
        ensure!(
            x.data().iter().zip(y.data()).all(|(&p, &q)| p as f64 == q),
            "widening not exact"
        );
    }

    // reports
    let r1 = evaluate(&again.model, &corpus.val).map_err(err)?;
    let r2 = evaluate(&run(30)?.model, &corpus.val).map_err(err)?;
    ensure!(
        serde_json::to_string(&r1.0).unwrap() == serde_json::to_string(&r2.0).unwrap() && r1.1 == r2.1,
        "reports differ"
    );

    // fuzzed corrupt inputs produce errors, never panics
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut rejected = 0;
    let inputs: [(&str, Vec<u8>); 3] = [
        ("checkpoint", full.clone()),
        ("features", fbytes.clone()),
        ("jsonl", jsonl.clone().into_bytes()),
    ];
    for (kind, orig) in inputs {
        for trial in 0..300 {
            let mut bytes = orig.clone();
            match trial % 3 {
                0 => bytes.truncate(rng.gen_range(0..orig.len())),
                1 => {
                    for _ in 0..rng.gen_range(1..8) {
                        let i = rng.gen_range(0..bytes.len());
                        bytes[i] ^= 1 << rng.gen_range(0..8);
                    }
                }
                _ => {
                    let i = rng.gen_range(0..bytes.len().min(64));
                    bytes[i] = rng.gen();
                }
            }
            let outcome = catch_unwind(AssertUnwindSafe(|| match kind {
                "checkpoint" => checkpoint_from_bytes::<f32>(&bytes).map(|_| ()),
                "features" => FeatureSet::from_bytes(&bytes).map(|_| ()),
                _ => {
                    let text = String::from_utf8_lossy(&bytes);
                    let feats = FeatureSet::from_bytes(&fbytes).unwrap();
                    mitvg::data::Dataset::from_parts(&text, feats, Default::default()).map(|_| ())
                }
            }));
            match outcome {
                Err(_) => return Err(format!("{kind} parser panicked on trial {trial}")),
                Ok(Err(_)) => rejected += 1,
                Ok(Ok(())) => {}
            }
        }
    }
    Ok(format!(
        "byte-identical outputs, exact round trips and resume, {rejected}/900 corrupt inputs rejected"
    ))
}

// ---------------------------------------------------------------- A7

fn a7() -> Outcome {
    let mut cfg = ModelConfig::full();
    // the published setup, section 3.2
    ensure!(
        (cfg.grounding_layers, cfg.encoder_layers, cfg.decoder_layers) == (3, 3, 3),
        "layer counts"
    );
    ensure!(cfg.heads == 8 && cfg.d_model == 512 && cfg.d_ff == 2048, "widths");
    ensure!(
        (cfg.max_caption_len, cfg.max_question_len, cfg.max_answer_len) == (40, 20, 20),
        "truncation"
    );
    ensure!(cfg.vocab_min_count == 5, "vocabulary threshold");
    cfg.vocab_size = 1000;
    let model = MitvgModel::<f32>::new(cfg.clone()).map_err(|e| e.to_string())?;
    let shape = |name: &str| -> Result<Vec<usize>, String> {
        let id = model.params.find(name).ok_or_else(|| format!("missing {name}"))?;
        Ok(model.params.get(id).shape().to_vec())
    };
    ensure!(shape("embedding.weight")? == [1000, 512], "embedding shape");
    ensure!(
        shape("grounding.projection.weight")? == [cfg.feature_dim, 512],
        "projection shape"
    );
    for stack in ["grounding.block", "encoder.layer", "decoder.layer"] {
        let count = (0..10)
            .filter(|n| {
                model
                    .params
                    .iter()
                    .any(|(name, _)| name.starts_with(&format!("{stack}{n}.")))
            })
            .count();
        ensure!(count == 3, "{stack}: {count} layers");
    }
    ensure!(
        shape("encoder.layer2.history_attn.wq")? == [512, 512],
        "attention shape"
    );
    ensure!(shape("encoder.layer2.ffn.w1.weight")? == [512, 2048], "filter shape");
    ensure!(shape("decoder.layer2.gca.gate_e.weight")? == [1024, 512], "gate shape");
    ensure!(shape("output_head.weight")? == [512, 1000], "output head shape");
    let heads = model.decoder.layers[0].gca.context_attn.heads;
    ensure!(heads == 8, "{heads} heads");
    Ok(format!(
        "3/3/3 layers, 8 heads, d=512, d_ff=2048, 40/20/20, min count 5; {} parameters",
        model.params.num_scalars()
    ))
}
