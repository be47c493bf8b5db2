//! `mitvg` command-line interface.
//!
//! Exit codes: 0 success, 2 usage, configuration or data error, 3 numerical
//! failure (non-finite loss or gradient check above threshold).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mitvg::data::synth::random_dialogue;
use mitvg::data::{Dataset, EncodedDialogue, FeatureSet, Limits, SyntheticWorld, Vocabulary};
use mitvg::eval::{evaluate, QuestionResult, RankingReport};
use mitvg::train::{load_checkpoint, save_checkpoint, AdamState, Trainer};
use mitvg::{Error, MitvgModel, ModelConfig, Precision, Real};
use serde::Serialize;

const TRAIN_JSONL: &str = "train.jsonl";
const TRAIN_FEATURES: &str = "train.features";
const VAL_JSONL: &str = "val.jsonl";
const VAL_FEATURES: &str = "val.features";
const VOCAB: &str = "vocab.txt";
const CHECKPOINT: &str = "checkpoint.bin";
const METRICS: &str = "metrics.jsonl";
const MANIFEST: &str = "manifest.json";
const REPORT: &str = "report.json";
const PER_QUESTION: &str = "per_question.jsonl";

#[derive(Parser, Debug)]
#[command(
    name = "mitvg",
    version,
    about = "Multimodal incremental transformer with visual grounding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with oracle grounding
    Synth(SynthArgs),
    /// Train a model and write a checkpoint and metrics log
    Train(TrainArgs),
    /// Rank candidate answers and report MRR, R@k, mean rank and NDCG
    Eval(EvalArgs),
    /// Greedily decode the answer to one question
    Generate(GenerateArgs),
    /// Compare analytic gradients with finite differences at 64-bit precision
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Training dialogues
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    dialogues: u64,
    /// Validation dialogues [default: a fifth of --dialogues, at least 1]
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    val_dialogues: Option<u64>,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    rounds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    feature_dim: u64,
    /// Minimum token count for the vocabulary
    #[arg(long, default_value_t = 5)]
    min_count: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Train the ablation arm without grounding features
    #[arg(long)]
    no_vg: bool,
    /// Total optimizer steps
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(1..))]
    steps: u64,
    /// Continue from a checkpoint written by an earlier run
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override a config key, e.g. `--set seed=3`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print a progress line to stderr every N steps (0 disables)
    #[arg(long, default_value_t = 0)]
    log_every: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    no_vg: bool,
    /// Split to evaluate: `val` or `train`
    #[arg(long, default_value = "val")]
    split: String,
    /// Config the checkpoint is expected to match
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for report.json and per_question.jsonl
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Image id of the dialogue
    #[arg(long)]
    example: u64,
    /// 1-based question round
    #[arg(long)]
    round: usize,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long)]
    no_vg: bool,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 1e-5)]
    threshold: f64,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
}

/// Everything needed to reproduce an output directory. Deliberately free of
/// timestamps so identical runs write identical bytes.
#[derive(Serialize)]
struct RunManifest<'a> {
    version: String,
    command: &'a str,
    seed: u64,
    inputs: Vec<String>,
    outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<&'a ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    steps: Option<u64>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(f) = configure_threads().and_then(|_| run(cli)) {
        let (code, msg) = match f {
            Failure::Usage(m) => (2, m),
            Failure::Core(e @ Error::Numerical { .. }) => (3, e.to_string()),
            Failure::Core(e) => (2, e.to_string()),
            Failure::Numerical(m) => (3, m),
        };
        eprintln!("mitvg: {msg}");
        return ExitCode::from(code);
    }
    ExitCode::SUCCESS
}

fn configure_threads() -> CliResult {
    if let Ok(v) = std::env::var("MITVG_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::Usage(format!("MITVG_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("cannot size the worker pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Generate(a) => generate(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn version() -> String {
    format!("mitvg {}", env!("CARGO_PKG_VERSION"))
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> CliResult {
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn synth(a: SynthArgs) -> CliResult {
    create_dir(&a.out)?;
    let n = a.dialogues as usize;
    let val_n = a.val_dialogues.map(|v| v as usize).unwrap_or((n / 5).max(1));
    let world = SyntheticWorld {
        feature_dim: a.feature_dim as usize,
        ..SyntheticWorld::default()
    };
    let train = world.generate(n, a.rounds as usize, a.seed);
    let val = SyntheticWorld {
        id_offset: n as u64,
        ..world
    }
    .generate(val_n, a.rounds as usize, a.seed.wrapping_add(1));

    let limits = Limits::default();
    let train_ds = Dataset::from_records(train.records.clone(), train.features.clone(), limits)?;
    let vocab = Vocabulary::build(train_ds.texts(), a.min_count);

    let write = |name: &str, bytes: &[u8]| -> CliResult {
        let path = a.out.join(name);
        fs::write(&path, bytes).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
    };
    write(TRAIN_JSONL, mitvg::data::records_to_jsonl(&train.records).as_bytes())?;
    write(TRAIN_FEATURES, &train.features.to_bytes())?;
    write(VAL_JSONL, mitvg::data::records_to_jsonl(&val.records).as_bytes())?;
    write(VAL_FEATURES, &val.features.to_bytes())?;
    write(VOCAB, vocab.to_text().as_bytes())?;
    write_manifest(
        &a.out,
        &RunManifest {
            version: version(),
            command: "synth",
            seed: a.seed,
            inputs: vec![],
            outputs: [TRAIN_JSONL, TRAIN_FEATURES, VAL_JSONL, VAL_FEATURES, VOCAB]
                .iter()
                .map(|f| display(&a.out.join(f)))
                .collect(),
            config: None,
            steps: None,
        },
    )?;
    println!(
        "{}",
        serde_json::json!({"train": n, "val": val_n, "rounds": a.rounds, "vocab": vocab.len()})
    );
    Ok(())
}

fn read_config(path: &Path) -> CliResult<ModelConfig> {
    let text =
        fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    Ok(ModelConfig::from_kv(&text)?)
}

/// Fills data-derived sizes and checks explicit ones against the data.
fn bind_to_data(cfg: &mut ModelConfig, vocab: &Vocabulary, features: &FeatureSet) -> CliResult {
    if cfg.vocab_size == 0 {
        cfg.vocab_size = vocab.len();
    } else if cfg.vocab_size != vocab.len() {
        return Err(Failure::Usage(format!(
            "config vocab_size {} does not match the {}-token vocabulary",
            cfg.vocab_size,
            vocab.len()
        )));
    }
    if let Some(dim) = features.dim() {
        if dim != cfg.feature_dim {
            return Err(Failure::Usage(format!(
                "config feature_dim {} does not match feature width {dim}",
                cfg.feature_dim
            )));
        }
    }
    cfg.validate()?;
    Ok(())
}

fn split_files(split: &str) -> CliResult<(&'static str, &'static str)> {
    match split {
        "val" => Ok((VAL_JSONL, VAL_FEATURES)),
        "train" => Ok((TRAIN_JSONL, TRAIN_FEATURES)),
        other => Err(Failure::Usage(format!(
            "unknown split {other:?}; expected val or train"
        ))),
    }
}

fn load_split(dir: &Path, split: &str, cfg: &ModelConfig, vocab: &Vocabulary) -> CliResult<Vec<EncodedDialogue>> {
    let (jsonl, feats) = split_files(split)?;
    let ds = Dataset::load(&dir.join(jsonl), &dir.join(feats), Limits::from_config(cfg))?;
    Ok(ds.encode(vocab)?)
}

fn train(a: TrainArgs) -> CliResult {
    let mut cfg = read_config(&a.config)?;
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if a.no_vg {
        cfg.use_vg = false;
    }
    let vocab = Vocabulary::load(&a.data.join(VOCAB))?;
    let features = FeatureSet::load(&a.data.join(TRAIN_FEATURES))?;
    bind_to_data(&mut cfg, &vocab, &features)?;
    let ds = Dataset::from_parts(
        &fs::read_to_string(a.data.join(TRAIN_JSONL))?,
        features,
        Limits::from_config(&cfg),
    )?;
    let data = ds.encode(&vocab)?;
    create_dir(&a.out)?;
    match cfg.precision {
        Precision::F32 => train_as::<f32>(&a, cfg, data),
        Precision::F64 => train_as::<f64>(&a, cfg, data),
    }
}

fn train_as<T: Real>(a: &TrainArgs, cfg: ModelConfig, data: Vec<EncodedDialogue>) -> CliResult {
    let (model, adam) = match &a.resume {
        Some(path) => {
            let (mut model, adam) = load_checkpoint::<T>(path)?;
            let mut saved = model.config.clone();
            saved.use_vg = cfg.use_vg;
            if saved != cfg {
                return Err(Failure::Usage(format!(
                    "checkpoint {} was trained with a different config",
                    path.display()
                )));
            }
            model.config.use_vg = cfg.use_vg;
            (model, adam)
        }
        None => {
            let model = MitvgModel::<T>::new(cfg.clone())?;
            let adam = AdamState::new(&model.params);
            (model, adam)
        }
    };
    let mut trainer = Trainer::resume(model, adam, data)?;
    let metrics_path = a.out.join(METRICS);
    let mut metrics = std::io::BufWriter::new(if a.resume.is_some() {
        fs::OpenOptions::new().create(true).append(true).open(&metrics_path)?
    } else {
        fs::File::create(&metrics_path)?
    });
    let mut last = None;
    let outcome = trainer.train_until(a.steps, |rec| {
        metrics.write_all(rec.to_json_line().as_bytes())?;
        if a.log_every > 0 && rec.step % a.log_every == 0 {
            eprintln!("step {} loss {:.4} lr {:.3e}", rec.step, rec.loss, rec.lr);
        }
        last = Some(*rec);
        Ok(())
    });
    metrics.flush()?;
    outcome?;
    let ckpt = a.out.join(CHECKPOINT);
    save_checkpoint(&ckpt, &trainer.model, &trainer.adam)?;
    let mut inputs = vec![display(&a.data), display(&a.config)];
    if let Some(r) = &a.resume {
        inputs.push(display(r));
    }
    write_manifest(
        &a.out,
        &RunManifest {
            version: version(),
            command: "train",
            seed: cfg.seed,
            inputs,
            outputs: vec![display(&ckpt), display(&metrics_path)],
            config: Some(&trainer.model.config),
            steps: Some(trainer.step()),
        },
    )?;
    println!(
        "{}",
        serde_json::json!({
            "steps": trainer.step(),
            "loss": last.map(|r| r.loss),
            "use_vg": trainer.model.config.use_vg,
        })
    );
    Ok(())
}

fn load_model_for_data(ckpt: &Path, data: &Path, no_vg: bool) -> CliResult<(MitvgModel<f64>, Vocabulary)> {
    let (mut model, _) = load_checkpoint::<f64>(ckpt)?;
    if no_vg {
        model.config.use_vg = false;
    }
    let vocab = Vocabulary::load(&data.join(VOCAB))?;
    if vocab.len() != model.config.vocab_size {
        return Err(Failure::Usage(format!(
            "checkpoint vocabulary has {} tokens, {} has {}",
            model.config.vocab_size,
            data.join(VOCAB).display(),
            vocab.len()
        )));
    }
    Ok((model, vocab))
}

fn eval(a: EvalArgs) -> CliResult {
    let (model, vocab) = load_model_for_data(&a.ckpt, &a.data, a.no_vg)?;
    if let Some(path) = &a.config {
        let cfg = read_config(path)?;
        for (key, want, got) in [
            ("d_model", cfg.d_model, model.config.d_model),
            ("heads", cfg.heads, model.config.heads),
            ("d_ff", cfg.d_ff, model.config.d_ff),
            ("grounding_layers", cfg.grounding_layers, model.config.grounding_layers),
            ("encoder_layers", cfg.encoder_layers, model.config.encoder_layers),
            ("decoder_layers", cfg.decoder_layers, model.config.decoder_layers),
        ] {
            if want != got {
                return Err(Failure::Usage(format!(
                    "checkpoint has {key} = {got} but the config says {want}"
                )));
            }
        }
    }
    let data = load_split(&a.data, &a.split, &model.config, &vocab)?;
    let (report, per_question) = evaluate(&model, &data)?;
    let text = report_json(&report);
    print!("{text}");
    if let Some(out) = &a.out {
        create_dir(out)?;
        fs::write(out.join(REPORT), &text)?;
        fs::write(out.join(PER_QUESTION), per_question_jsonl(&per_question))?;
        let (jsonl, _) = split_files(&a.split)?;
        write_manifest(
            out,
            &RunManifest {
                version: version(),
                command: "eval",
                seed: model.config.seed,
                inputs: vec![display(&a.ckpt), display(&a.data.join(jsonl))],
                outputs: vec![display(&out.join(REPORT)), display(&out.join(PER_QUESTION))],
                config: Some(&model.config),
                steps: None,
            },
        )?;
    }
    Ok(())
}

fn report_json(report: &RankingReport) -> String {
    let mut s = serde_json::to_string(report).expect("report serializes");
    s.push('\n');
    s
}

fn per_question_jsonl(rows: &[QuestionResult]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
        .collect()
}

fn generate(a: GenerateArgs) -> CliResult {
    let (model, vocab) = load_model_for_data(&a.ckpt, &a.data, a.no_vg)?;
    let data = load_split(&a.data, &a.split, &model.config, &vocab)?;
    let dialogue = data.iter().find(|d| d.image_id == a.example).ok_or_else(|| {
        Failure::Usage(format!(
            "no dialogue with image id {} in the {} split",
            a.example, a.split
        ))
    })?;
    if a.round == 0 || a.round > dialogue.num_rounds() {
        return Err(Failure::Usage(format!(
            "round {} outside 1..={} for image {}",
            a.round,
            dialogue.num_rounds(),
            a.example
        )));
    }
    let tokens = model.generate(dialogue, a.round, a.max_len)?;
    println!("{}", vocab.decode(&tokens));
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CliResult {
    let cfg = read_config(&a.config)?;
    if cfg.vocab_size == 0 {
        return Err(Failure::Usage("gradcheck needs vocab_size in the config".into()));
    }
    cfg.validate()?;
    let model = MitvgModel::<f64>::new(cfg.clone())?;
    let dialogue = random_dialogue(cfg.vocab_size, cfg.feature_dim, 3, 2, cfg.seed);
    let report = model.grad_check(&dialogue, 2, a.step)?;
    println!(
        "{}",
        serde_json::json!({
            "max_rel_error": report.max_rel_error,
            "scalars": report.scalars_checked,
            "threshold": a.threshold,
        })
    );
    if report.max_rel_error < a.threshold {
        Ok(())
    } else {
        let worst = report
            .per_param
            .iter()
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .map(|(n, _)| n.as_str())
            .unwrap_or("?");
        Err(Failure::Numerical(format!(
            "max relative error {:.3e} (worst in {worst}) is not below {:.1e}",
            report.max_rel_error, a.threshold
        )))
    }
}
