//! The `rotcap` command line.
//!
//! Exit codes: 0 success, 1 input or configuration error, 2 numerical
//! failure. Every command that writes files puts them under `--out` with
//! fixed names and adds an `effective-config.txt` dump.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{child_seed, RunConfig};
use crate::data::{load_dataset, load_labels, Dataset, RawImage, TokenizedDataset};
use crate::error::{Error, Result};
use crate::evaluation::{caption_image, evaluate_model, probe_accuracy, render_report, EvalOptions, MetricsReport};
use crate::models::{encoder_from_checkpoint, Captioner, ClassifierHead, RotationNet};
use crate::rotation::{pretext_eval, pretext_train, preprocess_eval};
use crate::synthetic::{generate_samples, write_dataset};
use crate::training::{finetune_classifier, load_checkpoint, save_checkpoint, train_captioner, Checkpoint};
use crate::vocab::Vocabulary;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const HISTORY_FILE: &str = "history.csv";
pub const CONFIG_FILE: &str = "effective-config.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const LABELS_FILE: &str = "labels.txt";

#[derive(Debug, Parser)]
#[command(name = "rotcap", version, about = "Rotation-pretext pretraining and CNN-LSTM captioning")]
pub struct Cli {
    /// Worker threads; 1 gives bit-identical results across runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic shapes dataset.
    MakeSynthetic(MakeSyntheticArgs),
    /// Train an encoder to predict image rotations.
    Pretrain(PretrainArgs),
    /// Linear-probe accuracy of a frozen encoder.
    Probe(ProbeArgs),
    /// Train a captioner, optionally starting from a pretrained encoder.
    TrainCaption(TrainCaptionArgs),
    /// Loss, perplexity, BLEU and probe accuracy of one captioner.
    Evaluate(EvaluateArgs),
    /// Caption a single image.
    Caption(CaptionArgs),
    /// Evaluate several captioners on one dataset and tabulate them.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct MakeSyntheticArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image side in pixels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Dataset directory holding manifest.txt.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// After pretext training, fine-tune on this share of labels.txt.
    #[arg(long)]
    pub label_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Rotation or captioner checkpoint.
    #[arg(long)]
    pub encoder: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to labels.txt in the data directory.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write probe.csv and the effective config here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainCaptionArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Pretrained checkpoint, or `none` for a random-init encoder.
    #[arg(long, default_value = "none")]
    pub encoder: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to vocab.txt beside the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Enables the probe column; defaults to labels.txt when present.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Row label in the report.
    #[arg(long, default_value = "model")]
    pub name: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `NAME=CHECKPOINT`, repeatable. Each checkpoint's vocab.txt sits beside it.
    #[arg(long = "model", required = true)]
    pub models: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn std::io::Write, stderr: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { stdout.write_all(text.as_bytes()) } else { stderr.write_all(text.as_bytes()) };
            return code;
        }
    };
    match dispatch(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            if e.is_numeric() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cli: Cli, out: &mut dyn std::io::Write) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        // The global pool can only be built once per process; later calls
        // keep the first setting.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::MakeSynthetic(a) => make_synthetic(&a, out),
        Command::Pretrain(a) => pretrain(&a, out),
        Command::Probe(a) => probe(&a, out),
        Command::TrainCaption(a) => train_caption(&a, out),
        Command::Evaluate(a) => evaluate(&a, out),
        Command::Caption(a) => caption(&a, out),
        Command::Report(a) => report(&a, out),
    }
}

fn say(out: &mut dyn std::io::Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found"),
        ))
    }
}

fn load_data_dir(dir: &Path) -> Result<Dataset> {
    require_dir(dir)?;
    load_dataset(dir, &dir.join(MANIFEST_FILE))
}

/// Config stored in a checkpoint, then the optional file on top.
fn config_from_checkpoint(ckpt: &Checkpoint, base: RunConfig, file: Option<&Path>) -> Result<RunConfig> {
    let cfg = match ckpt.meta.get("config") {
        Some(text) => base.apply(text, Path::new("<checkpoint config>"))?,
        None => base,
    };
    cfg.load(file)
}

fn make_synthetic(a: &MakeSyntheticArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let samples = generate_samples(a.n, a.size, a.seed)?;
    write_dataset(&a.out, &samples)?;
    let dump = format!("n = {}\nseed = {}\nsize = {}\n", a.n, a.seed, a.size);
    write_file(&a.out.join(CONFIG_FILE), &dump)?;
    say(out, &format!("images={}", samples.len()))
}

fn pretrain(a: &PretrainArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let mut cfg = RunConfig::pretext().load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(f) = a.label_fraction {
        cfg.train.label_fraction = f;
    }
    cfg.validate()?;
    let data = load_data_dir(&a.data)?;
    if data.images.is_empty() {
        return Err(Error::InvalidArgument(format!("{} lists no images", a.data.join(MANIFEST_FILE).display())));
    }
    let labels = match a.label_fraction {
        Some(_) => Some(load_labels(&a.data.join(LABELS_FILE), &data)?),
        None => None,
    };
    prepare_out(&a.out)?;
    write_file(&a.out.join(CONFIG_FILE), &cfg.to_text())?;

    let seed = cfg.train.seed;
    let mut init_rng = ChaCha8Rng::seed_from_u64(child_seed(seed, "init"));
    let mut sample_rng = ChaCha8Rng::seed_from_u64(child_seed(seed, "sampling"));
    let mut net = RotationNet::new(cfg.encoder.clone(), &mut init_rng)?;
    let outcome = pretext_train(&mut net, &data.images, &cfg.preprocess, &cfg.train, &mut sample_rng)?;

    let mut history = String::from("epoch,loss,rotation_accuracy\n");
    for h in &outcome.history {
        let _ = writeln!(history, "{},{},{}", h.epoch, h.loss, h.rotation_accuracy);
    }
    write_file(&a.out.join(HISTORY_FILE), &history)?;

    let accuracy = pretext_eval(&net, &preprocess_eval(&data.images, &cfg.preprocess)?)?;
    if let Some(labels) = labels {
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut head = ClassifierHead::new(cfg.encoder.embed_size, classes, &mut init_rng);
        finetune_classifier(&mut net.encoder, &mut head, &data.images, &labels, &cfg.preprocess, &cfg.train, &mut sample_rng)?;
    }

    let mut ckpt = Checkpoint::from_model(net.topology(), &net);
    ckpt.arrays.extend(outcome.optimizer.to_arrays());
    ckpt.epoch = cfg.train.epochs as u64;
    ckpt.step = outcome.step_losses.len() as u64;
    ckpt.loss = outcome.history.last().map_or(0.0, |h| h.loss);
    ckpt.meta.insert("config".into(), cfg.to_text());
    ckpt.meta.insert("pretext_accuracy".into(), accuracy.to_string());
    save_checkpoint(&a.out.join(CHECKPOINT_FILE), &ckpt)?;
    say(out, &format!("pretext_accuracy={accuracy}"))?;
    say(out, &format!("loss={}", ckpt.loss))
}

fn probe(a: &ProbeArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let ckpt = load_checkpoint(&a.encoder)?;
    let cfg = config_from_checkpoint(&ckpt, RunConfig::pretext(), a.config.as_deref())?;
    let encoder = encoder_from_checkpoint(&ckpt)?;
    let data = load_data_dir(&a.data)?;
    let labels_path = a.labels.clone().unwrap_or_else(|| a.data.join(LABELS_FILE));
    let labels = load_labels(&labels_path, &data)?;
    let acc = probe_accuracy(&encoder, &data.images, &labels, &cfg.preprocess, cfg.probe_l2)?;
    if let Some(dir) = &a.out {
        prepare_out(dir)?;
        write_file(&dir.join(CONFIG_FILE), &cfg.to_text())?;
        write_file(
            &dir.join("probe.csv"),
            &format!("probe_accuracy,train_accuracy\n{},{}\n", acc.test_accuracy, acc.train_accuracy),
        )?;
    }
    say(out, &format!("probe_accuracy={}", acc.test_accuracy))?;
    say(out, &format!("train_accuracy={}", acc.train_accuracy))
}

fn train_caption(a: &TrainCaptionArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let mut cfg = RunConfig::captioning().load(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let data = load_data_dir(&a.data)?;
    if data.is_empty() {
        return Err(Error::InvalidArgument(format!("{} lists no captions", a.data.join(MANIFEST_FILE).display())));
    }
    let pretrained = match a.encoder.as_str() {
        "none" => None,
        path => Some(load_checkpoint(Path::new(path))?),
    };
    if let Some(ckpt) = &pretrained {
        // The encoder architecture is dictated by the checkpoint.
        cfg.encoder = encoder_from_checkpoint(ckpt)?.spec().clone();
    }
    cfg.validate()?;
    let captions: Vec<&str> = data.records.iter().map(|r| r.caption_text.as_str()).collect();
    let vocab = Vocabulary::build(&captions, cfg.vocab_threshold)?;
    prepare_out(&a.out)?;
    write_file(&a.out.join(CONFIG_FILE), &cfg.to_text())?;
    vocab.save(&a.out.join(VOCAB_FILE))?;

    let seed = cfg.train.seed;
    let mut init_rng = ChaCha8Rng::seed_from_u64(child_seed(seed, "init"));
    let mut sample_rng = ChaCha8Rng::seed_from_u64(child_seed(seed, "sampling"));
    let mut model = Captioner::new(cfg.encoder.clone(), cfg.hidden_size, vocab.len(), &mut init_rng)?;
    if let Some(ckpt) = &pretrained {
        model.encoder = encoder_from_checkpoint(ckpt)?;
    }
    let tokenized = TokenizedDataset::new(data, &vocab);
    let outcome = train_captioner(&mut model, &tokenized, &cfg.preprocess, &cfg.train, &mut sample_rng)?;

    let mut history = String::from("epoch,loss,perplexity\n");
    for h in &outcome.history {
        let _ = writeln!(history, "{},{},{}", h.epoch, h.loss, h.perplexity);
    }
    write_file(&a.out.join(HISTORY_FILE), &history)?;

    let mut ckpt = Checkpoint::from_model(model.topology(), &model);
    ckpt.arrays.extend(outcome.optimizer.to_arrays());
    ckpt.vocab_hash = vocab.fingerprint();
    ckpt.epoch = cfg.train.epochs as u64;
    ckpt.step = outcome.steps;
    ckpt.loss = outcome.history.last().map_or(0.0, |h| h.loss);
    ckpt.meta.insert("config".into(), cfg.to_text());
    ckpt.meta.insert("encoder_source".into(), a.encoder.clone());
    if let Some(acc) = pretrained.as_ref().and_then(|c| c.meta.get("pretext_accuracy")) {
        ckpt.meta.insert("pretext_accuracy".into(), acc.clone());
    }
    save_checkpoint(&a.out.join(CHECKPOINT_FILE), &ckpt)?;
    say(out, &format!("loss={}", ckpt.loss))?;
    say(out, &format!("vocab_size={}", vocab.len()))
}

fn vocab_beside(model: &Path, explicit: Option<&Path>) -> Result<Vocabulary> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => model.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE),
    };
    Vocabulary::load(&path)
}

fn eval_options(name: &str, cfg: &RunConfig, labels: Option<Vec<usize>>) -> EvalOptions {
    EvalOptions {
        model_name: name.to_string(),
        preprocess: cfg.preprocess.clone(),
        max_len: cfg.max_len,
        labels,
        probe_l2: cfg.probe_l2,
        sample_count: 10,
    }
}

fn optional_labels(data_dir: &Path, explicit: Option<&Path>, data: &Dataset) -> Result<Option<Vec<usize>>> {
    match explicit {
        Some(p) => Ok(Some(load_labels(p, data)?)),
        None => {
            let p = data_dir.join(LABELS_FILE);
            if p.is_file() {
                Ok(Some(load_labels(&p, data)?))
            } else {
                Ok(None)
            }
        }
    }
}

fn print_report(out: &mut dyn std::io::Write, r: &MetricsReport) -> Result<()> {
    let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
    say(out, &format!("model={}", r.model_name))?;
    say(out, &format!("pretext_accuracy={}", opt(r.pretext_accuracy)))?;
    say(out, &format!("probe_accuracy={}", opt(r.probe_accuracy)))?;
    say(out, &format!("loss={}", r.caption_loss))?;
    say(out, &format!("perplexity={}", r.perplexity))?;
    for (n, b) in r.bleu.iter().enumerate() {
        say(out, &format!("bleu{}={b}", n + 1))?;
    }
    Ok(())
}

fn evaluate(a: &EvaluateArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let ckpt = load_checkpoint(&a.model)?;
    let cfg = config_from_checkpoint(&ckpt, RunConfig::captioning(), a.config.as_deref())?;
    let vocab = vocab_beside(&a.model, a.vocab.as_deref())?;
    let data = load_data_dir(&a.data)?;
    let labels = optional_labels(&a.data, a.labels.as_deref(), &data)?;
    let report = evaluate_model(&a.model, &data, &vocab, &eval_options(&a.name, &cfg, labels))?;
    prepare_out(&a.out)?;
    write_file(&a.out.join(CONFIG_FILE), &cfg.to_text())?;
    render_report(std::slice::from_ref(&report), &a.out)?;
    print_report(out, &report)
}

fn caption(a: &CaptionArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let ckpt = load_checkpoint(&a.model)?;
    let cfg = config_from_checkpoint(&ckpt, RunConfig::captioning(), None)?;
    let vocab = vocab_beside(&a.model, a.vocab.as_deref())?;
    if ckpt.vocab_hash != vocab.fingerprint() {
        return Err(Error::Topology(format!("{} was trained with a different vocabulary", a.model.display())));
    }
    let mut model = Captioner::from_topology(&ckpt.topology)?;
    ckpt.load_into(&mut model, &ckpt.topology)?;
    let image = RawImage::load(&a.image)?;
    let tokens = caption_image(&model, &image, &cfg.preprocess, cfg.max_len)?;
    say(out, &vocab.detokenize(tokens.tokens())?)
}

fn report(a: &ReportArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let data = load_data_dir(&a.data)?;
    let labels = optional_labels(&a.data, a.labels.as_deref(), &data)?;
    let mut reports = Vec::with_capacity(a.models.len());
    let mut dump = String::new();
    for spec in &a.models {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--model expects NAME=CHECKPOINT, got {spec:?}")))?;
        let path = Path::new(path);
        let ckpt = load_checkpoint(path)?;
        let cfg = config_from_checkpoint(&ckpt, RunConfig::captioning(), a.config.as_deref())?;
        let vocab = vocab_beside(path, None)?;
        let _ = write!(dump, "# model {name} = {}\n{}", path.display(), cfg.to_text());
        reports.push(evaluate_model(path, &data, &vocab, &eval_options(name, &cfg, labels.clone()))?);
    }
    prepare_out(&a.out)?;
    write_file(&a.out.join(CONFIG_FILE), &dump)?;
    render_report(&reports, &a.out)?;
    reports.sort_by(|x, y| x.model_name.cmp(&y.model_name));
    for r in &reports {
        print_report(out, r)?;
    }
    Ok(())
}
