//! Caption loss, perplexity, corpus BLEU, probe accuracy and the model
//! comparison report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::rngs::mock::StepRng;

use crate::data::{preprocess, stack_images, Dataset, ImageTensor, PreprocessConfig, RawImage, TokenizedDataset};
use crate::error::{Error, Result};
use crate::models::probe::{probe_eval, probe_fit};
use crate::models::{generate, Captioner, Encoder};
use crate::tensor::Tensor;
use crate::training::{cross_entropy, load_checkpoint};
use crate::vocab::{split_words, TokenSequence, Vocabulary};

/// Zero-probability n-gram precisions are replaced by this value.
pub const BLEU_EPSILON: f64 = 1e-9;
pub const MAX_BLEU_ORDER: usize = 4;
const EVAL_CHUNK: usize = 32;

/// Mean token cross-entropy and its exponential.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSummary {
    pub loss: f64,
    pub perplexity: f64,
    pub tokens: usize,
}

fn eval_tensors(images: &[&RawImage], pre: &PreprocessConfig) -> Result<Vec<ImageTensor>> {
    let eval = pre.eval();
    let mut unused = StepRng::new(0, 0);
    images.iter().map(|img| preprocess(img, &eval, &mut unused)).collect()
}

/// Teacher-forced mean token cross-entropy of `model` over every caption,
/// with eval-mode preprocessing.
pub fn caption_loss(model: &Captioner, data: &TokenizedDataset, pre: &PreprocessConfig) -> Result<LossSummary> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("caption loss of an empty dataset".into()));
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for (len, indices) in data.index_by_length() {
        for chunk in indices.chunks(EVAL_CHUNK) {
            let images: Vec<&RawImage> = chunk.iter().map(|&i| data.dataset.image(i)).collect();
            let batch = stack_images(&eval_tensors(&images, pre)?)?;
            let captions: Vec<Vec<usize>> = chunk.iter().map(|&i| data.tokens[i].0.clone()).collect();
            let (features, _) = model.encoder.encode(&batch)?;
            let (logits, _) = model.decoder.decode_train(&features, &captions)?;
            let targets: Vec<usize> = captions.into_iter().flatten().collect();
            let n = chunk.len() * len;
            total += cross_entropy(&logits, &targets)? * n as f64;
            tokens += n;
        }
    }
    let loss = total / tokens as f64;
    Ok(LossSummary {
        loss,
        perplexity: loss.exp(),
        tokens,
    })
}

/// `exp` of [`caption_loss`].
pub fn perplexity(model: &Captioner, data: &TokenizedDataset, pre: &PreprocessConfig) -> Result<f64> {
    Ok(caption_loss(model, data, pre)?.perplexity)
}

/// Encoder features of each image, eval-mode preprocessed, as `[N, E]`.
pub fn extract_features(encoder: &Encoder, images: &[RawImage], pre: &PreprocessConfig) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * encoder.embed_size());
    for chunk in images.chunks(EVAL_CHUNK) {
        let refs: Vec<&RawImage> = chunk.iter().collect();
        let (features, _) = encoder.encode(&stack_images(&eval_tensors(&refs, pre)?)?)?;
        data.extend_from_slice(features.data());
    }
    Tensor::from_vec(&[images.len(), encoder.embed_size()], data)
}

/// Greedy caption of one image.
pub fn caption_image(model: &Captioner, img: &RawImage, pre: &PreprocessConfig, max_len: usize) -> Result<TokenSequence> {
    let t = eval_tensors(&[img], pre)?;
    let (features, _) = model.encoder.encode(&stack_images(&t)?)?;
    generate(&model.decoder, features.row(0), max_len)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeAccuracy {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Fits a linear probe on frozen features of the even-indexed images and
/// scores it on the odd-indexed ones.
pub fn probe_accuracy(
    encoder: &Encoder,
    images: &[RawImage],
    labels: &[usize],
    pre: &PreprocessConfig,
    l2: f64,
) -> Result<ProbeAccuracy> {
    if images.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    if images.len() < 4 {
        return Err(Error::InvalidArgument("probe needs at least 4 labelled images".into()));
    }
    let features = extract_features(encoder, images, pre)?;
    let split = |parity: usize| -> Result<(Tensor, Vec<usize>)> {
        let idx: Vec<usize> = (parity..images.len()).step_by(2).collect();
        let e = features.dim(1);
        let mut data = Vec::with_capacity(idx.len() * e);
        for &i in &idx {
            data.extend_from_slice(features.row(i));
        }
        Ok((Tensor::from_vec(&[idx.len(), e], data)?, idx.iter().map(|&i| labels[i]).collect()))
    };
    let (train_x, train_y) = split(0)?;
    let (test_x, test_y) = split(1)?;
    let probe = probe_fit(&train_x, &train_y, l2)?;
    Ok(ProbeAccuracy {
        train_accuracy: probe_eval(&probe, &train_x, &train_y)?,
        test_accuracy: probe_eval(&probe, &test_x, &test_y)?,
    })
}

/// Multiset of the n-grams of one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NGramCounts<T: Ord> {
    pub counts: BTreeMap<Vec<T>, usize>,
}

impl<T: Ord + Clone> NGramCounts<T> {
    pub fn new(tokens: &[T], n: usize) -> Self {
        let mut counts = BTreeMap::new();
        if n > 0 && tokens.len() >= n {
            for w in tokens.windows(n) {
                *counts.entry(w.to_vec()).or_insert(0) += 1;
            }
        }
        Self { counts }
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// Per-n-gram maximum over several sentences.
    pub fn max_over<'a, I: IntoIterator<Item = &'a [T]>>(sentences: I, n: usize) -> Self
    where
        T: 'a,
    {
        let mut counts: BTreeMap<Vec<T>, usize> = BTreeMap::new();
        for s in sentences {
            for (g, c) in Self::new(s, n).counts {
                let e = counts.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        Self { counts }
    }

    /// Sum over n-grams of `min(count, other count)`.
    pub fn clipped_matches(&self, limit: &Self) -> usize {
        self.counts
            .iter()
            .map(|(g, &c)| c.min(limit.counts.get(g).copied().unwrap_or(0)))
            .sum()
    }
}

/// Corpus totals from which any BLEU-n is computed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BleuStats {
    /// Clipped matches per order, index 0 = unigrams.
    pub matches: Vec<usize>,
    /// Candidate n-grams per order.
    pub possible: Vec<usize>,
    pub candidate_length: usize,
    pub reference_length: usize,
}

impl BleuStats {
    pub fn collect<T: Ord + Clone>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>], max_n: usize) -> Result<Self> {
        if candidates.len() != references.len() {
            return Err(Error::InvalidArgument(format!(
                "{} candidates but {} reference sets",
                candidates.len(),
                references.len()
            )));
        }
        if candidates.is_empty() {
            return Err(Error::InvalidArgument("BLEU of an empty corpus".into()));
        }
        if max_n == 0 {
            return Err(Error::InvalidArgument("BLEU order must be >= 1".into()));
        }
        let mut stats = Self {
            matches: vec![0; max_n],
            possible: vec![0; max_n],
            candidate_length: 0,
            reference_length: 0,
        };
        for (cand, refs) in candidates.iter().zip(references) {
            if refs.is_empty() {
                return Err(Error::InvalidArgument("candidate without references".into()));
            }
            for n in 1..=max_n {
                let c = NGramCounts::new(cand, n);
                let limit = NGramCounts::max_over(refs.iter().map(Vec::as_slice), n);
                stats.matches[n - 1] += c.clipped_matches(&limit);
                stats.possible[n - 1] += c.total();
            }
            stats.candidate_length += cand.len();
            stats.reference_length += closest_reference_length(cand.len(), refs);
        }
        Ok(stats)
    }

    /// Modified precision of order `n` (1-based), smoothed by
    /// [`BLEU_EPSILON`]; `None` when the corpus has no n-gram of that order.
    pub fn precision(&self, n: usize) -> Option<f64> {
        let possible = self.possible[n - 1];
        if possible == 0 {
            return None;
        }
        let p = self.matches[n - 1] as f64 / possible as f64;
        Some(if p == 0.0 { BLEU_EPSILON } else { p })
    }

    pub fn brevity_penalty(&self) -> f64 {
        let (c, r) = (self.candidate_length as f64, self.reference_length as f64);
        if c == 0.0 {
            0.0
        } else if c > r {
            1.0
        } else {
            (1.0 - r / c).exp()
        }
    }

    /// BLEU with uniform weights over orders `1..=n`. Orders that no
    /// candidate is long enough to contain are left out of the mean.
    pub fn bleu(&self, n: usize) -> f64 {
        let logs: Vec<f64> = (1..=n).filter_map(|k| self.precision(k)).map(f64::ln).collect();
        if logs.is_empty() {
            return 0.0;
        }
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        (self.brevity_penalty() * mean.exp()).clamp(0.0, 1.0)
    }
}

fn closest_reference_length<T>(c: usize, refs: &[Vec<T>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Corpus BLEU over orders `1..=max_n`.
pub fn bleu<T: Ord + Clone>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>], max_n: usize) -> Result<f64> {
    Ok(BleuStats::collect(candidates, references, max_n)?.bleu(max_n))
}

/// BLEU-1 through BLEU-4 from one pass over the corpus.
pub fn bleu_scores<T: Ord + Clone>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<[f64; MAX_BLEU_ORDER]> {
    let stats = BleuStats::collect(candidates, references, MAX_BLEU_ORDER)?;
    Ok([stats.bleu(1), stats.bleu(2), stats.bleu(3), stats.bleu(4)])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleCaption {
    pub image_id: String,
    pub reference: String,
    pub generated: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub model_name: String,
    pub pretext_accuracy: Option<f64>,
    pub probe_accuracy: Option<f64>,
    pub caption_loss: f64,
    pub perplexity: f64,
    /// BLEU-1..4; the headline score is `bleu[3]`.
    pub bleu: [f64; MAX_BLEU_ORDER],
    pub samples: Vec<SampleCaption>,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub model_name: String,
    pub preprocess: PreprocessConfig,
    pub max_len: usize,
    /// One class per image of the dataset; enables the probe column.
    pub labels: Option<Vec<usize>>,
    pub probe_l2: f64,
    pub sample_count: usize,
}

/// Loss, perplexity and BLEU of a trained captioner.
pub fn evaluate_captioner(
    model: &Captioner,
    dataset: &Dataset,
    vocab: &Vocabulary,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("evaluation dataset is empty".into()));
    }
    if model.decoder.spec().vocab_size != vocab.len() {
        return Err(Error::Topology(format!(
            "model predicts {} words but the vocabulary has {}",
            model.decoder.spec().vocab_size,
            vocab.len()
        )));
    }
    let tokenized = TokenizedDataset::new(dataset.clone(), vocab);
    let loss = caption_loss(model, &tokenized, &opts.preprocess)?;

    let mut references: Vec<Vec<Vec<String>>> = vec![Vec::new(); dataset.images.len()];
    for (r, rec) in dataset.records.iter().enumerate() {
        references[dataset.image_of_record[r]].push(split_words(&rec.caption_text));
    }
    let mut candidates = Vec::with_capacity(dataset.images.len());
    let mut samples = Vec::new();
    for (img, r) in dataset.first_record_per_image().into_iter().enumerate() {
        let generated = vocab.detokenize(caption_image(model, &dataset.images[img], &opts.preprocess, opts.max_len)?.tokens())?;
        if samples.len() < opts.sample_count {
            samples.push(SampleCaption {
                image_id: dataset.records[r].image_id.clone(),
                reference: dataset.records[r].caption_text.clone(),
                generated: generated.clone(),
            });
        }
        candidates.push(split_words(&generated));
    }
    let bleu = bleu_scores(&candidates, &references)?;

    let probe_accuracy = match &opts.labels {
        Some(labels) => Some(probe_accuracy(&model.encoder, &dataset.images, labels, &opts.preprocess, opts.probe_l2)?.test_accuracy),
        None => None,
    };
    Ok(MetricsReport {
        model_name: opts.model_name.clone(),
        pretext_accuracy: None,
        probe_accuracy,
        caption_loss: loss.loss,
        perplexity: loss.perplexity,
        bleu,
        samples,
    })
}

/// Loads a captioner checkpoint and evaluates it. A recorded
/// `pretext_accuracy` in the checkpoint metadata is carried into the report.
pub fn evaluate_model(checkpoint: &Path, dataset: &Dataset, vocab: &Vocabulary, opts: &EvalOptions) -> Result<MetricsReport> {
    let ckpt = load_checkpoint(checkpoint)?;
    let mut model = Captioner::from_topology(&ckpt.topology)?;
    ckpt.load_into(&mut model, &ckpt.topology)?;
    if ckpt.vocab_hash != vocab.fingerprint() {
        return Err(Error::Topology(format!(
            "{} was trained with a different vocabulary",
            checkpoint.display()
        )));
    }
    let mut report = evaluate_captioner(&model, dataset, vocab, opts)?;
    report.pretext_accuracy = match ckpt.meta.get("pretext_accuracy") {
        Some(v) => Some(
            v.parse()
                .map_err(|_| Error::Corrupt {
                    offset: 0,
                    message: format!("bad pretext_accuracy {v:?} in checkpoint metadata"),
                })?,
        ),
        None => None,
    };
    Ok(report)
}

pub const REPORT_HEADER: &str = "model,pretext_acc,probe_acc,loss,perplexity,bleu1,bleu2,bleu3,bleu4";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

fn sorted(reports: &[MetricsReport]) -> Result<Vec<&MetricsReport>> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to render".into()));
    }
    let mut rows: Vec<&MetricsReport> = reports.iter().collect();
    rows.sort_by(|a, b| a.model_name.cmp(&b.model_name));
    Ok(rows)
}

/// CSV with one row per model, sorted by model name.
pub fn report_csv(reports: &[MetricsReport]) -> Result<String> {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in sorted(reports)? {
        if r.model_name.contains([',', '\n', '"']) {
            return Err(Error::InvalidArgument(format!("model name {:?} cannot appear in CSV", r.model_name)));
        }
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.model_name,
            fmt_opt(r.pretext_accuracy),
            fmt_opt(r.probe_accuracy),
            r.caption_loss,
            r.perplexity,
            r.bleu[0],
            r.bleu[1],
            r.bleu[2],
            r.bleu[3]
        );
    }
    Ok(out)
}

/// Aligned text table followed by the sample captions of each model.
pub fn report_text(reports: &[MetricsReport]) -> Result<String> {
    let rows = sorted(reports)?;
    let header: Vec<String> = REPORT_HEADER.split(',').map(str::to_string).collect();
    let mut table = vec![header];
    for r in &rows {
        let mut row = vec![
            r.model_name.clone(),
            fmt_opt(r.pretext_accuracy),
            fmt_opt(r.probe_accuracy),
            format!("{:.4}", r.caption_loss),
            format!("{:.4}", r.perplexity),
        ];
        row.extend(r.bleu.iter().map(|b| format!("{b:.4}")));
        for cell in row.iter_mut().skip(1) {
            if cell.is_empty() {
                *cell = "-".into();
            }
        }
        table.push(row);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &table {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, &w))| if c == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    for r in &rows {
        let _ = writeln!(out, "\nsample captions: {}", r.model_name);
        for s in &r.samples {
            let _ = writeln!(out, "  image      {}", s.image_id);
            let _ = writeln!(out, "  reference  {}", s.reference);
            let _ = writeln!(out, "  generated  {}", s.generated);
        }
    }
    Ok(out)
}

/// Writes `report.csv` and `report.txt` under `out_dir`.
pub fn render_report(reports: &[MetricsReport], out_dir: &Path) -> Result<()> {
    let csv = report_csv(reports)?;
    let text = report_text(reports)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (name, body) in [("report.csv", csv), ("report.txt", text)] {
        let path = out_dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Parses rows written by [`report_csv`]; samples are not part of the CSV.
pub fn parse_report_csv(text: &str, origin: &Path) -> Result<Vec<MetricsReport>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == REPORT_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: 1,
                message: format!("expected header {REPORT_HEADER:?}"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 9 {
            return Err(err(format!("expected 9 columns, found {}", cells.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad number {s:?}")));
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        out.push(MetricsReport {
            model_name: cells[0].to_string(),
            pretext_accuracy: opt(cells[1])?,
            probe_accuracy: opt(cells[2])?,
            caption_loss: num(cells[3])?,
            perplexity: num(cells[4])?,
            bleu: [num(cells[5])?, num(cells[6])?, num(cells[7])?, num(cells[8])?],
            samples: Vec::new(),
        });
    }
    Ok(out)
}
