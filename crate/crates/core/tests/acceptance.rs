//! End-to-end acceptance checks, one numbered criterion each.
//!
//! Every criterion runs even when an earlier one fails; a summary line per
//! criterion goes straight to the process stdout so it survives output
//! capture, and the test fails at the end if any criterion did.

mod common;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use common::{dataset_of, desk_caption_text, desk_pretext_config, field, gradcheck, rotcap_ok};
use rotcap::config::{child_seed, RunConfig};
use rotcap::data::{build_length_histogram, sample_train_indices, ImageTensor, TokenizedDataset};
use rotcap::evaluation::{bleu, caption_loss, evaluate_captioner, probe_accuracy, BleuStats, EvalOptions};
use rotcap::models::{Captioner, EncoderSpec, FeatureNorm, RotationNet, StageSpec};
use rotcap::nn::Parameterized;
use rotcap::rotation::{pretext_eval, pretext_train, preprocess_eval, rotate, RotationLabel};
use rotcap::synthetic::generate_samples;
use rotcap::training::optim::AdamConfig;
use rotcap::training::{adam_step, load_checkpoint, save_checkpoint, AdamState, Checkpoint};
use rotcap::vocab::Vocabulary;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, message: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(message())
    }
}

fn within(limit: Duration, started: Instant, what: &str) -> Result<(), String> {
    let spent = started.elapsed();
    ensure(spent < limit, || format!("{what} took {spent:.1?}, limit {limit:?}"))
}

// ---------------------------------------------------------------- 1

fn rotation_group() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..1000 {
        let c = rng.gen_range(1..=3);
        let side = rng.gen_range(1..=12);
        let data: Vec<f64> = (0..c * side * side).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let img = ImageTensor::new(c, side, side, data, true).map_err(|e| e.to_string())?;
        let sorted_bits = |t: &ImageTensor| {
            let mut b: Vec<u64> = t.data.iter().map(|v| v.to_bits()).collect();
            b.sort_unstable();
            b
        };
        let original = sorted_bits(&img);
        for a in 0..4 {
            let ra = RotationLabel::new(a).unwrap();
            let once = rotate(&img, ra).map_err(|e| e.to_string())?;
            ensure(sorted_bits(&once) == original, || format!("case {case}: rotation {a} changed the values"))?;
            for b in 0..4 {
                let rb = RotationLabel::new(b).unwrap();
                let twice = rotate(&once, rb).map_err(|e| e.to_string())?;
                let direct = rotate(&img, RotationLabel::new((a + b) % 4).unwrap()).map_err(|e| e.to_string())?;
                let bits = |t: &ImageTensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                ensure(bits(&twice) == bits(&direct), || {
                    format!("case {case} ({c}x{side}x{side}): r{b}(r{a}(x)) != r{}(x)", (a + b) % 4)
                })?;
            }
        }
    }
    within(Duration::from_secs(10), started, "1000 composition cases")?;
    Ok("1000 tensors, 16 pairs each, bit-exact; value multisets preserved".into())
}

// ---------------------------------------------------------------- 2

fn gradients() -> Outcome {
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (name, check) in gradcheck::ALL {
        let stats = check();
        stats.verdict().map_err(|e| format!("{name}: {e}"))?;
        worst = worst.max(stats.worst);
        checked += stats.checked;
    }
    within(Duration::from_secs(120), started, "gradient checks")?;
    Ok(format!("{} layers, {checked} coordinates, worst relative error {worst:.2e}", gradcheck::ALL.len()))
}

// ---------------------------------------------------------------- 3

fn adam() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for seq in 0..20 {
        let cfg = AdamConfig {
            learning_rate: 10f64.powf(rng.gen_range(-4.0..-1.0)),
            beta1: rng.gen_range(0.5..0.99),
            beta2: rng.gen_range(0.9..0.9999),
            epsilon: 10f64.powf(rng.gen_range(-10.0..-6.0)),
        };
        let n = rng.gen_range(1..8);
        let mut params: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut reference = params.clone();
        let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
        let mut state = AdamState::new(n);
        for t in 1..=100 {
            let grads: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            adam_step(&mut params, &grads, &mut state, &cfg).map_err(|e| e.to_string())?;
            for i in 0..n {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grads[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grads[i].powi(2);
                let m_hat = m[i] / (1.0 - cfg.beta1.powi(t));
                let v_hat = v[i] / (1.0 - cfg.beta2.powi(t));
                reference[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
            for i in 0..n {
                let err = (params[i] - reference[i]).abs();
                worst = worst.max(err);
                ensure(err <= 1e-12, || format!("sequence {seq} step {t}: off by {err:e}"))?;
            }
        }
    }
    // The first update has magnitude ~lr whatever the gradient scale.
    let lr = 1e-3;
    let cfg = AdamConfig {
        learning_rate: lr,
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-8,
    };
    for k in [0.01, 1.0, 100.0] {
        let grads: Vec<f64> = (0..50)
            .map(|_| k * rng.gen_range(0.1..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        let mut params = vec![0.0; grads.len()];
        adam_step(&mut params, &grads, &mut AdamState::new(grads.len()), &cfg).map_err(|e| e.to_string())?;
        for (p, g) in params.iter().zip(&grads) {
            let expect = -lr * g.signum();
            ensure((p - expect).abs() <= 1e-4 * lr, || format!("gradient scale {k}: first step {p:e}, expected {expect:e}"))?;
        }
    }
    Ok(format!("2000 steps within {worst:.1e}; first step scale-invariant over 1e-2..1e2"))
}

// ---------------------------------------------------------------- 4

fn vocabulary() -> Outcome {
    let table = [
        ("a", 2),
        ("man", 74),
        ("riding", 12),
        ("bike", 18),
        ("while", 56),
        ("listening", 865),
        ("to", 7),
        ("music", 66),
        (".", 369),
    ];
    let vocab = Vocabulary::from_entries(&table, 3).map_err(|e| e.to_string())?;
    let got = vocab.tokenize("a man riding a bike while listening to music.").0;
    let want = vec![0, 2, 74, 12, 2, 18, 56, 865, 7, 66, 369, 1];
    ensure(got == want, || format!("tokenized to {got:?}, expected {want:?}"))?;
    let unknown = vocab.tokenize("a zebra").0;
    ensure(unknown == vec![0, 2, 3, 1], || format!("out-of-vocabulary word gave {unknown:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let words: Vec<String> = (0..300)
        .map(|_| (0..rng.gen_range(1..9)).map(|_| rng.gen_range(b'a'..=b'z') as char).collect())
        .collect();
    let captions: Vec<String> = (0..1000)
        .map(|_| {
            let n = rng.gen_range(1..15);
            let mut c = (0..n).map(|_| words.choose(&mut rng).unwrap().as_str()).collect::<Vec<_>>().join(" ");
            if rng.gen_bool(0.5) {
                c.push('.');
            }
            c
        })
        .collect();
    let built = Vocabulary::build(&captions, 1).map_err(|e| e.to_string())?;
    for c in &captions {
        let seq = built.tokenize(c);
        let text = built.detokenize(seq.tokens()).map_err(|e| e.to_string())?;
        let normalized = rotcap::vocab::split_words(c).join(" ");
        ensure(text == normalized, || format!("{c:?} came back as {text:?}"))?;
        ensure(built.tokenize(&text) == seq, || format!("{c:?} does not re-tokenize identically"))?;
    }
    Ok(format!("reference sentence matches; 1000 captions over {} words round-trip", built.len()))
}

// ---------------------------------------------------------------- 5

fn chi_square_p(observed: &[f64], expected: &[f64]) -> f64 {
    let stat: f64 = observed.iter().zip(expected).map(|(o, e)| (o - e).powi(2) / e).sum();
    let dist = ChiSquared::new((observed.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

fn sampler() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let lengths: Vec<usize> = (0..240).map(|_| 5 + rng.gen_range(0..4) + rng.gen_range(0..6)).collect();
    let hist = build_length_histogram(&lengths).map_err(|e| e.to_string())?;
    let mut index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in lengths.iter().enumerate() {
        index.entry(l).or_default().push(i);
    }
    let draws = 100_000;
    let batch = 4;
    let mut by_length: BTreeMap<usize, f64> = BTreeMap::new();
    let mut by_record = vec![0.0; lengths.len()];
    for _ in 0..draws {
        let idx = sample_train_indices(&hist, &index, batch, &mut rng).map_err(|e| e.to_string())?;
        let l = lengths[idx[0]];
        ensure(idx.iter().all(|&i| lengths[i] == l), || format!("mixed-length batch {idx:?}"))?;
        *by_length.entry(l).or_default() += 1.0;
        for i in idx {
            by_record[i] += 1.0;
        }
    }
    let total = lengths.len() as f64;
    let observed: Vec<f64> = hist.counts.keys().map(|l| by_length.get(l).copied().unwrap_or(0.0)).collect();
    let expected: Vec<f64> = hist.counts.values().map(|&c| draws as f64 * c as f64 / total).collect();
    let p_len = chi_square_p(&observed, &expected);
    // Length-proportional choice then uniform choice within the length
    // makes every record equally likely overall.
    let per_record = vec![(draws * batch) as f64 / total; lengths.len()];
    let p_rec = chi_square_p(&by_record, &per_record);
    ensure(p_len > 0.001, || format!("length frequencies rejected, p = {p_len:.2e}"))?;
    ensure(p_rec > 0.001, || format!("record frequencies rejected, p = {p_rec:.2e}"))?;
    Ok(format!(
        "{draws} batches all single-length; length p = {p_len:.3}, record p = {p_rec:.3} over {} lengths",
        hist.counts.len()
    ))
}

// ---------------------------------------------------------------- 6

fn count_of(hay: &[u8], gram: &[u8]) -> usize {
    hay.windows(gram.len()).filter(|w| *w == gram).count()
}

/// Straightforward corpus BLEU, written independently of the library.
fn bleu_oracle(cands: &[Vec<u8>], refs: &[Vec<Vec<u8>>], max_n: usize) -> f64 {
    let mut logs = Vec::new();
    for n in 1..=max_n {
        let (mut matched, mut possible) = (0usize, 0usize);
        for (cand, rs) in cands.iter().zip(refs) {
            if cand.len() < n {
                continue;
            }
            possible += cand.len() - n + 1;
            for i in 0..=cand.len() - n {
                let gram = &cand[i..i + n];
                let first = (0..i).all(|j| &cand[j..j + n] != gram);
                if first {
                    let limit = rs.iter().map(|r| if r.len() >= n { count_of(r, gram) } else { 0 }).max().unwrap();
                    matched += count_of(cand, gram).min(limit);
                }
            }
        }
        if possible > 0 {
            let p = matched as f64 / possible as f64;
            logs.push(if matched == 0 { 1e-9f64.ln() } else { p.ln() });
        }
    }
    if logs.is_empty() {
        return 0.0;
    }
    let c: usize = cands.iter().map(Vec::len).sum();
    let mut r = 0;
    for (cand, rs) in cands.iter().zip(refs) {
        let mut best = rs[0].len();
        for x in rs {
            let (d, bd) = (x.len().abs_diff(cand.len()), best.abs_diff(cand.len()));
            if d < bd || (d == bd && x.len() < best) {
                best = x.len();
            }
        }
        r += best;
    }
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    (bp * (logs.iter().sum::<f64>() / logs.len() as f64).exp()).clamp(0.0, 1.0)
}

fn bleu_metric() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let sentence = |rng: &mut ChaCha8Rng, lo: usize| -> Vec<u8> {
        let n = rng.gen_range(lo..9);
        (0..n).map(|_| rng.gen_range(0..5)).collect()
    };
    let mut worst = 0.0f64;
    for corpus in 0..20 {
        let size = rng.gen_range(1..7);
        let cands: Vec<Vec<u8>> = (0..size).map(|_| sentence(&mut rng, 0)).collect();
        let refs: Vec<Vec<Vec<u8>>> = (0..size)
            .map(|_| (0..rng.gen_range(1..4)).map(|_| sentence(&mut rng, 1)).collect())
            .collect();
        for n in 1..=4 {
            let ours = bleu(&cands, &refs, n).map_err(|e| e.to_string())?;
            let oracle = bleu_oracle(&cands, &refs, n);
            worst = worst.max((ours - oracle).abs());
            ensure((ours - oracle).abs() <= 1e-9, || format!("corpus {corpus}, BLEU-{n}: {ours} vs oracle {oracle}"))?;
        }
        let nonempty: Vec<Vec<u8>> = (0..size).map(|_| sentence(&mut rng, 1)).collect();
        let own: Vec<Vec<Vec<u8>>> = nonempty.iter().map(|c| vec![c.clone()]).collect();
        let identical = bleu(&nonempty, &own, 4).map_err(|e| e.to_string())?;
        ensure((identical - 1.0).abs() <= 1e-12, || format!("corpus {corpus}: BLEU of a corpus with itself is {identical}"))?;
    }
    let toks = |s: &str| s.split(' ').map(str::to_string).collect::<Vec<_>>();
    let stats = BleuStats::collect(&[toks("the the the the")], &[vec![toks("the cat sat")]], 4).map_err(|e| e.to_string())?;
    let p1 = stats.precision(1).unwrap_or(f64::NAN);
    ensure(p1 == 0.25, || format!("clipped unigram precision {p1}, expected 0.25"))?;
    Ok(format!("20 corpora x 4 orders within {worst:.1e} of the oracle; self-BLEU 1; clipping 1/4"))
}

// ---------------------------------------------------------------- 7

fn tiny_encoder() -> EncoderSpec {
    EncoderSpec {
        in_channels: 3,
        stem_channels: 4,
        stages: EncoderSpec::parse_stages("4:3:1:max,6:3:1:max").unwrap(),
        embed_size: 8,
        skip_connections: true,
        feature_norm: FeatureNorm::Running,
    }
}

fn perplexity() -> Outcome {
    let samples = generate_samples(12, 16, 707).map_err(|e| e.to_string())?;
    let dataset = dataset_of(&samples);
    let captions: Vec<&str> = samples.iter().map(|s| s.caption.as_str()).collect();
    let vocab = Vocabulary::build(&captions, 1).map_err(|e| e.to_string())?;
    let mut pre = RunConfig::captioning().preprocess;
    pre.resize_to = 16;
    pre.crop_size = 16;
    let opts = EvalOptions {
        model_name: "m".into(),
        preprocess: pre.clone(),
        max_len: 12,
        labels: None,
        probe_l2: 0.0,
        sample_count: 0,
    };
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Captioner::new(tiny_encoder(), 8 + 4 * seed as usize, vocab.len(), &mut rng).map_err(|e| e.to_string())?;
        let report = evaluate_captioner(&model, &dataset, &vocab, &opts).map_err(|e| e.to_string())?;
        let gap = (report.perplexity - report.caption_loss.exp()).abs();
        worst = worst.max(gap);
        ensure(gap <= 1e-9, || format!("seed {seed}: perplexity {} vs exp(loss) {}", report.perplexity, report.caption_loss.exp()))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut model = Captioner::new(tiny_encoder(), 8, vocab.len(), &mut rng).map_err(|e| e.to_string())?;
    for (_, p) in model.decoder.output.named_params_mut() {
        p.value.fill(0.0);
    }
    let tokenized = TokenizedDataset::new(dataset, &vocab);
    let summary = caption_loss(&model, &tokenized, &pre).map_err(|e| e.to_string())?;
    let v = vocab.len() as f64;
    ensure((summary.perplexity - v).abs() <= 1e-6, || {
        format!("uniform model perplexity {} but vocabulary size {v}", summary.perplexity)
    })?;
    Ok(format!("5 models within {worst:.1e}; uniform output gives {:.6} = V", summary.perplexity))
}

// ---------------------------------------------------------------- 8

fn images_of(count: usize, seed: u64) -> Vec<rotcap::data::RawImage> {
    generate_samples(count, 32, seed).unwrap().into_iter().map(|s| s.image).collect()
}

fn pretext_accuracy() -> Outcome {
    let started = Instant::now();
    let cfg = desk_pretext_config(20);
    let train = images_of(500, 81);
    let held_out = preprocess_eval(&images_of(200, 82), &cfg.preprocess).map_err(|e| e.to_string())?;
    let mut init = ChaCha8Rng::seed_from_u64(child_seed(8, "init"));
    let mut sampling = ChaCha8Rng::seed_from_u64(child_seed(8, "sampling"));
    let mut net = RotationNet::new(cfg.encoder.clone(), &mut init).map_err(|e| e.to_string())?;
    pretext_train(&mut net, &train, &cfg.preprocess, &cfg.train, &mut sampling).map_err(|e| e.to_string())?;
    let acc = pretext_eval(&net, &held_out).map_err(|e| e.to_string())?;
    ensure(acc >= 0.95, || format!("held-out rotation accuracy {acc:.4} < 0.95"))?;
    within(Duration::from_secs(600), started, "pretext training")?;
    Ok(format!("held-out rotation accuracy {acc:.4} on 800 rotated copies ({:.0?})", started.elapsed()))
}

// ---------------------------------------------------------------- 9

fn probe_transfer() -> Outcome {
    let cfg = desk_pretext_config(8);
    let mut wins = 0;
    let mut rows = Vec::new();
    for trial in 0..10u64 {
        let train = images_of(200, 900 + trial);
        let probe_set = generate_samples(400, 32, 950 + trial).map_err(|e| e.to_string())?;
        let imgs: Vec<_> = probe_set.iter().map(|s| s.image.clone()).collect();
        let labels: Vec<_> = probe_set.iter().map(|s| s.shape.class()).collect();
        let mut init = ChaCha8Rng::seed_from_u64(child_seed(trial, "init"));
        let mut sampling = ChaCha8Rng::seed_from_u64(child_seed(trial, "sampling"));
        let mut net = RotationNet::new(cfg.encoder.clone(), &mut init).map_err(|e| e.to_string())?;
        let random = probe_accuracy(&net.encoder, &imgs, &labels, &cfg.preprocess, cfg.probe_l2).map_err(|e| e.to_string())?;
        pretext_train(&mut net, &train, &cfg.preprocess, &cfg.train, &mut sampling).map_err(|e| e.to_string())?;
        let pre = probe_accuracy(&net.encoder, &imgs, &labels, &cfg.preprocess, cfg.probe_l2).map_err(|e| e.to_string())?;
        if pre.test_accuracy > random.test_accuracy {
            wins += 1;
        }
        rows.push(format!("{:.2}/{:.2}", pre.test_accuracy, random.test_accuracy));
    }
    ensure(wins >= 9, || format!("pretrained won {wins}/10 trials ({})", rows.join(" ")))?;
    Ok(format!("pretrained beat random in {wins}/10 (pretrained/random: {})", rows.join(" ")))
}

// ---------------------------------------------------------------- 10

fn caption_memorization() -> Outcome {
    let started = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("data");
    let model = tmp.path().join("model");
    let config = tmp.path().join("caption.conf");
    std::fs::write(&config, desk_caption_text(300)).map_err(|e| e.to_string())?;
    let s = |p: &Path| p.to_str().unwrap().to_string();
    rotcap_ok(["make-synthetic", "--out", &s(&data), "--n", "50", "--seed", "10", "--size", "32"]);
    rotcap_ok(["train-caption", "--data", &s(&data), "--config", &s(&config), "--out", &s(&model), "--seed", "10"]);
    let history = std::fs::read_to_string(model.join("history.csv")).map_err(|e| e.to_string())?;
    let last_loss: f64 = history
        .lines()
        .last()
        .and_then(|l| l.split(',').nth(1))
        .and_then(|v| v.parse().ok())
        .ok_or("history.csv has no loss column")?;
    ensure(last_loss < 0.1, || format!("final training loss {last_loss:.4} >= 0.1"))?;
    let ckpt = model.join("checkpoint.bin");
    let eval = rotcap_ok(["evaluate", "--model", &s(&ckpt), "--data", &s(&data), "--out", &s(&tmp.path().join("eval"))]);
    let bleu4: f64 = field(&eval, "bleu4").and_then(|v| v.parse().ok()).ok_or("evaluate printed no bleu4")?;
    ensure(bleu4 >= 0.9, || format!("BLEU-4 {bleu4:.4} < 0.9"))?;
    let manifest = std::fs::read_to_string(data.join("manifest.txt")).map_err(|e| e.to_string())?;
    let mut exact = 0;
    let lines: Vec<&str> = manifest.lines().collect();
    for line in &lines {
        let (rel, want) = line.split_once('\t').ok_or("manifest line without a tab")?;
        let got = rotcap_ok(["caption", "--model", &s(&ckpt), "--image", &s(&data.join(rel))]);
        if got.trim_end() == want {
            exact += 1;
        }
    }
    let (rel0, want0) = lines[0].split_once('\t').unwrap();
    let got0 = rotcap_ok(["caption", "--model", &s(&ckpt), "--image", &s(&data.join(rel0))]);
    ensure(got0.trim_end() == want0, || format!("{rel0}: captioned {:?}, trained on {want0:?}", got0.trim_end()))?;
    Ok(format!(
        "final loss {last_loss:.4}, BLEU-4 {bleu4:.4}, {exact}/{} training captions reproduced ({:.0?})",
        lines.len(),
        started.elapsed()
    ))
}

// ---------------------------------------------------------------- 11

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Every command once, writing under `root` and reading inputs from `inputs`.
fn run_pipeline(root: &Path, inputs: &Path, pretext_conf: &Path, caption_conf: &Path) -> Vec<String> {
    let s = |p: PathBuf| p.to_str().unwrap().to_string();
    let data = s(inputs.join("data"));
    let encoder = s(inputs.join("pre").join("checkpoint.bin"));
    let captioner = s(inputs.join("cap").join("checkpoint.bin"));
    let t = ["--threads", "1"];
    let mut stdout = Vec::new();
    let mut run = |args: Vec<String>| stdout.push(rotcap_ok(t.iter().map(|a| a.to_string()).chain(args)));
    let v = |a: &[&str]| a.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    run(v(&["make-synthetic", "--out", &s(root.join("data")), "--n", "24", "--seed", "11", "--size", "16"]));
    run(v(&["pretrain", "--data", &data, "--config", &s(pretext_conf.to_path_buf()), "--out", &s(root.join("pre")), "--seed", "11"]));
    run(v(&["probe", "--encoder", &encoder, "--data", &data, "--out", &s(root.join("probe"))]));
    run(v(&[
        "train-caption",
        "--data",
        &data,
        "--encoder",
        &encoder,
        "--config",
        &s(caption_conf.to_path_buf()),
        "--out",
        &s(root.join("cap")),
        "--seed",
        "11",
    ]));
    run(v(&["evaluate", "--model", &captioner, "--data", &data, "--out", &s(root.join("eval"))]));
    let model_arg = format!("only={captioner}");
    run(v(&["report", "--model", &model_arg, "--data", &data, "--out", &s(root.join("report"))]));
    run(v(&["caption", "--model", &captioner, "--image", &s(inputs.join("data").join("images/0000.ppm"))]));
    stdout
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let pretext_conf = tmp.path().join("pretext.conf");
    let caption_conf = tmp.path().join("caption.conf");
    let small = "stem_channels = 4\nencoder_stages = 4:3:1:max,8:3:1:max\nembed_size = 8\nresize_to = 16\n";
    std::fs::write(&pretext_conf, format!("{small}crop_size = 14\nbatch_size = 16\nepochs = 2\n")).map_err(|e| e.to_string())?;
    std::fs::write(
        &caption_conf,
        format!("{small}crop_size = 16\nbatch_size = 4\nepochs = 2\nhidden_size = 8\nvocab_threshold = 1\n"),
    )
    .map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let first = run_pipeline(&a, &a, &pretext_conf, &caption_conf);
    let second = run_pipeline(&b, &a, &pretext_conf, &caption_conf);
    let commands = ["make-synthetic", "pretrain", "probe", "train-caption", "evaluate", "report", "caption"];
    for ((x, y), name) in first.iter().zip(&second).zip(commands) {
        ensure(x == y, || format!("{name} printed different output:\n{x}\nvs\n{y}"))?;
    }
    let (fa, fb) = (files_under(&a), files_under(&b));
    ensure(fa.keys().eq(fb.keys()), || format!("file sets differ: {:?} vs {:?}", fa.keys(), fb.keys()))?;
    for (path, bytes) in &fa {
        ensure(fb[path] == *bytes, || format!("{} differs between runs", path.display()))?;
    }
    Ok(format!("7 commands, identical stdout and {} output files byte-for-byte", fa.len()))
}

// ---------------------------------------------------------------- 12

fn random_spec(rng: &mut ChaCha8Rng) -> EncoderSpec {
    let stages = (0..rng.gen_range(1..=3))
        .map(|_| StageSpec {
            out_channels: rng.gen_range(1..=5),
            kernel: [1, 3][rng.gen_range(0..2)],
            stride: rng.gen_range(1..=2),
            pool: rng.gen_bool(0.5),
        })
        .collect();
    EncoderSpec {
        in_channels: 3,
        stem_channels: rng.gen_range(1..=4),
        stages,
        embed_size: rng.gen_range(1..=6),
        skip_connections: rng.gen_bool(0.5),
        feature_norm: [FeatureNorm::None, FeatureNorm::Batch, FeatureNorm::Running][rng.gen_range(0..3)],
    }
}

fn state_bits<M: Parameterized>(m: &M) -> Vec<(String, Vec<u64>)> {
    let bits = |d: &[f64]| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let mut out: Vec<_> = m.named_params().into_iter().map(|(n, p)| (n, bits(p.value.data()))).collect();
    out.extend(m.named_buffers().into_iter().map(|(n, t)| (n, bits(t.data()))));
    out
}

fn round_trip<M: Parameterized>(model: &M, topology: String, fresh: impl Fn(&str) -> rotcap::Result<M>, dir: &Path) -> Result<Vec<u8>, String> {
    let ckpt = Checkpoint::from_model(topology, model);
    let path = dir.join("model.bin");
    save_checkpoint(&path, &ckpt).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let mut back = fresh(&loaded.topology).map_err(|e| e.to_string())?;
    loaded.load_into(&mut back, &loaded.topology).map_err(|e| e.to_string())?;
    ensure(state_bits(&back) == state_bits(model), || "restored weights differ".to_string())?;
    Ok(ckpt.to_bytes())
}

fn checkpoints() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    let mut sample_bytes = Vec::new();
    for i in 0..100 {
        let spec = random_spec(&mut rng);
        let randomize = |m: &mut dyn FnMut(&mut ChaCha8Rng)| m(&mut ChaCha8Rng::seed_from_u64(i));
        let bytes = if i % 2 == 0 {
            let mut net = RotationNet::new(spec, &mut rng).map_err(|e| e.to_string())?;
            randomize(&mut |r| {
                for (_, t) in net.named_buffers_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(0.1..3.0));
                }
            });
            round_trip(&net, net.topology(), RotationNet::from_topology, tmp.path()).map_err(|e| format!("model {i}: {e}"))?
        } else {
            let (hidden, vocab) = (rng.gen_range(1..=6), rng.gen_range(3..=10));
            let mut cap = Captioner::new(spec, hidden, vocab, &mut rng).map_err(|e| e.to_string())?;
            randomize(&mut |r| {
                for (_, t) in cap.named_buffers_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(0.1..3.0));
                }
            });
            round_trip(&cap, cap.topology(), Captioner::from_topology, tmp.path()).map_err(|e| format!("model {i}: {e}"))?
        };
        sample_bytes = bytes;
    }

    let bytes = sample_bytes;
    let reject = |b: &[u8], what: &str, needle: &str| -> Result<(), String> {
        match Checkpoint::from_bytes(b) {
            Ok(_) => Err(format!("{what} was accepted")),
            Err(e) => {
                let msg = e.to_string();
                ensure(msg.contains(needle), || format!("{what}: message {msg:?} lacks {needle:?}"))
            }
        }
    };
    let mut flips = 0;
    for _ in 0..200 {
        let mut bad = bytes.clone();
        let at = rng.gen_range(0..bad.len());
        bad[at] ^= 1 << rng.gen_range(0..8);
        reject(&bad, &format!("bit flip at byte {at}"), "corrupt checkpoint")?;
        flips += 1;
    }
    let mut body_flip = bytes.clone();
    let at = bytes.len() - 12;
    body_flip[at] ^= 0x40;
    reject(&body_flip, "flipped weight byte", "checksum mismatch")?;
    for _ in 0..50 {
        let cut = rng.gen_range(0..bytes.len());
        reject(&bytes[..cut], &format!("truncation to {cut} bytes"), "corrupt checkpoint")?;
    }
    let mut magic = bytes.clone();
    magic[..8].copy_from_slice(b"NOTACKPT");
    reject(&magic, "bad magic", "magic")?;
    let mut version = bytes.clone();
    version[8..12].copy_from_slice(&99u32.to_le_bytes());
    reject(&version, "bad version", "version")?;

    let path = tmp.path().join("broken.bin");
    std::fs::write(&path, &body_flip).map_err(|e| e.to_string())?;
    let err = load_checkpoint(&path).err().ok_or("corrupted file loaded")?.to_string();
    ensure(err.contains("byte offset"), || format!("file error {err:?} gives no offset"))?;
    Ok(format!("100 models bit-exact; {flips} bit flips, 50 truncations, bad magic and version rejected"))
}

// ----------------------------------------------------------------

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 12] = [
        ("rotation composition", rotation_group),
        ("gradient checks", gradients),
        ("adam update rule", adam),
        ("vocabulary mapping", vocabulary),
        ("length-bucketed sampler", sampler),
        ("bleu", bleu_metric),
        ("perplexity", perplexity),
        ("rotation pretext accuracy", pretext_accuracy),
        ("probe transfer", probe_transfer),
        ("caption memorization", caption_memorization),
        ("cli determinism", determinism),
        ("checkpoint round trip", checkpoints),
    ];
    let only: Option<Vec<usize>> = std::env::var("ROTCAP_CRITERIA")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (title, check)) in criteria.iter().enumerate() {
        let number = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&number)) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let text = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {text}"))
        });
        let (verdict, detail) = match &outcome {
            Ok(d) => ("PASS", d.clone()),
            Err(e) => ("FAIL", e.clone()),
        };
        let line = format!("criterion {number:>2} {verdict} {title}: {detail} [{:.1?}]\n", started.elapsed());
        let mut out = std::io::stdout().lock();
        let _ = out.write_all(line.as_bytes());
        let _ = out.flush();
        if outcome.is_err() {
            failed.push(number);
        }
    }
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}
