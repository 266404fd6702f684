//! Central finite-difference checks of every layer's backward pass and of
//! the full encoder → decoder → cross-entropy path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rotcap::models::{Captioner, Encoder, EncoderSpec, FeatureNorm};
use rotcap::nn::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, BatchNorm1d, Conv2d, Embedding, Linear, Lstm,
    LstmState, MaxPool2d, Parameterized,
};
use rotcap::training::{cross_entropy, cross_entropy_with_grad};
use rotcap::Tensor;

const STEP: f64 = 1e-5;
const FINE_STEP: f64 = 1e-6;
const TOLERANCE: f64 = 1e-3;
/// Differences below this are difference-quotient roundoff, not error.
const ABS_TOLERANCE: f64 = 1e-8;
/// Two step sizes that disagree by more than this mean the difference
/// quotient straddles a ReLU or max-pool kink; such coordinates are skipped.
const SMOOTHNESS: f64 = 1e-4;
pub const SEEDS: u64 = 10;
const COORDS_PER_PARAM: usize = 12;

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn sample_coords(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= COORDS_PER_PARAM {
        (0..len).collect()
    } else {
        (0..COORDS_PER_PARAM).map(|_| rng.gen_range(0..len)).collect()
    }
}

/// Central difference of `f` around 0. A second, finer step detects
/// kinks: `None` when the two estimates disagree.
fn central(f: &mut dyn FnMut(f64) -> f64) -> Option<f64> {
    let coarse = (f(STEP) - f(-STEP)) / (2.0 * STEP);
    let fine = (f(FINE_STEP) - f(-FINE_STEP)) / (2.0 * FINE_STEP);
    (rel_error(coarse, fine) < SMOOTHNESS || (coarse - fine).abs() < 1e-9).then_some(coarse)
}

/// Outcome of one comparison batch.
#[derive(Default)]
pub struct Stats {
    pub worst: f64,
    pub checked: usize,
    pub skipped: usize,
    pub smooth: bool,
    pub failures: Vec<String>,
}

impl Stats {
    fn record(&mut self, what: &str, analytic: f64, numeric: Option<f64>) {
        match numeric {
            None => self.skipped += 1,
            Some(n) => {
                let e = if (analytic - n).abs() < ABS_TOLERANCE { 0.0 } else { rel_error(analytic, n) };
                if e >= TOLERANCE {
                    self.failures.push(format!("{what}: analytic {analytic} numeric {n}"));
                }
                self.worst = self.worst.max(e);
                self.checked += 1;
            }
        }
    }

    fn merge(&mut self, other: Stats) {
        self.worst = self.worst.max(other.worst);
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.failures.extend(other.failures);
    }

    /// Marks a layer with no kinks: every coordinate must be comparable.
    fn require_smooth(mut self) -> Stats {
        self.smooth = true;
        self
    }

    /// Tolerance violations, empty comparisons, and too many kinks (none for
    /// smooth layers, at most 2% otherwise) are errors.
    pub fn verdict(&self) -> Result<(), String> {
        if let Some(f) = self.failures.first() {
            return Err(format!("{} coordinates over tolerance, first {f}", self.failures.len()));
        }
        if self.checked == 0 {
            return Err("no coordinates compared".into());
        }
        let total = self.checked + self.skipped;
        if (self.smooth && self.skipped > 0) || self.skipped * 50 > total {
            return Err(format!("{} of {total} coordinates were non-smooth", self.skipped));
        }
        Ok(())
    }
}

/// Compares accumulated `Param::grad` of `model` with central differences
/// of `loss`.
fn check_params<M: Parameterized>(model: &mut M, loss: &dyn Fn(&M) -> f64, rng: &mut ChaCha8Rng) -> Stats {
    let names: Vec<(String, usize)> = model
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.value.len()))
        .collect();
    let mut stats = Stats::default();
    for (name, len) in names {
        for i in sample_coords(len, rng) {
            let analytic = model
                .named_params()
                .into_iter()
                .find(|(n, _)| *n == name)
                .map(|(_, p)| p.grad.data()[i])
                .unwrap();
            let numeric = central(&mut |delta| {
                let set = |m: &mut M, d: f64| {
                    for (n, p) in m.named_params_mut() {
                        if n == name {
                            p.value.data_mut()[i] += d;
                        }
                    }
                };
                set(model, delta);
                let v = loss(model);
                set(model, -delta);
                v
            });
            stats.record(&format!("{name}[{i}]"), analytic, numeric);
        }
    }
    stats
}

/// Same comparison for the gradient with respect to an input tensor.
fn check_input(x: &Tensor, dx: &Tensor, loss: &dyn Fn(&Tensor) -> f64, rng: &mut ChaCha8Rng) -> Stats {
    let mut stats = Stats::default();
    for i in sample_coords(x.len(), rng).into_iter().chain(sample_coords(x.len(), rng)) {
        let numeric = central(&mut |delta| {
            let mut xp = x.clone();
            xp.data_mut()[i] += delta;
            loss(&xp)
        });
        stats.record(&format!("input[{i}]"), dx.data()[i], numeric);
    }
    stats
}

pub fn linear_layer() -> Stats {
    let mut stats = Stats::default();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = Linear::new(4, 5, &mut rng);
        let x = random_tensor(&[3, 4], &mut rng);
        let r = random_tensor(&[3, 5], &mut rng);
        let dx = layer.backward(&x, &r);
        stats.merge(check_params(&mut layer, &|l: &Linear| dot(&l.forward(&x).unwrap(), &r), &mut rng));
        stats.merge(check_input(&x, &dx, &|x| dot(&layer.forward(x).unwrap(), &r), &mut rng));
    }
    stats.require_smooth()
}

pub fn convolution_layer() -> Stats {
    let mut stats = Stats::default();
    for seed in 0..SEEDS {
        for (kernel, stride) in [(3, 1), (3, 2), (1, 1), (1, 2), (5, 1)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut conv = Conv2d::new(2, 3, kernel, stride, &mut rng);
            let x = random_tensor(&[2, 2, 6, 5], &mut rng);
            let (y, cache) = conv.forward(&x).unwrap();
            let r = random_tensor(y.shape(), &mut rng);
            let dx = conv.backward(&cache, &r);
            let f = |c: &Conv2d, x: &Tensor| dot(&c.forward(x).unwrap().0, &r);
            stats.merge(check_params(&mut conv, &|c| f(c, &x), &mut rng));
            stats.merge(check_input(&x, &dx, &|x| f(&conv, x), &mut rng));
        }
    }
    stats.require_smooth()
}

pub fn max_pool_layer() -> Stats {
    let mut stats = Stats::default();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool = MaxPool2d::new(2);
        let x = random_tensor(&[2, 3, 5, 4], &mut rng);
        let (y, cache) = pool.forward(&x).unwrap();
        let r = random_tensor(y.shape(), &mut rng);
        let dx = pool.backward(&cache, &r);
        stats.merge(check_input(&x, &dx, &|x| dot(&pool.forward(x).unwrap().0, &r), &mut rng));
    }
    stats
}

pub fn global_average_pool() -> Stats {
    let mut stats = Stats::default();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[2, 3, 4, 3], &mut rng);
        let r = random_tensor(&[2, 3], &mut rng);
        let dx = global_avg_pool_backward(x.shape(), &r);
        stats.merge(check_input(&x, &dx, &|x| dot(&global_avg_pool(x).unwrap(), &r), &mut rng));
    }
    stats.require_smooth()
}

pub fn relu_activation() -> Stats {
    let mut stats = Stats::default();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Keep every input away from the kink at zero.
        let data = (0..24)
            .map(|_| {
                let v: f64 = rng.gen_range(0.05..1.0);
                if rng.gen_bool(0.5) { v } else { -v }
            })
            .collect();
        let x = Tensor::from_vec(&[4, 6], data).unwrap();
        let r = random_tensor(&[4, 6], &mut rng);
        let dx = relu_backward(&relu(&x), &r);
        stats.merge(check_input(&x, &dx, &|x| dot(&relu(x), &r), &mut rng));
    }
    stats.require_smooth()
}

pub fn embedding_layer() -> Stats {
    let mut stats = Stats::default();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut emb = Embedding::new(7, 3, &mut rng);
        let tokens: Vec<usize> = (0..6).map(|_| rng.gen_range(0..7)).collect();
        let r = random_tensor(&[6, 3], &mut rng);
        emb.backward(&tokens, &r);
        stats.merge(check_params(&mut emb, &|e: &Embedding| dot(&e.forward(&tokens).unwrap(), &r), &mut rng));
    }
    stats.require_smooth()
}

pub fn lstm_through_time() -> Stats {
    let mut stats = Stats::default();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lstm = Lstm::new(3, 4, &mut rng);
        let xs: Vec<Tensor> = (0..5).map(|_| random_tensor(&[2, 3], &mut rng)).collect();
        let rs: Vec<Tensor> = (0..5).map(|_| random_tensor(&[2, 4], &mut rng)).collect();
        let loss = |l: &Lstm, xs: &[Tensor]| {
            let (hs, _, _) = l.forward_sequence(xs, &LstmState::zeros(2, 4)).unwrap();
            hs.iter().zip(&rs).map(|(h, r)| dot(h, r)).sum::<f64>()
        };
        let (_, caches, _) = lstm.forward_sequence(&xs, &LstmState::zeros(2, 4)).unwrap();
        let dxs = lstm.backward_sequence(&caches, &rs);
        stats.merge(check_params(&mut lstm, &|l| loss(l, &xs), &mut rng));
        for t in 0..xs.len() {
            let f = |x: &Tensor| {
                let mut v = xs.clone();
                v[t] = x.clone();
                loss(&lstm, &v)
            };
            stats.merge(check_input(&xs[t], &dxs[t], &f, &mut rng));
        }
    }
    stats.require_smooth()
}

pub fn softmax_cross_entropy() -> Stats {
    let mut stats = Stats::default();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_tensor(&[2, 3, 5], &mut rng);
        let targets: Vec<usize> = (0..6).map(|_| rng.gen_range(0..5)).collect();
        let (_, grad) = cross_entropy_with_grad(&logits, &targets).unwrap();
        stats.merge(check_input(&logits, &grad, &|l| cross_entropy(l, &targets).unwrap(), &mut rng));
    }
    stats.require_smooth()
}

pub fn batch_norm_both_modes() -> Stats {
    let mut stats = Stats::default();
    for seed in 0..SEEDS {
        for train in [true, false] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut bn = BatchNorm1d::new(4);
            bn.gamma.value = random_tensor(&[4], &mut rng);
            bn.beta.value = random_tensor(&[4], &mut rng);
            bn.running_mean = random_tensor(&[4], &mut rng);
            bn.running_var = Tensor::from_vec(&[4], (0..4).map(|_| rng.gen_range(0.5..2.0)).collect()).unwrap();
            let x = random_tensor(&[5, 4], &mut rng);
            let forward = |b: &BatchNorm1d, x: &Tensor| {
                if train {
                    b.clone().forward_train(x).unwrap()
                } else {
                    b.forward_eval(x).unwrap()
                }
            };
            let (y, cache) = forward(&bn, &x);
            let r = random_tensor(y.shape(), &mut rng);
            let dx = bn.backward(&cache, &r);
            let f = |b: &BatchNorm1d, x: &Tensor| dot(&forward(b, x).0, &r);
            stats.merge(check_params(&mut bn, &|b| f(b, &x), &mut rng));
            stats.merge(check_input(&x, &dx, &|x| f(&bn, x), &mut rng));
        }
    }
    stats.require_smooth()
}

pub fn tiny_spec(skip: bool, feature_norm: FeatureNorm) -> EncoderSpec {
    EncoderSpec {
        in_channels: 3,
        stem_channels: 3,
        stages: EncoderSpec::parse_stages("4:3:1:max,6:3:2:none").unwrap(),
        embed_size: 5,
        skip_connections: skip,
        feature_norm,
    }
}

/// Forward pass in the requested mode, leaving `e` untouched.
fn encode_mode(e: &Encoder, x: &Tensor, train: bool) -> (Tensor, rotcap::models::EncoderCache) {
    if train {
        e.clone().encode_train(x).unwrap()
    } else {
        e.encode(x).unwrap()
    }
}

pub fn residual_encoder() -> Stats {
    let mut stats = Stats::default();
    for seed in 0..SEEDS {
        for (skip, norm, train) in [
            (true, FeatureNorm::None, false),
            (false, FeatureNorm::None, false),
            (true, FeatureNorm::Batch, true),
            (false, FeatureNorm::Batch, false),
            (true, FeatureNorm::Running, false),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut enc = Encoder::new(tiny_spec(skip, norm), &mut rng).unwrap();
            let x = random_tensor(&[3, 3, 8, 8], &mut rng);
            let (y, cache) = encode_mode(&enc, &x, train);
            let r = random_tensor(y.shape(), &mut rng);
            let dx = enc.backward(&cache, &r);
            let f = |e: &Encoder, x: &Tensor| dot(&encode_mode(e, x, train).0, &r);
            stats.merge(check_params(&mut enc, &|e| f(e, &x), &mut rng));
            stats.merge(check_input(&x, &dx, &|x| f(&enc, x), &mut rng));
        }
    }
    stats
}

pub fn end_to_end_caption_loss() -> Stats {
    let mut stats = Stats::default();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Captioner::new(tiny_spec(true, FeatureNorm::Batch), 6, 7, &mut rng).unwrap();
        let images = random_tensor(&[3, 3, 8, 8], &mut rng);
        let captions: Vec<Vec<usize>> = (0..3)
            .map(|_| {
                let mut c = vec![0];
                c.extend((0..3).map(|_| rng.gen_range(2..7)));
                c.push(1);
                c
            })
            .collect();
        let targets: Vec<usize> = captions.iter().flatten().copied().collect();
        let loss = |m: &Captioner, x: &Tensor| {
            let (f, _) = encode_mode(&m.encoder, x, true);
            let (logits, _) = m.decoder.decode_train(&f, &captions).unwrap();
            cross_entropy(&logits, &targets).unwrap()
        };
        let (features, enc_cache) = encode_mode(&model.encoder, &images, true);
        let (logits, dec_cache) = model.decoder.decode_train(&features, &captions).unwrap();
        let (_, dlogits) = cross_entropy_with_grad(&logits, &targets).unwrap();
        let dfeat = model.decoder.backward(&dec_cache, &dlogits).unwrap();
        let dx = model.encoder.backward(&enc_cache, &dfeat);
        stats.merge(check_params(&mut model, &|m| loss(m, &images), &mut rng));
        stats.merge(check_input(&images, &dx, &|x| loss(&model, x), &mut rng));
    }
    stats
}

pub type Check = (&'static str, fn() -> Stats);

/// Every check, by name.
pub const ALL: &[Check] = &[
    ("linear_layer", linear_layer),
    ("convolution_layer", convolution_layer),
    ("max_pool_layer", max_pool_layer),
    ("global_average_pool", global_average_pool),
    ("relu_activation", relu_activation),
    ("embedding_layer", embedding_layer),
    ("lstm_through_time", lstm_through_time),
    ("softmax_cross_entropy", softmax_cross_entropy),
    ("batch_norm_both_modes", batch_norm_both_modes),
    ("residual_encoder", residual_encoder),
    ("end_to_end_caption_loss", end_to_end_caption_loss),
];
