//! LSTM caption decoder.
//!
//! Training feeds the whole caption at once: step 0 receives the image
//! feature, step `t >= 1` receives the embedding of token `t - 1`, and the
//! output at step `t` is scored against token `t`. A caption of `L` tokens
//! therefore yields `L` logit rows, the first of which predicts `<start>`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Embedding, Linear, Lstm, LstmState, LstmStepCache, Param, Parameterized};
use crate::tensor::Tensor;
use crate::vocab::{TokenSequence, END, START};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderSpec {
    pub embed_size: usize,
    pub hidden_size: usize,
    pub vocab_size: usize,
    pub num_layers: usize,
}

impl DecoderSpec {
    pub(crate) fn write_descriptor(&self, prefix: &str, out: &mut BTreeMap<String, String>) {
        out.insert(join(prefix, "embed"), self.embed_size.to_string());
        out.insert(join(prefix, "hidden"), self.hidden_size.to_string());
        out.insert(join(prefix, "vocab"), self.vocab_size.to_string());
        out.insert(join(prefix, "layers"), self.num_layers.to_string());
    }

    pub(crate) fn read_descriptor(prefix: &str, map: &BTreeMap<String, String>) -> Result<Self> {
        let num = |k: &str| -> Result<usize> {
            map.get(&join(prefix, k))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Topology(format!("descriptor lacks {}", join(prefix, k))))
        };
        Ok(Self {
            embed_size: num("embed")?,
            hidden_size: num("hidden")?,
            vocab_size: num("vocab")?,
            num_layers: num("layers")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    spec: DecoderSpec,
    pub embed: Embedding,
    pub lstm: Lstm,
    pub output: Linear,
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    batch: usize,
    steps: usize,
    captions: Vec<Vec<usize>>,
    lstm: Vec<LstmStepCache>,
    /// Hidden outputs stacked `[B * T, H]`, row `b * T + t`.
    hidden: Tensor,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(spec: DecoderSpec, rng: &mut R) -> Result<Self> {
        if spec.num_layers != 1 {
            return Err(Error::Config(format!("only single-layer decoders are supported, got {}", spec.num_layers)));
        }
        if spec.embed_size == 0 || spec.hidden_size == 0 || spec.vocab_size < 2 {
            return Err(Error::Config(format!("degenerate decoder {spec:?}")));
        }
        Ok(Self {
            spec,
            embed: Embedding::new(spec.vocab_size, spec.embed_size, rng),
            lstm: Lstm::new(spec.embed_size, spec.hidden_size, rng),
            output: Linear::new(spec.hidden_size, spec.vocab_size, rng),
        })
    }

    pub fn spec(&self) -> &DecoderSpec {
        &self.spec
    }

    /// Teacher-forced logits `[B, L, V]` for `captions` (B rows of L tokens).
    pub fn decode_train(&self, features: &Tensor, captions: &[Vec<usize>]) -> Result<(Tensor, DecoderCache)> {
        let batch = captions.len();
        if batch == 0 || features.rank() != 2 || features.dim(0) != batch || features.dim(1) != self.spec.embed_size {
            return Err(Error::Shape(format!(
                "decoder expects features [{batch}, {}], got {:?}",
                self.spec.embed_size,
                features.shape()
            )));
        }
        let steps = captions[0].len();
        if steps < 2 {
            return Err(Error::InvalidArgument(format!("captions need at least 2 tokens, got {steps}")));
        }
        for row in captions {
            if row.len() != steps {
                return Err(Error::Shape("all captions in a batch must share one length".into()));
            }
            if let Some(&t) = row.iter().find(|&&t| t >= self.spec.vocab_size) {
                return Err(Error::InvalidArgument(format!(
                    "token {t} out of range for vocabulary of {}",
                    self.spec.vocab_size
                )));
            }
        }

        let mut inputs = Vec::with_capacity(steps);
        inputs.push(features.clone());
        for t in 1..steps {
            let column: Vec<usize> = captions.iter().map(|row| row[t - 1]).collect();
            inputs.push(self.embed.forward(&column)?);
        }
        let init = LstmState::zeros(batch, self.spec.hidden_size);
        let (hs, lstm_cache, _) = self.lstm.forward_sequence(&inputs, &init)?;

        let h = self.spec.hidden_size;
        let mut hidden = Tensor::zeros(&[batch * steps, h]);
        for (t, ht) in hs.iter().enumerate() {
            for b in 0..batch {
                hidden.row_mut(b * steps + t).copy_from_slice(ht.row(b));
            }
        }
        let logits = self
            .output
            .forward(&hidden)?
            .reshape(&[batch, steps, self.spec.vocab_size])?;
        let cache = DecoderCache {
            batch,
            steps,
            captions: captions.to_vec(),
            lstm: lstm_cache,
            hidden,
        };
        Ok((logits, cache))
    }

    /// Accumulates parameter gradients; returns the gradient for the image
    /// features `[B, E]`.
    pub fn backward(&mut self, cache: &DecoderCache, d_logits: &Tensor) -> Result<Tensor> {
        let (batch, steps) = (cache.batch, cache.steps);
        let d2 = d_logits.clone().reshape(&[batch * steps, self.spec.vocab_size])?;
        let d_hidden = self.output.backward(&cache.hidden, &d2);
        let h = self.spec.hidden_size;
        let dhs: Vec<Tensor> = (0..steps)
            .map(|t| {
                let mut dt = Tensor::zeros(&[batch, h]);
                for b in 0..batch {
                    dt.row_mut(b).copy_from_slice(d_hidden.row(b * steps + t));
                }
                dt
            })
            .collect();
        let dxs = self.lstm.backward_sequence(&cache.lstm, &dhs);
        for (t, dx) in dxs.iter().enumerate().skip(1) {
            let column: Vec<usize> = cache.captions.iter().map(|row| row[t - 1]).collect();
            self.embed.backward(&column, dx);
        }
        Ok(dxs.into_iter().next().expect("at least two steps"))
    }
}

impl Parameterized for Decoder {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.embed.visit_params(&join(prefix, "embed"), f);
        self.lstm.visit_params(&join(prefix, "lstm"), f);
        self.output.visit_params(&join(prefix, "output"), f);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        self.embed.visit_params_mut(&join(prefix, "embed"), f);
        self.lstm.visit_params_mut(&join(prefix, "lstm"), f);
        self.output.visit_params_mut(&join(prefix, "output"), f);
    }
}

/// One-sequence autoregressive interface used by [`generate`].
pub trait StepDecoder {
    type State;

    /// Consumes the image feature; the returned logits (the `<start>`
    /// prediction) are not used for generation.
    fn start(&self, feature: &[f64]) -> Result<(Vec<f64>, Self::State)>;

    fn step(&self, token: usize, state: &Self::State) -> Result<(Vec<f64>, Self::State)>;
}

impl StepDecoder for Decoder {
    type State = LstmState;

    fn start(&self, feature: &[f64]) -> Result<(Vec<f64>, LstmState)> {
        let x = Tensor::from_vec(&[1, feature.len()], feature.to_vec())?;
        let (state, _) = self.lstm.step(&x, &LstmState::zeros(1, self.spec.hidden_size))?;
        let logits = self.output.forward(&state.hidden)?.into_data();
        Ok((logits, state))
    }

    fn step(&self, token: usize, state: &LstmState) -> Result<(Vec<f64>, LstmState)> {
        let x = self.embed.forward(&[token])?;
        let (next, _) = self.lstm.step(&x, state)?;
        let logits = self.output.forward(&next.hidden)?.into_data();
        Ok((logits, next))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding. The result starts with `<start>` and grows until
/// `<end>` is emitted or it holds `max_len` tokens.
pub fn generate<D: StepDecoder + ?Sized>(decoder: &D, feature: &[f64], max_len: usize) -> Result<TokenSequence> {
    if max_len < 2 {
        return Err(Error::InvalidArgument(format!("max_len must be >= 2, got {max_len}")));
    }
    let (_, mut state) = decoder.start(feature)?;
    let mut tokens = vec![START];
    while tokens.len() < max_len {
        let prev = *tokens.last().expect("non-empty");
        let (logits, next) = decoder.step(prev, &state)?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("decoder produced non-finite logits".into()));
        }
        state = next;
        let token = argmax(&logits);
        tokens.push(token);
        if token == END {
            break;
        }
    }
    Ok(TokenSequence(tokens))
}
