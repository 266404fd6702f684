use std::collections::BTreeMap;

use rand::Rng;

use super::decoder::{Decoder, DecoderSpec};
use super::encoder::{Encoder, EncoderSpec};
use super::{format_descriptor, parse_descriptor};
use crate::error::{Error, Result};
use crate::nn::{join, Linear, Param, Parameterized};
use crate::tensor::Tensor;
use crate::training::Checkpoint;

/// Linear classifier on top of encoder features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub linear: Linear,
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(embed_size: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::new(embed_size, classes, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.linear.out_features()
    }
}

impl Parameterized for ClassifierHead {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.linear.visit_params(prefix, f);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        self.linear.visit_params_mut(prefix, f);
    }
}

/// Encoder plus a classification head; with four classes this is the
/// rotation-prediction network.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationNet {
    pub encoder: Encoder,
    pub head: ClassifierHead,
}

impl RotationNet {
    pub const KIND: &'static str = "rotation";

    pub fn new<R: Rng + ?Sized>(spec: EncoderSpec, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::new(spec, rng)?;
        let head = ClassifierHead::new(encoder.embed_size(), 4, rng);
        Ok(Self { encoder, head })
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let (features, _) = self.encoder.encode(images)?;
        self.head.linear.forward(&features)
    }

    pub fn topology(&self) -> String {
        let mut map = BTreeMap::new();
        map.insert("kind".to_string(), Self::KIND.to_string());
        self.encoder.spec().write_descriptor("encoder", &mut map);
        map.insert("head.classes".into(), self.head.classes().to_string());
        format_descriptor(&map)
    }

    /// Fresh (zero-weight) network shaped as `topology` describes.
    pub fn from_topology(topology: &str) -> Result<Self> {
        let map = parse_descriptor(topology)?;
        expect_kind(&map, Self::KIND)?;
        let spec = EncoderSpec::read_descriptor("encoder", &map)?;
        let classes: usize = map
            .get("head.classes")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Topology("descriptor lacks head.classes".into()))?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let encoder = Encoder::new(spec, &mut rng)?;
        let head = ClassifierHead::new(encoder.embed_size(), classes, &mut rng);
        Ok(Self { encoder, head })
    }
}

impl Parameterized for RotationNet {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        self.encoder.visit_params_mut(&join(prefix, "encoder"), f);
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.encoder.visit_buffers(&join(prefix, "encoder"), f);
    }

    fn visit_buffers_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.encoder.visit_buffers_mut(&join(prefix, "encoder"), f);
    }
}

/// CNN encoder feeding an LSTM decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Captioner {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Captioner {
    pub const KIND: &'static str = "captioner";

    pub fn new<R: Rng + ?Sized>(
        encoder_spec: EncoderSpec,
        hidden_size: usize,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = Encoder::new(encoder_spec, rng)?;
        let decoder = Decoder::new(
            DecoderSpec {
                embed_size: encoder.embed_size(),
                hidden_size,
                vocab_size,
                num_layers: 1,
            },
            rng,
        )?;
        Ok(Self { encoder, decoder })
    }

    pub fn from_parts(encoder: Encoder, decoder: Decoder) -> Result<Self> {
        if encoder.embed_size() != decoder.spec().embed_size {
            return Err(Error::Topology(format!(
                "encoder emits {} features but decoder embeds {}",
                encoder.embed_size(),
                decoder.spec().embed_size
            )));
        }
        Ok(Self { encoder, decoder })
    }

    pub fn topology(&self) -> String {
        let mut map = BTreeMap::new();
        map.insert("kind".to_string(), Self::KIND.to_string());
        self.encoder.spec().write_descriptor("encoder", &mut map);
        self.decoder.spec().write_descriptor("decoder", &mut map);
        format_descriptor(&map)
    }

    pub fn from_topology(topology: &str) -> Result<Self> {
        let map = parse_descriptor(topology)?;
        expect_kind(&map, Self::KIND)?;
        let spec = EncoderSpec::read_descriptor("encoder", &map)?;
        let dspec = DecoderSpec::read_descriptor("decoder", &map)?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let encoder = Encoder::new(spec, &mut rng)?;
        let decoder = Decoder::new(dspec, &mut rng)?;
        Self::from_parts(encoder, decoder)
    }
}

impl Parameterized for Captioner {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.encoder.visit_params(&join(prefix, "encoder"), f);
        self.decoder.visit_params(&join(prefix, "decoder"), f);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        self.encoder.visit_params_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_params_mut(&join(prefix, "decoder"), f);
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.encoder.visit_buffers(&join(prefix, "encoder"), f);
    }

    fn visit_buffers_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.encoder.visit_buffers_mut(&join(prefix, "encoder"), f);
    }
}

/// Encoder-only view of any descriptor that contains an encoder.
pub fn encoder_from_topology(topology: &str) -> Result<Encoder> {
    let map = parse_descriptor(topology)?;
    let spec = EncoderSpec::read_descriptor("encoder", &map)?;
    Encoder::new(spec, &mut rand::rngs::mock::StepRng::new(0, 0))
}

/// Restores the encoder stored in a rotation or captioner checkpoint.
pub fn encoder_from_checkpoint(ckpt: &Checkpoint) -> Result<Encoder> {
    let mut encoder = encoder_from_topology(&ckpt.topology)?;
    ckpt.load_params(&mut encoder, "encoder.", "")?;
    Ok(encoder)
}

fn expect_kind(map: &BTreeMap<String, String>, kind: &str) -> Result<()> {
    match map.get("kind") {
        Some(k) if k == kind => Ok(()),
        Some(k) => Err(Error::Topology(format!("checkpoint holds a {k} model, expected {kind}"))),
        None => Err(Error::Topology("descriptor has no kind".into())),
    }
}
