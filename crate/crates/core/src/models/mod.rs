//! Encoder, decoder, classification heads and the linear probe.

mod decoder;
mod encoder;
mod heads;
pub mod probe;

pub use decoder::{argmax, generate, Decoder, DecoderCache, DecoderSpec, StepDecoder};
pub use encoder::{Encoder, EncoderCache, EncoderSpec, FeatureNorm, StageSpec};
pub use heads::{encoder_from_checkpoint, encoder_from_topology, Captioner, ClassifierHead, RotationNet};

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// `key=value;key=value` topology descriptors stored in checkpoints.
pub(crate) fn parse_descriptor(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for part in text.split(';').filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::Topology(format!("malformed descriptor entry {part:?}")))?;
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

pub(crate) fn format_descriptor(map: &BTreeMap<String, String>) -> String {
    map.iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}
