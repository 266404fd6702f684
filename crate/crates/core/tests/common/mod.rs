#![allow(dead_code)]

pub mod gradcheck;

use std::path::Path;
use std::process::Output;

use rotcap::config::RunConfig;
use rotcap::data::{CaptionRecord, Dataset};
use rotcap::synthetic::SyntheticImage;

/// Small encoder used for every desk-scale run.
pub const DESK_ENCODER: &str = "\
stem_channels = 8
encoder_stages = 8:3:1:max,16:3:1:max,32:3:1:max
embed_size = 32
";

/// Rotation pretraining on 32x32 synthetic images.
pub fn desk_pretext_text(epochs: usize) -> String {
    format!(
        "{DESK_ENCODER}resize_to = 32\ncrop_size = 28\nbatch_size = 32\nlearning_rate = 0.003\nepochs = {epochs}\n"
    )
}

/// Caption memorization: no augmentation and a frozen encoder.
pub fn desk_caption_text(epochs: usize) -> String {
    format!(
        "{DESK_ENCODER}resize_to = 32\ncrop_size = 32\nhflip_prob = 0\nhidden_size = 64\nbatch_size = 5\n\
         learning_rate = 0.003\nepochs = {epochs}\nfreeze_encoder_epochs = {epochs}\nvocab_threshold = 1\n"
    )
}

pub fn desk_pretext_config(epochs: usize) -> RunConfig {
    RunConfig::pretext()
        .apply(&desk_pretext_text(epochs), Path::new("desk"))
        .expect("desk pretext config is valid")
}

/// One record per sample, image ids `0..n`.
pub fn dataset_of(samples: &[SyntheticImage]) -> Dataset {
    Dataset {
        records: samples
            .iter()
            .enumerate()
            .map(|(i, s)| CaptionRecord {
                image_id: i.to_string(),
                caption_text: s.caption.clone(),
            })
            .collect(),
        images: samples.iter().map(|s| s.image.clone()).collect(),
        image_of_record: (0..samples.len()).collect(),
    }
}

/// Runs the `rotcap` binary.
pub fn rotcap<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    std::process::Command::new(env!("CARGO_BIN_EXE_rotcap"))
        .args(args)
        .output()
        .expect("rotcap binary runs")
}

/// Runs `rotcap` and fails with its stderr unless it exits 0.
pub fn rotcap_ok<I, S>(args: I) -> String
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    let out = rotcap(args);
    assert!(
        out.status.success(),
        "rotcap failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

/// Value of `key=value` in command output.
pub fn field(stdout: &str, key: &str) -> Option<String> {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key)?.strip_prefix('=').map(str::to_string))
}
