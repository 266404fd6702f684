//! Seeded generator of small captioned shape images.
//!
//! Every shape is drawn upright and is left-right symmetric, so its
//! orientation is recognisable and a horizontal flip keeps both the caption
//! and the class label valid.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::RawImage;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Shape {
    Arrow,
    Triangle,
    Tee,
    Cup,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Arrow, Shape::Triangle, Shape::Tee, Shape::Cup];

    pub fn class(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Arrow => "arrow",
            Shape::Triangle => "triangle",
            Shape::Tee => "tee",
            Shape::Cup => "cup",
        }
    }

    /// Membership test in a unit box: `u` in [-0.5, 0.5] left to right,
    /// `v` in [-0.5, 0.5] top to bottom.
    fn contains(self, u: f64, v: f64) -> bool {
        if !(-0.5..=0.5).contains(&u) || !(-0.5..=0.5).contains(&v) {
            return false;
        }
        // Triangle with apex (0, top) and base at v = bottom spanning full width.
        let under_apex = |top: f64, bottom: f64| v >= top && v <= bottom && u.abs() <= 0.5 * (v - top) / (bottom - top);
        match self {
            Shape::Triangle => under_apex(-0.5, 0.5),
            Shape::Arrow => under_apex(-0.5, 0.0) || (v >= 0.0 && u.abs() <= 0.17),
            Shape::Tee => v <= -0.2 || u.abs() <= 0.15,
            Shape::Cup => v >= 0.2 || u.abs() >= 0.3,
        }
    }
}

const COLORS: [(&str, [u8; 3]); 4] = [
    ("red", [220, 40, 40]),
    ("green", [40, 200, 60]),
    ("blue", [50, 80, 230]),
    ("yellow", [230, 210, 40]),
];

const SIZES: [(Option<&str>, f64); 3] = [(Some("small"), 0.32), (None, 0.44), (Some("large"), 0.58)];

const PLACES: [(&str, f64); 3] = [("at the top", 0.28), ("in the middle", 0.5), ("at the bottom", 0.72)];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub image: RawImage,
    pub caption: String,
    pub shape: Shape,
}

/// `count` square images of side `size`, reproducible from `seed`.
pub fn generate_samples(count: usize, size: usize, seed: u64) -> Result<Vec<SyntheticImage>> {
    if count == 0 {
        return Err(Error::InvalidArgument("synthetic dataset needs at least one image".into()));
    }
    if size < 8 {
        return Err(Error::InvalidArgument(format!("image side {size} is below the minimum of 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| draw_one(size, &mut rng)).collect()
}

fn draw_one<R: Rng>(size: usize, rng: &mut R) -> Result<SyntheticImage> {
    let shape = Shape::ALL[rng.gen_range(0..4)];
    let (color_name, color) = COLORS[rng.gen_range(0..COLORS.len())];
    let (size_word, frac) = SIZES[rng.gen_range(0..SIZES.len())];
    let (place, row) = PLACES[rng.gen_range(0..PLACES.len())];

    let s = size as f64;
    let h = frac * s;
    let jitter = 0.04 * s;
    let cy = (row * s + rng.gen_range(-jitter..=jitter)).clamp(h / 2.0, s - h / 2.0);
    let cx = rng.gen_range(h / 2.0..=s - h / 2.0);

    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5 - cx) / h;
            let v = (y as f64 + 0.5 - cy) / h;
            let inside = shape.contains(u, v);
            for &c in &color {
                let value = if inside {
                    i32::from(c) + rng.gen_range(-20..=20)
                } else {
                    20 + rng.gen_range(0..=30)
                };
                pixels.push(value.clamp(0, 255) as u8);
            }
        }
    }
    let mut caption = String::from("a ");
    if let Some(w) = size_word {
        let _ = write!(caption, "{w} ");
    }
    let _ = write!(caption, "{color_name} {} {place}", shape.name());
    Ok(SyntheticImage {
        image: RawImage::new(size, size, pixels)?,
        caption,
        shape,
    })
}

/// Relative path of image `i` inside a generated dataset.
pub fn image_path(i: usize) -> String {
    format!("images/{i:04}.ppm")
}

/// Writes `images/NNNN.ppm`, `manifest.txt` and `labels.txt` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[SyntheticImage]) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut manifest = String::new();
    let mut labels = String::new();
    for (i, s) in samples.iter().enumerate() {
        let rel = image_path(i);
        let path = dir.join(&rel);
        std::fs::write(&path, s.image.to_ppm()).map_err(|e| Error::io(&path, e))?;
        let _ = writeln!(manifest, "{rel}\t{}", s.caption);
        let _ = writeln!(labels, "{rel}\t{}", s.shape.class());
    }
    for (name, body) in [("manifest.txt", manifest), ("labels.txt", labels)] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
