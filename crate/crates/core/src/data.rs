//! Dataset loading, image preprocessing, and caption-length-bucketed batch
//! sampling.
//!
//! On disk a dataset is a root directory of images plus a UTF-8 manifest with
//! one `relative/path.ppm<TAB>caption text` record per line. Several lines may
//! share an image.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::{TokenSequence, Vocabulary, END, START};

/// 8-bit RGB image, row-major `H x W x 3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!("image must be non-empty, got {width}x{height}")));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Decodes PPM (P6 or P3) or PNG, chosen by content.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: String| Error::Image {
            path: path.to_path_buf(),
            message,
        };
        if bytes.starts_with(b"P6") || bytes.starts_with(b"P3") {
            return parse_ppm(bytes).map_err(bad);
        }
        let img = image::load_from_memory(bytes).map_err(|e| bad(e.to_string()))?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::new(w as usize, h as usize, rgb.into_raw()).map_err(|e| bad(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<RawImage, String> {
    let mut pos = 2;
    let mut header = [0usize; 3];
    for field in header.iter_mut() {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("malformed PPM header near byte {start}"))?;
    }
    let [width, height, maxval] = header;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported PPM maxval {maxval}"));
    }
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(3))
        .ok_or("PPM dimensions overflow")?;
    let scale = |v: usize| ((v * 255 + maxval / 2) / maxval) as u8;
    let pixels: Vec<u8> = if bytes.starts_with(b"P6") {
        // exactly one whitespace byte separates header and raster
        let body = bytes.get(pos + 1..).unwrap_or(&[]);
        if body.len() < n {
            return Err(format!("PPM raster truncated: need {n} bytes, have {}", body.len()));
        }
        body[..n].iter().map(|&v| scale(v as usize)).collect()
    } else {
        let text = std::str::from_utf8(&bytes[pos..]).map_err(|_| "non-ASCII P3 body")?;
        let vals: Vec<u8> = text
            .split_ascii_whitespace()
            .take(n)
            .map(|t| t.parse::<usize>().map(scale).map_err(|_| format!("bad P3 sample {t:?}")))
            .collect::<std::result::Result<_, _>>()?;
        if vals.len() < n {
            return Err(format!("P3 raster truncated: need {n} samples, have {}", vals.len()));
        }
        vals
    };
    RawImage::new(width, height, pixels).map_err(|e| e.to_string())
}

/// Channel-major float image `C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub normalized: bool,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>, normalized: bool) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            normalized,
        })
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Undoes channel normalization, giving values in `pixel / 255` units.
    pub fn unnormalize(&self, cfg: &PreprocessConfig) -> ImageTensor {
        let mut out = self.clone();
        if self.normalized {
            let plane = self.height * self.width;
            for (i, v) in out.data.iter_mut().enumerate() {
                let c = i / plane;
                *v = *v * cfg.channel_std[c] + cfg.channel_mean[c];
            }
            out.normalized = false;
        }
        out
    }
}

/// Stacks equally-sized images into `[B, C, H, W]`.
pub fn stack_images(images: &[ImageTensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot stack zero images".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if (img.channels, img.height, img.width) != (first.channels, first.height, first.width) {
            return Err(Error::Shape("images in a batch must share dimensions".into()));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::from_vec(&[images.len(), first.channels, first.height, first.width], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    /// Target length of the shorter side after resizing.
    pub resize_to: usize,
    pub crop_size: usize,
    pub hflip_prob: f64,
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
    pub train_mode: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            resize_to: 256,
            crop_size: 224,
            hflip_prob: 0.5,
            channel_mean: [0.485, 0.456, 0.406],
            channel_std: [0.229, 0.224, 0.225],
            train_mode: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.crop_size > self.resize_to {
            return Err(Error::Config(format!(
                "crop_size {} must be in 1..=resize_to ({})",
                self.crop_size, self.resize_to
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!("hflip_prob {} outside [0, 1]", self.hflip_prob)));
        }
        if self.channel_mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("channel_mean must be finite".into()));
        }
        if self.channel_std.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::Config("channel_std must be finite and positive".into()));
        }
        Ok(())
    }

    pub fn eval(&self) -> Self {
        Self {
            train_mode: false,
            ..self.clone()
        }
    }

    pub fn train(&self) -> Self {
        Self {
            train_mode: true,
            ..self.clone()
        }
    }
}

/// Resize (shorter side, bilinear), crop, optional horizontal flip, then
/// `(pixel / 255 - mean) / std` per channel. In eval mode the crop is
/// centred, nothing is flipped and `rng` is not consumed.
pub fn preprocess<R: Rng + ?Sized>(img: &RawImage, cfg: &PreprocessConfig, rng: &mut R) -> Result<ImageTensor> {
    cfg.validate()?;
    let (h, w) = (img.height, img.width);
    let (rh, rw) = if h <= w {
        (cfg.resize_to, ((w * cfg.resize_to) as f64 / h as f64).round().max(1.0) as usize)
    } else {
        (((h * cfg.resize_to) as f64 / w as f64).round().max(1.0) as usize, cfg.resize_to)
    };
    let (rh, rw) = (rh.max(cfg.crop_size), rw.max(cfg.crop_size));
    let crop = cfg.crop_size;
    let (oy, ox, flip) = if cfg.train_mode {
        let oy = rng.gen_range(0..=rh - crop);
        let ox = rng.gen_range(0..=rw - crop);
        let flip = rng.gen::<f64>() < cfg.hflip_prob;
        (oy, ox, flip)
    } else {
        ((rh - crop) / 2, (rw - crop) / 2, false)
    };

    let sy = h as f64 / rh as f64;
    let sx = w as f64 / rw as f64;
    let sample_axis = |dst: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, src - lo as f64)
    };

    let mut data = vec![0.0; 3 * crop * crop];
    for y in 0..crop {
        let (y0, y1, fy) = sample_axis(y + oy, sy, h);
        for x in 0..crop {
            let (x0, x1, fx) = sample_axis(x + ox, sx, w);
            let dx = if flip { crop - 1 - x } else { x };
            for c in 0..3 {
                let p = |xx: usize, yy: usize| img.pixels[(yy * w + xx) * 3 + c] as f64;
                let top = p(x0, y0) + fx * (p(x1, y0) - p(x0, y0));
                let bottom = p(x0, y1) + fx * (p(x1, y1) - p(x0, y1));
                let v = top + fy * (bottom - top);
                data[(c * crop + y) * crop + dx] = (v / 255.0 - cfg.channel_mean[c]) / cfg.channel_std[c];
            }
        }
    }
    ImageTensor::new(3, crop, crop, data, true)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionRecord {
    pub image_id: String,
    pub caption_text: String,
}

/// Captions plus their decoded images, in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<CaptionRecord>,
    pub images: Vec<RawImage>,
    /// `images[image_of_record[i]]` belongs to `records[i]`.
    pub image_of_record: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image(&self, record: usize) -> &RawImage {
        &self.images[self.image_of_record[record]]
    }

    /// Record index of the first caption of each distinct image.
    pub fn first_record_per_image(&self) -> Vec<usize> {
        let mut seen = vec![false; self.images.len()];
        let mut out = Vec::new();
        for (r, &img) in self.image_of_record.iter().enumerate() {
            if !seen[img] {
                seen[img] = true;
                out.push(r);
            }
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut remap = BTreeMap::new();
        let mut images = Vec::new();
        let mut image_of_record = Vec::new();
        let mut records = Vec::new();
        for &i in indices {
            let img = self.image_of_record[i];
            let new = *remap.entry(img).or_insert_with(|| {
                images.push(self.images[img].clone());
                images.len() - 1
            });
            image_of_record.push(new);
            records.push(self.records[i].clone());
        }
        Dataset {
            records,
            images,
            image_of_record,
        }
    }
}

/// Reads `manifest` (lines of `path<TAB>caption`) and decodes every image it
/// references under `root`.
pub fn load_dataset(root: &Path, manifest: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut records = Vec::new();
    let mut images = Vec::new();
    let mut image_of_record = Vec::new();
    let mut by_path: BTreeMap<String, usize> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: &str| Error::Parse {
            path: manifest.to_path_buf(),
            line: n + 1,
            message: message.to_string(),
        };
        let (rel, caption) = line
            .split_once('\t')
            .ok_or_else(|| malformed("expected `<image path>\\t<caption>`"))?;
        if rel.is_empty() {
            return Err(malformed("empty image path"));
        }
        if caption.trim().is_empty() {
            return Err(malformed("empty caption"));
        }
        let idx = match by_path.get(rel) {
            Some(&i) => i,
            None => {
                let path: PathBuf = root.join(rel);
                images.push(RawImage::load(&path)?);
                by_path.insert(rel.to_string(), images.len() - 1);
                images.len() - 1
            }
        };
        image_of_record.push(idx);
        records.push(CaptionRecord {
            image_id: rel.to_string(),
            caption_text: caption.trim().to_string(),
        });
    }
    Ok(Dataset {
        records,
        images,
        image_of_record,
    })
}

/// Reads a `path<TAB>class` label file and returns one class id per image
/// of `dataset`, in `dataset.images` order.
pub fn load_labels(path: &Path, dataset: &Dataset) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut by_id = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let (id, class) = line
            .split_once('\t')
            .ok_or_else(|| malformed("expected `<image path>\\t<class>`".into()))?;
        let class: usize = class
            .trim()
            .parse()
            .map_err(|_| malformed(format!("class {class:?} is not a non-negative integer")))?;
        by_id.insert(id.to_string(), class);
    }
    dataset
        .first_record_per_image()
        .into_iter()
        .map(|r| {
            let id = &dataset.records[r].image_id;
            by_id.get(id).copied().ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: format!("no label for image {id}"),
            })
        })
        .collect()
}

/// Dataset with every caption converted to tokens.
#[derive(Debug, Clone)]
pub struct TokenizedDataset {
    pub dataset: Dataset,
    pub tokens: Vec<TokenSequence>,
}

impl TokenizedDataset {
    pub fn new(dataset: Dataset, vocab: &Vocabulary) -> Self {
        let tokens = dataset
            .records
            .iter()
            .map(|r| vocab.tokenize(&r.caption_text))
            .collect();
        Self { dataset, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.len()).collect()
    }

    pub fn index_by_length(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.entry(t.len()).or_default().push(i);
        }
        out
    }
}

/// Number of captions at each tokenized length (markers included).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LengthHistogram {
    pub counts: BTreeMap<usize, usize>,
}

impl LengthHistogram {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// Draws a length with probability `counts[len] / total`.
    pub fn sample_length<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let mut ticket = rng.gen_range(0..self.total());
        for (&len, &count) in &self.counts {
            if ticket < count {
                return len;
            }
            ticket -= count;
        }
        unreachable!("ticket drawn below total")
    }
}

pub fn build_length_histogram(lengths: &[usize]) -> Result<LengthHistogram> {
    if lengths.is_empty() {
        return Err(Error::InvalidArgument("length histogram of an empty dataset".into()));
    }
    let mut counts = BTreeMap::new();
    for &l in lengths {
        *counts.entry(l).or_insert(0) += 1;
    }
    Ok(LengthHistogram { counts })
}

/// Picks a caption length proportionally to its frequency, then
/// `batch_size` record indices of that length uniformly with replacement.
pub fn sample_train_indices<R: Rng + ?Sized>(
    hist: &LengthHistogram,
    index_by_length: &BTreeMap<usize, Vec<usize>>,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    if hist.counts.is_empty() {
        return Err(Error::InvalidArgument("empty length histogram".into()));
    }
    let len = hist.sample_length(rng);
    let pool = index_by_length
        .get(&len)
        .filter(|p| !p.is_empty())
        .ok_or_else(|| Error::InvalidArgument(format!("no captions of length {len} in the index")))?;
    Ok((0..batch_size).map(|_| pool[rng.gen_range(0..pool.len())]).collect())
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, C, H, W]`
    pub images: Tensor,
    /// `B` rows of exactly `length` tokens.
    pub captions: Vec<Vec<usize>>,
    pub length: usize,
}

pub fn make_batch<R: Rng + ?Sized>(
    indices: &[usize],
    data: &TokenizedDataset,
    cfg: &PreprocessConfig,
    rng: &mut R,
) -> Result<Batch> {
    let first = *indices
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let length = data.tokens[first].len();
    let mut images = Vec::with_capacity(indices.len());
    let mut captions = Vec::with_capacity(indices.len());
    for &i in indices {
        let tokens = data.tokens[i].tokens();
        if tokens.len() != length {
            return Err(Error::InvalidArgument(format!(
                "mixed caption lengths in batch: {length} and {}",
                tokens.len()
            )));
        }
        if tokens.first() != Some(&START) || tokens.last() != Some(&END) {
            return Err(Error::InvalidArgument(format!("caption {i} is not wrapped in start/end markers")));
        }
        images.push(preprocess(data.dataset.image(i), cfg, rng)?);
        captions.push(tokens.to_vec());
    }
    Ok(Batch {
        images: stack_images(&images)?,
        captions,
        length,
    })
}
