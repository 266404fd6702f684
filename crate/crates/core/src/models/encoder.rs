//! Residual convolutional encoder: stem convolution, residual stages, global
//! average pooling, then a linear projection to the embedding width.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, join, relu, relu_backward, BatchNorm1d, BatchNormCache, Conv2d,
    Conv2dCache, Linear, MaxPool2d, MaxPoolCache, Param, Parameterized,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// 2x2 max pooling after the block.
    pub pool: bool,
}

impl fmt::Display for StageSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pool = if self.pool { "max" } else { "none" };
        write!(f, "{}:{}:{}:{}", self.out_channels, self.kernel, self.stride, pool)
    }
}

impl FromStr for StageSpec {
    type Err = Error;

    /// `out:kernel:stride:max|none`
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("stage {s:?} is not out:kernel:stride:max|none"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        if parts.len() != 4 {
            return Err(bad());
        }
        let num = |p: &str| p.parse::<usize>().ok().filter(|v| *v > 0).ok_or_else(bad);
        let kernel = num(parts[1])?;
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("stage {s:?}: kernel must be odd")));
        }
        Ok(Self {
            out_channels: num(parts[0])?,
            kernel,
            stride: num(parts[2])?,
            pool: match parts[3] {
                "max" => true,
                "none" => false,
                _ => return Err(bad()),
            },
        })
    }
}

/// Normalization applied to the projected feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureNorm {
    None,
    /// Batch statistics in training, running estimates in evaluation.
    Batch,
    /// Running estimates in both, updated from every training batch.
    Running,
}

impl fmt::Display for FeatureNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureNorm::None => "none",
            FeatureNorm::Batch => "batch",
            FeatureNorm::Running => "running",
        })
    }
}

impl FromStr for FeatureNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FeatureNorm::None),
            "batch" => Ok(FeatureNorm::Batch),
            "running" => Ok(FeatureNorm::Running),
            other => Err(Error::Config(format!("feature norm {other:?} is not running|batch|none"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    pub embed_size: usize,
    pub skip_connections: bool,
    pub feature_norm: FeatureNorm,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 16,
            stages: [16, 32, 64, 128]
                .iter()
                .map(|&c| StageSpec {
                    out_channels: c,
                    kernel: 3,
                    stride: 1,
                    pool: true,
                })
                .collect(),
            embed_size: 512,
            skip_connections: true,
            feature_norm: FeatureNorm::Running,
        }
    }
}

impl EncoderSpec {
    pub fn stages_string(&self) -> String {
        self.stages.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
    }

    pub fn parse_stages(text: &str) -> Result<Vec<StageSpec>> {
        let stages = text
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        if stages.is_empty() {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        Ok(stages)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stem_channels == 0 || self.embed_size == 0 || self.stages.is_empty() {
            return Err(Error::Config("encoder widths and stage list must be non-empty".into()));
        }
        Ok(())
    }

    pub(crate) fn write_descriptor(&self, prefix: &str, out: &mut BTreeMap<String, String>) {
        out.insert(join(prefix, "in"), self.in_channels.to_string());
        out.insert(join(prefix, "stem"), self.stem_channels.to_string());
        out.insert(join(prefix, "stages"), self.stages_string());
        out.insert(join(prefix, "embed"), self.embed_size.to_string());
        out.insert(join(prefix, "skip"), self.skip_connections.to_string());
        out.insert(join(prefix, "norm"), self.feature_norm.to_string());
    }

    pub(crate) fn read_descriptor(prefix: &str, map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            map.get(&join(prefix, k))
                .ok_or_else(|| Error::Topology(format!("descriptor lacks {}", join(prefix, k))))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Topology(format!("bad {} in descriptor", join(prefix, k))))
        };
        Ok(Self {
            in_channels: num("in")?,
            stem_channels: num("stem")?,
            stages: Self::parse_stages(get("stages")?).map_err(|e| Error::Topology(e.to_string()))?,
            embed_size: num("embed")?,
            skip_connections: get("skip")? == "true",
            feature_norm: get("norm")?.parse().map_err(|e: Error| Error::Topology(e.to_string()))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    /// 1x1 projection when the block changes width or stride.
    pub shortcut: Option<Conv2d>,
    pub pool: Option<MaxPool2d>,
    pub skip: bool,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    c1: Conv2dCache,
    h1: Tensor,
    c2: Conv2dCache,
    shortcut: Option<Conv2dCache>,
    out: Tensor,
    pool: Option<MaxPoolCache>,
}

impl ResidualBlock {
    fn new<R: Rng + ?Sized>(in_channels: usize, spec: &StageSpec, skip: bool, rng: &mut R) -> Self {
        let conv1 = Conv2d::new(in_channels, spec.out_channels, spec.kernel, spec.stride, rng);
        let conv2 = Conv2d::new(spec.out_channels, spec.out_channels, spec.kernel, 1, rng);
        let shortcut = (skip && (in_channels != spec.out_channels || spec.stride != 1))
            .then(|| Conv2d::new(in_channels, spec.out_channels, 1, spec.stride, rng));
        Self {
            conv1,
            conv2,
            shortcut,
            pool: spec.pool.then(|| MaxPool2d::new(2)),
            skip,
        }
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, BlockCache)> {
        let (a1, c1) = self.conv1.forward(x)?;
        let h1 = relu(&a1);
        let (mut sum, c2) = self.conv2.forward(&h1)?;
        let mut sc_cache = None;
        if self.skip {
            match &self.shortcut {
                Some(conv) => {
                    let (s, c) = conv.forward(x)?;
                    sum.add_assign(&s);
                    sc_cache = Some(c);
                }
                None => sum.add_assign(x),
            }
        }
        let out = relu(&sum);
        let (y, pool_cache) = match &self.pool {
            Some(p) => {
                let (y, c) = p.forward(&out)?;
                (y, Some(c))
            }
            None => (out.clone(), None),
        };
        Ok((
            y,
            BlockCache {
                c1,
                h1,
                c2,
                shortcut: sc_cache,
                out,
                pool: pool_cache,
            },
        ))
    }

    fn backward(&mut self, cache: &BlockCache, dy: &Tensor) -> Tensor {
        let dout = match (&self.pool, &cache.pool) {
            (Some(p), Some(c)) => p.backward(c, dy),
            _ => dy.clone(),
        };
        let dsum = relu_backward(&cache.out, &dout);
        let dh1 = self.conv2.backward(&cache.c2, &dsum);
        let da1 = relu_backward(&cache.h1, &dh1);
        let mut dx = self.conv1.backward(&cache.c1, &da1);
        if self.skip {
            match (&mut self.shortcut, &cache.shortcut) {
                (Some(conv), Some(c)) => dx.add_assign(&conv.backward(c, &dsum)),
                _ => dx.add_assign(&dsum),
            }
        }
        dx
    }
}

impl Parameterized for ResidualBlock {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        if let Some(s) = &self.shortcut {
            s.visit_params(&join(prefix, "shortcut"), f);
        }
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        self.conv1.visit_params_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_params_mut(&join(prefix, "conv2"), f);
        if let Some(s) = &mut self.shortcut {
            s.visit_params_mut(&join(prefix, "shortcut"), f);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    spec: EncoderSpec,
    pub stem: Conv2d,
    pub blocks: Vec<ResidualBlock>,
    pub projection: Linear,
    pub norm: Option<BatchNorm1d>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    stem: Conv2dCache,
    stem_out: Tensor,
    blocks: Vec<BlockCache>,
    trunk_shape: Vec<usize>,
    pooled: Tensor,
    norm: Option<BatchNormCache>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(spec: EncoderSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let stem = Conv2d::new(spec.in_channels, spec.stem_channels, 3, 1, rng);
        let mut width = spec.stem_channels;
        let mut blocks = Vec::with_capacity(spec.stages.len());
        for stage in &spec.stages {
            blocks.push(ResidualBlock::new(width, stage, spec.skip_connections, rng));
            width = stage.out_channels;
        }
        let projection = Linear::new(width, spec.embed_size, rng);
        let norm = (spec.feature_norm != FeatureNorm::None).then(|| BatchNorm1d::new(spec.embed_size));
        Ok(Self {
            spec,
            stem,
            blocks,
            projection,
            norm,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn embed_size(&self) -> usize {
        self.spec.embed_size
    }

    /// `[B, C, S, S]` images to `[B, E]` feature vectors, normalizing with
    /// the running statistics.
    pub fn encode(&self, images: &Tensor) -> Result<(Tensor, EncoderCache)> {
        let (projected, mut cache) = self.trunk(images)?;
        match &self.norm {
            Some(bn) => {
                let (y, c) = bn.forward_eval(&projected)?;
                cache.norm = Some(c);
                Ok((y, cache))
            }
            None => Ok((projected, cache)),
        }
    }

    /// Training-mode forward pass: updates the running feature statistics
    /// and, for [`FeatureNorm::Batch`], normalizes with the batch's own.
    pub fn encode_train(&mut self, images: &Tensor) -> Result<(Tensor, EncoderCache)> {
        let (projected, mut cache) = self.trunk(images)?;
        match &mut self.norm {
            Some(bn) => {
                let (y, c) = match self.spec.feature_norm {
                    FeatureNorm::Batch => bn.forward_train(&projected)?,
                    _ => bn.forward_running(&projected)?,
                };
                cache.norm = Some(c);
                Ok((y, cache))
            }
            None => Ok((projected, cache)),
        }
    }

    fn trunk(&self, images: &Tensor) -> Result<(Tensor, EncoderCache)> {
        if images.rank() != 4 || images.dim(2) != images.dim(3) {
            return Err(Error::Shape(format!("encoder expects square [B, C, S, S] images, got {:?}", images.shape())));
        }
        let (a, stem) = self.stem.forward(images)?;
        let stem_out = relu(&a);
        let mut x = stem_out.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(&x)?;
            blocks.push(c);
            x = y;
        }
        let pooled = global_avg_pool(&x)?;
        let features = self.projection.forward(&pooled)?;
        Ok((
            features,
            EncoderCache {
                stem,
                stem_out,
                blocks,
                trunk_shape: x.shape().to_vec(),
                pooled,
                norm: None,
            },
        ))
    }

    /// Accumulates parameter gradients for `d_features` and returns the
    /// gradient with respect to the input images.
    pub fn backward(&mut self, cache: &EncoderCache, d_features: &Tensor) -> Tensor {
        let d_projected = match (&mut self.norm, &cache.norm) {
            (Some(bn), Some(c)) => bn.backward(c, d_features),
            _ => d_features.clone(),
        };
        let dpooled = self.projection.backward(&cache.pooled, &d_projected);
        let mut dx = global_avg_pool_backward(&cache.trunk_shape, &dpooled);
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dx = block.backward(c, &dx);
        }
        let da = relu_backward(&cache.stem_out, &dx);
        self.stem.backward(&cache.stem, &da)
    }
}

impl Parameterized for Encoder {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.stem.visit_params(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("block{i}")), f);
        }
        self.projection.visit_params(&join(prefix, "projection"), f);
        if let Some(bn) = &self.norm {
            bn.visit_params(&join(prefix, "norm"), f);
        }
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Param)) {
        self.stem.visit_params_mut(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.projection.visit_params_mut(&join(prefix, "projection"), f);
        if let Some(bn) = &mut self.norm {
            bn.visit_params_mut(&join(prefix, "norm"), f);
        }
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        if let Some(bn) = &self.norm {
            bn.visit_buffers(&join(prefix, "norm"), f);
        }
    }

    fn visit_buffers_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        if let Some(bn) = &mut self.norm {
            bn.visit_buffers_mut(&join(prefix, "norm"), f);
        }
    }
}
