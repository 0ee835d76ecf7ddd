//! The x-vector / lrx-vector network.
//!
//! Five bias-free TDNN layers with ReLU, statistics pooling (mean and
//! population standard deviation), a linear Segment layer whose output is the
//! speaker embedding, and a class-weight matrix used only by the training
//! head. Layers 2-5 may hold a low-rank factor pair `W_a·W_b` in place of the
//! full matrix; layer 1, Segment and Output are always full rank.
//!
//! All weight matrices are stored input-major, so a layer maps a row of
//! stacked context frames `x` (length `c·n`) to `x·W` (length `m`).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::features::{FeatureSequence, NUM_MELS};
use crate::linalg::{matmul, Matrix};
use crate::rng::Rng;

pub const NUM_TDNN: usize = 5;
pub const STD_FLOOR: f64 = 1e-10;
pub const DEFAULT_EMBED_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub context: Vec<i32>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub rank: Option<usize>,
}

impl LayerSpec {
    pub fn full(context: &[i32], in_dim: usize, out_dim: usize) -> Self {
        LayerSpec { context: context.to_vec(), in_dim, out_dim, rank: None }
    }

    /// Number of stacked context frames, `c`.
    pub fn num_context(&self) -> usize {
        self.context.len()
    }

    pub fn stacked_dim(&self) -> usize {
        self.num_context() * self.in_dim
    }

    /// Frames consumed beyond the output length: `max offset - min offset`.
    pub fn span(&self) -> usize {
        (self.context[self.context.len() - 1] - self.context[0]) as usize
    }

    pub fn num_params(&self) -> usize {
        match self.rank {
            None => self.stacked_dim() * self.out_dim,
            Some(k) => self.stacked_dim() * k + k * self.out_dim,
        }
    }

    /// Largest admissible rank: the rank of the full `(c·n)×m` matrix.
    pub fn max_rank(&self) -> usize {
        self.stacked_dim().min(self.out_dim)
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.context.is_empty() {
            bail!(Config, "{name}: empty context");
        }
        if self.context.windows(2).any(|w| w[0] >= w[1]) {
            bail!(Config, "{name}: context offsets {:?} must be strictly increasing", self.context);
        }
        if self.in_dim == 0 || self.out_dim == 0 {
            bail!(Config, "{name}: dimensions must be positive");
        }
        if let Some(k) = self.rank {
            if k < 1 || k > self.max_rank() {
                bail!(Config, "{name}: rank {k} outside [1, {}]", self.max_rank());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub tdnn: Vec<LayerSpec>,
    pub embed_dim: usize,
    pub num_speakers: usize,
    /// Cumulative hidden-width scaling applied to the base topology.
    pub width_factor: f64,
}

/// Default low-rank ratios `k/n` for layers 2-5.
pub const DEFAULT_RANK_RATIOS: [f64; 4] = [0.5, 0.5, 0.75, 0.75];

impl ModelConfig {
    /// Baseline x-vector topology.
    pub fn xvector(num_speakers: usize) -> Self {
        let h = 512;
        ModelConfig {
            input_dim: NUM_MELS,
            tdnn: vec![
                LayerSpec::full(&[-2, -1, 0, 1, 2], NUM_MELS, h),
                LayerSpec::full(&[-2, 0, 2], h, h),
                LayerSpec::full(&[-2, 0, 2], h, h),
                LayerSpec::full(&[0], h, h),
                LayerSpec::full(&[0], h, h),
            ],
            embed_dim: DEFAULT_EMBED_DIM,
            num_speakers,
            width_factor: 1.0,
        }
    }

    /// Baseline topology with layers 2-5 factorized at the default ratios.
    pub fn lrx_vector(num_speakers: usize) -> Self {
        Self::xvector(num_speakers).with_rank_ratios(&DEFAULT_RANK_RATIOS)
    }

    /// Sets `rank = round(ratio · in_dim)` for layers 2-5.
    pub fn with_rank_ratios(mut self, ratios: &[f64; 4]) -> Self {
        for (layer, r) in self.tdnn[1..].iter_mut().zip(ratios) {
            layer.rank = Some(((layer.in_dim as f64 * r).round() as usize).max(1));
        }
        self
    }

    pub fn full_rank(&self) -> Self {
        let mut c = self.clone();
        c.tdnn.iter_mut().for_each(|l| l.rank = None);
        c
    }

    pub fn pooled_dim(&self) -> usize {
        2 * self.tdnn[NUM_TDNN - 1].out_dim
    }

    pub fn total_span(&self) -> usize {
        self.tdnn.iter().map(LayerSpec::span).sum()
    }

    /// Shortest utterance (in frames) that survives every context and still
    /// leaves the two frames pooling needs.
    pub fn min_frames(&self) -> usize {
        self.total_span() + 2
    }

    pub fn is_low_rank(&self) -> bool {
        self.tdnn.iter().any(|l| l.rank.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        if self.tdnn.len() != NUM_TDNN {
            bail!(Config, "expected {NUM_TDNN} TDNN layers, got {}", self.tdnn.len());
        }
        if self.tdnn[0].rank.is_some() {
            bail!(Config, "tdnn1 must be full rank");
        }
        let mut prev = self.input_dim;
        for (i, l) in self.tdnn.iter().enumerate() {
            let name = layer_name(i);
            l.validate(&name)?;
            if l.in_dim != prev {
                bail!(Config, "{name}: in_dim {} does not match previous output {prev}", l.in_dim);
            }
            prev = l.out_dim;
        }
        if self.embed_dim == 0 {
            bail!(Config, "embed_dim must be positive");
        }
        if self.num_speakers == 0 {
            bail!(Config, "num_speakers must be positive");
        }
        if !(self.width_factor > 0.0 && self.width_factor <= 1.0) {
            bail!(Config, "width_factor {} outside (0, 1]", self.width_factor);
        }
        Ok(())
    }

    /// Flat `key = value` text; parsing it back yields an identical config.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "input_dim = {}", self.input_dim).unwrap();
        for (i, l) in self.tdnn.iter().enumerate() {
            let ctx: Vec<String> = l.context.iter().map(i32::to_string).collect();
            writeln!(s, "layer{}.context = {}", i + 1, ctx.join(",")).unwrap();
            writeln!(s, "layer{}.out_dim = {}", i + 1, l.out_dim).unwrap();
            match l.rank {
                Some(k) => writeln!(s, "layer{}.rank = {k}", i + 1).unwrap(),
                None => writeln!(s, "layer{}.rank = none", i + 1).unwrap(),
            }
        }
        writeln!(s, "embed_dim = {}", self.embed_dim).unwrap();
        writeln!(s, "num_speakers = {}", self.num_speakers).unwrap();
        writeln!(s, "width_factor = {}", self.width_factor).unwrap();
        s
    }

    /// Parses the flat config format.
    ///
    /// Recognized keys: `preset` (`xvector` | `lrx-vector`), `scale`,
    /// `input_dim`, `embed_dim`, `num_speakers`, `width_factor`, and
    /// `layer{1..5}.{context,out_dim,rank}`. A rank is `none`, an absolute
    /// integer, or a ratio of the layer's input dim (a value containing a
    /// `.`). `scale` applies [`scale_config`] after all overrides. A missing
    /// `num_speakers` falls back to `default_speakers`.
    pub fn parse(text: &str, default_speakers: Option<usize>) -> Result<Self> {
        enum Rank {
            None,
            Abs(usize),
            Ratio(f64),
        }
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!(Config, "config line {}: expected key = value", lineno + 1);
            };
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        let preset = entries.iter().find(|(k, _)| k == "preset").map(|(_, v)| v.as_str()).unwrap_or("xvector");
        let mut cfg = match preset {
            "xvector" => ModelConfig::xvector(0),
            "lrx-vector" => ModelConfig::lrx_vector(0),
            other => bail!(Config, "unknown preset {other:?} (expected xvector or lrx-vector)"),
        };
        let mut ranks: Vec<Option<Rank>> = (0..NUM_TDNN).map(|_| None).collect();
        let mut scale = 1.0;
        let mut speakers = None;
        let mut unknown = Vec::new();
        let num = |k: &str, v: &str| -> Result<usize> {
            v.parse().map_err(|_| Error::Config(format!("{k}: expected a positive integer, got {v:?}")))
        };
        let real = |k: &str, v: &str| -> Result<f64> {
            v.parse().map_err(|_| Error::Config(format!("{k}: expected a number, got {v:?}")))
        };
        for (k, v) in &entries {
            match k.as_str() {
                "preset" => {}
                "scale" => scale = real(k, v)?,
                "input_dim" => cfg.input_dim = num(k, v)?,
                "embed_dim" => cfg.embed_dim = num(k, v)?,
                "num_speakers" => speakers = Some(num(k, v)?),
                "width_factor" => cfg.width_factor = real(k, v)?,
                key => {
                    let layer = key
                        .strip_prefix("layer")
                        .and_then(|r| r.split_once('.'))
                        .and_then(|(i, f)| i.parse::<usize>().ok().filter(|i| (1..=NUM_TDNN).contains(i)).map(|i| (i - 1, f)));
                    match layer {
                        Some((i, "context")) => {
                            cfg.tdnn[i].context = v
                                .split(',')
                                .map(|x| x.trim().parse::<i32>())
                                .collect::<std::result::Result<_, _>>()
                                .map_err(|_| Error::Config(format!("{k}: expected comma-separated offsets")))?;
                        }
                        Some((i, "out_dim")) => cfg.tdnn[i].out_dim = num(k, v)?,
                        Some((i, "rank")) => {
                            ranks[i] = Some(if v == "none" {
                                Rank::None
                            } else if v.contains('.') {
                                Rank::Ratio(real(k, v)?)
                            } else {
                                Rank::Abs(num(k, v)?)
                            })
                        }
                        _ => unknown.push(k.clone()),
                    }
                }
            }
        }
        if !unknown.is_empty() {
            bail!(Config, "unknown config keys: {}", unknown.join(", "));
        }
        cfg.num_speakers = match speakers.or(default_speakers) {
            Some(n) => n,
            None => bail!(Config, "num_speakers not set"),
        };
        // chain input dims, then resolve ranks against them
        let mut prev = cfg.input_dim;
        for l in cfg.tdnn.iter_mut() {
            l.in_dim = prev;
            prev = l.out_dim;
        }
        let mut ratio_of = vec![None; NUM_TDNN];
        for (i, r) in ranks.into_iter().enumerate() {
            match r {
                Some(Rank::None) => cfg.tdnn[i].rank = None,
                Some(Rank::Abs(k)) => cfg.tdnn[i].rank = Some(k),
                Some(Rank::Ratio(x)) => {
                    if !(x > 0.0) {
                        bail!(Config, "layer{}.rank ratio must be positive", i + 1);
                    }
                    ratio_of[i] = Some(x);
                }
                None => {
                    if let Some(k) = cfg.tdnn[i].rank {
                        ratio_of[i] = Some(k as f64 / 512.0);
                    }
                }
            }
        }
        for (i, r) in ratio_of.into_iter().enumerate() {
            if let Some(x) = r {
                let l = &mut cfg.tdnn[i];
                l.rank = Some(((l.in_dim as f64 * x).round() as usize).max(1));
            }
        }
        if scale != 1.0 {
            cfg = scale_config(&cfg, scale)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn layer_name(i: usize) -> String {
    format!("tdnn{}", i + 1)
}

/// Scales the output dims of the five TDNN layers by `factor`, rounding to
/// the nearest multiple of 8. Input dims follow, ranks keep their ratio to
/// the layer input, and the embedding size is untouched.
pub fn scale_config(config: &ModelConfig, factor: f64) -> Result<ModelConfig> {
    if !(factor > 0.0 && factor <= 1.0) {
        bail!(Config, "scale factor {factor} outside (0, 1]");
    }
    let mut out = config.clone();
    let mut prev = config.input_dim;
    for (i, (new, old)) in out.tdnn.iter_mut().zip(&config.tdnn).enumerate() {
        let dim = ((old.out_dim as f64 * factor / 8.0).round() as usize) * 8;
        if dim < 8 {
            bail!(Config, "{}: scaled dimension {} below 8", layer_name(i), old.out_dim as f64 * factor);
        }
        new.out_dim = dim;
        new.in_dim = prev;
        if let Some(k) = old.rank {
            new.rank = Some(((k as f64 * new.in_dim as f64 / old.in_dim as f64).round() as usize).max(1));
        }
        prev = dim;
    }
    out.width_factor = config.width_factor * factor;
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub layers: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamCount {
    pub fn get(&self, name: &str) -> Option<usize> {
        self.layers.iter().find(|(n, _)| n == name).map(|&(_, c)| c)
    }

    pub fn without_output(&self) -> usize {
        self.total - self.get("output").unwrap_or(0)
    }
}

/// Per-layer weight counts from the actual matrix shapes: `c·n·m` for a full
/// TDNN layer and `c·n·k + k·m` for a factor pair.
pub fn count_params(config: &ModelConfig) -> ParamCount {
    let mut layers: Vec<(String, usize)> =
        config.tdnn.iter().enumerate().map(|(i, l)| (layer_name(i), l.num_params())).collect();
    layers.push(("segment".into(), config.pooled_dim() * config.embed_dim));
    layers.push(("output".into(), config.embed_dim * config.num_speakers));
    let total = layers.iter().map(|(_, c)| c).sum();
    ParamCount { layers, total }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Full(Matrix),
    LowRank { a: Matrix, b: Matrix },
}

impl LayerWeights {
    /// The effective `(c·n)×m` matrix.
    pub fn effective(&self) -> Matrix {
        match self {
            LayerWeights::Full(w) => w.clone(),
            LayerWeights::LowRank { a, b } => matmul(a, b).expect("factor pair is conformant"),
        }
    }

    pub fn matrices(&self) -> Vec<&Matrix> {
        match self {
            LayerWeights::Full(w) => vec![w],
            LayerWeights::LowRank { a, b } => vec![a, b],
        }
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            LayerWeights::Full(w) => vec![w],
            LayerWeights::LowRank { a, b } => vec![a, b],
        }
    }
}

/// Every trainable matrix of one model; also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub tdnn: Vec<LayerWeights>,
    /// pooled_dim × embed_dim
    pub segment: Matrix,
    /// embed_dim × num_speakers, one class vector per column
    pub output: Matrix,
}

/// `(name, rows, cols)` of every matrix in declaration order.
pub fn matrix_shapes(config: &ModelConfig) -> Vec<(String, usize, usize)> {
    let mut v = Vec::new();
    for (i, l) in config.tdnn.iter().enumerate() {
        let name = layer_name(i);
        match l.rank {
            None => v.push((name, l.stacked_dim(), l.out_dim)),
            Some(k) => {
                v.push((format!("{name}.a"), l.stacked_dim(), k));
                v.push((format!("{name}.b"), k, l.out_dim));
            }
        }
    }
    v.push(("segment".into(), config.pooled_dim(), config.embed_dim));
    v.push(("output".into(), config.embed_dim, config.num_speakers));
    v
}

impl WeightSet {
    fn from_fn(config: &ModelConfig, mut make: impl FnMut(usize, usize) -> Matrix) -> Self {
        let tdnn = config
            .tdnn
            .iter()
            .map(|l| match l.rank {
                None => LayerWeights::Full(make(l.stacked_dim(), l.out_dim)),
                Some(k) => LayerWeights::LowRank { a: make(l.stacked_dim(), k), b: make(k, l.out_dim) },
            })
            .collect();
        let segment = make(config.pooled_dim(), config.embed_dim);
        let output = make(config.embed_dim, config.num_speakers);
        WeightSet { tdnn, segment, output }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        Self::from_fn(config, Matrix::zeros)
    }

    /// Uniform `±1/√fan_in` per matrix, the usual default for bias-free
    /// linear layers.
    pub fn init_random(config: &ModelConfig, rng: &mut Rng) -> Self {
        Self::from_fn(config, |rows, cols| Matrix::uniform(rows, cols, 1.0 / (rows as f64).sqrt(), rng))
    }

    pub fn matrices(&self) -> Vec<&Matrix> {
        let mut v: Vec<&Matrix> = self.tdnn.iter().flat_map(LayerWeights::matrices).collect();
        v.push(&self.segment);
        v.push(&self.output);
        v
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v: Vec<&mut Matrix> = self.tdnn.iter_mut().flat_map(LayerWeights::matrices_mut).collect();
        v.push(&mut self.segment);
        v.push(&mut self.output);
        v
    }

    pub fn num_params(&self) -> usize {
        self.matrices().iter().map(|m| m.rows() * m.cols()).sum()
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let want = matrix_shapes(config);
        let have = self.matrices();
        if want.len() != have.len() {
            bail!(Shape, "weight set has {} matrices, config requires {}", have.len(), want.len());
        }
        for ((name, r, c), m) in want.iter().zip(have) {
            if m.shape() != (*r, *c) {
                bail!(Shape, "{name}: weight shape {:?} does not match config {r}x{c}", m.shape());
            }
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.matrices().iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }

    /// Inverse of [`WeightSet::flatten`]; `flat` must have `num_params` entries.
    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "assign_flat length mismatch");
        let mut off = 0;
        for m in self.matrices_mut() {
            let n = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn dot(&self, other: &WeightSet) -> f64 {
        self.matrices()
            .iter()
            .zip(other.matrices())
            .map(|(a, b)| crate::linalg::dot(a.as_slice(), b.as_slice()))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &WeightSet) {
        for (a, b) in self.matrices_mut().into_iter().zip(other.matrices()) {
            a.axpy(s, b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.matrices_mut().into_iter().for_each(|m| m.scale(s));
    }
}

/// Speaker vector taken from the Segment layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Stacks the context frames of every valid time step: row `t` of the result
/// is `[x(t+o_1-o_min), ..., x(t+o_c-o_min)]`.
pub fn stack_context(input: &Matrix, context: &[i32]) -> Result<Matrix> {
    let (t, n) = input.shape();
    let span = (context[context.len() - 1] - context[0]) as usize;
    if t <= span {
        bail!(Shape, "sequence of {t} frames too short for context {context:?}: at least {} required", span + 1);
    }
    let out_t = t - span;
    let c = context.len();
    let mut out = Matrix::zeros(out_t, c * n);
    let base = context[0];
    for r in 0..out_t {
        let row = out.row_mut(r);
        for (j, &off) in context.iter().enumerate() {
            let src = (r as i32 + off - base) as usize;
            row[j * n..(j + 1) * n].copy_from_slice(input.row(src));
        }
    }
    Ok(out)
}

pub fn relu_in_place(m: &mut Matrix) {
    m.as_mut_slice().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

/// One TDNN layer: `ReLU(x_t · W)` or `ReLU((x_t · W_a) · W_b)` per output
/// frame, no bias. Output has `T - span` rows.
pub fn forward_tdnn(spec: &LayerSpec, weights: &LayerWeights, input: &Matrix) -> Result<Matrix> {
    if input.cols() != spec.in_dim {
        bail!(Shape, "layer input has {} dims, expected {}", input.cols(), spec.in_dim);
    }
    let x = stack_context(input, &spec.context)?;
    let mut z = match weights {
        LayerWeights::Full(w) => matmul(&x, w)?,
        LayerWeights::LowRank { a, b } => matmul(&matmul(&x, a)?, b)?,
    };
    relu_in_place(&mut z);
    Ok(z)
}

#[derive(Debug, Clone)]
pub struct PoolStats {
    pub mean: Vec<f64>,
    /// Floored standard deviation.
    pub std: Vec<f64>,
    /// Whether the floor was active per dimension (zero gradient there).
    pub floored: Vec<bool>,
}

impl PoolStats {
    pub fn pooled(&self) -> Vec<f64> {
        let mut v = self.mean.clone();
        v.extend_from_slice(&self.std);
        v
    }
}

pub fn pool_stats(seq: &Matrix) -> Result<PoolStats> {
    let (t, d) = seq.shape();
    if t < 2 {
        bail!(Shape, "statistics pooling needs at least 2 frames, got {t}");
    }
    let mut mean = vec![0.0; d];
    for r in 0..t {
        for (m, v) in mean.iter_mut().zip(seq.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    let mut var = vec![0.0; d];
    for r in 0..t {
        for ((s, v), m) in var.iter_mut().zip(seq.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let mut std = Vec::with_capacity(d);
    let mut floored = Vec::with_capacity(d);
    for s in var {
        let sd = (s / t as f64).sqrt();
        floored.push(sd <= STD_FLOOR);
        std.push(sd.max(STD_FLOOR));
    }
    Ok(PoolStats { mean, std, floored })
}

/// `[mean; std]` over frames (population std, floored at 1e-10).
pub fn stats_pool(seq: &Matrix) -> Result<Vec<f64>> {
    Ok(pool_stats(seq)?.pooled())
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Stacked-context input of each TDNN layer.
    pub stacked: Vec<Matrix>,
    /// `x·W_a` for low-rank layers.
    pub bottleneck: Vec<Option<Matrix>>,
    /// Post-ReLU output of each TDNN layer.
    pub activations: Vec<Matrix>,
    pub stats: PoolStats,
    pub pooled: Vec<f64>,
    pub embedding: Vec<f64>,
}

fn check_input(config: &ModelConfig, frames: &Matrix) -> Result<()> {
    if frames.cols() != config.input_dim {
        bail!(Shape, "features have {} coefficients, model expects {}", frames.cols(), config.input_dim);
    }
    if frames.rows() < config.min_frames() {
        bail!(Shape, "utterance of {} frames too short: at least {} required", frames.rows(), config.min_frames());
    }
    Ok(())
}

pub fn forward_cached(config: &ModelConfig, weights: &WeightSet, frames: &Matrix) -> Result<ForwardCache> {
    check_input(config, frames)?;
    let mut stacked = Vec::with_capacity(NUM_TDNN);
    let mut bottleneck = Vec::with_capacity(NUM_TDNN);
    let mut activations: Vec<Matrix> = Vec::with_capacity(NUM_TDNN);
    for (i, (spec, w)) in config.tdnn.iter().zip(&weights.tdnn).enumerate() {
        let input = if i == 0 { frames } else { &activations[i - 1] };
        let x = stack_context(input, &spec.context)?;
        let (mut z, h) = match w {
            LayerWeights::Full(w) => (matmul(&x, w)?, None),
            LayerWeights::LowRank { a, b } => {
                let h = matmul(&x, a)?;
                (matmul(&h, b)?, Some(h))
            }
        };
        relu_in_place(&mut z);
        stacked.push(x);
        bottleneck.push(h);
        activations.push(z);
    }
    let stats = pool_stats(&activations[NUM_TDNN - 1])?;
    let pooled = stats.pooled();
    let embedding = segment_forward(&pooled, &weights.segment);
    Ok(ForwardCache { stacked, bottleneck, activations, stats, pooled, embedding })
}

fn segment_forward(pooled: &[f64], segment: &Matrix) -> Vec<f64> {
    let mut e = vec![0.0; segment.cols()];
    for (r, &p) in pooled.iter().enumerate() {
        for (o, w) in e.iter_mut().zip(segment.row(r)) {
            *o += p * w;
        }
    }
    e
}

/// Embedding of a whole utterance: TDNN stack, pooling, then the Segment
/// affine map (pre-activation). The output layer is not applied.
pub fn embed(config: &ModelConfig, weights: &WeightSet, features: &FeatureSequence) -> Result<Embedding> {
    embed_frames(config, weights, features.frames())
}

pub fn embed_frames(config: &ModelConfig, weights: &WeightSet, frames: &Matrix) -> Result<Embedding> {
    check_input(config, frames)?;
    let mut h = frames.clone();
    for (spec, w) in config.tdnn.iter().zip(&weights.tdnn) {
        h = forward_tdnn(spec, w, &h)?;
    }
    Ok(Embedding(segment_forward(&stats_pool(&h)?, &weights.segment)))
}

const WEIGHT_MAGIC: &[u8; 4] = b"LRXW";
pub const WEIGHT_VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Serializes a model.
///
/// Layout (little-endian): `"LRXW"`, u32 version, u32 config length, the
/// config as `key = value` text, u64 body length, the body (every matrix in
/// declaration order as row-major f64), and a u64 FNV-1a checksum of the
/// body.
pub fn to_bytes(config: &ModelConfig, weights: &WeightSet) -> Result<Vec<u8>> {
    weights.check_shapes(config)?;
    let cfg = config.to_kv();
    let mut body = Vec::with_capacity(weights.num_params() * 8);
    for m in weights.matrices() {
        for v in m.as_slice() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(body.len() + cfg.len() + 32);
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&fnv1a(&body).to_le_bytes());
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelConfig, WeightSet)> {
    let truncated = || Error::Corrupt("model file is truncated".into());
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let s = bytes.get(*pos..*pos + n).ok_or_else(truncated)?;
        *pos += n;
        Ok(s)
    };
    let mut pos = 0;
    if take(&mut pos, 4)? != WEIGHT_MAGIC {
        bail!(Corrupt, "not a model file (bad magic)");
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != WEIGHT_VERSION {
        bail!(Corrupt, "unsupported model file version {version} (expected {WEIGHT_VERSION})");
    }
    let cfg_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let cfg_text = std::str::from_utf8(take(&mut pos, cfg_len)?)
        .map_err(|_| Error::Corrupt("embedded config is not UTF-8".into()))?;
    let config = ModelConfig::parse(cfg_text, None)?;
    let body_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let body = take(&mut pos, body_len)?;
    let checksum = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    if pos != bytes.len() {
        bail!(Corrupt, "trailing bytes after model checksum");
    }
    if checksum != fnv1a(body) {
        bail!(Corrupt, "model body checksum mismatch");
    }
    let mut off = 0usize;
    let mut mats = Vec::new();
    let shapes = matrix_shapes(&config);
    for (name, r, c) in &shapes {
        let n = r * c * 8;
        let Some(chunk) = body.get(off..off + n) else {
            bail!(Shape, "{name}: config requires {r}x{c} weights but the file body ends early");
        };
        let data = chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        mats.push(Matrix::from_vec(*r, *c, data)?);
        off += n;
    }
    if off != body.len() {
        let (name, r, c) = shapes.last().unwrap();
        bail!(Shape, "{name}: config requires {r}x{c} weights but the file holds {} extra bytes", body.len() - off);
    }
    let mut it = mats.into_iter();
    let tdnn = config
        .tdnn
        .iter()
        .map(|l| match l.rank {
            None => LayerWeights::Full(it.next().unwrap()),
            Some(_) => LayerWeights::LowRank { a: it.next().unwrap(), b: it.next().unwrap() },
        })
        .collect();
    let segment = it.next().unwrap();
    let output = it.next().unwrap();
    Ok((config, WeightSet { tdnn, segment, output }))
}

pub fn save(path: impl AsRef<Path>, config: &ModelConfig, weights: &WeightSet) -> Result<()> {
    fs::write(path, to_bytes(config, weights)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(ModelConfig, WeightSet)> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn tiny_config(rank: bool) -> ModelConfig {
        let mut c = ModelConfig {
            input_dim: 4,
            tdnn: vec![
                LayerSpec::full(&[-2, -1, 0, 1, 2], 4, 6),
                LayerSpec::full(&[-2, 0, 2], 6, 6),
                LayerSpec::full(&[-2, 0, 2], 6, 5),
                LayerSpec::full(&[0], 5, 5),
                LayerSpec::full(&[0], 5, 4),
            ],
            embed_dim: 3,
            num_speakers: 3,
            width_factor: 1.0,
        };
        if rank {
            c.tdnn[1].rank = Some(3);
            c.tdnn[3].rank = Some(2);
        }
        c
    }

    /// Straight-line forward pass written directly from the layer equations.
    fn oracle_embed(c: &ModelConfig, w: &WeightSet, x: &Matrix) -> Vec<f64> {
        let mut h: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).to_vec()).collect();
        for (spec, lw) in c.tdnn.iter().zip(&w.tdnn) {
            let full = lw.effective();
            let lo = -spec.context[0];
            let hi = *spec.context.last().unwrap();
            let mut next = Vec::new();
            for t in lo..(h.len() as i32 - hi) {
                let mut xt = Vec::new();
                for &o in &spec.context {
                    xt.extend_from_slice(&h[(t + o) as usize]);
                }
                let y: Vec<f64> = (0..spec.out_dim)
                    .map(|j| (0..xt.len()).map(|i| xt[i] * full.get(i, j)).sum::<f64>().max(0.0))
                    .collect();
                next.push(y);
            }
            h = next;
        }
        let t = h.len() as f64;
        let d = h[0].len();
        let mut pooled = vec![0.0; 2 * d];
        for j in 0..d {
            let m = h.iter().map(|r| r[j]).sum::<f64>() / t;
            let v = h.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / t;
            pooled[j] = m;
            pooled[d + j] = v.sqrt().max(STD_FLOOR);
        }
        (0..c.embed_dim).map(|k| (0..2 * d).map(|i| pooled[i] * w.segment.get(i, k)).sum()).collect()
    }

    #[test]
    fn xvector_parameter_counts() {
        let p = count_params(&ModelConfig::xvector(7323));
        assert_eq!(p.get("tdnn1"), Some(102_400));
        assert_eq!(p.get("tdnn2"), Some(786_432));
        assert_eq!(p.get("tdnn3"), Some(786_432));
        assert_eq!(p.get("tdnn4"), Some(262_144));
        assert_eq!(p.get("tdnn5"), Some(262_144));
        assert_eq!(p.get("segment"), Some(262_144));
        assert_eq!(p.without_output(), 2_461_696);
        assert_eq!(p.get("output"), Some(256 * 7323));
        // In the neighbourhood of the reported 4800k teacher.
        assert!(p.total > 4_000_000 && p.total < 5_000_000, "{}", p.total);
    }

    #[test]
    fn low_rank_parameter_counts() {
        let mut l = LayerSpec::full(&[-2, 0, 2], 512, 512);
        assert_eq!(l.num_params(), 786_432);
        l.rank = Some(256);
        assert_eq!(l.num_params(), 524_288);
        let c = ModelConfig::lrx_vector(10);
        let ranks: Vec<_> = c.tdnn.iter().map(|l| l.rank).collect();
        assert_eq!(ranks, vec![None, Some(256), Some(256), Some(384), Some(384)]);
        assert!(count_params(&c).total < count_params(&ModelConfig::xvector(10)).total);
    }

    #[test]
    fn low_rank_saves_below_break_even() {
        for (c, n, m) in [(3usize, 16usize, 16usize), (1, 16, 16), (5, 8, 12)] {
            let full = LayerSpec { context: (0..c as i32).collect(), in_dim: n, out_dim: m, rank: None };
            for k in 1..=full.max_rank() {
                let lr = LayerSpec { rank: Some(k), ..full.clone() };
                if (k as f64) < (c * n * m) as f64 / (c * n + m) as f64 {
                    assert!(lr.num_params() < full.num_params());
                }
            }
        }
    }

    #[test]
    fn scaling() {
        let c = ModelConfig::xvector(32);
        assert_eq!(scale_config(&c, 1.0).unwrap(), c);
        let half = scale_config(&c, 0.5).unwrap();
        assert!(half.tdnn.iter().all(|l| l.out_dim == 256));
        assert_eq!(half.pooled_dim(), 512);
        assert_eq!(half.embed_dim, 256);
        assert_eq!(half.width_factor, 0.5);
        let lr = scale_config(&ModelConfig::lrx_vector(32), 0.5).unwrap();
        assert_eq!(lr.tdnn[1].rank, Some(128));
        assert_eq!(lr.tdnn[4].rank, Some(192));
        assert_eq!(scale_config(&c, 0.001).unwrap_err().category(), "config");

        // search for the factor that lands nearest 550k weights with 32 classes
        let mut best = (f64::MAX, 0.0, 0usize);
        for i in 1..=1000 {
            let f = i as f64 / 1000.0;
            if let Ok(s) = scale_config(&c, f) {
                let n = count_params(&s).total;
                let gap = (n as f64 - 550_000.0).abs();
                if gap < best.0 {
                    best = (gap, f, n);
                }
            }
        }
        // dims move in steps of 8, so the reachable totals are coarse here
        assert!(best.0 / 550_000.0 < 0.03, "{best:?}");
    }

    #[test]
    fn min_frames_for_xvector_contexts() {
        assert_eq!(ModelConfig::xvector(2).min_frames(), 14);
    }

    #[test]
    fn identity_layer_is_relu() {
        let spec = LayerSpec::full(&[0], 3, 3);
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![-1.0, 3.0, 0.0]]).unwrap();
        let y = forward_tdnn(&spec, &LayerWeights::Full(Matrix::identity(3)), &x).unwrap();
        assert_eq!(y.as_slice(), &[1.0, 0.0, 0.5, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn short_input_names_minimum_length() {
        let spec = LayerSpec::full(&[-2, 0, 2], 2, 2);
        let err = forward_tdnn(&spec, &LayerWeights::Full(Matrix::zeros(6, 2)), &Matrix::zeros(4, 2)).unwrap_err();
        assert_eq!(err.category(), "shape");
        assert!(err.to_string().contains("at least 5"), "{err}");
    }

    #[test]
    fn low_rank_pair_matches_multiplied_out() {
        let mut rng = substream(11, "t", &[]);
        let spec = LayerSpec { context: vec![-2, 0, 2], in_dim: 5, out_dim: 4, rank: Some(2) };
        let a = Matrix::uniform(15, 2, 1.0, &mut rng);
        let b = Matrix::uniform(2, 4, 1.0, &mut rng);
        let x = Matrix::uniform(10, 5, 1.0, &mut rng);
        let pair = LayerWeights::LowRank { a, b };
        let y1 = forward_tdnn(&spec, &pair, &x).unwrap();
        let y2 = forward_tdnn(&LayerSpec { rank: None, ..spec }, &LayerWeights::Full(pair.effective()), &x).unwrap();
        assert!(y1.max_abs_diff(&y2) <= 1e-12);
    }

    #[test]
    fn tdnn_matches_naive_oracle() {
        let mut rng = substream(12, "t", &[]);
        let spec = LayerSpec::full(&[-2, -1, 0, 1, 2], 3, 4);
        let w = Matrix::uniform(15, 4, 1.0, &mut rng);
        let x = Matrix::uniform(10, 3, 1.0, &mut rng);
        let y = forward_tdnn(&spec, &LayerWeights::Full(w.clone()), &x).unwrap();
        assert_eq!(y.rows(), 6);
        for t in 2..8 {
            for j in 0..4 {
                let mut s = 0.0;
                for (ci, o) in (-2i32..=2).enumerate() {
                    for i in 0..3 {
                        s += x.get((t as i32 + o) as usize, i) * w.get(ci * 3 + i, j);
                    }
                }
                assert!((y.get(t - 2, j) - s.max(0.0)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn stats_pool_cases() {
        let c = Matrix::from_vec(5, 2, vec![3.0, -1.0, 3.0, -1.0, 3.0, -1.0, 3.0, -1.0, 3.0, -1.0]).unwrap();
        assert_eq!(stats_pool(&c).unwrap(), vec![3.0, -1.0, STD_FLOOR, STD_FLOOR]);
        let two = Matrix::from_vec(2, 1, vec![0.0, 2.0]).unwrap();
        assert_eq!(stats_pool(&two).unwrap(), vec![1.0, 1.0]);
        assert_eq!(stats_pool(&Matrix::zeros(1, 3)).unwrap_err().category(), "shape");

        let mut rng = substream(13, "t", &[]);
        let x = Matrix::uniform(50, 5, 2.0, &mut rng);
        let p = stats_pool(&x).unwrap();
        for j in 0..5 {
            let m = (0..50).map(|r| x.get(r, j)).sum::<f64>() / 50.0;
            let s = ((0..50).map(|r| (x.get(r, j) - m).powi(2)).sum::<f64>() / 50.0).sqrt();
            assert!((p[j] - m).abs() <= 1e-12 && (p[5 + j] - s).abs() <= 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn stats_pool_is_permutation_invariant(seed in 0u64..10_000) {
            let mut rng = substream(seed, "perm", &[]);
            let x = Matrix::uniform(20, 4, 1.0, &mut rng);
            let mut order: Vec<usize> = (0..20).collect();
            for i in (1..20).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let rows: Vec<Vec<f64>> = order.iter().map(|&r| x.row(r).to_vec()).collect();
            let y = Matrix::from_rows(&rows).unwrap();
            let (a, b) = (stats_pool(&x).unwrap(), stats_pool(&y).unwrap());
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() <= 1e-12);
            }
        }

        #[test]
        fn low_rank_forward_equals_effective_full(seed in 0u64..10_000) {
            let mut rng = substream(seed, "lr", &[]);
            let c = tiny_config(true);
            let w = WeightSet::init_random(&c, &mut rng);
            let full_c = c.full_rank();
            let full_w = WeightSet {
                tdnn: w.tdnn.iter().map(|l| LayerWeights::Full(l.effective())).collect(),
                ..w.clone()
            };
            let x = Matrix::uniform(20, 4, 2.0, &mut rng);
            let e1 = embed_frames(&c, &w, &x).unwrap();
            let e2 = embed_frames(&full_c, &full_w, &x).unwrap();
            for (u, v) in e1.values().iter().zip(e2.values()) {
                prop_assert!((u - v).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn embed_matches_straight_line_oracle() {
        let mut rng = substream(14, "t", &[]);
        for rank in [false, true] {
            let c = tiny_config(rank);
            let w = WeightSet::init_random(&c, &mut rng);
            let x = Matrix::uniform(25, 4, 2.0, &mut rng);
            let e = embed_frames(&c, &w, &x).unwrap();
            let o = oracle_embed(&c, &w, &x);
            for (u, v) in e.values().iter().zip(&o) {
                assert!((u - v).abs() <= 1e-10);
            }
            let cache = forward_cached(&c, &w, &x).unwrap();
            assert_eq!(cache.embedding, e.0);
        }
    }

    #[test]
    fn constant_features_embedding_is_length_independent() {
        let mut rng = substream(15, "t", &[]);
        let c = tiny_config(false);
        let w = WeightSet::init_random(&c, &mut rng);
        let row: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let seq = |t: usize| Matrix::from_vec(t, 4, row.repeat(t)).unwrap();
        let e20 = embed_frames(&c, &w, &seq(20)).unwrap();
        let e200 = embed_frames(&c, &w, &seq(200)).unwrap();
        for (a, b) in e20.values().iter().zip(e200.values()) {
            assert!((a - b).abs() <= 1e-12);
        }
        let zero = WeightSet::zeros(&c);
        assert!(embed_frames(&c, &zero, &Matrix::zeros(20, 4)).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_text_round_trip_and_errors() {
        let c = scale_config(&ModelConfig::lrx_vector(12), 0.25).unwrap();
        assert_eq!(ModelConfig::parse(&c.to_kv(), None).unwrap(), c);
        let p = ModelConfig::parse("preset = lrx-vector\nscale = 0.0625\n", Some(8)).unwrap();
        assert_eq!(p.tdnn[1].out_dim, 32);
        assert_eq!(p.tdnn[1].rank, Some(16));
        assert_eq!(p.tdnn[3].rank, Some(24));
        assert_eq!(p.num_speakers, 8);
        let q = ModelConfig::parse("layer2.rank = 0.5\nlayer3.rank = 100\nnum_speakers = 3", None).unwrap();
        assert_eq!((q.tdnn[1].rank, q.tdnn[2].rank), (Some(256), Some(100)));
        let err = ModelConfig::parse("bogus = 1\nlayer9.out_dim = 3\nnum_speakers = 2", None).unwrap_err();
        assert!(err.to_string().contains("bogus") && err.to_string().contains("layer9.out_dim"));
        assert!(ModelConfig::parse("layer1.rank = 4\nnum_speakers = 2", None).is_err());
        assert!(ModelConfig::parse("layer2.context = 2,0\nnum_speakers = 2", None).is_err());
        assert!(ModelConfig::parse("", None).is_err());
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lrxw");
        let mut rng = substream(16, "t", &[]);
        let c = tiny_config(true);
        let w = WeightSet::init_random(&c, &mut rng);
        save(&path, &c, &w).unwrap();
        let (c2, w2) = load(&path).unwrap();
        assert_eq!(c2, c);
        assert_eq!(w2.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), w.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>());

        let bytes = fs::read(&path).unwrap();
        let err = from_bytes(&bytes[..bytes.len() - 20]).unwrap_err();
        assert_eq!(err.category(), "corrupt");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(from_bytes(&bad).unwrap_err().category(), "corrupt");
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(from_bytes(&bad).unwrap_err().to_string().contains("version"));

        // Same body, embedded config edited to claim 4 speakers.
        let cfg = c.to_kv();
        let edited = cfg.replace("num_speakers = 3", "num_speakers = 4");
        let body = &bytes[12 + cfg.len()..];
        let mut fixture = Vec::new();
        fixture.extend_from_slice(&bytes[..8]);
        fixture.extend_from_slice(&(edited.len() as u32).to_le_bytes());
        fixture.extend_from_slice(edited.as_bytes());
        fixture.extend_from_slice(body);
        let err = from_bytes(&fixture).unwrap_err();
        assert_eq!(err.category(), "shape");
        assert!(err.to_string().starts_with("output"), "{err}");
    }
}
