//! Backpropagation, SGD and the training driver for baseline, distillation,
//! gated distillation and fine-tuning runs.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{bail, Error, Result};
use crate::features::FeatureSequence;
use crate::linalg::{dot, matmul_nt, matmul_tn, Matrix};
use crate::losses::{ams_from_head, combined_loss, gcs_gate, kd_cos, kd_kld, kd_mse, AmsParams, CosineHead, LossOutput};
use crate::model::{embed_frames, forward_cached, ForwardCache, LayerWeights, ModelConfig, WeightSet, NUM_TDNN};
use crate::parallel;
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdKind {
    Kld,
    Mse,
    Cos,
}

/// What the distillation loss compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdTarget {
    /// Scaled cosine logits of each network's own output layer.
    Logits,
    /// Segment-layer embeddings.
    Embeddings,
}

impl KdKind {
    pub fn default_target(self) -> KdTarget {
        match self {
            KdKind::Kld => KdTarget::Logits,
            KdKind::Mse | KdKind::Cos => KdTarget::Embeddings,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KdKind::Kld => "kld",
            KdKind::Mse => "mse",
            KdKind::Cos => "cos",
        }
    }
}

impl FromStr for KdKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kld" => Ok(KdKind::Kld),
            "mse" => Ok(KdKind::Mse),
            "cos" => Ok(KdKind::Cos),
            _ => bail!(Config, "unknown distillation loss '{s}' (expected kld, mse or cos)"),
        }
    }
}

impl FromStr for KdTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logits" => Ok(KdTarget::Logits),
            "embeddings" => Ok(KdTarget::Embeddings),
            _ => bail!(Config, "unknown distillation target '{s}' (expected logits or embeddings)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    BaselineAms,
    Kd(KdKind),
    Gcs(KdKind),
    Finetune,
}

impl TrainMode {
    pub fn kd_kind(self) -> Option<KdKind> {
        match self {
            TrainMode::Kd(k) | TrainMode::Gcs(k) => Some(k),
            _ => None,
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainMode::BaselineAms => f.write_str("baseline-ams"),
            TrainMode::Finetune => f.write_str("finetune"),
            TrainMode::Kd(k) => write!(f, "kd-{}", k.name()),
            TrainMode::Gcs(k) => write!(f, "gcs-{}", k.name()),
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline-ams" => Ok(TrainMode::BaselineAms),
            "finetune" => Ok(TrainMode::Finetune),
            _ => {
                if let Some(k) = s.strip_prefix("kd-") {
                    Ok(TrainMode::Kd(k.parse()?))
                } else if let Some(k) = s.strip_prefix("gcs-") {
                    Ok(TrainMode::Gcs(k.parse()?))
                } else {
                    bail!(Config, "unknown training mode '{s}'")
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrDecay {
    Exponential,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub decay: LrDecay,
    pub epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Frames per training chunk; shorter utterances are used whole.
    pub chunk_frames: usize,
    pub seed: u64,
    /// Weight of the distillation term.
    pub alpha: f64,
    pub ams: AmsParams,
    pub temperature: f64,
    /// `None` picks the loss's default pairing.
    pub kd_target: Option<KdTarget>,
    /// Stop once the epoch loss improves by less than 0.1% three epochs running.
    pub early_stop: bool,
}

pub const EARLY_STOP_REL: f64 = 1e-3;
pub const EARLY_STOP_PATIENCE: usize = 3;

impl TrainConfig {
    /// Defaults for `mode`: baseline runs decay 0.1 → 1e-4, distillation and
    /// fine-tuning start from 0.01.
    pub fn new(mode: TrainMode) -> Self {
        let lr_initial = if mode == TrainMode::BaselineAms { 0.1 } else { 0.01 };
        TrainConfig {
            mode,
            lr_initial,
            lr_final: 1e-4,
            decay: LrDecay::Exponential,
            epochs: 30,
            weight_decay: 1e-6,
            batch_size: 32,
            chunk_frames: 200,
            seed: 0,
            alpha: 0.5,
            ams: AmsParams::default(),
            temperature: 1.0,
            kd_target: None,
            early_stop: true,
        }
    }

    pub fn kd_target(&self) -> Option<KdTarget> {
        self.mode.kd_kind().map(|k| self.kd_target.unwrap_or(k.default_target()))
    }

    pub fn validate(&self) -> Result<()> {
        let frozen = self.lr_initial == 0.0 && self.lr_final == 0.0;
        if !frozen && !(self.lr_final > 0.0 && self.lr_initial >= self.lr_final) {
            bail!(Config, "learning rates must satisfy lr_initial >= lr_final > 0 (got {} and {})", self.lr_initial, self.lr_final);
        }
        if !(self.weight_decay >= 0.0) {
            bail!(Config, "weight_decay must be non-negative");
        }
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be positive");
        }
        if self.chunk_frames == 0 {
            bail!(Config, "chunk_frames must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            bail!(Config, "alpha {} outside [0, 1]", self.alpha);
        }
        if !(self.temperature > 0.0) {
            bail!(Config, "temperature must be positive");
        }
        self.ams.validate()
    }
}

/// Learning rate at `step` of `total` with geometric interpolation.
pub fn lr_schedule(step: usize, total_steps: usize, lr_initial: f64, lr_final: f64) -> f64 {
    if total_steps == 0 || lr_initial == lr_final {
        return lr_initial;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    lr_initial * (lr_final / lr_initial).powf(frac)
}

pub fn lr_linear(step: usize, total_steps: usize, lr_initial: f64, lr_final: f64) -> f64 {
    if total_steps == 0 {
        return lr_initial;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    lr_initial + (lr_final - lr_initial) * frac
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub weights: WeightSet,
    pub epoch: usize,
    pub step: usize,
    pub weight_decay: f64,
}

/// `w ← w − lr·(g + weight_decay·w)`.
pub fn sgd_step(state: &mut TrainState, grads: &WeightSet, lr: f64) {
    let wd = state.weight_decay;
    for (w, g) in state.weights.matrices_mut().into_iter().zip(grads.matrices()) {
        assert_eq!(w.shape(), g.shape(), "sgd_step shape mismatch");
        for (wv, gv) in w.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *wv -= lr * (gv + wd * *wv);
        }
    }
    state.step += 1;
}

/// Accumulates into `grads` the gradient of `⟨d_embedding, embedding⟩` for
/// one utterance, given its forward cache. The output layer is untouched.
pub fn backward_utterance(
    config: &ModelConfig,
    weights: &WeightSet,
    cache: &ForwardCache,
    d_embedding: &[f64],
    grads: &mut WeightSet,
) -> Result<()> {
    if d_embedding.len() != config.embed_dim {
        bail!(Shape, "embedding gradient has {} dims, expected {}", d_embedding.len(), config.embed_dim);
    }
    for (r, &p) in cache.pooled.iter().enumerate() {
        for (g, d) in grads.segment.row_mut(r).iter_mut().zip(d_embedding) {
            *g += p * d;
        }
    }
    let d_pooled: Vec<f64> = (0..cache.pooled.len()).map(|r| dot(weights.segment.row(r), d_embedding)).collect();

    let last = &cache.activations[NUM_TDNN - 1];
    let (t, d) = last.shape();
    let stats = &cache.stats;
    let mut dy = Matrix::zeros(t, d);
    for r in 0..t {
        for j in 0..d {
            let mut g = d_pooled[j] / t as f64;
            if !stats.floored[j] {
                g += d_pooled[d + j] * (last.get(r, j) - stats.mean[j]) / (t as f64 * stats.std[j]);
            }
            dy.set(r, j, g);
        }
    }

    for l in (0..NUM_TDNN).rev() {
        for (g, a) in dy.as_mut_slice().iter_mut().zip(cache.activations[l].as_slice()) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
        let x = &cache.stacked[l];
        let d_stacked = match (&weights.tdnn[l], &mut grads.tdnn[l]) {
            (LayerWeights::Full(w), LayerWeights::Full(gw)) => {
                gw.axpy(1.0, &matmul_tn(x, &dy)?);
                if l > 0 {
                    Some(matmul_nt(&dy, w)?)
                } else {
                    None
                }
            }
            (LayerWeights::LowRank { a, b }, LayerWeights::LowRank { a: ga, b: gb }) => {
                let h = cache.bottleneck[l].as_ref().expect("low-rank layer caches its bottleneck");
                gb.axpy(1.0, &matmul_tn(h, &dy)?);
                let dh = matmul_nt(&dy, b)?;
                ga.axpy(1.0, &matmul_tn(x, &dh)?);
                if l > 0 {
                    Some(matmul_nt(&dh, a)?)
                } else {
                    None
                }
            }
            _ => bail!(Shape, "gradient container does not match layer {} structure", l + 1),
        };
        if let Some(dx) = d_stacked {
            let prev = &cache.activations[l - 1];
            dy = scatter_context(&dx, &config.tdnn[l].context, prev.rows(), prev.cols());
        }
    }
    Ok(())
}

/// Adjoint of `stack_context`.
fn scatter_context(d_stacked: &Matrix, context: &[i32], rows: usize, n: usize) -> Matrix {
    let mut out = Matrix::zeros(rows, n);
    let base = context[0];
    for r in 0..d_stacked.rows() {
        let src = d_stacked.row(r);
        for (j, &off) in context.iter().enumerate() {
            let dst = (r as i32 + off - base) as usize;
            for (o, g) in out.row_mut(dst).iter_mut().zip(&src[j * n..(j + 1) * n]) {
                *o += g;
            }
        }
    }
    out
}

/// A frozen network providing distillation targets.
#[derive(Clone, Copy)]
pub struct Teacher<'a> {
    pub config: &'a ModelConfig,
    pub weights: &'a WeightSet,
}

/// Teacher outputs for one batch of chunks.
#[derive(Debug, Clone)]
pub struct TeacherBatch {
    pub embeddings: Matrix,
    pub logits: Matrix,
}

pub fn teacher_batch(teacher: Teacher<'_>, chunks: &[Matrix], scale: f64) -> Result<TeacherBatch> {
    let rows = parallel::map_indexed(chunks.len(), parallel::threads(), |i| {
        embed_frames(teacher.config, teacher.weights, &chunks[i]).map(|e| e.0)
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let embeddings = Matrix::from_rows(&rows)?;
    let logits = CosineHead::new(&embeddings, &teacher.weights.output)?.logits(scale);
    Ok(TeacherBatch { embeddings, logits })
}

/// Differentiable batch objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Ams,
    Kd(KdKind),
    /// `α·KD + (1−α)·AMS`.
    Combined(KdKind, f64),
}

/// Forward pass of a batch with everything the backward pass needs.
pub struct BatchForward {
    pub caches: Vec<ForwardCache>,
    pub embeddings: Matrix,
    pub head: CosineHead,
}

pub fn forward_batch(config: &ModelConfig, weights: &WeightSet, chunks: &[Matrix]) -> Result<BatchForward> {
    if chunks.is_empty() {
        bail!(Shape, "empty batch");
    }
    let caches = parallel::map_indexed(chunks.len(), parallel::threads(), |i| forward_cached(config, weights, &chunks[i]));
    let caches = caches.into_iter().collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<f64>> = caches.iter().map(|c| c.embedding.clone()).collect();
    let embeddings = Matrix::from_rows(&rows)?;
    let head = CosineHead::new(&embeddings, &weights.output)?;
    Ok(BatchForward { caches, embeddings, head })
}

/// AMS loss at the head: value and grads `[∂/∂E, ∂/∂C]`.
pub fn head_ams(fwd: &BatchForward, labels: &[usize], tc: &TrainConfig) -> Result<LossOutput> {
    ams_from_head(&fwd.head, labels, tc.ams)
}

/// Distillation loss at the head, with grads `[∂/∂E, ∂/∂C]`.
pub fn head_kd(fwd: &BatchForward, kind: KdKind, teacher: &TeacherBatch, tc: &TrainConfig) -> Result<LossOutput> {
    let target = tc.kd_target.unwrap_or(kind.default_target());
    let (student, goal) = match target {
        KdTarget::Embeddings => (fwd.embeddings.clone(), &teacher.embeddings),
        KdTarget::Logits => (fwd.head.logits(tc.ams.scale), &teacher.logits),
    };
    let out = match kind {
        KdKind::Kld => kd_kld(&student, goal, tc.temperature)?,
        KdKind::Mse => kd_mse(&student, goal)?,
        KdKind::Cos => kd_cos(&student, goal)?,
    };
    let g = &out.grads[0];
    let (d_emb, d_cls) = match target {
        KdTarget::Embeddings => (g.clone(), Matrix::zeros(fwd.embeddings.cols(), fwd.head.cosines.cols())),
        KdTarget::Logits => {
            let mut d_cos = g.clone();
            d_cos.scale(tc.ams.scale);
            fwd.head.backward(&d_cos)
        }
    };
    Ok(LossOutput { value: out.value, grads: vec![d_emb, d_cls] })
}

/// Backpropagates one set of head gradients per entry of `heads`, sharing
/// the forward caches. Per-utterance contributions are summed in batch order
/// whatever the thread count, so results are bitwise reproducible.
pub fn backprop_heads(
    config: &ModelConfig,
    weights: &WeightSet,
    fwd: &BatchForward,
    heads: &[&LossOutput],
) -> Result<Vec<WeightSet>> {
    let mut totals: Vec<WeightSet> = heads.iter().map(|_| WeightSet::zeros(config)).collect();
    let threads = parallel::threads();
    let b = fwd.caches.len();
    let mut start = 0;
    while start < b {
        let end = (start + threads).min(b);
        let parts = parallel::map_indexed(end - start, threads, |j| {
            let i = start + j;
            heads
                .iter()
                .map(|h| {
                    let mut g = WeightSet::zeros(config);
                    backward_utterance(config, weights, &fwd.caches[i], h.grads[0].row(i), &mut g).map(|_| g)
                })
                .collect::<Result<Vec<_>>>()
        });
        for part in parts {
            for (total, g) in totals.iter_mut().zip(part?) {
                total.axpy(1.0, &g);
            }
        }
        start = end;
    }
    for (total, h) in totals.iter_mut().zip(heads) {
        total.output.axpy(1.0, &h.grads[1]);
    }
    Ok(totals)
}

fn check_batch(config: &ModelConfig, chunks: &[Matrix], labels: &[usize]) -> Result<()> {
    if chunks.len() != labels.len() {
        bail!(Shape, "{} chunks but {} labels", chunks.len(), labels.len());
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= config.num_speakers) {
        bail!(Config, "label {l} out of range for {} speakers", config.num_speakers);
    }
    Ok(())
}

/// Loss value and exact gradient of `objective` over one batch.
pub fn objective_gradient(
    config: &ModelConfig,
    weights: &WeightSet,
    chunks: &[Matrix],
    labels: &[usize],
    objective: Objective,
    teacher: Option<&TeacherBatch>,
    tc: &TrainConfig,
) -> Result<(f64, WeightSet)> {
    check_batch(config, chunks, labels)?;
    let fwd = forward_batch(config, weights, chunks)?;
    let need_teacher = || teacher.ok_or_else(|| Error::Config("distillation objective requires a teacher".into()));
    let head = match objective {
        Objective::Ams => head_ams(&fwd, labels, tc)?,
        Objective::Kd(kind) => head_kd(&fwd, kind, need_teacher()?, tc)?,
        Objective::Combined(kind, alpha) => {
            let kd = head_kd(&fwd, kind, need_teacher()?, tc)?;
            let ams = head_ams(&fwd, labels, tc)?;
            combined_loss(&kd, &ams, alpha)?
        }
    };
    let mut g = backprop_heads(config, weights, &fwd, &[&head])?;
    Ok((head.value, g.pop().expect("one head")))
}

/// Outcome of one gated step.
#[derive(Debug, Clone)]
pub struct GcsStep {
    pub open: bool,
    pub cosine: f64,
    pub loss: f64,
    pub grad_kd: WeightSet,
    pub grad_ams: WeightSet,
    /// Either `α·grad_kd + (1−α)·grad_ams` (open) or `grad_ams` (closed).
    pub grad: WeightSet,
}

pub fn gcs_gradient(
    config: &ModelConfig,
    weights: &WeightSet,
    chunks: &[Matrix],
    labels: &[usize],
    kind: KdKind,
    teacher: &TeacherBatch,
    tc: &TrainConfig,
) -> Result<GcsStep> {
    check_batch(config, chunks, labels)?;
    let fwd = forward_batch(config, weights, chunks)?;
    gcs_from_forward(config, weights, &fwd, labels, kind, teacher, tc)
}

fn gcs_from_forward(
    config: &ModelConfig,
    weights: &WeightSet,
    fwd: &BatchForward,
    labels: &[usize],
    kind: KdKind,
    teacher: &TeacherBatch,
    tc: &TrainConfig,
) -> Result<GcsStep> {
    let kd = head_kd(fwd, kind, teacher, tc)?;
    let ams = head_ams(fwd, labels, tc)?;
    let mut g = backprop_heads(config, weights, fwd, &[&kd, &ams])?;
    let grad_ams = g.pop().expect("two heads");
    let grad_kd = g.pop().expect("two heads");
    let gate = gcs_gate(&grad_kd.flatten(), &grad_ams.flatten(), tc.alpha);
    let mut grad = grad_ams.clone();
    grad.assign_flat(&gate.grad);
    let loss = if gate.open { tc.alpha * kd.value + (1.0 - tc.alpha) * ams.value } else { ams.value };
    Ok(GcsStep { open: gate.open, cosine: gate.cosine, loss, grad_kd, grad_ams, grad })
}

/// One labeled training utterance.
#[derive(Debug, Clone)]
pub struct Example {
    pub label: usize,
    /// T×input_dim feature frames.
    pub frames: Matrix,
}

impl Example {
    pub fn new(label: usize, features: FeatureSequence) -> Self {
        Example { label, frames: features.into_frames() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
    /// Fraction of training chunks classified correctly (by cosine score).
    pub accuracy: f64,
    pub gcs_open_fraction: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub weights: WeightSet,
    pub curve: Vec<EpochStats>,
    pub stopped_early: bool,
    /// Gate decision of every step, GCS modes only.
    pub gate_log: Vec<bool>,
}

/// The chunk of utterance `index` used in `epoch`.
fn chunk_for(seed: u64, epoch: usize, index: usize, frames: &Matrix, len: usize) -> Matrix {
    let t = frames.rows();
    if t <= len {
        return frames.clone();
    }
    let start = substream(seed, "chunk", &[epoch as u64, index as u64]).random_range(0..=t - len);
    let cols = frames.cols();
    Matrix::from_vec(len, cols, frames.as_slice()[start * cols..(start + len) * cols].to_vec())
        .expect("slice of a valid matrix")
}

/// Runs `tc.epochs` epochs (fewer when early stopping triggers) starting
/// from `init`.
pub fn train(
    config: &ModelConfig,
    init: WeightSet,
    corpus: &[Example],
    tc: &TrainConfig,
    teacher: Option<Teacher<'_>>,
) -> Result<TrainReport> {
    tc.validate()?;
    config.validate()?;
    init.check_shapes(config)?;
    let kd_kind = tc.mode.kd_kind();
    if kd_kind.is_some() {
        let Some(t) = teacher else {
            bail!(Config, "mode {} requires a teacher model", tc.mode);
        };
        if t.config.input_dim != config.input_dim {
            bail!(Config, "teacher expects {}-dim features, student {}", t.config.input_dim, config.input_dim);
        }
        if tc.kd_target() == Some(KdTarget::Embeddings) && t.config.embed_dim != config.embed_dim {
            bail!(Config, "teacher embedding dim {} differs from student {}", t.config.embed_dim, config.embed_dim);
        }
        if tc.kd_target() == Some(KdTarget::Logits) && t.config.num_speakers != config.num_speakers {
            bail!(Config, "teacher has {} classes, student {}", t.config.num_speakers, config.num_speakers);
        }
    }
    if tc.epochs > 0 && corpus.is_empty() {
        bail!(Config, "training corpus is empty");
    }
    let min_len = teacher.map_or(0, |t| t.config.min_frames()).max(config.min_frames());
    for (i, ex) in corpus.iter().enumerate() {
        if ex.label >= config.num_speakers {
            bail!(Config, "utterance {i} has label {} but the model has {} speakers", ex.label, config.num_speakers);
        }
        if ex.frames.cols() != config.input_dim {
            bail!(Shape, "utterance {i} has {}-dim features, model expects {}", ex.frames.cols(), config.input_dim);
        }
        if ex.frames.rows().min(tc.chunk_frames) < min_len {
            bail!(Shape, "utterance {i} yields chunks of {} frames; at least {min_len} required", ex.frames.rows().min(tc.chunk_frames));
        }
    }

    let batches_per_epoch = corpus.len().div_ceil(tc.batch_size);
    let total_steps = tc.epochs * batches_per_epoch;
    let mut state = TrainState { weights: init, epoch: 0, step: 0, weight_decay: tc.weight_decay };
    let mut curve = Vec::new();
    let mut gate_log = Vec::new();
    let mut stalled = 0usize;
    let mut stopped_early = false;

    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut substream(tc.seed, "shuffle", &[epoch as u64]));
        let lr_first = lr_at(tc, state.step, total_steps);
        let (mut loss_sum, mut correct, mut opened) = (0.0, 0usize, 0usize);
        for batch in order.chunks(tc.batch_size) {
            let chunks: Vec<Matrix> = batch
                .iter()
                .map(|&i| chunk_for(tc.seed, epoch, i, &corpus[i].frames, tc.chunk_frames))
                .collect();
            let labels: Vec<usize> = batch.iter().map(|&i| corpus[i].label).collect();
            let targets = match (kd_kind, teacher) {
                (Some(_), Some(t)) => Some(teacher_batch(t, &chunks, tc.ams.scale)?),
                _ => None,
            };
            let fwd = forward_batch(config, &state.weights, &chunks)?;
            correct += count_correct(&fwd.head.cosines, &labels);
            let (loss, grads) = match tc.mode {
                TrainMode::BaselineAms | TrainMode::Finetune => {
                    let h = head_ams(&fwd, &labels, tc)?;
                    (h.value, backprop_heads(config, &state.weights, &fwd, &[&h])?.pop().expect("one head"))
                }
                TrainMode::Kd(kind) => {
                    let kd = head_kd(&fwd, kind, targets.as_ref().expect("teacher present"), tc)?;
                    let ams = head_ams(&fwd, &labels, tc)?;
                    let h = combined_loss(&kd, &ams, tc.alpha)?;
                    (h.value, backprop_heads(config, &state.weights, &fwd, &[&h])?.pop().expect("one head"))
                }
                TrainMode::Gcs(kind) => {
                    let step = gcs_from_forward(
                        config,
                        &state.weights,
                        &fwd,
                        &labels,
                        kind,
                        targets.as_ref().expect("teacher present"),
                        tc,
                    )?;
                    opened += step.open as usize;
                    gate_log.push(step.open);
                    (step.loss, step.grad)
                }
            };
            if !loss.is_finite() {
                bail!(Numerical, "non-finite loss at epoch {epoch}, step {}", state.step);
            }
            loss_sum += loss * batch.len() as f64;
            let lr = lr_at(tc, state.step, total_steps);
            sgd_step(&mut state, &grads, lr);
        }
        state.epoch = epoch + 1;
        let mean_loss = loss_sum / corpus.len() as f64;
        let gcs_open_fraction = matches!(tc.mode, TrainMode::Gcs(_)).then(|| opened as f64 / batches_per_epoch as f64);
        if let Some(prev) = curve.last().map(|s: &EpochStats| s.mean_loss) {
            if (prev - mean_loss) < EARLY_STOP_REL * prev.abs() {
                stalled += 1;
            } else {
                stalled = 0;
            }
        }
        curve.push(EpochStats {
            epoch: epoch + 1,
            mean_loss,
            lr: lr_first,
            accuracy: correct as f64 / corpus.len() as f64,
            gcs_open_fraction,
        });
        if tc.early_stop && stalled >= EARLY_STOP_PATIENCE {
            stopped_early = epoch + 1 < tc.epochs;
            break;
        }
    }
    Ok(TrainReport { weights: state.weights, curve, stopped_early, gate_log })
}

fn lr_at(tc: &TrainConfig, step: usize, total: usize) -> f64 {
    match tc.decay {
        LrDecay::Exponential => lr_schedule(step, total, tc.lr_initial, tc.lr_final),
        LrDecay::Linear => lr_linear(step, total, tc.lr_initial, tc.lr_final),
    }
}

fn count_correct(cosines: &Matrix, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = cosines.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == y
        })
        .count()
}

/// Loss curve CSV with header `epoch,mean_loss,lr,gcs_open_fraction`; the
/// last column is empty outside GCS modes.
pub fn write_loss_csv(path: impl AsRef<Path>, curve: &[EpochStats]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "epoch,mean_loss,lr,gcs_open_fraction")?;
    for s in curve {
        let gcs = s.gcs_open_fraction.map(|f| f.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", s.epoch, s.mean_loss, s.lr, gcs)?;
    }
    out.flush()?;
    Ok(())
}
