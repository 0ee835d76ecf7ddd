//! Audio front end: 16 kHz PCM16 WAV ingestion, 40-band log mel filterbank
//! and sliding-window mean normalization.
//!
//! Framing is 400-sample (25 ms) windows with a 160-sample (10 ms) hop and no
//! padding, so an input of `len` samples yields `(len - 400) / 160 + 1`
//! frames. Each frame is Hann-windowed, zero-padded to a 512-point real FFT,
//! reduced to power, projected onto 40 triangular HTK-mel filters spanning
//! 20-7600 Hz and log-compressed with a floor of 1e-10.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{bail, Error, Result};
use crate::linalg::Matrix;

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME_LEN: usize = 400;
pub const FRAME_HOP: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const NUM_MELS: usize = 40;
pub const MEL_LOW_HZ: f64 = 20.0;
pub const MEL_HIGH_HZ: f64 = 7600.0;
pub const LOG_FLOOR: f64 = 1e-10;
pub const FRAME_SHIFT_S: f64 = 0.010;
/// 3 s at a 10 ms shift, centered: 150 frames either side.
pub const NORM_WINDOW: usize = 301;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.len() < FRAME_LEN {
            bail!(Ingest, "waveform has {} samples, at least {FRAME_LEN} required", samples.len());
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            bail!(Numerical, "non-finite sample at index {i}");
        }
        Ok(Waveform { samples })
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::Ingest(format!("{}: not a readable WAV file: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        bail!(Ingest, "{}: channels = {}, expected mono", path.display(), spec.channels);
    }
    if spec.sample_rate != SAMPLE_RATE {
        bail!(Ingest, "{}: sample rate = {} Hz, expected {SAMPLE_RATE} Hz", path.display(), spec.sample_rate);
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        bail!(
            Ingest,
            "{}: sample format = {:?}/{} bits, expected 16-bit PCM",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        );
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Ingest(format!("{}: truncated sample data: {e}", path.display())))?;
    Waveform::new(samples).map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_io = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Ingest(other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec).map_err(to_io)?;
    for &x in w.samples() {
        let q = (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(to_io)?;
    }
    writer.finalize().map_err(to_io)
}

/// T×40 log-mel frames at a 10 ms shift.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Matrix,
}

impl FeatureSequence {
    pub fn new(frames: Matrix) -> Result<Self> {
        if frames.cols() != NUM_MELS {
            bail!(Shape, "feature sequence has {} coefficients, expected {NUM_MELS}", frames.cols());
        }
        Ok(FeatureSequence { frames })
    }

    pub fn frames(&self) -> &Matrix {
        &self.frames
    }

    pub fn into_frames(self) -> Matrix {
        self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn frame_shift(&self) -> f64 {
        FRAME_SHIFT_S
    }
}

pub fn num_frames(num_samples: usize) -> usize {
    if num_samples < FRAME_LEN {
        0
    } else {
        (num_samples - FRAME_LEN) / FRAME_HOP + 1
    }
}

pub(crate) fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

pub struct MelFrontend {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// NUM_MELS × (FFT_SIZE/2 + 1)
    filters: Matrix,
}

impl MelFrontend {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        let window = (0..FRAME_LEN)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / FRAME_LEN as f64).cos())
            .collect();
        MelFrontend { fft, window, filters: mel_filters() }
    }

    pub fn filters(&self) -> &Matrix {
        &self.filters
    }

    pub fn extract(&self, w: &Waveform) -> FeatureSequence {
        let x = w.samples();
        let t = num_frames(x.len());
        let bins = FFT_SIZE / 2 + 1;
        let mut out = Matrix::zeros(t, NUM_MELS);
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; bins];
        for f in 0..t {
            let frame = &x[f * FRAME_HOP..f * FRAME_HOP + FRAME_LEN];
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < FRAME_LEN { Complex::new(frame[i] * self.window[i], 0.0) } else { Complex::new(0.0, 0.0) };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, b) in power.iter_mut().zip(&buf) {
                *p = b.norm_sqr();
            }
            let row = out.row_mut(f);
            for (m, r) in row.iter_mut().enumerate() {
                let e: f64 = self.filters.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
                *r = e.max(LOG_FLOOR).ln();
            }
        }
        FeatureSequence { frames: out }
    }
}

impl Default for MelFrontend {
    fn default() -> Self {
        Self::new()
    }
}

/// Triangular filters on the HTK mel scale, weights evaluated at each FFT
/// bin's exact frequency.
fn mel_filters() -> Matrix {
    let bins = FFT_SIZE / 2 + 1;
    let lo = hz_to_mel(MEL_LOW_HZ);
    let hi = hz_to_mel(MEL_HIGH_HZ);
    let edges: Vec<f64> =
        (0..NUM_MELS + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (NUM_MELS + 1) as f64)).collect();
    let mut fb = Matrix::zeros(NUM_MELS, bins);
    for m in 0..NUM_MELS {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..bins {
            let f = b as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64;
            let w = ((f - l) / (c - l)).min((r - f) / (r - c));
            if w > 0.0 {
                fb.set(m, b, w);
            }
        }
    }
    fb
}

/// Center frequency (Hz) of each mel filter.
pub fn mel_centers() -> Vec<f64> {
    let lo = hz_to_mel(MEL_LOW_HZ);
    let hi = hz_to_mel(MEL_HIGH_HZ);
    (1..=NUM_MELS).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (NUM_MELS + 1) as f64)).collect()
}

fn shared_frontend() -> &'static MelFrontend {
    static FRONTEND: OnceLock<MelFrontend> = OnceLock::new();
    FRONTEND.get_or_init(MelFrontend::new)
}

pub fn melbank(w: &Waveform) -> FeatureSequence {
    shared_frontend().extract(w)
}

/// Subtracts, per coefficient, the mean of a centered 301-frame window that
/// shrinks at the sequence edges. Sequences shorter than one window have
/// their global mean removed.
pub fn mean_normalize(f: &FeatureSequence) -> FeatureSequence {
    let x = f.frames();
    let (t, d) = x.shape();
    let mut out = x.clone();
    if t == 0 {
        return FeatureSequence { frames: out };
    }
    if t < NORM_WINDOW {
        let mean = column_mean(x, 0, t);
        for r in 0..t {
            for (v, m) in out.row_mut(r).iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        return FeatureSequence { frames: out };
    }
    let half = NORM_WINDOW / 2;
    // Running sums drift, so recompute each window directly from its frames.
    let mut sums = vec![0.0; d];
    for r in 0..t {
        let lo = r.saturating_sub(half);
        let hi = (r + half + 1).min(t);
        sums.iter_mut().for_each(|s| *s = 0.0);
        for rr in lo..hi {
            for (s, v) in sums.iter_mut().zip(x.row(rr)) {
                *s += v;
            }
        }
        let n = (hi - lo) as f64;
        for (v, s) in out.row_mut(r).iter_mut().zip(&sums) {
            *v -= s / n;
        }
    }
    FeatureSequence { frames: out }
}

fn column_mean(x: &Matrix, lo: usize, hi: usize) -> Vec<f64> {
    let mut mean = vec![0.0; x.cols()];
    for r in lo..hi {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    let n = (hi - lo) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Waveform → normalized features, the pipeline every model consumes.
pub fn extract(w: &Waveform) -> FeatureSequence {
    mean_normalize(&melbank(w))
}

const FEATURE_MAGIC: &[u8; 4] = b"LRXF";

/// Binary dump: `"LRXF"`, u32 T, u32 40, then T×40 little-endian f64.
pub fn write_features(path: impl AsRef<Path>, f: &FeatureSequence) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&(f.num_frames() as u32).to_le_bytes())?;
    w.write_all(&(NUM_MELS as u32).to_le_bytes())?;
    for v in f.frames().as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        bail!(Corrupt, "feature file missing LRXF header");
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if d != NUM_MELS {
        bail!(Corrupt, "feature file has {d} coefficients, expected {NUM_MELS}");
    }
    let body = &bytes[12..];
    if body.len() != t * d * 8 {
        bail!(Corrupt, "feature file body is {} bytes, expected {}", body.len(), t * d * 8);
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    FeatureSequence::new(Matrix::from_vec(t, d, data)?)
}
