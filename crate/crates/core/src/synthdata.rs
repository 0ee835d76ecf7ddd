//! Deterministic synthetic speakers, utterances and augmentation.
//!
//! Utterances are sequences of "phones" drawn from a fixed inventory shared
//! by every speaker. A speaker realizes each phone through their own
//! frequency warp, a formant template whose weight depends on the phone, and
//! their own pitch, so identity survives per-utterance mean normalization.
//! Synthesis is short-time inverse FFT with random phase and 50% overlap-add.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{bail, Result};
use crate::eval::{Trial, TrialList};
use crate::features::{hz_to_mel, write_wav, Waveform, MEL_HIGH_HZ, MEL_LOW_HZ, NUM_MELS, SAMPLE_RATE};
use crate::parallel;
use crate::rng::{substream, Rng};

const SYNTH_FFT: usize = 512;
const SYNTH_HOP: usize = SYNTH_FFT / 2;
const NUM_PHONES: usize = 10;
const VOICED_PHONES: usize = 7;
const TARGET_RMS: f64 = 0.05;
const PEAK_LIMIT: f64 = 0.99;
pub const DEFAULT_MIN_TEMPLATE_DISTANCE: f64 = 1.0;
pub const BABBLE_TALKERS: usize = 4;

/// Position of `hz` on a mel axis normalized to [0, 1] over the filterbank
/// range.
fn mel_pos(hz: f64) -> f64 {
    let (lo, hi) = (hz_to_mel(MEL_LOW_HZ), hz_to_mel(MEL_HIGH_HZ));
    (hz_to_mel(hz.max(0.0)) - lo) / (hi - lo)
}

#[derive(Debug, Clone, PartialEq)]
struct Bump {
    center: f64,
    width: f64,
    gain: f64,
}

fn bumps_at(bumps: &[Bump], x: f64) -> f64 {
    bumps.iter().map(|b| b.gain * (-(x - b.center).powi(2) / (2.0 * b.width * b.width)).exp()).sum()
}

fn random_bumps(rng: &mut Rng, count: usize, gain: (f64, f64), width: (f64, f64)) -> Vec<Bump> {
    (0..count)
        .map(|_| Bump {
            center: rng.random_range(0.05..0.95),
            width: rng.random_range(width.0..width.1),
            gain: rng.random_range(gain.0..gain.1),
        })
        .collect()
}

/// The phone inventory: log-amplitude envelopes on the normalized mel axis,
/// identical for every corpus.
fn phone_inventory() -> &'static Vec<Vec<Bump>> {
    static PHONES: std::sync::OnceLock<Vec<Vec<Bump>>> = std::sync::OnceLock::new();
    PHONES.get_or_init(|| {
        (0..NUM_PHONES)
            .map(|p| {
                let mut rng = substream(0, "phone", &[p as u64]);
                if p < VOICED_PHONES {
                    random_bumps(&mut rng, 3, (1.0, 2.5), (0.03, 0.08))
                } else {
                    // fricatives: broad high-frequency energy
                    let mut b = random_bumps(&mut rng, 2, (0.5, 1.5), (0.08, 0.2));
                    b.iter_mut().for_each(|x| x.center = 0.55 + 0.4 * x.center);
                    b
                }
            })
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpeaker {
    pub id: usize,
    /// Formant template sampled at the 40 filterbank positions (positive).
    pub template: Vec<f64>,
    /// Vocal-tract warp applied to the phone envelopes.
    pub warp: f64,
    pub f0_hz: f64,
    /// Relative standard deviation of per-segment pitch.
    pub jitter: f64,
    formants: Vec<Bump>,
}

impl SyntheticSpeaker {
    fn draw(rng: &mut Rng, id: usize) -> Self {
        let formants = random_bumps(rng, 4, (-1.2, 1.2), (0.04, 0.12));
        let template = (0..NUM_MELS).map(|b| bumps_at(&formants, (b as f64 + 0.5) / NUM_MELS as f64).exp()).collect();
        SyntheticSpeaker {
            id,
            template,
            warp: rng.random_range(0.82..1.18),
            f0_hz: (rng.random_range(90f64.ln()..260f64.ln())).exp(),
            jitter: rng.random_range(0.01..0.05),
            formants,
        }
    }

    /// Log amplitude of phone `p` at frequency `hz`.
    fn log_envelope(&self, p: usize, hz: f64) -> f64 {
        let x = mel_pos(hz);
        let weight = if p < VOICED_PHONES { 1.0 } else { 0.35 };
        bumps_at(&phone_inventory()[p], x * self.warp) + weight * bumps_at(&self.formants, x) - 2.5 * x
    }
}

fn template_distance(a: &SyntheticSpeaker, b: &SyntheticSpeaker) -> f64 {
    a.template.iter().zip(&b.template).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Draws `n` speakers whose templates are pairwise at least `min_distance`
/// apart (rejection sampling, 1000 attempts per speaker).
pub fn gen_speakers(n: usize, seed: u64, min_distance: f64) -> Result<Vec<SyntheticSpeaker>> {
    let mut out: Vec<SyntheticSpeaker> = Vec::with_capacity(n);
    for id in 0..n {
        let mut accepted = None;
        for attempt in 0..1000u64 {
            let cand = SyntheticSpeaker::draw(&mut substream(seed, "speaker", &[id as u64, attempt]), id);
            if out.iter().all(|s| template_distance(s, &cand) >= min_distance) {
                accepted = Some(cand);
                break;
            }
        }
        match accepted {
            Some(s) => out.push(s),
            None => bail!(Config, "could not place speaker {id} at template distance {min_distance} from the others"),
        }
    }
    Ok(out)
}

struct Synth {
    inverse: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

fn synth() -> &'static Synth {
    static S: std::sync::OnceLock<Synth> = std::sync::OnceLock::new();
    S.get_or_init(|| Synth {
        inverse: FftPlanner::new().plan_fft_inverse(SYNTH_FFT),
        window: (0..SYNTH_FFT)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / SYNTH_FFT as f64).cos())
            .collect(),
    })
}

/// Renders `num_samples` of speech-like signal for `speaker` from `rng`.
pub fn synthesize(speaker: &SyntheticSpeaker, num_samples: usize, rng: &mut Rng) -> Vec<f64> {
    let s = synth();
    let frames = num_samples.div_ceil(SYNTH_HOP) + 1;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let bin_hz = SAMPLE_RATE as f64 / SYNTH_FFT as f64;
    let mut out = vec![0.0; (frames + 1) * SYNTH_HOP];
    let mut buf = vec![Complex::new(0.0, 0.0); SYNTH_FFT];
    let mut scratch = vec![Complex::new(0.0, 0.0); s.inverse.get_inplace_scratch_len()];
    let drift = rng.random_range(-0.1..0.1);

    let mut frame = 0;
    while frame < frames {
        // one segment: 5-12 frames (80-190 ms)
        let len = rng.random_range(5..=12).min(frames - frame);
        let silent = rng.random_bool(0.1);
        let phone = rng.random_range(0..NUM_PHONES);
        let gain = rng.random_range(-0.7..0.7f64).exp();
        let progress = frame as f64 / frames as f64;
        let f0 = speaker.f0_hz * (1.0 + drift * (progress - 0.5)) * (1.0 + speaker.jitter * normal.sample(rng));
        let envelope: Vec<f64> = (0..=SYNTH_FFT / 2)
            .map(|k| {
                let hz = k as f64 * bin_hz;
                if silent || hz < MEL_LOW_HZ {
                    (-6.0f64).exp()
                } else {
                    let source = if phone < VOICED_PHONES {
                        let h = (hz / f0).round().max(1.0);
                        0.05 + (-(hz - h * f0).powi(2) / (2.0 * 25.0 * 25.0)).exp()
                    } else {
                        1.0
                    };
                    gain * speaker.log_envelope(phone, hz).exp() * source
                }
            })
            .collect();
        for _ in 0..len {
            buf[0] = Complex::new(0.0, 0.0);
            for k in 1..SYNTH_FFT / 2 {
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let c = Complex::from_polar(envelope[k], phase);
                buf[k] = c;
                buf[SYNTH_FFT - k] = c.conj();
            }
            buf[SYNTH_FFT / 2] = Complex::new(0.0, 0.0);
            s.inverse.process_with_scratch(&mut buf, &mut scratch);
            let base = frame * SYNTH_HOP;
            for (n, b) in buf.iter().enumerate() {
                out[base + n] += b.re * s.window[n];
            }
            frame += 1;
        }
    }
    let mut y: Vec<f64> = out[SYNTH_HOP..SYNTH_HOP + num_samples].to_vec();
    let r = rms(&y);
    if r > 0.0 {
        let mut g = TARGET_RMS / r;
        let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak * g > PEAK_LIMIT {
            g = PEAK_LIMIT / peak;
        }
        y.iter_mut().for_each(|v| *v *= g);
    }
    y
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    pub wave: Waveform,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub speakers: Vec<SyntheticSpeaker>,
    pub utterances: Vec<Utterance>,
    pub seed: u64,
}

pub fn speaker_name(id: usize) -> String {
    format!("spk{id:03}")
}

pub fn utterance_name(speaker: usize, index: usize) -> String {
    format!("{}_u{index:03}", speaker_name(speaker))
}

/// `num_speakers × utts_per_speaker` utterances of `duration_s` seconds,
/// ordered by speaker then index. Each utterance draws from its own stream,
/// so generation runs in parallel without affecting the result.
pub fn gen_corpus(num_speakers: usize, utts_per_speaker: usize, duration_s: f64, seed: u64) -> Result<Corpus> {
    if num_speakers < 2 {
        bail!(Config, "need at least 2 speakers, got {num_speakers}");
    }
    if utts_per_speaker == 0 {
        bail!(Config, "need at least 1 utterance per speaker");
    }
    let num_samples = (duration_s * SAMPLE_RATE as f64).round();
    if !(num_samples >= 400.0) {
        bail!(Config, "duration {duration_s} s is shorter than one analysis frame");
    }
    let num_samples = num_samples as usize;
    let speakers = gen_speakers(num_speakers, seed, DEFAULT_MIN_TEMPLATE_DISTANCE)?;
    let total = num_speakers * utts_per_speaker;
    let waves = parallel::map_indexed(total, parallel::threads(), |i| {
        let (spk, u) = (i / utts_per_speaker, i % utts_per_speaker);
        let mut rng = substream(seed, "utterance", &[spk as u64, u as u64]);
        Waveform::new(synthesize(&speakers[spk], num_samples, &mut rng))
    });
    let mut utterances = Vec::with_capacity(total);
    for (i, w) in waves.into_iter().enumerate() {
        let (spk, u) = (i / utts_per_speaker, i % utts_per_speaker);
        utterances.push(Utterance { id: utterance_name(spk, u), speaker: spk, wave: w? });
    }
    Ok(Corpus { speakers, utterances, seed })
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseKind {
    White,
    /// Sum of these speakers talking at once.
    Babble { speakers: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSpec {
    /// In [0, 18]; `+∞` disables noise.
    pub snr_db: f64,
    pub rir: Vec<f64>,
    pub rt60_s: f64,
    pub noise: NoiseKind,
    pub noise_seed: u64,
}

pub const SNR_RANGE_DB: (f64, f64) = (0.0, 18.0);
pub const RT60_RANGE_S: (f64, f64) = (0.1, 0.6);

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.snr_db == f64::INFINITY || (SNR_RANGE_DB.0..=SNR_RANGE_DB.1).contains(&self.snr_db)) {
            bail!(Config, "snr {} dB outside [{}, {}]", self.snr_db, SNR_RANGE_DB.0, SNR_RANGE_DB.1);
        }
        if self.rir.is_empty() || self.rir.iter().any(|v| !v.is_finite()) {
            bail!(Config, "impulse response must be non-empty and finite");
        }
        Ok(())
    }

    /// A delta impulse response with the given noise; `snr_db = ∞` makes
    /// augmentation the identity.
    pub fn dry(snr_db: f64, noise: NoiseKind, noise_seed: u64) -> Self {
        AugmentSpec { snr_db, rir: vec![1.0], rt60_s: 0.0, noise, noise_seed }
    }
}

/// Exponentially decaying Gaussian tail after a unit direct path; the
/// envelope falls 60 dB over `rt60_s`.
pub fn synthetic_rir(rt60_s: f64, rng: &mut Rng) -> Vec<f64> {
    let len = ((rt60_s * SAMPLE_RATE as f64).round() as usize).max(1);
    let normal = Normal::new(0.0, 0.1).expect("valid normal");
    // amplitude falls by 10^-3 (60 dB) over the response
    let decay = 1000f64.ln() / len as f64;
    let mut h: Vec<f64> = (0..len).map(|n| normal.sample(rng) * (-decay * n as f64).exp()).collect();
    h[0] = 1.0;
    h
}

/// Random spec: SNR uniform in [0, 18] dB, RT60 uniform in [0.1, 0.6] s, and
/// white or babble noise with equal probability (white when fewer than
/// five speakers exist).
pub fn draw_spec(rng: &mut Rng, speaker: usize, num_speakers: usize) -> AugmentSpec {
    let snr_db = rng.random_range(SNR_RANGE_DB.0..=SNR_RANGE_DB.1);
    let rt60_s = rng.random_range(RT60_RANGE_S.0..=RT60_RANGE_S.1);
    let rir = synthetic_rir(rt60_s, rng);
    let babble = num_speakers > BABBLE_TALKERS && rng.random_bool(0.5);
    let noise = if babble {
        let mut others: Vec<usize> = (0..num_speakers).filter(|&s| s != speaker).collect();
        let mut picked = Vec::with_capacity(BABBLE_TALKERS);
        for _ in 0..BABBLE_TALKERS {
            picked.push(others.swap_remove(rng.random_range(0..others.len())));
        }
        NoiseKind::Babble { speakers: picked }
    } else {
        NoiseKind::White
    };
    AugmentSpec { snr_db, rir, rt60_s, noise, noise_seed: rng.random() }
}

/// Result of [`augment`], with the two mixed components kept for
/// measurement.
#[derive(Debug, Clone)]
pub struct Augmented {
    pub wave: Waveform,
    /// Reverberant speech as mixed.
    pub speech: Vec<f64>,
    /// Noise as mixed.
    pub noise: Vec<f64>,
    /// The input had zero energy; the output is noise at unit RMS before
    /// peak limiting.
    pub silent_input: bool,
}

/// `h * x` truncated to `x.len()` samples; direct form for short responses,
/// FFT otherwise.
pub fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = x.len();
    if h.len() <= 64 {
        let mut y = vec![0.0; n];
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, hk) in h.iter().enumerate().take(i + 1) {
                acc += hk * x[i - k];
            }
            *yi = acc;
        }
        return y;
    }
    let size = (n + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let pad = |v: &[f64]| {
        let mut b: Vec<Complex<f64>> = v.iter().map(|&r| Complex::new(r, 0.0)).collect();
        b.resize(size, Complex::new(0.0, 0.0));
        b
    };
    let (mut a, mut b) = (pad(x), pad(h));
    fwd.process(&mut a);
    fwd.process(&mut b);
    a.iter_mut().zip(&b).for_each(|(p, q)| *p *= q);
    inv.process(&mut a);
    a[..n].iter().map(|c| c.re / size as f64).collect()
}

/// Reverberates `w`, restores its RMS, and adds noise at exactly
/// `spec.snr_db`. If the mixture would leave [−1, 1] both components are
/// scaled down together, which keeps the SNR intact.
pub fn augment(w: &Waveform, spec: &AugmentSpec, bank: &[SyntheticSpeaker]) -> Result<Augmented> {
    spec.validate()?;
    let x = w.samples();
    let n = x.len();
    let r0 = rms(x);
    let silent_input = r0 == 0.0;
    let mut speech = convolve(x, &spec.rir);
    let r1 = rms(&speech);
    if r1 > 0.0 && r1 != r0 {
        let g = r0 / r1;
        speech.iter_mut().for_each(|v| *v *= g);
    }

    let mut noise = vec![0.0; n];
    if spec.snr_db.is_finite() || silent_input {
        let raw = match &spec.noise {
            NoiseKind::White => {
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                let mut rng = substream(spec.noise_seed, "white", &[]);
                (0..n).map(|_| normal.sample(&mut rng)).collect::<Vec<_>>()
            }
            NoiseKind::Babble { speakers } => {
                let mut sum = vec![0.0; n];
                for (j, &s) in speakers.iter().enumerate() {
                    let Some(spk) = bank.get(s) else {
                        bail!(Config, "babble speaker {s} not in the speaker bank of {}", bank.len());
                    };
                    let talk = synthesize(spk, n, &mut substream(spec.noise_seed, "babble", &[j as u64]));
                    sum.iter_mut().zip(&talk).for_each(|(a, b)| *a += b);
                }
                sum
            }
        };
        let rn = rms(&raw);
        if rn == 0.0 {
            bail!(Numerical, "generated noise has zero energy");
        }
        let target = if silent_input { 1.0 } else { r0 / 10f64.powf(spec.snr_db / 20.0) };
        noise = raw.iter().map(|v| v * target / rn).collect();
    }

    let peak = speech.iter().zip(&noise).fold(0.0f64, |m, (s, v)| m.max((s + v).abs()));
    if peak > 1.0 {
        let g = 1.0 / peak;
        speech.iter_mut().for_each(|v| *v *= g);
        noise.iter_mut().for_each(|v| *v *= g);
    }
    let mixed: Vec<f64> = speech.iter().zip(&noise).map(|(s, v)| (s + v).clamp(-1.0, 1.0)).collect();
    Ok(Augmented { wave: Waveform::new(mixed)?, speech, noise, silent_input })
}

/// `10·log10(P_speech / P_noise)`.
pub fn measured_snr_db(speech: &[f64], noise: &[f64]) -> f64 {
    20.0 * (rms(speech) / rms(noise)).log10()
}

/// The corpus plus three augmented copies of every utterance (ids suffixed
/// `_a1`.. `_a3`); each copy keeps its speaker label. Specs are keyed by
/// `(seed, utterance index, copy)`.
pub fn expand_4x(corpus: &Corpus, seed: u64) -> Result<Corpus> {
    let n = corpus.utterances.len();
    let copies = parallel::map_indexed(n * 3, parallel::threads(), |j| {
        let (i, c) = (j / 3, j % 3);
        let u = &corpus.utterances[i];
        let spec = augment_spec_for(seed, i, c, u.speaker, corpus.speakers.len());
        augment(&u.wave, &spec, &corpus.speakers).map(|a| Utterance {
            id: format!("{}_a{}", u.id, c + 1),
            speaker: u.speaker,
            wave: a.wave,
        })
    });
    let mut copies = copies.into_iter();
    let mut utterances = Vec::with_capacity(4 * n);
    for u in &corpus.utterances {
        utterances.push(u.clone());
        for _ in 0..3 {
            utterances.push(copies.next().expect("three copies per utterance")?);
        }
    }
    Ok(Corpus { speakers: corpus.speakers.clone(), utterances, seed: corpus.seed })
}

pub fn augment_spec_for(seed: u64, utterance: usize, copy: usize, speaker: usize, num_speakers: usize) -> AugmentSpec {
    draw_spec(&mut substream(seed, "augment", &[utterance as u64, copy as u64]), speaker, num_speakers)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub speaker_id: String,
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
}

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Writes `wav/<utt_id>.wav` for every utterance plus `manifest.txt` with
/// lines `<utt_id> <speaker_id> <path>`.
pub fn write_corpus(dir: impl AsRef<Path>, corpus: &Corpus) -> Result<Vec<ManifestEntry>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("wav"))?;
    let mut entries = Vec::with_capacity(corpus.utterances.len());
    for u in &corpus.utterances {
        let rel = PathBuf::from("wav").join(format!("{}.wav", u.id));
        write_wav(dir.join(&rel), &u.wave)?;
        entries.push(ManifestEntry { utt_id: u.id.clone(), speaker_id: speaker_name(u.speaker), path: rel });
    }
    write_manifest(dir.join(MANIFEST_NAME), &entries)?;
    Ok(entries)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        writeln!(out, "{} {} {}", e.utt_id, e.speaker_id, e.path.display())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            bail!(Ingest, "manifest line {}: expected `<utt_id> <speaker_id> <path>`", n + 1);
        }
        out.push(ManifestEntry { utt_id: f[0].into(), speaker_id: f[1].into(), path: f[2].into() });
    }
    Ok(out)
}

/// Random verification trials over `(utt_id, speaker)` pairs: `targets`
/// same-speaker and `nontargets` different-speaker pairs, never pairing an
/// utterance with itself.
pub fn make_trials(utts: &[(String, String)], targets: usize, nontargets: usize, seed: u64) -> Result<TrialList> {
    let mut rng = substream(seed, "trials", &[]);
    let n = utts.len();
    let has_target = (0..n).any(|i| (0..n).any(|j| i != j && utts[i].1 == utts[j].1));
    let has_non = (0..n).any(|i| (0..n).any(|j| utts[i].1 != utts[j].1));
    if (targets > 0 && !has_target) || (nontargets > 0 && !has_non) {
        bail!(Config, "utterance set cannot produce the requested trial types");
    }
    let mut trials = Vec::with_capacity(targets + nontargets);
    for want_target in std::iter::repeat_n(true, targets).chain(std::iter::repeat_n(false, nontargets)) {
        loop {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
            if i != j && (utts[i].1 == utts[j].1) == want_target {
                trials.push(Trial { enroll: utts[i].0.clone(), test: utts[j].0.clone(), target: want_target });
                break;
            }
        }
    }
    Ok(TrialList { trials })
}
