//! Low-rank compression of trained models by truncated SVD, spectrum
//! reports and fine-tuning of the factorized result.

use std::io::Write as _;
use std::path::Path;

use crate::error::{bail, Result};
use crate::linalg::{svd, truncate};
use crate::model::{layer_name, LayerWeights, ModelConfig, WeightSet, NUM_TDNN};
use crate::parallel;
use crate::trainer::{train, Example, TrainConfig, TrainMode, TrainReport};

/// Rank request for one factorizable layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankSpec {
    /// Fraction of the layer's per-frame input width.
    Ratio(f64),
    Absolute(usize),
    /// `min(c·n, m)`: no truncation.
    Full,
}

impl RankSpec {
    pub fn resolve(self, config: &ModelConfig, layer: usize) -> Result<usize> {
        let spec = &config.tdnn[layer];
        let max = spec.max_rank();
        let k = match self {
            RankSpec::Ratio(r) => {
                if !(r > 0.0 && r <= 1.0) {
                    bail!(Config, "{}: rank ratio {r} outside (0, 1]", layer_name(layer));
                }
                (r * spec.in_dim as f64).round() as usize
            }
            RankSpec::Absolute(k) => k,
            RankSpec::Full => max,
        };
        if k == 0 || k > max {
            bail!(Config, "{}: rank {k} outside [1, {max}]", layer_name(layer));
        }
        Ok(k)
    }
}

/// Parses `l2=0.5,l3=256,l4=full,...`. Values containing `.` are ratios of
/// the input width, other numbers absolute ranks. Omitted layers stay full
/// rank.
pub fn parse_ranks(text: &str) -> Result<[RankSpec; 4]> {
    let mut out = [RankSpec::Full; 4];
    let mut seen = [false; 4];
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let Some((key, value)) = item.split_once('=') else {
            bail!(Config, "rank entry '{item}' is not of the form lN=value");
        };
        let idx = match key.trim() {
            "l2" => 0,
            "l3" => 1,
            "l4" => 2,
            "l5" => 3,
            other => bail!(Config, "unknown rank key '{other}' (expected l2, l3, l4 or l5)"),
        };
        if seen[idx] {
            bail!(Config, "rank for {} given twice", key.trim());
        }
        seen[idx] = true;
        let value = value.trim();
        out[idx] = if value == "full" {
            RankSpec::Full
        } else if value.contains('.') {
            RankSpec::Ratio(value.parse().map_err(|_| crate::Error::Config(format!("bad rank ratio '{value}'")))?)
        } else {
            RankSpec::Absolute(value.parse().map_err(|_| crate::Error::Config(format!("bad rank '{value}'")))?)
        };
    }
    Ok(out)
}

pub fn resolve_ranks(config: &ModelConfig, specs: &[RankSpec; 4]) -> Result<[usize; 4]> {
    let mut ks = [0; 4];
    for (i, s) in specs.iter().enumerate() {
        ks[i] = s.resolve(config, i + 1)?;
    }
    Ok(ks)
}

/// Replaces each of layers 2–5 by the rank-`k` truncation of its SVD
/// (`W_a = U_k·Σ_k`, `W_b = V_kᵀ`). Layer 1, Segment and Output are copied.
pub fn factorize_model(config: &ModelConfig, weights: &WeightSet, ranks: &[usize; 4]) -> Result<(ModelConfig, WeightSet)> {
    config.validate()?;
    weights.check_shapes(config)?;
    if config.is_low_rank() {
        bail!(Config, "model is already factorized");
    }
    let mut lr_config = config.clone();
    for (i, &k) in ranks.iter().enumerate() {
        RankSpec::Absolute(k).resolve(config, i + 1)?;
        lr_config.tdnn[i + 1].rank = Some(k);
    }
    lr_config.validate()?;
    let factors = parallel::map_indexed(NUM_TDNN - 1, parallel::threads(), |i| {
        let LayerWeights::Full(w) = &weights.tdnn[i + 1] else { unreachable!("full-rank source") };
        svd(w).and_then(|s| truncate(&s, ranks[i]))
    });
    let mut tdnn = vec![weights.tdnn[0].clone()];
    for f in factors {
        let (a, b) = f?;
        tdnn.push(LayerWeights::LowRank { a, b });
    }
    let out = WeightSet { tdnn, segment: weights.segment.clone(), output: weights.output.clone() };
    out.check_shapes(&lr_config)?;
    Ok((lr_config, out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpectrum {
    pub layer: String,
    /// Descending.
    pub sigma: Vec<f64>,
    /// Running fraction of `Σσ²`.
    pub cumulative_energy: Vec<f64>,
}

/// Singular values of the (effective) weight matrix of layers 2–5.
pub fn singular_spectrum(config: &ModelConfig, weights: &WeightSet) -> Result<Vec<LayerSpectrum>> {
    weights.check_shapes(config)?;
    let res = parallel::map_indexed(NUM_TDNN - 1, parallel::threads(), |i| svd(&weights.tdnn[i + 1].effective()));
    res.into_iter()
        .enumerate()
        .map(|(i, s)| {
            let sigma = s?.sigma;
            let total: f64 = sigma.iter().map(|x| x * x).sum();
            let mut acc = 0.0;
            let cumulative_energy = sigma
                .iter()
                .map(|x| {
                    acc += x * x;
                    if total > 0.0 {
                        acc / total
                    } else {
                        0.0
                    }
                })
                .collect();
            Ok(LayerSpectrum { layer: layer_name(i + 1), sigma, cumulative_energy })
        })
        .collect()
}

/// CSV with header `layer_name,index,sigma,cumulative_energy_fraction`;
/// indices start at 1.
pub fn write_spectrum_csv(path: impl AsRef<Path>, spectra: &[LayerSpectrum]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "layer_name,index,sigma,cumulative_energy_fraction")?;
    for s in spectra {
        for (i, (sig, cum)) in s.sigma.iter().zip(&s.cumulative_energy).enumerate() {
            writeln!(out, "{},{},{},{}", s.layer, i + 1, sig, cum)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Fine-tunes both factors of a factorized model with the AMS objective.
/// `tc.mode` must be `finetune`.
pub fn svd_finetune(config: &ModelConfig, weights: WeightSet, corpus: &[Example], tc: &TrainConfig) -> Result<TrainReport> {
    if !config.is_low_rank() {
        bail!(Config, "fine-tuning expects a factorized model");
    }
    if tc.mode != TrainMode::Finetune {
        bail!(Config, "fine-tuning requires mode finetune, got {}", tc.mode);
    }
    train(config, weights, corpus, tc, None)
}
