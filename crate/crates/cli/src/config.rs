//! Flat `key = value` run files: model keys go to the model parser, training
//! keys are collected here so one file can describe a whole run.

use lrx::model::ModelConfig;
use lrx::trainer::{LrDecay, TrainConfig};
use lrx::{Error, Result};

pub const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "lr_initial",
    "lr_final",
    "decay",
    "batch_size",
    "chunk_frames",
    "weight_decay",
    "ams_scale",
    "ams_margin",
    "alpha",
    "temperature",
    "kd_target",
    "early_stop",
];

#[derive(Debug, Default, Clone)]
pub struct TrainKeys {
    pub entries: Vec<(String, String)>,
}

impl TrainKeys {
    /// Applies every collected key to `tc`.
    pub fn apply(&self, tc: &mut TrainConfig) -> Result<()> {
        for (k, v) in &self.entries {
            let real = || v.parse::<f64>().map_err(|_| Error::Config(format!("{k}: expected a number, got {v:?}")));
            let int = || v.parse::<usize>().map_err(|_| Error::Config(format!("{k}: expected an integer, got {v:?}")));
            match k.as_str() {
                "epochs" => tc.epochs = int()?,
                "lr_initial" => tc.lr_initial = real()?,
                "lr_final" => tc.lr_final = real()?,
                "decay" => tc.decay = parse_decay(v)?,
                "batch_size" => tc.batch_size = int()?,
                "chunk_frames" => tc.chunk_frames = int()?,
                "weight_decay" => tc.weight_decay = real()?,
                "ams_scale" => tc.ams.scale = real()?,
                "ams_margin" => tc.ams.margin = real()?,
                "alpha" => tc.alpha = real()?,
                "temperature" => tc.temperature = real()?,
                "kd_target" => tc.kd_target = Some(v.parse()?),
                "early_stop" => {
                    tc.early_stop = match v.as_str() {
                        "true" | "1" => true,
                        "false" | "0" => false,
                        _ => return Err(Error::Config(format!("{k}: expected true or false, got {v:?}"))),
                    }
                }
                _ => unreachable!("filtered by TRAIN_KEYS"),
            }
        }
        Ok(())
    }
}

pub fn parse_decay(v: &str) -> Result<LrDecay> {
    match v {
        "exponential" => Ok(LrDecay::Exponential),
        "linear" => Ok(LrDecay::Linear),
        _ => Err(Error::Config(format!("unknown decay {v:?} (expected exponential or linear)"))),
    }
}

/// Splits a run file into the model config and the training keys.
pub fn parse_run_file(text: &str, default_speakers: Option<usize>) -> Result<(ModelConfig, TrainKeys)> {
    let mut model_text = String::new();
    let mut keys = TrainKeys::default();
    for line in text.lines() {
        let body = line.split('#').next().unwrap().trim();
        if let Some((k, v)) = body.split_once('=') {
            if TRAIN_KEYS.contains(&k.trim()) {
                keys.entries.push((k.trim().to_string(), v.trim().to_string()));
                continue;
            }
        }
        model_text.push_str(line);
        model_text.push('\n');
    }
    Ok((ModelConfig::parse(&model_text, default_speakers)?, keys))
}

pub fn load_run_file(path: &std::path::Path, default_speakers: Option<usize>) -> Result<(ModelConfig, TrainKeys)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_run_file(&text, default_speakers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lrx::trainer::TrainMode;

    #[test]
    fn split_and_apply() {
        let (cfg, keys) = parse_run_file("scale = 0.0625\nepochs = 3\nlr_initial = 0.02 # note\nnum_speakers = 4\n", None).unwrap();
        assert_eq!(cfg.num_speakers, 4);
        assert_eq!(cfg.tdnn[0].out_dim, 32);
        let mut tc = TrainConfig::new(TrainMode::BaselineAms);
        keys.apply(&mut tc).unwrap();
        assert_eq!(tc.epochs, 3);
        assert_eq!(tc.lr_initial, 0.02);
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = parse_run_file("epochz = 3\nwidth = 2\n", Some(4)).unwrap_err();
        assert_eq!(e.category(), "config");
        let msg = e.to_string();
        assert!(msg.contains("epochz") && msg.contains("width"), "{msg}");
    }
}
