//! Reading a generated data directory: manifest, WAVs and features.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use lrx::features::{extract, load_wav};
use lrx::linalg::Matrix;
use lrx::parallel;
use lrx::synthdata::{read_manifest, ManifestEntry, MANIFEST_NAME};
use lrx::trainer::Example;
use lrx::{Error, Result};

pub struct Dataset {
    pub entries: Vec<ManifestEntry>,
    pub speakers: Vec<String>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        if !path.exists() {
            return Err(Error::Ingest(format!("no {MANIFEST_NAME} in {}", dir.display())));
        }
        let mut entries = read_manifest(&path)?;
        for e in &mut entries {
            if e.path.is_relative() {
                e.path = dir.join(&e.path);
            }
        }
        let speakers: BTreeSet<String> = entries.iter().map(|e| e.speaker_id.clone()).collect();
        Ok(Dataset { entries, speakers: speakers.into_iter().collect() })
    }

    fn features_of(&self, picked: &[&ManifestEntry]) -> Result<Vec<Matrix>> {
        parallel::map_indexed(picked.len(), parallel::threads(), |i| {
            load_wav(&picked[i].path).map(|w| extract(&w).into_frames())
        })
        .into_iter()
        .collect()
    }

    /// Every utterance with its speaker index (speakers sorted by id).
    pub fn examples(&self) -> Result<Vec<Example>> {
        let index: HashMap<&str, usize> = self.speakers.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let all: Vec<&ManifestEntry> = self.entries.iter().collect();
        let feats = self.features_of(&all)?;
        Ok(all.iter().zip(feats).map(|(e, frames)| Example { label: index[e.speaker_id.as_str()], frames }).collect())
    }

    /// Features of the listed utterances; ids missing from the manifest are
    /// left out, so scoring reports them.
    pub fn features(&self, ids: &[String]) -> Result<HashMap<String, Matrix>> {
        let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
        let picked: Vec<&ManifestEntry> = self.entries.iter().filter(|e| wanted.contains(e.utt_id.as_str())).collect();
        let feats = self.features_of(&picked)?;
        Ok(picked.iter().map(|e| e.utt_id.clone()).zip(feats).collect())
    }
}
