//! Synthetic corpus generation and the JSON-lines manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synth::{synth_utterance, SpeakerProfile};
use super::Waveform;
use crate::error::{Error, Result};
use crate::seeds::{derive_seed, sha256_hex};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub duration_s: f64,
    /// Number of speakers held out for evaluation; the rest train.
    pub eval_speakers: usize,
    pub sample_rate: u32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_speakers: 20,
            utterances_per_speaker: 30,
            duration_s: 2.0,
            eval_speakers: 6,
            sample_rate: super::SAMPLE_RATE,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::InsufficientData(format!("corpus needs >= 2 speakers, got {}", self.n_speakers)));
        }
        if self.eval_speakers >= self.n_speakers {
            return Err(Error::Config("eval_speakers must leave at least one training speaker".into()));
        }
        if self.utterances_per_speaker < 1 || !(self.duration_s > 0.0) {
            return Err(Error::Config("corpus needs utterances of positive duration".into()));
        }
        Ok(())
    }
}

/// One manifest line. Mixtures list their `sources` and `ratio_db`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub utterance_id: String,
    pub speaker_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesis_seed: Option<u64>,
    pub duration_s: f64,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio_db: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusManifest {
    pub records: Vec<ManifestRecord>,
}

impl CorpusManifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1)))?;
            records.push(rec);
        }
        let m = CorpusManifest { records };
        m.check_unique()?;
        Ok(m)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.records {
            if !seen.insert(&r.utterance_id) {
                return Err(Error::Format(format!("duplicate utterance id {}", r.utterance_id)));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_jsonl().unwrap_or_default().as_bytes())
    }

    pub fn get(&self, id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.utterance_id == id)
    }

    /// Sorted speaker ids of a split.
    pub fn speakers(&self, split: Split) -> Vec<String> {
        let mut s: Vec<String> = self
            .records
            .iter()
            .filter(|r| r.split == split && r.speaker_ids.len() == 1)
            .map(|r| r.speaker_ids[0].clone())
            .collect();
        s.sort();
        s.dedup();
        s
    }

    /// Clean utterances of a split grouped by speaker, in manifest order.
    pub fn by_speaker(&self, split: Split) -> BTreeMap<String, Vec<String>> {
        let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.split == split && r.speaker_ids.len() == 1) {
            out.entry(r.speaker_ids[0].clone()).or_default().push(r.utterance_id.clone());
        }
        out
    }
}

/// A corpus held in memory: manifest, speakers and clean waveforms.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub seed: u64,
    pub manifest: CorpusManifest,
    pub profiles: Vec<SpeakerProfile>,
    pub waveforms: BTreeMap<String, Waveform>,
}

fn quantize(x: &mut [f32]) {
    for v in x.iter_mut() {
        *v = (v.clamp(-1.0, 1.0) * 32767.0).round() / 32767.0;
    }
}

fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &w.samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

fn read_wav(path: &Path) -> Result<(u32, Vec<f32>)> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format(format!("{}: expected mono 16-bit PCM", path.display())));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32767.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((spec.sample_rate, samples))
}

/// Synthesizes the full corpus in memory.
///
/// Speakers get ids `spk000..`; the last `eval_speakers` of them form the
/// evaluation split. Each utterance is seeded from `(seed, utterance_id)`.
/// Samples are quantized to 16 bits so that what is written to disk is
/// exactly what the in-memory corpus holds.
pub fn build_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let profiles = SpeakerProfile::random_set(cfg.n_speakers, seed);
    let n_train = cfg.n_speakers - cfg.eval_speakers;
    let mut records = Vec::new();
    let mut waveforms = BTreeMap::new();
    for (si, p) in profiles.iter().enumerate() {
        let split = if si < n_train { Split::Train } else { Split::Eval };
        for u in 0..cfg.utterances_per_speaker {
            let id = format!("{}-u{u:03}", p.speaker_id);
            let useed = derive_seed(seed, &id);
            let mut w = synth_utterance(p, cfg.duration_s, cfg.sample_rate, useed, &id)?;
            quantize(&mut w.samples);
            records.push(ManifestRecord {
                utterance_id: id.clone(),
                speaker_ids: vec![p.speaker_id.clone()],
                path: Some(format!("wav/{id}.wav")),
                synthesis_seed: Some(useed),
                duration_s: w.duration_s(),
                split,
            sources: Vec::new(),
                ratio_db: None,
            });
            waveforms.insert(id, w);
        }
    }
    Ok(Corpus {
        config: cfg.clone(),
        seed,
        manifest: CorpusManifest { records },
        profiles,
        waveforms,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusInfo {
    config: CorpusConfig,
    seed: u64,
    profiles: Vec<SpeakerProfile>,
}

impl Corpus {
    pub fn waveform(&self, id: &str) -> Result<&Waveform> {
        self.waveforms
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown utterance {id}")))
    }

    /// Writes `manifest.jsonl`, `speakers.json` and `wav/*.wav` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("wav"))?;
        for r in &self.manifest.records {
            if let Some(rel) = &r.path {
                write_wav(&dir.join(rel), self.waveform(&r.utterance_id)?)?;
            }
        }
        fs::write(dir.join("manifest.jsonl"), self.manifest.to_jsonl()?)?;
        let info = CorpusInfo {
            config: self.config.clone(),
            seed: self.seed,
            profiles: self.profiles.clone(),
        };
        let mut f = BufWriter::new(fs::File::create(dir.join("speakers.json"))?);
        serde_json::to_writer_pretty(&mut f, &info)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    /// Loads a corpus written by [`Corpus::write`]; every referenced wav must exist.
    pub fn load(dir: &Path) -> Result<Corpus> {
        let manifest_path = dir.join("manifest.jsonl");
        if !manifest_path.exists() {
            return Err(Error::MissingFile(manifest_path));
        }
        let mut text = String::new();
        for line in BufReader::new(fs::File::open(&manifest_path)?).lines() {
            text.push_str(&line?);
            text.push('\n');
        }
        let manifest = CorpusManifest::from_jsonl(&text)?;
        let info_path = dir.join("speakers.json");
        if !info_path.exists() {
            return Err(Error::MissingFile(info_path));
        }
        let info: CorpusInfo = serde_json::from_str(&fs::read_to_string(&info_path)?)?;
        let mut waveforms = BTreeMap::new();
        for r in &manifest.records {
            let Some(rel) = &r.path else { continue };
            let path = dir.join(rel);
            if !path.exists() {
                return Err(Error::MissingFile(path));
            }
            let (sample_rate, samples) = read_wav(&path)?;
            waveforms.insert(
                r.utterance_id.clone(),
                Waveform {
                    samples,
                    sample_rate,
                    utterance_id: r.utterance_id.clone(),
                    speaker_ids: r.speaker_ids.clone(),
                },
            );
        }
        Ok(Corpus {
            config: info.config,
            seed: info.seed,
            manifest,
            profiles: info.profiles,
            waveforms,
        })
    }
}
