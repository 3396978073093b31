//! Synthetic speaker corpus, mixture simulation, noise augmentation and the
//! log-mel front-end shared by teacher and student.

mod corpus;
mod features;
mod mix;
mod synth;

pub use corpus::{build_corpus, Corpus, CorpusConfig, CorpusManifest, ManifestRecord, Split};
pub use features::{hz_to_mel, mel_filterbank, mel_to_hz, FeatureMatrix, FrontendConfig, MelFrontend, LOG_FLOOR};
pub use mix::{add_noise, mix_signals, power, speed_perturb, Augmentation, Mixture, NoiseKind};
pub use synth::{synth_utterance, Formant, SpeakerProfile};

/// Default corpus sample rate in Hz.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mono time-domain signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub utterance_id: String,
    /// One id for clean utterances, one per source for mixtures.
    pub speaker_ids: Vec<String>,
}

impl Waveform {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
