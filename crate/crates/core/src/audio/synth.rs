//! Source-filter speech synthesis for synthetic speakers.
//!
//! A speaker is a fixed set of voice parameters: fundamental frequency,
//! five vocal-tract resonances, spectral tilt of the glottal source and a
//! breathiness level. An utterance is a random sequence of vowel-like
//! syllables; each vowel scales the speaker's first three resonances, so
//! formant *ratios* change with content while the upper resonances, the
//! vocal-tract scale, pitch register and voice quality stay put.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};
use crate::seeds::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Formant {
    pub freq_hz: f64,
    pub bandwidth_hz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    /// Mean fundamental frequency in Hz.
    pub f0_base: f64,
    /// Relative standard deviation of cycle-to-cycle pitch variation.
    pub f0_jitter: f64,
    /// F1..F5; vowels move F1..F3, F4 and F5 are fixed per speaker.
    pub formants: [Formant; 5],
    /// Harmonic amplitude slope in dB per octave (negative).
    pub spectral_tilt: f64,
    /// Share of aspiration noise in the excitation, in `[0, 1]`.
    pub breathiness: f64,
}

/// Relative F1/F2/F3 multipliers of the vowel inventory.
const VOWELS: [[f64; 3]; 7] = [
    [1.00, 1.00, 1.00],
    [0.55, 1.55, 1.12],
    [1.40, 0.80, 0.96],
    [0.62, 0.62, 0.94],
    [1.18, 1.28, 1.05],
    [0.80, 1.12, 1.02],
    [1.05, 0.70, 0.90],
];

const NEUTRAL_FORMANTS: [f64; 5] = [520.0, 1480.0, 2500.0, 3500.0, 4500.0];

/// Highest harmonic frequency generated by the glottal source.
const SOURCE_CUTOFF_HZ: f64 = 5500.0;

/// Peak amplitude of every synthesized utterance.
pub const PEAK: f64 = 0.5;

impl SpeakerProfile {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(70.0..=320.0).contains(&self.f0_base) {
            return Err(Error::InvalidArgument(format!("f0_base {} outside [70, 320] Hz", self.f0_base)));
        }
        if !(0.0..=1.0).contains(&self.breathiness) {
            return Err(Error::InvalidArgument(format!("breathiness {} outside [0, 1]", self.breathiness)));
        }
        if !(self.f0_jitter >= 0.0 && self.f0_jitter < 0.5) {
            return Err(Error::InvalidArgument(format!("f0_jitter {} outside [0, 0.5)", self.f0_jitter)));
        }
        let f = &self.formants;
        if !(f[0].freq_hz > 0.0 && f.windows(2).all(|w| w[0].freq_hz < w[1].freq_hz) && f[4].freq_hz < nyquist) {
            return Err(Error::InvalidArgument(format!(
                "formants must increase strictly below Nyquist: {:?}",
                f.iter().map(|x| x.freq_hz).collect::<Vec<_>>()
            )));
        }
        if f.iter().any(|x| !(x.bandwidth_hz > 0.0)) {
            return Err(Error::InvalidArgument("formant bandwidths must be positive".into()));
        }
        if !self.spectral_tilt.is_finite() {
            return Err(Error::InvalidArgument("spectral tilt must be finite".into()));
        }
        Ok(())
    }

    /// Draws a random speaker.
    pub fn random(speaker_id: &str, rng: &mut ChaCha8Rng) -> Self {
        let f0_base = (rng.gen_range(85f64.ln()..260f64.ln())).exp();
        let tract = rng.gen_range(0.85..1.2);
        let bw_ranges = [(50.0, 110.0), (70.0, 140.0), (100.0, 200.0), (150.0, 300.0), (200.0, 400.0)];
        let spread = [0.07, 0.07, 0.07, 0.08, 0.08];
        let mut formants = [Formant { freq_hz: 0.0, bandwidth_hz: 0.0 }; 5];
        for (i, f) in formants.iter_mut().enumerate() {
            f.freq_hz = NEUTRAL_FORMANTS[i] * tract * (1.0 + spread[i] * rng.gen_range(-1.0..1.0));
            f.bandwidth_hz = rng.gen_range(bw_ranges[i].0..bw_ranges[i].1);
        }
        for k in 1..5 {
            formants[k].freq_hz = formants[k].freq_hz.max(formants[k - 1].freq_hz + 200.0);
        }
        SpeakerProfile {
            speaker_id: speaker_id.to_string(),
            f0_base,
            f0_jitter: rng.gen_range(0.005..0.03),
            formants,
            spectral_tilt: rng.gen_range(-14.0..-6.0),
            breathiness: rng.gen_range(0.0..0.35),
        }
    }

    /// Coordinates in which speaker dissimilarity is measured when drawing
    /// a well-spread speaker set.
    fn voice_coords(&self) -> [f64; 8] {
        [
            self.f0_base.ln() / 0.15,
            self.formants[0].freq_hz.ln() / 0.08,
            self.formants[1].freq_hz.ln() / 0.08,
            self.formants[2].freq_hz.ln() / 0.08,
            self.formants[3].freq_hz.ln() / 0.08,
            self.formants[4].freq_hz.ln() / 0.08,
            self.spectral_tilt / 2.0,
            self.breathiness / 0.1,
        ]
    }

    /// Draws `n` speakers, each chosen as the farthest of several random
    /// candidates from the speakers drawn so far.
    pub fn random_set(n: usize, seed: u64) -> Vec<SpeakerProfile> {
        const CANDIDATES: usize = 24;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "speaker-profiles"));
        let mut out: Vec<SpeakerProfile> = Vec::with_capacity(n);
        for i in 0..n {
            let id = format!("spk{i:03}");
            let mut best: Option<(f64, SpeakerProfile)> = None;
            for _ in 0..CANDIDATES {
                let cand = SpeakerProfile::random(&id, &mut rng);
                let c = cand.voice_coords();
                let spread = out
                    .iter()
                    .map(|p| {
                        let q = p.voice_coords();
                        c.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min);
                if best.as_ref().map_or(true, |(s, _)| spread > *s) {
                    best = Some((spread, cand));
                }
            }
            out.push(best.expect("at least one candidate").1);
        }
        out
    }
}

/// Two-pole resonator with unity gain at DC.
#[derive(Default, Clone, Copy)]
struct Resonator {
    a: f64,
    b: f64,
    c: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn set(&mut self, freq: f64, bw: f64, sample_rate: f64) {
        let t = 1.0 / sample_rate;
        self.c = -(-2.0 * PI * bw * t).exp();
        self.b = 2.0 * (-PI * bw * t).exp() * (2.0 * PI * freq * t).cos();
        self.a = 1.0 - self.b - self.c;
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.a * x + self.b * self.y1 + self.c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

struct Segment {
    start: usize,
    end: usize,
    voiced: bool,
    vowel: usize,
    gain: f64,
    pitch_start: f64,
    pitch_end: f64,
}

/// The content plan of one utterance: syllable boundaries, vowels, gains
/// and pitch contour.
fn plan_segments(n: usize, sample_rate: f64, rng: &mut ChaCha8Rng) -> Vec<Segment> {
    let mut segs = Vec::new();
    let mut pos = 0;
    let mut pitch = rng.gen_range(-0.03..0.03);
    while pos < n {
        let pause = !segs.is_empty() && rng.gen_bool(0.12);
        let dur_s = if pause { rng.gen_range(0.03..0.09) } else { rng.gen_range(0.08..0.22) };
        let len = ((dur_s * sample_rate) as usize).max(1);
        let end = (pos + len).min(n);
        let next_pitch = (pitch + rng.gen_range(-0.03..0.03f64)).clamp(-0.06, 0.06);
        segs.push(Segment {
            start: pos,
            end,
            voiced: !pause,
            vowel: rng.gen_range(0..VOWELS.len()),
            gain: rng.gen_range(0.6..1.0),
            pitch_start: pitch,
            pitch_end: next_pitch,
        });
        pitch = next_pitch;
        pos = end;
    }
    segs
}

/// Raised-cosine on/off ramp inside a segment.
fn envelope(i: usize, len: usize, ramp: usize) -> f64 {
    let ramp = ramp.min(len / 2).max(1);
    let edge = i.min(len - 1 - i);
    if edge >= ramp {
        1.0
    } else {
        0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
    }
}

struct Branches {
    voiced: Vec<f64>,
    noise: Vec<f64>,
}

fn synth_branches(profile: &SpeakerProfile, n: usize, sample_rate: f64, seed: u64) -> Branches {
    let mut plan_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "plan"));
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "jitter"));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "breath"));
    let segs = plan_segments(n, sample_rate, &mut plan_rng);

    let tilt_exp = profile.spectral_tilt / (20.0 * 2f64.log10());
    let max_harmonics = (SOURCE_CUTOFF_HZ / 60.0) as usize + 1;
    let harmonic_gain: Vec<f64> = (1..=max_harmonics).map(|h| (h as f64).powf(tilt_exp)).collect();

    let mut voiced = vec![0.0; n];
    let mut noise = vec![0.0; n];
    let mut res_v = [Resonator::default(); 5];
    let mut res_n = [Resonator::default(); 5];
    let ramp = (0.02 * sample_rate) as usize;
    let smooth = (-1.0 / (0.015 * sample_rate)).exp();
    let mut cur_formants: [f64; 5] = [0.0; 5];
    let mut phase = 0.0f64;
    let mut jitter = 0.0f64;
    let mut last_cycle = 0.0f64;
    let nyq_guard = 0.45 * sample_rate;

    for seg in &segs {
        let len = seg.end - seg.start;
        let ratios = VOWELS[seg.vowel];
        let mut target = [0.0; 5];
        for k in 0..5 {
            let r = if k < 3 { ratios[k] } else { 1.0 };
            target[k] = (profile.formants[k].freq_hz * r).clamp(150.0, nyq_guard);
        }
        target[1] = target[1].max(target[0] + 150.0);
        target[2] = target[2].max(target[1] + 250.0).min(nyq_guard);
        if cur_formants[0] == 0.0 {
            cur_formants = target;
        }
        for i in 0..len {
            let idx = seg.start + i;
            if i % 32 == 0 {
                for k in 0..5 {
                    res_v[k].set(cur_formants[k], profile.formants[k].bandwidth_hz, sample_rate);
                    res_n[k].set(cur_formants[k], profile.formants[k].bandwidth_hz, sample_rate);
                }
            }
            for k in 0..5 {
                cur_formants[k] = smooth * cur_formants[k] + (1.0 - smooth) * target[k];
            }
            let env = if seg.voiced { seg.gain * envelope(i, len, ramp) } else { 0.0 };

            let frac = i as f64 / len.max(1) as f64;
            let intonation = seg.pitch_start + (seg.pitch_end - seg.pitch_start) * frac;
            let f0 = profile.f0_base * (1.0 + intonation) * (1.0 + jitter);
            phase += 2.0 * PI * f0 / sample_rate;
            if phase >= 2.0 * PI {
                phase -= 2.0 * PI;
            }
            // new jitter value once per pitch cycle
            let cycle = (idx as f64 * f0 / sample_rate).floor();
            if cycle != last_cycle {
                last_cycle = cycle;
                let z: f64 = jitter_rng.gen_range(-1.0..1.0);
                jitter = 0.7 * jitter + 0.3 * profile.f0_jitter * z * 1.7;
            }

            let src = if env > 0.0 {
                let n_harm = ((SOURCE_CUTOFF_HZ.min(nyq_guard) / f0) as usize).clamp(1, max_harmonics);
                let (s1, c1) = phase.sin_cos();
                let mut prev = 0.0;
                let mut cur = s1;
                let mut acc = 0.0;
                for g in harmonic_gain.iter().take(n_harm) {
                    acc += g * cur;
                    let next = 2.0 * c1 * cur - prev;
                    prev = cur;
                    cur = next;
                }
                acc * env
            } else {
                0.0
            };
            let mut v = src;
            for r in res_v.iter_mut() {
                v = r.tick(v);
            }
            voiced[idx] = v;

            let white: f64 = noise_rng.gen_range(-1.0..1.0);
            let mut nv = white * env;
            for r in res_n.iter_mut() {
                nv = r.tick(nv);
            }
            noise[idx] = nv;
        }
    }
    Branches { voiced, noise }
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn peak_normalize(x: &mut [f64]) {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = PEAK / peak;
        x.iter_mut().for_each(|v| *v *= g);
    }
}

#[cfg(test)]
/// The filtered harmonic excitation alone, peak-normalized.
pub(crate) fn synth_voiced_only(profile: &SpeakerProfile, duration_s: f64, sample_rate: u32, seed: u64) -> Vec<f64> {
    let n = (duration_s * sample_rate as f64).round() as usize;
    let mut v = synth_branches(profile, n, sample_rate as f64, seed).voiced;
    peak_normalize(&mut v);
    v
}

/// Synthesizes one clean utterance of `profile`.
///
/// Deterministic in `(profile, duration_s, sample_rate, seed)`. The result is
/// peak-normalized to 0.5.
pub fn synth_utterance(
    profile: &SpeakerProfile,
    duration_s: f64,
    sample_rate: u32,
    seed: u64,
    utterance_id: &str,
) -> Result<Waveform> {
    if !(duration_s > 0.0) {
        return Err(Error::InvalidArgument(format!("duration {duration_s} must be positive")));
    }
    profile.validate(sample_rate)?;
    let n = (duration_s * sample_rate as f64).round() as usize;
    if n == 0 {
        return Err(Error::InvalidArgument("duration shorter than one sample".into()));
    }
    let Branches { voiced, noise } = synth_branches(profile, n, sample_rate as f64, seed);
    let b = profile.breathiness;
    let mut out: Vec<f64> = if b == 0.0 {
        voiced
    } else {
        let (rv, rn) = (rms(&voiced).max(1e-30), rms(&noise).max(1e-30));
        voiced.iter().zip(&noise).map(|(v, z)| (1.0 - b) * v / rv + b * z / rn).collect()
    };
    peak_normalize(&mut out);
    Ok(Waveform {
        samples: out.iter().map(|&v| v as f32).collect(),
        sample_rate,
        utterance_id: utterance_id.to_string(),
        speaker_ids: vec![profile.speaker_id.clone()],
    })
}
