use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

/// Mean power of a signal.
pub fn power<T: Copy + Into<f64>>(x: &[T]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| {
        let v: f64 = v.into();
        v * v
    }).sum::<f64>() / x.len() as f64
}

/// A two-speaker mixture together with its scaled components.
#[derive(Clone, Debug)]
pub struct Mixture {
    pub waveform: Waveform,
    /// The two sources exactly as summed: `x1` truncated, `scale · x2` truncated.
    pub components: [Vec<f64>; 2],
    pub ratio_db: f64,
    /// Amplitude factor applied to the second source.
    pub scale: f64,
}

/// Mixes two sources at a power ratio of `ratio_db` (first over second),
/// truncating both to the shorter length.
pub fn mix_signals(x1: &Waveform, x2: &Waveform, ratio_db: f64, mixture_id: &str) -> Result<Mixture> {
    if x1.sample_rate != x2.sample_rate {
        return Err(Error::InvalidArgument(format!(
            "sample rates differ: {} vs {}",
            x1.sample_rate, x2.sample_rate
        )));
    }
    if !ratio_db.is_finite() {
        return Err(Error::InvalidArgument(format!("ratio {ratio_db} dB is not finite")));
    }
    let len = x1.len().min(x2.len());
    let a: Vec<f64> = x1.samples[..len].iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = x2.samples[..len].iter().map(|&v| v as f64).collect();
    let (pa, pb) = (power(&a), power(&b));
    if !(pa > 0.0) || !(pb > 0.0) {
        return Err(Error::Degenerate(format!(
            "mixture {mixture_id}: zero-power source over the overlapped region"
        )));
    }
    let scale = (pa / (pb * 10f64.powf(ratio_db / 10.0))).sqrt();
    let b: Vec<f64> = b.iter().map(|v| v * scale).collect();
    let samples = a.iter().zip(&b).map(|(x, y)| (x + y) as f32).collect();
    let mut speaker_ids = x1.speaker_ids.clone();
    speaker_ids.extend(x2.speaker_ids.iter().cloned());
    Ok(Mixture {
        waveform: Waveform {
            samples,
            sample_rate: x1.sample_rate,
            utterance_id: mixture_id.to_string(),
            speaker_ids,
        },
        components: [a, b],
        ratio_db,
        scale,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Pink,
}

fn noise(kind: NoiseKind, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    match kind {
        NoiseKind::White => white,
        NoiseKind::Pink => {
            // Paul Kellet's economy pink filter
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            white
                .iter()
                .map(|&w| {
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
    }
}

/// Adds synthetic noise at the requested signal-to-noise ratio.
pub fn add_noise(x: &Waveform, snr_db: f64, kind: NoiseKind, seed: u64) -> Result<Waveform> {
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("snr {snr_db} dB is not finite")));
    }
    let px = power(&x.samples.iter().map(|&v| v as f64).collect::<Vec<_>>());
    if !(px > 0.0) {
        return Err(Error::Degenerate(format!("{}: zero-power signal", x.utterance_id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nz = noise(kind, x.len(), &mut rng);
    let pn = power(&nz);
    let g = (px / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples = x.samples.iter().zip(&nz).map(|(&s, &z)| (s as f64 + g * z) as f32).collect();
    Ok(Waveform {
        samples,
        ..x.clone()
    })
}

/// Plays `x` back `factor` times faster by linear-interpolation resampling,
/// scaling pitch and resonances by `factor` and the duration by its inverse.
pub fn speed_perturb(x: &Waveform, factor: f64) -> Result<Waveform> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::InvalidArgument(format!("speed factor {factor} must be positive")));
    }
    if factor == 1.0 || x.is_empty() {
        return Ok(x.clone());
    }
    let n = ((x.len() as f64 / factor).floor() as usize).max(1);
    let last = x.len() - 1;
    let samples = (0..n)
        .map(|i| {
            let pos = i as f64 * factor;
            let j = (pos.floor() as usize).min(last);
            let frac = pos - j as f64;
            let a = x.samples[j] as f64;
            let b = x.samples[(j + 1).min(last)] as f64;
            (a + frac * (b - a)) as f32
        })
        .collect();
    Ok(Waveform {
        samples,
        ..x.clone()
    })
}

/// Random noise augmentation applied to training inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augmentation {
    pub probability: f64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub kind: NoiseKind,
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation {
            probability: 0.5,
            snr_min_db: 5.0,
            snr_max_db: 20.0,
            kind: NoiseKind::Pink,
        }
    }
}

impl Augmentation {
    pub fn disabled() -> Self {
        Augmentation {
            probability: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Config(format!("augmentation probability {} outside [0, 1]", self.probability)));
        }
        if !(self.snr_min_db <= self.snr_max_db) {
            return Err(Error::Config("augmentation snr range is not ordered".into()));
        }
        Ok(())
    }

    /// Possibly adds noise; the draw consumes `rng` identically either way.
    pub fn apply(&self, x: &Waveform, rng: &mut ChaCha8Rng) -> Result<Waveform> {
        let u: f64 = rng.gen();
        let snr = rng.gen_range(self.snr_min_db..=self.snr_max_db);
        let seed: u64 = rng.gen();
        if u < self.probability {
            add_noise(x, snr, self.kind, seed)
        } else {
            Ok(x.clone())
        }
    }
}
