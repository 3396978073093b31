//! Frame-rate encoders, pooling and the classification head.
//!
//! One [`Encoder`] type serves as both teacher (`n_outputs = 1`) and student
//! (`n_outputs = K`). It is a stack of stride-1, same-padded 1-D convolutions:
//!
//! ```text
//! feats (T×F, mean-normalized over time)
//!   └ conv(F→C) + bias, relu
//!   └ n_blocks × [ h ← relu(h + conv(relu(conv(h) + b₁)) + b₂) ]
//!   └ linear(C→K·E) + bias                      → T×(K·E)
//! ```
//!
//! Output channel block `[kE, (k+1)E)` is slot `k`.

mod checkpoint;

pub use checkpoint::{config_hash, Checkpoint, CheckpointHeader, RngState, TensorEntry, FORMAT_VERSION, MAGIC};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::FeatureMatrix;
use crate::error::{Error, Result};
use crate::tensorcore::{Padding, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub mel_bins: usize,
    pub channels: usize,
    pub n_blocks: usize,
    pub kernel: usize,
    pub embedding_dim: usize,
    pub n_outputs: usize,
    /// Local TAP window applied to student frames; ignored when `n_outputs == 1`.
    pub local_tap_window: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            mel_bins: 24,
            channels: 32,
            n_blocks: 3,
            kernel: 5,
            embedding_dim: 16,
            n_outputs: 1,
            local_tap_window: 11,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn teacher() -> Self {
        Self::default()
    }

    pub fn student(k: usize) -> Self {
        EncoderConfig {
            n_outputs: k,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 2 {
            return Err(Error::Config(format!("embedding_dim {} < 2", self.embedding_dim)));
        }
        if self.n_outputs < 1 {
            return Err(Error::Config("n_outputs must be >= 1".into()));
        }
        if self.local_tap_window % 2 == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config("local_tap_window and kernel must be odd".into()));
        }
        if self.mel_bins < 1 || self.channels < 1 {
            return Err(Error::Config("mel_bins and channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Names and shapes of the parameters, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (f, c, w) = (self.mel_bins, self.channels, self.kernel);
        let mut out = vec![("input.w".to_string(), vec![w, f, c]), ("input.b".to_string(), vec![c])];
        for i in 0..self.n_blocks {
            for j in 1..=2 {
                out.push((format!("block{i}.conv{j}.w"), vec![w, c, c]));
                out.push((format!("block{i}.conv{j}.b"), vec![c]));
            }
        }
        let ke = self.n_outputs * self.embedding_dim;
        out.push(("proj.w".to_string(), vec![c, ke]));
        out.push(("proj.b".to_string(), vec![ke]));
        out
    }
}

fn normal_tensor<T: Real>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Parameters of a teacher or student network.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T: Real = f32> {
    config: EncoderConfig,
    params: Vec<(String, Tensor<T>)>,
}

/// Tape handles of the student pipeline outputs.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `T×(K·E)` frame embeddings (after local TAP for students).
    pub frames: Var,
    /// `K×E` utterance embeddings.
    pub pooled: Var,
}

impl<T: Real> Encoder<T> {
    /// He-initialized encoder. The second convolution of every residual block
    /// starts at half scale so the untrained stack stays well-conditioned.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        for (name, shape) in config.param_shapes() {
            let t = if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[..shape.len() - 1].iter().product();
                let mut std = (2.0 / fan_in as f64).sqrt();
                if name.ends_with("conv2.w") {
                    std *= 0.5;
                }
                if name == "proj.w" {
                    std = (1.0 / fan_in as f64).sqrt();
                }
                normal_tensor(&shape, std, &mut rng)?
            };
            params.push((name, t));
        }
        Ok(Encoder { config, params })
    }

    pub fn from_params(config: EncoderConfig, params: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::Format(format!("expected {} tensors, got {}", expected.len(), params.len())));
        }
        for ((en, es), (n, t)) in expected.iter().zip(&params) {
            if en != n || es.as_slice() != t.shape() {
                return Err(Error::Format(format!("tensor {n} {:?} does not match {en} {es:?}", t.shape())));
            }
        }
        Ok(Encoder { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor<T>)] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<(String, Tensor<T>)> {
        self.params
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder {
            config: self.config.clone(),
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    pub fn n_outputs(&self) -> usize {
        self.config.n_outputs
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    /// Records the parameters on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|(_, t)| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    /// Checks the feature dimension and subtracts the utterance's mean
    /// log-energy, which removes the overall gain but keeps the spectral
    /// envelope.
    pub fn prepare(&self, feats: &FeatureMatrix) -> Result<Tensor<T>> {
        let (t_len, f) = (feats.frames.shape()[0], feats.frames.shape()[1]);
        if f != self.config.mel_bins {
            return Err(Error::shape(
                "encode_frames",
                format!("features have {f} mel bins, encoder expects {}", self.config.mel_bins),
            ));
        }
        let data = feats.frames.data();
        let mean = data.iter().map(|&v| v as f64).sum::<f64>() / data.len().max(1) as f64;
        Tensor::new(vec![t_len, f], data.iter().map(|&v| T::of(v as f64 - mean)).collect())
    }

    /// Raw `T×(K·E)` encoder output for prepared features.
    pub fn encode_on(&self, tape: &mut Tape<T>, vars: &[Var], feats: Var) -> Result<Var> {
        if vars.len() != self.params.len() {
            return Err(Error::InvalidArgument("parameter handles do not match encoder".into()));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked above");
        let (w, b) = (next(), next());
        let h = tape.conv1d(feats, w, 1, Padding::Same)?;
        let h = tape.add_row(h, b)?;
        let mut h = tape.relu(h)?;
        for _ in 0..self.config.n_blocks {
            let (w1, b1, w2, b2) = (next(), next(), next(), next());
            let r = tape.conv1d(h, w1, 1, Padding::Same)?;
            let r = tape.add_row(r, b1)?;
            let r = tape.relu(r)?;
            let r = tape.conv1d(r, w2, 1, Padding::Same)?;
            let r = tape.add_row(r, b2)?;
            let s = tape.add(h, r)?;
            h = tape.relu(s)?;
        }
        let (pw, pb) = (next(), next());
        let out = tape.matmul(h, pw)?;
        tape.add_row(out, pb)
    }

    /// Full pipeline: encoder, local TAP for students, then per-slot TAP.
    pub fn forward_on(&self, tape: &mut Tape<T>, vars: &[Var], feats: Var) -> Result<ForwardVars> {
        let raw = self.encode_on(tape, vars, feats)?;
        let frames = if self.config.n_outputs > 1 {
            tape.local_mean(raw, self.config.local_tap_window)?
        } else {
            raw
        };
        let mean = tape.mean_axis(frames, 0)?;
        let pooled = tape.reshape(mean, &[self.config.n_outputs, self.config.embedding_dim])?;
        Ok(ForwardVars { frames, pooled })
    }
}

/// Frame-wise embeddings `T×K×E`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEmbeddings {
    pub values: Tensor<f32>,
    pub utterance_id: String,
}

impl FrameEmbeddings {
    pub fn n_frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_slots(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    /// View as `T×(K·E)`.
    pub fn flat(&self) -> Result<Tensor<f32>> {
        self.values.reshape(&[self.n_frames(), self.n_slots() * self.dim()])
    }
}

/// One utterance-level speaker embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f32>,
    pub slot: usize,
    pub utterance_id: String,
}

fn frames_from_flat(flat: Tensor<f32>, k: usize, utterance_id: &str) -> Result<FrameEmbeddings> {
    let t = flat.shape()[0];
    let e = flat.shape()[1] / k;
    Ok(FrameEmbeddings {
        values: flat.reshape(&[t, k, e])?,
        utterance_id: utterance_id.to_string(),
    })
}

/// Frame-wise embeddings of an utterance, without local pooling.
pub fn encode_frames(enc: &Encoder, feats: &FeatureMatrix, utterance_id: &str) -> Result<FrameEmbeddings> {
    let mut tape = Tape::new();
    let vars = enc.bind(&mut tape, false)?;
    let x = tape.constant(enc.prepare(feats)?)?;
    let raw = enc.encode_on(&mut tape, &vars, x)?;
    frames_from_flat(tape.value(raw).clone(), enc.n_outputs(), utterance_id)
}

/// Temporal average pooling, one embedding per slot.
pub fn tap(frames: &FrameEmbeddings) -> Result<Vec<Embedding>> {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(frames.flat()?)?;
    let m = tape.mean_axis(x, 0)?;
    let e = frames.dim();
    Ok(tape
        .value(m)
        .data()
        .chunks(e)
        .enumerate()
        .map(|(slot, v)| Embedding {
            vector: v.to_vec(),
            slot,
            utterance_id: frames.utterance_id.clone(),
        })
        .collect())
}

/// Sliding temporal mean with boundary truncation; frame count is preserved.
pub fn local_tap(frames: &FrameEmbeddings, window: usize) -> Result<FrameEmbeddings> {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(frames.flat()?)?;
    let y = tape.local_mean(x, window)?;
    frames_from_flat(tape.value(y).clone(), frames.n_slots(), &frames.utterance_id)
}

fn run_pipeline(enc: &Encoder, feats: &FeatureMatrix, utterance_id: &str) -> Result<(Vec<Embedding>, FrameEmbeddings)> {
    let mut tape = Tape::new();
    let vars = enc.bind(&mut tape, false)?;
    let x = tape.constant(enc.prepare(feats)?)?;
    let out = enc.forward_on(&mut tape, &vars, x)?;
    let frames = frames_from_flat(tape.value(out.frames).clone(), enc.n_outputs(), utterance_id)?;
    let embs = tape
        .value(out.pooled)
        .data()
        .chunks(enc.embedding_dim())
        .enumerate()
        .map(|(slot, v)| Embedding {
            vector: v.to_vec(),
            slot,
            utterance_id: utterance_id.to_string(),
        })
        .collect();
    Ok((embs, frames))
}

/// Teacher d-vector and frame embeddings of a single-speaker utterance.
pub fn teacher_forward(teacher: &Encoder, feats: &FeatureMatrix, utterance_id: &str) -> Result<(Embedding, FrameEmbeddings)> {
    if teacher.n_outputs() != 1 {
        return Err(Error::InvalidArgument(format!(
            "teacher must have one output, this encoder has {}",
            teacher.n_outputs()
        )));
    }
    let (mut embs, frames) = run_pipeline(teacher, feats, utterance_id)?;
    Ok((embs.remove(0), frames))
}

/// Student embeddings `d̂_k` and locally pooled frame embeddings `d̂_k(t)`.
pub fn student_forward(student: &Encoder, feats: &FeatureMatrix, utterance_id: &str) -> Result<(Vec<Embedding>, FrameEmbeddings)> {
    run_pipeline(student, feats, utterance_id)
}

/// Prototype matrix of the AAM-softmax classifier; row `c` is `w_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct AamHead<T: Real = f32> {
    pub weights: Tensor<T>,
    pub scale: f64,
    pub margin: f64,
}

impl<T: Real> AamHead<T> {
    pub fn new(n_classes: usize, dim: usize, scale: f64, margin: f64, seed: u64) -> Result<Self> {
        if !(scale > 1.0) || !(margin >= 0.0) {
            return Err(Error::Config(format!("AAM needs s > 1 and a >= 0, got s={scale}, a={margin}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(AamHead {
            weights: normal_tensor(&[n_classes, dim], 1.0, &mut rng)?,
            scale,
            margin,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Cosines between every row of `emb` (`N×E`) and every prototype: `N×C`.
    pub fn cosines_on(tape: &mut Tape<T>, emb: Var, weights: Var) -> Result<Var> {
        let en = tape.l2_normalize(emb)?;
        let wn = tape.l2_normalize(weights)?;
        let wt = tape.transpose(wn)?;
        tape.matmul(en, wt)
    }
}

#[cfg(test)]
mod tests;
