//! Training loops for the teacher (AAM-softmax on clean speech) and the
//! multi-speaker student (teacher-student or AAM-PIT on two-speaker
//! mixtures).
//!
//! Every example is recorded on its own tape. Gradients are averaged over the
//! minibatch before one optimizer step.

mod optim;

pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};

use std::collections::BTreeMap;
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::audio::{mix_signals, speed_perturb, Augmentation, Corpus, FrontendConfig, MelFrontend, Split, Waveform};
use crate::error::{Error, Result};
use crate::losses::{aam_loss_on, aam_pit_loss_on, ts_loss_on, PitScope};
use crate::model::{teacher_forward, AamHead, Checkpoint, Encoder, EncoderConfig, RngState};
use crate::seeds::{derive_seed, rng_for};
use crate::tensorcore::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Aam,
    TsTpit,
    TsUpit,
    AamPitTpit,
    AamPitUpit,
}

impl LossMode {
    pub const STUDENT: [LossMode; 4] = [LossMode::TsTpit, LossMode::TsUpit, LossMode::AamPitTpit, LossMode::AamPitUpit];

    pub fn scope(self) -> PitScope {
        match self {
            LossMode::TsUpit | LossMode::AamPitUpit => PitScope::Utterance,
            _ => PitScope::Frame,
        }
    }

    pub fn is_teacher_student(self) -> bool {
        matches!(self, LossMode::TsTpit | LossMode::TsUpit)
    }

    pub fn is_aam_pit(self) -> bool {
        matches!(self, LossMode::AamPitTpit | LossMode::AamPitUpit)
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Aam => "aam",
            LossMode::TsTpit => "ts_tpit",
            LossMode::TsUpit => "ts_upit",
            LossMode::AamPitTpit => "aam_pit_tpit",
            LossMode::AamPitUpit => "aam_pit_upit",
        })
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let all = [LossMode::Aam, LossMode::TsTpit, LossMode::TsUpit, LossMode::AamPitTpit, LossMode::AamPitUpit];
        all.into_iter()
            .find(|m| m.to_string() == s.replace('-', "_"))
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown loss mode {s:?} (aam | ts_tpit | ts_upit | aam_pit_tpit | aam_pit_upit)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Linear warmup from 0 to `learning_rate` over this many steps.
    pub warmup_steps: usize,
    pub optimizer: OptimizerConfig,
    pub loss_mode: LossMode,
    /// First (0-based) epoch whose targets come from other utterances of the
    /// same speakers.
    pub target_refresh_epoch: usize,
    pub ratio_min_db: f64,
    pub ratio_max_db: f64,
    pub augmentation: Augmentation,
    pub aam_scale: f64,
    pub aam_margin: f64,
    /// Random crop of every training input, in seconds.
    pub crop_s: Option<f64>,
    /// Student mixtures per epoch; defaults to the number of training utterances.
    pub examples_per_epoch: Option<usize>,
    /// Apply the loss to pooled embeddings instead of frames. Experimental.
    pub utterance_level: bool,
    /// Student only: start every output slot from the teacher's weights.
    pub init_from_teacher: bool,
    /// Teacher only: extra playback speeds; every factor turns each training
    /// speaker into an additional class.
    pub speed_perturb: Vec<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            warmup_steps: 0,
            optimizer: OptimizerConfig::default(),
            loss_mode: LossMode::Aam,
            target_refresh_epoch: 10,
            ratio_min_db: -5.0,
            ratio_max_db: 5.0,
            augmentation: Augmentation::default(),
            aam_scale: 30.0,
            aam_margin: 0.2,
            crop_s: None,
            examples_per_epoch: None,
            utterance_level: false,
            speed_perturb: Vec::new(),
            init_from_teacher: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} is not a finite non-negative number", self.learning_rate)));
        }
        if !(self.ratio_min_db <= self.ratio_max_db) || !self.ratio_min_db.is_finite() || !self.ratio_max_db.is_finite() {
            return Err(Error::Config("mixture ratio range is not ordered".into()));
        }
        if !(self.aam_scale > 1.0) || !(self.aam_margin >= 0.0) {
            return Err(Error::Config("AAM needs scale > 1 and margin >= 0".into()));
        }
        if let Some(c) = self.crop_s {
            if !(c > 0.0) {
                return Err(Error::Config("crop_s must be positive".into()));
            }
        }
        if self.speed_perturb.iter().any(|&f| !(f > 0.0 && f.is_finite() && f != 1.0)) {
            return Err(Error::Config("speed_perturb factors must be positive and differ from 1".into()));
        }
        if self.examples_per_epoch == Some(0) {
            return Err(Error::Config("examples_per_epoch must be >= 1".into()));
        }
        self.augmentation.validate()?;
        self.optimizer.validate()
    }

    fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// A finished run: the checkpoint plus the loss of every optimizer step.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub step_losses: Vec<f64>,
}

impl TrainOutcome {
    /// Median loss over the first and the last 10 % of steps.
    pub fn loss_trend(&self) -> (f64, f64) {
        let n = self.step_losses.len();
        let w = (n / 10).max(1).min(n);
        let median = |xs: &[f64]| {
            let mut v = xs.to_vec();
            v.sort_by(f64::total_cmp);
            let m = v.len() / 2;
            if v.len() % 2 == 0 {
                0.5 * (v[m - 1] + v[m])
            } else {
                v[m]
            }
        };
        (median(&self.step_losses[..w]), median(&self.step_losses[n - w..]))
    }
}

fn append_log(path: Option<&Path>, record: &Value) -> Result<()> {
    if let Some(p) = path {
        let mut f = OpenOptions::new().create(true).append(true).open(p)?;
        writeln!(f, "{}", serde_json::to_string(record)?)?;
    }
    Ok(())
}

fn crop(w: &Waveform, crop_s: Option<f64>, rng: &mut ChaCha8Rng) -> Waveform {
    let Some(c) = crop_s else { return w.clone() };
    let len = (c * w.sample_rate as f64).round() as usize;
    if len == 0 || len >= w.len() {
        // still consume the draw so streams do not depend on lengths
        let _: f64 = rng.gen();
        return w.clone();
    }
    let start = (rng.gen::<f64>() * (w.len() - len + 1) as f64) as usize;
    Waveform {
        samples: w.samples[start..start + len].to_vec(),
        ..w.clone()
    }
}

/// Parameters being optimized: the encoder and, for AAM losses, the head.
struct Trainable {
    encoder: Encoder,
    head: Option<Tensor<f32>>,
}

impl Trainable {
    fn tensors(&self) -> Vec<&Tensor<f32>> {
        let mut v: Vec<&Tensor<f32>> = self.encoder.params().iter().map(|(_, t)| t).collect();
        v.extend(self.head.iter());
        v
    }

    fn step(&mut self, opt: &mut Optimizer, grads: &[Tensor<f32>], lr: f64) -> Result<()> {
        let mut ps: Vec<&mut Tensor<f32>> = self.encoder.params_mut().iter_mut().map(|(_, t)| t).collect();
        ps.extend(self.head.iter_mut());
        opt.step(&mut ps, grads, lr)
    }

    fn into_tensors(self) -> Vec<(String, Tensor<f32>)> {
        let mut v = self.encoder.into_params();
        if let Some(h) = self.head {
            v.push(("head.w".into(), h));
        }
        v
    }
}

/// Sum of per-example gradients, averaged at step time.
struct Accumulator {
    sums: Vec<Tensor<f32>>,
    count: usize,
    loss: f64,
}

impl Accumulator {
    fn new(shapes: &[&Tensor<f32>]) -> Self {
        Accumulator {
            sums: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            count: 0,
            loss: 0.0,
        }
    }

    fn add(&mut self, grads: Vec<Option<Tensor<f32>>>, loss: f64) {
        for (s, g) in self.sums.iter_mut().zip(grads) {
            if let Some(g) = g {
                s.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b);
            }
        }
        self.count += 1;
        self.loss += loss;
    }

    fn take_mean(&mut self) -> (Vec<Tensor<f32>>, f64) {
        let n = self.count as f32;
        let grads = self
            .sums
            .iter_mut()
            .map(|s| {
                let mean = Tensor::new(s.shape().to_vec(), s.data().iter().map(|v| v / n).collect()).expect("same shape");
                s.data_mut().iter_mut().for_each(|v| *v = 0.0);
                mean
            })
            .collect();
        let loss = self.loss / self.count as f64;
        self.count = 0;
        self.loss = 0.0;
        (grads, loss)
    }
}

fn diverged(epoch: usize, step: usize, detail: impl Into<String>) -> Error {
    Error::Divergence {
        epoch,
        step,
        detail: detail.into(),
    }
}

fn as_divergence(e: Error, epoch: usize, step: usize, what: &str) -> Error {
    match e {
        Error::NonFinite { op } => diverged(epoch, step, format!("non-finite value in {op} on {what}")),
        e => e,
    }
}

fn train_speakers(corpus: &Corpus) -> Result<(Vec<String>, BTreeMap<String, Vec<String>>)> {
    let by_spk = corpus.manifest.by_speaker(Split::Train);
    if by_spk.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "training split has {} speakers, need at least 2",
            by_spk.len()
        )));
    }
    Ok((by_spk.keys().cloned().collect(), by_spk))
}

fn run_config(kind: &str, enc: &EncoderConfig, fe: &FrontendConfig, cfg: &TrainConfig, corpus: &Corpus, speakers: &[String]) -> Value {
    json!({
        "kind": kind,
        "encoder": enc,
        "frontend": fe,
        "train": cfg,
        "corpus_manifest_sha256": corpus.manifest.hash(),
        "train_speakers": speakers,
    })
}

/// Trains the single-speaker teacher with AAM-softmax on (augmented) clean
/// training utterances.
pub fn train_teacher(
    corpus: &Corpus,
    frontend: &MelFrontend,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    log: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.loss_mode != LossMode::Aam {
        return Err(Error::Config(format!("the teacher is trained with loss mode aam, not {}", cfg.loss_mode)));
    }
    if enc_cfg.n_outputs != 1 {
        return Err(Error::Config("the teacher encoder must have n_outputs = 1".into()));
    }
    let (speakers, by_spk) = train_speakers(corpus)?;
    let mut items: Vec<(String, usize)> = Vec::new();
    for (label, spk) in speakers.iter().enumerate() {
        items.extend(by_spk[spk].iter().map(|u| (u.clone(), label)));
    }
    let factors: Vec<f64> = std::iter::once(1.0).chain(cfg.speed_perturb.iter().copied()).collect();
    let n_spk = speakers.len();
    let examples: Vec<(String, usize, f64)> = factors
        .iter()
        .enumerate()
        .flat_map(|(fi, &f)| items.iter().map(move |(u, l)| (u.clone(), fi * n_spk + l, f)))
        .collect();
    let config = run_config("teacher", enc_cfg, frontend.config(), cfg, corpus, &speakers);

    let head = AamHead::<f32>::new(n_spk * factors.len(), enc_cfg.embedding_dim, cfg.aam_scale, cfg.aam_margin, derive_seed(cfg.seed, "teacher-head"))?;
    let mut model = Trainable {
        encoder: Encoder::new(EncoderConfig { seed: derive_seed(cfg.seed, "teacher-init"), ..enc_cfg.clone() })?,
        head: Some(head.weights),
    };
    let mut opt = Optimizer::new(cfg.optimizer.clone(), &model.tensors())?;
    let mut acc = Accumulator::new(&model.tensors());
    let mut rng = rng_for(cfg.seed, "teacher-train");
    let mut metrics = Vec::new();
    let mut step_losses = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut order = examples.clone();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (i, (utt, label, factor)) in order.iter().enumerate() {
            let w = speed_perturb(corpus.waveform(utt)?, *factor)?;
            let w = crop(&w, cfg.crop_s, &mut rng);
            let w = cfg.augmentation.apply(&w, &mut rng)?;
            let feats = frontend.logmel(&w)?;

            let step = opt.steps() as usize;
            let (grads, lv, predicted) = (|| -> Result<_> {
                let mut tape = Tape::<f32>::new();
                let vars = model.encoder.bind(&mut tape, true)?;
                let hv = tape.param(model.head.clone().expect("teacher has a head"))?;
                let x = tape.constant(model.encoder.prepare(&feats)?)?;
                let out = model.encoder.forward_on(&mut tape, &vars, x)?;
                let cos = AamHead::cosines_on(&mut tape, out.pooled, hv)?;
                let predicted = argmax(tape.value(cos).data());
                let ce = aam_loss_on(&mut tape, out.pooled, hv, &[*label], cfg.aam_scale, cfg.aam_margin)?;
                let loss = tape.sum(ce)?;
                let lv = tape.value(loss).item()? as f64;
                if !lv.is_finite() {
                    return Err(Error::NonFinite { op: "aam_loss" });
                }
                let mut g = tape.backward(loss)?;
                let grads: Vec<_> = vars.iter().chain(std::iter::once(&hv)).map(|&v| g.take(v)).collect();
                Ok((grads, lv, predicted))
            })()
            .map_err(|e| as_divergence(e, epoch, step, utt))?;
            acc.add(grads, lv);
            loss_sum += lv;
            correct += usize::from(predicted == *label);

            if acc.count == cfg.batch_size || i + 1 == order.len() {
                let (grads, batch_loss) = acc.take_mean();
                let step = opt.steps();
                model
                    .step(&mut opt, &grads, cfg.lr_at(step))
                    .map_err(|e| diverged(epoch, step as usize, e.to_string()))?;
                step_losses.push(batch_loss);
            }
        }
        let record = json!({
            "epoch": epoch,
            "loss": loss_sum / order.len() as f64,
            "train_accuracy": correct as f64 / order.len() as f64,
            "steps": opt.steps(),
        });
        log::info!("teacher epoch {epoch}: {record}");
        append_log(log, &record)?;
        metrics.push(record);
    }

    let accuracy = classification_accuracy(&model.encoder, model.head.as_ref().expect("head"), corpus, frontend, &items)?;
    let record = json!({ "final_train_accuracy": accuracy });
    append_log(log, &record)?;
    metrics.push(record);

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            kind: "teacher".into(),
            config,
            epoch: cfg.epochs,
            rng_state: Some(RngState::capture(&rng)),
            metrics,
            tensors: model.into_tensors(),
        },
        step_losses,
    })
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Fraction of clean, uncropped utterances whose nearest prototype is their
/// own speaker.
pub fn classification_accuracy(
    encoder: &Encoder,
    head: &Tensor<f32>,
    corpus: &Corpus,
    frontend: &MelFrontend,
    items: &[(String, usize)],
) -> Result<f64> {
    let mut correct = 0;
    for (utt, label) in items {
        let feats = frontend.logmel(corpus.waveform(utt)?)?;
        let (emb, _) = teacher_forward(encoder, &feats, utt)?;
        let mut tape = Tape::<f32>::new();
        let e = tape.constant(Tensor::new(vec![1, emb.vector.len()], emb.vector)?)?;
        let w = tape.constant(head.clone())?;
        let cos = AamHead::cosines_on(&mut tape, e, w)?;
        correct += usize::from(argmax(tape.value(cos).data()) == *label);
    }
    Ok(correct as f64 / items.len().max(1) as f64)
}

/// Teacher embeddings of every clean training utterance, with the
/// per-speaker pools used for the target refresh.
pub struct TargetBank {
    embeddings: BTreeMap<String, Vec<f32>>,
    speaker_of: BTreeMap<String, String>,
    pools: BTreeMap<String, Vec<String>>,
}

impl TargetBank {
    pub fn build(teacher: &Encoder, frontend: &MelFrontend, corpus: &Corpus) -> Result<Self> {
        let pools = corpus.manifest.by_speaker(Split::Train);
        let mut embeddings = BTreeMap::new();
        let mut speaker_of = BTreeMap::new();
        for (spk, utts) in &pools {
            for u in utts {
                let feats = frontend.logmel(corpus.waveform(u)?)?;
                embeddings.insert(u.clone(), teacher_forward(teacher, &feats, u)?.0.vector);
                speaker_of.insert(u.clone(), spk.clone());
            }
        }
        Ok(TargetBank {
            embeddings,
            speaker_of,
            pools,
        })
    }

    pub fn embedding(&self, utt: &str) -> Result<&[f32]> {
        self.embeddings
            .get(utt)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidArgument(format!("no teacher embedding for {utt}")))
    }

    /// Target for the source `utt` at `epoch`: its own embedding before the
    /// refresh epoch, afterwards that of a different utterance of the same
    /// speaker. Returns the utterance the target was computed from.
    pub fn target(&self, utt: &str, epoch: usize, refresh_epoch: usize, rng: &mut ChaCha8Rng) -> Result<(String, &[f32])> {
        // one draw per call keeps the stream independent of the schedule
        let r: f64 = rng.gen();
        if epoch < refresh_epoch {
            return Ok((utt.to_string(), self.embedding(utt)?));
        }
        let spk = &self.speaker_of[utt];
        let others: Vec<&String> = self.pools[spk].iter().filter(|u| u.as_str() != utt).collect();
        if others.is_empty() {
            return Ok((utt.to_string(), self.embedding(utt)?));
        }
        let pick = others[((r * others.len() as f64) as usize).min(others.len() - 1)];
        Ok((pick.clone(), self.embedding(pick)?))
    }
}

/// One student training example.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentExample {
    pub sources: [String; 2],
    pub ratio_db: f64,
    /// Utterances the two targets were computed from.
    pub target_sources: [String; 2],
    pub targets: [Vec<f32>; 2],
    pub labels: [usize; 2],
}

/// Draws the mixture list of one epoch: two distinct speakers, one utterance
/// each, a uniform ratio, and the targets of the refresh schedule.
pub fn draw_examples(
    bank: &TargetBank,
    speakers: &[String],
    by_spk: &BTreeMap<String, Vec<String>>,
    cfg: &TrainConfig,
    epoch: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<StudentExample>> {
    (0..n)
        .map(|_| {
            let a = rng.gen_range(0..speakers.len());
            let mut b = rng.gen_range(0..speakers.len() - 1);
            if b >= a {
                b += 1;
            }
            let ua = by_spk[&speakers[a]].choose(rng).expect("speaker has utterances").clone();
            let ub = by_spk[&speakers[b]].choose(rng).expect("speaker has utterances").clone();
            let ratio_db = rng.gen_range(cfg.ratio_min_db..=cfg.ratio_max_db);
            let (ta, da) = bank.target(&ua, epoch, cfg.target_refresh_epoch, rng)?;
            let da = da.to_vec();
            let (tb, db) = bank.target(&ub, epoch, cfg.target_refresh_epoch, rng)?;
            Ok(StudentExample {
                sources: [ua, ub],
                ratio_db,
                target_sources: [ta, tb],
                targets: [da, db.to_vec()],
                labels: [a, b],
            })
        })
        .collect()
}

fn params_digest(enc: &Encoder) -> Vec<u32> {
    enc.params().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
}

/// Trains a two-speaker student on mixtures of training
/// utterances. The teacher only supplies targets (teacher-student modes) and
/// is never bound to the tape as trainable.
pub fn train_student(
    teacher: &Checkpoint,
    corpus: &Corpus,
    frontend: &MelFrontend,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    log: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.loss_mode == LossMode::Aam {
        return Err(Error::Config("the student needs a multi-speaker loss mode".into()));
    }
    if enc_cfg.n_outputs != 2 {
        return Err(Error::Unsupported(format!(
            "student training mixes two speakers, encoder has n_outputs = {}",
            enc_cfg.n_outputs
        )));
    }
    let teacher_enc = teacher.encoder()?;
    if teacher_enc.embedding_dim() != enc_cfg.embedding_dim {
        return Err(Error::InvalidArgument(format!(
            "teacher embedding dim {} differs from student {}",
            teacher_enc.embedding_dim(),
            enc_cfg.embedding_dim
        )));
    }
    let frozen = params_digest(&teacher_enc);
    let (speakers, by_spk) = train_speakers(corpus)?;
    let bank = TargetBank::build(&teacher_enc, frontend, corpus)?;
    let mut config = run_config("student", enc_cfg, frontend.config(), cfg, corpus, &speakers);
    config["teacher_sha256"] = json!(teacher.sha256()?);

    let head = if cfg.loss_mode.is_aam_pit() {
        Some(AamHead::<f32>::new(speakers.len(), enc_cfg.embedding_dim, cfg.aam_scale, cfg.aam_margin, derive_seed(cfg.seed, "student-head"))?.weights)
    } else {
        None
    };
    let mut encoder = Encoder::new(EncoderConfig { seed: derive_seed(cfg.seed, "student-init"), ..enc_cfg.clone() })?;
    if cfg.init_from_teacher {
        let tc = teacher_enc.config();
        if (tc.mel_bins, tc.channels, tc.n_blocks, tc.kernel) != (enc_cfg.mel_bins, enc_cfg.channels, enc_cfg.n_blocks, enc_cfg.kernel) {
            return Err(Error::InvalidArgument("init_from_teacher needs the teacher's trunk shape".into()));
        }
        let e = enc_cfg.embedding_dim;
        for ((name, p), (_, t)) in encoder.params_mut().iter_mut().zip(teacher_enc.params()) {
            if name.starts_with("proj.") {
                // every slot starts as the teacher; the fresh init, shrunk,
                // breaks the tie between slots
                let td = t.data();
                for (i, x) in p.data_mut().iter_mut().enumerate() {
                    let (row, col) = (i / (2 * e), i % (2 * e));
                    *x = td[row * e + col % e] + 0.1 * *x;
                }
            } else {
                *p = t.clone();
            }
        }
    }
    let mut model = Trainable { encoder, head };
    let mut opt = Optimizer::new(cfg.optimizer.clone(), &model.tensors())?;
    let mut acc = Accumulator::new(&model.tensors());
    let mut rng = rng_for(cfg.seed, "student-train");
    let n_examples = cfg
        .examples_per_epoch
        .unwrap_or_else(|| by_spk.values().map(Vec::len).sum());
    let scope = cfg.loss_mode.scope();
    let (k, e) = (2, enc_cfg.embedding_dim);
    let mut metrics = Vec::new();
    let mut step_losses = Vec::new();

    for epoch in 0..cfg.epochs {
        let examples = draw_examples(&bank, &speakers, &by_spk, cfg, epoch, n_examples, &mut rng)?;
        let refreshed = examples.iter().filter(|x| x.target_sources != x.sources).count();
        let mut loss_sum = 0.0;
        for (i, ex) in examples.iter().enumerate() {
            let mix = mix_signals(
                corpus.waveform(&ex.sources[0])?,
                corpus.waveform(&ex.sources[1])?,
                ex.ratio_db,
                &format!("train-e{epoch}-{i}"),
            )?;
            let w = crop(&mix.waveform, cfg.crop_s, &mut rng);
            let w = cfg.augmentation.apply(&w, &mut rng)?;
            let feats = frontend.logmel(&w)?;

            let step = opt.steps() as usize;
            let (grads, lv) = (|| -> Result<_> {
                let mut tape = Tape::<f32>::new();
                let vars = model.encoder.bind(&mut tape, true)?;
                let x = tape.constant(model.encoder.prepare(&feats)?)?;
                let out = model.encoder.forward_on(&mut tape, &vars, x)?;
                let outputs = if cfg.utterance_level {
                    tape.reshape(out.pooled, &[1, k * e])?
                } else {
                    out.frames
                };
                let (loss, head_var) = if cfg.loss_mode.is_teacher_student() {
                    let t = Tensor::new(vec![k, e], ex.targets.concat())?;
                    let tv = tape.constant(t)?;
                    (ts_loss_on(&mut tape, tv, outputs, scope)?, None)
                } else {
                    let hv = tape.param(model.head.clone().expect("aam_pit student has a head"))?;
                    let l = aam_pit_loss_on(&mut tape, outputs, hv, &ex.labels, cfg.aam_scale, cfg.aam_margin, scope)?;
                    (l, Some(hv))
                };
                if !loss.value.is_finite() {
                    return Err(Error::NonFinite { op: "student_loss" });
                }
                let mut g = tape.backward(loss.var)?;
                let grads: Vec<_> = vars.iter().chain(head_var.iter()).map(|&v| g.take(v)).collect();
                Ok((grads, loss.value))
            })()
            .map_err(|e| as_divergence(e, epoch, step, &format!("mixture {i}")))?;
            acc.add(grads, lv);
            loss_sum += lv;

            if acc.count == cfg.batch_size || i + 1 == examples.len() {
                let (grads, batch_loss) = acc.take_mean();
                let step = opt.steps();
                model
                    .step(&mut opt, &grads, cfg.lr_at(step))
                    .map_err(|e| diverged(epoch, step as usize, e.to_string()))?;
                step_losses.push(batch_loss);
            }
        }
        let record = json!({
            "epoch": epoch,
            "loss": loss_sum / examples.len() as f64,
            "refreshed_targets": refreshed,
            "steps": opt.steps(),
        });
        log::info!("student epoch {epoch}: {record}");
        append_log(log, &record)?;
        metrics.push(record);
    }

    if params_digest(&teacher_enc) != frozen {
        return Err(Error::Tape("teacher parameters changed during student training"));
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            kind: "student".into(),
            config,
            epoch: cfg.epochs,
            rng_state: Some(RngState::capture(&rng)),
            metrics,
            tensors: model.into_tensors(),
        },
        step_losses,
    })
}

#[cfg(test)]
mod tests;
