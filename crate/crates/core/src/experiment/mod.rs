//! Run configuration and the subcommand bodies behind the `mixspk` binary.
//!
//! Every subcommand takes a [`RunConfig`]; the section seeds are derived from
//! the master `seed`, and the effective configuration is echoed into each
//! artifact.

mod reproduce;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use reproduce::{cmd_reproduce, Desk, Metric, StudentRun, Table2, Table2Row, Table3, Table4, TrendCheck};

use crate::audio::{build_corpus, Augmentation, Corpus, CorpusConfig, CorpusManifest, FrontendConfig, MelFrontend};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, EncoderConfig};
use crate::seeds::derive_seed;
use crate::trainer::{train_student, train_teacher, LossMode, TrainConfig};
use crate::verify::{evaluate, gen_trials, Models, Report, Scenario, ScoringMode, TrialConfig, TrialSet};

/// Network and training settings of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::teacher()
    }
}

impl ModelConfig {
    pub fn teacher() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                mel_bins: 40,
                embedding_dim: 32,
                ..EncoderConfig::teacher()
            },
            train: TrainConfig {
                augmentation: Augmentation::disabled(),
                ..TrainConfig::default()
            },
        }
    }

    pub fn student() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                mel_bins: 40,
                embedding_dim: 32,
                ..EncoderConfig::student(2)
            },
            train: TrainConfig {
                loss_mode: LossMode::TsTpit,
                batch_size: 8,
                augmentation: Augmentation::disabled(),
                init_from_teacher: true,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReproduceConfig {
    /// Independent student trainings per loss mode.
    pub student_seeds: usize,
}

impl Default for ReproduceConfig {
    fn default() -> Self {
        ReproduceConfig { student_seeds: 3 }
    }
}

/// Everything a run needs. All fields default; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub frontend: FrontendConfig,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub trials: TrialConfig,
    pub reproduce: ReproduceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            corpus: CorpusConfig {
                n_speakers: 60,
                utterances_per_speaker: 10,
                eval_speakers: 10,
                ..CorpusConfig::default()
            },
            frontend: FrontendConfig {
                mel_bins: 40,
                ..FrontendConfig::default()
            },
            teacher: ModelConfig::teacher(),
            student: ModelConfig::student(),
            trials: TrialConfig {
                n_trials: 800,
                ..TrialConfig::default()
            },
            reproduce: ReproduceConfig::default(),
        }
    }
}

impl RunConfig {
    /// A seconds-scale configuration for smoke tests.
    pub fn tiny() -> Self {
        let enc = EncoderConfig {
            mel_bins: 16,
            channels: 8,
            n_blocks: 1,
            embedding_dim: 8,
            ..EncoderConfig::default()
        };
        let train = TrainConfig {
            epochs: 2,
            batch_size: 4,
            target_refresh_epoch: 1,
            augmentation: Augmentation::disabled(),
            ..TrainConfig::default()
        };
        RunConfig {
            seed: 0,
            corpus: CorpusConfig {
                n_speakers: 8,
                utterances_per_speaker: 4,
                duration_s: 0.5,
                eval_speakers: 4,
                ..CorpusConfig::default()
            },
            frontend: FrontendConfig {
                mel_bins: 16,
                ..FrontendConfig::default()
            },
            teacher: ModelConfig {
                encoder: enc.clone(),
                train: train.clone(),
            },
            student: ModelConfig {
                encoder: EncoderConfig { n_outputs: 2, ..enc },
                train: TrainConfig {
                    loss_mode: LossMode::TsTpit,
                    init_from_teacher: true,
                    ..train
                },
            },
            trials: TrialConfig {
                n_trials: 20,
                ..TrialConfig::default()
            },
            reproduce: ReproduceConfig { student_seeds: 1 },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file, or the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) if !p.exists() => Err(Error::MissingFile(p.to_path_buf())),
            Some(p) => RunConfig::from_toml(&fs::read_to_string(p)?),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.frontend.validate()?;
        for (name, m) in [("teacher", &self.teacher), ("student", &self.student)] {
            m.encoder.validate()?;
            m.train.validate()?;
            if m.encoder.mel_bins != self.frontend.mel_bins {
                return Err(Error::Config(format!(
                    "{name}.encoder.mel_bins = {} but frontend.mel_bins = {}",
                    m.encoder.mel_bins, self.frontend.mel_bins
                )));
            }
        }
        if self.teacher.encoder.n_outputs != 1 {
            return Err(Error::Config("teacher.encoder.n_outputs must be 1".into()));
        }
        if self.reproduce.student_seeds == 0 {
            return Err(Error::Config("reproduce.student_seeds must be >= 1".into()));
        }
        Ok(())
    }

    pub fn corpus_seed(&self) -> u64 {
        derive_seed(self.seed, "corpus")
    }

    pub fn trial_seed(&self, scenario: Scenario) -> u64 {
        derive_seed(self.seed, &format!("trials-{scenario}"))
    }

    pub fn teacher_train(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "teacher"),
            ..self.teacher.train.clone()
        }
    }

    /// Student settings for `mode` and training run `run`.
    pub fn student_train(&self, mode: LossMode, run: usize) -> TrainConfig {
        TrainConfig {
            loss_mode: mode,
            seed: derive_seed(self.seed, &format!("student-{run}")),
            ..self.student.train.clone()
        }
    }

    /// The configuration with derived seeds filled in, as echoed into artifacts.
    pub fn effective(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v["teacher"]["train"]["seed"] = json!(self.teacher_train().seed);
        v["student"]["train"]["seed"] = json!(self.student_train(self.student.train.loss_mode, 0).seed);
        v["derived_seeds"] = json!({
            "corpus": self.corpus_seed(),
            "trials": Scenario::ALL.iter().map(|&s| (s.to_string(), json!(self.trial_seed(s)))).collect::<serde_json::Map<_, _>>(),
        });
        v
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn existing(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    existing(path)?;
    Checkpoint::load(path)
}

/// The frontend a checkpoint was trained with.
pub fn checkpoint_frontend(ck: &Checkpoint) -> Result<MelFrontend> {
    let cfg: FrontendConfig = serde_json::from_value(ck.config["frontend"].clone())
        .map_err(|e| Error::Format(format!("checkpoint has no usable frontend config: {e}")))?;
    MelFrontend::new(cfg)
}

/// Builds the corpus and writes it with its manifest and a config echo.
pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<Corpus> {
    cfg.validate()?;
    let corpus = build_corpus(&cfg.corpus, cfg.corpus_seed())?;
    corpus.write(out_dir)?;
    write_json(&out_dir.join("run_config.json"), &cfg.effective())?;
    Ok(corpus)
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    existing(dir)?;
    Corpus::load(dir)
}

pub fn cmd_train_teacher(cfg: &RunConfig, corpus_dir: &Path, out_ckpt: &Path, log: Option<&Path>) -> Result<Checkpoint> {
    cfg.validate()?;
    let corpus = load_corpus(corpus_dir)?;
    let frontend = MelFrontend::new(cfg.frontend.clone())?;
    let mut ck = train_teacher(&corpus, &frontend, &cfg.teacher.encoder, &cfg.teacher_train(), log)?.checkpoint;
    ck.config["run"] = cfg.effective();
    ck.save(out_ckpt)?;
    Ok(ck)
}

pub fn cmd_train_student(
    cfg: &RunConfig,
    teacher_ckpt: &Path,
    corpus_dir: &Path,
    out_ckpt: &Path,
    log: Option<&Path>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let teacher = load_checkpoint(teacher_ckpt)?;
    let corpus = load_corpus(corpus_dir)?;
    let frontend = checkpoint_frontend(&teacher)?;
    let train = cfg.student_train(cfg.student.train.loss_mode, 0);
    let mut ck = train_student(&teacher, &corpus, &frontend, &cfg.student.encoder, &train, log)?.checkpoint;
    ck.config["run"] = cfg.effective();
    ck.save(out_ckpt)?;
    Ok(ck)
}

/// Generates evaluation trials from a manifest. The file starts with a
/// one-line config echo, which readers skip as a comment.
pub fn cmd_trials(cfg: &RunConfig, manifest: &Path, scenario: Scenario, out_file: &Path) -> Result<TrialSet> {
    cfg.validate()?;
    existing(manifest)?;
    let m = CorpusManifest::from_jsonl(&fs::read_to_string(manifest)?)?;
    let set = gen_trials(&m, scenario, &cfg.trials, cfg.trial_seed(scenario))?;
    let echo = serde_json::to_string(&cfg.effective())?;
    fs::write(out_file, format!("# config {echo}\n{}", set.to_text()))?;
    Ok(set)
}

/// Scores a trial file. Without a student checkpoint, every side is
/// embedded by the teacher.
pub fn cmd_eval(
    cfg: &RunConfig,
    trials: &Path,
    corpus_dir: &Path,
    teacher_ckpt: &Path,
    student_ckpt: Option<&Path>,
    mode: ScoringMode,
    out_json: &Path,
) -> Result<Report> {
    cfg.validate()?;
    existing(trials)?;
    let set = TrialSet::from_text(&fs::read_to_string(trials)?)?;
    let teacher = load_checkpoint(teacher_ckpt)?;
    let student = student_ckpt.map(load_checkpoint).transpose()?;
    let corpus = load_corpus(corpus_dir)?;
    set.audit(&corpus.manifest)?;
    let frontend = checkpoint_frontend(&teacher)?;
    if let Some(s) = &student {
        if checkpoint_frontend(s)?.config() != frontend.config() {
            return Err(Error::InvalidArgument("teacher and student were trained on different frontends".into()));
        }
    }
    let t_enc = teacher.encoder()?;
    let s_enc = student.as_ref().map(|s| s.encoder()).transpose()?;
    let models = Models {
        frontend: &frontend,
        teacher: &t_enc,
        student: s_enc.as_ref(),
        teacher_sha256: teacher.sha256()?,
        student_sha256: student.as_ref().map(|s| s.sha256()).transpose()?,
    };
    let report = evaluate(&set, &corpus, &models, mode, cfg.effective())?;
    fs::write(out_json, report.to_json()?)?;
    Ok(report)
}
