use super::*;
use crate::audio::{build_corpus, CorpusConfig};

fn corpus(n_spk: usize, n_utt: usize) -> Corpus {
    let cfg = CorpusConfig {
        n_speakers: n_spk,
        utterances_per_speaker: n_utt,
        duration_s: 0.5,
        eval_speakers: 1,
        ..CorpusConfig::default()
    };
    build_corpus(&cfg, 7).unwrap()
}

fn frontend() -> MelFrontend {
    MelFrontend::new(FrontendConfig::default()).unwrap()
}

fn enc(k: usize) -> EncoderConfig {
    EncoderConfig {
        channels: 8,
        n_blocks: 1,
        embedding_dim: 8,
        n_outputs: k,
        ..EncoderConfig::default()
    }
}

fn quick(mode: LossMode) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        learning_rate: 3e-3,
        loss_mode: mode,
        target_refresh_epoch: 1,
        augmentation: Augmentation::disabled(),
        examples_per_epoch: Some(8),
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = [
        TrainConfig { epochs: 0, ..Default::default() },
        TrainConfig { ratio_min_db: 3.0, ratio_max_db: -3.0, ..Default::default() },
        TrainConfig { augmentation: Augmentation { probability: 1.5, ..Default::default() }, ..Default::default() },
        TrainConfig { learning_rate: f64::NAN, ..Default::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
    let c: TrainConfig = toml::from_str("epochs = 3\nloss_mode = \"ts_tpit\"\n[optimizer]\nkind = \"sgd\"\n").unwrap();
    assert_eq!((c.epochs, c.loss_mode, c.optimizer.kind), (3, LossMode::TsTpit, OptimizerKind::Sgd));
    assert!(toml::from_str::<TrainConfig>("epoch = 3").is_err());
    assert_eq!("aam-pit-upit".parse::<LossMode>().unwrap(), LossMode::AamPitUpit);
}

#[test]
fn teacher_needs_two_speakers() {
    let c = corpus(2, 2); // one train speaker
    let err = train_teacher(&c, &frontend(), &enc(1), &quick(LossMode::Aam), None).unwrap_err();
    assert!(matches!(err, Error::InsufficientData(_)));
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let c = corpus(3, 2);
    let cfg = TrainConfig { learning_rate: 0.0, ..quick(LossMode::Aam) };
    let out = train_teacher(&c, &frontend(), &enc(1), &cfg, None).unwrap();
    let fresh = Encoder::new(EncoderConfig { seed: derive_seed(5, "teacher-init"), ..enc(1) }).unwrap();
    assert_eq!(out.checkpoint.encoder().unwrap().params(), fresh.params());
}

#[test]
fn teacher_is_deterministic_and_logs() {
    let c = corpus(3, 3);
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let cfg = TrainConfig { augmentation: Augmentation::default(), crop_s: Some(0.3), ..quick(LossMode::Aam) };
    let a = train_teacher(&c, &frontend(), &enc(1), &cfg, Some(&log)).unwrap();
    let b = train_teacher(&c, &frontend(), &enc(1), &cfg, None).unwrap();
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    let lines: Vec<Value> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0]["train_accuracy"].is_number());
    assert!(lines[2]["final_train_accuracy"].is_number());
    assert!(a.checkpoint.tensor("head.w").is_some());
}

fn teacher_ckpt(c: &Corpus) -> Checkpoint {
    let cfg = TrainConfig { epochs: 1, ..quick(LossMode::Aam) };
    train_teacher(c, &frontend(), &enc(1), &cfg, None).unwrap().checkpoint
}

#[test]
fn refresh_schedule() {
    let c = corpus(4, 3);
    let fe = frontend();
    let teacher = teacher_ckpt(&c).encoder().unwrap();
    let bank = TargetBank::build(&teacher, &fe, &c).unwrap();
    let (speakers, by_spk) = train_speakers(&c).unwrap();
    let cfg = TrainConfig { target_refresh_epoch: 2, ..quick(LossMode::TsTpit) };
    let mut rng = rng_for(1, "t");
    for ex in draw_examples(&bank, &speakers, &by_spk, &cfg, 1, 20, &mut rng).unwrap() {
        assert_eq!(ex.target_sources, ex.sources);
        assert_ne!(c.manifest.get(&ex.sources[0]).unwrap().speaker_ids, c.manifest.get(&ex.sources[1]).unwrap().speaker_ids);
        for k in 0..2 {
            // freshly computed embedding of the exact source
            let w = c.waveform(&ex.sources[k]).unwrap();
            let fresh = teacher_forward(&teacher, &fe.logmel(w).unwrap(), "x").unwrap().0.vector;
            let cos = crate::tensorcore::cosine(&fresh, &ex.targets[k]).unwrap();
            assert!((cos - 1.0).abs() < 1e-6);
        }
        assert!((-5.0..=5.0).contains(&ex.ratio_db));
    }
    for ex in draw_examples(&bank, &speakers, &by_spk, &cfg, 2, 20, &mut rng).unwrap() {
        for k in 0..2 {
            assert_ne!(ex.target_sources[k], ex.sources[k]);
            let spk = |u: &str| c.manifest.get(u).unwrap().speaker_ids.clone();
            assert_eq!(spk(&ex.target_sources[k]), spk(&ex.sources[k]));
        }
    }
}

#[test]
fn student_modes_train_deterministically() {
    let c = corpus(4, 3);
    let teacher = teacher_ckpt(&c);
    let before = teacher.to_bytes().unwrap();
    for mode in LossMode::STUDENT {
        let cfg = quick(mode);
        let a = train_student(&teacher, &c, &frontend(), &enc(2), &cfg, None).unwrap();
        let b = train_student(&teacher, &c, &frontend(), &enc(2), &cfg, None).unwrap();
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap(), "{mode}");
        assert_eq!(a.checkpoint.tensor("head.w").is_some(), mode.is_aam_pit());
        assert_eq!(a.checkpoint.metrics[0]["refreshed_targets"], 0);
        assert!(a.checkpoint.metrics[1]["refreshed_targets"].as_u64().unwrap() > 0);
        assert_eq!(a.checkpoint.encoder().unwrap().n_outputs(), 2);
    }
    assert_eq!(teacher.to_bytes().unwrap(), before);
}

#[test]
fn student_rejects_dimension_mismatch() {
    let c = corpus(3, 2);
    let teacher = teacher_ckpt(&c);
    let cfg = quick(LossMode::TsTpit);
    let wide = EncoderConfig { embedding_dim: 12, ..enc(2) };
    assert!(matches!(train_student(&teacher, &c, &frontend(), &wide, &cfg, None), Err(Error::InvalidArgument(_))));
    assert!(train_student(&teacher, &c, &frontend(), &enc(2), &quick(LossMode::Aam), None).is_err());
}

#[test]
fn divergence_aborts() {
    let c = corpus(3, 2);
    let cfg = TrainConfig { learning_rate: 1e30, optimizer: OptimizerConfig { kind: OptimizerKind::Sgd, ..Default::default() }, epochs: 4, ..quick(LossMode::Aam) };
    match train_teacher(&c, &frontend(), &enc(1), &cfg, None) {
        Err(Error::Divergence { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|o| o.step_losses)),
    }
}

#[test]
fn loss_trend_medians() {
    let out = TrainOutcome {
        checkpoint: Checkpoint {
            kind: "t".into(),
            config: Value::Null,
            epoch: 0,
            rng_state: None,
            metrics: vec![],
            tensors: vec![],
        },
        step_losses: (0..20).rev().map(|v| v as f64).collect(),
    };
    assert_eq!(out.loss_trend(), (18.5, 0.5));
}
