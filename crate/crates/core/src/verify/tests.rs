use super::*;
use crate::audio::{build_corpus, CorpusConfig, FrontendConfig, Split};
use crate::model::EncoderConfig;

fn small_corpus() -> Corpus {
    let cfg = CorpusConfig {
        n_speakers: 6,
        utterances_per_speaker: 3,
        duration_s: 0.5,
        eval_speakers: 4,
        ..CorpusConfig::default()
    };
    build_corpus(&cfg, 11).unwrap()
}

fn one_hot(spk: &str, n: usize) -> Vec<f32> {
    let i: usize = spk.trim_start_matches("spk").parse().unwrap();
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Oracle embeddings: a clean side is its speaker's one-hot code, a mixture
/// side gives each source's code.
fn oracle(set: &TrialSet, corpus: &Corpus, side: &str) -> Result<Vec<Vec<f32>>> {
    let spk_of = |id: &str| corpus.manifest.get(id).unwrap().speaker_ids[0].clone();
    Ok(match set.mixture(side) {
        Some(m) => m.sources.iter().map(|s| one_hot(&spk_of(s), 8)).collect(),
        None => vec![one_hot(&spk_of(side), 8)],
    })
}

#[test]
fn oracle_embeddings_give_zero_eer() {
    let corpus = small_corpus();
    let cfg = TrialConfig { n_trials: 40, ..TrialConfig::default() };
    for (scenario, modes) in [
        (Scenario::Svs, &[ScoringMode::AnySpk][..]),
        (Scenario::Svm, &[ScoringMode::AnySpk][..]),
        (Scenario::Mvm, &[ScoringMode::AnySpk, ScoringMode::PerSpk][..]),
    ] {
        let set = gen_trials(&corpus.manifest, scenario, &cfg, 3).unwrap();
        for &mode in modes {
            let (s, l) = score_trials(&set, mode, |side| oracle(&set, &corpus, side)).unwrap();
            assert_eq!(compute_eer(&s, &l).unwrap(), 0.0, "{scenario} {mode}");
            if mode == ScoringMode::PerSpk {
                assert_eq!(s.len(), 2 * set.trials.len());
                assert_eq!(l.iter().filter(|&&x| x).count(), set.n_targets());
            }
        }
    }
}

fn tiny_models<'a>(fe: &'a MelFrontend, t: &'a Encoder, s: Option<&'a Encoder>) -> Models<'a> {
    Models {
        frontend: fe,
        teacher: t,
        student: s,
        teacher_sha256: "t".into(),
        student_sha256: s.map(|_| "s".into()),
    }
}

fn tiny(k: usize) -> Encoder {
    Encoder::new(EncoderConfig { channels: 8, n_blocks: 1, n_outputs: k, ..EncoderConfig::default() }).unwrap()
}

#[test]
fn extraction_routing() {
    let corpus = small_corpus();
    let fe = MelFrontend::new(FrontendConfig::default()).unwrap();
    let (t, s) = (tiny(1), tiny(2));
    let set = gen_trials(&corpus.manifest, Scenario::Mvm, &TrialConfig { n_trials: 4, ..Default::default() }, 1).unwrap();
    let clean = &corpus.manifest.speakers(Split::Eval)[0];
    let clean = &corpus.manifest.by_speaker(Split::Eval)[clean][0];
    let mix = &set.mixtures[0].id;

    let ts = tiny_models(&fe, &t, Some(&s));
    assert_eq!(extract_for_side(clean, &set, &corpus, &ts).unwrap().len(), 1);
    assert_eq!(extract_for_side(mix, &set, &corpus, &ts).unwrap().len(), 2);
    let tt = tiny_models(&fe, &t, None);
    assert_eq!(extract_for_side(mix, &set, &corpus, &tt).unwrap().len(), 1);
    assert!(matches!(
        extract_for_side("nope", &set, &corpus, &ts),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn evaluate_rejects_undefined_modes_and_round_trips() {
    let corpus = small_corpus();
    let fe = MelFrontend::new(FrontendConfig::default()).unwrap();
    let (t, s) = (tiny(1), tiny(2));
    let cfg = TrialConfig { n_trials: 8, ..Default::default() };
    let svm = gen_trials(&corpus.manifest, Scenario::Svm, &cfg, 2).unwrap();
    let mvm = gen_trials(&corpus.manifest, Scenario::Mvm, &cfg, 2).unwrap();
    let ts = tiny_models(&fe, &t, Some(&s));
    let tt = tiny_models(&fe, &t, None);
    assert!(evaluate(&svm, &corpus, &ts, ScoringMode::PerSpk, Value::Null).is_err());
    assert!(evaluate(&mvm, &corpus, &tt, ScoringMode::PerSpk, Value::Null).is_err());

    let r = evaluate(&mvm, &corpus, &ts, ScoringMode::PerSpk, serde_json::json!({"k": 2})).unwrap();
    assert_eq!(r.n_scores, 16);
    assert_eq!(r.p_target, 0.05);
    assert!((0.0..=1.0).contains(&r.eer));
    let j = r.to_json().unwrap();
    let back = Report::from_json(&j).unwrap();
    assert_eq!(back, r);
    assert_eq!(back.to_json().unwrap(), j);
}

#[test]
fn crosstalk_table_shape() {
    let corpus = small_corpus();
    let fe = MelFrontend::new(FrontendConfig::default()).unwrap();
    let (t, s) = (tiny(1), tiny(2));
    let set = gen_trials(&corpus.manifest, Scenario::Mvm, &TrialConfig { n_trials: 6, ..Default::default() }, 5).unwrap();
    let tab = crosstalk_analysis(&set.mixtures, &corpus, &tiny_models(&fe, &t, Some(&s))).unwrap();
    assert_eq!(tab.n_examples, set.mixtures.len());
    assert_eq!(tab.teacher_diagonal, [1.0, 1.0]);
    // slot 1 is matched to the higher-similarity speaker
    assert!(tab.student[0][0].mean >= tab.student[1][1].mean);
    assert!(tab.d_y[0].mean >= tab.d_y[1].mean);
    assert!(crosstalk_analysis(&[], &corpus, &tiny_models(&fe, &t, None)).is_err());
}

#[test]
fn mean_std_is_population() {
    let m = MeanStd::of(&[1.0, 3.0]);
    assert_eq!((m.mean, m.std), (2.0, 1.0));
}
