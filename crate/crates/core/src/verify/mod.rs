//! Multi-speaker verification: trials, embedding extraction, scoring,
//! metrics and the cross-talker similarity analysis.
//!
//! Clean trial sides are embedded by the teacher and mixture sides by the
//! student, one embedding per speaker. In teacher-only mode the teacher also
//! embeds mixtures, yielding a single embedding `d_y`.

mod metrics;
mod scoring;
mod trials;

pub use metrics::{compute_eer, compute_min_dcf, operating_points};
pub use scoring::{cosine_matrix, greedy_pairs, score_any_spk, score_per_spk};
pub use trials::{gen_trials, MixtureSpec, Scenario, Trial, TrialConfig, TrialSet};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::audio::{mix_signals, Corpus, MelFrontend, Waveform};
use crate::error::{Error, Result};
use crate::losses::pit_assign;
use crate::model::{student_forward, teacher_forward, Encoder};
use crate::tensorcore::cosine;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    AnySpk,
    PerSpk,
}

impl fmt::Display for ScoringMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoringMode::AnySpk => "any_spk",
            ScoringMode::PerSpk => "per_spk",
        })
    }
}

impl FromStr for ScoringMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "any_spk" | "any-spk" => Ok(ScoringMode::AnySpk),
            "per_spk" | "per-spk" => Ok(ScoringMode::PerSpk),
            _ => Err(Error::InvalidArgument(format!("unknown scoring mode {s:?} (any_spk | per_spk)"))),
        }
    }
}

/// Which network embeds mixture sides.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extraction {
    TeacherStudent,
    TeacherOnly,
}

/// Models used for extraction, with the hashes echoed into reports.
pub struct Models<'a> {
    pub frontend: &'a MelFrontend,
    pub teacher: &'a Encoder,
    pub student: Option<&'a Encoder>,
    pub teacher_sha256: String,
    pub student_sha256: Option<String>,
}

impl Models<'_> {
    pub fn extraction(&self) -> Extraction {
        if self.student.is_some() {
            Extraction::TeacherStudent
        } else {
            Extraction::TeacherOnly
        }
    }

    pub fn teacher_embedding(&self, w: &Waveform) -> Result<Vec<f32>> {
        let feats = self.frontend.logmel(w)?;
        Ok(teacher_forward(self.teacher, &feats, &w.utterance_id)?.0.vector)
    }

    pub fn student_embeddings(&self, w: &Waveform) -> Result<Vec<Vec<f32>>> {
        let student = self
            .student
            .ok_or_else(|| Error::InvalidArgument("no student model loaded".into()))?;
        let feats = self.frontend.logmel(w)?;
        Ok(student_forward(student, &feats, &w.utterance_id)?
            .0
            .into_iter()
            .map(|e| e.vector)
            .collect())
    }
}

/// Builds the waveform of a trial-set mixture from the corpus.
pub fn materialize(corpus: &Corpus, m: &MixtureSpec) -> Result<Waveform> {
    let a = corpus.waveform(&m.sources[0])?;
    let b = corpus.waveform(&m.sources[1])?;
    Ok(mix_signals(a, b, m.ratio_db, &m.id)?.waveform)
}

/// Embeddings of one trial side: one teacher embedding for a clean
/// utterance, one per speaker from the student for a mixture, or one teacher
/// embedding `d_y` for a mixture in teacher-only mode.
pub fn extract_for_side(side: &str, set: &TrialSet, corpus: &Corpus, models: &Models) -> Result<Vec<Vec<f32>>> {
    match set.mixture(side) {
        None => {
            let w = corpus.waveform(side).map_err(|_| Error::InvalidArgument(format!("missing audio for {side}")))?;
            Ok(vec![models.teacher_embedding(w)?])
        }
        Some(spec) => {
            let w = materialize(corpus, spec)?;
            match models.student {
                Some(_) => models.student_embeddings(&w),
                None => Ok(vec![models.teacher_embedding(&w)?]),
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scenario: Scenario,
    pub mode: ScoringMode,
    pub extraction: Extraction,
    pub eer: f64,
    pub min_dcf: f64,
    pub p_target: f64,
    pub n_trials: usize,
    pub n_scores: usize,
    pub teacher_sha256: String,
    pub student_sha256: Option<String>,
    pub seed: u64,
    pub config: Value,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn check_mode(set: &TrialSet, mode: ScoringMode, extraction: Extraction) -> Result<()> {
    if set.trials.is_empty() {
        return Err(Error::InvalidArgument("empty trial set".into()));
    }
    if mode == ScoringMode::PerSpk {
        if set.scenario != Scenario::Mvm {
            return Err(Error::InvalidArgument(format!(
                "per_spk scoring is defined for mvm trials only, not {}",
                set.scenario
            )));
        }
        if extraction == Extraction::TeacherOnly {
            return Err(Error::InvalidArgument(
                "per_spk scoring needs K embeddings per mixture; teacher-only mode yields one".into(),
            ));
        }
    }
    Ok(())
}

/// Pooled `(scores, labels)` of a trial set. `embed` is called once per
/// distinct side.
pub fn score_trials<F>(set: &TrialSet, mode: ScoringMode, mut embed: F) -> Result<(Vec<f64>, Vec<bool>)>
where
    F: FnMut(&str) -> Result<Vec<Vec<f32>>>,
{
    let mut cache: BTreeMap<&str, Vec<Vec<f32>>> = BTreeMap::new();
    for t in &set.trials {
        for side in [t.side_a.as_str(), t.side_b.as_str()] {
            if !cache.contains_key(side) {
                cache.insert(side, embed(side)?);
            }
        }
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for t in &set.trials {
        let (a, b) = (&cache[t.side_a.as_str()], &cache[t.side_b.as_str()]);
        match mode {
            ScoringMode::AnySpk => {
                scores.push(score_any_spk(a, b)?);
                labels.push(t.n_shared > 0);
            }
            ScoringMode::PerSpk => {
                for (s, l) in score_per_spk(a, b, t.n_shared)? {
                    scores.push(s);
                    labels.push(l);
                }
            }
        }
    }
    Ok((scores, labels))
}

/// Scores every trial, pools the scores and computes EER and minDCF.
pub fn evaluate(set: &TrialSet, corpus: &Corpus, models: &Models, mode: ScoringMode, config: Value) -> Result<Report> {
    check_mode(set, mode, models.extraction())?;
    let (scores, labels) = score_trials(set, mode, |side| extract_for_side(side, set, corpus, models))?;
    let p_target = set.scenario.p_target();
    Ok(Report {
        scenario: set.scenario,
        mode,
        extraction: models.extraction(),
        eer: compute_eer(&scores, &labels)?,
        min_dcf: compute_min_dcf(&scores, &labels, p_target, 1.0, 1.0)?,
        p_target,
        n_trials: set.trials.len(),
        n_scores: scores.len(),
        teacher_sha256: models.teacher_sha256.clone(),
        student_sha256: models.student_sha256.clone(),
        seed: set.seed,
        config,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return MeanStd::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

/// Mean cosine similarities between mixture and clean-source embeddings.
///
/// Per example, speaker 1 is the one with the higher similarity: for the
/// student after matching slots to speakers by the best permutation, for
/// `d_y` directly. `d_y_dominant` / `d_y_weaker` instead order the speakers
/// by their power in the mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrosstalkTable {
    pub n_examples: usize,
    /// `student[j][i]` = cos(d̂_i, d_j).
    pub student: [[MeanStd; 2]; 2],
    /// cos(d_1, d_2) between the clean teacher embeddings.
    pub teacher_cross: MeanStd,
    /// cos(d_k, d_k), computed.
    pub teacher_diagonal: [f64; 2],
    /// cos(d_y, d_j) under the higher-first ordering.
    pub d_y: [MeanStd; 2],
    pub d_y_dominant: MeanStd,
    pub d_y_weaker: MeanStd,
}

pub fn crosstalk_analysis(mixtures: &[MixtureSpec], corpus: &Corpus, models: &Models) -> Result<CrosstalkTable> {
    if mixtures.is_empty() {
        return Err(Error::InvalidArgument("no mixtures to analyse".into()));
    }
    let mut st = [[vec![], vec![]], [vec![], vec![]]];
    let (mut cross, mut dy1, mut dy2, mut dom, mut weak) = (vec![], vec![], vec![], vec![], vec![]);
    let mut diag = [f64::INFINITY; 2];
    let c = |a: &[f32], b: &[f32]| -> Result<f64> {
        cosine(&a.iter().map(|&v| v as f64).collect::<Vec<_>>(), &b.iter().map(|&v| v as f64).collect::<Vec<_>>())
    };
    for m in mixtures {
        let clean = [corpus.waveform(&m.sources[0])?, corpus.waveform(&m.sources[1])?];
        let d = [models.teacher_embedding(clean[0])?, models.teacher_embedding(clean[1])?];
        for k in 0..2 {
            diag[k] = diag[k].min(c(&d[k], &d[k])?);
        }
        cross.push(c(&d[0], &d[1])?);
        let y = materialize(corpus, m)?;
        let dy = models.teacher_embedding(&y)?;
        let s = [c(&dy, &d[0])?, c(&dy, &d[1])?];
        let dominant = if m.ratio_db >= 0.0 { 0 } else { 1 };
        dom.push(s[dominant]);
        weak.push(s[1 - dominant]);
        dy1.push(s[0].max(s[1]));
        dy2.push(s[0].min(s[1]));

        if models.student.is_some() {
            let dh = models.student_embeddings(&y)?;
            if dh.len() != 2 {
                return Err(Error::Unsupported("crosstalk analysis expects K = 2".into()));
            }
            // m[j][i] = cos(d̂_i, d_j); cost is negative similarity
            let sim: Vec<Vec<f64>> = (0..2)
                .map(|j| (0..2).map(|i| c(&dh[i], &d[j])).collect::<Result<Vec<_>>>())
                .collect::<Result<_>>()?;
            let neg: Vec<Vec<f64>> = sim.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
            let (p, _) = pit_assign(&neg)?;
            // speaker order: higher matched similarity first
            let spk = if sim[0][p.0[0]] >= sim[1][p.0[1]] { [0, 1] } else { [1, 0] };
            let slot = [p.0[spk[0]], p.0[spk[1]]];
            for j in 0..2 {
                for i in 0..2 {
                    st[j][i].push(sim[spk[j]][slot[i]]);
                }
            }
        }
    }
    let ms = |v: &Vec<f64>| MeanStd::of(v);
    Ok(CrosstalkTable {
        n_examples: mixtures.len(),
        student: [[ms(&st[0][0]), ms(&st[0][1])], [ms(&st[1][0]), ms(&st[1][1])]],
        teacher_cross: ms(&cross),
        teacher_diagonal: diag,
        d_y: [ms(&dy1), ms(&dy2)],
        d_y_dominant: ms(&dom),
        d_y_weaker: ms(&weak),
    })
}

#[cfg(test)]
mod tests;
