//! Trial generation and the plain-text trial file.
//!
//! ```text
//! #! scenario mvm
//! #! seed 7
//! #! manifest_hash 3f1c…
//! #! mixture mix00000 spk014-u003 spk017-u021 -2.5
//! mvm 1 mix00000 mix00001
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{CorpusManifest, Split};
use crate::error::{Error, Result};
use crate::seeds::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Svs,
    Svm,
    Mvm,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Svs, Scenario::Svm, Scenario::Mvm];

    /// Target prior used for minDCF.
    pub fn p_target(self) -> f64 {
        match self {
            Scenario::Svs => 0.01,
            Scenario::Svm | Scenario::Mvm => 0.05,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Svs => "svs",
            Scenario::Svm => "svm",
            Scenario::Mvm => "mvm",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svs" => Ok(Scenario::Svs),
            "svm" => Ok(Scenario::Svm),
            "mvm" => Ok(Scenario::Mvm),
            _ => Err(Error::InvalidArgument(format!("unknown scenario {s:?} (svs | svm | mvm)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub scenario: Scenario,
    pub n_shared: usize,
    pub side_a: String,
    pub side_b: String,
}

/// A two-speaker mixture referenced by trials: `sources[0]` over
/// `sources[1]` at `ratio_db`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub id: String,
    pub sources: [String; 2],
    pub ratio_db: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialSet {
    pub scenario: Scenario,
    pub seed: u64,
    pub manifest_hash: String,
    pub mixtures: Vec<MixtureSpec>,
    pub trials: Vec<Trial>,
}

impl TrialSet {
    pub fn n_targets(&self) -> usize {
        self.trials.iter().filter(|t| t.n_shared > 0).count()
    }

    pub fn mixture(&self, id: &str) -> Option<&MixtureSpec> {
        self.mixtures.iter().find(|m| m.id == id)
    }

    /// Speakers present on a side, resolved through the mixture table.
    pub fn speakers_of(&self, manifest: &CorpusManifest, side: &str) -> Result<Vec<String>> {
        let utt_speaker = |id: &str| -> Result<String> {
            manifest
                .get(id)
                .and_then(|r| r.speaker_ids.first().cloned())
                .ok_or_else(|| Error::InvalidArgument(format!("utterance {id} not in manifest")))
        };
        match self.mixture(side) {
            Some(m) => Ok(vec![utt_speaker(&m.sources[0])?, utt_speaker(&m.sources[1])?]),
            None => Ok(vec![utt_speaker(side)?]),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "#! scenario {}\n#! seed {}\n#! manifest_hash {}\n",
            self.scenario, self.seed, self.manifest_hash
        );
        for m in &self.mixtures {
            s.push_str(&format!("#! mixture {} {} {} {}\n", m.id, m.sources[0], m.sources[1], m.ratio_db));
        }
        for t in &self.trials {
            s.push_str(&format!("{} {} {} {}\n", t.scenario, t.n_shared, t.side_a, t.side_b));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |n: usize, m: &str| Error::Format(format!("trial file line {n}: {m}"));
        let mut scenario = None;
        let mut seed = None;
        let mut manifest_hash = String::new();
        let mut mixtures = Vec::new();
        let mut trials = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f[0] == "#!" {
                match f.get(1).copied() {
                    Some("scenario") if f.len() == 3 => scenario = Some(f[2].parse::<Scenario>()?),
                    Some("seed") if f.len() == 3 => seed = Some(f[2].parse::<u64>().map_err(|_| bad(n, "bad seed"))?),
                    Some("manifest_hash") if f.len() == 3 => manifest_hash = f[2].to_string(),
                    Some("mixture") if f.len() == 6 => mixtures.push(MixtureSpec {
                        id: f[2].to_string(),
                        sources: [f[3].to_string(), f[4].to_string()],
                        ratio_db: f[5].parse().map_err(|_| bad(n, "bad ratio"))?,
                    }),
                    _ => return Err(bad(n, "unknown directive")),
                }
                continue;
            }
            if f[0].starts_with('#') {
                continue;
            }
            if f.len() != 4 {
                return Err(bad(n, "expected `<scenario> <n_shared> <id_a> <id_b>`"));
            }
            trials.push(Trial {
                scenario: f[0].parse()?,
                n_shared: f[1].parse().map_err(|_| bad(n, "bad n_shared"))?,
                side_a: f[2].to_string(),
                side_b: f[3].to_string(),
            });
        }
        if trials.is_empty() {
            return Err(Error::InvalidArgument("trial file contains no trials".into()));
        }
        let scenario = scenario.unwrap_or(trials[0].scenario);
        if trials.iter().any(|t| t.scenario != scenario) {
            return Err(Error::Format("trial file mixes scenarios".into()));
        }
        Ok(TrialSet {
            scenario,
            seed: seed.unwrap_or(0),
            manifest_hash,
            mixtures,
            trials,
        })
    }

    /// Checks labels against the manifest, the sharing cap and duplicates.
    pub fn audit(&self, manifest: &CorpusManifest) -> Result<()> {
        let mut seen = BTreeSet::new();
        for t in &self.trials {
            if !seen.insert((&t.side_a, &t.side_b)) {
                return Err(Error::Format(format!("duplicate trial {} {}", t.side_a, t.side_b)));
            }
            let a: BTreeSet<String> = self.speakers_of(manifest, &t.side_a)?.into_iter().collect();
            let b: BTreeSet<String> = self.speakers_of(manifest, &t.side_b)?.into_iter().collect();
            let shared = a.intersection(&b).count();
            if shared != t.n_shared || shared > 1 {
                return Err(Error::Format(format!(
                    "trial {} {}: label says {} shared, sides share {shared}",
                    t.side_a, t.side_b, t.n_shared
                )));
            }
        }
        Ok(())
    }
}

/// Trial generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrialConfig {
    pub n_trials: usize,
    pub ratio_min_db: f64,
    pub ratio_max_db: f64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        TrialConfig {
            n_trials: 400,
            ratio_min_db: -5.0,
            ratio_max_db: 5.0,
        }
    }
}

struct Builder<'a, R: Rng> {
    rng: &'a mut R,
    pool: &'a BTreeMap<String, Vec<String>>,
    speakers: Vec<String>,
    cfg: &'a TrialConfig,
    mixtures: Vec<MixtureSpec>,
}

impl<R: Rng> Builder<'_, R> {
    fn speakers(&mut self, n: usize) -> Vec<String> {
        self.speakers.choose_multiple(self.rng, n).cloned().collect()
    }

    fn utterances(&mut self, spk: &str, n: usize) -> Vec<String> {
        self.pool[spk].choose_multiple(self.rng, n).cloned().collect()
    }

    fn mixture(&mut self, a: String, b: String) -> String {
        let id = format!("mix{:05}", self.mixtures.len());
        let ratio_db = self.rng.gen_range(self.cfg.ratio_min_db..=self.cfg.ratio_max_db);
        let sources = if self.rng.gen::<bool>() { [a, b] } else { [b, a] };
        self.mixtures.push(MixtureSpec {
            id: id.clone(),
            sources,
            ratio_db,
        });
        id
    }
}

/// Generates a trial set over the evaluation split. Even-indexed trials are
/// targets (one shared speaker), odd-indexed ones nontargets.
pub fn gen_trials(manifest: &CorpusManifest, scenario: Scenario, cfg: &TrialConfig, seed: u64) -> Result<TrialSet> {
    if cfg.n_trials == 0 {
        return Err(Error::Config("n_trials must be positive".into()));
    }
    if !(cfg.ratio_min_db <= cfg.ratio_max_db) {
        return Err(Error::Config("trial ratio range is not ordered".into()));
    }
    let pool = manifest.by_speaker(Split::Eval);
    let needed = match scenario {
        Scenario::Svs => 2,
        Scenario::Svm => 3,
        Scenario::Mvm => 4,
    };
    let speakers: Vec<String> = pool.iter().filter(|(_, u)| u.len() >= 2).map(|(s, _)| s.clone()).collect();
    if speakers.len() < needed {
        return Err(Error::InsufficientData(format!(
            "{scenario} trials need {needed} evaluation speakers with >= 2 utterances, found {}",
            speakers.len()
        )));
    }
    let mut rng = rng_for(seed, &format!("trials-{scenario}"));
    let mut b = Builder {
        rng: &mut rng,
        pool: &pool,
        speakers,
        cfg,
        mixtures: Vec::new(),
    };
    let mut trials = Vec::with_capacity(cfg.n_trials);
    let mut seen = BTreeSet::new();
    let mut attempts = 0;
    while trials.len() < cfg.n_trials {
        attempts += 1;
        if attempts > 100 * cfg.n_trials {
            return Err(Error::InsufficientData(format!(
                "could not draw {} distinct {scenario} trials",
                cfg.n_trials
            )));
        }
        let target = trials.len() % 2 == 0;
        let (a, b_side) = match (scenario, target) {
            (Scenario::Svs, true) => {
                let s = b.speakers(1);
                let u = b.utterances(&s[0], 2);
                (u[0].clone(), u[1].clone())
            }
            (Scenario::Svs, false) => {
                let s = b.speakers(2);
                (b.utterances(&s[0], 1).remove(0), b.utterances(&s[1], 1).remove(0))
            }
            (Scenario::Svm, _) => {
                let s = b.speakers(3);
                let other = if target { s[0].clone() } else { s[2].clone() };
                let ua = b.utterances(&s[0], 2);
                let uo = if target { ua[1].clone() } else { b.utterances(&other, 1).remove(0) };
                let ub = b.utterances(&s[1], 1).remove(0);
                let m = b.mixture(uo, ub);
                (ua[0].clone(), m)
            }
            (Scenario::Mvm, _) => {
                let s = b.speakers(4);
                let ua = b.utterances(&s[0], 2);
                let ub = b.utterances(&s[1], 1).remove(0);
                let shared_or_c = if target { ua[1].clone() } else { b.utterances(&s[2], 1).remove(0) };
                let ud = b.utterances(&s[3], 1).remove(0);
                let ma = b.mixture(ua[0].clone(), ub);
                let mb = b.mixture(shared_or_c, ud);
                (ma, mb)
            }
        };
        if (scenario == Scenario::Svs) && !seen.insert((a.clone(), b_side.clone())) {
            continue;
        }
        trials.push(Trial {
            scenario,
            n_shared: usize::from(target),
            side_a: a,
            side_b: b_side,
        });
    }
    Ok(TrialSet {
        scenario,
        seed,
        manifest_hash: manifest.hash(),
        mixtures: b.mixtures,
        trials,
    })
}
