//! Desk-scale versions of the loss comparison, the teacher/student
//! verification comparison and the crosstalk analysis.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{write_json, RunConfig};
use crate::audio::{build_corpus, Corpus, MelFrontend};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Encoder};
use crate::trainer::{train_student, train_teacher, LossMode};
use crate::verify::{crosstalk_analysis, evaluate, gen_trials, CrosstalkTable, Models, Scenario, ScoringMode, TrialSet};

/// One trained student.
#[derive(Clone, Debug)]
pub struct StudentRun {
    pub mode: LossMode,
    pub run: usize,
    pub checkpoint: Checkpoint,
}

/// Corpus, teacher, students and evaluation trials of one desk run.
pub struct Desk {
    pub config: RunConfig,
    pub corpus: Corpus,
    pub frontend: MelFrontend,
    pub teacher: Checkpoint,
    pub students: Vec<StudentRun>,
    pub trials: BTreeMap<Scenario, TrialSet>,
}

impl Desk {
    /// Builds the corpus, trains the teacher and `reproduce.student_seeds`
    /// students per mode in `modes`.
    pub fn build(cfg: &RunConfig, modes: &[LossMode]) -> Result<Desk> {
        cfg.validate()?;
        let corpus = build_corpus(&cfg.corpus, cfg.corpus_seed())?;
        let frontend = MelFrontend::new(cfg.frontend.clone())?;
        log::info!("training teacher");
        let teacher = train_teacher(&corpus, &frontend, &cfg.teacher.encoder, &cfg.teacher_train(), None)?.checkpoint;
        let mut students = Vec::new();
        for &mode in modes {
            for run in 0..cfg.reproduce.student_seeds {
                log::info!("training student {mode} run {run}");
                let train = cfg.student_train(mode, run);
                let checkpoint = train_student(&teacher, &corpus, &frontend, &cfg.student.encoder, &train, None)?.checkpoint;
                students.push(StudentRun { mode, run, checkpoint });
            }
        }
        let mut trials = BTreeMap::new();
        for s in [Scenario::Svm, Scenario::Mvm] {
            trials.insert(s, gen_trials(&corpus.manifest, s, &cfg.trials, cfg.trial_seed(s))?);
        }
        Ok(Desk {
            config: cfg.clone(),
            corpus,
            frontend,
            teacher,
            students,
            trials,
        })
    }

    fn students_of(&self, mode: LossMode) -> Result<Vec<&StudentRun>> {
        let v: Vec<_> = self.students.iter().filter(|s| s.mode == mode).collect();
        if v.is_empty() {
            return Err(Error::InvalidArgument(format!("desk run has no {mode} student")));
        }
        Ok(v)
    }

    fn eval(&self, student: Option<&Checkpoint>, scenario: Scenario, mode: ScoringMode) -> Result<Metric> {
        let t_enc = self.teacher.encoder()?;
        let s_enc: Option<Encoder> = student.map(|s| s.encoder()).transpose()?;
        let models = Models {
            frontend: &self.frontend,
            teacher: &t_enc,
            student: s_enc.as_ref(),
            teacher_sha256: self.teacher.sha256()?,
            student_sha256: student.map(|s| s.sha256()).transpose()?,
        };
        let r = evaluate(&self.trials[&scenario], &self.corpus, &models, mode, Value::Null)?;
        Ok(Metric {
            eer: r.eer,
            min_dcf: r.min_dcf,
        })
    }

    fn eval_students(&self, mode: LossMode, scenario: Scenario, scoring: ScoringMode) -> Result<Vec<Metric>> {
        self.students_of(mode)?
            .iter()
            .map(|s| self.eval(Some(&s.checkpoint), scenario, scoring))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub eer: f64,
    pub min_dcf: f64,
}

impl Metric {
    fn mean(ms: &[Metric]) -> Metric {
        let n = ms.len() as f64;
        Metric {
            eer: ms.iter().map(|m| m.eer).sum::<f64>() / n,
            min_dcf: ms.iter().map(|m| m.min_dcf).sum::<f64>() / n,
        }
    }
}

/// A qualitative claim and whether the desk run reproduces it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub claim: String,
    pub holds: bool,
}

fn check(claim: impl Into<String>, holds: bool) -> TrendCheck {
    TrendCheck {
        claim: claim.into(),
        holds,
    }
}

fn label(mode: LossMode) -> &'static str {
    match mode {
        LossMode::Aam => "AAM (single speaker)",
        LossMode::TsTpit => "TS, tPIT",
        LossMode::TsUpit => "TS, uPIT",
        LossMode::AamPitTpit => "AAM-PIT, tPIT",
        LossMode::AamPitUpit => "AAM-PIT, uPIT",
    }
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn render_checks(out: &mut String, checks: &[TrendCheck]) {
    out.push_str("\n| Trend | Desk run |\n|---|---|\n");
    for c in checks {
        let _ = writeln!(out, "| {} | {} |", c.claim, if c.holds { "holds" } else { "does not hold" });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub loss_mode: LossMode,
    /// One entry per student seed.
    pub runs: Vec<Metric>,
    pub mean: Metric,
    pub reference: Metric,
}

/// m-vs-m any-spk results per student loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table2 {
    pub rows: Vec<Table2Row>,
    pub checks: Vec<TrendCheck>,
    pub config: Value,
}

impl Table2 {
    pub fn from_desk(desk: &Desk) -> Result<Table2> {
        let reference = |m| match m {
            LossMode::AamPitUpit => Metric { eer: 0.294, min_dcf: 1.0 },
            LossMode::AamPitTpit => Metric { eer: 0.295, min_dcf: 1.0 },
            LossMode::TsUpit => Metric { eer: 0.199, min_dcf: 0.88 },
            _ => Metric { eer: 0.141, min_dcf: 0.74 },
        };
        let mut rows = Vec::new();
        for mode in [LossMode::AamPitUpit, LossMode::AamPitTpit, LossMode::TsUpit, LossMode::TsTpit] {
            let runs = desk.eval_students(mode, Scenario::Mvm, ScoringMode::AnySpk)?;
            rows.push(Table2Row {
                loss_mode: mode,
                mean: Metric::mean(&runs),
                runs,
                reference: reference(mode),
            });
        }
        let eer = |m: LossMode| rows.iter().find(|r| r.loss_mode == m).expect("all modes present").mean.eer;
        let (tt, tu) = (eer(LossMode::TsTpit), eer(LossMode::TsUpit));
        let best_aam = eer(LossMode::AamPitTpit).min(eer(LossMode::AamPitUpit));
        let checks = vec![
            check("TS, tPIT < TS, uPIT", tt < tu),
            check("TS, uPIT < AAM-PIT, tPIT", tu < eer(LossMode::AamPitTpit)),
            check("TS, uPIT < AAM-PIT, uPIT", tu < eer(LossMode::AamPitUpit)),
            check("TS, tPIT at least 5 points below the best AAM-PIT", tt <= best_aam - 0.05),
        ];
        Ok(Table2 {
            rows,
            checks,
            config: desk.config.effective(),
        })
    }

    pub fn holds(&self) -> bool {
        self.checks.iter().all(|c| c.holds)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("## m-vs-m verification by student loss\n\n");
        s.push_str("| Loss | EER % (mean) | EER % per seed | minDCF (mean) | Ref. EER % | Ref. DCF |\n|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let per: Vec<String> = r.runs.iter().map(|m| pct(m.eer)).collect();
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.3} | {} | {} |",
                label(r.loss_mode),
                pct(r.mean.eer),
                per.join(" / "),
                r.mean.min_dcf,
                pct(r.reference.eer),
                r.reference.min_dcf
            );
        }
        render_checks(&mut s, &self.checks);
        s
    }
}

/// Teacher-only versus teacher+student verification on mixtures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table3 {
    pub teacher_teacher_svm: Metric,
    /// Mean over the TS-tPIT students.
    pub teacher_student_svm: Metric,
    pub teacher_teacher_mvm: Metric,
    pub student_mvm_any: Metric,
    pub student_mvm_per: Metric,
    pub checks: Vec<TrendCheck>,
    pub config: Value,
}

impl Table3 {
    pub fn from_desk(desk: &Desk) -> Result<Table3> {
        let mode = LossMode::TsTpit;
        let tt_svm = desk.eval(None, Scenario::Svm, ScoringMode::AnySpk)?;
        let tt_mvm = desk.eval(None, Scenario::Mvm, ScoringMode::AnySpk)?;
        let ts_svm = Metric::mean(&desk.eval_students(mode, Scenario::Svm, ScoringMode::AnySpk)?);
        let ss_any = Metric::mean(&desk.eval_students(mode, Scenario::Mvm, ScoringMode::AnySpk)?);
        let ss_per = Metric::mean(&desk.eval_students(mode, Scenario::Mvm, ScoringMode::PerSpk)?);
        let checks = vec![
            check("teacher+student s-vs-m EER < teacher+teacher s-vs-m EER", ts_svm.eer < tt_svm.eer),
            check("student m-vs-m EER at least 15 points below chance", ss_any.eer <= 0.35),
            check("teacher+teacher m-vs-m EER within 5 points of chance", (tt_mvm.eer - 0.5).abs() <= 0.05),
        ];
        Ok(Table3 {
            teacher_teacher_svm: tt_svm,
            teacher_student_svm: ts_svm,
            teacher_teacher_mvm: tt_mvm,
            student_mvm_any: ss_any,
            student_mvm_per: ss_per,
            checks,
            config: desk.config.effective(),
        })
    }

    pub fn holds(&self) -> bool {
        self.checks.iter().all(|c| c.holds)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("## Teacher-only versus teacher+student\n\n");
        s.push_str("| Model 1 | Model 2 | Scenario | Scoring | EER % | minDCF | Ref. EER % | Ref. DCF |\n|---|---|---|---|---|---|---|---|\n");
        let rows = [
            ("Teacher", "Teacher", "s-vs-m", "any", self.teacher_teacher_svm, 18.2, 0.57),
            ("Teacher", "Student", "s-vs-m", "any", self.teacher_student_svm, 9.1, 0.46),
            ("Teacher", "Teacher", "m-vs-m", "any", self.teacher_teacher_mvm, 47.6, 1.0),
            ("Student", "Student", "m-vs-m", "any", self.student_mvm_any, 15.3, 0.74),
            ("Student", "Student", "m-vs-m", "per", self.student_mvm_per, 14.1, 0.74),
        ];
        for (a, b, sc, mode, m, pe, pd) in rows {
            let _ = writeln!(s, "| {a} | {b} | {sc} | {mode} | {} | {:.3} | {pe} | {pd} |", pct(m.eer), m.min_dcf);
        }
        render_checks(&mut s, &self.checks);
        s
    }
}

/// Crosstalk similarities of the first TS-tPIT student on the m-vs-m mixtures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table4 {
    pub table: CrosstalkTable,
    pub checks: Vec<TrendCheck>,
    pub config: Value,
}

impl Table4 {
    pub fn from_desk(desk: &Desk) -> Result<Table4> {
        let student = &desk.students_of(LossMode::TsTpit)?[0].checkpoint;
        let (t_enc, s_enc) = (desk.teacher.encoder()?, student.encoder()?);
        let models = Models {
            frontend: &desk.frontend,
            teacher: &t_enc,
            student: Some(&s_enc),
            teacher_sha256: desk.teacher.sha256()?,
            student_sha256: Some(student.sha256()?),
        };
        let table = crosstalk_analysis(&desk.trials[&Scenario::Mvm].mixtures, &desk.corpus, &models)?;
        let st = &table.student;
        let checks = vec![
            check("cos(d̂1, d1) > cos(d̂1, d2)", st[0][0].mean > st[1][0].mean),
            check("cos(d̂2, d2) > cos(d̂2, d1)", st[1][1].mean > st[0][1].mean),
            check(
                "teacher on the mixture is closer to the dominant speaker",
                table.d_y_dominant.mean > table.d_y_weaker.mean,
            ),
            check("cos(dk, dk) = 1", table.teacher_diagonal == [1.0, 1.0]),
        ];
        Ok(Table4 {
            table,
            checks,
            config: desk.config.effective(),
        })
    }

    pub fn holds(&self) -> bool {
        self.checks.iter().all(|c| c.holds)
    }

    pub fn to_markdown(&self) -> String {
        let t = &self.table;
        let ms = |m: &crate::verify::MeanStd| format!("{:.2} ± {:.2}", m.mean, m.std);
        let mut s = format!("## Crosstalk similarities ({} mixtures)\n\n", t.n_examples);
        s.push_str("| Teacher | d̂1 | d̂2 | d1 | d2 | d_y | Ref. d̂1 | Ref. d̂2 | Ref. d_y |\n|---|---|---|---|---|---|---|---|---|\n");
        let _ = writeln!(
            s,
            "| d1 | {} | {} | {} | {} | {} | .67 | .19 | .78 |",
            ms(&t.student[0][0]),
            ms(&t.student[0][1]),
            t.teacher_diagonal[0],
            ms(&t.teacher_cross),
            ms(&t.d_y[0])
        );
        let _ = writeln!(
            s,
            "| d2 | {} | {} | {} | {} | {} | .13 | .40 | .22 |",
            ms(&t.student[1][0]),
            ms(&t.student[1][1]),
            ms(&t.teacher_cross),
            t.teacher_diagonal[1],
            ms(&t.d_y[1])
        );
        let _ = writeln!(
            s,
            "\nTeacher on the mixture: dominant speaker {}, weaker speaker {}.",
            ms(&t.d_y_dominant),
            ms(&t.d_y_weaker)
        );
        render_checks(&mut s, &self.checks);
        s
    }
}

/// Runs the pipeline for table 2, 3 or 4 and writes `table<N>.md`,
/// `table<N>.json` and the checkpoints under `out_dir`. Returns the markdown.
pub fn cmd_reproduce(cfg: &RunConfig, table: u8, out_dir: &Path) -> Result<String> {
    let modes: &[LossMode] = match table {
        2 => &LossMode::STUDENT,
        3 | 4 => &[LossMode::TsTpit],
        _ => return Err(Error::InvalidArgument(format!("no desk experiment for table {table} (2 | 3 | 4)"))),
    };
    let desk = Desk::build(cfg, modes)?;
    fs::create_dir_all(out_dir)?;
    desk.teacher.save(&out_dir.join("teacher.mseb"))?;
    for s in &desk.students {
        s.checkpoint.save(&out_dir.join(format!("student_{}_{}.mseb", s.mode, s.run)))?;
    }
    let (md, json) = match table {
        2 => {
            let t = Table2::from_desk(&desk)?;
            (t.to_markdown(), serde_json::to_value(&t)?)
        }
        3 => {
            let t = Table3::from_desk(&desk)?;
            (t.to_markdown(), serde_json::to_value(&t)?)
        }
        _ => {
            let t = Table4::from_desk(&desk)?;
            (t.to_markdown(), serde_json::to_value(&t)?)
        }
    };
    fs::write(out_dir.join(format!("table{table}.md")), &md)?;
    write_json(&out_dir.join(format!("table{table}.json")), &json)?;
    Ok(md)
}
