use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use mixspk::experiment::{self, RunConfig};
use mixspk::trainer::LossMode;
use mixspk::verify::{Scenario, ScoringMode};
use mixspk::Result;

/// Multi-speaker embedding extraction: corpus synthesis, training, trials,
/// evaluation and the desk-scale experiments.
#[derive(Parser)]
#[command(name = "mixspk", version)]
struct Cli {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize the corpus and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the single-speaker teacher.
    TrainTeacher {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train a two-speaker student.
    TrainStudent {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// ts_tpit | ts_upit | aam_pit_tpit | aam_pit_upit
        #[arg(long)]
        loss_mode: Option<LossMode>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Generate a trial file from a manifest.
    Trials {
        #[arg(long)]
        manifest: PathBuf,
        /// svs | svm | mvm
        #[arg(long)]
        scenario: Scenario,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trial file and write a JSON report.
    Eval {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Without a student, mixtures are embedded by the teacher.
        #[arg(long)]
        student: Option<PathBuf>,
        /// any_spk | per_spk
        #[arg(long, default_value = "any_spk")]
        mode: ScoringMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a desk-scale experiment (2, 3 or 4) and write a markdown report.
    Reproduce {
        table: u8,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.cmd {
        Cmd::Synth { out } => {
            let c = experiment::cmd_synth(&cfg, &out)?;
            println!("wrote {} utterances to {}", c.manifest.records.len(), out.display());
        }
        Cmd::TrainTeacher { corpus, out, log } => {
            experiment::cmd_train_teacher(&cfg, &corpus, &out, log.as_deref())?;
            println!("wrote {}", out.display());
        }
        Cmd::TrainStudent { teacher, corpus, out, loss_mode, log } => {
            if let Some(m) = loss_mode {
                cfg.student.train.loss_mode = m;
            }
            experiment::cmd_train_student(&cfg, &teacher, &corpus, &out, log.as_deref())?;
            println!("wrote {}", out.display());
        }
        Cmd::Trials { manifest, scenario, out } => {
            let set = experiment::cmd_trials(&cfg, &manifest, scenario, &out)?;
            println!("wrote {} trials to {}", set.trials.len(), out.display());
        }
        Cmd::Eval { trials, corpus, teacher, student, mode, out } => {
            let r = experiment::cmd_eval(&cfg, &trials, &corpus, &teacher, student.as_deref(), mode, &out)?;
            println!("{} {}: eer {:.4} min_dcf {:.4}", r.scenario, r.mode, r.eer, r.min_dcf);
        }
        Cmd::Reproduce { table, out } => {
            print!("{}", experiment::cmd_reproduce(&cfg, table, &out)?);
            log::info!("reports in {}", out.display());
        }
    }
    Ok(())
}

/// One machine-parsable line: `error: kind=<kind> msg="<message>"`.
fn report(kind: &str, msg: &str) {
    let msg = msg.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error: kind={kind} msg=\"{}\"", msg.replace('\\', "\\\\").replace('"', "\\\""));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MIXSPK_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let text = e.to_string();
            report("usage", text.lines().next().unwrap_or("").trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
