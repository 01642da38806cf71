use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use sada::bench::{
    ablate, export_artifacts, oracle_check, run_once, select_plan_on_val, shot_sweep,
    write_ablation_csv, write_diversity_csv, write_oracle_csv, write_plan_csv, write_runs_csv,
    ExperimentConfig, Suite,
};
use sada::pipeline::{
    load_checkpoint, save_checkpoint, write_metrics_csv, Predictor, TrainedState,
};

#[derive(Parser)]
#[command(
    name = "sada",
    version,
    about = "Few-shot prompt learning with selective attack and distribution alignment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Key-value config file; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train run 0 and write a checkpoint, metrics and class stats.
    Train(Common),
    /// Test accuracy of a checkpoint, or the multi-run protocol over the shot list.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run an ablation suite.
    Ablate {
        suite: String,
        #[command(flatten)]
        common: Common,
    },
    /// Choose an augmentation plan on the validation split.
    SelectPlan {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4)]
        groups: usize,
    },
    /// Check the alignment bound against exact oracles.
    OracleCheck(Common),
    /// Write attention maps, feature dumps and stats for a trained state.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut exp = match &c.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            text.parse::<ExperimentConfig>()?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        exp.train.seed = seed;
    }
    if let Some(shots) = c.shots {
        exp.data.shots = shots;
        exp.shot_list.clear();
    }
    if let Some(runs) = c.runs {
        exp.runs = runs;
    }
    exp.validate()?;
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(exp)
}

fn write_file(
    dir: &Path,
    name: &str,
    body: impl FnOnce(&mut BufWriter<File>) -> sada::Result<()>,
) -> Result<()> {
    let path = dir.join(name);
    let mut out = BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    );
    body(&mut out)?;
    out.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

fn train_run0(exp: &ExperimentConfig) -> Result<TrainedState> {
    let data = exp.dataset()?;
    let (record, state) = run_once(&exp.train, &data, exp.data.shots, 0)?;
    println!("test accuracy {:.4}", record.accuracy);
    Ok(state)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(c) => {
            let exp = load_config(&c)?;
            let state = train_run0(&exp)?;
            let ck = c.out.join("checkpoint.json");
            save_checkpoint(&state, &ck)?;
            println!("wrote {}", ck.display());
            write_file(&c.out, "metrics.csv", |w| {
                write_metrics_csv(w, &state.metrics)
            })?;
            if state.bank.is_initialized() {
                let rows = sada::pipeline::class_stats(&state)?;
                write_file(&c.out, "stats.csv", |w| {
                    sada::align::write_stats_csv(w, &rows)
                })?;
            }
        }
        Command::Eval {
            common: c,
            checkpoint,
        } => {
            let exp = load_config(&c)?;
            match checkpoint {
                Some(path) => {
                    let state = load_checkpoint(&path)?;
                    let data = exp.dataset()?;
                    let acc = Predictor::new(&state)?.accuracy(&data.test)?;
                    write_file(&c.out, "eval.csv", |w| {
                        writeln!(w, "checkpoint,test_images,accuracy")?;
                        writeln!(w, "{},{},{acc}", path.display(), data.test.len())?;
                        Ok(())
                    })?;
                }
                None => {
                    let results = shot_sweep(&exp)?;
                    write_file(&c.out, "summary.csv", |w| {
                        writeln!(w, "shots,runs,mean_acc,std_acc,digest")?;
                        for (shots, r) in &results {
                            writeln!(
                                w,
                                "{shots},{},{},{},{}",
                                r.runs.len(),
                                r.mean,
                                r.std,
                                r.digest
                            )?;
                        }
                        Ok(())
                    })?;
                    write_file(&c.out, "results.csv", |w| {
                        writeln!(w, "shots,run,seed,accuracy")?;
                        for (shots, r) in &results {
                            for x in &r.runs {
                                writeln!(w, "{shots},{},{},{}", x.run, x.seed, x.accuracy)?;
                            }
                        }
                        Ok(())
                    })?;
                }
            }
        }
        Command::Ablate { suite, common: c } => {
            let suite: Suite = suite.parse()?;
            let exp = load_config(&c)?;
            let rows = ablate(suite, &exp)?;
            write_file(&c.out, &format!("{suite}.csv"), |w| {
                write_ablation_csv(w, &rows)
            })?;
            write_file(&c.out, &format!("{suite}_runs.csv"), |w| {
                write_runs_csv(w, &rows)
            })?;
            if suite == Suite::PromptDiversity {
                write_file(&c.out, "prompt_diversity_table.csv", |w| {
                    write_diversity_csv(w, &rows)
                })?;
            }
        }
        Command::SelectPlan { common: c, groups } => {
            let exp = load_config(&c)?;
            let (best, scores) = select_plan_on_val(&exp, groups)?;
            write_file(&c.out, "plan.csv", |w| write_plan_csv(w, &best, &scores))?;
            let names: Vec<&str> = best.kinds().iter().map(|k| k.name()).collect();
            println!("plan = {}", names.join(","));
        }
        Command::OracleCheck(c) => {
            let exp = load_config(&c)?;
            let report = oracle_check(exp.train.seed)?;
            write_file(&c.out, "oracle.csv", |w| write_oracle_csv(w, &report))?;
            for check in &report.checks {
                let verdict = if check.passed() { "pass" } else { "FAIL" };
                println!(
                    "{verdict} {} ({} trials, {} failures)",
                    check.name, check.trials, check.failures
                );
            }
            return Ok(report.passed());
        }
        Command::Export {
            common: c,
            checkpoint,
        } => {
            let exp = load_config(&c)?;
            let state = match checkpoint {
                Some(path) => load_checkpoint(&path)?,
                None => train_run0(&exp)?,
            };
            for path in export_artifacts(&state, &exp.dataset()?, &c.out)? {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
