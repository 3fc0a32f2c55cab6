use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use vigil_core::metrics::GoldenCase;
use vigil_core::pipeline::{self, RunConfig, Study, Variant, Workspace};
use vigil_core::vocab::Mode;
use vigil_core::Error;

#[derive(Parser)]
#[command(name = "vigil", version, about = "Streaming video anomaly assistant on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and test splits.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Stage 1: distill the streaming STRD module from the offline teacher.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Stage 2: fine-tune LoRA adapters and the STRD output layer.
    Train {
        #[command(flatten)]
        common: Common,
        /// Feed raw encoder tokens to the LM (no STRD).
        #[arg(long)]
        no_strd: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// EOS loss weight.
        #[arg(long)]
        w: Option<f64>,
    },
    /// Stream the test split and log responses.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Mode,
        #[arg(long)]
        gamma: Option<f64>,
        /// Only this test stream.
        #[arg(long)]
        stream: Option<u32>,
        #[arg(long)]
        no_strd: bool,
    },
    /// Score a run, or a hand-authored fixture with `--fixture`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "fixture")]
        mode: Option<Mode>,
        #[arg(long)]
        no_strd: bool,
        #[arg(long)]
        fixture: Option<PathBuf>,
    },
    /// Ablation grids: STRD on/off, STRD depth, or the gamma sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        study: Study,
    },
    /// Step latency and throughput against cache length.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pairs: Option<usize>,
    },
}

fn config(common: &Common) -> vigil_core::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn variant(no_strd: bool) -> Variant {
    if no_strd {
        Variant::NoStrd
    } else {
        Variant::Full
    }
}

fn print<T: Serialize>(value: &T) -> vigil_core::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn open(common: &Common, edit: impl FnOnce(&mut RunConfig)) -> vigil_core::Result<Workspace> {
    let mut cfg = config(common)?;
    edit(&mut cfg);
    Workspace::open(cfg)
}

fn dispatch(cmd: Command) -> vigil_core::Result<()> {
    match cmd {
        Command::GenData { common, n_train, n_test } => {
            let ws = open(&common, |c| {
                c.data.n_train = n_train.unwrap_or(c.data.n_train);
                c.data.n_test = n_test.unwrap_or(c.data.n_test);
            })?;
            print(&pipeline::gen_data(&ws)?)
        }
        Command::Distill { common, epochs, lr } => {
            let ws = open(&common, |c| {
                c.distill.epochs = epochs.unwrap_or(c.distill.epochs);
                c.distill.lr = lr.unwrap_or(c.distill.lr);
            })?;
            print(&pipeline::distill(&ws)?)
        }
        Command::Train {
            common,
            no_strd,
            epochs,
            lr,
            w,
        } => {
            let ws = open(&common, |c| {
                c.finetune.epochs = epochs.unwrap_or(c.finetune.epochs);
                c.finetune.lr = lr.unwrap_or(c.finetune.lr);
                c.finetune.w = w.unwrap_or(c.finetune.w);
            })?;
            print(&pipeline::train(&ws, variant(no_strd))?)
        }
        Command::Run {
            common,
            mode,
            gamma,
            stream,
            no_strd,
        } => {
            let ws = open(&common, |_| {})?;
            let r = pipeline::run(&ws, variant(no_strd), mode, gamma, stream)?;
            print(&serde_json::json!({ "run": r.meta, "latency": r.latency }))
        }
        Command::Eval {
            common,
            mode,
            no_strd,
            fixture,
        } => {
            if let Some(path) = fixture {
                let case = GoldenCase::load(&path)?;
                let report = case.evaluate()?;
                print(&report)?;
                if !report.agrees_with(&case.expected, 1e-9) {
                    return Err(Error::Parse(format!("{}: report differs from the expected report", path.display())));
                }
                return Ok(());
            }
            let ws = open(&common, |_| {})?;
            let mode = mode.expect("clap enforces --mode");
            print(&pipeline::eval(&ws, variant(no_strd), mode)?)
        }
        Command::Ablate { common, study } => {
            let ws = open(&common, |_| {})?;
            let table = pipeline::ablate(&ws, study)?;
            print!("{}", table.tsv());
            Ok(())
        }
        Command::Bench { common, pairs } => {
            let ws = open(&common, |c| c.bench.pairs = pairs.unwrap_or(c.bench.pairs))?;
            print(&pipeline::bench(&ws)?)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Divergence { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Config("bad".into())), 1);
        assert_eq!(exit_code(&Error::Divergence { step: 4, loss: f64::NAN }), 3);
        assert_eq!(exit_code(&Error::Parse("x".into())), 2);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
