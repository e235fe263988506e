//! Argument parsing and dispatch.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use sentiscale_core::config::ExperimentConfig;
use sentiscale_core::cyclegan::Direction;
use sentiscale_core::metrics::{aggregate_human_eval, import_human_eval};

use crate::error::{exit_code, Result};
use crate::pipeline::Pipeline;
use crate::service::{chat_turn, AppState, ChatRequest};
use crate::workspace::Workspace;

#[derive(Debug, Parser)]
#[command(name = "sentiscale", version, about = "Train, evaluate and serve sentiment-scalable dialogue models")]
pub struct Cli {
    /// Experiment directory holding raw/, data/, models/, reports/ and eval/.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// TOML config; defaults to <workdir>/config.toml when present.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. --set rl.iterations=100. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DirectionArg {
    Neg2pos,
    Pos2neg,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic toy corpus to raw/.
    GenToy {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Split raw corpora and build the vocabulary.
    PrepareData,
    TrainEmbeddings,
    TrainClassifier,
    TrainBaseline,
    TrainPersona,
    /// Seq2seq behind the coherence reward (train-rl runs it when missing).
    TrainCoherence,
    TrainDiscriminator,
    TrainRl,
    /// VRAE for plug-and-play; registers the plug-and-play responder.
    TrainVrae,
    TrainCyclegan,
    /// Independent evaluation models.
    TrainMetrics,
    Evaluate {
        /// Comma-separated model ids; all registered models when omitted.
        #[arg(long, value_delimiter = ',')]
        systems: Vec<String>,
        /// JSON report path; tables are written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sentiment transfer of one sentence.
    Transfer {
        #[arg(long, default_value = "cyclegan")]
        method: String,
        #[arg(long, value_enum, default_value = "neg2pos")]
        direction: DirectionArg,
        /// Plug-and-play latent run log (JSONL).
        #[arg(long)]
        log: Option<PathBuf>,
        text: String,
    },
    /// Terminal chat. `/model ID` and `/sentiment V` change settings.
    Chat {
        #[arg(long, default_value = "persona")]
        model: String,
        #[arg(long, default_value_t = 0.5)]
        sentiment: f64,
    },
    ExportHumanEval {
        #[arg(long, value_delimiter = ',')]
        systems: Vec<String>,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        sheet: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-system means of a filled-in annotation sheet.
    ImportHumanEval {
        #[arg(long)]
        sheet: PathBuf,
        #[arg(long)]
        key: PathBuf,
    },
    Serve {
        /// Overrides service.bind.
        #[arg(long)]
        bind: Option<String>,
    },
}

pub fn load_config(workdir: &Path, explicit: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let base = match explicit {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let default = workdir.join("config.toml");
            if default.exists() {
                ExperimentConfig::load(&default)?
            } else {
                ExperimentConfig::default()
            }
        }
    };
    Ok(base.with_overrides(overrides)?)
}

/// Parses `args` and runs the command; returns the process exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(&cli.workdir, cli.config.as_deref(), &cli.overrides)?;
    let p = Pipeline::new(Workspace::new(&cli.workdir), cfg);
    let line = match cli.command {
        Command::GenToy { seed } => p.gen_toy(seed.unwrap_or(p.cfg.data.toy_seed))?,
        Command::PrepareData => p.prepare_data()?,
        Command::TrainEmbeddings => p.train_embeddings()?,
        Command::TrainClassifier => p.train_classifier()?,
        Command::TrainBaseline => p.train_baseline()?,
        Command::TrainPersona => p.train_persona()?,
        Command::TrainCoherence => p.train_coherence()?,
        Command::TrainDiscriminator => p.train_discriminator()?,
        Command::TrainRl => p.train_rl()?,
        Command::TrainVrae => p.train_vrae()?,
        Command::TrainCyclegan => p.train_cyclegan()?,
        Command::TrainMetrics => p.train_metrics()?,
        Command::Evaluate { systems, out: path } => p.evaluate(&systems, path.as_deref())?.1,
        Command::Transfer { method, direction, log, text } => {
            let d = match direction {
                DirectionArg::Neg2pos => Direction::NegToPos,
                DirectionArg::Pos2neg => Direction::PosToNeg,
            };
            p.transfer(&method, &text, d, log.as_deref())?
        }
        Command::Chat { model, sentiment } => return repl(&p, model, sentiment, &mut std::io::stdin().lock(), out),
        Command::ExportHumanEval { systems, n, sheet, key, seed } => p.export_human_eval(&systems, n, &sheet, &key, seed)?,
        Command::ImportHumanEval { sheet, key } => {
            let agg = aggregate_human_eval(&import_human_eval(&sheet)?, &key)?;
            agg.iter().map(|(s, h)| format!("{s}\tcoherence {:.3}\tsentiment {:.3}\tgrammar {:.3}", h.coherence, h.sentiment, h.grammar)).collect::<Vec<_>>().join("\n")
        }
        Command::Serve { bind } => {
            let addr = bind.unwrap_or_else(|| p.cfg.service.bind.clone());
            let _guard = p.ws.mark_served()?;
            let state = AppState::load(p.ws.models())?;
            let rt = tokio::runtime::Runtime::new()?;
            return rt.block_on(crate::service::serve(state, &addr));
        }
    };
    writeln!(out, "{line}")?;
    Ok(())
}

/// Reads messages from `input` until EOF or `/quit`.
pub fn repl(p: &Pipeline, mut model: String, mut sentiment: f64, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    let state = AppState::load(p.ws.models())?;
    let snap = state.snapshot();
    let ids: Vec<&String> = snap.models.keys().collect();
    writeln!(out, "models: {}", ids.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", "))?;
    let mut line = String::new();
    loop {
        write!(out, "[{model} @ {sentiment:.2}]> ")?;
        out.flush()?;
        line.clear();
        if input.read_line(&mut line)? == 0 {
            break;
        }
        let msg = line.trim();
        if msg.is_empty() {
            continue;
        }
        if msg == "/quit" {
            break;
        }
        if let Some(m) = msg.strip_prefix("/model ") {
            model = m.trim().to_string();
            continue;
        }
        if let Some(v) = msg.strip_prefix("/sentiment ") {
            match v.trim().parse::<f64>() {
                Ok(v) if (0.0..=1.0).contains(&v) => sentiment = v,
                _ => writeln!(out, "sentiment must be a number in [0, 1]")?,
            }
            continue;
        }
        let req = ChatRequest { message: msg.to_string(), model_id: model.clone(), sentiment };
        match chat_turn(&snap, &req) {
            Ok(r) => {
                writeln!(out, "{}", r.reply)?;
                if let Some(s) = r.scores {
                    writeln!(out, "  coh1 {:.3}  coh2 {:.3}  scl {:.3}  lm {:.3}", s.coh1, s.coh2, s.scl, s.lm)?;
                }
                if let Some(n) = r.notice {
                    writeln!(out, "  ({n})")?;
                }
            }
            Err(e) => writeln!(out, "error: {}", e.message())?,
        }
    }
    Ok(())
}
