use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dafnet_cli::commands::{self, Context};
use dafnet_cli::{EditorKind, RunConfig};

#[derive(Parser)]
#[command(
    name = "dafnet",
    version,
    about = "Sequential knowledge editing on a toy language model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its statistics.
    Datagen {
        #[command(flatten)]
        common: Common,
        /// Pretrained model used for the likelihood branch of the long-tail rule.
        #[arg(long)]
        lm: Option<PathBuf>,
    },
    /// Pretrain the language model on the graph's facts.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Train the editor network.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the latest checkpoint in <out>/checkpoints.
        #[arg(long)]
        resume: bool,
    },
    /// Run a sequence of edits and report metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        editor: Option<EditorKind>,
        #[arg(long)]
        edits: Option<usize>,
        /// Comma-separated edit counts at which metrics are reported.
        #[arg(long, value_delimiter = ',')]
        checkpoints: Option<Vec<usize>>,
    },
    /// Write attn.csv from an existing journal.
    ExportAttn {
        #[command(flatten)]
        common: Common,
    },
}

fn context(common: &Common) -> anyhow::Result<Context> {
    let (config, text) = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => (RunConfig::default(), String::new()),
    };
    let mut ctx = Context::new(config.resolve(common.seed)?, text, &common.out);
    ctx.quiet = common.quiet;
    Ok(ctx)
}

fn run(cli: Cli) -> anyhow::Result<(&'static str, serde_json::Value)> {
    Ok(match cli.command {
        Command::Datagen { common, lm } => {
            let s = commands::cmd_datagen(&context(&common)?, lm.as_deref())?;
            ("datagen", serde_json::to_value(s)?)
        }
        Command::Pretrain { common } => {
            let losses = commands::cmd_pretrain(&context(&common)?)?;
            (
                "pretrain",
                serde_json::json!({ "final_loss": losses.last() }),
            )
        }
        Command::Train { common, resume } => {
            let s = commands::cmd_train(&context(&common)?, resume)?;
            (
                "train",
                serde_json::json!({ "iters": s.iters, "best_iter": s.best_iter, "t_now": s.t_now }),
            )
        }
        Command::Eval {
            common,
            editor,
            edits,
            checkpoints,
        } => {
            let mut ctx = context(&common)?;
            if let Some(e) = editor {
                ctx.config.eval.editor = e;
            }
            if edits.is_some() {
                ctx.config.eval.edits = edits;
            }
            if let Some(c) = checkpoints {
                ctx.config.eval.checkpoints = c;
            }
            ("eval", serde_json::to_value(commands::cmd_eval(&ctx)?)?)
        }
        Command::ExportAttn { common } => {
            let n = commands::cmd_export_attn(&context(&common)?)?;
            ("export-attn", serde_json::json!({ "rows": n }))
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok((command, summary)) => {
            println!(
                "{}",
                serde_json::json!({ "command": command, "ok": true, "summary": summary })
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!(
                "{}",
                serde_json::json!({ "ok": false, "error": chain.join(": ") })
            );
            ExitCode::FAILURE
        }
    }
}
