use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pfvg::commands::{cmd_ablation, cmd_bench, cmd_eval, cmd_generate, cmd_make_corpus, cmd_train, exit_code};
use pfvg::runconfig::RunConfig;
use pfvg::{Error, Result};

#[derive(Parser)]
#[command(name = "pfvg", version, about = "Autoregressive rectified-flow video generation with packed memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-stage training; writes checkpoints and a loss CSV.
    Train(Common),
    /// Autoregressive rollout from a checkpoint.
    Generate(Common),
    /// Start/end drift of rollouts on the corpus.
    Eval(Common),
    /// Memory-update timing against full attention.
    Bench(Common),
    /// Render the synthetic corpus to disk.
    MakeCorpus(Common),
    /// Train and evaluate each squeeze variant in `bench.variants`.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    /// key = value run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to generate/evaluate from, or to resume training from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Squeeze variant A, B or C.
    #[arg(long)]
    variant: Option<String>,
    /// teacher, direct or student:N.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    segments: Option<usize>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self, command: &str) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            match command {
                "eval" => cfg.set("eval.seeds", &s.to_string())?,
                _ => cfg.set("seed", &s.to_string())?,
            }
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(v) = &self.variant {
            match command {
                "bench" | "ablate" => cfg.set("bench.variants", v)?,
                _ => cfg.set("model.squeeze_variant", v)?,
            }
        }
        if let Some(m) = &self.mode {
            let key = match command {
                "eval" => "eval.modes",
                "generate" => "generate.mode",
                "train" if cfg.stage2.is_some() => "stage2.mode",
                _ => "stage1.mode",
            };
            cfg.set(key, m)?;
        }
        if let Some(n) = self.segments {
            let key = if command == "eval" { "eval.segments" } else { "generate.segments" };
            cfg.set(key, &n.to_string())?;
        }
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config("--set", format!("expected key=value, got {o:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn checkpoint(&self) -> Result<&PathBuf> {
        self.checkpoint
            .as_ref()
            .ok_or_else(|| Error::config("--checkpoint", "required for this command"))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = c.resolve("train")?;
            let out = cmd_train(&cfg, c.checkpoint.as_deref())?;
            for p in out.checkpoints {
                println!("checkpoint {}", p.display());
            }
            println!("loss log {}", out.loss_csv.display());
        }
        Command::Generate(c) => {
            let cfg = c.resolve("generate")?;
            let seed = c.seed.unwrap_or(cfg.seed);
            let path = cmd_generate(&cfg, c.checkpoint()?, seed)?;
            println!("video {}", path.display());
        }
        Command::Eval(c) => {
            let cfg = c.resolve("eval")?;
            let (path, report) = cmd_eval(&cfg, c.checkpoint()?)?;
            if report.excluded > 0 {
                eprintln!("{} rollouts produced non-finite frames and were excluded", report.excluded);
            }
            println!("drift report {}", path.display());
        }
        Command::Bench(c) => {
            let cfg = c.resolve("bench")?;
            println!("bench {}", cmd_bench(&cfg)?.display());
        }
        Command::Ablate(c) => {
            let cfg = c.resolve("ablate")?;
            println!("ablation {}", cmd_ablation(&cfg)?.0.display());
        }
        Command::MakeCorpus(c) => {
            let cfg = c.resolve("make-corpus")?;
            println!("corpus {}", cmd_make_corpus(&cfg)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
