use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use taste::pipeline::{self, resolve_config, Overrides, Run};
use taste::AppResult;

#[derive(Parser)]
#[command(name = "taste", version, about = "Text-aligned speech tokenizer and spoken language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Tokenizer variant, e.g. enc+agg+quan or text-only.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Speech stream of the language model: token or embed.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Echo per-epoch metrics to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its manifest.
    GenCorpus(#[command(flatten)] Common),
    /// Train one tokenizer variant.
    TrainTokenizer(#[command(flatten)] Common),
    /// Adapt the text model to joint text and speech codes.
    TrainSlm(#[command(flatten)] Common),
    /// Export token- and word-level codes of every utterance.
    Tokenize(#[command(flatten)] Common),
    /// Regenerate held-out units and report their accuracy.
    Reconstruct(#[command(flatten)] Common),
    /// Continue held-out prompts jointly in text and speech.
    Continue(#[command(flatten)] Common),
    /// Rank true continuations against shuffled ones.
    Score(#[command(flatten)] Common),
    /// Swap word codes between two renditions of the same sentence.
    Edit {
        id_a: String,
        id_b: String,
        /// Zero-based word positions to swap; none leaves both unchanged.
        words: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Token frequency and bitrate of the exported codes.
    Bitrate(#[command(flatten)] Common),
}

fn start(c: &Common) -> AppResult<Run> {
    let ov = Overrides {
        seed: c.seed,
        variant: c.variant.clone(),
        mode: c.mode.clone(),
        out: c.out.clone(),
    };
    let cfg = resolve_config(c.config.as_deref(), &ov)?;
    Run::new(cfg, c.verbose)
}

fn execute(cmd: Command) -> AppResult<String> {
    let (common, edit) = match &cmd {
        Command::Edit { id_a, id_b, words, common } => (common, Some((id_a.clone(), id_b.clone(), words.clone()))),
        Command::GenCorpus(c)
        | Command::TrainTokenizer(c)
        | Command::TrainSlm(c)
        | Command::Tokenize(c)
        | Command::Reconstruct(c)
        | Command::Continue(c)
        | Command::Score(c)
        | Command::Bitrate(c) => (c, None),
    };
    let mut run = start(common)?;
    let out = match cmd {
        Command::GenCorpus(_) => {
            let m = pipeline::gen_corpus(&mut run)?;
            format!("{} utterances written to {}", m.records.len(), run.cfg.manifest_path().display())
        }
        Command::TrainTokenizer(_) => pipeline::summary(&pipeline::train_tokenizer_cmd(&mut run)?),
        Command::TrainSlm(_) => pipeline::summary(&pipeline::train_slm_cmd(&mut run)?),
        Command::Tokenize(_) => {
            let r = pipeline::tokenize_cmd(&mut run)?;
            format!("{} utterances written to {}", r.len(), pipeline::codes_path(&run.cfg)?.display())
        }
        Command::Reconstruct(_) => pipeline::summary(&pipeline::reconstruct_cmd(&mut run)?),
        Command::Continue(_) => {
            let r = pipeline::continue_cmd(&mut run)?;
            let mut s = String::new();
            for c in &r {
                s.push_str(&format!("{}: {}\n", c.prompt_id, c.text));
            }
            s.trim_end().to_string()
        }
        Command::Score(_) => pipeline::summary(&pipeline::score_cmd(&mut run)?),
        Command::Edit { .. } => {
            let (a, b, words) = edit.expect("edit arguments");
            let r = pipeline::edit_cmd(&mut run, &a, &b, &words)?;
            format!("{} edited utterances written to {}", r.len(), pipeline::edit_path(&run.cfg).display())
        }
        Command::Bitrate(_) => pipeline::summary(&pipeline::bitrate_cmd(&mut run)?),
    };
    run.finish()?;
    Ok(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(s) => {
            println!("{s}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("taste: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
