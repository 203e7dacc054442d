use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aes_core::config::AppConfig;
use aes_core::corpus::{load_dataset, split_dataset, write_dataset, DatasetSplit, EssayRecord, PromptTable, SplitPart};
use aes_core::evaluation::{evaluate, EvalReport, REFERENCE_COLLECTIONS};
use aes_core::feedback::{build_prompt, LlmClient, PromptTemplate};
use aes_core::scoring::{load_model_with_hash, save_model, score_essay, train, ModelState};
use aes_core::service::{build_state, serve, LoadedModel};
use aes_core::synthetic::{generate, SyntheticConfig};
use aes_core::tokenizer::{build_vocabulary, Vocabulary};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "aes", version, about = "Genre-aware multi-trait essay scoring")]
struct Cli {
    /// TOML config file (schema_version = 1).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for initialization, batch order and splits; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Prompt metadata TOML; overrides the config and the built-in table.
    #[arg(long, global = true)]
    prompts: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a WordPiece vocabulary from the train split of a dataset.
    BuildVocab {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_words: Option<usize>,
        #[arg(long)]
        min_frequency: Option<usize>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Vocabulary file; built from the train split when omitted.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch `epoch, train_loss, dev_qwk` rows.
        #[arg(long)]
        history: Option<PathBuf>,
        /// Use the small synthetic-scale model shape instead of the config's.
        #[arg(long)]
        tiny: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint and print the QWK report.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Part::Test)]
        part: Part,
        /// Collections for the comparison table.
        #[arg(long, value_delimiter = ',')]
        collections: Option<Vec<u32>>,
        #[arg(long)]
        json: bool,
        /// Also write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score one essay and print the report as JSON.
    Score(EssayArgs),
    /// Score one essay and print the report with per-trait feedback as JSON.
    Feedback(EssayArgs),
    /// Serve the REST API.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        bind: Option<String>,
    },
    /// Write a planted-keyword corpus and its split.
    GenerateSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        split_out: PathBuf,
        #[arg(long, default_value_t = 800)]
        train: usize,
        #[arg(long, default_value_t = 100)]
        dev: usize,
        #[arg(long, default_value_t = 100)]
        test: usize,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Tab-separated essays.
    #[arg(long)]
    data: PathBuf,
    /// JSON split file; a seeded stratified split is drawn when omitted.
    #[arg(long)]
    split: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EssayArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    prompt: u32,
    /// Essay text file, or `-` for stdin.
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Part {
    Train,
    Dev,
    Test,
    All,
}

struct Ctx {
    cfg: AppConfig,
    table: PromptTable,
}

fn load_context(cli: &Cli) -> Result<Ctx> {
    let mut cfg = match &cli.config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(p) = &cli.prompts {
        cfg.prompts = Some(p.clone());
    }
    let table = cfg.prompt_table()?;
    Ok(Ctx { cfg, table })
}

fn load_data(ctx: &Ctx, args: &DataArgs) -> Result<(Vec<EssayRecord>, DatasetSplit)> {
    let records = load_dataset(&args.data, &ctx.table).with_context(|| format!("loading {}", args.data.display()))?;
    let split = match &args.split {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing split {}", p.display()))?
        }
        None => {
            let s = &ctx.cfg.split;
            split_dataset(&records, (s.train, s.dev, s.test), ctx.cfg.seed)?
        }
    };
    Ok((records, split))
}

fn train_vocab(ctx: &Ctx, records: &[EssayRecord], split: &DatasetSplit) -> Result<Vocabulary> {
    let texts: Vec<&str> = split
        .select(records, SplitPart::Train)
        .iter()
        .map(|r| r.text.as_str())
        .collect();
    Ok(build_vocabulary(&texts, ctx.cfg.vocab.max_words, ctx.cfg.vocab.min_frequency)?)
}

fn read_essay(path: &Path) -> Result<String> {
    if path == Path::new("-") {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        Ok(s)
    } else {
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
    }
}

fn load_checkpoint(ctx: &Ctx, path: &Path) -> Result<(ModelState, String)> {
    load_model_with_hash(path, &ctx.table).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let ctx = load_context(&cli)?;
    match cli.command {
        Command::BuildVocab {
            data,
            out,
            max_words,
            min_frequency,
        } => {
            let (records, split) = load_data(&ctx, &data)?;
            let mut ctx = ctx;
            ctx.cfg.vocab.max_words = max_words.unwrap_or(ctx.cfg.vocab.max_words);
            ctx.cfg.vocab.min_frequency = min_frequency.unwrap_or(ctx.cfg.vocab.min_frequency);
            let vocab = train_vocab(&ctx, &records, &split)?;
            vocab.save(&out)?;
            eprintln!("wrote {} pieces to {}", vocab.len(), out.display());
        }
        Command::Train {
            data,
            vocab,
            out,
            history,
            tiny,
            epochs,
        } => {
            let (records, split) = load_data(&ctx, &data)?;
            let vocab = match vocab {
                Some(p) => Vocabulary::load(&p)?,
                None => train_vocab(&ctx, &records, &split)?,
            };
            let mut model_cfg = if tiny {
                aes_core::scoring::ModelConfig::tiny()
            } else {
                ctx.cfg.model.clone()
            };
            model_cfg.seed = ctx.cfg.seed;
            let mut train_cfg = ctx.cfg.train.clone();
            if let Some(e) = epochs {
                train_cfg.max_epochs = e;
                train_cfg.early_stop_patience = train_cfg.early_stop_patience.min(e);
            }
            let model = ModelState::new(model_cfg, vocab, &ctx.table)?;
            let (model, hist) = train(model, &records, &split, &ctx.table, &train_cfg)?;
            let hash = save_model(&model, &out)?;
            if let Some(p) = history {
                hist.write_tsv(std::fs::File::create(&p)?)?;
            }
            eprintln!(
                "best epoch {} dev {:.4}; wrote {} (sha256 {hash})",
                hist.best_epoch,
                hist.best_dev_qwk,
                out.display()
            );
        }
        Command::Evaluate {
            data,
            checkpoint,
            part,
            collections,
            json,
            report,
        } => {
            let (records, split) = load_data(&ctx, &data)?;
            let (model, hash) = load_checkpoint(&ctx, &checkpoint)?;
            let selected: Vec<EssayRecord> = match part {
                Part::All => records.clone(),
                Part::Train => split.select(&records, SplitPart::Train).into_iter().cloned().collect(),
                Part::Dev => split.select(&records, SplitPart::Dev).into_iter().cloned().collect(),
                Part::Test => split.select(&records, SplitPart::Test).into_iter().cloned().collect(),
            };
            if selected.is_empty() {
                bail!("the selected split is empty");
            }
            let mut eval: EvalReport = evaluate(&model, &selected, &ctx.table)?;
            eval.model_hash = hash;
            if let Some(p) = report {
                std::fs::write(&p, eval.to_json())?;
            }
            if json {
                println!("{}", eval.to_json());
            } else {
                let cols = collections.unwrap_or_else(|| REFERENCE_COLLECTIONS.to_vec());
                print!("{}", eval.render(&cols));
            }
        }
        Command::Score(args) => {
            let (model, _) = load_checkpoint(&ctx, &args.checkpoint)?;
            let spec = ctx
                .table
                .get(args.prompt)
                .with_context(|| format!("unknown prompt {}", args.prompt))?;
            let text = read_essay(&args.input)?;
            print_json(&score_essay(&text, spec, &model)?)?;
        }
        Command::Feedback(args) => {
            let (model, _) = load_checkpoint(&ctx, &args.checkpoint)?;
            let spec = ctx
                .table
                .get(args.prompt)
                .with_context(|| format!("unknown prompt {}", args.prompt))?;
            let text = read_essay(&args.input)?;
            let report = score_essay(&text, spec, &model)?;
            let template = match &ctx.cfg.service.template {
                Some(p) => PromptTemplate::load(p)?,
                None => PromptTemplate::builtin(),
            };
            let prompt = build_prompt(&report, &text, spec, &template)?;
            let client = LlmClient::new(ctx.cfg.llm.clone())?;
            let rt = tokio::runtime::Runtime::new()?;
            let feedback = rt.block_on(client.request_feedback(&prompt, &report))?;
            print_json(&serde_json::json!({ "report": report, "feedback": feedback }))?;
        }
        Command::Serve { checkpoint, bind } => {
            let checkpoint = checkpoint.or(ctx.cfg.service.checkpoint.clone());
            let model = match &checkpoint {
                Some(p) => {
                    let (model, checkpoint_hash) = load_checkpoint(&ctx, p)?;
                    Some(LoadedModel { model, checkpoint_hash })
                }
                None => {
                    tracing::warn!("no checkpoint given; scoring endpoints answer 503");
                    None
                }
            };
            let bind = bind.unwrap_or_else(|| ctx.cfg.service.bind.clone());
            let state = build_state(ctx.table.clone(), model, ctx.cfg.llm.clone(), &ctx.cfg.service)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(state, &bind))?;
        }
        Command::GenerateSynthetic {
            out,
            split_out,
            train,
            dev,
            test,
        } => {
            let cfg = SyntheticConfig {
                train,
                dev,
                test,
                seed: ctx.cfg.seed,
                ..SyntheticConfig::default()
            };
            let corpus = generate(&cfg, &ctx.table)?;
            write_dataset(std::fs::File::create(&out)?, &ctx.table, &corpus.records)?;
            std::fs::write(&split_out, serde_json::to_string_pretty(&corpus.split)?)?;
            eprintln!("wrote {} essays to {}", corpus.records.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
