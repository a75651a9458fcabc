use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use i2e_core::forecasters::Backbone;

use crate::config::RunConfig;
use crate::pipeline::{self, Ctx};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Daily intraday-return forecasting pipeline.
#[derive(Debug, Parser)]
#[command(name = "i2e", version, about, propagate_version = true)]
pub struct Cli {
    /// JSON run configuration; unknown keys are rejected. Defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every model, shuffle, boosting and synthetic-market draw; overrides the config.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory for caches, datasets, models, reports and manifests.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelChoice {
    Transformer,
    Lstm,
    All,
}

impl ModelChoice {
    fn backbones(self) -> Vec<Backbone> {
        match self {
            Self::Transformer => vec![Backbone::Transformer],
            Self::Lstm => vec![Backbone::Lstm],
            Self::All => vec![Backbone::Transformer, Backbone::Lstm],
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Download (or generate, or import) daily bars into the cache.
    Ingest,
    /// Write the per-date ticker coverage histogram as CSV.
    Stats,
    /// Compute features, split by target date, scale and write the datasets.
    Featurize,
    /// Train classifiers on the index series.
    Pretrain(ModelArgs),
    /// Fine-tune pretrained classifiers on stocks, then swap the head and train regressors.
    Finetune(FinetuneArgs),
    /// Fit the boosted-tree classifier and regressor.
    TrainGbt,
    /// Print classification and regression metrics for every trained model.
    Evaluate,
    /// Run the top-k / bottom-k daily backtest on the test period.
    Backtest(BacktestArgs),
    /// Rank the cached universe for the next trading day.
    Predict(PredictArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Which backbone to train.
    #[arg(long, value_enum, default_value = "all")]
    pub model: ModelChoice,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Pretrained weight file, or a directory holding `<model>_pretrained.i2ew` files.
    #[arg(long, value_name = "PATH")]
    pub from_weights: PathBuf,
    /// Which backbone to fine-tune.
    #[arg(long, value_enum, default_value = "all")]
    pub model: ModelChoice,
    /// Also train a classifier from scratch for comparison.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Debug, Args)]
pub struct BacktestArgs {
    /// Stocks held long and short each day; overrides `backtest.k`.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Directory with the regression bundle. Defaults to `<out>/models`.
    #[arg(long, value_name = "DIR")]
    pub models: Option<PathBuf>,
    /// Rows printed for the top and bottom lists; overrides `backtest.k`.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Directory with the regression bundle. Defaults to `<out>/models`.
    #[arg(long, value_name = "DIR")]
    pub models: Option<PathBuf>,
    /// Listen address; overrides `service.bind`.
    #[arg(long, value_name = "ADDR")]
    pub bind: Option<String>,
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Ingest => "ingest",
        Command::Stats => "stats",
        Command::Featurize => "featurize",
        Command::Pretrain(_) => "pretrain",
        Command::Finetune(_) => "finetune",
        Command::TrainGbt => "train-gbt",
        Command::Evaluate => "evaluate",
        Command::Backtest(_) => "backtest",
        Command::Predict(_) => "predict",
        Command::Serve(_) => "serve",
    }
}

/// Parses `argv`, runs the subcommand and returns the exit status:
/// 0 success, 1 runtime failure, 2 usage or configuration error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let cfg = match RunConfig::load(cli.config.as_deref()).and_then(|c| c.resolve(cli.seed)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: invalid configuration: {e}");
            return EXIT_USAGE;
        }
    };
    if let Command::Backtest(BacktestArgs { k: Some(0) }) | Command::Predict(PredictArgs { k: Some(0), .. }) = cli.command {
        eprintln!("error: --k must be positive");
        return EXIT_USAGE;
    }
    let name = command_name(&cli.command);
    let ctx = Ctx::new(cfg, cli.out);
    match execute(&ctx, cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {name} failed: {e:#}");
            EXIT_RUNTIME
        }
    }
}

fn execute(ctx: &Ctx, command: Command) -> anyhow::Result<()> {
    let mut stdout = std::io::stdout().lock();
    match command {
        Command::Ingest => {
            let s = pipeline::ingest(ctx)?;
            writeln!(stdout, "cached {} symbols + index {} ({} bars, {:?} .. {:?})", s.symbols.len(), s.index_symbol, s.bars, s.first, s.last)?;
            for u in &s.unavailable {
                writeln!(stdout, "unavailable: {u}")?;
            }
            for (sym, why) in &s.failed {
                writeln!(stdout, "failed: {sym}: {why}")?;
            }
        }
        Command::Stats => {
            let s = pipeline::stats(ctx)?;
            writeln!(stdout, "{} symbols, {} bars, {:?} .. {:?}, at most {} tickers on one date", s.symbols, s.bars, s.first, s.last, s.max_coverage)?;
            writeln!(stdout, "coverage histogram: {}", ctx.path(&s.histogram_csv).display())?;
        }
        Command::Featurize => {
            let s = pipeline::featurize(ctx)?;
            writeln!(stdout, "split: train {:?}, validation {:?}, test {:?}", s.split.train, s.split.validation, s.split.test)?;
            for (set, parts) in [("stocks", &s.stocks), ("index", &s.index)] {
                for p in pipeline::PARTS {
                    let st = &parts[p];
                    writeln!(stdout, "{set:>6} {p:<10} {:>8} samples, {:>8} positive", st.samples, st.positives)?;
                }
            }
        }
        Command::Pretrain(a) => print_training(&mut stdout, &pipeline::pretrain(ctx, &a.model.backbones())?)?,
        Command::Finetune(a) => {
            print_training(&mut stdout, &pipeline::finetune(ctx, &a.from_weights, &a.model.backbones(), a.baseline)?)?
        }
        Command::TrainGbt => {
            for s in pipeline::train_gbt(ctx)? {
                writeln!(stdout, "{}: {} trees, final train loss {:?}", s.model, s.trees, s.final_train_loss)?;
            }
        }
        Command::Evaluate => write!(stdout, "{}", pipeline::evaluate(ctx)?.render())?,
        Command::Backtest(a) => {
            let s = pipeline::run_backtest(ctx, a.k.unwrap_or(ctx.cfg.backtest.k))?;
            write!(stdout, "{}", s.render())?;
            writeln!(stdout, "weekly returns: {}", ctx.path(&s.weekly_csv).display())?;
        }
        Command::Predict(a) => {
            let dir = a.models.unwrap_or_else(|| ctx.path("models"));
            let set = pipeline::predict(ctx, &dir)?;
            let k = a.k.unwrap_or(ctx.cfg.backtest.k);
            let (top, bottom) = set.top_bottom(k)?;
            writeln!(stdout, "as of {}, predicting {}", set.as_of, set.target_date)?;
            for (title, rows) in [("top", top), ("bottom", bottom)] {
                writeln!(stdout, "{title} {k}:")?;
                for r in rows {
                    writeln!(stdout, "  {:>4}  {:<10} {:+.6}", r.rank, r.symbol, r.predicted_return)?;
                }
            }
        }
        Command::Serve(a) => {
            let dir = a.models.unwrap_or_else(|| ctx.path("models"));
            let state = pipeline::service_state(ctx, &dir)?;
            let bind = a.bind.unwrap_or_else(|| ctx.cfg.service.bind.clone());
            drop(stdout);
            tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()?
                .block_on(i2e_service::serve(state, &bind))?;
        }
    }
    Ok(())
}

fn print_training(out: &mut impl Write, runs: &[pipeline::TrainSummary]) -> std::io::Result<()> {
    for r in runs {
        write!(out, "{}: best epoch {} of {}", r.model, r.best_epoch, r.epochs_run)?;
        if let Some(v) = r.val_loss {
            write!(out, ", val loss {v:.6}")?;
        }
        if let Some(v) = r.val_bce {
            write!(out, ", val BCE {v:.6}")?;
        }
        writeln!(out, " -> {}", r.weights)?;
    }
    Ok(())
}
