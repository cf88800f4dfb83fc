use std::path::PathBuf;
use std::time::Duration;

use anyhow::Result;
use clap::{Parser, Subcommand};

use feedkit_cli::config::PipelineConfig;
use feedkit_cli::stages::{self, Ctx, RefreshArgs, RefreshMode};
use feedkit_core::feed::{FeedService, Surface};

#[derive(Parser)]
#[command(name = "feedkit", version, about = "Train item encoders and serve related-item feeds")]
struct Cli {
    /// JSON config merged over the defaults [default: none]
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.epochs=3`. Repeatable [default: none]
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root seed; shorthand for `--set seed=N` [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Data directory; shorthand for `--set paths.root=DIR` [default: feedkit-data]
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic catalog and event log.
    Synth,
    /// Mine view-buy and buy-buy pairs from the event log.
    Mine,
    /// Learn a subword vocabulary from item metadata.
    TokenizerTrain,
    /// Train the encoder on the training split.
    Train,
    /// Embed every catalog item with the trained encoder.
    Embed,
    /// Build the nearest-neighbor index over target embeddings.
    Index,
    /// Precompute the thresholded similarity store.
    Precompute,
    /// Print one customer's feed as JSON.
    Feed {
        #[arg(long)]
        customer: String,
        /// Restrict items to one surface [default: all]
        #[arg(long)]
        surface: Option<Surface>,
        /// Feed length [default: config `feed.feed_size`, 20]
        #[arg(long)]
        size: Option<usize>,
    },
    /// Serve feeds over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// 0 picks a free port.
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Similarity store, text or `.pfs` binary [default: config `paths.store`, store.tsv]
        #[arg(long)]
        store: Option<PathBuf>,
        /// Catalog file [default: config `paths.catalog`, catalog.jsonl]
        #[arg(long)]
        catalog: Option<PathBuf>,
        /// Seconds between background incremental refreshes [default: off]
        #[arg(long)]
        refresh_every: Option<u64>,
    },
    /// Recompute feeds and write them as JSON lines.
    Refresh {
        #[arg(long, value_enum, default_value = "batch")]
        mode: RefreshMode,
        /// File with one active customer id per line (incremental mode) [default: none]
        #[arg(long)]
        active: Option<PathBuf>,
        /// Output JSON lines [default: reports/feeds.jsonl]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Restrict items to one surface [default: all]
        #[arg(long)]
        surface: Option<Surface>,
        /// Repeat every N seconds; 0 runs once.
        #[arg(long, default_value_t = 0)]
        every: u64,
        /// Stop after this many rounds; 0 means no limit.
        #[arg(long, default_value_t = 0)]
        rounds: u64,
    },
    /// Score the test split and write recall reports.
    Eval {
        /// Evaluate a freshly initialized encoder instead of the checkpoint.
        #[arg(long)]
        untrained: bool,
    },
    /// Print the effective configuration.
    ShowConfig,
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = Vec::new();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(r) = &cli.root {
        overrides.push(format!("paths.root={}", serde_json::to_string(r)?));
    }
    overrides.extend(cli.set);
    let ctx = Ctx::new(PipelineConfig::load(cli.config.as_deref(), &overrides)?);
    match cli.cmd {
        Cmd::Synth => stages::synth(&ctx),
        Cmd::Mine => stages::mine(&ctx),
        Cmd::TokenizerTrain => stages::tokenizer_train(&ctx),
        Cmd::Train => stages::train(&ctx),
        Cmd::Embed => stages::embed(&ctx),
        Cmd::Index => stages::index(&ctx),
        Cmd::Precompute => stages::precompute(&ctx),
        Cmd::Feed {
            customer,
            surface,
            size,
        } => stages::feed(&ctx, &customer, surface, size),
        Cmd::Serve {
            host,
            port,
            store,
            catalog,
            refresh_every,
        } => {
            let catalog = stages::load_catalog(&ctx, catalog.as_deref())?;
            let store = stages::load_store(&ctx, store.as_deref())?;
            let profiles = stages::load_profiles(&ctx, &catalog)?;
            let svc = FeedService::new(catalog, store, profiles, ctx.cfg.feed.feed_size, stages::feed_options(&ctx));
            let rt = tokio::runtime::Runtime::new()?;
            let addr = format!("{host}:{port}");
            rt.block_on(feedkit_cli::serve::run(
                svc,
                &addr,
                refresh_every.filter(|&s| s > 0).map(Duration::from_secs),
            ))
        }
        Cmd::Refresh {
            mode,
            active,
            out,
            surface,
            every,
            rounds,
        } => stages::refresh(
            &ctx,
            &RefreshArgs {
                mode,
                active,
                out,
                surface,
                every,
                rounds,
            },
        ),
        Cmd::Eval { untrained } => stages::eval(&ctx, untrained),
        Cmd::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(&ctx.cfg)?);
            Ok(())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
