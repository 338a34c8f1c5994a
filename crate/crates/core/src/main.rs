use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fghash::config::Config;
use fghash::data::Split;
use fghash::pipeline::{self, QuerySource};
use fghash::synth::SyntheticSpec;
use fghash::Result;

// Writes to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! say_raw {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

/// Fine-grained hashing: train a localizing hash coder, encode images into
/// binary codes, and evaluate Hamming-space retrieval.
///
/// Log verbosity follows RUST_LOG (e.g. RUST_LOG=info).
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted-glyph dataset, its manifest, glyph boxes and a train.cfg.
    Synth {
        /// Output directory.
        dir: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        train_per_class: usize,
        #[arg(long, default_value_t = 8)]
        query_per_class: usize,
        #[arg(long, default_value_t = 224)]
        canvas: usize,
        #[arg(long, default_value_t = 32)]
        glyph: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train on the manifest's train split; writes checkpoint and JSON-lines log.
    Train {
        /// Config file (key = value lines).
        config: PathBuf,
        /// Override a config key, e.g. --set epochs=10 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Encode manifest images into a code database file.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Only rows of this split (train, query, database).
        #[arg(long)]
        split: Option<Split>,
        /// Output code file; labels go to <out>.labels.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate queries against a code database.
    Eval {
        /// Database code file.
        #[arg(long)]
        db: PathBuf,
        /// Query code file.
        #[arg(long, conflicts_with_all = ["manifest", "checkpoint"])]
        queries: Option<PathBuf>,
        /// Query manifest, encoded with --checkpoint.
        #[arg(long, requires = "checkpoint")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Config supplying evaluation keys (radius, map_cutoff, ...).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write <out>.json and <out>.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Encode one image and list its nearest database entries.
    Query {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        db: PathBuf,
        image: PathBuf,
        #[arg(short, default_value_t = 10)]
        k: usize,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Show the three selected regions of one image.
    Locate {
        #[arg(long)]
        checkpoint: PathBuf,
        image: PathBuf,
        /// Glyph boxes CSV; adds IoU per region.
        #[arg(long)]
        boxes: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            dir,
            classes,
            train_per_class,
            query_per_class,
            canvas,
            glyph,
            noise,
            seed,
        } => {
            let spec = SyntheticSpec {
                num_classes: classes,
                train_per_class,
                query_per_class,
                canvas,
                glyph,
                noise,
                seed,
            };
            let (out, cfg) = pipeline::cmd_synth(&spec, &dir)?;
            say!("images {}", out.images.len());
            say!("manifest {}", out.manifest.display());
            say!("boxes {}", out.boxes.display());
            say!("config {}", cfg.display());
        }
        Command::Train { config, overrides } => {
            let mut cfg = Config::load(&config)?;
            for o in &overrides {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| fghash::Error::Config(format!("--set {o}: expected KEY=VALUE")))?;
                cfg.set(k.trim(), v.trim())?;
            }
            cfg.validate()?;
            pipeline::cmd_train(&cfg)?;
            say!("checkpoint {}", cfg.checkpoint.display());
            say!("log {}", cfg.train_log.display());
        }
        Command::Encode {
            checkpoint,
            manifest,
            split,
            out,
        } => {
            let db = pipeline::cmd_encode(&checkpoint, &manifest, split, &out)?;
            say!("codes {} bits {} file {}", db.len(), db.bits(), out.display());
        }
        Command::Eval {
            db,
            queries,
            manifest,
            split,
            checkpoint,
            config,
            out,
        } => {
            let source = match (queries, manifest, checkpoint) {
                (Some(q), _, _) => QuerySource::Codes(q),
                (None, Some(manifest), Some(checkpoint)) => QuerySource::Manifest {
                    manifest,
                    split,
                    checkpoint,
                },
                _ => {
                    return Err(fghash::Error::Config(
                        "eval needs --queries or --manifest with --checkpoint".into(),
                    ))
                }
            };
            let cfg = match config {
                Some(p) => Config::load(&p)?,
                None => Config::default(),
            };
            let metrics = pipeline::cmd_eval(&db, &source, &cfg, out.as_deref())?;
            say!("{}", metrics.to_json());
        }
        Command::Query {
            checkpoint,
            db,
            image,
            k,
            format,
        } => {
            let hits = pipeline::cmd_query(&checkpoint, &db, &image, k)?;
            match format {
                Format::Json => say!("{}", serde_json::to_string_pretty(&hits).expect("json")),
                Format::Text | Format::Csv => {
                    say!("rank,index,distance,label");
                    for h in hits {
                        say!("{},{},{},{}", h.rank, h.index, h.distance, h.label);
                    }
                }
            }
        }
        Command::Locate {
            checkpoint,
            image,
            boxes,
            format,
        } => {
            let report = pipeline::cmd_locate(&checkpoint, &image, boxes.as_deref())?;
            match format {
                Format::Json => say!("{}", report.to_json()),
                Format::Text | Format::Csv => say_raw!("{}", report.to_csv()),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} msg={:?}", e.kind(), e.to_string());
            ExitCode::FAILURE
        }
    }
}
