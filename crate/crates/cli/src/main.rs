use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pixeldoc_core::pipeline::{self, PipelineError, RunConfig};
use serde::Serialize;

/// Pixel-based language modelling for historical document scans.
#[derive(Parser, Debug)]
#[command(name = "pixeldoc", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON run configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key: `--set optim.lr=0.004`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Input dataset directory (or a single image).
    #[arg(long, visible_alias = "scans", global = true)]
    data: Option<PathBuf>,
    #[arg(long, visible_alias = "checkpoint", global = true)]
    ckpt: Option<PathBuf>,
    #[arg(long, global = true)]
    steps: Option<u64>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    batch: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render (and with --noisy, degrade) a synthetic scan dataset.
    Synth {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        noisy: bool,
        /// Plain-text corpus, one paragraph per line.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Page-image ingestion.
    Corpus {
        #[command(subcommand)]
        action: CorpusCmd,
    },
    /// Masked-autoencoder pretraining.
    Pretrain {
        #[arg(long, value_enum)]
        mask_mode: Option<MaskModeArg>,
    },
    /// Finetune a task head.
    Finetune {
        #[arg(value_enum)]
        task: Task,
    },
    /// Evaluate a finetuned model.
    Eval {
        #[arg(value_enum)]
        task: EvalTask,
        /// Score these per-instance probabilities instead of a model.
        #[arg(long)]
        preds: Option<PathBuf>,
    },
    /// QA dataset tools.
    Qa {
        #[command(subcommand)]
        action: BuildCmd,
    },
    /// Sequence-classification dataset tools.
    Seq {
        #[command(subcommand)]
        action: BuildCmd,
    },
    /// Draw a sampled span mask over a scan.
    MaskPreview,
    /// Embed scans into a search index.
    Embed,
    /// Nearest scans to a probe image.
    Search {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        probe: PathBuf,
        #[arg(short, long)]
        k: Option<usize>,
    },
    /// Original / masked / reconstruction triptychs.
    ReconDump,
}

#[derive(Subcommand, Debug)]
enum CorpusCmd {
    /// Linearize page images and cut sliding-window crops.
    Ingest {
        /// Page images, or directories of `.png` pages.
        #[arg(required_unless_present = "pages_dir")]
        pages: Vec<PathBuf>,
        #[arg(long = "pages", value_name = "DIR")]
        pages_dir: Vec<PathBuf>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        val_frac: Option<f64>,
    },
}

#[derive(Subcommand, Debug)]
enum BuildCmd {
    Build {
        #[arg(long)]
        noisy: bool,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Task {
    Seq,
    Qa,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum EvalTask {
    Qa,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MaskModeArg {
    Fresh,
    Fixed,
}

fn resolve(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &g.sets {
        let (k, v) = s.split_once('=').ok_or_else(|| PipelineError::Config {
            path: s.clone(),
            message: "expected KEY=VALUE".into(),
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(v) = g.seed {
        cfg.seed = v;
    }
    if let Some(v) = &g.out {
        cfg.paths.out = Some(v.clone());
    }
    if let Some(v) = &g.data {
        cfg.paths.data = Some(v.clone());
    }
    if let Some(v) = &g.ckpt {
        cfg.paths.checkpoint = Some(v.clone());
    }
    if let Some(v) = g.steps {
        cfg.optim.steps = v;
    }
    if let Some(v) = g.lr {
        cfg.optim.lr = v;
    }
    if let Some(v) = g.batch {
        cfg.optim.batch = v;
    }
    match &cli.command {
        Command::Synth { n, noisy, corpus } => {
            if let Some(n) = n {
                cfg.synth.n = *n;
            }
            cfg.synth.noisy |= noisy;
            if let Some(c) = corpus {
                cfg.paths.corpus = Some(c.clone());
            }
        }
        Command::Pretrain { mask_mode: Some(m) } => {
            cfg.optim.mask_mode = match m {
                MaskModeArg::Fresh => pipeline::MaskMode::Fresh,
                MaskModeArg::Fixed => pipeline::MaskMode::Fixed,
            };
        }
        Command::Qa {
            action: BuildCmd::Build { noisy },
        } => cfg.qa.render.noisy |= noisy,
        Command::Seq {
            action: BuildCmd::Build { noisy },
        } => cfg.seq.noisy |= noisy,
        Command::Search { k: Some(k), .. } => cfg.k = *k,
        Command::Corpus {
            action:
                CorpusCmd::Ingest {
                    window,
                    stride,
                    val_frac,
                    ..
                },
        } => {
            if let Some(v) = window {
                cfg.ingest.window = *v;
            }
            if let Some(v) = stride {
                cfg.ingest.stride = *v;
            }
            if let Some(v) = val_frac {
                cfg.ingest.val_fraction = *v;
            }
        }
        _ => {}
    }
    Ok(cfg)
}

/// Directories expand to their `.png` files in name order.
fn expand_pages<'a>(args: impl Iterator<Item = &'a PathBuf>) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out = Vec::new();
    for p in args {
        if !p.is_dir() {
            out.push(p.clone());
            continue;
        }
        let rd = std::fs::read_dir(p).map_err(|e| PipelineError::Config {
            path: "pages".into(),
            message: format!("{}: {e}", p.display()),
        })?;
        let mut found: Vec<PathBuf> = rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        found.sort();
        out.extend(found);
    }
    Ok(out)
}

fn print<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializes"));
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Synth { .. } => {
            let entries = pipeline::run_synth(&cfg)?;
            print(&serde_json::json!({ "scans": entries.len() }));
        }
        Command::Corpus {
            action: CorpusCmd::Ingest { pages, pages_dir, .. },
        } => {
            let pages = expand_pages(pages.iter().chain(pages_dir))?;
            let entries = pipeline::run_ingest(&cfg, &pages)?;
            print(&serde_json::json!({ "crops": entries.len() }));
        }
        Command::Pretrain { .. } => print(&pipeline::run_pretrain(&cfg)?),
        Command::Finetune { task: Task::Seq } => print(&pipeline::run_finetune_seq(&cfg)?),
        Command::Finetune { task: Task::Qa } => print(&pipeline::run_finetune_qa(&cfg)?),
        Command::Eval {
            task: EvalTask::Qa,
            preds,
        } => print(&pipeline::run_eval_qa(&cfg, preds.as_deref())?),
        Command::Qa { .. } => {
            let rows = pipeline::run_qa_build(&cfg)?;
            let with = rows.iter().filter(|r| r.has_answer).count();
            print(&serde_json::json!({ "instances": rows.len(), "with_answer": with }));
        }
        Command::Seq { .. } => {
            let rows = pipeline::run_seq_build(&cfg)?;
            print(&serde_json::json!({ "pairs": rows.len() }));
        }
        Command::MaskPreview => print(&pipeline::run_mask_preview(&cfg)?),
        Command::Embed => {
            let index = pipeline::run_embed(&cfg)?;
            print(
                &serde_json::json!({ "vectors": index.len(), "width": index.width(), "fingerprint": index.fingerprint }),
            );
        }
        Command::Search { index, probe, .. } => {
            let hits = pipeline::run_search(&cfg, index, probe)?;
            let rows: Vec<_> = hits
                .iter()
                .map(|h| serde_json::json!({ "id": h.id, "cosine": h.cosine }))
                .collect();
            print(&rows);
        }
        Command::ReconDump => {
            let written = pipeline::run_recon_dump(&cfg)?;
            print(&serde_json::json!({ "triptychs": written.len() }));
        }
    }
    Ok(())
}

fn threads() -> Result<(), PipelineError> {
    let Ok(v) = std::env::var("PIXELDOC_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| PipelineError::Config {
        path: "PIXELDOC_THREADS".into(),
        message: format!("expected a positive integer, got {v:?}"),
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| PipelineError::Config {
            path: "PIXELDOC_THREADS".into(),
            message: e.to_string(),
        })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match threads().and_then(|_| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
