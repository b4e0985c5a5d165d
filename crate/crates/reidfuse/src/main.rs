use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use reidfuse::backbone::BackboneKind;
use reidfuse::cli::{
    cmd_evaluate, cmd_extract, cmd_keyframes, cmd_synth, cmd_train, EvaluateArgs, RunConfig,
};
use reidfuse::error::{Error, Result};
use reidfuse::eval::report_table;
use reidfuse::manifest::Split;

/// Vehicle re-identification pipeline: keyframe extraction, synthetic data,
/// triplet training of both backbones, embedding extraction, and fused
/// retrieval evaluation.
#[derive(Parser)]
#[command(name = "reidfuse", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect shot boundaries in a directory of numbered frame images and
    /// write the keyframes plus a boundary report.
    Keyframes {
        /// Directory holding the decoded frames.
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pipeline config JSON (keyframe section applies).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Grid cells per side.
        #[arg(long)]
        grid: Option<usize>,
        /// Histogram bins per channel.
        #[arg(long)]
        bins: Option<usize>,
        /// Cut threshold in (0, 1).
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Render a synthetic labeled vehicle dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        identities: usize,
        #[arg(long, default_value_t = 8)]
        images_per_identity: usize,
        #[arg(long, default_value_t = 2)]
        cameras: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: u32,
    },
    /// Train one backbone with batch-hard triplet loss.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// cnn_mid or transformer.
        #[arg(long)]
        backbone: Option<String>,
        /// Use the desk-scale backbone profiles (64x64 inputs).
        #[arg(long)]
        toy: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        weight_decay: Option<f32>,
        #[arg(long)]
        margin: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Identities per batch.
        #[arg(long)]
        p: Option<usize>,
        /// Instances per identity.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Embed one manifest split with a trained checkpoint.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, query, or gallery.
        #[arg(long)]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch: usize,
    },
    /// Rank the gallery for every query and report mAP and CMC rank-k.
    /// Passing two branch files per side fuses them before ranking.
    Evaluate {
        /// Query embedding file(s); repeat for two branches.
        #[arg(long = "query-emb", required = true)]
        query_embs: Vec<PathBuf>,
        /// Gallery embedding file(s); repeat for two branches.
        #[arg(long = "gallery-emb", required = true)]
        gallery_embs: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Score same-camera matches instead of excluding them.
        #[arg(long)]
        allow_same_camera: bool,
        /// L2-normalize each branch before fusion/ranking.
        #[arg(long)]
        l2_normalize: bool,
        /// Comma-separated CMC ranks, e.g. 1,5,10,20.
        #[arg(long)]
        ranks: Option<String>,
        /// Gallery entries per visualization panel.
        #[arg(long, default_value_t = 10)]
        topk: usize,
        /// Render at most this many panels.
        #[arg(long)]
        max_panels: Option<usize>,
        /// Skip panel rendering entirely.
        #[arg(long)]
        no_panels: bool,
        /// Label for the report row (defaults to the branch names).
        #[arg(long)]
        experiment: Option<String>,
    },
}

fn load_run_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Keyframes {
            frames,
            out,
            config,
            grid,
            bins,
            threshold,
        } => {
            let mut kf = load_run_config(&config)?.keyframe;
            if let Some(g) = grid {
                kf.grid = g;
            }
            if let Some(b) = bins {
                kf.bins = b;
            }
            if let Some(t) = threshold {
                kf.threshold = t;
            }
            let run = cmd_keyframes(&frames, &out, &kf)?;
            println!(
                "{} frames, {} boundaries, {} keyframes -> {}",
                run.frame_count,
                run.boundaries.len(),
                run.keyframes.len(),
                out.display()
            );
            for b in &run.boundaries {
                println!("  cut at frame {} (score {:.4})", b.frame_index, b.score);
            }
        }
        Command::Synth {
            out,
            identities,
            images_per_identity,
            cameras,
            seed,
            size,
        } => {
            let manifest = cmd_synth(&out, identities, images_per_identity, cameras, seed, size)?;
            let count = |s: Split| manifest.records.iter().filter(|r| r.split == s).count();
            println!(
                "{} images ({} train / {} query / {} gallery) -> {}",
                manifest.records.len(),
                count(Split::Train),
                count(Split::Query),
                count(Split::Gallery),
                out.join("manifest.csv").display()
            );
        }
        Command::Train {
            manifest,
            out,
            config,
            backbone,
            toy,
            epochs,
            lr,
            weight_decay,
            margin,
            seed,
            p,
            k,
        } => {
            let mut run_config = load_run_config(&config)?;
            if toy {
                run_config = run_config.with_toy_backbones();
            }
            if let Some(name) = backbone {
                run_config.train.backbone = BackboneKind::parse(&name)
                    .ok_or_else(|| Error::Config(format!("unknown backbone `{name}`")))?;
            }
            if let Some(e) = epochs {
                run_config.train.epochs = e;
            }
            if let Some(lr) = lr {
                run_config.train.learning_rate = lr;
            }
            if let Some(wd) = weight_decay {
                run_config.train.weight_decay = wd;
            }
            if let Some(m) = margin {
                run_config.triplet.margin = m;
            }
            if let Some(s) = seed {
                run_config.train.seed = s;
            }
            if let Some(p) = p {
                run_config.sampler.p = p;
            }
            if let Some(k) = k {
                run_config.sampler.k = k;
            }
            let artifacts = cmd_train(&manifest, &out, &run_config)?;
            println!(
                "trained {} for {} steps: epoch-mean loss {:.4} -> {:.4}",
                run_config.train.backbone,
                artifacts.steps,
                artifacts.first_epoch_loss,
                artifacts.final_epoch_loss
            );
            println!("checkpoint: {}", artifacts.checkpoint.display());
            println!("loss history: {}", artifacts.loss_history.display());
        }
        Command::Extract {
            manifest,
            checkpoint,
            split,
            out,
            batch,
        } => {
            let split = Split::parse(&split)
                .ok_or_else(|| Error::Config(format!("unknown split `{split}`")))?;
            let path = cmd_extract(&manifest, &checkpoint, split, &out, batch)?;
            println!("embeddings: {}", path.display());
        }
        Command::Evaluate {
            query_embs,
            gallery_embs,
            manifest,
            out,
            config,
            allow_same_camera,
            l2_normalize,
            ranks,
            topk,
            max_panels,
            no_panels,
            experiment,
        } => {
            let mut protocol = load_run_config(&config)?.protocol;
            if allow_same_camera {
                protocol.exclude_same_camera = false;
            }
            if let Some(spec) = ranks {
                protocol.ranks_reported = spec
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::Config(format!("bad rank `{s}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
            }
            let report = cmd_evaluate(&EvaluateArgs {
                query_embs,
                gallery_embs,
                manifest,
                out_dir: out.clone(),
                protocol,
                experiment,
                l2_normalize,
                topk,
                max_panels,
                render_panels: !no_panels,
            })?;
            print!("{}", report_table(&report));
            println!("report: {}", out.join("report.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
