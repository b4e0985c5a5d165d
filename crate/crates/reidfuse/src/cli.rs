//! Pipeline commands behind the `reidfuse` binary: keyframes, synth, train,
//! extract, evaluate. Every command writes its outputs atomically under an
//! output directory with stable filenames and never mutates its inputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{CnnMidConfig, WinTransformerConfig};
use crate::embedding::{load_embeddings, save_embeddings, EmbeddingSet};
use crate::error::{Error, Result};
use crate::eval::{evaluate, render_topk_grid, report_table, EvalProtocol, EvalReport};
use crate::fusion::{distance_matrix, fuse_embeddings, l2_normalize_rows, rank_all};
use crate::imgio::write_atomic;
use crate::keyframe::{detect_shot_boundaries, KeyframeConfig, ShotBoundary};
use crate::manifest::{load_manifest, Manifest, Split};
use crate::metric::{
    extract_embeddings, load_checkpoint, loss_history_csv, rebuild_backbone, save_checkpoint,
    train, CheckpointConfig, SamplerConfig, TrainConfig, TripletConfig,
};
use crate::synth::make_synthetic_dataset;

/// One JSON file configures the whole pipeline; command-line flags override
/// individual fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub keyframe: KeyframeConfig,
    pub cnn_mid: CnnMidConfig,
    pub transformer: WinTransformerConfig,
    pub sampler: SamplerConfig,
    pub triplet: TripletConfig,
    pub train: TrainConfig,
    pub protocol: EvalProtocol,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::parse(path, e.to_string()))
    }

    /// Swaps in the desk-scale backbone profiles (64x64 inputs).
    pub fn with_toy_backbones(mut self) -> RunConfig {
        self.cnn_mid = CnnMidConfig {
            num_train_identities: self.cnn_mid.num_train_identities,
            ce_weight: self.cnn_mid.ce_weight,
            pretrained_weights: self.cnn_mid.pretrained_weights.clone(),
            ..CnnMidConfig::toy()
        };
        self.transformer = WinTransformerConfig {
            shifted_windows: self.transformer.shifted_windows,
            ..WinTransformerConfig::toy()
        };
        self
    }

    pub fn checkpoint_config(&self) -> CheckpointConfig {
        CheckpointConfig {
            cnn_mid: self.cnn_mid.clone(),
            transformer: self.transformer.clone(),
            sampler: self.sampler,
            triplet: self.triplet,
            train: self.train.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// keyframes
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct KeyframeRun {
    pub frame_count: usize,
    pub boundaries: Vec<ShotBoundary>,
    pub keyframes: Vec<usize>,
    pub config: KeyframeConfig,
}

/// Sort key for numbered frame files: the last digit run in the stem, then
/// the full name.
fn frame_sort_key(path: &Path) -> (u64, String) {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut number = None;
    let mut current = 0u64;
    let mut in_digits = false;
    for ch in name.chars() {
        if let Some(d) = ch.to_digit(10) {
            current = if in_digits {
                current.saturating_mul(10).saturating_add(d as u64)
            } else {
                d as u64
            };
            in_digits = true;
        } else {
            if in_digits {
                number = Some(current);
            }
            in_digits = false;
        }
    }
    if in_digits {
        number = Some(current);
    }
    (
        number.unwrap_or(u64::MAX),
        path.file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    )
}

/// Lists frame images in `dir`, ordered by their frame number.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_lowercase),
                Some(ref ext) if ["png", "jpg", "jpeg", "bmp"].contains(&ext.as_str())
            )
        })
        .collect();
    if frames.is_empty() {
        return Err(Error::Validation(format!(
            "no frame images in {}",
            dir.display()
        )));
    }
    frames.sort_by_key(|p| frame_sort_key(p));
    Ok(frames)
}

/// Detects shot boundaries over a frame directory and writes
/// `keyframe_<index>.png` for each keyframe plus `boundaries.json`.
pub fn cmd_keyframes(
    frames_dir: &Path,
    out_dir: &Path,
    config: &KeyframeConfig,
) -> Result<KeyframeRun> {
    config.validate()?;
    let paths = list_frames(frames_dir)?;
    let frames = paths
        .iter()
        .map(|p| crate::imgio::load_rgb(p))
        .collect::<Result<Vec<_>>>()?;

    let boundaries = detect_shot_boundaries(&frames, config)?;
    let mut keyframes = vec![0usize];
    keyframes.extend(boundaries.iter().map(|b| b.frame_index));

    for &idx in &keyframes {
        crate::imgio::save_png(&frames[idx], &out_dir.join(format!("keyframe_{idx}.png")))?;
    }
    let run = KeyframeRun {
        frame_count: frames.len(),
        boundaries,
        keyframes,
        config: *config,
    };
    let json = serde_json::to_vec_pretty(&run)
        .map_err(|e| Error::Config(format!("boundary report not serializable: {e}")))?;
    write_atomic(&out_dir.join("boundaries.json"), &json)?;
    Ok(run)
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub fn cmd_synth(
    out_dir: &Path,
    identities: usize,
    images_per_identity: usize,
    cameras: usize,
    seed: u64,
    image_size: u32,
) -> Result<Manifest> {
    make_synthetic_dataset(
        out_dir,
        identities,
        images_per_identity,
        cameras,
        seed,
        image_size,
    )
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub loss_history: PathBuf,
    pub steps: usize,
    pub first_epoch_loss: f64,
    pub final_epoch_loss: f64,
}

/// Trains the configured backbone and writes `checkpoint.bin` and
/// `loss_history.csv` under `out_dir`.
pub fn cmd_train(
    manifest_path: &Path,
    out_dir: &Path,
    config: &RunConfig,
) -> Result<TrainArtifacts> {
    let manifest = load_manifest(manifest_path)?;
    let image_root = manifest_root(manifest_path);
    let run = train(&manifest, &image_root, &config.checkpoint_config())?;

    let checkpoint = out_dir.join("checkpoint.bin");
    save_checkpoint(
        &checkpoint,
        &run.config,
        &run.store,
        run.config.train.seed,
        run.config.train.epochs as u32,
    )?;
    let loss_history = out_dir.join("loss_history.csv");
    write_atomic(&loss_history, &loss_history_csv(&run.history))?;

    let epoch_mean = |e: usize| {
        let losses: Vec<f64> = run
            .history
            .iter()
            .filter(|h| h.epoch == e)
            .map(|h| h.loss)
            .collect();
        losses.iter().sum::<f64>() / losses.len().max(1) as f64
    };
    Ok(TrainArtifacts {
        checkpoint,
        loss_history,
        steps: run.history.len(),
        first_epoch_loss: epoch_mean(0),
        final_epoch_loss: epoch_mean(run.config.train.epochs - 1),
    })
}

fn manifest_root(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

// ---------------------------------------------------------------------------
// extract
// ---------------------------------------------------------------------------

/// Embeds one manifest split with a trained checkpoint; the output lands in
/// `out_dir/emb_<branch>_<split>.reidemb`.
pub fn cmd_extract(
    manifest_path: &Path,
    checkpoint_path: &Path,
    split: Split,
    out_dir: &Path,
    batch_size: usize,
) -> Result<PathBuf> {
    let manifest = load_manifest(manifest_path)?;
    let image_root = manifest_root(manifest_path);
    let loaded = load_checkpoint(checkpoint_path)?;
    let (backbone, store) = rebuild_backbone(&loaded)?;

    let records = manifest.split(split);
    if records.is_empty() {
        return Err(Error::Validation(format!("split `{split}` is empty")));
    }
    let set = extract_embeddings(&backbone, &store, &records, &image_root, batch_size)?;
    let out = out_dir.join(format!("emb_{}_{}.reidemb", set.branch, split));
    save_embeddings(&set, &out)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

pub struct EvaluateArgs {
    pub query_embs: Vec<PathBuf>,
    pub gallery_embs: Vec<PathBuf>,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub protocol: EvalProtocol,
    pub experiment: Option<String>,
    /// L2-normalize each branch's rows before fusion/ranking; off by default
    /// (raw concatenation), useful when one branch's scale dominates.
    pub l2_normalize: bool,
    /// Gallery entries per top-k panel.
    pub topk: usize,
    /// Cap on rendered panels; `None` renders one per scored query.
    pub max_panels: Option<usize>,
    pub render_panels: bool,
}

fn load_side(paths: &[PathBuf], l2_normalize: bool) -> Result<(EmbeddingSet, String)> {
    let load = |path: &PathBuf| -> Result<EmbeddingSet> {
        let set = load_embeddings(path)?;
        Ok(if l2_normalize {
            l2_normalize_rows(&set)
        } else {
            set
        })
    };
    match paths {
        [single] => {
            let set = load(single)?;
            let label = set.branch.to_string();
            Ok((set, label))
        }
        [first, second] => {
            let a = load(first)?;
            let b = load(second)?;
            let label = format!("{}+{}", a.branch, b.branch);
            let fused = fuse_embeddings(&a, &b)?;
            Ok((fused.into_embedding_set(), label))
        }
        [] => Err(Error::Validation("need at least one embedding file".into())),
        _ => Err(Error::Validation(
            "at most two branch files per side are supported".into(),
        )),
    }
}

/// Ranks each query against the gallery, scores mAP/CMC, writes
/// `report.json`, `report.txt`, and (optionally) `topk_<query_id>.png`
/// panels. Returns the report.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<EvalReport> {
    args.protocol.validate()?;
    let manifest = load_manifest(&args.manifest)?;
    let image_root = manifest_root(&args.manifest);
    let index = manifest.index();

    let (query_set, query_label) = load_side(&args.query_embs, args.l2_normalize)?;
    let (gallery_set, gallery_label) = load_side(&args.gallery_embs, args.l2_normalize)?;
    if query_label != gallery_label {
        return Err(Error::Validation(format!(
            "query branches ({query_label}) differ from gallery branches ({gallery_label})"
        )));
    }

    let lookup = |ids: &[String]| -> Result<Vec<&crate::manifest::ImageRecord>> {
        ids.iter()
            .map(|id| {
                index.get(id.as_str()).copied().ok_or_else(|| {
                    Error::Validation(format!("embedding id `{id}` not in manifest"))
                })
            })
            .collect()
    };
    let query_records = lookup(&query_set.ids)?;
    let gallery_records = lookup(&gallery_set.ids)?;

    let distances = distance_matrix(query_set.matrix.view(), gallery_set.matrix.view())?;
    let rankings = rank_all(&query_set.ids, &distances)?;
    let experiment = args.experiment.clone().unwrap_or(query_label);
    let report = evaluate(
        &query_records,
        &gallery_records,
        &rankings,
        &args.protocol,
        &experiment,
    )?;

    for skipped in &report.skipped_queries {
        eprintln!("warning: query `{skipped}` has no valid relevant gallery entry; skipped");
    }

    let json = serde_json::to_vec_pretty(&report)
        .map_err(|e| Error::Config(format!("report not serializable: {e}")))?;
    write_atomic(&args.out_dir.join("report.json"), &json)?;
    write_atomic(
        &args.out_dir.join("report.txt"),
        report_table(&report).as_bytes(),
    )?;

    if args.render_panels {
        let budget = args.max_panels.unwrap_or(usize::MAX);
        let ranking_by_id: std::collections::HashMap<&str, &crate::fusion::RankedResult> =
            rankings.iter().map(|r| (r.query_id.as_str(), r)).collect();
        for scored in report.per_query.iter().take(budget) {
            let ranking = ranking_by_id[scored.query_id.as_str()];
            let query_rec = index[scored.query_id.as_str()];
            let (relevant, valid) =
                crate::eval::relevance_labels(query_rec, &gallery_records, &args.protocol)?;
            let ranked: Vec<(PathBuf, bool)> = ranking
                .ordering
                .iter()
                .filter(|&&gi| valid[gi])
                .map(|&gi| (image_root.join(&gallery_records[gi].path), relevant[gi]))
                .collect();
            let k = args.topk.min(ranked.len()).max(1);
            render_topk_grid(
                &image_root.join(&query_rec.path),
                &ranked,
                k,
                &args.out_dir.join(format!("topk_{}.png", scored.query_id)),
            )?;
        }
    }

    Ok(report)
}
