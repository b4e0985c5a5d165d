//! Training loop: P x K batches, batch-hard triplet loss (plus the optional
//! identity-head cross-entropy for the CNN), RMSProp or SGD updates. Runs are
//! bit-reproducible for a fixed seed.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneKind};
use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::imgio;
use crate::manifest::{ImageRecord, Manifest, Split};
use crate::metric::checkpoint::CheckpointConfig;
use crate::metric::sampler::pk_sample_from_groups;
use crate::metric::triplet::batch_hard_triplet_loss;
use crate::nn::{derive_seed, softmax_rows, Optimizer, OptimizerKind, ParamStore};

/// Multiplicative learning-rate schedule, off by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrStep {
    pub every_epochs: usize,
    pub gamma: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    /// Optimizer L2 weight decay.
    pub weight_decay: f32,
    pub seed: u64,
    pub backbone: BackboneKind,
    pub optimizer: OptimizerKind,
    /// Optional step schedule; `None` keeps the learning rate constant.
    pub lr_step: Option<LrStep>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            learning_rate: 0.001,
            weight_decay: 5e-4,
            seed: 0,
            backbone: BackboneKind::CnnMid,
            optimizer: OptimizerKind::RmsProp,
            lr_step: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and > 0".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be finite and >= 0".into()));
        }
        if let Some(step) = &self.lr_step {
            if step.every_epochs == 0 || step.gamma <= 0.0 || !step.gamma.is_finite() {
                return Err(Error::Config("invalid lr_step".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

pub struct TrainRun {
    pub backbone: Backbone,
    pub store: ParamStore,
    pub history: Vec<StepLoss>,
    /// Config snapshot with the effective values (e.g. identity-head width
    /// set from the manifest).
    pub config: CheckpointConfig,
}

/// Softmax cross-entropy over class logits; returns mean loss and dlogits.
pub fn softmax_cross_entropy(logits: &Array2<f32>, targets: &[usize]) -> (f64, Array2<f32>) {
    let probs = softmax_rows(logits);
    let n = logits.nrows();
    let mut loss = 0.0f64;
    let mut dlogits = probs.clone();
    for (i, &t) in targets.iter().enumerate() {
        loss -= (probs[[i, t]].max(1e-12) as f64).ln();
        dlogits[[i, t]] -= 1.0;
    }
    dlogits.mapv_inplace(|v| v / n as f32);
    (loss / n as f64, dlogits)
}

fn load_image_cache(
    records: &[&ImageRecord],
    image_root: &Path,
    input_size: (usize, usize),
) -> Result<HashMap<String, Array3<f32>>> {
    let mut cache = HashMap::new();
    for rec in records {
        let path = image_root.join(&rec.path);
        let img = imgio::load_rgb(&path)?;
        let (w, h) = img.dimensions();
        if (h as usize, w as usize) != input_size {
            return Err(Error::Shape(format!(
                "{} is {}x{}, backbone expects {}x{}",
                path.display(),
                w,
                h,
                input_size.1,
                input_size.0
            )));
        }
        cache.insert(rec.image_id.clone(), imgio::image_to_tensor(&img));
    }
    Ok(cache)
}

fn stack_batch(
    batch: &[&ImageRecord],
    cache: &HashMap<String, Array3<f32>>,
    input_size: (usize, usize),
) -> Array4<f32> {
    let mut x = Array4::zeros((batch.len(), 3, input_size.0, input_size.1));
    for (i, rec) in batch.iter().enumerate() {
        x.index_axis_mut(Axis(0), i).assign(&cache[&rec.image_id]);
    }
    x
}

/// Fits the configured backbone on the manifest's train split.
///
/// Relative record paths resolve against `image_root` (normally the
/// manifest's directory). The loss history has one entry per step; a
/// non-finite loss aborts with a numerical error.
pub fn train(
    manifest: &Manifest,
    image_root: &Path,
    config: &CheckpointConfig,
) -> Result<TrainRun> {
    config.train.validate()?;
    config.sampler.validate()?;
    config.triplet.validate()?;

    let groups = manifest.by_identity(Split::Train);
    if groups.is_empty() {
        return Err(Error::Validation("train split is empty".into()));
    }
    if groups.len() < config.sampler.p {
        return Err(Error::Validation(format!(
            "sampler needs {} identities, train split has {}",
            config.sampler.p,
            groups.len()
        )));
    }
    let class_of: HashMap<&str, usize> = groups
        .iter()
        .enumerate()
        .map(|(i, (id, _))| (*id, i))
        .collect();
    let n_train_images: usize = groups.iter().map(|(_, recs)| recs.len()).sum();

    // The identity head always matches the manifest.
    let mut config = config.clone();
    config.cnn_mid.num_train_identities = groups.len();

    let mut store = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.train.seed, 0xA11CE));
    let backbone = Backbone::build(
        config.train.backbone,
        &config.cnn_mid,
        &config.transformer,
        &mut store,
        &mut init_rng,
    )?;
    if config.train.backbone == BackboneKind::CnnMid {
        if let Some(path) = config.cnn_mid.pretrained_weights.clone() {
            let imported = crate::metric::checkpoint::load_pretrained(&mut store, &path)?;
            if imported == 0 {
                return Err(Error::Validation(format!(
                    "pretrained checkpoint {} shares no weights with this architecture",
                    path.display()
                )));
            }
        }
    }

    let train_records: Vec<&ImageRecord> = manifest.split(Split::Train);
    let image_cache = load_image_cache(&train_records, image_root, backbone.input_size())?;

    let mut sampler_rng = ChaCha8Rng::seed_from_u64(derive_seed(
        config.train.seed ^ config.sampler.seed,
        0xBA7C4,
    ));
    let mut optimizer = Optimizer::new(
        config.train.optimizer,
        config.train.learning_rate,
        config.train.weight_decay,
    );

    let batch_size = config.sampler.batch_size();
    let steps_per_epoch = n_train_images.div_ceil(batch_size);
    let ce_weight = backbone.ce_weight();

    let mut history = Vec::with_capacity(config.train.epochs * steps_per_epoch);
    let mut step = 0usize;
    for epoch in 0..config.train.epochs {
        if let Some(lr_step) = &config.train.lr_step {
            if epoch > 0 && epoch % lr_step.every_epochs == 0 {
                optimizer.lr *= lr_step.gamma;
            }
        }
        for _ in 0..steps_per_epoch {
            let batch = pk_sample_from_groups(&groups, &config.sampler, &mut sampler_rng)?;
            let x = stack_batch(&batch, &image_cache, backbone.input_size());
            let labels: Vec<usize> = batch
                .iter()
                .map(|r| class_of[r.vehicle_id.as_str()])
                .collect();

            store.zero_grads();
            let (emb, logits, cache) = backbone.forward_t(&mut store, &x)?;
            let emb64 = emb.mapv(|v| v as f64);
            let (triplet_loss, grad64) = batch_hard_triplet_loss(&emb64, &labels, &config.triplet)?;

            let mut total = triplet_loss;
            let dlogits = match (&logits, ce_weight > 0.0) {
                (Some(logits), true) => {
                    let (ce, mut dl) = softmax_cross_entropy(logits, &labels);
                    total += ce_weight as f64 * ce;
                    dl.mapv_inplace(|v| v * ce_weight);
                    Some(dl)
                }
                _ => None,
            };
            if !total.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss became non-finite at step {step} (epoch {epoch})"
                )));
            }

            let demb = grad64.mapv(|v| v as f32);
            backbone.backward(&mut store, &cache, &demb, dlogits.as_ref());
            optimizer.step(&mut store);

            history.push(StepLoss {
                step,
                epoch,
                loss: total,
            });
            step += 1;
        }
    }

    Ok(TrainRun {
        backbone,
        store,
        history,
        config,
    })
}

/// Renders the loss history as `step,epoch,loss` CSV.
pub fn loss_history_csv(history: &[StepLoss]) -> Vec<u8> {
    let mut out = String::from("step,epoch,loss\n");
    for h in history {
        out.push_str(&format!("{},{},{}\n", h.step, h.epoch, h.loss));
    }
    out.into_bytes()
}

/// Embeds a record list with a trained backbone (inference mode), preserving
/// record order.
pub fn extract_embeddings(
    backbone: &Backbone,
    store: &ParamStore,
    records: &[&ImageRecord],
    image_root: &Path,
    batch_size: usize,
) -> Result<EmbeddingSet> {
    if records.is_empty() {
        return Err(Error::Validation("no records to embed".into()));
    }
    let batch_size = batch_size.max(1);
    let (h, w) = backbone.input_size();
    let mut matrix = Array2::<f32>::zeros((records.len(), backbone.embed_dim()));
    for (chunk_idx, chunk) in records.chunks(batch_size).enumerate() {
        let paths: Vec<std::path::PathBuf> =
            chunk.iter().map(|r| image_root.join(&r.path)).collect();
        let path_refs: Vec<&Path> = paths.iter().map(|p| p.as_path()).collect();
        let x = imgio::load_batch(&path_refs, (h, w))?;
        let emb = backbone.embed(store, &x)?;
        let row0 = chunk_idx * batch_size;
        matrix
            .slice_mut(ndarray::s![row0..row0 + chunk.len(), ..])
            .assign(&emb);
    }
    EmbeddingSet::new(
        backbone.branch(),
        records.iter().map(|r| r.image_id.clone()).collect(),
        matrix,
    )
}
