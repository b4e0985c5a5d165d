//! Mid-level-feature CNN extractor: a residual network whose embedding is the
//! concatenation of globally averaged features from the penultimate and final
//! stages, plus a dense identity head for classification.

use std::path::PathBuf;

use ndarray::{s, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, softmax_rows, BatchNorm2d,
    BnCache, Conv2d, Conv2dCache, Init, Linear, LinearCache, ParamStore, VarBuilder,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnMidConfig {
    /// Input resolution (H, W); must be divisible by the total downsampling
    /// factor `2^stages`.
    pub input_size: (usize, usize),
    /// Output channel width per stage; stage 0 is the stem.
    pub stage_channels: Vec<usize>,
    /// Residual blocks per stage; stage 0 (the stem) always counts as one.
    pub blocks_per_stage: Vec<usize>,
    /// Width of the dense identity head. Training harnesses set this from the
    /// manifest's train identity count.
    pub num_train_identities: usize,
    /// Weight of the optional cross-entropy term on the identity head; the
    /// default 0 trains on triplet loss alone.
    pub ce_weight: f32,
    /// Optional checkpoint whose matching weights seed this backbone.
    pub pretrained_weights: Option<PathBuf>,
}

impl Default for CnnMidConfig {
    fn default() -> Self {
        CnnMidConfig {
            input_size: (224, 224),
            stage_channels: vec![64, 256, 512, 1024, 2048],
            blocks_per_stage: vec![1, 3, 4, 6, 3],
            num_train_identities: 46,
            ce_weight: 0.0,
            pretrained_weights: None,
        }
    }
}

impl CnnMidConfig {
    /// Desk-scale profile: three stages, 64x64 inputs, trainable in minutes.
    pub fn toy() -> Self {
        CnnMidConfig {
            input_size: (64, 64),
            stage_channels: vec![8, 16, 32],
            blocks_per_stage: vec![1, 1, 1],
            ..Default::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Channel width feeding the semantic (penultimate-stage) tap.
    pub fn semantic_dim(&self) -> usize {
        self.stage_channels[self.stages() - 2]
    }

    /// Channel width of the final stage.
    pub fn global_dim(&self) -> usize {
        self.stage_channels[self.stages() - 1]
    }

    /// Embedding width D = semantic + global.
    pub fn embed_dim(&self) -> usize {
        self.semantic_dim() + self.global_dim()
    }

    /// Every stage (stem included) halves the resolution.
    pub fn downsample_factor(&self) -> usize {
        1 << self.stages()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages() < 2 {
            return Err(Error::Config("need at least 2 stages".into()));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        if self.blocks_per_stage.len() != self.stages() {
            return Err(Error::Config(
                "blocks_per_stage length must match stage_channels".into(),
            ));
        }
        if self.blocks_per_stage[0] != 1 {
            return Err(Error::Config(
                "stage 0 is the stem; its block count is 1".into(),
            ));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(Error::Config("block counts must be positive".into()));
        }
        let f = self.downsample_factor();
        if !self.input_size.0.is_multiple_of(f) || !self.input_size.1.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by downsampling factor {}",
                self.input_size.0, self.input_size.1, f
            )));
        }
        if self.num_train_identities == 0 {
            return Err(Error::Config("num_train_identities must be >= 1".into()));
        }
        if self.ce_weight < 0.0 {
            return Err(Error::Config("ce_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Batched extractor output; row i of every field belongs to image i.
#[derive(Debug, Clone)]
pub struct CnnMidOutput {
    /// GAP of the penultimate stage (B, C_semantic).
    pub semantic: Array2<f32>,
    /// GAP of the final stage (B, C_global).
    pub global: Array2<f32>,
    /// Concatenation `[semantic | global]` (B, D).
    pub embedding: Array2<f32>,
    /// Identity-head logits (B, num_train_identities).
    pub logits: Option<Array2<f32>>,
}

struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    proj: Option<(Conv2d, BatchNorm2d)>,
}

pub struct ResBlockCache {
    c1: Conv2dCache,
    b1: BnCache,
    h1: Array4<f32>,
    c2: Conv2dCache,
    b2: BnCache,
    proj: Option<(Conv2dCache, BnCache)>,
    y: Array4<f32>,
}

impl ResBlock {
    fn new(
        vb: &mut VarBuilder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> ResBlock {
        let mut vb = vb.scope(name);
        let conv1 = Conv2d::new(&mut vb, "conv1", in_ch, out_ch, 3, stride, 1);
        let bn1 = BatchNorm2d::new(&mut vb, "bn1", out_ch);
        let conv2 = Conv2d::new(&mut vb, "conv2", out_ch, out_ch, 3, 1, 1);
        let bn2 = BatchNorm2d::new(&mut vb, "bn2", out_ch);
        let proj = if stride != 1 || in_ch != out_ch {
            let conv = Conv2d::new(&mut vb, "proj_conv", in_ch, out_ch, 1, stride, 0);
            let bn = BatchNorm2d::new(&mut vb, "proj_bn", out_ch);
            Some((conv, bn))
        } else {
            None
        };
        ResBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            proj,
        }
    }

    fn forward(&self, ps: &ParamStore, x: &Array4<f32>) -> Array4<f32> {
        let h = relu(&self.bn1.forward(ps, &self.conv1.forward(ps, x)));
        let h = self.bn2.forward(ps, &self.conv2.forward(ps, &h));
        let shortcut = match &self.proj {
            Some((conv, bn)) => bn.forward(ps, &conv.forward(ps, x)),
            None => x.clone(),
        };
        relu(&(h + shortcut))
    }

    fn forward_t(&self, ps: &mut ParamStore, x: &Array4<f32>) -> (Array4<f32>, ResBlockCache) {
        let (c1_out, c1) = self.conv1.forward_t(ps, x);
        let (b1_out, b1) = self.bn1.forward_t(ps, &c1_out);
        let h1 = relu(&b1_out);
        let (c2_out, c2) = self.conv2.forward_t(ps, &h1);
        let (b2_out, b2) = self.bn2.forward_t(ps, &c2_out);
        let (shortcut, proj) = match &self.proj {
            Some((conv, bn)) => {
                let (p_out, pc) = conv.forward_t(ps, x);
                let (pb_out, pb) = bn.forward_t(ps, &p_out);
                (pb_out, Some((pc, pb)))
            }
            None => (x.clone(), None),
        };
        let y = relu(&(b2_out + shortcut));
        let cache = ResBlockCache {
            c1,
            b1,
            h1,
            c2,
            b2,
            proj,
            y: y.clone(),
        };
        (y, cache)
    }

    fn backward(
        &self,
        ps: &mut ParamStore,
        cache: &ResBlockCache,
        dy: &Array4<f32>,
    ) -> Array4<f32> {
        let dsum = relu_backward(&cache.y, dy);
        let dh = self.bn2.backward(ps, &cache.b2, &dsum);
        let dh = self.conv2.backward(ps, &cache.c2, &dh);
        let dh = relu_backward(&cache.h1, &dh);
        let dh = self.bn1.backward(ps, &cache.b1, &dh);
        let mut dx = self.conv1.backward(ps, &cache.c1, &dh);
        match (&self.proj, &cache.proj) {
            (Some((conv, bn)), Some((pc, pb))) => {
                let dp = bn.backward(ps, pb, &dsum);
                dx += &conv.backward(ps, pc, &dp);
            }
            _ => dx += &dsum,
        }
        dx
    }
}

pub struct CnnMidNet {
    pub cfg: CnnMidConfig,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<ResBlock>>,
    head: Linear,
}

pub struct CnnMidCache {
    stem_c: Conv2dCache,
    stem_b: BnCache,
    stem_y: Array4<f32>,
    blocks: Vec<Vec<ResBlockCache>>,
    tap_hw: (usize, usize),
    final_hw: (usize, usize),
    head: LinearCache,
}

impl CnnMidNet {
    pub fn new(cfg: CnnMidConfig, vb: &mut VarBuilder) -> Result<CnnMidNet> {
        cfg.validate()?;
        let mut vb = vb.scope("cnn_mid");
        let stem_conv = Conv2d::new(&mut vb, "stem_conv", 3, cfg.stage_channels[0], 3, 2, 1);
        let stem_bn = BatchNorm2d::new(&mut vb, "stem_bn", cfg.stage_channels[0]);

        let mut stages = Vec::new();
        for s in 1..cfg.stages() {
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_stage[s] {
                let in_ch = if b == 0 {
                    cfg.stage_channels[s - 1]
                } else {
                    cfg.stage_channels[s]
                };
                let stride = if b == 0 { 2 } else { 1 };
                blocks.push(ResBlock::new(
                    &mut vb,
                    &format!("stage{s}.block{b}"),
                    in_ch,
                    cfg.stage_channels[s],
                    stride,
                ));
            }
            stages.push(blocks);
        }

        let head = Linear::new(
            &mut vb,
            "head",
            cfg.embed_dim(),
            cfg.num_train_identities,
            true,
            Init::TruncNormal { std: 0.02 },
        );

        Ok(CnnMidNet {
            cfg,
            stem_conv,
            stem_bn,
            stages,
            head,
        })
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let (b, c, h, w) = x.dim();
        if b == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if c != 3 || (h, w) != self.cfg.input_size {
            return Err(Error::Shape(format!(
                "expected (_, 3, {}, {}), got ({b}, {c}, {h}, {w})",
                self.cfg.input_size.0, self.cfg.input_size.1
            )));
        }
        Ok(())
    }

    /// Inference pass producing semantic/global/embedding (and logits).
    pub fn forward_features(&self, ps: &ParamStore, x: &Array4<f32>) -> Result<CnnMidOutput> {
        self.check_input(x)?;
        let mut h = relu(&self.stem_bn.forward(ps, &self.stem_conv.forward(ps, x)));
        // The semantic tap sits at the penultimate stage; for a two-stage
        // config that is the stem itself.
        let n_stages = self.stages.len();
        let mut semantic = (n_stages == 1).then(|| global_avg_pool(&h));
        for (i, blocks) in self.stages.iter().enumerate() {
            for block in blocks {
                h = block.forward(ps, &h);
            }
            if i + 2 == n_stages {
                semantic = Some(global_avg_pool(&h));
            }
        }
        let semantic = semantic.expect("tap always set for >= 2 config stages");
        let global = global_avg_pool(&h);
        let embedding = concat_rows(&semantic, &global);
        let logits = self.head.forward(ps, &embedding);
        Ok(CnnMidOutput {
            semantic,
            global,
            embedding,
            logits: Some(logits),
        })
    }

    /// Inference embedding only (rows align with the input batch).
    pub fn forward_embed(&self, ps: &ParamStore, x: &Array4<f32>) -> Result<Array2<f32>> {
        Ok(self.forward_features(ps, x)?.embedding)
    }

    /// Identity-head probabilities for a batch of embeddings.
    pub fn classify(&self, ps: &ParamStore, embeddings: &Array2<f32>) -> Result<Array2<f32>> {
        if embeddings.ncols() != self.cfg.embed_dim() {
            return Err(Error::Shape(format!(
                "embedding dim {} does not match head input {}",
                embeddings.ncols(),
                self.cfg.embed_dim()
            )));
        }
        Ok(softmax_rows(&self.head.forward(ps, embeddings)))
    }

    /// Training pass; returns (embedding, logits, cache).
    pub fn forward_t(
        &self,
        ps: &mut ParamStore,
        x: &Array4<f32>,
    ) -> Result<(Array2<f32>, Array2<f32>, CnnMidCache)> {
        self.check_input(x)?;
        let (stem_out, stem_c) = self.stem_conv.forward_t(ps, x);
        let (stem_bn_out, stem_b) = self.stem_bn.forward_t(ps, &stem_out);
        let stem_y = relu(&stem_bn_out);

        let mut h = stem_y.clone();
        let mut blocks_cache = Vec::new();
        let n_stages = self.stages.len();
        let mut tap_hw = (stem_y.dim().2, stem_y.dim().3);
        let mut semantic = (n_stages == 1).then(|| global_avg_pool(&h));
        for (i, blocks) in self.stages.iter().enumerate() {
            let mut stage_cache = Vec::new();
            for block in blocks {
                let (out, cache) = block.forward_t(ps, &h);
                h = out;
                stage_cache.push(cache);
            }
            blocks_cache.push(stage_cache);
            if i + 2 == n_stages {
                tap_hw = (h.dim().2, h.dim().3);
                semantic = Some(global_avg_pool(&h));
            }
        }
        let semantic = semantic.expect("tap always set for >= 2 config stages");
        let final_hw = (h.dim().2, h.dim().3);
        let global = global_avg_pool(&h);
        let embedding = concat_rows(&semantic, &global);
        let (logits, head) = self.head.forward_t(ps, &embedding);

        Ok((
            embedding,
            logits,
            CnnMidCache {
                stem_c,
                stem_b,
                stem_y,
                blocks: blocks_cache,
                tap_hw,
                final_hw,
                head,
            },
        ))
    }

    /// Backpropagates gradients w.r.t. the embedding (and, optionally, the
    /// identity-head logits) into every weight.
    pub fn backward(
        &self,
        ps: &mut ParamStore,
        cache: &CnnMidCache,
        dembedding: &Array2<f32>,
        dlogits: Option<&Array2<f32>>,
    ) {
        let mut demb = dembedding.clone();
        if let Some(dl) = dlogits {
            demb += &self.head.backward(ps, &cache.head, dl);
        }
        let c_sem = self.cfg.semantic_dim();
        let dsem = demb.slice(s![.., ..c_sem]).to_owned();
        let dglob = demb.slice(s![.., c_sem..]).to_owned();

        let n_stages = self.stages.len();
        let mut dh = global_avg_pool_backward(cache.final_hw, &dglob);
        for i in (0..n_stages).rev() {
            for (block, bc) in self.stages[i].iter().zip(&cache.blocks[i]).rev() {
                dh = block.backward(ps, bc, &dh);
            }
            if i + 1 == n_stages && n_stages >= 2 {
                // dh is now the gradient at the penultimate stage output; add
                // the semantic tap's contribution.
                dh += &global_avg_pool_backward(cache.tap_hw, &dsem);
            }
        }
        if n_stages == 1 {
            // Two-stage config: the tap sits on the stem output.
            dh += &global_avg_pool_backward(cache.tap_hw, &dsem);
        }
        let dh = relu_backward(&cache.stem_y, &dh);
        let dh = self.stem_bn.backward(ps, &cache.stem_b, &dh);
        let _ = self.stem_conv.backward(ps, &cache.stem_c, &dh);
    }
}

fn concat_rows(a: &Array2<f32>, b: &Array2<f32>) -> Array2<f32> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("row counts match")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: CnnMidConfig, seed: u64) -> (CnnMidNet, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = {
            let mut vb = VarBuilder::new(&mut store, &mut rng);
            CnnMidNet::new(cfg, &mut vb).unwrap()
        };
        (net, store)
    }

    fn rand_batch(n: usize, hw: (usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn((n, 3, hw.0, hw.1), || rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn default_embed_dim_is_3072() {
        let cfg = CnnMidConfig::default();
        assert_eq!(cfg.semantic_dim(), 1024);
        assert_eq!(cfg.global_dim(), 2048);
        assert_eq!(cfg.embed_dim(), 3072);
    }

    #[test]
    fn small_stage_widths_add_up() {
        let cfg = CnnMidConfig {
            input_size: (32, 32),
            stage_channels: vec![4, 8, 16],
            blocks_per_stage: vec![1, 1, 1],
            ..Default::default()
        };
        assert_eq!(cfg.embed_dim(), 24);
    }

    #[test]
    fn embed_dim_additivity_over_random_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(2usize..6);
            let widths: Vec<usize> = (0..n).map(|_| rng.random_range(1usize..64)).collect();
            let cfg = CnnMidConfig {
                input_size: (64, 64),
                blocks_per_stage: vec![1; n],
                stage_channels: widths.clone(),
                ..Default::default()
            };
            assert_eq!(cfg.embed_dim(), widths[n - 2] + widths[n - 1]);
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        let cfg = CnnMidConfig {
            input_size: (30, 64),
            ..CnnMidConfig::toy()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn embedding_is_semantic_then_global() {
        let (net, store) = build(CnnMidConfig::toy(), 3);
        let x = rand_batch(2, (64, 64), 11);
        let out = net.forward_features(&store, &x).unwrap();
        assert_eq!(out.semantic.dim(), (2, 16));
        assert_eq!(out.global.dim(), (2, 32));
        assert_eq!(out.embedding.dim(), (2, 48));
        for i in 0..2 {
            for j in 0..16 {
                assert_eq!(out.embedding[[i, j]], out.semantic[[i, j]]);
            }
            for j in 0..32 {
                assert_eq!(out.embedding[[i, 16 + j]], out.global[[i, j]]);
            }
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let (net, store) = build(CnnMidConfig::toy(), 3);
        let x = rand_batch(3, (64, 64), 11);
        let a = net.forward_embed(&store, &x).unwrap();
        let b = net.forward_embed(&store, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_inputs_place_apart() {
        let (net, store) = build(CnnMidConfig::toy(), 3);
        let x = rand_batch(4, (64, 64), 11);
        let e = net.forward_embed(&store, &x).unwrap();
        for i in 0..4 {
            for j in (i + 1)..4 {
                let d: f32 = (&e.row(i) - &e.row(j)).mapv(|v| v * v).sum();
                assert!(d > 1e-8, "rows {i} and {j} collide");
            }
        }
    }

    #[test]
    fn classify_with_zero_head_is_uniform() {
        let (net, mut store) = build(
            CnnMidConfig {
                num_train_identities: 46,
                ..CnnMidConfig::toy()
            },
            3,
        );
        store.value_mut(net.head.w).fill(0.0);
        store.value_mut(net.head.b.unwrap()).fill(0.0);
        let emb = Array2::from_elem((2, net.cfg.embed_dim()), 0.7f32);
        let p = net.classify(&store, &emb).unwrap();
        assert_eq!(p.dim(), (2, 46));
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            for &v in row {
                assert!((v - 1.0 / 46.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn classify_is_shift_invariant_and_peaks_at_boosted_logit() {
        let (net, mut store) = build(
            CnnMidConfig {
                num_train_identities: 5,
                ..CnnMidConfig::toy()
            },
            9,
        );
        let emb = rand_batch(1, (64, 64), 1)
            .into_shape_with_order((3 * 64 * 64,))
            .unwrap()
            .slice(s![..net.cfg.embed_dim()])
            .to_owned()
            .insert_axis(Axis(0));

        let p1 = net.classify(&store, &emb).unwrap();
        // Adding a constant to every logit via the bias leaves probabilities alone.
        store
            .value_mut(net.head.b.unwrap())
            .mapv_inplace(|v| v + 3.0);
        let p2 = net.classify(&store, &emb).unwrap();
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
        // Boosting one logit by 10 makes it the argmax.
        store.value_mut(net.head.b.unwrap()).as_slice_mut().unwrap()[2] += 10.0;
        let p3 = net.classify(&store, &emb).unwrap();
        let argmax = p3
            .row(0)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 2);
    }

    #[test]
    fn batch_shape_mismatch_is_an_error() {
        let (net, store) = build(CnnMidConfig::toy(), 3);
        let x = rand_batch(1, (32, 64), 11);
        assert!(net.forward_embed(&store, &x).is_err());
        let empty = Array4::<f32>::zeros((0, 3, 64, 64));
        assert!(net.forward_embed(&store, &empty).is_err());
    }

    #[test]
    fn backward_matches_finite_differences_on_sampled_weights() {
        let cfg = CnnMidConfig {
            input_size: (16, 16),
            stage_channels: vec![4, 6],
            blocks_per_stage: vec![1, 1],
            num_train_identities: 3,
            ..Default::default()
        };
        let (net, mut store) = build(cfg, 21);
        let x = rand_batch(2, (16, 16), 77);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe = Array2::from_shape_simple_fn((2, net.cfg.embed_dim()), || {
            rng.random_range(-1.0f32..1.0)
        });

        let (_, _, cache) = net.forward_t(&mut store, &x).unwrap();
        store.zero_grads();
        net.backward(&mut store, &cache, &probe, None);

        // Training-path loss for finite differences (batch statistics).
        let loss = |s: &ParamStore| {
            let (emb, _, _) = net.forward_t(&mut s.clone(), &x).unwrap();
            (emb * &probe).sum()
        };

        const H: f32 = 1e-2;
        let mut checked = 0;
        for pi in 0..store.len() {
            let id = crate::nn::ParamId(pi);
            let param = store.param(id);
            if !param.trainable || param.name.contains("head") {
                continue;
            }
            let len = param.value.len();
            for k in [0usize, len / 2] {
                let analytic = param.grad.as_slice().unwrap()[k];
                let mut shadow = store.clone();
                let orig = shadow.param(id).value.as_slice().unwrap()[k];
                shadow.value_mut(id).as_slice_mut().unwrap()[k] = orig + H;
                let fp = loss(&shadow);
                shadow.value_mut(id).as_slice_mut().unwrap()[k] = orig - H;
                let fm = loss(&shadow);
                let fd = (fp - fm) / (2.0 * H);
                let denom = analytic.abs().max(fd.abs()).max(1.0);
                assert!(
                    (analytic - fd).abs() / denom < 3e-2,
                    "{} [{k}]: analytic {analytic} vs fd {fd}",
                    store.param(id).name
                );
                checked += 1;
            }
        }
        assert!(checked >= 10);
    }
}
