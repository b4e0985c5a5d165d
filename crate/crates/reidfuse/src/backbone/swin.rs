//! Hierarchical windowed-attention transformer extractor: patch partition,
//! linear token embedding, stages of (shifted-)window self-attention with
//! patch merging between stages, and a final global average over tokens.

use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    gelu, gelu_backward, softmax_rows, softmax_rows_backward, token_mean, token_mean_backward,
    Init, LayerNorm, Linear, LinearCache, LnCache, ParamId, ParamStore, VarBuilder,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WinTransformerConfig {
    pub input_size: (usize, usize),
    pub patch_size: usize,
    /// Token width C after the linear embedding.
    pub embed_dim: usize,
    /// Transformer blocks per stage.
    pub depths: Vec<usize>,
    /// Attention heads per stage.
    pub heads: Vec<usize>,
    /// Tokens per window side.
    pub window: usize,
    /// Neighboring patches merged per side between stages (token width
    /// doubles per merge when merge >= 2).
    pub merge: usize,
    pub mlp_ratio: f32,
    /// Alternate shifted windows on odd blocks for cross-window flow.
    pub shifted_windows: bool,
}

impl Default for WinTransformerConfig {
    fn default() -> Self {
        WinTransformerConfig {
            input_size: (224, 224),
            patch_size: 4,
            embed_dim: 96,
            depths: vec![2, 2, 18, 2],
            heads: vec![3, 6, 12, 24],
            window: 7,
            merge: 2,
            mlp_ratio: 4.0,
            shifted_windows: true,
        }
    }
}

impl WinTransformerConfig {
    /// Desk-scale profile: 64x64 inputs, C=24, two stages, window 4.
    pub fn toy() -> Self {
        WinTransformerConfig {
            input_size: (64, 64),
            patch_size: 4,
            embed_dim: 24,
            depths: vec![2, 2],
            heads: vec![2, 4],
            window: 4,
            ..Default::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    /// Flattened patch width: patch_size^2 * 3.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    fn expansion(&self) -> usize {
        if self.merge >= 2 {
            2
        } else {
            1
        }
    }

    /// Token width at stage `s`.
    pub fn stage_dim(&self, s: usize) -> usize {
        self.embed_dim * self.expansion().pow(s as u32)
    }

    /// Final embedding width: C times the expansion across stages
    /// (8C = 768 for the defaults).
    pub fn embed_out_dim(&self) -> usize {
        self.stage_dim(self.stages() - 1)
    }

    /// Token grid at stage `s`.
    pub fn stage_grid(&self, s: usize) -> (usize, usize) {
        let d = self.merge.pow(s as u32);
        (
            self.input_size.0 / self.patch_size / d,
            self.input_size.1 / self.patch_size / d,
        )
    }

    fn effective_window(&self, grid: (usize, usize)) -> usize {
        self.window.min(grid.0).min(grid.1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages() == 0 {
            return Err(Error::Config("need at least one stage".into()));
        }
        if self.heads.len() != self.stages() {
            return Err(Error::Config("heads length must match depths".into()));
        }
        if self.patch_size == 0 || self.window == 0 || self.merge == 0 || self.embed_dim == 0 {
            return Err(Error::Config("sizes must be positive".into()));
        }
        if !self.input_size.0.is_multiple_of(self.patch_size)
            || !self.input_size.1.is_multiple_of(self.patch_size)
        {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by patch size {}",
                self.input_size.0, self.input_size.1, self.patch_size
            )));
        }
        for s in 0..self.stages() {
            let grid = self.stage_grid(s);
            if grid.0 == 0 || grid.1 == 0 {
                return Err(Error::Config(format!("stage {s} grid vanishes")));
            }
            let w = self.effective_window(grid);
            if !grid.0.is_multiple_of(w) || !grid.1.is_multiple_of(w) {
                return Err(Error::Config(format!(
                    "stage {s} grid {}x{} not tiled by window {w}",
                    grid.0, grid.1
                )));
            }
            if !self.stage_dim(s).is_multiple_of(self.heads[s]) {
                return Err(Error::Config(format!(
                    "stage {s} dim {} not divisible by {} heads",
                    self.stage_dim(s),
                    self.heads[s]
                )));
            }
            if s + 1 < self.stages()
                && (!grid.0.is_multiple_of(self.merge) || !grid.1.is_multiple_of(self.merge))
            {
                return Err(Error::Config(format!(
                    "stage {s} grid {}x{} not divisible by merge {}",
                    grid.0, grid.1, self.merge
                )));
            }
        }
        Ok(())
    }
}

/// A batch-free token grid, as produced by [`patch_partition`]: one row per
/// token, `rows * cols` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub tokens: Array2<f32>,
    pub grid: (usize, usize),
}

impl TokenGrid {
    pub fn new(tokens: Array2<f32>, grid: (usize, usize)) -> Result<TokenGrid> {
        if grid.0 * grid.1 != tokens.nrows() {
            return Err(Error::Shape(format!(
                "{}x{} grid cannot hold {} tokens",
                grid.0,
                grid.1,
                tokens.nrows()
            )));
        }
        Ok(TokenGrid { tokens, grid })
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Splits one image (3, H, W) into non-overlapping `patch x patch` tokens of
/// width `patch * patch * 3`.
pub fn patch_partition(image: &Array3<f32>, patch: usize) -> Result<TokenGrid> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} not divisible by patch {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut tokens = Array2::<f32>::zeros((gh * gw, patch * patch * 3));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = tokens.row_mut(gy * gw + gx);
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..3 {
                        row[(py * patch + px) * 3 + ch] =
                            image[[ch, gy * patch + py, gx * patch + px]];
                    }
                }
            }
        }
    }
    TokenGrid::new(tokens, (gh, gw))
}

/// Inverse of [`patch_partition`]; partitioning is a bijection on pixels.
pub fn patch_unpartition(grid: &TokenGrid, patch: usize) -> Result<Array3<f32>> {
    let (gh, gw) = grid.grid;
    if grid.dim() != patch * patch * 3 {
        return Err(Error::Shape(format!(
            "token dim {} does not match patch {patch}",
            grid.dim()
        )));
    }
    let mut image = Array3::<f32>::zeros((3, gh * patch, gw * patch));
    for gy in 0..gh {
        for gx in 0..gw {
            let row = grid.tokens.row(gy * gw + gx);
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..3 {
                        image[[ch, gy * patch + py, gx * patch + px]] =
                            row[(py * patch + px) * 3 + ch];
                    }
                }
            }
        }
    }
    Ok(image)
}

/// Batched patch partition: (B, 3, H, W) -> (B, T, patch^2*3).
fn partition_batch(x: &Array4<f32>, patch: usize) -> Result<Array3<f32>> {
    let (b, _, h, w) = x.dim();
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array3::<f32>::zeros((b, gh * gw, patch * patch * 3));
    for bi in 0..b {
        let grid = patch_partition(&x.index_axis(Axis(0), bi).to_owned(), patch)?;
        out.index_axis_mut(Axis(0), bi).assign(&grid.tokens);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Token-grid permutations
// ---------------------------------------------------------------------------

/// Cyclic roll of the token grid: the token at (y, x) moves to
/// ((y + sy) mod h, (x + sx) mod w).
fn roll_grid(x: &Array3<f32>, grid: (usize, usize), sy: isize, sx: isize) -> Array3<f32> {
    let (b, t, c) = x.dim();
    let (h, w) = grid;
    debug_assert_eq!(t, h * w);
    let mut out = Array3::<f32>::zeros((b, t, c));
    for y in 0..h {
        let src_y = (y as isize - sy).rem_euclid(h as isize) as usize;
        for xx in 0..w {
            let src_x = (xx as isize - sx).rem_euclid(w as isize) as usize;
            let src_t = src_y * w + src_x;
            let dst_t = y * w + xx;
            for bi in 0..b {
                for ci in 0..c {
                    out[[bi, dst_t, ci]] = x[[bi, src_t, ci]];
                }
            }
        }
    }
    out
}

/// (B, T, C) -> (B * nW, window^2, C) over non-overlapping windows, window
/// index running row-major over the window grid.
fn window_partition(x: &Array3<f32>, grid: (usize, usize), ws: usize) -> Array3<f32> {
    let (b, _, c) = x.dim();
    let (h, w) = grid;
    let (nh, nw) = (h / ws, w / ws);
    let mut out = Array3::<f32>::zeros((b * nh * nw, ws * ws, c));
    for bi in 0..b {
        for wy in 0..nh {
            for wx in 0..nw {
                let wi = bi * nh * nw + wy * nw + wx;
                for py in 0..ws {
                    for px in 0..ws {
                        let src_t = (wy * ws + py) * w + (wx * ws + px);
                        for ci in 0..c {
                            out[[wi, py * ws + px, ci]] = x[[bi, src_t, ci]];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`window_partition`].
fn window_reverse(xw: &Array3<f32>, grid: (usize, usize), ws: usize) -> Array3<f32> {
    let (bnw, _, c) = xw.dim();
    let (h, w) = grid;
    let (nh, nw) = (h / ws, w / ws);
    let b = bnw / (nh * nw);
    let mut out = Array3::<f32>::zeros((b, h * w, c));
    for bi in 0..b {
        for wy in 0..nh {
            for wx in 0..nw {
                let wi = bi * nh * nw + wy * nw + wx;
                for py in 0..ws {
                    for px in 0..ws {
                        let dst_t = (wy * ws + py) * w + (wx * ws + px);
                        for ci in 0..c {
                            out[[bi, dst_t, ci]] = xw[[wi, py * ws + px, ci]];
                        }
                    }
                }
            }
        }
    }
    out
}

const MASK_OFF: f32 = -1e9;

/// Attention masks for shifted windows: tokens that were not neighbors before
/// the cyclic shift may not attend to each other. One (T, T) additive mask per
/// window, indexed row-major over the window grid.
fn shifted_window_masks(grid: (usize, usize), ws: usize, shift: usize) -> Vec<Array2<f32>> {
    let (h, w) = grid;
    let region = |coord: usize, len: usize| -> usize {
        if coord < len - ws {
            0
        } else if coord < len - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (h / ws, w / ws);
    let t = ws * ws;
    let mut masks = Vec::with_capacity(nh * nw);
    for wy in 0..nh {
        for wx in 0..nw {
            let mut ids = vec![0usize; t];
            for py in 0..ws {
                for px in 0..ws {
                    let y = wy * ws + py;
                    let x = wx * ws + px;
                    ids[py * ws + px] = region(y, h) * 3 + region(x, w);
                }
            }
            let mut mask = Array2::<f32>::zeros((t, t));
            for i in 0..t {
                for j in 0..t {
                    if ids[i] != ids[j] {
                        mask[[i, j]] = MASK_OFF;
                    }
                }
            }
            masks.push(mask);
        }
    }
    masks
}

// ---------------------------------------------------------------------------
// Window attention
// ---------------------------------------------------------------------------

pub struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    /// Relative position bias table ((2w-1)^2, heads), zero-initialized.
    rpb: ParamId,
    /// Precomputed (T*T) lookup into the bias table.
    rel_index: Vec<usize>,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
}

pub struct AttnCache {
    qkv_out: Array2<f32>,
    qkv_cache: LinearCache,
    probs: Vec<Array2<f32>>,
    proj_cache: LinearCache,
    n_windows: usize,
    t: usize,
}

impl WindowAttention {
    pub fn new(
        vb: &mut VarBuilder,
        name: &str,
        dim: usize,
        window: usize,
        heads: usize,
    ) -> WindowAttention {
        let mut vb = vb.scope(name);
        let qkv = Linear::new(
            &mut vb,
            "qkv",
            dim,
            3 * dim,
            true,
            Init::TruncNormal { std: 0.02 },
        );
        let proj = Linear::new(
            &mut vb,
            "proj",
            dim,
            dim,
            true,
            Init::TruncNormal { std: 0.02 },
        );
        let span = 2 * window - 1;
        let rpb = vb.add("rpb", Init::Zeros, &[span * span, heads]);

        let t = window * window;
        let mut rel_index = vec![0usize; t * t];
        for i in 0..t {
            let (yi, xi) = (i / window, i % window);
            for j in 0..t {
                let (yj, xj) = (j / window, j % window);
                let dy = yi as isize - yj as isize + window as isize - 1;
                let dx = xi as isize - xj as isize + window as isize - 1;
                rel_index[i * t + j] = dy as usize * span + dx as usize;
            }
        }

        WindowAttention {
            qkv,
            proj,
            rpb,
            rel_index,
            dim,
            heads,
            window,
        }
    }

    fn scale(&self) -> f32 {
        1.0 / ((self.dim / self.heads) as f32).sqrt()
    }

    #[allow(clippy::too_many_arguments)]
    fn scores(
        &self,
        ps: &ParamStore,
        qkv: &Array2<f32>,
        nw: usize,
        h: usize,
        t: usize,
        masks: Option<&[Array2<f32>]>,
        n_img_windows: usize,
    ) -> Array2<f32> {
        let hd = self.dim / self.heads;
        let rpb = ps.value(self.rpb);
        let mut s = Array2::<f32>::zeros((t, t));
        for i in 0..t {
            for j in 0..t {
                let mut acc = 0.0f32;
                for d in 0..hd {
                    acc += qkv[[nw * t + i, h * hd + d]] * qkv[[nw * t + j, self.dim + h * hd + d]];
                }
                s[[i, j]] = acc * self.scale() + rpb[[self.rel_index[i * t + j], h]];
            }
        }
        if let Some(masks) = masks {
            s += &masks[nw % n_img_windows];
        }
        s
    }

    /// Attention over windows: x is (B*nW, T, C); `masks`, when present,
    /// holds one additive (T, T) mask per within-image window.
    pub fn forward(
        &self,
        ps: &ParamStore,
        x: &Array3<f32>,
        masks: Option<&[Array2<f32>]>,
    ) -> Array3<f32> {
        self.run(ps, x, masks).0
    }

    pub fn forward_t(
        &self,
        ps: &ParamStore,
        x: &Array3<f32>,
        masks: Option<&[Array2<f32>]>,
    ) -> (Array3<f32>, AttnCache) {
        self.run(ps, x, masks)
    }

    fn run(
        &self,
        ps: &ParamStore,
        x: &Array3<f32>,
        masks: Option<&[Array2<f32>]>,
    ) -> (Array3<f32>, AttnCache) {
        let (bnw, t, c) = x.dim();
        debug_assert_eq!(c, self.dim);
        let n_img_windows = masks.map(|m| m.len()).unwrap_or(1).max(1);
        let hd = self.dim / self.heads;

        let flat = x
            .to_owned()
            .into_shape_with_order((bnw * t, c))
            .expect("token tensor is contiguous");
        let (qkv_out, qkv_cache) = self.qkv.forward_t(ps, &flat);

        let mut attended = Array2::<f32>::zeros((bnw * t, c));
        let mut probs = Vec::with_capacity(bnw * self.heads);
        for nw in 0..bnw {
            for h in 0..self.heads {
                let s = self.scores(ps, &qkv_out, nw, h, t, masks, n_img_windows);
                let p = softmax_rows(&s);
                for i in 0..t {
                    for d in 0..hd {
                        let mut acc = 0.0f32;
                        for j in 0..t {
                            acc += p[[i, j]] * qkv_out[[nw * t + j, 2 * self.dim + h * hd + d]];
                        }
                        attended[[nw * t + i, h * hd + d]] = acc;
                    }
                }
                probs.push(p);
            }
        }

        let (proj_out, proj_cache) = self.proj.forward_t(ps, &attended);
        let y = proj_out
            .into_shape_with_order((bnw, t, c))
            .expect("contiguous");
        (
            y,
            AttnCache {
                qkv_out,
                qkv_cache,
                probs,
                proj_cache,
                n_windows: bnw,
                t,
            },
        )
    }

    pub fn backward(
        &self,
        ps: &mut ParamStore,
        cache: &AttnCache,
        dy: &Array3<f32>,
    ) -> Array3<f32> {
        let (bnw, t, c) = dy.dim();
        debug_assert_eq!(bnw, cache.n_windows);
        debug_assert_eq!(t, cache.t);
        let hd = self.dim / self.heads;
        let scale = self.scale();

        let dy_flat = dy
            .to_owned()
            .into_shape_with_order((bnw * t, c))
            .expect("contiguous");
        let datt = self.proj.backward(ps, &cache.proj_cache, &dy_flat);

        let mut dqkv = Array2::<f32>::zeros((bnw * t, 3 * c));
        let span = 2 * self.window - 1;
        let mut drpb = Array2::<f32>::zeros((span * span, self.heads));

        for nw in 0..bnw {
            for h in 0..self.heads {
                let p = &cache.probs[nw * self.heads + h];
                // dP and dV from O = P V.
                let mut dp = Array2::<f32>::zeros((t, t));
                for i in 0..t {
                    for j in 0..t {
                        let mut acc = 0.0f32;
                        for d in 0..hd {
                            acc += datt[[nw * t + i, h * hd + d]]
                                * cache.qkv_out[[nw * t + j, 2 * self.dim + h * hd + d]];
                        }
                        dp[[i, j]] = acc;
                    }
                }
                for j in 0..t {
                    for d in 0..hd {
                        let mut acc = 0.0f32;
                        for i in 0..t {
                            acc += p[[i, j]] * datt[[nw * t + i, h * hd + d]];
                        }
                        dqkv[[nw * t + j, 2 * self.dim + h * hd + d]] = acc;
                    }
                }

                let ds = softmax_rows_backward(p, &dp);
                for i in 0..t {
                    for j in 0..t {
                        drpb[[self.rel_index[i * t + j], h]] += ds[[i, j]];
                    }
                }
                // S = scale * Q K^T (+bias): dQ = scale dS K, dK = scale dS^T Q.
                for i in 0..t {
                    for d in 0..hd {
                        let mut acc = 0.0f32;
                        for j in 0..t {
                            acc += ds[[i, j]] * cache.qkv_out[[nw * t + j, self.dim + h * hd + d]];
                        }
                        dqkv[[nw * t + i, h * hd + d]] = acc * scale;
                    }
                }
                for j in 0..t {
                    for d in 0..hd {
                        let mut acc = 0.0f32;
                        for i in 0..t {
                            acc += ds[[i, j]] * cache.qkv_out[[nw * t + i, h * hd + d]];
                        }
                        dqkv[[nw * t + j, self.dim + h * hd + d]] = acc * scale;
                    }
                }
            }
        }

        ps.add_grad(self.rpb, &drpb);
        let dx = self.qkv.backward(ps, &cache.qkv_cache, &dqkv);
        dx.into_shape_with_order((bnw, t, c)).expect("contiguous")
    }

    /// Single-image entry point: attention over one token grid,
    /// optionally cyclically shifted (with masking) by `shift` tokens.
    pub fn forward_grid(
        &self,
        ps: &ParamStore,
        grid: &TokenGrid,
        shift: usize,
    ) -> Result<TokenGrid> {
        let (h, w) = grid.grid;
        if h % self.window != 0 || w % self.window != 0 {
            return Err(Error::Shape(format!(
                "window {} does not tile grid {h}x{w}",
                self.window
            )));
        }
        if grid.dim() != self.dim {
            return Err(Error::Shape(format!(
                "token dim {} does not match attention dim {}",
                grid.dim(),
                self.dim
            )));
        }
        let x = grid.tokens.to_owned().insert_axis(Axis(0));
        let shifted = if shift > 0 {
            roll_grid(&x, grid.grid, -(shift as isize), -(shift as isize))
        } else {
            x
        };
        let masks = if shift > 0 {
            Some(shifted_window_masks(grid.grid, self.window, shift))
        } else {
            None
        };
        let windows = window_partition(&shifted, grid.grid, self.window);
        let out = self.forward(ps, &windows, masks.as_deref());
        let merged = window_reverse(&out, grid.grid, self.window);
        let undone = if shift > 0 {
            roll_grid(&merged, grid.grid, shift as isize, shift as isize)
        } else {
            merged
        };
        TokenGrid::new(undone.index_axis(Axis(0), 0).to_owned(), grid.grid)
    }

    /// Attention probability matrices per (window, head), for inspection.
    pub fn attention_probs(
        &self,
        ps: &ParamStore,
        x: &Array3<f32>,
        masks: Option<&[Array2<f32>]>,
    ) -> Vec<Array2<f32>> {
        self.run(ps, x, masks).1.probs
    }
}

// ---------------------------------------------------------------------------
// Patch merging
// ---------------------------------------------------------------------------

pub struct PatchMerging {
    norm: Option<LayerNorm>,
    reduction: Linear,
    pub merge: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

pub struct MergeCache {
    norm: Option<LnCache>,
    reduction: LinearCache,
    grid: (usize, usize),
    batch: usize,
}

impl PatchMerging {
    /// merge == 1 is the identity layout with a dim-preserving projection;
    /// merge >= 2 concatenates merge^2 neighbors, normalizes, and projects to
    /// twice the input width.
    pub fn new(vb: &mut VarBuilder, name: &str, dim: usize, merge: usize) -> PatchMerging {
        let mut vb = vb.scope(name);
        let m2 = merge * merge;
        let (norm, reduction, out_dim) = if merge == 1 {
            let reduction = Linear::new(
                &mut vb,
                "reduction",
                dim,
                dim,
                false,
                Init::TruncNormal { std: 0.02 },
            );
            (None, reduction, dim)
        } else {
            let norm = LayerNorm::new(&mut vb, "norm", m2 * dim);
            let reduction = Linear::new(
                &mut vb,
                "reduction",
                m2 * dim,
                2 * dim,
                false,
                Init::TruncNormal { std: 0.02 },
            );
            (Some(norm), reduction, 2 * dim)
        };
        PatchMerging {
            norm,
            reduction,
            merge,
            in_dim: dim,
            out_dim,
        }
    }

    fn gather(&self, x: &Array3<f32>, grid: (usize, usize)) -> Array2<f32> {
        let (b, _, c) = x.dim();
        let m = self.merge;
        let (h, w) = grid;
        let (gh, gw) = (h / m, w / m);
        let mut out = Array2::<f32>::zeros((b * gh * gw, m * m * c));
        for bi in 0..b {
            for gy in 0..gh {
                for gx in 0..gw {
                    let row = bi * gh * gw + gy * gw + gx;
                    for my in 0..m {
                        for mx in 0..m {
                            let src_t = (gy * m + my) * w + (gx * m + mx);
                            for ci in 0..c {
                                out[[row, (my * m + mx) * c + ci]] = x[[bi, src_t, ci]];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn scatter(&self, dg: &Array2<f32>, grid: (usize, usize), b: usize) -> Array3<f32> {
        let m = self.merge;
        let (h, w) = grid;
        let (gh, gw) = (h / m, w / m);
        let c = self.in_dim;
        let mut dx = Array3::<f32>::zeros((b, h * w, c));
        for bi in 0..b {
            for gy in 0..gh {
                for gx in 0..gw {
                    let row = bi * gh * gw + gy * gw + gx;
                    for my in 0..m {
                        for mx in 0..m {
                            let dst_t = (gy * m + my) * w + (gx * m + mx);
                            for ci in 0..c {
                                dx[[bi, dst_t, ci]] = dg[[row, (my * m + mx) * c + ci]];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, ps: &ParamStore, x: &Array3<f32>, grid: (usize, usize)) -> Array3<f32> {
        self.run(ps, x, grid).0
    }

    fn run(
        &self,
        ps: &ParamStore,
        x: &Array3<f32>,
        grid: (usize, usize),
    ) -> (Array3<f32>, MergeCache) {
        let (b, _, _) = x.dim();
        let gathered = self.gather(x, grid);
        let (normed, norm_cache) = match &self.norm {
            Some(norm) => {
                let (y, c) = norm.forward_t(ps, &gathered);
                (y, Some(c))
            }
            None => (gathered, None),
        };
        let (reduced, red_cache) = self.reduction.forward_t(ps, &normed);
        let (gh, gw) = (grid.0 / self.merge, grid.1 / self.merge);
        let y = reduced
            .into_shape_with_order((b, gh * gw, self.out_dim))
            .expect("contiguous");
        (
            y,
            MergeCache {
                norm: norm_cache,
                reduction: red_cache,
                grid,
                batch: b,
            },
        )
    }

    pub fn forward_t(
        &self,
        ps: &ParamStore,
        x: &Array3<f32>,
        grid: (usize, usize),
    ) -> (Array3<f32>, MergeCache) {
        self.run(ps, x, grid)
    }

    pub fn backward(
        &self,
        ps: &mut ParamStore,
        cache: &MergeCache,
        dy: &Array3<f32>,
    ) -> Array3<f32> {
        let (b, t, c) = dy.dim();
        let flat = dy
            .to_owned()
            .into_shape_with_order((b * t, c))
            .expect("contiguous");
        let dnormed = self.reduction.backward(ps, &cache.reduction, &flat);
        let dgathered = match (&self.norm, &cache.norm) {
            (Some(norm), Some(nc)) => norm.backward(ps, nc, &dnormed),
            _ => dnormed,
        };
        self.scatter(&dgathered, cache.grid, cache.batch)
    }

    /// Single-image entry point.
    pub fn forward_grid(&self, ps: &ParamStore, grid: &TokenGrid) -> Result<TokenGrid> {
        if !grid.grid.0.is_multiple_of(self.merge) || !grid.grid.1.is_multiple_of(self.merge) {
            return Err(Error::Shape(format!(
                "merge {} does not tile grid {}x{}",
                self.merge, grid.grid.0, grid.grid.1
            )));
        }
        if grid.dim() != self.in_dim {
            return Err(Error::Shape(format!(
                "token dim {} does not match merge input {}",
                grid.dim(),
                self.in_dim
            )));
        }
        let x = grid.tokens.to_owned().insert_axis(Axis(0));
        let y = self.forward(ps, &x, grid.grid);
        TokenGrid::new(
            y.index_axis(Axis(0), 0).to_owned(),
            (grid.grid.0 / self.merge, grid.grid.1 / self.merge),
        )
    }
}

// ---------------------------------------------------------------------------
// Transformer block and full network
// ---------------------------------------------------------------------------

struct SwinBlock {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    shift: usize,
    window: usize,
    masks: Option<Vec<Array2<f32>>>,
    grid: (usize, usize),
}

struct SwinBlockCache {
    n1: LnCache,
    attn: AttnCache,
    n2: LnCache,
    fc1: LinearCache,
    fc1_out: Array2<f32>,
    fc2: LinearCache,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        vb: &mut VarBuilder,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        shift: usize,
        grid: (usize, usize),
        mlp_ratio: f32,
    ) -> SwinBlock {
        let mut vb = vb.scope(name);
        let norm1 = LayerNorm::new(&mut vb, "norm1", dim);
        let attn = WindowAttention::new(&mut vb, "attn", dim, window, heads);
        let norm2 = LayerNorm::new(&mut vb, "norm2", dim);
        let hidden = (dim as f32 * mlp_ratio).round() as usize;
        let fc1 = Linear::new(
            &mut vb,
            "fc1",
            dim,
            hidden,
            true,
            Init::TruncNormal { std: 0.02 },
        );
        let fc2 = Linear::new(
            &mut vb,
            "fc2",
            hidden,
            dim,
            true,
            Init::TruncNormal { std: 0.02 },
        );
        let masks = (shift > 0).then(|| shifted_window_masks(grid, window, shift));
        SwinBlock {
            norm1,
            attn,
            norm2,
            fc1,
            fc2,
            shift,
            window,
            masks,
            grid,
        }
    }

    fn attend(
        &self,
        ps: &ParamStore,
        a: Array3<f32>,
        train: bool,
    ) -> (Array3<f32>, Option<AttnCache>) {
        let shifted = if self.shift > 0 {
            roll_grid(
                &a,
                self.grid,
                -(self.shift as isize),
                -(self.shift as isize),
            )
        } else {
            a
        };
        let windows = window_partition(&shifted, self.grid, self.window);
        let (out, cache) = if train {
            let (o, c) = self.attn.forward_t(ps, &windows, self.masks.as_deref());
            (o, Some(c))
        } else {
            (self.attn.forward(ps, &windows, self.masks.as_deref()), None)
        };
        let merged = window_reverse(&out, self.grid, self.window);
        let undone = if self.shift > 0 {
            roll_grid(&merged, self.grid, self.shift as isize, self.shift as isize)
        } else {
            merged
        };
        (undone, cache)
    }

    fn forward(&self, ps: &ParamStore, x: &Array3<f32>) -> Array3<f32> {
        let (b, t, c) = x.dim();
        let flat = x.to_owned().into_shape_with_order((b * t, c)).unwrap();
        let a = self.norm1.forward(ps, &flat);
        let a3 = a.into_shape_with_order((b, t, c)).unwrap();
        let (o, _) = self.attend(ps, a3, false);
        let x1 = x + &o;

        let x1_flat = x1.to_owned().into_shape_with_order((b * t, c)).unwrap();
        let f = self.norm2.forward(ps, &x1_flat);
        let f = self.fc2.forward(ps, &gelu(&self.fc1.forward(ps, &f)));
        &x1 + &f.into_shape_with_order((b, t, c)).unwrap()
    }

    fn forward_t(&self, ps: &ParamStore, x: &Array3<f32>) -> (Array3<f32>, SwinBlockCache) {
        let (b, t, c) = x.dim();
        let flat = x.to_owned().into_shape_with_order((b * t, c)).unwrap();
        let (a, n1) = self.norm1.forward_t(ps, &flat);
        let a3 = a.into_shape_with_order((b, t, c)).unwrap();
        let (o, attn_cache) = self.attend(ps, a3, true);
        let x1 = x + &o;

        let x1_flat = x1.to_owned().into_shape_with_order((b * t, c)).unwrap();
        let (nf, n2) = self.norm2.forward_t(ps, &x1_flat);
        let (h, fc1_cache) = self.fc1.forward_t(ps, &nf);
        let hg = gelu(&h);
        let (f, fc2_cache) = self.fc2.forward_t(ps, &hg);
        let y = &x1 + &f.into_shape_with_order((b, t, c)).unwrap();

        (
            y,
            SwinBlockCache {
                n1,
                attn: attn_cache.expect("train path caches attention"),
                n2,
                fc1: fc1_cache,
                fc1_out: h,
                fc2: fc2_cache,
            },
        )
    }

    fn backward(
        &self,
        ps: &mut ParamStore,
        cache: &SwinBlockCache,
        dy: &Array3<f32>,
    ) -> Array3<f32> {
        let (b, t, c) = dy.dim();
        let dy_flat = dy.to_owned().into_shape_with_order((b * t, c)).unwrap();

        // MLP branch.
        let dh = self.fc2.backward(ps, &cache.fc2, &dy_flat);
        let dh = gelu_backward(&cache.fc1_out, &dh);
        let dnf = self.fc1.backward(ps, &cache.fc1, &dh);
        let dx1_extra = self.norm2.backward(ps, &cache.n2, &dnf);
        let dx1 = dy + &dx1_extra.into_shape_with_order((b, t, c)).unwrap();

        // Attention branch (undo roll -> windows -> attention -> re-partition).
        let db = if self.shift > 0 {
            roll_grid(
                &dx1,
                self.grid,
                -(self.shift as isize),
                -(self.shift as isize),
            )
        } else {
            dx1.clone()
        };
        let dwin = window_partition(&db, self.grid, self.window);
        let da_windows = self.attn.backward(ps, &cache.attn, &dwin);
        let da = window_reverse(&da_windows, self.grid, self.window);
        let da = if self.shift > 0 {
            roll_grid(&da, self.grid, self.shift as isize, self.shift as isize)
        } else {
            da
        };
        let da_flat = da.into_shape_with_order((b * t, c)).unwrap();
        let dx_extra = self.norm1.backward(ps, &cache.n1, &da_flat);

        &dx1 + &dx_extra.into_shape_with_order((b, t, c)).unwrap()
    }
}

pub struct SwinNet {
    pub cfg: WinTransformerConfig,
    embed: Linear,
    embed_norm: LayerNorm,
    stages: Vec<(Vec<SwinBlock>, Option<PatchMerging>)>,
    final_norm: LayerNorm,
}

pub struct SwinCache {
    embed: LinearCache,
    embed_norm: LnCache,
    blocks: Vec<Vec<SwinBlockCache>>,
    merges: Vec<Option<MergeCache>>,
    final_norm: LnCache,
    final_t: usize,
}

impl SwinNet {
    pub fn new(cfg: WinTransformerConfig, vb: &mut VarBuilder) -> Result<SwinNet> {
        cfg.validate()?;
        let mut vb = vb.scope("swin");
        let embed = Linear::new(
            &mut vb,
            "embed",
            cfg.patch_dim(),
            cfg.embed_dim,
            true,
            Init::TruncNormal { std: 0.02 },
        );
        let embed_norm = LayerNorm::new(&mut vb, "embed_norm", cfg.embed_dim);

        let mut stages = Vec::new();
        for s in 0..cfg.stages() {
            let grid = cfg.stage_grid(s);
            let dim = cfg.stage_dim(s);
            let window = cfg.effective_window(grid);
            let mut blocks = Vec::new();
            for i in 0..cfg.depths[s] {
                let shift = if cfg.shifted_windows && i % 2 == 1 && window < grid.0.min(grid.1) {
                    window / 2
                } else {
                    0
                };
                blocks.push(SwinBlock::new(
                    &mut vb,
                    &format!("stage{s}.block{i}"),
                    dim,
                    cfg.heads[s],
                    window,
                    shift,
                    grid,
                    cfg.mlp_ratio,
                ));
            }
            let merge = if s + 1 < cfg.stages() {
                Some(PatchMerging::new(
                    &mut vb,
                    &format!("stage{s}.merge"),
                    dim,
                    cfg.merge,
                ))
            } else {
                None
            };
            stages.push((blocks, merge));
        }

        let final_norm = LayerNorm::new(&mut vb, "final_norm", cfg.embed_out_dim());
        Ok(SwinNet {
            cfg,
            embed,
            embed_norm,
            stages,
            final_norm,
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

    /// Inference embedding: (B, 3, H, W) -> (B, embed_out_dim).
    pub fn forward_embed(&self, ps: &ParamStore, x: &Array4<f32>) -> Result<Array2<f32>> {
        self.check_input(x)?;
        let (b, ..) = x.dim();
        let tokens = partition_batch(x, self.cfg.patch_size)?;
        let (_, t0, pd) = tokens.dim();
        let flat = tokens.into_shape_with_order((b * t0, pd)).unwrap();
        let e = self.embed.forward(ps, &flat);
        let e = self.embed_norm.forward(ps, &e);
        let mut h = e
            .into_shape_with_order((b, t0, self.cfg.embed_dim))
            .unwrap();

        for (s, (blocks, merge)) in self.stages.iter().enumerate() {
            let grid = self.cfg.stage_grid(s);
            assert_eq!(h.dim().1, grid.0 * grid.1, "token bookkeeping broke");
            assert_eq!(h.dim().2, self.cfg.stage_dim(s), "dim bookkeeping broke");
            for block in blocks {
                h = block.forward(ps, &h);
            }
            if let Some(merge) = merge {
                h = merge.forward(ps, &h, grid);
            }
        }

        let (_, tf, cf) = h.dim();
        let flat = h.into_shape_with_order((b * tf, cf)).unwrap();
        let normed = self.final_norm.forward(ps, &flat);
        Ok(token_mean(
            &normed.into_shape_with_order((b, tf, cf)).unwrap(),
        ))
    }

    /// Training pass returning (embedding, cache).
    pub fn forward_t(
        &self,
        ps: &mut ParamStore,
        x: &Array4<f32>,
    ) -> Result<(Array2<f32>, SwinCache)> {
        self.check_input(x)?;
        let (b, ..) = x.dim();
        let tokens = partition_batch(x, self.cfg.patch_size)?;
        let (_, t0, pd) = tokens.dim();
        let flat = tokens.into_shape_with_order((b * t0, pd)).unwrap();
        let (e, embed_cache) = self.embed.forward_t(ps, &flat);
        let (e, en_cache) = self.embed_norm.forward_t(ps, &e);
        let mut h = e
            .into_shape_with_order((b, t0, self.cfg.embed_dim))
            .unwrap();

        let mut blocks_cache = Vec::new();
        let mut merges_cache = Vec::new();
        for (s, (blocks, merge)) in self.stages.iter().enumerate() {
            let grid = self.cfg.stage_grid(s);
            let mut stage_cache = Vec::new();
            for block in blocks {
                let (out, c) = block.forward_t(ps, &h);
                h = out;
                stage_cache.push(c);
            }
            blocks_cache.push(stage_cache);
            if let Some(merge) = merge {
                let (out, c) = merge.forward_t(ps, &h, grid);
                h = out;
                merges_cache.push(Some(c));
            } else {
                merges_cache.push(None);
            }
        }

        let (_, tf, cf) = h.dim();
        let flat = h.into_shape_with_order((b * tf, cf)).unwrap();
        let (normed, fn_cache) = self.final_norm.forward_t(ps, &flat);
        let emb = token_mean(&normed.into_shape_with_order((b, tf, cf)).unwrap());

        Ok((
            emb,
            SwinCache {
                embed: embed_cache,
                embed_norm: en_cache,
                blocks: blocks_cache,
                merges: merges_cache,
                final_norm: fn_cache,
                final_t: tf,
            },
        ))
    }

    /// Backpropagates an embedding gradient into every weight.
    pub fn backward(&self, ps: &mut ParamStore, cache: &SwinCache, demb: &Array2<f32>) {
        let (b, cf) = demb.dim();
        let tf = cache.final_t;
        let dt = token_mean_backward(tf, demb);
        let dflat = dt.into_shape_with_order((b * tf, cf)).unwrap();
        let dnormed = self.final_norm.backward(ps, &cache.final_norm, &dflat);
        let mut dh = dnormed.into_shape_with_order((b, tf, cf)).unwrap();

        for s in (0..self.stages.len()).rev() {
            if let (Some(merge), Some(mc)) = (&self.stages[s].1, &cache.merges[s]) {
                dh = merge.backward(ps, mc, &dh);
            }
            for (block, bc) in self.stages[s].0.iter().zip(&cache.blocks[s]).rev() {
                dh = block.backward(ps, bc, &dh);
            }
        }

        let (_, t0, c0) = dh.dim();
        let dflat = dh.into_shape_with_order((b * t0, c0)).unwrap();
        let de = self.embed_norm.backward(ps, &cache.embed_norm, &dflat);
        let _ = self.embed.backward(ps, &cache.embed, &de);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand3(shape: (usize, usize, usize), seed: u64) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn(shape, || rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn patch_dim_and_token_count_match_defaults() {
        let cfg = WinTransformerConfig::default();
        assert_eq!(cfg.patch_dim(), 48);
        assert_eq!(cfg.stage_grid(0), (56, 56));
        assert_eq!(56 * 56, 3136);
        assert_eq!(cfg.embed_out_dim(), 768);
        cfg.validate().unwrap();
    }

    #[test]
    fn partition_is_a_bijection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let image = Array3::from_shape_simple_fn((3, 16, 12), || rng.random_range(0.0f32..1.0));
        let grid = patch_partition(&image, 4).unwrap();
        assert_eq!(grid.grid, (4, 3));
        assert_eq!(grid.dim(), 48);
        let back = patch_unpartition(&grid, 4).unwrap();
        assert_eq!(back, image);
    }

    #[test]
    fn partition_rejects_non_divisible_images() {
        let image = Array3::<f32>::zeros((3, 15, 16));
        assert!(patch_partition(&image, 4).is_err());
    }

    #[test]
    fn roll_and_window_ops_are_inverses() {
        let x = rand3((2, 6 * 6, 5), 3);
        let rolled = roll_grid(&x, (6, 6), -2, -2);
        let back = roll_grid(&rolled, (6, 6), 2, 2);
        assert_eq!(back, x);

        let windows = window_partition(&x, (6, 6), 3);
        assert_eq!(windows.dim(), (2 * 4, 9, 5));
        let merged = window_reverse(&windows, (6, 6), 3);
        assert_eq!(merged, x);
    }

    fn toy_attention(
        dim: usize,
        window: usize,
        heads: usize,
        seed: u64,
    ) -> (WindowAttention, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let attn = {
            let mut vb = VarBuilder::new(&mut store, &mut rng);
            WindowAttention::new(&mut vb, "attn", dim, window, heads)
        };
        (attn, store)
    }

    #[test]
    fn attention_rows_are_probability_distributions() {
        let (attn, store) = toy_attention(8, 2, 2, 5);
        let x = rand3((3, 4, 8), 6);
        for p in attn.attention_probs(&store, &x, None) {
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn full_grid_window_matches_direct_attention_oracle() {
        // One 4x4 window spanning the whole grid vs. a from-scratch
        // evaluation of softmax(QK^T/sqrt(d))V followed by the projection.
        let dim = 6;
        let heads = 2;
        let (attn, store) = toy_attention(dim, 4, heads, 11);
        let grid = TokenGrid::new(
            rand3((1, 16, dim), 12).index_axis(Axis(0), 0).to_owned(),
            (4, 4),
        )
        .unwrap();
        let got = attn.forward_grid(&store, &grid, 0).unwrap();

        let wq = store
            .value(attn.qkv.w)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let bq = store
            .value(attn.qkv.b.unwrap())
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let qkv = grid.tokens.dot(&wq.t()) + &bq;
        let hd = dim / heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let t = 16;
        let mut attended = Array2::<f32>::zeros((t, dim));
        for h in 0..heads {
            let q = qkv.slice(ndarray::s![.., h * hd..(h + 1) * hd]).to_owned();
            let k = qkv
                .slice(ndarray::s![.., dim + h * hd..dim + (h + 1) * hd])
                .to_owned();
            let v = qkv
                .slice(ndarray::s![.., 2 * dim + h * hd..2 * dim + (h + 1) * hd])
                .to_owned();
            let scores = q.dot(&k.t()) * scale; // rpb is zero-initialized
            let probs = softmax_rows(&scores);
            let o = probs.dot(&v);
            attended
                .slice_mut(ndarray::s![.., h * hd..(h + 1) * hd])
                .assign(&o);
        }
        let wp = store
            .value(attn.proj.w)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let bp = store
            .value(attn.proj.b.unwrap())
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let expect = attended.dot(&wp.t()) + &bp;

        for (a, b) in got.tokens.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn windows_are_independent() {
        let dim = 6;
        let (attn, store) = toy_attention(dim, 2, 2, 21);
        let tokens = rand3((1, 16, dim), 22).index_axis(Axis(0), 0).to_owned();
        let grid = TokenGrid::new(tokens.clone(), (4, 4)).unwrap();
        let base = attn.forward_grid(&store, &grid, 0).unwrap();

        // Swap two tokens inside the top-left 2x2 window (tokens 0 and 1).
        let mut permuted = tokens;
        for c in 0..dim {
            permuted.swap([0, c], [1, c]);
        }
        let out = attn
            .forward_grid(&store, &TokenGrid::new(permuted, (4, 4)).unwrap(), 0)
            .unwrap();

        // Tokens outside the permuted window are untouched.
        for t in 0..16 {
            let (y, x) = (t / 4, t % 4);
            if y < 2 && x < 2 {
                continue;
            }
            for c in 0..dim {
                assert!(
                    (base.tokens[[t, c]] - out.tokens[[t, c]]).abs() < 1e-6,
                    "token {t} leaked across windows"
                );
            }
        }
    }

    #[test]
    fn shifted_window_masks_partition_by_region() {
        let masks = shifted_window_masks((4, 4), 2, 1);
        assert_eq!(masks.len(), 4);
        // Top-left window: all four tokens pre-shift neighbors -> no masking.
        assert!(masks[0].iter().all(|&v| v == 0.0));
        // Bottom-right window mixes wrapped regions -> some masking.
        assert!(masks[3].iter().any(|&v| v != 0.0));
        for m in &masks {
            for i in 0..m.nrows() {
                assert_eq!(m[[i, i]], 0.0, "diagonal must stay unmasked");
            }
        }
    }

    #[test]
    fn merge_halves_grid_and_doubles_dim() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let merge = {
            let mut vb = VarBuilder::new(&mut store, &mut rng);
            PatchMerging::new(&mut vb, "merge", 96, 2)
        };
        let grid = TokenGrid::new(
            rand3((1, 64, 96), 9).index_axis(Axis(0), 0).to_owned(),
            (8, 8),
        )
        .unwrap();
        let merged = merge.forward_grid(&store, &grid).unwrap();
        assert_eq!(merged.grid, (4, 4));
        assert_eq!(merged.dim(), 192);
    }

    #[test]
    fn merge_one_with_identity_projection_is_a_no_op() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let merge = {
            let mut vb = VarBuilder::new(&mut store, &mut rng);
            PatchMerging::new(&mut vb, "merge", 5, 1)
        };
        let eye = Array2::from_shape_fn((5, 5), |(i, j)| if i == j { 1.0 } else { 0.0 });
        store.value_mut(merge.reduction.w).assign(&eye.into_dyn());
        let grid = TokenGrid::new(
            rand3((1, 12, 5), 9).index_axis(Axis(0), 0).to_owned(),
            (3, 4),
        )
        .unwrap();
        let out = merge.forward_grid(&store, &grid).unwrap();
        assert_eq!(out.grid, (3, 4));
        for (a, b) in out.tokens.iter().zip(grid.tokens.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    fn toy_net(cfg: WinTransformerConfig, seed: u64) -> (SwinNet, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = {
            let mut vb = VarBuilder::new(&mut store, &mut rng);
            SwinNet::new(cfg, &mut vb).unwrap()
        };
        (net, store)
    }

    fn rand_batch(n: usize, hw: (usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn((n, 3, hw.0, hw.1), || rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn toy_profile_embeds_with_expected_width() {
        let cfg = WinTransformerConfig::toy();
        assert_eq!(cfg.embed_out_dim(), 48); // 24 * 2 across two stages
        let (net, store) = toy_net(cfg, 31);
        let x = rand_batch(2, (64, 64), 32);
        let e = net.forward_embed(&store, &x).unwrap();
        assert_eq!(e.dim(), (2, 48));
        // deterministic inference
        assert_eq!(e, net.forward_embed(&store, &x).unwrap());
    }

    #[test]
    fn tiny_two_depth_single_stage_profile() {
        let cfg = WinTransformerConfig {
            input_size: (16, 16),
            patch_size: 4,
            embed_dim: 8,
            depths: vec![1, 1],
            heads: vec![2, 2],
            window: 2,
            ..Default::default()
        };
        assert_eq!(cfg.embed_out_dim(), 16);
        let (net, store) = toy_net(cfg, 33);
        let x = rand_batch(1, (16, 16), 34);
        assert_eq!(net.forward_embed(&store, &x).unwrap().dim(), (1, 16));
    }

    #[test]
    fn constant_final_tokens_mean_to_that_token() {
        // All-equal tokens stay equal through attention (softmax of equal
        // scores) and the mean embeds the shared token.
        let (attn, store) = toy_attention(4, 2, 2, 41);
        let mut x = Array3::<f32>::zeros((1, 4, 4));
        for t in 0..4 {
            for c in 0..4 {
                x[[0, t, c]] = (c as f32) * 0.5 - 0.7;
            }
        }
        let y = attn.forward(&store, &x, None);
        for t in 1..4 {
            for c in 0..4 {
                assert!((y[[0, t, c]] - y[[0, 0, c]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_on_sampled_weights() {
        let cfg = WinTransformerConfig {
            input_size: (16, 16),
            patch_size: 4,
            embed_dim: 8,
            depths: vec![2],
            heads: vec![2],
            window: 2,
            ..Default::default()
        };
        let (net, mut store) = toy_net(cfg, 51);
        let x = rand_batch(2, (16, 16), 52);
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let probe = Array2::from_shape_simple_fn((2, net.cfg.embed_out_dim()), || {
            rng.random_range(-1.0f32..1.0)
        });

        let (_, cache) = net.forward_t(&mut store, &x).unwrap();
        store.zero_grads();
        net.backward(&mut store, &cache, &probe);

        let loss = |s: &ParamStore| {
            let (emb, _) = net.forward_t(&mut s.clone(), &x).unwrap();
            (emb * &probe).sum()
        };

        const H: f32 = 1e-2;
        let mut checked = 0;
        for pi in 0..store.len() {
            let id = ParamId(pi);
            let param = store.param(id);
            if !param.trainable {
                continue;
            }
            let len = param.value.len();
            for k in [0usize, len - 1] {
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
        assert!(checked >= 20);
    }

    #[test]
    fn rpb_index_is_symmetric_under_reversal() {
        let (attn, _) = toy_attention(4, 3, 1, 61);
        let t = 9;
        let span = 2 * 3 - 1;
        let center = (3 - 1) * span + (3 - 1);
        for i in 0..t {
            assert_eq!(attn.rel_index[i * t + i], center);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = WinTransformerConfig::toy();
        cfg.heads = vec![2];
        assert!(cfg.validate().is_err());

        let mut cfg = WinTransformerConfig::toy();
        cfg.input_size = (62, 64);
        assert!(cfg.validate().is_err());

        let mut cfg = WinTransformerConfig::toy();
        cfg.heads = vec![5, 5];
        assert!(cfg.validate().is_err());
    }
}
