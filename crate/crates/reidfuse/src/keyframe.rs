//! Shot-boundary detection and keyframe extraction over a frame sequence.
//!
//! Each frame is divided into a uniform `grid x grid` cell layout (remainder
//! pixels are absorbed by the last row/column of cells). Every cell keeps one
//! normalized histogram per RGB channel; two frames differ by the mean L1
//! distance between corresponding cell/channel histograms, scaled to [0, 1].
//! A cut is declared wherever that difference exceeds the threshold.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyframeConfig {
    /// Cells per image side.
    pub grid: usize,
    /// Histogram bins per channel.
    pub bins: usize,
    /// Cut threshold on the [0, 1] histogram difference.
    pub threshold: f64,
}

impl Default for KeyframeConfig {
    fn default() -> Self {
        KeyframeConfig {
            grid: 16,
            bins: 16,
            threshold: 0.20,
        }
    }
}

impl KeyframeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 1 {
            return Err(Error::Config("grid must be >= 1".into()));
        }
        if self.bins < 2 {
            return Err(Error::Config("bins must be >= 2".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Concatenated per-cell, per-channel normalized histograms of one frame.
/// Layout: cell-major (row, col), then channel, then bin.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameHistogram {
    pub grid: usize,
    pub bins: usize,
    pub values: Vec<f64>,
}

impl FrameHistogram {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn block_count(&self) -> usize {
        self.grid * self.grid * 3
    }
}

/// A detected cut: frames `frame_index - 1` and `frame_index` lie in
/// different shots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShotBoundary {
    pub frame_index: usize,
    pub score: f64,
}

/// Computes the grid histogram of one RGB frame.
pub fn grid_histogram(frame: &RgbImage, config: &KeyframeConfig) -> Result<FrameHistogram> {
    config.validate()?;
    let (w, h) = (frame.width() as usize, frame.height() as usize);
    let g = config.grid;
    if w < g || h < g {
        return Err(Error::Shape(format!(
            "frame {w}x{h} smaller than grid {g}x{g}"
        )));
    }

    let bins = config.bins;
    let mut values = vec![0.0f64; g * g * 3 * bins];
    let cell_h = h / g;
    let cell_w = w / g;
    let raw = frame.as_raw();

    for row in 0..g {
        let y0 = row * cell_h;
        let y1 = if row + 1 == g { h } else { (row + 1) * cell_h };
        for col in 0..g {
            let x0 = col * cell_w;
            let x1 = if col + 1 == g { w } else { (col + 1) * cell_w };
            let base = (row * g + col) * 3 * bins;
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    let px = (y * w + x) * 3;
                    for c in 0..3 {
                        let bin = raw[px + c] as usize * bins / 256;
                        values[base + c * bins + bin] += 1.0;
                    }
                }
            }
            for v in &mut values[base..base + 3 * bins] {
                *v /= count;
            }
        }
    }

    Ok(FrameHistogram {
        grid: g,
        bins,
        values,
    })
}

/// Histogram difference in [0, 1]: half the mean, over (cell, channel)
/// blocks, of the L1 distance between the two normalized block histograms.
pub fn histogram_difference(h1: &FrameHistogram, h2: &FrameHistogram) -> Result<f64> {
    if h1.len() != h2.len() || h1.bins != h2.bins || h1.grid != h2.grid {
        return Err(Error::Shape(format!(
            "histogram layout mismatch: {}x{} vs {}x{}",
            h1.grid, h1.bins, h2.grid, h2.bins
        )));
    }
    let l1: f64 = h1
        .values
        .iter()
        .zip(&h2.values)
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(0.5 * l1 / h1.block_count() as f64)
}

/// Boundary scan over precomputed histograms: a boundary sits at every index
/// `t >= 1` whose difference to frame `t - 1` exceeds the threshold.
pub fn boundaries_from_histograms(
    histograms: &[FrameHistogram],
    threshold: f64,
) -> Result<Vec<ShotBoundary>> {
    let mut out = Vec::new();
    for t in 1..histograms.len() {
        let score = histogram_difference(&histograms[t - 1], &histograms[t])?;
        if score > threshold {
            out.push(ShotBoundary {
                frame_index: t,
                score,
            });
        }
    }
    Ok(out)
}

/// Detects shot boundaries in a frame sequence.
pub fn detect_shot_boundaries(
    frames: &[RgbImage],
    config: &KeyframeConfig,
) -> Result<Vec<ShotBoundary>> {
    if frames.is_empty() {
        return Err(Error::Validation("no frames".into()));
    }
    let histograms = frames
        .iter()
        .map(|f| grid_histogram(f, config))
        .collect::<Result<Vec<_>>>()?;
    boundaries_from_histograms(&histograms, config.threshold)
}

/// Extracts keyframes: the first frame plus the frame at each boundary.
pub fn extract_keyframes(
    frames: &[RgbImage],
    config: &KeyframeConfig,
) -> Result<Vec<(usize, RgbImage)>> {
    let boundaries = detect_shot_boundaries(frames, config)?;
    let mut out = Vec::with_capacity(boundaries.len() + 1);
    out.push((0, frames[0].clone()));
    for b in boundaries {
        out.push((b.frame_index, frames[b.frame_index].clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn flat_frame(w: u32, h: u32, rgb: [u8; 3]) -> RgbImage {
        RgbImage::from_pixel(w, h, image::Rgb(rgb))
    }

    #[test]
    fn black_frame_mass_sits_in_bin_zero() {
        let cfg = KeyframeConfig::default();
        let hist = grid_histogram(&flat_frame(64, 64, [0, 0, 0]), &cfg).unwrap();
        assert_eq!(hist.len(), 16 * 16 * 3 * 16);
        for block in hist.values.chunks(cfg.bins) {
            assert_eq!(block[0], 1.0);
            assert!(block[1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn histogram_is_deterministic_and_length_matches_layout() {
        let cfg = KeyframeConfig::default();
        let mut img = RgbImage::new(50, 37);
        for (i, px) in img.pixels_mut().enumerate() {
            px.0 = [(i % 256) as u8, (i * 3 % 256) as u8, (i * 7 % 256) as u8];
        }
        let h1 = grid_histogram(&img, &cfg).unwrap();
        let h2 = grid_histogram(&img.clone(), &cfg).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 12288);
        // every block is a probability distribution
        for block in h1.values.chunks(cfg.bins) {
            let total: f64 = block.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn frame_smaller_than_grid_is_rejected() {
        let cfg = KeyframeConfig::default();
        assert!(grid_histogram(&flat_frame(8, 64, [0, 0, 0]), &cfg).is_err());
    }

    #[test]
    fn difference_on_equal_and_disjoint_histograms() {
        let cfg = KeyframeConfig::default();
        let black = grid_histogram(&flat_frame(32, 32, [0, 0, 0]), &cfg).unwrap();
        let white = grid_histogram(&flat_frame(32, 32, [255, 255, 255]), &cfg).unwrap();
        assert_eq!(histogram_difference(&black, &black).unwrap(), 0.0);
        assert_eq!(histogram_difference(&black, &white).unwrap(), 1.0);
    }

    #[test]
    fn half_mass_moved_scores_half() {
        // Two-bin blocks: (1, 0) vs (0.5, 0.5) -> L1 = 1, difference = 0.5.
        let make = |lo: f64, hi: f64| FrameHistogram {
            grid: 1,
            bins: 2,
            values: vec![lo, hi, lo, hi, lo, hi],
        };
        let a = make(1.0, 0.0);
        let b = make(0.5, 0.5);
        assert!((histogram_difference(&a, &b).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let a = FrameHistogram {
            grid: 1,
            bins: 2,
            values: vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
        };
        let b = FrameHistogram {
            grid: 1,
            bins: 3,
            values: vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        };
        assert!(histogram_difference(&a, &b).is_err());
    }

    #[test]
    fn constant_video_has_no_boundaries() {
        let cfg = KeyframeConfig::default();
        let frames = vec![flat_frame(32, 32, [40, 90, 200]); 50];
        assert!(detect_shot_boundaries(&frames, &cfg).unwrap().is_empty());
        let keys = extract_keyframes(&frames, &cfg).unwrap();
        assert_eq!(keys.len(), 1);
        assert_eq!(keys[0].0, 0);
    }

    #[test]
    fn black_to_white_cut_lands_at_the_transition() {
        let cfg = KeyframeConfig::default();
        let mut frames = vec![flat_frame(32, 32, [0, 0, 0]); 10];
        frames.extend(vec![flat_frame(32, 32, [255, 255, 255]); 10]);
        let bounds = detect_shot_boundaries(&frames, &cfg).unwrap();
        assert_eq!(bounds.len(), 1);
        assert_eq!(bounds[0].frame_index, 10);
        assert!((bounds[0].score - 1.0).abs() < 1e-12);
        assert_eq!(extract_keyframes(&frames, &cfg).unwrap().len(), 2);
    }

    #[test]
    fn single_frame_yields_one_keyframe() {
        let cfg = KeyframeConfig::default();
        let frames = vec![flat_frame(32, 32, [1, 2, 3])];
        assert!(detect_shot_boundaries(&frames, &cfg).unwrap().is_empty());
        assert_eq!(extract_keyframes(&frames, &cfg).unwrap().len(), 1);
    }

    #[test]
    fn appending_copy_of_final_frame_changes_nothing() {
        let cfg = KeyframeConfig::default();
        let mut frames = vec![flat_frame(32, 32, [0, 0, 0]); 4];
        frames.extend(vec![flat_frame(32, 32, [200, 10, 10]); 4]);
        let before = detect_shot_boundaries(&frames, &cfg).unwrap();
        frames.push(frames.last().unwrap().clone());
        let after = detect_shot_boundaries(&frames, &cfg).unwrap();
        assert_eq!(before, after);
    }

    fn random_histogram_strategy() -> impl Strategy<Value = FrameHistogram> {
        // grid=1, bins=4 keeps the search space small; blocks are normalized.
        prop::collection::vec(0.01f64..1.0, 12).prop_map(|raw| {
            let mut values = raw;
            for block in values.chunks_mut(4) {
                let total: f64 = block.iter().sum();
                for v in block {
                    *v /= total;
                }
            }
            FrameHistogram {
                grid: 1,
                bins: 4,
                values,
            }
        })
    }

    proptest! {
        #[test]
        fn difference_is_a_pseudo_metric(
            a in random_histogram_strategy(),
            b in random_histogram_strategy(),
            c in random_histogram_strategy(),
        ) {
            let dab = histogram_difference(&a, &b).unwrap();
            let dba = histogram_difference(&b, &a).unwrap();
            let dac = histogram_difference(&a, &c).unwrap();
            let dcb = histogram_difference(&c, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&dab));
            prop_assert_eq!(dab, dba);
            prop_assert_eq!(histogram_difference(&a, &a).unwrap(), 0.0);
            prop_assert!(dab <= dac + dcb + 1e-12);
        }

        #[test]
        fn raising_threshold_never_adds_boundaries(
            hists in prop::collection::vec(random_histogram_strategy(), 2..20),
            t1 in 0.05f64..0.5,
            bump in 0.01f64..0.4,
        ) {
            let t2 = t1 + bump;
            let low: Vec<usize> = boundaries_from_histograms(&hists, t1)
                .unwrap().iter().map(|b| b.frame_index).collect();
            let high: Vec<usize> = boundaries_from_histograms(&hists, t2)
                .unwrap().iter().map(|b| b.frame_index).collect();
            prop_assert!(high.iter().all(|i| low.contains(i)));
        }
    }
}
