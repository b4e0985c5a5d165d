//! Retrieval evaluation: per-query average precision, mAP, and CMC rank-k
//! under an explicit matching protocol, plus top-k visualization panels.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::RankedResult;
use crate::imgio;
use crate::manifest::ImageRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    /// Drop gallery entries that share both vehicle and camera with the
    /// query (the standard cross-camera protocol). When false the entire
    /// gallery is scored.
    pub exclude_same_camera: bool,
    pub ranks_reported: Vec<usize>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            exclude_same_camera: true,
            ranks_reported: vec![1, 5, 10, 20],
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.ranks_reported.is_empty() {
            return Err(Error::Config("ranks_reported must not be empty".into()));
        }
        if self.ranks_reported[0] < 1 {
            return Err(Error::Config("ranks must be >= 1".into()));
        }
        if !self.ranks_reported.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("ranks must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Relevance (same vehicle) and validity (not excluded by the protocol) of
/// each gallery entry for one query, in gallery order.
pub fn relevance_labels(
    query: &ImageRecord,
    gallery: &[&ImageRecord],
    protocol: &EvalProtocol,
) -> Result<(Vec<bool>, Vec<bool>)> {
    if gallery.is_empty() {
        return Err(Error::Validation("empty gallery".into()));
    }
    let mut relevant = Vec::with_capacity(gallery.len());
    let mut valid = Vec::with_capacity(gallery.len());
    for g in gallery {
        let same_vehicle = g.vehicle_id == query.vehicle_id;
        relevant.push(same_vehicle);
        valid.push(
            !(protocol.exclude_same_camera && same_vehicle && g.camera_id == query.camera_id),
        );
    }
    Ok((relevant, valid))
}

/// Average precision of a ranked binary relevance list:
/// AP = (1/R) * sum over relevant positions k of precision@k.
pub fn average_precision(relevance: &[bool]) -> Result<f64> {
    let total_relevant = relevance.iter().filter(|&&r| r).count();
    if total_relevant == 0 {
        return Err(Error::Validation("no relevant entries".into()));
    }
    let mut hits = 0usize;
    let mut acc = 0.0f64;
    for (k, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            acc += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(acc / total_relevant as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CmcPoint {
    pub rank: usize,
    pub rate: f64,
}

/// Fraction of queries whose first relevant hit lands within each reported
/// rank. `first_match_ranks` are 1-based.
pub fn cmc_curve(first_match_ranks: &[usize], ranks_reported: &[usize]) -> Vec<CmcPoint> {
    ranks_reported
        .iter()
        .map(|&rank| {
            let hits = first_match_ranks.iter().filter(|&&r| r <= rank).count();
            let rate = if first_match_ranks.is_empty() {
                0.0
            } else {
                hits as f64 / first_match_ranks.len() as f64
            };
            CmcPoint { rank, rate }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerQuery {
    pub query_id: String,
    pub ap: f64,
    /// 1-based rank of the first valid relevant gallery entry.
    pub first_match_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment: String,
    pub map: f64,
    pub cmc: Vec<CmcPoint>,
    pub per_query: Vec<PerQuery>,
    /// Queries with no valid relevant gallery entry; excluded from mAP/CMC.
    pub skipped_queries: Vec<String>,
    /// How equal distances were ordered upstream.
    pub tie_break: String,
    pub protocol: EvalProtocol,
}

/// Scores rankings against the manifest labels. `rankings[i]` must belong to
/// `query_records[i]`; orderings index into `gallery_records`.
pub fn evaluate(
    query_records: &[&ImageRecord],
    gallery_records: &[&ImageRecord],
    rankings: &[RankedResult],
    protocol: &EvalProtocol,
    experiment: &str,
) -> Result<EvalReport> {
    protocol.validate()?;
    if query_records.is_empty() {
        return Err(Error::Validation("no queries".into()));
    }
    if rankings.len() != query_records.len() {
        return Err(Error::Validation(format!(
            "{} rankings for {} queries",
            rankings.len(),
            query_records.len()
        )));
    }

    let mut per_query = Vec::new();
    let mut skipped = Vec::new();
    for (query, ranking) in query_records.iter().zip(rankings) {
        if ranking.query_id != query.image_id {
            return Err(Error::Validation(format!(
                "missing ranking for query `{}` (found `{}`)",
                query.image_id, ranking.query_id
            )));
        }
        if ranking.ordering.len() != gallery_records.len() {
            return Err(Error::Validation(format!(
                "ranking for `{}` covers {} of {} gallery entries",
                query.image_id,
                ranking.ordering.len(),
                gallery_records.len()
            )));
        }
        let (relevant, valid) = relevance_labels(query, gallery_records, protocol)?;

        // Walk the ranked list, keeping only protocol-valid entries.
        let ranked_relevance: Vec<bool> = ranking
            .ordering
            .iter()
            .filter(|&&gi| valid[gi])
            .map(|&gi| relevant[gi])
            .collect();
        if !ranked_relevance.iter().any(|&r| r) {
            skipped.push(query.image_id.clone());
            continue;
        }
        let ap = average_precision(&ranked_relevance)?;
        let first_match_rank = ranked_relevance.iter().position(|&r| r).unwrap() + 1;
        per_query.push(PerQuery {
            query_id: query.image_id.clone(),
            ap,
            first_match_rank,
        });
    }

    if per_query.is_empty() {
        return Err(Error::Validation(
            "every query was skipped; nothing to score".into(),
        ));
    }
    let map = per_query.iter().map(|q| q.ap).sum::<f64>() / per_query.len() as f64;
    let first_ranks: Vec<usize> = per_query.iter().map(|q| q.first_match_rank).collect();
    let cmc = cmc_curve(&first_ranks, &protocol.ranks_reported);

    Ok(EvalReport {
        experiment: experiment.to_string(),
        map,
        cmc,
        per_query,
        skipped_queries: skipped,
        tie_break: "ascending gallery index".to_string(),
        protocol: protocol.clone(),
    })
}

/// Renders the report as a fixed-width table (mAP and rank-k in percent).
pub fn report_table(report: &EvalReport) -> String {
    let mut header = format!("{:<24} {:>8}", "Experiment", "mAP");
    let mut row = format!("{:<24} {:>8.2}", report.experiment, report.map * 100.0);
    for point in &report.cmc {
        header.push_str(&format!(" {:>8}", format!("rank-{}", point.rank)));
        row.push_str(&format!(" {:>8.2}", point.rate * 100.0));
    }
    format!("{header}\n{row}\n")
}

pub const TOPK_THUMB: u32 = 64;
pub const TOPK_BORDER: u32 = 3;
pub const TOPK_MARGIN: u32 = 4;

/// Pixel width of a top-k panel: the query plus k gallery thumbnails.
pub fn topk_grid_width(k: usize) -> u32 {
    TOPK_MARGIN + (k as u32 + 1) * (TOPK_THUMB + 2 * TOPK_BORDER + TOPK_MARGIN)
}

pub fn topk_grid_height() -> u32 {
    TOPK_THUMB + 2 * TOPK_BORDER + 2 * TOPK_MARGIN
}

fn blit_with_border(canvas: &mut RgbImage, img: &RgbImage, x0: u32, y0: u32, border: Rgb<u8>) {
    let cell = TOPK_THUMB + 2 * TOPK_BORDER;
    for y in 0..cell {
        for x in 0..cell {
            canvas.put_pixel(x0 + x, y0 + y, border);
        }
    }
    let thumb = image::imageops::resize(
        img,
        TOPK_THUMB,
        TOPK_THUMB,
        image::imageops::FilterType::Triangle,
    );
    for (x, y, px) in thumb.enumerate_pixels() {
        canvas.put_pixel(x0 + TOPK_BORDER + x, y0 + TOPK_BORDER + y, *px);
    }
}

/// Draws one row: the query thumbnail followed by the top-k gallery
/// thumbnails, green borders on relevant entries and red on the rest.
pub fn render_topk_grid(
    query_image: &Path,
    ranked: &[(std::path::PathBuf, bool)],
    k: usize,
    out_path: &Path,
) -> Result<()> {
    if k < 1 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let k = k.min(ranked.len());
    let mut canvas =
        RgbImage::from_pixel(topk_grid_width(k), topk_grid_height(), Rgb([245, 245, 245]));

    let query = imgio::load_rgb(query_image)?;
    let step = TOPK_THUMB + 2 * TOPK_BORDER + TOPK_MARGIN;
    blit_with_border(
        &mut canvas,
        &query,
        TOPK_MARGIN,
        TOPK_MARGIN,
        Rgb([60, 60, 60]),
    );

    for (i, (path, relevant)) in ranked.iter().take(k).enumerate() {
        let img = imgio::load_rgb(path)?;
        let border = if *relevant {
            Rgb([0, 170, 0])
        } else {
            Rgb([200, 0, 0])
        };
        blit_with_border(
            &mut canvas,
            &img,
            TOPK_MARGIN + (i as u32 + 1) * step,
            TOPK_MARGIN,
            border,
        );
    }
    imgio::save_png(&canvas, out_path)
}
