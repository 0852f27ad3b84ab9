//! ROC curves and the normalized partial AUROC up to an FPR cap.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::anomaly::AnomalyMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RocResult {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub partial_auc_normalized: f64,
    pub fpr_cap: f64,
}

/// ROC points by descending threshold. Equal scores form a single step.
pub fn roc(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (p, n) = (positives as f64, negatives as f64);
    let mut points = Vec::with_capacity(order.len().min(1 << 16) + 1);
    points.push((0.0, 0.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n, tp as f64 / p));
    }
    Ok(points)
}

/// Trapezoidal area under `points` for `fpr ∈ [0, cap]`, divided by `cap`.
pub fn partial_auroc(points: &[(f64, f64)], fpr_cap: f64) -> f64 {
    let mut area = 0.0;
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= fpr_cap {
            break;
        }
        if x1 <= fpr_cap {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y_cap = y0 + (y1 - y0) * (fpr_cap - x0) / (x1 - x0);
            area += (fpr_cap - x0) * (y0 + y_cap) / 2.0;
            break;
        }
    }
    (area / fpr_cap).clamp(0.0, 1.0)
}

pub fn roc_result(scores: &[f64], labels: &[bool], fpr_cap: f64) -> Result<RocResult> {
    if !(fpr_cap > 0.0 && fpr_cap <= 1.0) {
        return Err(Error::Config(format!("fpr_cap must lie in (0, 1], got {fpr_cap}")));
    }
    let points = roc(scores, labels)?;
    Ok(RocResult {
        partial_auc_normalized: partial_auroc(&points, fpr_cap),
        points,
        fpr_cap,
    })
}

/// Ordinary AUROC of image-level scores.
pub fn image_auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(partial_auroc(&roc(scores, labels)?, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelEval {
    /// All pixels of all images pooled into one population.
    pub pooled: RocResult,
    /// Mean over images that contain both classes; `None` if there are none.
    pub per_image_mean: Option<f64>,
    pub images_in_mean: usize,
}

/// Smoothed map values scored against binary masks.
pub fn pixel_level_eval(maps: &[AnomalyMap], masks: &[Array2<bool>], fpr_cap: f64) -> Result<PixelEval> {
    if maps.len() != masks.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} maps vs {} masks",
            maps.len(),
            masks.len()
        )));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut per_image = Vec::new();
    for (i, (map, mask)) in maps.iter().zip(masks).enumerate() {
        if map.smoothed.dim() != mask.dim() {
            return Err(Error::ShapeMismatch(format!(
                "image {i}: map {:?} vs mask {:?}",
                map.smoothed.dim(),
                mask.dim()
            )));
        }
        let s: Vec<f64> = map.smoothed.iter().map(|&v| v as f64).collect();
        let l: Vec<bool> = mask.iter().copied().collect();
        let pos = l.iter().filter(|&&v| v).count();
        if pos > 0 && pos < l.len() {
            per_image.push(partial_auroc(&roc(&s, &l)?, fpr_cap));
        }
        scores.extend(s);
        labels.extend(l);
    }
    let pooled = roc_result(&scores, &labels, fpr_cap)?;
    let images_in_mean = per_image.len();
    let per_image_mean = (!per_image.is_empty()).then(|| per_image.iter().sum::<f64>() / images_in_mean as f64);
    Ok(PixelEval {
        pooled,
        per_image_mean,
        images_in_mean,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub class: String,
    pub n_images: usize,
    pub fpr_cap: f64,
    pub pooled: Option<f64>,
    pub per_image_mean: Option<f64>,
    pub image_auroc: Option<f64>,
    pub sigma: f64,
    pub combo: String,
    pub seed: u64,
}

pub const REPORT_COLUMNS: [&str; 9] = [
    "class",
    "n_images",
    "fpr_cap",
    "pooled_partial_auroc",
    "per_image_mean_partial_auroc",
    "image_auroc",
    "sigma",
    "combo",
    "seed",
];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl ReportRow {
    fn fields(&self) -> [String; 9] {
        [
            self.class.clone(),
            self.n_images.to_string(),
            self.fpr_cap.to_string(),
            opt(self.pooled),
            opt(self.per_image_mean),
            opt(self.image_auroc),
            self.sigma.to_string(),
            self.combo.clone(),
            self.seed.to_string(),
        ]
    }
}

pub fn write_report_csv(path: impl AsRef<Path>, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_COLUMNS)?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(())
}

/// Aligned plain-text table.
pub fn report_text(rows: &[ReportRow]) -> String {
    let cells: Vec<[String; 9]> = rows.iter().map(|r| r.fields()).collect();
    let widths: Vec<usize> = (0..9)
        .map(|i| {
            cells
                .iter()
                .map(|c| c[i].len())
                .chain([REPORT_COLUMNS[i].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, items: Vec<&str>| {
        let parts: Vec<String> = items.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        writeln!(out, "{}", parts.join("  ").trim_end()).expect("string write");
    };
    line(&mut out, REPORT_COLUMNS.to_vec());
    for c in &cells {
        line(&mut out, c.iter().map(String::as_str).collect());
    }
    out
}
