//! Test-set evaluation: anomaly maps, pixel and image metrics, artifacts.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;

use crate::anomaly::{image_score, write_amap, write_heatmap_png, AnomalyMap, ImageScoreMode};
use crate::config::MetalConfig;
use crate::data::Sample;
use crate::error::Result;
use crate::metrics::{image_auroc, pixel_level_eval, PixelEval, ReportRow};
use crate::model::MetalModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub sigma: f64,
    pub fpr_cap: f64,
    pub image_score_mode: ImageScoreMode,
}

impl From<&MetalConfig> for EvalSettings {
    fn from(c: &MetalConfig) -> Self {
        Self {
            sigma: c.sigma,
            fpr_cap: c.fpr_cap,
            image_score_mode: c.image_score_mode,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub maps: Vec<AnomalyMap>,
    pub image_scores: Vec<f64>,
    pub pixel: Option<PixelEval>,
    pub image_auroc: Option<f64>,
    pub notices: Vec<String>,
}

/// Reconstructs every test sample and scores the anomaly maps.
pub fn evaluate(model: &MetalModel<f32>, test: &[Sample], settings: &EvalSettings) -> Result<EvalResult> {
    let maps = test
        .par_iter()
        .map(|s| {
            let recon = model.reconstruct_patchwise(&s.image)?;
            AnomalyMap::compute(&s.image, &recon, settings.sigma)
        })
        .collect::<Result<Vec<_>>>()?;
    let image_scores: Vec<f64> = maps.iter().map(|m| image_score(m, settings.image_score_mode)).collect();
    let mut notices = Vec::new();

    let masks: Option<Vec<Array2<bool>>> = test.iter().map(|s| s.mask.clone()).collect();
    let pixel = match masks {
        Some(masks) if masks.iter().any(|m| m.iter().any(|&v| v)) && masks.iter().any(|m| m.iter().any(|&v| !v)) => {
            Some(pixel_level_eval(&maps, &masks, settings.fpr_cap)?)
        }
        Some(_) => {
            notices.push("pixel metrics skipped: the masks contain a single class".to_string());
            None
        }
        None => {
            notices.push("pixel metrics skipped: the test set has no ground-truth masks".to_string());
            None
        }
    };

    let labels: Vec<bool> = test.iter().map(|s| s.label).collect();
    let image_auroc = if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
        Some(image_auroc(&image_scores, &labels)?)
    } else {
        notices.push("image AUROC skipped: the test labels contain a single class".to_string());
        None
    };
    Ok(EvalResult {
        maps,
        image_scores,
        pixel,
        image_auroc,
        notices,
    })
}

impl EvalResult {
    pub fn report_row(&self, class: &str, cfg: &MetalConfig, settings: &EvalSettings) -> ReportRow {
        ReportRow {
            class: class.to_string(),
            n_images: self.maps.len(),
            fpr_cap: settings.fpr_cap,
            pooled: self.pixel.as_ref().map(|p| p.pooled.partial_auc_normalized),
            per_image_mean: self.pixel.as_ref().and_then(|p| p.per_image_mean),
            image_auroc: self.image_auroc,
            sigma: settings.sigma,
            combo: cfg.combo.as_str().to_string(),
            seed: cfg.seed,
        }
    }

    /// Writes `<id>.amap` and `<id>.png` for every sample under `dir`. Path
    /// separators in ids become nested directories.
    pub fn write_maps(&self, test: &[Sample], dir: &Path) -> Result<()> {
        for (s, m) in test.iter().zip(&self.maps) {
            let base = dir.join(&s.id);
            if let Some(parent) = base.parent() {
                fs::create_dir_all(parent)?;
            }
            write_amap(base.with_extension("amap"), &m.smoothed)?;
            write_heatmap_png(base.with_extension("png"), &m.smoothed)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::model::ShapeCombo;

    fn setup() -> (MetalModel<f32>, Vec<Sample>, MetalConfig) {
        let cfg = MetalConfig {
            image_side: 32,
            patch_side: 8,
            embed_dim: 16,
            num_heads: 2,
            ffn_hidden: 32,
            decoder_hidden: 16,
            combo: ShapeCombo::SquaresOnly,
            ..MetalConfig::default()
        };
        let spec = SyntheticSpec {
            image_side: 32,
            train_count: 0,
            test_count: 3,
            test_normal_count: 2,
            ..SyntheticSpec::default()
        };
        let test = generate_synthetic(&spec).unwrap().test;
        (MetalModel::new(&cfg).unwrap(), test, cfg)
    }

    #[test]
    fn produces_both_metric_levels() {
        let (model, test, cfg) = setup();
        let settings = EvalSettings::from(&cfg);
        let r = evaluate(&model, &test, &settings).unwrap();
        assert_eq!(r.maps.len(), 5);
        assert!(r.pixel.is_some());
        assert!(r.image_auroc.is_some());
        assert!(r.notices.is_empty());
        let row = r.report_row("synthetic", &cfg, &settings);
        assert_eq!(row.n_images, 5);
        assert_eq!(row.combo, "squares_only");
    }

    #[test]
    fn maskless_test_set_skips_pixel_metrics() {
        let (model, mut test, cfg) = setup();
        for s in &mut test {
            s.mask = None;
        }
        let r = evaluate(&model, &test, &EvalSettings::from(&cfg)).unwrap();
        assert!(r.pixel.is_none());
        assert!(r.image_auroc.is_some());
        assert_eq!(r.notices.len(), 1);
    }

    #[test]
    fn writes_map_artifacts() {
        let (model, test, cfg) = setup();
        let r = evaluate(&model, &test, &EvalSettings::from(&cfg)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.write_maps(&test, dir.path()).unwrap();
        let amap = dir.path().join("test/rect/000.amap");
        assert_eq!(crate::anomaly::read_amap(&amap).unwrap(), r.maps[0].smoothed);
        assert!(dir.path().join("test/good/001.png").exists());
    }
}
