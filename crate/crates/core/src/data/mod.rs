//! Dataset ingestion, preprocessing and the synthetic defect generator.

mod labeled;
mod mvtec;
pub mod synthetic;

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::patching::ImageTensor;

pub use labeled::{load_labeled_folder, LABEL_FILE};
pub use mvtec::load_mvtec;
pub use synthetic::{generate_synthetic, DefectKind, SyntheticSpec, TextureKind};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImageTensor<f32>,
    /// `true` for anomalous samples.
    pub label: bool,
    pub mask: Option<Array2<bool>>,
    pub id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    MVTec,
    LabeledFolder,
    Synthetic,
}

impl Layout {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mvtec" => Ok(Self::MVTec),
            "labeled_folder" => Ok(Self::LabeledFolder),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(Error::Config(format!("unknown layout `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::MVTec => "mvtec",
            Self::LabeledFolder => "labeled_folder",
            Self::Synthetic => "synthetic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    /// Dataset root; for the synthetic layout an optional spec file.
    pub root: Option<PathBuf>,
    pub layout: Layout,
    pub class_name: String,
    pub image_side: usize,
    pub seed: u64,
    /// Normal images assigned to training by the labeled-folder loader.
    pub train_normals: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Human-readable warnings raised while loading.
    pub notices: Vec<String>,
}

impl Dataset {
    pub fn test_has_masks(&self) -> bool {
        !self.test.is_empty() && self.test.iter().all(|s| s.mask.is_some())
    }
}

/// Dispatches on `spec.layout`.
pub fn load(spec: &DatasetSpec) -> Result<Dataset> {
    let ds = match spec.layout {
        Layout::MVTec => load_mvtec(spec)?,
        Layout::LabeledFolder => load_labeled_folder(spec)?,
        Layout::Synthetic => {
            let mut syn = match &spec.root {
                Some(p) => SyntheticSpec::load(p)?,
                None => SyntheticSpec::default(),
            };
            syn.image_side = spec.image_side;
            generate_synthetic(&syn)?
        }
    };
    if let Some(bad) = ds.train.iter().find(|s| s.label) {
        return Err(Error::Split(format!(
            "anomalous sample `{}` in the training split",
            bad.id
        )));
    }
    for n in &ds.notices {
        log::warn!("{n}");
    }
    log::info!("loaded {} train / {} test samples", ds.train.len(), ds.test.len());
    Ok(ds)
}

/// Holds out `round(n * fraction)` seeded-random samples for validation. The
/// remaining samples keep their order.
pub fn make_validation_split<T: Clone>(train: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Split(format!("fraction must lie in (0, 1), got {fraction}")));
    }
    let n = train.len();
    let n_val = (n as f64 * fraction).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::Split(format!(
            "{n} samples with fraction {fraction} give {n_val} validation samples"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    for &i in &idx[..n_val] {
        is_val[i] = true;
    }
    let val = idx[..n_val].iter().map(|&i| train[i].clone()).collect();
    let rest = (0..n).filter(|&i| !is_val[i]).map(|i| train[i].clone()).collect();
    Ok((rest, val))
}

pub(crate) fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

/// Sorted image files directly inside `dir`.
pub(crate) fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingPath(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    Ok(files)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.is_file() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an image as 3-channel `[0, 1]` data, replicating grayscale and
/// resizing bilinearly to `side × side`.
pub fn load_image(path: &Path, side: usize) -> Result<ImageTensor<f32>> {
    let rgb = open(path)?.to_rgb8();
    let rgb = if rgb.dimensions() == (side as u32, side as u32) {
        rgb
    } else {
        image::imageops::resize(&rgb, side as u32, side as u32, FilterType::Triangle)
    };
    let mut data = vec![0.0f32; 3 * side * side];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * side + y as usize) * side + x as usize] = px[c] as f32 / 255.0;
        }
    }
    ImageTensor::new(3, side, side, data)
}

/// Loads a binary mask with nearest-neighbour resizing; any value of at
/// least 128 is positive.
pub fn load_mask(path: &Path, side: usize) -> Result<Array2<bool>> {
    let luma = open(path)?.to_luma8();
    let luma = if luma.dimensions() == (side as u32, side as u32) {
        luma
    } else {
        image::imageops::resize(&luma, side as u32, side as u32, FilterType::Nearest)
    };
    Ok(Array2::from_shape_fn((side, side), |(y, x)| {
        luma.get_pixel(x as u32, y as u32)[0] >= 128
    }))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1- or 3-channel tensor as an 8-bit PNG.
pub fn save_image(path: &Path, img: &ImageTensor<f32>) -> Result<()> {
    let (w, h) = (img.width as u32, img.height as u32);
    let result = match img.channels {
        1 => {
            image::GrayImage::from_fn(w, h, |x, y| image::Luma([to_u8(img.get(0, y as usize, x as usize))])).save(path)
        }
        3 => image::RgbImage::from_fn(w, h, |x, y| {
            image::Rgb([0, 1, 2].map(|c| to_u8(img.get(c, y as usize, x as usize))))
        })
        .save(path),
        c => return Err(Error::Dimension(format!("cannot save a {c}-channel image"))),
    };
    result.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_mask(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    })
    .save(path)
    .map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Seeded in-place shuffle used by every loader.
pub(crate) fn shuffle<T>(items: &mut [T], seed: u64) {
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
}
