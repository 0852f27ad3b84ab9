//! Procedural textures with planted defects and exact masks.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{save_image, save_mask, Dataset, Sample};
use crate::anomaly::smooth;
use crate::error::{Error, Result};
use crate::patching::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureKind {
    Checker,
    Stripes,
    NoiseBlur,
}

impl TextureKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "checker" => Ok(Self::Checker),
            "stripes" => Ok(Self::Stripes),
            "noise_blur" => Ok(Self::NoiseBlur),
            other => Err(Error::Config(format!("unknown texture `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Checker => "checker",
            Self::Stripes => "stripes",
            Self::NoiseBlur => "noise_blur",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefectKind {
    Rect,
    Blob,
    LineScratch,
}

impl DefectKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rect" => Ok(Self::Rect),
            "blob" => Ok(Self::Blob),
            "line_scratch" => Ok(Self::LineScratch),
            other => Err(Error::Config(format!("unknown defect `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Rect => "rect",
            Self::Blob => "blob",
            Self::LineScratch => "line_scratch",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub texture: TextureKind,
    pub defect: DefectKind,
    pub image_side: usize,
    /// Checker cell side or stripe half-period, in pixels.
    pub cell: usize,
    pub defect_min: usize,
    pub defect_max: usize,
    pub train_count: usize,
    /// Defective test images.
    pub test_count: usize,
    /// Defect-free test images.
    pub test_normal_count: usize,
    /// Standard deviation of per-pixel gray noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            texture: TextureKind::Checker,
            defect: DefectKind::Rect,
            image_side: 64,
            cell: 8,
            defect_min: 8,
            defect_max: 8,
            train_count: 40,
            test_count: 20,
            test_normal_count: 0,
            noise: 0.02,
            seed: 0,
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl SyntheticSpec {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "texture" => self.texture = TextureKind::parse(v)?,
            "defect" => self.defect = DefectKind::parse(v)?,
            "image_side" => self.image_side = num(key, v)?,
            "cell" => self.cell = num(key, v)?,
            "defect_min" => self.defect_min = num(key, v)?,
            "defect_max" => self.defect_max = num(key, v)?,
            "train_count" => self.train_count = num(key, v)?,
            "test_count" => self.test_count = num(key, v)?,
            "test_normal_count" => self.test_normal_count = num(key, v)?,
            "noise" => self.noise = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            spec.set(k.trim(), v)?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "texture={}", self.texture.as_str());
        let _ = writeln!(s, "defect={}", self.defect.as_str());
        let _ = writeln!(s, "image_side={}", self.image_side);
        let _ = writeln!(s, "cell={}", self.cell);
        let _ = writeln!(s, "defect_min={}", self.defect_min);
        let _ = writeln!(s, "defect_max={}", self.defect_max);
        let _ = writeln!(s, "train_count={}", self.train_count);
        let _ = writeln!(s, "test_count={}", self.test_count);
        let _ = writeln!(s, "test_normal_count={}", self.test_normal_count);
        let _ = writeln!(s, "noise={}", self.noise);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_side < 4 || self.cell == 0 {
            return Err(Error::Config("image_side must be at least 4 and cell positive".into()));
        }
        if self.defect_min == 0 || self.defect_min > self.defect_max || self.defect_max > self.image_side {
            return Err(Error::Config(format!(
                "defect size range [{}, {}] is invalid for {} pixel images",
                self.defect_min, self.defect_max, self.image_side
            )));
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Gray texture (one plane replicated to three channels).
fn texture(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let n = spec.image_side;
    let cell = spec.cell;
    let mut plane = match spec.texture {
        TextureKind::Checker => {
            let (px, py) = (rng.random_range(0..2 * cell), rng.random_range(0..2 * cell));
            let lo: f64 = rng.random_range(0.25..0.35);
            let hi: f64 = rng.random_range(0.65..0.75);
            Array2::from_shape_fn((n, n), |(y, x)| {
                if ((x + px) / cell + (y + py) / cell).is_multiple_of(2) {
                    lo
                } else {
                    hi
                }
            })
        }
        TextureKind::Stripes => {
            let period = 2.0 * cell as f64 * rng.random_range(0.75..1.25);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let vertical = rng.random_bool(0.5);
            Array2::from_shape_fn((n, n), |(y, x)| {
                let t = if vertical { x } else { y } as f64;
                0.5 + 0.25 * (std::f64::consts::TAU * t / period + phase).sin()
            })
        }
        TextureKind::NoiseBlur => {
            let raw = Array2::from_shape_fn((n, n), |_| rng.random::<f32>());
            let blurred = smooth(&raw, cell as f64 / 4.0).expect("positive sigma").mapv(f64::from);
            let mean = blurred.mean().unwrap_or(0.5);
            let std = blurred.std(0.0).max(1e-6);
            blurred.mapv(|v| 0.5 + 0.15 * (v - mean) / std)
        }
    };
    if spec.noise > 0.0 {
        plane.mapv_inplace(|v| v + spec.noise * rng.sample::<f64, _>(StandardNormal));
    }
    plane.mapv(|v| v.clamp(0.0, 1.0) as f32)
}

fn defect_mask(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Array2<bool> {
    let n = spec.image_side;
    let mut mask = Array2::from_elem((n, n), false);
    let size = rng.random_range(spec.defect_min..=spec.defect_max);
    match spec.defect {
        DefectKind::Rect => {
            let (y0, x0) = (rng.random_range(0..=n - size), rng.random_range(0..=n - size));
            mask.slice_mut(ndarray::s![y0..y0 + size, x0..x0 + size]).fill(true);
        }
        DefectKind::Blob => {
            let ra = rng.random_range(0.5..=1.0) * size as f64 / 2.0;
            let rb = rng.random_range(0.5..=1.0) * size as f64 / 2.0;
            let cy = rng.random_range(rb..=(n as f64 - rb));
            let cx = rng.random_range(ra..=(n as f64 - ra));
            for ((y, x), m) in mask.indexed_iter_mut() {
                let (dy, dx) = ((y as f64 + 0.5 - cy) / rb, (x as f64 + 0.5 - cx) / ra);
                *m = dx * dx + dy * dy <= 1.0;
            }
            if !mask.iter().any(|&m| m) {
                mask[[cy as usize, cx as usize]] = true;
            }
        }
        DefectKind::LineScratch => {
            let len = (2 * size).min(n - 1) as f64;
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let (y0, x0) = (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64));
            let steps = (4.0 * len) as usize;
            let hi = (n - 1) as f64;
            for i in 0..=steps {
                let t = len * i as f64 / steps as f64;
                let y = (y0 + t * angle.sin()).clamp(0.0, hi) as usize;
                let x = (x0 + t * angle.cos()).clamp(0.0, hi) as usize;
                mask[[y, x]] = true;
                mask[[(y + 1).min(n - 1), x]] = true;
            }
        }
    }
    mask
}

/// Paints a flat color under `mask`. Its channels differ by more than 0.5,
/// so no pixel of a gray texture keeps its value.
fn plant(img: &mut ImageTensor<f32>, mask: &Array2<bool>, rng: &mut ChaCha8Rng) {
    let color = loop {
        let c: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let (lo, hi) = c.iter().fold((1.0f32, 0.0f32), |(l, h), &v| (l.min(v), h.max(v)));
        if hi - lo > 0.5 {
            break c;
        }
    };
    for ((y, x), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        for (c, &v) in color.iter().enumerate().take(img.channels) {
            img.set(c, y, x, v);
        }
    }
}

fn gray_image(plane: &Array2<f32>) -> ImageTensor<f32> {
    let (h, w) = plane.dim();
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend(plane.iter().copied());
    }
    ImageTensor::new(3, h, w, data).expect("consistent size")
}

/// Deterministic for a fixed spec. Defects appear only in the test split.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.image_side;
    let train = (0..spec.train_count)
        .map(|i| Sample {
            image: gray_image(&texture(spec, &mut rng)),
            label: false,
            mask: None,
            id: format!("train/good/{i:03}"),
        })
        .collect();
    let mut test = Vec::with_capacity(spec.test_count + spec.test_normal_count);
    for i in 0..spec.test_count {
        let mut image = gray_image(&texture(spec, &mut rng));
        let mask = defect_mask(spec, &mut rng);
        plant(&mut image, &mask, &mut rng);
        test.push(Sample {
            image,
            label: true,
            mask: Some(mask),
            id: format!("test/{}/{i:03}", spec.defect.as_str()),
        });
    }
    for i in 0..spec.test_normal_count {
        test.push(Sample {
            image: gray_image(&texture(spec, &mut rng)),
            label: false,
            mask: Some(Array2::from_elem((n, n), false)),
            id: format!("test/good/{i:03}"),
        });
    }
    Ok(Dataset {
        train,
        test,
        notices: Vec::new(),
    })
}

/// Writes the dataset in the MVTec directory layout under `root/<class>`,
/// together with the spec that produced it.
pub fn write_dataset(spec: &SyntheticSpec, ds: &Dataset, root: &Path, class: &str) -> Result<()> {
    let base = root.join(class);
    for s in ds.train.iter().chain(&ds.test) {
        let path = base.join(format!("{}.png", s.id));
        fs::create_dir_all(path.parent().expect("has parent"))?;
        save_image(&path, &s.image)?;
        if s.label {
            let (dir, name) = s.id.rsplit_once('/').expect("id has a directory");
            let defect = dir.trim_start_matches("test/");
            let mpath = base.join("ground_truth").join(defect).join(format!("{name}_mask.png"));
            fs::create_dir_all(mpath.parent().expect("has parent"))?;
            save_mask(&mpath, s.mask.as_ref().expect("defective samples carry masks"))?;
        }
    }
    fs::write(root.join("synthetic_spec.txt"), spec.to_text())?;
    Ok(())
}
