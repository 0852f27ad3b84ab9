//! Per-pixel anomaly maps from (input, reconstruction) pairs.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::Real;
use crate::patching::ImageTensor;

pub const AMAP_MAGIC: &[u8; 4] = b"AMAP";
pub const AMAP_VERSION: u32 = 1;

/// Gaussian kernels extend to this many standard deviations.
pub const KERNEL_TRUNCATE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub raw: Array2<f32>,
    pub smoothed: Array2<f32>,
    pub sigma: f64,
}

impl AnomalyMap {
    pub fn compute<F: Real>(x: &ImageTensor<F>, reconstruction: &ImageTensor<F>, sigma: f64) -> Result<Self> {
        let raw = mse_map(x, reconstruction)?;
        let smoothed = smooth(&raw, sigma)?;
        Ok(Self { raw, smoothed, sigma })
    }

    pub fn compute_from_raw(raw: Array2<f32>, sigma: f64) -> Result<Self> {
        let smoothed = smooth(&raw, sigma)?;
        Ok(Self { raw, smoothed, sigma })
    }

    pub fn height(&self) -> usize {
        self.raw.nrows()
    }

    pub fn width(&self) -> usize {
        self.raw.ncols()
    }
}

/// Squared error summed over channels at each pixel.
pub fn mse_map<F: Real>(x: &ImageTensor<F>, y: &ImageTensor<F>) -> Result<Array2<f32>> {
    x.check_same_shape(y)?;
    let mut out = Array2::<f64>::zeros((x.height, x.width));
    for c in 0..x.channels {
        for ((o, &a), &b) in out.iter_mut().zip(x.plane(c)).zip(y.plane(c)) {
            let d = (a - b).as_f64();
            *o += d * d;
        }
    }
    Ok(out.mapv(|v| v as f32))
}

/// Normalized 1-D Gaussian truncated at [`KERNEL_TRUNCATE`] sigmas.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (KERNEL_TRUNCATE * sigma + 0.5).floor() as isize;
    let w: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian blur with reflected borders. `sigma == 0` is the
/// identity.
pub fn smooth(raw: &Array2<f32>, sigma: f64) -> Result<Array2<f32>> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::Config(format!(
            "sigma must be a finite non-negative number, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(raw.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (h, w) = raw.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            tmp[[y, x]] = kernel
                .iter()
                .enumerate()
                .map(|(t, &k)| k * raw[[y, reflect_index(x as isize + t as isize - r, w)]] as f64)
                .sum();
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = kernel
                .iter()
                .enumerate()
                .map(|(t, &k)| k * tmp[[reflect_index(y as isize + t as isize - r, h), x]])
                .sum::<f64>() as f32;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageScoreMode {
    Max,
    Mean,
    /// Mean of the top 1% of pixels (at least one).
    TopKMean,
}

impl ImageScoreMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Self::Max),
            "mean" => Ok(Self::Mean),
            "topk_mean" => Ok(Self::TopKMean),
            other => Err(Error::Config(format!("unknown image_score_mode `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Max => "max",
            Self::Mean => "mean",
            Self::TopKMean => "topk_mean",
        }
    }
}

/// Image-level anomaly score computed from the smoothed map.
pub fn image_score(map: &AnomalyMap, mode: ImageScoreMode) -> f64 {
    let values = map.smoothed.iter().map(|&v| v as f64);
    match mode {
        ImageScoreMode::Max => values.fold(0.0, f64::max),
        ImageScoreMode::Mean => values.sum::<f64>() / map.smoothed.len().max(1) as f64,
        ImageScoreMode::TopKMean => {
            let mut v: Vec<f64> = values.collect();
            let k = ((v.len() as f64) * 0.01).ceil().max(1.0) as usize;
            v.sort_by(|a, b| b.total_cmp(a));
            v[..k.min(v.len())].iter().sum::<f64>() / k as f64
        }
    }
}

/// `"AMAP"`, `u32` version, `u32` height, `u32` width, then the smoothed
/// field as little-endian `f32`, row-major.
pub fn encode_amap(field: &Array2<f32>) -> Vec<u8> {
    let (h, w) = field.dim();
    let mut out = Vec::with_capacity(16 + 4 * h * w);
    out.extend_from_slice(AMAP_MAGIC);
    out.extend_from_slice(&AMAP_VERSION.to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in field.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_amap(bytes: &[u8]) -> Result<Array2<f32>> {
    if bytes.len() < 16 || &bytes[..4] != AMAP_MAGIC {
        return Err(Error::Corrupt("not an AMAP file".into()));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let version = word(4);
    if version != AMAP_VERSION {
        return Err(Error::Version {
            found: version,
            expected: AMAP_VERSION,
        });
    }
    let (h, w) = (word(8) as usize, word(12) as usize);
    if bytes.len() != 16 + 4 * h * w {
        return Err(Error::Corrupt(format!(
            "AMAP {h}x{w} has {} payload bytes",
            bytes.len() - 16
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Array2::from_shape_vec((h, w), data).map_err(|e| Error::Corrupt(e.to_string()))
}

pub fn write_amap(path: impl AsRef<Path>, field: &Array2<f32>) -> Result<()> {
    fs::write(path, encode_amap(field))?;
    Ok(())
}

pub fn read_amap(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    decode_amap(&fs::read(path)?)
}

/// 8-bit grayscale PNG, min-max normalized per image.
pub fn write_heatmap_png(path: impl AsRef<Path>, field: &Array2<f32>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = field.dim();
    let lo = field.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = field.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels: Vec<u8> = field
        .iter()
        .map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer size");
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(h: usize, w: usize, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.random())
    }

    #[test]
    fn mse_map_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = ImageTensor::<f32>::new(3, 6, 5, (0..90).map(|_| rng.random()).collect()).unwrap();
        assert!(mse_map(&x, &x).unwrap().iter().all(|&v| v == 0.0));

        let mut y = x.clone();
        y.set(1, 2, 3, x.get(1, 2, 3) + 0.5);
        let m = mse_map(&x, &y).unwrap();
        for ((r, c), &v) in m.indexed_iter() {
            if (r, c) == (2, 3) {
                assert!((v - 0.25).abs() < 1e-6);
            } else {
                assert_eq!(v, 0.0);
            }
        }

        let z = ImageTensor::<f32>::new(3, 6, 5, (0..90).map(|_| rng.random()).collect()).unwrap();
        let m = mse_map(&x, &z).unwrap();
        for r in 0..6 {
            for c in 0..5 {
                let mut oracle = 0.0f64;
                for ch in 0..3 {
                    let d = (x.get(ch, r, c) - z.get(ch, r, c)) as f64;
                    oracle += d * d;
                }
                assert!((m[[r, c]] as f64 - oracle).abs() < 1e-6);
            }
        }
        assert!(mse_map(&x, &ImageTensor::zeros(3, 5, 5)).is_err());
    }

    #[test]
    fn sigma_zero_is_identity() {
        let f = random_field(7, 9, 1);
        assert_eq!(smooth(&f, 0.0).unwrap(), f);
    }

    #[test]
    fn constant_field_unchanged() {
        let f = Array2::from_elem((20, 17), 0.7f32);
        let s = smooth(&f, 4.0).unwrap();
        assert!(s.iter().all(|v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn impulse_matches_direct_2d_convolution() {
        let n = 64;
        let mut f = Array2::<f32>::zeros((n, n));
        f[[32, 32]] = 1.0;
        let sigma = 4.0;
        let s = smooth(&f, sigma).unwrap();
        // direct 2-D convolution with the outer-product kernel
        let radius = 16isize;
        let g: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let z: f64 = g.iter().sum::<f64>().powi(2);
        for y in 0..n {
            for x in 0..n {
                let mut acc = 0.0;
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        let (sy, sx) = (y as isize + dy, x as isize + dx);
                        if (0..n as isize).contains(&sy) && (0..n as isize).contains(&sx) {
                            acc += g[(dy + radius) as usize]
                                * g[(dx + radius) as usize]
                                * f[[sy as usize, sx as usize]] as f64;
                        }
                    }
                }
                assert!((s[[y, x]] as f64 - acc / z).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn reflection_indices() {
        let got: Vec<usize> = (-4..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-1, 1), 0);
    }

    #[test]
    fn negative_sigma_rejected() {
        assert!(smooth(&random_field(3, 3, 0), -1.0).is_err());
    }

    #[test]
    fn image_score_examples() {
        let zero = AnomalyMap {
            raw: Array2::zeros((10, 10)),
            smoothed: Array2::zeros((10, 10)),
            sigma: 0.0,
        };
        for mode in [ImageScoreMode::Max, ImageScoreMode::Mean, ImageScoreMode::TopKMean] {
            assert_eq!(image_score(&zero, mode), 0.0);
        }
        let mut one = zero.clone();
        one.smoothed[[3, 4]] = 5.0;
        assert_eq!(image_score(&one, ImageScoreMode::Max), 5.0);

        let f = random_field(15, 20, 3);
        let map = AnomalyMap {
            raw: f.clone(),
            smoothed: f.clone(),
            sigma: 0.0,
        };
        let mut v: Vec<f64> = f.iter().map(|&x| x as f64).collect();
        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let k = 3; // ceil(300 * 0.01)
        let oracle = v[..k].iter().sum::<f64>() / k as f64;
        assert!((image_score(&map, ImageScoreMode::TopKMean) - oracle).abs() < 1e-12);
    }

    #[test]
    fn amap_round_trip_and_layout() {
        let f = random_field(3, 5, 4);
        let bytes = encode_amap(&f);
        assert_eq!(&bytes[..4], b"AMAP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 5);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), f[[0, 0]]);
        assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()), f[[0, 1]]);
        assert_eq!(decode_amap(&bytes).unwrap(), f);
        assert!(decode_amap(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn smoothing_preserves_mass(seed in 0u64..500, h in 1usize..40, w in 1usize..40, sigma in 0.5f64..6.0) {
            let f = random_field(h, w, seed);
            let s = smooth(&f, sigma).unwrap();
            let (a, b) = (f.iter().map(|&v| v as f64).sum::<f64>(), s.iter().map(|&v| v as f64).sum::<f64>());
            proptest::prop_assert!((a - b).abs() <= 1e-4 * a.abs().max(1e-12));
            proptest::prop_assert!(s.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn max_score_is_monotone(seed in 0u64..500, bump in 0.0f32..2.0) {
            let f = random_field(16, 16, seed);
            let base = AnomalyMap::compute_from_raw(f.clone(), 2.0).unwrap();
            let bumped = AnomalyMap::compute_from_raw(f.mapv(|v| v + bump), 2.0).unwrap();
            proptest::prop_assert!(image_score(&bumped, ImageScoreMode::Max) >= image_score(&base, ImageScoreMode::Max));
        }
    }
}
