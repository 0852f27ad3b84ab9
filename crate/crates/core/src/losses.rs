//! Reconstruction objective: L1 distance plus negated SSIM.
//!
//! All functions take the target image first and the reconstruction second;
//! gradients are with respect to the reconstruction.

use crate::error::{Error, Result};
use crate::nn::Real;
use crate::patching::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsimMode {
    /// One set of image-wide statistics per channel.
    Global,
    /// Mean SSIM over all positions of a Gaussian window.
    Windowed,
}

impl SsimMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Self::Global),
            "windowed" => Ok(Self::Windowed),
            other => Err(Error::Config(format!("unknown ssim_mode `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Global => "global",
            Self::Windowed => "windowed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
    pub mode: SsimMode,
    pub window_size: usize,
    pub window_sigma: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
            mode: SsimMode::Windowed,
            window_size: 11,
            window_sigma: 1.5,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Normalized 1-D Gaussian window, shrunk to fit images smaller than
    /// `window_size`.
    pub fn window(&self, height: usize, width: usize) -> Vec<f64> {
        let mut size = self.window_size.min(height).min(width);
        if size.is_multiple_of(2) {
            size -= 1;
        }
        gaussian_window(size.max(1), self.window_sigma)
    }
}

pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let center = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - center).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum L1Reduction {
    Sum,
    Mean,
}

impl L1Reduction {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            other => Err(Error::Config(format!("unknown l1_reduction `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sum => "sum",
            Self::Mean => "mean",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub ssim: SsimParams,
    pub l1_reduction: L1Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            ssim: SsimParams::default(),
            l1_reduction: L1Reduction::Sum,
        }
    }
}

/// Sum of absolute differences over every pixel and channel.
pub fn l1_loss<F: Real>(x: &ImageTensor<F>, y: &ImageTensor<F>) -> Result<F> {
    x.check_same_shape(y)?;
    Ok(x.data.iter().zip(&y.data).map(|(&a, &b)| (a - b).abs()).sum())
}

fn l1_with_grad<F: Real>(x: &ImageTensor<F>, y: &ImageTensor<F>, reduction: L1Reduction) -> (F, Vec<F>) {
    let scale = match reduction {
        L1Reduction::Sum => F::one(),
        L1Reduction::Mean => F::one() / F::of(x.data.len() as f64),
    };
    let mut total = F::zero();
    let grad = x
        .data
        .iter()
        .zip(&y.data)
        .map(|(&a, &b)| {
            let d = b - a;
            total += d.abs();
            // subgradient 0 at d == 0
            if d > F::zero() {
                scale
            } else if d < F::zero() {
                -scale
            } else {
                F::zero()
            }
        })
        .collect();
    (total * scale, grad)
}

pub fn ssim<F: Real>(x: &ImageTensor<F>, y: &ImageTensor<F>, p: &SsimParams) -> Result<F> {
    Ok(ssim_impl(x, y, p, false)?.0)
}

/// SSIM and its gradient with respect to `y`.
pub fn ssim_with_grad<F: Real>(x: &ImageTensor<F>, y: &ImageTensor<F>, p: &SsimParams) -> Result<(F, ImageTensor<F>)> {
    let (value, grad) = ssim_impl(x, y, p, true)?;
    Ok((value, grad.expect("gradient requested")))
}

/// `l1 - ssim`.
pub fn total_loss<F: Real>(x: &ImageTensor<F>, y: &ImageTensor<F>, cfg: &LossConfig) -> Result<F> {
    x.check_same_shape(y)?;
    let (l1, _) = l1_with_grad(x, y, cfg.l1_reduction);
    Ok(l1 - ssim(x, y, &cfg.ssim)?)
}

pub fn total_loss_with_grad<F: Real>(
    x: &ImageTensor<F>,
    y: &ImageTensor<F>,
    cfg: &LossConfig,
) -> Result<(F, ImageTensor<F>)> {
    x.check_same_shape(y)?;
    let (l1, mut grad) = l1_with_grad(x, y, cfg.l1_reduction);
    let (s, sgrad) = ssim_with_grad(x, y, &cfg.ssim)?;
    for (g, sg) in grad.iter_mut().zip(&sgrad.data) {
        *g -= *sg;
    }
    Ok((l1 - s, ImageTensor::new(x.channels, x.height, x.width, grad)?))
}

/// Local statistics at one window position.
struct Moments<F> {
    mx: F,
    my: F,
    vx: F,
    vy: F,
    cxy: F,
}

/// SSIM of one window and its partial derivatives with respect to
/// `(my, vy, cxy)`.
fn ssim_terms<F: Real>(m: &Moments<F>, c1: F, c2: F) -> (F, F, F, F) {
    let two = F::of(2.0);
    let a1 = two * m.mx * m.my + c1;
    let a2 = two * m.cxy + c2;
    let b1 = m.mx * m.mx + m.my * m.my + c1;
    let b2 = m.vx + m.vy + c2;
    let s = (a1 * a2) / (b1 * b2);
    let d_my = s * (two * m.mx / a1 - two * m.my / b1);
    let d_vy = -s / b2;
    let d_cxy = two * s / a2;
    (s, d_my, d_vy, d_cxy)
}

fn ssim_impl<F: Real>(
    x: &ImageTensor<F>,
    y: &ImageTensor<F>,
    p: &SsimParams,
    want_grad: bool,
) -> Result<(F, Option<ImageTensor<F>>)> {
    x.check_same_shape(y)?;
    if x.data.is_empty() {
        return Err(Error::Dimension("SSIM of an empty image".into()));
    }
    let c1 = F::of(p.c1());
    let c2 = F::of(p.c2());
    let (h, w) = (x.height, x.width);
    let mut grad = want_grad.then(|| ImageTensor::zeros(x.channels, h, w));
    let mut total = F::zero();
    match p.mode {
        SsimMode::Global => {
            let n = F::of((h * w) as f64);
            for c in 0..x.channels {
                let (xs, ys) = (x.plane(c), y.plane(c));
                let mx = xs.iter().copied().sum::<F>() / n;
                let my = ys.iter().copied().sum::<F>() / n;
                let vx = xs.iter().map(|&v| (v - mx) * (v - mx)).sum::<F>() / n;
                let vy = ys.iter().map(|&v| (v - my) * (v - my)).sum::<F>() / n;
                let cxy = xs.iter().zip(ys).map(|(&a, &b)| (a - mx) * (b - my)).sum::<F>() / n;
                let (s, d_my, d_vy, d_cxy) = ssim_terms(&Moments { mx, my, vx, vy, cxy }, c1, c2);
                total += s;
                if let Some(g) = grad.as_mut() {
                    let off = c * h * w;
                    for (i, (&a, &b)) in xs.iter().zip(ys).enumerate() {
                        g.data[off + i] = (d_my + d_vy * F::of(2.0) * (b - my) + d_cxy * (a - mx)) / n;
                    }
                }
            }
            let nc = F::of(x.channels as f64);
            total = total / nc;
            if let Some(g) = grad.as_mut() {
                g.data.iter_mut().for_each(|v| *v = *v / nc);
            }
        }
        SsimMode::Windowed => {
            let win: Vec<F> = p.window(h, w).into_iter().map(F::of).collect();
            let k = win.len();
            let (oh, ow) = (h - k + 1, w - k + 1);
            let count = F::of((oh * ow * x.channels) as f64);
            for c in 0..x.channels {
                let (xs, ys) = (x.plane(c), y.plane(c));
                let xx: Vec<F> = xs.iter().map(|&v| v * v).collect();
                let yy: Vec<F> = ys.iter().map(|&v| v * v).collect();
                let xy: Vec<F> = xs.iter().zip(ys).map(|(&a, &b)| a * b).collect();
                let mu_x = filter_valid(xs, h, w, &win);
                let mu_y = filter_valid(ys, h, w, &win);
                let e_xx = filter_valid(&xx, h, w, &win);
                let e_yy = filter_valid(&yy, h, w, &win);
                let e_xy = filter_valid(&xy, h, w, &win);
                let mut g_my = vec![F::zero(); oh * ow];
                let mut g_eyy = vec![F::zero(); oh * ow];
                let mut g_exy = vec![F::zero(); oh * ow];
                for i in 0..oh * ow {
                    let (mx, my) = (mu_x[i], mu_y[i]);
                    let m = Moments {
                        mx,
                        my,
                        vx: e_xx[i] - mx * mx,
                        vy: e_yy[i] - my * my,
                        cxy: e_xy[i] - mx * my,
                    };
                    let (s, d_my, d_vy, d_cxy) = ssim_terms(&m, c1, c2);
                    total += s;
                    // chain through vy = E[y²] - my², cxy = E[xy] - mx·my
                    g_my[i] = (d_my - d_vy * F::of(2.0) * my - d_cxy * mx) / count;
                    g_eyy[i] = d_vy / count;
                    g_exy[i] = d_cxy / count;
                }
                if let Some(g) = grad.as_mut() {
                    let a = filter_valid_adjoint(&g_my, h, w, &win);
                    let b = filter_valid_adjoint(&g_eyy, h, w, &win);
                    let d = filter_valid_adjoint(&g_exy, h, w, &win);
                    let off = c * h * w;
                    for i in 0..h * w {
                        g.data[off + i] = a[i] + F::of(2.0) * ys[i] * b[i] + xs[i] * d[i];
                    }
                }
            }
            total = total / count;
        }
    }
    Ok((total, grad))
}

/// Separable "valid" filtering of an `h × w` plane with a square window.
fn filter_valid<F: Real>(src: &[F], h: usize, w: usize, win: &[F]) -> Vec<F> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![F::zero(); h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = row[x..x + k].iter().zip(win).map(|(&a, &b)| a * b).sum();
        }
    }
    let mut out = vec![F::zero(); oh * ow];
    for y in 0..oh {
        for (t, &wt) in win.iter().enumerate() {
            let src_row = &tmp[(y + t) * ow..(y + t + 1) * ow];
            for (o, &v) in out[y * ow..(y + 1) * ow].iter_mut().zip(src_row) {
                *o += wt * v;
            }
        }
    }
    out
}

/// Transpose of [`filter_valid`]: scatters an `(h-k+1) × (w-k+1)` map back
/// onto the `h × w` plane.
fn filter_valid_adjoint<F: Real>(src: &[F], h: usize, w: usize, win: &[F]) -> Vec<F> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![F::zero(); h * ow];
    for y in 0..oh {
        for (t, &wt) in win.iter().enumerate() {
            let dst = &mut tmp[(y + t) * ow..(y + t + 1) * ow];
            for (d, &v) in dst.iter_mut().zip(&src[y * ow..(y + 1) * ow]) {
                *d += wt * v;
            }
        }
    }
    let mut out = vec![F::zero(); h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (o, &wt) in out[y * w + x..y * w + x + k].iter_mut().zip(win) {
                *o += wt * v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> ImageTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(c, h, w, (0..c * h * w).map(|_| rng.random()).collect()).unwrap()
    }

    fn params(mode: SsimMode) -> SsimParams {
        SsimParams {
            mode,
            ..SsimParams::default()
        }
    }

    #[test]
    fn l1_examples() {
        let x = random_image(3, 5, 5, 0);
        assert_eq!(l1_loss(&x, &x).unwrap(), 0.0);
        let z = ImageTensor::<f64>::zeros(1, 2, 2);
        let o = ImageTensor::<f64>::filled(1, 2, 2, 1.0);
        assert_eq!(l1_loss(&z, &o).unwrap(), 4.0);
        let y = random_image(3, 5, 5, 1);
        let mut oracle = 0.0;
        for i in 0..x.data.len() {
            oracle += (x.data[i] - y.data[i]).abs();
        }
        assert!((l1_loss(&x, &y).unwrap() - oracle).abs() < 1e-12);
        assert!(l1_loss(&x, &ImageTensor::zeros(3, 5, 4)).is_err());
    }

    #[test]
    fn ssim_of_identical_images_is_exactly_one() {
        for mode in [SsimMode::Global, SsimMode::Windowed] {
            let x = random_image(3, 20, 20, 2);
            assert_eq!(ssim(&x, &x, &params(mode)).unwrap(), 1.0);
            let xf = x.cast::<f32>();
            assert_eq!(ssim(&xf, &xf, &params(mode)).unwrap(), 1.0);
        }
    }

    #[test]
    fn ssim_is_symmetric() {
        for mode in [SsimMode::Global, SsimMode::Windowed] {
            let x = random_image(3, 16, 16, 3);
            let y = random_image(3, 16, 16, 4);
            let a = ssim(&x, &y, &params(mode)).unwrap();
            let b = ssim(&y, &x, &params(mode)).unwrap();
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_images_match_direct_substitution() {
        let x = ImageTensor::<f64>::filled(3, 16, 16, 0.5);
        let y = ImageTensor::<f64>::filled(3, 16, 16, 0.25);
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let oracle = (2.0 * 0.5 * 0.25 + c1) * (0.0 + c2) / ((0.25 + 0.0625 + c1) * (0.0 + 0.0 + c2));
        for mode in [SsimMode::Global, SsimMode::Windowed] {
            let s = ssim(&x, &y, &params(mode)).unwrap();
            assert!((s - oracle).abs() < 1e-12, "{mode:?}: {s} vs {oracle}");
        }
    }

    #[test]
    fn windowed_matches_direct_window_loop() {
        // independent per-window evaluation with a 2-D weight grid
        let p = params(SsimMode::Windowed);
        let x = random_image(1, 14, 13, 5);
        let y = random_image(1, 14, 13, 6);
        let g = gaussian_window(11, 1.5);
        let (c1, c2) = (p.c1(), p.c2());
        let mut acc = 0.0;
        let mut count = 0.0;
        for oy in 0..4 {
            for ox in 0..3 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = g[i] * g[j];
                        let (a, b) = (x.get(0, oy + i, ox + j), y.get(0, oy + i, ox + j));
                        mx += wt * a;
                        my += wt * b;
                        sxx += wt * a * a;
                        syy += wt * b * b;
                        sxy += wt * a * b;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
        assert!((ssim(&x, &y, &p).unwrap() - acc / count).abs() < 1e-12);
    }

    fn check_grad(mode: SsimMode, reduction: L1Reduction) {
        let cfg = LossConfig {
            ssim: params(mode),
            l1_reduction: reduction,
        };
        let x = random_image(2, 13, 12, 7);
        let mut y = random_image(2, 13, 12, 8);
        let (_, g) = total_loss_with_grad(&x, &y, &cfg).unwrap();
        let (_, sg) = ssim_with_grad(&x, &y, &cfg.ssim).unwrap();
        let h = 1e-6;
        for i in (0..y.data.len()).step_by(7) {
            let orig = y.data[i];
            y.data[i] = orig + h;
            let (up, sup) = (total_loss(&x, &y, &cfg).unwrap(), ssim(&x, &y, &cfg.ssim).unwrap());
            y.data[i] = orig - h;
            let (down, sdown) = (total_loss(&x, &y, &cfg).unwrap(), ssim(&x, &y, &cfg.ssim).unwrap());
            y.data[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - g.data[i]).abs() <= 1e-3 * fd.abs().max(1e-6),
                "{mode:?} {fd} vs {}",
                g.data[i]
            );
            let sfd = (sup - sdown) / (2.0 * h);
            assert!(
                (sfd - sg.data[i]).abs() <= 1e-3 * sfd.abs().max(1e-7),
                "{mode:?} ssim {sfd} vs {}",
                sg.data[i]
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for mode in [SsimMode::Global, SsimMode::Windowed] {
            for red in [L1Reduction::Sum, L1Reduction::Mean] {
                check_grad(mode, red);
            }
        }
    }

    #[test]
    fn total_loss_of_identical_images() {
        let x = random_image(3, 16, 16, 9);
        assert_eq!(total_loss(&x, &x, &LossConfig::default()).unwrap(), -1.0);
    }

    #[test]
    fn window_is_normalized() {
        let w = SsimParams::default().window(64, 64);
        assert_eq!(w.len(), 11);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(SsimParams::default().window(8, 9).len(), 7);
    }

    proptest::proptest! {
        #[test]
        fn ssim_in_range_and_l1_is_a_metric(seed in 0u64..10_000) {
            let x = random_image(3, 12, 12, seed);
            let y = random_image(3, 12, 12, seed + 1);
            for mode in [SsimMode::Global, SsimMode::Windowed] {
                let s = ssim(&x, &y, &params(mode)).unwrap();
                proptest::prop_assert!((-1.0..=1.0).contains(&s));
            }
            let d = l1_loss(&x, &y).unwrap();
            proptest::prop_assert!(d > 0.0);
            proptest::prop_assert_eq!(d, l1_loss(&y, &x).unwrap());
        }
    }
}
