//! Central finite-difference checks of every hand-written backward pass.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{AttentionConfig, MultiHeadAttention};
use crate::config::MetalConfig;
use crate::error::Result;
use crate::losses::{total_loss, total_loss_with_grad, L1Reduction, LossConfig, SsimMode, SsimParams};
use crate::model::{MetalModel, ShapeCombo};
use crate::nn::{Activation, Grads, Initializer, LayerNorm, Linear, Mlp, OutputActivation, ParamId, ParamStore};
use crate::patching::ImageTensor;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-3;
/// Absolute slack per unit of objective magnitude, covering the roundoff of
/// a central difference at [`STEP`].
pub const ROUNDOFF_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub failures: usize,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|)` among
    /// entries whose relative tolerance exceeds the roundoff floor.
    pub max_rel_error: f64,
    pub worst: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

/// Compares analytic and numeric values with a relative tolerance and an
/// absolute floor proportional to `scale`.
#[derive(Debug, Clone)]
struct Tally {
    name: String,
    floor: f64,
    checked: usize,
    failures: usize,
    max_rel: f64,
    worst: String,
}

impl Tally {
    fn new(name: impl Into<String>, scale: f64) -> Self {
        Self {
            name: name.into(),
            floor: ROUNDOFF_FLOOR * scale.abs().max(1.0),
            checked: 0,
            failures: 0,
            max_rel: 0.0,
            worst: String::new(),
        }
    }

    fn add(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let diff = (analytic - numeric).abs();
        let mag = analytic.abs().max(numeric.abs());
        if diff > REL_TOL * mag + self.floor || !diff.is_finite() {
            self.failures += 1;
        }
        if REL_TOL * mag > self.floor {
            let rel = diff / mag;
            if rel > self.max_rel || rel.is_nan() {
                self.max_rel = rel;
                self.worst = format!("{}: analytic {analytic:e}, numeric {numeric:e}", label());
            }
        }
    }

    fn merge(mut self, other: Tally) -> Self {
        self.checked += other.checked;
        self.failures += other.failures;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
        self
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            name: self.name,
            checked: self.checked,
            failures: self.failures,
            max_rel_error: self.max_rel,
            worst: self.worst,
        }
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

/// Checks parameter and input gradients of `f(store, x) · w` for a layer
/// whose backward is `back(store, grads, x, w) -> dx`.
fn check_layer<Fwd, Bwd>(
    name: &str,
    store: &ParamStore<f64>,
    x: &Array2<f64>,
    seed: u64,
    fwd: Fwd,
    back: Bwd,
) -> CheckResult
where
    Fwd: Fn(&ParamStore<f64>, &Array2<f64>) -> Array2<f64>,
    Bwd: Fn(&ParamStore<f64>, &mut Grads<f64>, &Array2<f64>, &Array2<f64>) -> Array2<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = fwd(store, x);
    let w = random_matrix(&mut rng, y.nrows(), y.ncols());
    let objective = |s: &ParamStore<f64>, x: &Array2<f64>| (&fwd(s, x) * &w).sum();
    let mut grads = Grads::zeros_like(store);
    let dx = back(store, &mut grads, x, &w);
    let mut t = Tally::new(name, objective(store, x));
    for id in store.ids() {
        for i in 0..store.get(id).len() {
            let mut s = store.clone();
            s.get_mut(id).values[i] += STEP;
            let up = objective(&s, x);
            s.get_mut(id).values[i] -= 2.0 * STEP;
            let down = objective(&s, x);
            t.add(
                || format!("{}[{i}]", store.get(id).name),
                grads.get(id)[i],
                (up - down) / (2.0 * STEP),
            );
        }
    }
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.as_slice_mut().expect("contiguous")[i] += STEP;
        let up = objective(store, &xp);
        xp.as_slice_mut().expect("contiguous")[i] -= 2.0 * STEP;
        let down = objective(store, &xp);
        t.add(
            || format!("input[{i}]"),
            dx.as_slice().expect("contiguous")[i],
            (up - down) / (2.0 * STEP),
        );
    }
    t.finish()
}

/// Linear, layer norm, MLP and masked attention.
pub fn check_primitives(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed);
    init.std = 0.5;
    let lin = Linear::new(&mut store, &mut init, "linear", 5, 4)?;
    let x = random_matrix(&mut rng, 3, 5);
    out.push(check_layer(
        "linear",
        &store,
        &x,
        seed,
        |s, x| lin.forward(s, x.view()).expect("shape"),
        |s, g, x, w| lin.backward(s, g, x.view(), w.view()),
    ));

    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 6)?;
    for p in store.iter_mut() {
        for v in &mut p.values {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    let x = random_matrix(&mut rng, 4, 6);
    out.push(check_layer(
        "layer_norm",
        &store,
        &x,
        seed,
        |s, x| ln.forward(s, x.view()).expect("shape").0,
        |s, g, x, w| {
            let (_, c) = ln.forward(s, x.view()).expect("shape");
            ln.backward(s, g, &c, w.view())
        },
    ));

    for (act, name) in [
        (Activation::Gelu, "mlp_gelu_sigmoid"),
        (Activation::Relu, "mlp_relu_sigmoid"),
    ] {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, &mut init, "mlp", &[4, 7, 3], act, OutputActivation::Sigmoid)?;
        let x = random_matrix(&mut rng, 5, 4);
        out.push(check_layer(
            name,
            &store,
            &x,
            seed,
            |s, x| mlp.forward(s, x.view()).expect("shape").0,
            |s, g, x, w| {
                let (_, c) = mlp.forward(s, x.view()).expect("shape");
                mlp.backward(s, g, &c, w.view())
            },
        ));
    }

    for (mode, name) in [
        (crate::attention::MaskMode::NegInf, "attention_neg_inf"),
        (crate::attention::MaskMode::ZeroLogit, "attention_zero_logit"),
    ] {
        let mut store = ParamStore::new();
        let cfg = AttentionConfig {
            mask_mode: mode,
            ..AttentionConfig::new(8, 2)?
        };
        let attn = MultiHeadAttention::new(&mut store, &mut init, "attn", cfg)?;
        let x = random_matrix(&mut rng, 5, 8);
        out.push(check_layer(
            name,
            &store,
            &x,
            seed,
            |s, x| attn.forward(s, x.view(), None).expect("shape").0,
            |s, g, x, w| {
                let (_, c) = attn.forward(s, x.view(), None).expect("shape");
                attn.backward(s, g, &c, w.view()).0
            },
        ));
    }
    Ok(out)
}

/// Gradient of the total loss with respect to the reconstruction, for both
/// SSIM modes and both L1 reductions.
pub fn check_losses(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 3 * 16 * 16;
    let x = ImageTensor::new(3, 16, 16, (0..n).map(|_| rng.random::<f64>()).collect())?;
    // keep |x - y| away from zero so the L1 kink is never crossed
    let y = ImageTensor::new(
        3,
        16,
        16,
        x.data
            .iter()
            .map(|&v| {
                let shifted = if v > 0.5 { v - 0.3 } else { v + 0.3 };
                shifted * rng.random_range(0.8..1.0)
            })
            .collect(),
    )?;
    let mut out = Vec::new();
    for mode in [SsimMode::Global, SsimMode::Windowed] {
        for red in [L1Reduction::Sum, L1Reduction::Mean] {
            let cfg = LossConfig {
                ssim: SsimParams {
                    mode,
                    ..SsimParams::default()
                },
                l1_reduction: red,
            };
            let (loss, g) = total_loss_with_grad(&x, &y, &cfg)?;
            let mut t = Tally::new(format!("total_loss_{}_{}", mode.as_str(), red.as_str()), loss);
            for i in 0..n {
                let mut yp = y.clone();
                yp.data[i] += STEP;
                let up = total_loss(&x, &yp, &cfg)?;
                yp.data[i] -= 2.0 * STEP;
                let down = total_loss(&x, &yp, &cfg)?;
                t.add(|| format!("y[{i}]"), g.data[i], (up - down) / (2.0 * STEP));
            }
            out.push(t.finish());
        }
    }
    Ok(out)
}

/// Input whose pixels avoid the band where an untrained decoder's sigmoid
/// output sits, so no L1 kink lies within a finite-difference step.
pub fn kink_free_image(channels: usize, side: usize, seed: u64) -> ImageTensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..channels * side * side)
        .map(|_| {
            let v: f64 = rng.random_range(0.0..0.35);
            if rng.random_bool(0.5) {
                v
            } else {
                1.0 - v
            }
        })
        .collect();
    ImageTensor::new(channels, side, side, data).expect("consistent size")
}

/// Every scalar of every parameter (or every `stride`-th) of the full
/// model loss, checked in parallel.
pub fn check_model(model: &MetalModel<f64>, img: &ImageTensor<f64>, stride: usize, name: &str) -> Result<CheckResult> {
    let (loss, grads) = model.loss_and_grad(img)?;
    let jobs: Vec<(ParamId, usize)> = model
        .params
        .ids()
        .flat_map(|id| {
            (0..model.params.get(id).len())
                .step_by(stride.max(1))
                .map(move |i| (id, i))
        })
        .collect();
    let tallies = jobs
        .par_chunks(256)
        .map(|chunk| {
            let mut m = model.clone();
            let mut t = Tally::new(name, loss);
            for &(id, i) in chunk {
                let orig = m.params.get(id).values[i];
                m.params.get_mut(id).values[i] = orig + STEP;
                let up = m.loss(img)?;
                m.params.get_mut(id).values[i] = orig - STEP;
                let down = m.loss(img)?;
                m.params.get_mut(id).values[i] = orig;
                t.add(
                    || format!("{}[{i}]", m.params.get(id).name),
                    grads.get(id)[i],
                    (up - down) / (2.0 * STEP),
                );
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(tallies.into_iter().fold(Tally::new(name, loss), Tally::merge).finish())
}

/// Small configuration used when no config is given.
pub fn tiny_config() -> MetalConfig {
    MetalConfig {
        image_side: 32,
        patch_side: 8,
        embed_dim: 16,
        num_heads: 2,
        ffn_hidden: 32,
        decoder_hidden: 32,
        combo: ShapeCombo::SquaresRowsCols,
        ..MetalConfig::default()
    }
}

/// Primitives, losses and the full model under both SSIM modes.
pub fn run_suite(cfg: &MetalConfig, stride: usize) -> Result<Vec<CheckResult>> {
    let mut results = check_primitives(cfg.seed)?;
    results.extend(check_losses(cfg.seed)?);
    for mode in [SsimMode::Global, SsimMode::Windowed] {
        let mut c = cfg.clone();
        c.ssim_mode = mode;
        let model = MetalModel::<f64>::new(&c)?;
        let img = kink_free_image(c.channels, c.image_side, c.seed.wrapping_add(1));
        results.push(check_model(&model, &img, stride, &format!("model_{}", mode.as_str()))?);
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        for r in check_primitives(0).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn losses_pass() {
        for r in check_losses(1).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn sampled_model_passes() {
        let model = MetalModel::<f64>::new(&tiny_config()).unwrap();
        let img = kink_free_image(3, 32, 2);
        let r = check_model(&model, &img, 97, "model").unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut t = Tally::new("probe", 1.0);
        t.add(|| "x".into(), 1.0, 1.1);
        assert!(!t.finish().passed());
    }
}
