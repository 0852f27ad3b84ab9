//! Self-supervised training with validation-based early stopping.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{MetalConfig, OptimizerKind};
use crate::error::{Error, Result};
use crate::model::MetalModel;
use crate::nn::{Grads, ParamStore, Real};
use crate::patching::ImageTensor;

/// Per-sample gradients are summed inside this many fixed chunks and the
/// chunk sums are then added in order, so results do not depend on the
/// thread count.
const REDUCTION_CHUNKS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub early_stop_start_epoch: usize,
    pub patience: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub val_fraction: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::from(&MetalConfig::default())
    }
}

impl From<&MetalConfig> for TrainConfig {
    fn from(c: &MetalConfig) -> Self {
        Self {
            lr: c.lr,
            batch: c.batch,
            max_epochs: c.max_epochs,
            early_stop_start_epoch: c.early_stop_start_epoch,
            patience: c.patience,
            optimizer: c.optimizer,
            seed: c.seed,
            val_fraction: c.val_fraction,
            weight_decay: c.weight_decay,
            grad_clip: c.grad_clip,
        }
    }
}

impl TrainConfig {
    pub fn stop_rule(&self) -> StopRule {
        StopRule {
            max_epochs: self.max_epochs,
            start_epoch: self.early_stop_start_epoch,
            patience: self.patience,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopRule {
    pub max_epochs: usize,
    pub start_epoch: usize,
    pub patience: usize,
}

/// Tracks the best validation loss. Epochs are numbered from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub rule: StopRule,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(rule: StopRule) -> Self {
        Self {
            rule,
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
        }
    }

    /// Records the validation loss of `epoch`. Returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, val_loss: f64) -> (bool, bool) {
        let improved = val_loss < self.best_val_loss;
        if improved {
            self.best_val_loss = val_loss;
            self.best_epoch = epoch;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        let patience_out = epoch > self.rule.start_epoch && self.epochs_since_improvement >= self.rule.patience;
        (improved, patience_out || epoch >= self.rule.max_epochs)
    }
}

/// Epoch at which training on this validation-loss sequence stops, or the
/// sequence length if it runs out first.
pub fn stop_epoch(val_losses: &[f64], rule: StopRule) -> usize {
    let mut es = EarlyStopping::new(rule);
    for (i, &v) in val_losses.iter().enumerate() {
        if es.update(i + 1, v).1 {
            return i + 1;
        }
    }
    val_losses.len()
}

#[derive(Debug, Clone)]
enum Optimizer<F> {
    Adam { m: Grads<F>, v: Grads<F>, t: i32 },
    Sgd,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<F: Real> Optimizer<F> {
    fn new(kind: OptimizerKind, params: &ParamStore<F>) -> Self {
        match kind {
            OptimizerKind::Adam => Self::Adam {
                m: Grads::zeros_like(params),
                v: Grads::zeros_like(params),
                t: 0,
            },
            OptimizerKind::Sgd => Self::Sgd,
        }
    }

    fn step(&mut self, params: &mut ParamStore<F>, grads: &Grads<F>, lr: f64, weight_decay: f64) {
        let wd = F::of(weight_decay);
        match self {
            Self::Adam { m, v, t } => {
                *t += 1;
                let bc1 = 1.0 - BETA1.powi(*t);
                let bc2 = 1.0 - BETA2.powi(*t);
                let (b1, b2) = (F::of(BETA1), F::of(BETA2));
                let step = F::of(lr * bc2.sqrt() / bc1);
                let eps = F::of(ADAM_EPS * bc2.sqrt());
                for id in params.ids().collect::<Vec<_>>() {
                    let g = grads.get(id);
                    let (mi, vi) = (m.get_mut(id), v.get_mut(id));
                    let p = &mut params.get_mut(id).values;
                    for k in 0..p.len() {
                        let gk = g[k] + wd * p[k];
                        mi[k] = b1 * mi[k] + (F::one() - b1) * gk;
                        vi[k] = b2 * vi[k] + (F::one() - b2) * gk * gk;
                        p[k] -= step * mi[k] / (vi[k].sqrt() + eps);
                    }
                }
            }
            Self::Sgd => {
                let lr = F::of(lr);
                for id in params.ids().collect::<Vec<_>>() {
                    let g = grads.get(id);
                    let p = &mut params.get_mut(id).values;
                    for (pk, &gk) in p.iter_mut().zip(g) {
                        *pk -= lr * (gk + wd * *pk);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F: Real> {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: MetalModel<F>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_epoch: usize,
}

/// Mean loss and mean gradient over `batch`.
pub fn batch_loss_and_grad<F: Real>(model: &MetalModel<F>, batch: &[&ImageTensor<F>]) -> Result<(f64, Grads<F>)> {
    let chunk = batch.len().div_ceil(REDUCTION_CHUNKS).max(1);
    let partials = batch
        .par_chunks(chunk)
        .map(|samples| {
            let mut acc = Grads::zeros_like(&model.params);
            let mut loss = 0.0;
            for img in samples {
                let (l, g) = model.loss_and_grad(img)?;
                loss += l.as_f64();
                acc.add_assign(&g);
            }
            Ok((loss, acc))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut parts = partials.into_iter();
    let (mut loss, mut grads) = parts.next().expect("non-empty batch");
    for (l, g) in parts {
        loss += l;
        grads.add_assign(&g);
    }
    let n = batch.len() as f64;
    grads.scale(F::of(1.0 / n));
    Ok((loss / n, grads))
}

/// Mean loss over `images`, summed in order.
pub fn mean_loss<F: Real>(model: &MetalModel<F>, images: &[ImageTensor<F>]) -> Result<f64> {
    let losses = images
        .par_iter()
        .map(|img| model.loss(img).map(|l| l.as_f64()))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / images.len() as f64)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where to write the current parameters if training diverges.
    pub dump_dir: Option<PathBuf>,
}

pub fn train<F: Real>(
    mut model: MetalModel<F>,
    train_set: &[ImageTensor<F>],
    val_set: &[ImageTensor<F>],
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome<F>> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Split(format!(
            "training needs non-empty sets, got {} train / {} validation",
            train_set.len(),
            val_set.len()
        )));
    }
    if cfg.batch == 0 || cfg.patience == 0 || cfg.max_epochs == 0 {
        return Err(Error::Config("batch, patience and max_epochs must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, &model.params);
    let mut stopper = EarlyStopping::new(cfg.stop_rule());
    let mut best = model.params.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopped_epoch = cfg.max_epochs;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch) {
            let batch: Vec<&ImageTensor<F>> = idx.iter().map(|&i| &train_set[i]).collect();
            let (loss, mut grads) = batch_loss_and_grad(&model, &batch)?;
            if !loss.is_finite() {
                return Err(diverged(&model, epoch, loss, opts));
            }
            if cfg.grad_clip > 0.0 {
                let norm = grads.l2_norm();
                if norm > cfg.grad_clip {
                    grads.scale(F::of(cfg.grad_clip / norm));
                }
            }
            opt.step(&mut model.params, &grads, cfg.lr, cfg.weight_decay);
            loss_sum += loss * idx.len() as f64;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let val_loss = mean_loss(&model, val_set)?;
        if !val_loss.is_finite() {
            return Err(diverged(&model, epoch, val_loss, opts));
        }
        let (improved, stop) = stopper.update(epoch, val_loss);
        if improved {
            best.clone_from(&model.params);
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: cfg.lr,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        if stop {
            stopped_epoch = epoch;
            break;
        }
    }
    log::info!(
        "stopped at epoch {stopped_epoch}; best validation loss {:.6} at epoch {}",
        stopper.best_val_loss,
        stopper.best_epoch
    );
    model.params = best;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best_val_loss,
        stopped_epoch,
    })
}

fn diverged<F: Real>(model: &MetalModel<F>, epoch: usize, loss: f64, opts: &TrainOptions) -> Error {
    let dump = opts.dump_dir.as_ref().and_then(|dir| {
        let path = dir.join(format!("diverged_epoch{epoch}.ckpt"));
        match model.save(&path) {
            Ok(()) => Some(path),
            Err(e) => {
                log::error!("could not write divergence dump: {e}");
                None
            }
        }
    });
    Error::Divergence { epoch, loss, dump }
}

pub const HISTORY_COLUMNS: [&str; 5] = ["epoch", "train_loss", "val_loss", "lr", "seconds"];

pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HISTORY_COLUMNS)?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            format!("{:.9}", r.train_loss),
            format!("{:.9}", r.val_loss),
            r.lr.to_string(),
            format!("{:.3}", r.seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ShapeCombo;
    use rand::Rng;

    fn rule() -> StopRule {
        StopRule {
            max_epochs: 3000,
            start_epoch: 500,
            patience: 50,
        }
    }

    fn losses_with_last_improvement(at: usize, len: usize) -> Vec<f64> {
        (1..=len).map(|e| if e <= at { 1.0 / e as f64 } else { 1.0 }).collect()
    }

    #[test]
    fn plateau_after_600_stops_at_650() {
        assert_eq!(stop_epoch(&losses_with_last_improvement(600, 3000), rule()), 650);
    }

    #[test]
    fn early_plateau_waits_for_start_epoch() {
        assert_eq!(stop_epoch(&losses_with_last_improvement(100, 3000), rule()), 501);
        assert_eq!(stop_epoch(&losses_with_last_improvement(460, 3000), rule()), 510);
    }

    #[test]
    fn continuous_improvement_runs_to_max() {
        let v: Vec<f64> = (1..=3000).map(|e| 1.0 / e as f64).collect();
        assert_eq!(stop_epoch(&v, rule()), 3000);
    }

    #[test]
    fn equal_loss_is_not_improvement() {
        let mut es = EarlyStopping::new(rule());
        assert!(es.update(1, 0.5).0);
        assert!(!es.update(2, 0.5).0);
        assert_eq!(es.epochs_since_improvement, 1);
    }

    proptest::proptest! {
        #[test]
        fn best_val_loss_never_increases(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut es = EarlyStopping::new(StopRule { max_epochs: 200, start_epoch: 20, patience: 5 });
            let mut prev = f64::INFINITY;
            for e in 1..=200 {
                es.update(e, rng.random());
                proptest::prop_assert!(es.best_val_loss <= prev);
                prev = es.best_val_loss;
            }
        }
    }

    fn tiny_cfg() -> MetalConfig {
        MetalConfig {
            image_side: 16,
            patch_side: 4,
            embed_dim: 8,
            num_heads: 2,
            ffn_hidden: 16,
            decoder_hidden: 16,
            combo: ShapeCombo::SquaresRows,
            lr: 1e-3,
            batch: 2,
            ..MetalConfig::default()
        }
    }

    fn images(n: usize, seed: u64) -> Vec<ImageTensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| ImageTensor::new(3, 16, 16, (0..768).map(|_| rng.random()).collect()).unwrap())
            .collect()
    }

    #[test]
    fn single_image_overfits() {
        let cfg = tiny_cfg();
        let img = images(1, 0);
        let model = MetalModel::<f32>::new(&cfg).unwrap();
        let initial = model.loss(&img[0]).unwrap() as f64;
        let tc = TrainConfig {
            max_epochs: 200,
            early_stop_start_epoch: 200,
            ..TrainConfig::from(&cfg)
        };
        let out = train(model, &img, &img, &tc, &TrainOptions::default()).unwrap();
        assert_eq!(out.history.len(), 200);
        assert!(out.history.last().unwrap().train_loss < initial);
        assert!(out.best_val_loss < initial);
    }

    #[test]
    fn fixed_seed_history_is_reproducible() {
        let cfg = tiny_cfg();
        let data = images(5, 1);
        let tc = TrainConfig {
            max_epochs: 4,
            early_stop_start_epoch: 4,
            ..TrainConfig::from(&cfg)
        };
        let run = || {
            let out = train(
                MetalModel::<f32>::new(&cfg).unwrap(),
                &data[..4],
                &data[4..],
                &tc,
                &TrainOptions::default(),
            )
            .unwrap();
            out.history
                .iter()
                .map(|r| (r.train_loss.to_bits(), r.val_loss.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn returns_best_validation_parameters() {
        let cfg = tiny_cfg();
        let data = images(4, 2);
        let tc = TrainConfig {
            max_epochs: 6,
            early_stop_start_epoch: 6,
            lr: 0.05,
            ..TrainConfig::from(&cfg)
        };
        let out = train(
            MetalModel::<f32>::new(&cfg).unwrap(),
            &data[..3],
            &data[3..],
            &tc,
            &TrainOptions::default(),
        )
        .unwrap();
        let val = mean_loss(&out.model, &data[3..]).unwrap();
        assert_eq!(val.to_bits(), out.best_val_loss.to_bits());
        let min = out.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(min, out.best_val_loss);
    }

    #[test]
    fn divergence_is_reported_with_dump() {
        let cfg = tiny_cfg();
        let mut data = images(2, 3);
        data[0].data[0] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            dump_dir: Some(dir.path().to_path_buf()),
        };
        match train(
            MetalModel::<f32>::new(&cfg).unwrap(),
            &data,
            &data,
            &TrainConfig::from(&cfg),
            &opts,
        ) {
            Err(Error::Divergence {
                epoch, dump: Some(p), ..
            }) => {
                assert_eq!(epoch, 1);
                assert!(p.exists());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn batch_gradient_is_the_mean_of_sample_gradients() {
        let cfg = tiny_cfg();
        let model = MetalModel::<f64>::new(&cfg).unwrap();
        let data: Vec<ImageTensor<f64>> = images(11, 4).iter().map(|i| i.cast()).collect();
        let refs: Vec<&ImageTensor<f64>> = data.iter().collect();
        let (loss, g) = batch_loss_and_grad(&model, &refs).unwrap();
        let mut acc = Grads::zeros_like(&model.params);
        let mut total = 0.0;
        for img in &data {
            let (l, gi) = model.loss_and_grad(img).unwrap();
            total += l;
            acc.add_assign(&gi);
        }
        acc.scale(1.0 / 11.0);
        assert!((loss - total / 11.0).abs() < 1e-9);
        for (a, b) in g.iter().zip(acc.iter()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn history_csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        let rec = EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            val_loss: 0.25,
            lr: 1e-4,
            seconds: 0.1,
        };
        write_history_csv(&p, &[rec]).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text.lines().next().unwrap(), "epoch,train_loss,val_loss,lr,seconds");
    }
}
