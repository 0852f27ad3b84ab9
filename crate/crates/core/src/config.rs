//! Flat `key=value` configuration covering every tunable of the pipeline.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::anomaly::ImageScoreMode;
use crate::attention::{AttentionConfig, MaskMode};
use crate::encoder::{AttentionResidual, EncoderConfig, NormPlacement, QuerySource};
use crate::error::{Error, Result};
use crate::losses::{L1Reduction, LossConfig, SsimMode, SsimParams};
use crate::model::ShapeCombo;
use crate::nn::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Adam => "adam",
            Self::Sgd => "sgd",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetalConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub combo: ShapeCombo,
    pub mask_mode: MaskMode,
    pub attention_residual: AttentionResidual,
    pub norm_placement: NormPlacement,
    pub query_source: QuerySource,
    pub ffn_hidden: usize,
    pub decoder_hidden: usize,
    pub decoder_hidden_layers: usize,
    pub patch_embed_hidden_layers: usize,
    pub activation: Activation,
    pub ssim_mode: SsimMode,
    pub l1_reduction: L1Reduction,
    pub sigma: f64,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub early_stop_start_epoch: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub fpr_cap: f64,
    pub image_score_mode: ImageScoreMode,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Normal images used for training by the labeled-folder loader.
    pub train_normals: usize,
}

impl Default for MetalConfig {
    fn default() -> Self {
        Self {
            image_side: 128,
            patch_side: 16,
            channels: 3,
            embed_dim: 128,
            num_heads: 4,
            num_blocks: 1,
            combo: ShapeCombo::SquaresRows,
            mask_mode: MaskMode::NegInf,
            attention_residual: AttentionResidual::Standard,
            norm_placement: NormPlacement::PreNorm,
            query_source: QuerySource::Tokens,
            ffn_hidden: 512,
            decoder_hidden: 512,
            decoder_hidden_layers: 2,
            patch_embed_hidden_layers: 1,
            activation: Activation::Gelu,
            ssim_mode: SsimMode::Windowed,
            l1_reduction: L1Reduction::Sum,
            sigma: 4.0,
            lr: 1e-4,
            batch: 64,
            max_epochs: 3000,
            early_stop_start_epoch: 500,
            patience: 50,
            val_fraction: 0.10,
            seed: 0,
            fpr_cap: 0.3,
            image_score_mode: ImageScoreMode::Max,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            grad_clip: 0.0,
            train_normals: 80,
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl MetalConfig {
    pub const KEYS: [&'static str; 32] = [
        "image_side",
        "patch_side",
        "channels",
        "embed_dim",
        "num_heads",
        "num_blocks",
        "combo",
        "mask_mode",
        "attention_residual",
        "norm_placement",
        "query_source",
        "ffn_hidden",
        "decoder_hidden",
        "decoder_hidden_layers",
        "patch_embed_hidden_layers",
        "activation",
        "ssim_mode",
        "l1_reduction",
        "sigma",
        "lr",
        "batch",
        "max_epochs",
        "early_stop_start_epoch",
        "patience",
        "val_fraction",
        "seed",
        "fpr_cap",
        "image_score_mode",
        "optimizer",
        "weight_decay",
        "grad_clip",
        "train_normals",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "image_side" => self.image_side = num(key, v)?,
            "patch_side" => self.patch_side = num(key, v)?,
            "channels" => self.channels = num(key, v)?,
            "embed_dim" => self.embed_dim = num(key, v)?,
            "num_heads" => self.num_heads = num(key, v)?,
            "num_blocks" => self.num_blocks = num(key, v)?,
            "combo" => self.combo = ShapeCombo::parse(v)?,
            "mask_mode" => self.mask_mode = MaskMode::parse(v)?,
            "attention_residual" => self.attention_residual = AttentionResidual::parse(v)?,
            "norm_placement" => self.norm_placement = NormPlacement::parse(v)?,
            "query_source" => self.query_source = QuerySource::parse(v)?,
            "ffn_hidden" => self.ffn_hidden = num(key, v)?,
            "decoder_hidden" => self.decoder_hidden = num(key, v)?,
            "decoder_hidden_layers" => self.decoder_hidden_layers = num(key, v)?,
            "patch_embed_hidden_layers" => self.patch_embed_hidden_layers = num(key, v)?,
            "activation" => self.activation = Activation::parse(v)?,
            "ssim_mode" => self.ssim_mode = SsimMode::parse(v)?,
            "l1_reduction" => self.l1_reduction = L1Reduction::parse(v)?,
            "sigma" => self.sigma = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "max_epochs" => self.max_epochs = num(key, v)?,
            "early_stop_start_epoch" => self.early_stop_start_epoch = num(key, v)?,
            "patience" => self.patience = num(key, v)?,
            "val_fraction" => self.val_fraction = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "fpr_cap" => self.fpr_cap = num(key, v)?,
            "image_score_mode" => self.image_score_mode = ImageScoreMode::parse(v)?,
            "optimizer" => self.optimizer = OptimizerKind::parse(v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "grad_clip" => self.grad_clip = num(key, v)?,
            "train_normals" => self.train_normals = num(key, v)?,
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "image_side" => self.image_side.to_string(),
            "patch_side" => self.patch_side.to_string(),
            "channels" => self.channels.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "num_heads" => self.num_heads.to_string(),
            "num_blocks" => self.num_blocks.to_string(),
            "combo" => self.combo.as_str().into(),
            "mask_mode" => self.mask_mode.as_str().into(),
            "attention_residual" => self.attention_residual.as_str().into(),
            "norm_placement" => self.norm_placement.as_str().into(),
            "query_source" => self.query_source.as_str().into(),
            "ffn_hidden" => self.ffn_hidden.to_string(),
            "decoder_hidden" => self.decoder_hidden.to_string(),
            "decoder_hidden_layers" => self.decoder_hidden_layers.to_string(),
            "patch_embed_hidden_layers" => self.patch_embed_hidden_layers.to_string(),
            "activation" => self.activation.as_str().into(),
            "ssim_mode" => self.ssim_mode.as_str().into(),
            "l1_reduction" => self.l1_reduction.as_str().into(),
            "sigma" => self.sigma.to_string(),
            "lr" => self.lr.to_string(),
            "batch" => self.batch.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "early_stop_start_epoch" => self.early_stop_start_epoch.to_string(),
            "patience" => self.patience.to_string(),
            "val_fraction" => self.val_fraction.to_string(),
            "seed" => self.seed.to_string(),
            "fpr_cap" => self.fpr_cap.to_string(),
            "image_score_mode" => self.image_score_mode.as_str().into(),
            "optimizer" => self.optimizer.as_str().into(),
            "weight_decay" => self.weight_decay.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "train_normals" => self.train_normals.to_string(),
            other => return Err(Error::UnknownKey(other.to_string())),
        })
    }

    /// Parses `key=value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Every key in canonical order, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            writeln!(out, "{key}={}", self.get(key).expect("known key")).expect("string write");
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_side == 0 || self.image_side == 0 || !self.image_side.is_multiple_of(self.patch_side) {
            return bad(format!(
                "image_side {} must be a positive multiple of patch_side {}",
                self.image_side, self.patch_side
            ));
        }
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        let p = self.segments();
        if self.combo.has_stripes() && !self.embed_dim.is_multiple_of(p) {
            return bad(format!("embed_dim {} must be divisible by p = {p}", self.embed_dim));
        }
        self.attention_config().validate()?;
        self.encoder_config().validate(self.embed_dim)?;
        if self.decoder_hidden == 0 {
            return bad("decoder_hidden must be positive".into());
        }
        if self.sigma.is_nan() || self.sigma < 0.0 {
            return bad(format!("sigma must be non-negative, got {}", self.sigma));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.early_stop_start_epoch > self.max_epochs {
            return bad("early_stop_start_epoch exceeds max_epochs".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        if !(self.fpr_cap > 0.0 && self.fpr_cap <= 1.0) {
            return bad(format!("fpr_cap must lie in (0, 1], got {}", self.fpr_cap));
        }
        if self.weight_decay.is_nan() || self.grad_clip.is_nan() || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("weight_decay and grad_clip must be non-negative".into());
        }
        Ok(())
    }

    /// Segments per stripe, `p = N / K`.
    pub fn segments(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            mask_mode: self.mask_mode,
            diag_masked: self.combo.diag_masked(),
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            num_blocks: self.num_blocks,
            ffn_hidden: self.ffn_hidden,
            norm_placement: self.norm_placement,
            attention_residual: self.attention_residual,
            query_source: self.query_source,
            activation: self.activation,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            ssim: SsimParams {
                mode: self.ssim_mode,
                ..SsimParams::default()
            },
            l1_reduction: self.l1_reduction,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = MetalConfig::default();
        cfg.validate().unwrap();
        assert_eq!(MetalConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.to_text().lines().count(), MetalConfig::KEYS.len());
    }

    #[test]
    fn hyperparameter_defaults() {
        let c = MetalConfig::default();
        assert_eq!(
            (c.image_side, c.patch_side, c.embed_dim, c.num_heads),
            (128, 16, 128, 4)
        );
        assert_eq!(
            (c.batch, c.max_epochs, c.early_stop_start_epoch, c.patience),
            (64, 3000, 500, 50)
        );
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.fpr_cap, 0.3);
        assert_eq!(c.val_fraction, 0.10);
    }

    #[test]
    fn unknown_key_is_named() {
        match MetalConfig::parse("embed_dim=64\nbogus_key=3\n") {
            Err(Error::UnknownKey(k)) => assert_eq!(k, "bogus_key"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overrides_and_comments() {
        let cfg =
            MetalConfig::parse("# tiny\n\nimage_side = 64\npatch_side=8\ncombo=squares_only\nembed_dim=64\n").unwrap();
        assert_eq!(cfg.image_side, 64);
        assert_eq!(cfg.combo, ShapeCombo::SquaresOnly);
        assert_eq!(cfg.segments(), 8);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(MetalConfig::parse("patch_side=15").is_err());
        assert!(MetalConfig::parse("embed_dim=abc").is_err());
        assert!(MetalConfig::parse("num_heads=3").is_err());
        assert!(MetalConfig::parse("val_fraction=1.0").is_err());
        assert!(MetalConfig::parse("patience=0").is_err());
        assert!(MetalConfig::parse("no_equals_sign").is_err());
        assert!(MetalConfig::parse("embed_dim=100\nnum_heads=4").is_err());
    }
}
