//! The full network: one branch per patch shape, containment-aligned
//! concatenation of stripe segments, and a shared per-patch decoder.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2};

use crate::attention::AttentionWeights;
use crate::config::MetalConfig;
use crate::encoder::{Encoder, EncoderCache};
use crate::error::{Error, Result};
use crate::losses::total_loss_with_grad;
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{Grads, Initializer, Mlp, MlpCache, OutputActivation, ParamId, ParamStore, Real};
use crate::patching::{
    build_containment, extract_tokens, reassemble, ContainmentMap, ImageTensor, PatchShape, ShapeKind, TokenSequence,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeCombo {
    SquaresOnlyNoMask,
    SquaresOnly,
    SquaresRows,
    SquaresCols,
    RowsCols,
    SquaresRowsCols,
}

impl ShapeCombo {
    pub const ALL: [ShapeCombo; 6] = [
        Self::SquaresOnlyNoMask,
        Self::SquaresOnly,
        Self::SquaresRows,
        Self::SquaresCols,
        Self::RowsCols,
        Self::SquaresRowsCols,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown combo `{s}`")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SquaresOnlyNoMask => "squares_only_no_mask",
            Self::SquaresOnly => "squares_only",
            Self::SquaresRows => "squares_rows",
            Self::SquaresCols => "squares_cols",
            Self::RowsCols => "rows_cols",
            Self::SquaresRowsCols => "squares_rows_cols",
        }
    }

    /// Branches in concatenation order.
    pub fn kinds(self) -> Vec<ShapeKind> {
        use ShapeKind::*;
        match self {
            Self::SquaresOnlyNoMask | Self::SquaresOnly => vec![Square],
            Self::SquaresRows => vec![Square, RowStripe],
            Self::SquaresCols => vec![Square, ColStripe],
            Self::RowsCols => vec![RowStripe, ColStripe],
            Self::SquaresRowsCols => vec![Square, RowStripe, ColStripe],
        }
    }

    pub fn has_squares(self) -> bool {
        self.kinds().contains(&ShapeKind::Square)
    }

    pub fn has_stripes(self) -> bool {
        self.stripe_branches() > 0
    }

    pub fn stripe_branches(self) -> usize {
        self.kinds().iter().filter(|k| **k != ShapeKind::Square).count()
    }

    pub fn diag_masked(self) -> bool {
        self != Self::SquaresOnlyNoMask
    }
}

/// Per-square decoder input width: `d` for the square embedding (if any)
/// plus `d / p` per stripe branch.
pub fn decoder_input_len(combo: ShapeCombo, embed_dim: usize, segments: usize) -> usize {
    let sq = if combo.has_squares() { embed_dim } else { 0 };
    sq + combo.stripe_branches() * (embed_dim / segments)
}

/// Builds the `n_squares × decoder_input_len` matrix. Square `s` receives
/// its own square embedding, then segment `row_offset(s)` of the row stripe
/// containing it, then segment `col_offset(s)` of its column stripe.
pub fn assemble_decoder_input<F: Real>(
    containment: &ContainmentMap,
    squares: Option<ArrayView2<'_, F>>,
    rows: Option<ArrayView2<'_, F>>,
    cols: Option<ArrayView2<'_, F>>,
) -> Result<Array2<F>> {
    let p = containment.per_stripe;
    let n = containment.len();
    let d = squares
        .as_ref()
        .or(rows.as_ref())
        .or(cols.as_ref())
        .map(|m| m.ncols())
        .ok_or_else(|| Error::Config("no branch embeddings given".into()))?;
    if d % p != 0 {
        return Err(Error::Dimension(format!(
            "embedding width {d} not divisible by {p} segments"
        )));
    }
    let seg = d / p;
    if let Some(sq) = &squares {
        if sq.dim() != (n, d) {
            return Err(Error::Dimension(format!(
                "square embeddings {:?}, expected ({n}, {d})",
                sq.dim()
            )));
        }
    }
    for m in [&rows, &cols].into_iter().flatten() {
        if m.dim() != (p, d) {
            return Err(Error::Dimension(format!(
                "stripe embeddings {:?}, expected ({p}, {d})",
                m.dim()
            )));
        }
    }
    let width = squares.as_ref().map_or(0, |_| d) + [&rows, &cols].iter().filter(|m| m.is_some()).count() * seg;
    let mut out = Array2::zeros((n, width));
    for (s_idx, e) in containment.entries.iter().enumerate() {
        let mut at = 0;
        if let Some(sq) = &squares {
            out.slice_mut(s![s_idx, 0..d]).assign(&sq.row(s_idx));
            at = d;
        }
        if let Some(r) = &rows {
            let o = e.row_offset * seg;
            out.slice_mut(s![s_idx, at..at + seg])
                .assign(&r.slice(s![e.row_stripe, o..o + seg]));
            at += seg;
        }
        if let Some(c) = &cols {
            let o = e.col_offset * seg;
            out.slice_mut(s![s_idx, at..at + seg])
                .assign(&c.slice(s![e.col_stripe, o..o + seg]));
        }
    }
    Ok(out)
}

/// Adjoint of [`assemble_decoder_input`]: routes decoder-input gradients back
/// to `(squares, rows, cols)` embedding gradients.
#[allow(clippy::type_complexity)]
pub fn scatter_decoder_grad<F: Real>(
    containment: &ContainmentMap,
    d: usize,
    has_squares: bool,
    has_rows: bool,
    has_cols: bool,
    grad: ArrayView2<'_, F>,
) -> (Option<Array2<F>>, Option<Array2<F>>, Option<Array2<F>>) {
    let p = containment.per_stripe;
    let seg = d / p;
    let mut dsq = has_squares.then(|| Array2::zeros((containment.len(), d)));
    let mut drows = has_rows.then(|| Array2::zeros((p, d)));
    let mut dcols = has_cols.then(|| Array2::zeros((p, d)));
    for (s_idx, e) in containment.entries.iter().enumerate() {
        let mut at = 0;
        if let Some(m) = dsq.as_mut() {
            m.row_mut(s_idx).assign(&grad.slice(s![s_idx, 0..d]));
            at = d;
        }
        if let Some(m) = drows.as_mut() {
            let o = e.row_offset * seg;
            let mut dst = m.slice_mut(s![e.row_stripe, o..o + seg]);
            dst += &grad.slice(s![s_idx, at..at + seg]);
            at += seg;
        }
        if let Some(m) = dcols.as_mut() {
            let o = e.col_offset * seg;
            let mut dst = m.slice_mut(s![e.col_stripe, o..o + seg]);
            dst += &grad.slice(s![s_idx, at..at + seg]);
        }
    }
    (dsq, drows, dcols)
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub kind: ShapeKind,
    pub shape: PatchShape,
    pub patch_embed: Mlp,
    pub pos_embed: ParamId,
    pub encoder: Encoder,
}

#[derive(Debug, Clone)]
struct BranchCache<F> {
    embed: MlpCache<F>,
    encoder: EncoderCache<F>,
    encoded: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    branches: Vec<BranchCache<F>>,
    decoder: MlpCache<F>,
}

#[derive(Debug, Clone)]
pub struct BranchAttention<F> {
    pub kind: ShapeKind,
    /// One entry per encoder block.
    pub blocks: Vec<AttentionWeights<F>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<F> {
    pub reconstruction: ImageTensor<F>,
    pub attention: Vec<BranchAttention<F>>,
}

#[derive(Debug, Clone)]
pub struct MetalModel<F = f32> {
    pub cfg: MetalConfig,
    pub params: ParamStore<F>,
    pub branches: Vec<Branch>,
    pub decoder: Mlp,
    pub containment: ContainmentMap,
}

impl<F: Real> MetalModel<F> {
    /// Fresh model with weights drawn from `cfg.seed`.
    pub fn new(cfg: &MetalConfig) -> Result<Self> {
        Self::with_seed(cfg, cfg.seed)
    }

    pub fn with_seed(cfg: &MetalConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut init = Initializer::new(seed);
        let (n, k, c, d) = (cfg.image_side, cfg.patch_side, cfg.channels, cfg.embed_dim);
        let mut branches = Vec::new();
        for kind in cfg.combo.kinds() {
            let shape = PatchShape::for_kind(kind, n, k);
            let (gr, gc) = shape.grid(n, n)?;
            let name = kind.branch_name();
            let mut dims = vec![shape.token_len(c)];
            dims.extend(std::iter::repeat_n(d, cfg.patch_embed_hidden_layers + 1));
            let patch_embed = Mlp::new(
                &mut params,
                &mut init,
                &format!("{name}.patch_embed"),
                &dims,
                cfg.activation,
                OutputActivation::Identity,
            )?;
            let table = init.trunc_normal::<F>(gr * gc * d);
            let pos_embed = params.add(format!("{name}.pos_embed"), vec![gr * gc, d], table)?;
            let encoder = Encoder::new(
                &mut params,
                &mut init,
                name,
                cfg.encoder_config(),
                cfg.attention_config(),
            )?;
            branches.push(Branch {
                kind,
                shape,
                patch_embed,
                pos_embed,
                encoder,
            });
        }
        let mut dims = vec![decoder_input_len(cfg.combo, d, cfg.segments())];
        dims.extend(std::iter::repeat_n(cfg.decoder_hidden, cfg.decoder_hidden_layers));
        dims.push(c * k * k);
        let decoder = Mlp::new(
            &mut params,
            &mut init,
            "decoder",
            &dims,
            cfg.activation,
            OutputActivation::Sigmoid,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            branches,
            decoder,
            containment: build_containment(n, k)?,
        })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<G: Real>(&self) -> MetalModel<G> {
        MetalModel {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            branches: self.branches.clone(),
            decoder: self.decoder.clone(),
            containment: self.containment.clone(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn decoder_input_len(&self) -> usize {
        self.decoder.in_dim()
    }

    fn check_input(&self, img: &ImageTensor<F>) -> Result<()> {
        let n = self.cfg.image_side;
        if img.channels != self.cfg.channels || img.height != n || img.width != n {
            return Err(Error::ShapeMismatch(format!(
                "model expects {}x{n}x{n}, got {}x{}x{}",
                self.cfg.channels, img.channels, img.height, img.width
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, img: &ImageTensor<F>) -> Result<(ImageTensor<F>, ForwardCache<F>)> {
        self.check_input(img)?;
        let mut caches = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let tokens = extract_tokens(img, b.shape)?;
            let (e, embed) = b.patch_embed.forward(&self.params, tokens.tokens.view())?;
            let pos = self.params.matrix(b.pos_embed);
            let z = e + pos;
            let (encoded, encoder) = b.encoder.forward(&self.params, z.view(), Some(pos))?;
            caches.push(BranchCache {
                embed,
                encoder,
                encoded,
            });
        }
        let pick = |kind: ShapeKind| {
            self.branches
                .iter()
                .zip(&caches)
                .find(|(b, _)| b.kind == kind)
                .map(|(_, c)| c.encoded.view())
        };
        let dec_in = assemble_decoder_input(
            &self.containment,
            pick(ShapeKind::Square),
            pick(ShapeKind::RowStripe),
            pick(ShapeKind::ColStripe),
        )?;
        let (out, decoder) = self.decoder.forward(&self.params, dec_in.view())?;
        let seq = TokenSequence::from_tokens(
            PatchShape::square(self.cfg.patch_side),
            img.channels,
            img.height,
            img.width,
            out,
        )?;
        Ok((
            reassemble(&seq)?,
            ForwardCache {
                branches: caches,
                decoder,
            },
        ))
    }

    pub fn forward(&self, img: &ImageTensor<F>) -> Result<ForwardOutput<F>> {
        let (reconstruction, cache) = self.forward_cached(img)?;
        let attention = self
            .branches
            .iter()
            .zip(&cache.branches)
            .map(|(b, c)| BranchAttention {
                kind: b.kind,
                blocks: c.encoder.attention_weights(),
            })
            .collect();
        Ok(ForwardOutput {
            reconstruction,
            attention,
        })
    }

    /// Inference entry point: the reconstruction, decoded square by square.
    pub fn reconstruct_patchwise(&self, img: &ImageTensor<F>) -> Result<ImageTensor<F>> {
        Ok(self.forward_cached(img)?.0)
    }

    pub fn reconstruct_batch(&self, imgs: &[ImageTensor<F>]) -> Result<Vec<ImageTensor<F>>> {
        use rayon::prelude::*;
        imgs.par_iter().map(|img| self.reconstruct_patchwise(img)).collect()
    }

    /// Loss of reconstructing `img` and its gradient for every parameter.
    pub fn loss_and_grad(&self, img: &ImageTensor<F>) -> Result<(F, Grads<F>)> {
        let (recon, cache) = self.forward_cached(img)?;
        let (loss, drecon) = total_loss_with_grad(img, &recon, &self.cfg.loss_config())?;
        let mut grads = Grads::zeros_like(&self.params);
        self.backward(&cache, &drecon, &mut grads)?;
        Ok((loss, grads))
    }

    pub fn loss(&self, img: &ImageTensor<F>) -> Result<F> {
        let recon = self.reconstruct_patchwise(img)?;
        crate::losses::total_loss(img, &recon, &self.cfg.loss_config())
    }

    fn backward(&self, cache: &ForwardCache<F>, drecon: &ImageTensor<F>, grads: &mut Grads<F>) -> Result<()> {
        let dout = extract_tokens(drecon, PatchShape::square(self.cfg.patch_side))?.tokens;
        let ddec_in = self.decoder.backward(&self.params, grads, &cache.decoder, dout.view());
        let has = |k| self.branches.iter().any(|b| b.kind == k);
        let (dsq, drows, dcols) = scatter_decoder_grad(
            &self.containment,
            self.cfg.embed_dim,
            has(ShapeKind::Square),
            has(ShapeKind::RowStripe),
            has(ShapeKind::ColStripe),
            ddec_in.view(),
        );
        for (b, c) in self.branches.iter().zip(&cache.branches) {
            let denc = match b.kind {
                ShapeKind::Square => dsq.as_ref(),
                ShapeKind::RowStripe => drows.as_ref(),
                ShapeKind::ColStripe => dcols.as_ref(),
            }
            .expect("branch gradient");
            let (dz, dpos_query) = b.encoder.backward(&self.params, grads, &c.encoder, denc.view());
            b.patch_embed.backward(&self.params, grads, &c.embed, dz.view());
            let mut dpos = grads.matrix_mut(b.pos_embed);
            dpos += &dz;
            if let Some(q) = dpos_query {
                dpos += &q;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(self.cfg.to_text(), &self.params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Rebuilds the model described by the checkpoint's embedded config.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = MetalConfig::parse(&ckpt.config_text)?;
        let mut model = Self::new(&cfg)?;
        ckpt.load_into(&mut model.params)?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Loads weights into this model's existing architecture.
    pub fn load_weights(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.load_into(&mut self.params)
    }
}
