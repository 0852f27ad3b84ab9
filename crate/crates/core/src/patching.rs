//! Image tensors and their tokenization into square patches and stripes.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::Real;

/// Channel-major image: `data[(c * height + y) * width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<F = f32> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<F>,
}

impl<F: Real> ImageTensor<F> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![F::zero(); channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: F) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> F {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: F) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[F] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape<G>(&self, other: &ImageTensor<G>) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn check_same_shape<G>(&self, other: &ImageTensor<G>) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.channels, self.height, self.width, other.channels, other.height, other.width
            )))
        }
    }

    /// All values lie in `[0, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.data.iter().all(|v| *v >= F::zero() && *v <= F::one())
    }

    pub fn cast<G: Real>(&self) -> ImageTensor<G> {
        ImageTensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Square,
    RowStripe,
    ColStripe,
}

impl ShapeKind {
    /// Parameter-name prefix of the branch that handles this shape.
    pub fn branch_name(self) -> &'static str {
        match self {
            Self::Square => "square",
            Self::RowStripe => "rows",
            Self::ColStripe => "cols",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchShape {
    pub kind: ShapeKind,
    pub patch_h: usize,
    pub patch_w: usize,
}

impl PatchShape {
    pub fn square(patch_side: usize) -> Self {
        Self {
            kind: ShapeKind::Square,
            patch_h: patch_side,
            patch_w: patch_side,
        }
    }

    /// Full-width stripe, `patch_side` pixels tall.
    pub fn row_stripe(image_side: usize, patch_side: usize) -> Self {
        Self {
            kind: ShapeKind::RowStripe,
            patch_h: patch_side,
            patch_w: image_side,
        }
    }

    /// Full-height stripe, `patch_side` pixels wide.
    pub fn col_stripe(image_side: usize, patch_side: usize) -> Self {
        Self {
            kind: ShapeKind::ColStripe,
            patch_h: image_side,
            patch_w: patch_side,
        }
    }

    pub fn for_kind(kind: ShapeKind, image_side: usize, patch_side: usize) -> Self {
        match kind {
            ShapeKind::Square => Self::square(patch_side),
            ShapeKind::RowStripe => Self::row_stripe(image_side, patch_side),
            ShapeKind::ColStripe => Self::col_stripe(image_side, patch_side),
        }
    }

    /// Grid of tokens `(rows, cols)` this shape produces on an image.
    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if self.patch_h == 0
            || self.patch_w == 0
            || !height.is_multiple_of(self.patch_h)
            || !width.is_multiple_of(self.patch_w)
        {
            return Err(Error::Dimension(format!(
                "{}x{} patches do not tile a {height}x{width} image",
                self.patch_h, self.patch_w
            )));
        }
        Ok((height / self.patch_h, width / self.patch_w))
    }

    pub fn token_len(&self, channels: usize) -> usize {
        channels * self.patch_h * self.patch_w
    }
}

/// Tokens of one patch shape in raster order. Each token is laid out as
/// `[channel][row-in-patch][col-in-patch]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<F = f32> {
    pub shape: PatchShape,
    pub channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// `n_tokens × token_len`.
    pub tokens: Array2<F>,
    /// Grid coordinate `(row, col)` of each token.
    pub index_map: Vec<(usize, usize)>,
}

impl<F: Real> TokenSequence<F> {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    /// Wraps a token matrix (for instance decoder output) with the geometry
    /// needed to reassemble it.
    pub fn from_tokens(
        shape: PatchShape,
        channels: usize,
        image_height: usize,
        image_width: usize,
        tokens: Array2<F>,
    ) -> Result<Self> {
        let (gr, gc) = shape.grid(image_height, image_width)?;
        let expected = shape.token_len(channels);
        if tokens.ncols() != expected {
            return Err(Error::TokenLength {
                expected,
                got: tokens.ncols(),
            });
        }
        if tokens.nrows() != gr * gc {
            return Err(Error::Dimension(format!(
                "expected {} tokens, got {}",
                gr * gc,
                tokens.nrows()
            )));
        }
        Ok(Self {
            shape,
            channels,
            image_height,
            image_width,
            tokens,
            index_map: raster(gr, gc),
        })
    }
}

fn raster(rows: usize, cols: usize) -> Vec<(usize, usize)> {
    (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect()
}

pub fn extract_tokens<F: Real>(img: &ImageTensor<F>, shape: PatchShape) -> Result<TokenSequence<F>> {
    let (gr, gc) = shape.grid(img.height, img.width)?;
    let (ph, pw) = (shape.patch_h, shape.patch_w);
    let len = shape.token_len(img.channels);
    let index_map = raster(gr, gc);
    let mut tokens = Array2::zeros((index_map.len(), len));
    for (t, &(r, c)) in index_map.iter().enumerate() {
        let mut row = tokens.row_mut(t);
        let dst = row.as_slice_mut().expect("contiguous token row");
        let mut k = 0;
        for ch in 0..img.channels {
            for py in 0..ph {
                let start = img.index(ch, r * ph + py, c * pw);
                dst[k..k + pw].copy_from_slice(&img.data[start..start + pw]);
                k += pw;
            }
        }
    }
    Ok(TokenSequence {
        shape,
        channels: img.channels,
        image_height: img.height,
        image_width: img.width,
        tokens,
        index_map,
    })
}

/// Inverse of [`extract_tokens`].
pub fn reassemble<F: Real>(seq: &TokenSequence<F>) -> Result<ImageTensor<F>> {
    let shape = seq.shape;
    let expected = shape.token_len(seq.channels);
    if seq.tokens.ncols() != expected {
        return Err(Error::TokenLength {
            expected,
            got: seq.tokens.ncols(),
        });
    }
    let (gr, gc) = shape.grid(seq.image_height, seq.image_width)?;
    if seq.tokens.nrows() != gr * gc || seq.index_map.len() != gr * gc {
        return Err(Error::Dimension(format!(
            "expected {} tokens, got {}",
            gr * gc,
            seq.tokens.nrows()
        )));
    }
    let (ph, pw) = (shape.patch_h, shape.patch_w);
    let mut img = ImageTensor::zeros(seq.channels, seq.image_height, seq.image_width);
    for (t, &(r, c)) in seq.index_map.iter().enumerate() {
        let row = seq.tokens.row(t);
        let src = row.to_slice().expect("contiguous token row");
        let mut k = 0;
        for ch in 0..seq.channels {
            for py in 0..ph {
                let start = img.index(ch, r * ph + py, c * pw);
                img.data[start..start + pw].copy_from_slice(&src[k..k + pw]);
                k += pw;
            }
        }
    }
    Ok(img)
}

/// Where a square patch sits inside the stripes that contain it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Containment {
    pub row_stripe: usize,
    pub col_stripe: usize,
    /// Position of the square along its row stripe (left to right).
    pub row_offset: usize,
    /// Position of the square along its column stripe (top to bottom).
    pub col_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContainmentMap {
    /// Squares (and stripe segments) per stripe, `image_side / patch_side`.
    pub per_stripe: usize,
    pub entries: Vec<Containment>,
}

impl ContainmentMap {
    pub fn get(&self, square: usize) -> Containment {
        self.entries[square]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn build_containment(image_side: usize, patch_side: usize) -> Result<ContainmentMap> {
    let (g, _) = PatchShape::square(patch_side).grid(image_side, image_side)?;
    let entries = raster(g, g)
        .into_iter()
        .map(|(r, c)| Containment {
            row_stripe: r,
            col_stripe: c,
            row_offset: c,
            col_offset: r,
        })
        .collect();
    Ok(ContainmentMap { per_stripe: g, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(c: usize, side: usize, seed: u64) -> ImageTensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * side * side).map(|_| rng.random::<f32>()).collect();
        ImageTensor::new(c, side, side, data).unwrap()
    }

    #[test]
    fn square_token_count_and_length() {
        let img = random_image(3, 128, 0);
        let seq = extract_tokens(&img, PatchShape::square(16)).unwrap();
        assert_eq!(seq.len(), 64);
        assert_eq!(seq.tokens.ncols(), 768);
        assert_eq!(seq.index_map[9], (1, 1));
    }

    #[test]
    fn row_stripe_token_count_and_length() {
        let img = random_image(3, 128, 1);
        let seq = extract_tokens(&img, PatchShape::row_stripe(128, 16)).unwrap();
        assert_eq!(seq.len(), 8);
        assert_eq!(seq.tokens.ncols(), 6144);
        assert_eq!(seq.index_map[3], (3, 0));
        let cols = extract_tokens(&img, PatchShape::col_stripe(128, 16)).unwrap();
        assert_eq!(cols.index_map[3], (0, 3));
    }

    #[test]
    fn single_patch_is_flattened_image() {
        let img = random_image(3, 16, 2);
        let seq = extract_tokens(&img, PatchShape::square(16)).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq.tokens.row(0).to_vec(), img.data);
        assert_eq!(reassemble(&seq).unwrap(), img);
    }

    #[test]
    fn token_content_is_the_patch() {
        let img = random_image(2, 8, 3);
        let seq = extract_tokens(&img, PatchShape::square(4)).unwrap();
        // token 3 = grid (1,1); element [c=1][py=2][px=3]
        assert_eq!(seq.tokens[[3, 16 + 2 * 4 + 3]], img.get(1, 6, 7));
    }

    #[test]
    fn indivisible_patch_is_rejected() {
        let img = random_image(1, 10, 4);
        assert!(matches!(
            extract_tokens(&img, PatchShape::square(4)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn round_trip_all_shapes() {
        let img = random_image(3, 128, 5);
        for shape in [
            PatchShape::square(16),
            PatchShape::row_stripe(128, 16),
            PatchShape::col_stripe(128, 16),
        ] {
            let seq = extract_tokens(&img, shape).unwrap();
            assert_eq!(reassemble(&seq).unwrap(), img, "{shape:?}");
        }
    }

    #[test]
    fn inconsistent_token_length_is_rejected() {
        let img = random_image(1, 8, 6);
        let mut seq = extract_tokens(&img, PatchShape::square(4)).unwrap();
        seq.tokens = Array2::zeros((4, 15));
        assert!(matches!(
            reassemble(&seq),
            Err(Error::TokenLength { expected: 16, got: 15 })
        ));
    }

    #[test]
    fn every_pixel_in_exactly_one_token() {
        let side = 12;
        let mut img = ImageTensor::<f64>::zeros(1, side, side);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f64;
        }
        for shape in [
            PatchShape::square(4),
            PatchShape::row_stripe(side, 4),
            PatchShape::col_stripe(side, 4),
        ] {
            let seq = extract_tokens(&img, shape).unwrap();
            let mut seen = vec![0u32; side * side];
            for v in seq.tokens.iter() {
                seen[*v as usize] += 1;
            }
            assert!(seen.iter().all(|&c| c == 1));
        }
    }

    /// Brute force: is every pixel of square `s` inside stripe `t`?
    fn contains(side: usize, k: usize, kind: ShapeKind, stripe: usize, sq: (usize, usize)) -> bool {
        let shape = PatchShape::for_kind(kind, side, k);
        let (gr, gc) = shape.grid(side, side).unwrap();
        let (sr, sc) = (stripe / gc, stripe % gc);
        assert!(sr < gr);
        let (y0, x0) = (sr * shape.patch_h, sc * shape.patch_w);
        (sq.0 * k..(sq.0 + 1) * k).all(|y| {
            (sq.1 * k..(sq.1 + 1) * k).all(|x| y >= y0 && y < y0 + shape.patch_h && x >= x0 && x < x0 + shape.patch_w)
        })
    }

    #[test]
    fn containment_matches_geometry() {
        for (side, k) in [(128, 16), (32, 16), (16, 16), (24, 8)] {
            let map = build_containment(side, k).unwrap();
            let g = side / k;
            assert_eq!(map.per_stripe, g);
            for s in 0..g * g {
                let sq = (s / g, s % g);
                let e = map.get(s);
                let rows: Vec<_> = (0..g)
                    .filter(|&t| contains(side, k, ShapeKind::RowStripe, t, sq))
                    .collect();
                let cols: Vec<_> = (0..g)
                    .filter(|&t| contains(side, k, ShapeKind::ColStripe, t, sq))
                    .collect();
                assert_eq!(rows, vec![e.row_stripe]);
                assert_eq!(cols, vec![e.col_stripe]);
                // offset = horizontal pixel offset of the square inside the row stripe / k
                assert_eq!(e.row_offset, (sq.1 * k) / k);
                assert_eq!(e.col_offset, (sq.0 * k) / k);
            }
            // offsets within each stripe are a permutation of 0..g
            for t in 0..g {
                let mut offs: Vec<_> = map
                    .entries
                    .iter()
                    .filter(|e| e.row_stripe == t)
                    .map(|e| e.row_offset)
                    .collect();
                offs.sort();
                assert_eq!(offs, (0..g).collect::<Vec<_>>());
                let mut offs: Vec<_> = map
                    .entries
                    .iter()
                    .filter(|e| e.col_stripe == t)
                    .map(|e| e.col_offset)
                    .collect();
                offs.sort();
                assert_eq!(offs, (0..g).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn containment_examples() {
        let map = build_containment(128, 16).unwrap();
        let e = map.get(2 * 8 + 5);
        assert_eq!((e.row_stripe, e.col_stripe, e.row_offset), (2, 5, 5));
        let map = build_containment(32, 16).unwrap();
        assert_eq!(map.len(), 4);
        let e = map.get(2);
        assert_eq!((e.row_stripe, e.row_offset), (1, 0));
        let map = build_containment(16, 16).unwrap();
        assert_eq!(
            map.entries,
            vec![Containment {
                row_stripe: 0,
                col_stripe: 0,
                row_offset: 0,
                col_offset: 0
            }]
        );
    }

    proptest::proptest! {
        #[test]
        fn round_trip_is_identity(seed in 0u64..1000, g in 1usize..6, k in 1usize..5, c in 1usize..4) {
            let side = g * k;
            let img = random_image(c, side, seed);
            for shape in [PatchShape::square(k), PatchShape::row_stripe(side, k), PatchShape::col_stripe(side, k)] {
                let seq = extract_tokens(&img, shape).unwrap();
                proptest::prop_assert_eq!(reassemble(&seq).unwrap(), img.clone());
            }
        }
    }
}
