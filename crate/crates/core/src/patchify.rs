//! Image ↔ patch-sequence layout.
//!
//! An `H×W×C` image becomes `K = (H/p)·(W/p)` tokens of width `p·p·C`.
//! Tokens are ordered row-major over the patch grid, and each token is its
//! `p×p×C` block flattened in (row, column, channel) order. The map is a pure
//! permutation of elements, so its log-determinant is zero.

use serde::{Deserialize, Serialize};

use crate::error::{JetError, Result};
use crate::numerics::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl PatchGeometry {
    pub fn new(height: usize, width: usize, channels: usize, patch: usize) -> Result<Self> {
        let g = PatchGeometry {
            height,
            width,
            channels,
            patch,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.patch == 0 {
            return Err(JetError::config(format!(
                "geometry has a zero extent: {self:?}"
            )));
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(JetError::config(format!(
                "patch size {} does not divide image {}x{}",
                self.patch, self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn grid_h(&self) -> usize {
        self.height / self.patch
    }

    pub fn grid_w(&self) -> usize {
        self.width / self.patch
    }

    /// Number of tokens `K`.
    pub fn tokens(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Token width `2d`.
    pub fn token_width(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Total dimensions per image, `K · 2d = H · W · C`.
    pub fn dims(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image_len(&self) -> usize {
        self.dims()
    }

    /// `source[i]` is the image offset that lands at token offset `i`.
    pub fn gather_index(&self) -> Vec<usize> {
        let (p, c, w) = (self.patch, self.channels, self.width);
        let mut idx = Vec::with_capacity(self.dims());
        for gr in 0..self.grid_h() {
            for gc in 0..self.grid_w() {
                for r in 0..p {
                    for col in 0..p {
                        let (y, x) = (gr * p + r, gc * p + col);
                        for ch in 0..c {
                            idx.push((y * w + x) * c + ch);
                        }
                    }
                }
            }
        }
        idx
    }
}

/// Reorder one or many images (`[H, W, C]` or `[B, H, W, C]` flattened)
/// into token order.
pub fn patchify_slice<T: Copy>(pixels: &[T], geom: &PatchGeometry) -> Vec<T> {
    let index = geom.gather_index();
    let n = geom.image_len();
    let mut out = Vec::with_capacity(pixels.len());
    for image in pixels.chunks(n) {
        out.extend(index.iter().map(|&i| image[i]));
    }
    out
}

pub fn unpatchify_slice<T: Copy + Default>(tokens: &[T], geom: &PatchGeometry) -> Vec<T> {
    let index = geom.gather_index();
    let n = geom.image_len();
    let mut out = vec![T::default(); tokens.len()];
    for (dst, src) in out.chunks_mut(n).zip(tokens.chunks(n)) {
        for (&i, &v) in index.iter().zip(src) {
            dst[i] = v;
        }
    }
    out
}

fn batch_of(
    shape: &[usize],
    geom: &PatchGeometry,
    inner: &[usize],
    op: &'static str,
) -> Result<Option<usize>> {
    match shape.len() {
        n if n == inner.len() && shape == inner => Ok(None),
        n if n == inner.len() + 1 && shape[1..] == *inner => Ok(Some(shape[0])),
        _ => Err(JetError::shape(
            op,
            format!("shape {shape:?} does not match geometry {geom:?}"),
        )),
    }
}

/// `[H, W, C] -> [K, 2d]`, or batched `[B, H, W, C] -> [B, K, 2d]`.
pub fn patchify<F: Float>(image: &Tensor<F>, geom: &PatchGeometry) -> Result<Tensor<F>> {
    geom.validate()?;
    let b = batch_of(
        image.shape(),
        geom,
        &[geom.height, geom.width, geom.channels],
        "patchify",
    )?;
    let data = patchify_slice(image.data(), geom);
    match b {
        None => Tensor::new(&[geom.tokens(), geom.token_width()], data),
        Some(b) => Tensor::new(&[b, geom.tokens(), geom.token_width()], data),
    }
}

/// Inverse of [`patchify`].
pub fn unpatchify<F: Float>(tokens: &Tensor<F>, geom: &PatchGeometry) -> Result<Tensor<F>> {
    geom.validate()?;
    let b = batch_of(
        tokens.shape(),
        geom,
        &[geom.tokens(), geom.token_width()],
        "unpatchify",
    )?;
    let data = unpatchify_slice(tokens.data(), geom);
    match b {
        None => Tensor::new(&[geom.height, geom.width, geom.channels], data),
        Some(b) => Tensor::new(&[b, geom.height, geom.width, geom.channels], data),
    }
}
