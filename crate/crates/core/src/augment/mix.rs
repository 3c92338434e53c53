//! Label-mixing augmentations.

use rand_distr::{Distribution, Gamma};

use super::LabeledImage;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// One `Gamma(shape, 1)` draw.
pub fn sample_gamma(shape: f64, rng: &mut RngStream) -> Result<f64> {
    let gamma = Gamma::new(shape, 1.0)
        .map_err(|e| Error::contract(format!("gamma shape {shape}: {e}")))?;
    Ok(gamma.sample(rng))
}

/// `Beta(alpha, alpha)` as `X / (X + Y)` with `X, Y ~ Gamma(alpha)`.
///
/// For `alpha == 1` the result is a single uniform draw.
pub fn sample_beta(alpha: f64, rng: &mut RngStream) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::contract(format!("beta parameter must be > 0, got {alpha}")));
    }
    if alpha == 1.0 {
        return Ok(rng.uniform());
    }
    let x = sample_gamma(alpha, rng)?;
    let y = sample_gamma(alpha, rng)?;
    if x + y == 0.0 {
        // Both draws underflowed; the mass sits at the endpoints.
        return Ok(if rng.coin() { 1.0 } else { 0.0 });
    }
    Ok(x / (x + y))
}

fn check_pair(a: &LabeledImage, b: &LabeledImage) -> Result<()> {
    if a.pixels.shape() != b.pixels.shape() || a.label.len() != b.label.len() {
        return Err(Error::size(format!(
            "cannot mix {:?}/{} with {:?}/{}",
            a.pixels.shape(),
            a.label.len(),
            b.pixels.shape(),
            b.label.len()
        )));
    }
    Ok(())
}

fn blend(a: &[f32], b: &[f32], lambda: f64) -> Vec<f32> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (lambda * x as f64 + (1.0 - lambda) * y as f64) as f32)
        .collect()
}

/// `λ·a + (1−λ)·b` on pixels and labels.
pub fn mixup_with_lambda(a: &LabeledImage, b: &LabeledImage, lambda: f64) -> Result<LabeledImage> {
    check_pair(a, b)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(format!("mixing weight {lambda} outside [0,1]")));
    }
    let pixels = Tensor::new(a.pixels.shape(), blend(a.pixels.data(), b.pixels.data(), lambda), false)?;
    Ok(LabeledImage {
        pixels,
        label: blend(&a.label, &b.label, lambda),
    })
}

pub fn mixup(a: &LabeledImage, b: &LabeledImage, alpha: f64, rng: &mut RngStream) -> Result<LabeledImage> {
    check_pair(a, b)?;
    let lambda = sample_beta(alpha, rng)?;
    mixup_with_lambda(a, b, lambda)
}

/// A rectangle `[top, top+height) × [left, left+width)` inside the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CutBox {
    pub fn empty() -> Self {
        CutBox {
            top: 0,
            left: 0,
            height: 0,
            width: 0,
        }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Box of side `round(H·√(1−λ)) × round(W·√(1−λ))` centred on a uniform
/// pixel and clipped at the borders.
pub fn cutmix_box(height: usize, width: usize, lambda: f64, rng: &mut RngStream) -> CutBox {
    let side = (1.0 - lambda).max(0.0).sqrt();
    let cut_h = (height as f64 * side).round() as i64;
    let cut_w = (width as f64 * side).round() as i64;
    let cy = rng.below(height) as i64;
    let cx = rng.below(width) as i64;
    let clip = |start: i64, len: i64, limit: usize| {
        let lo = (start).clamp(0, limit as i64);
        let hi = (start + len).clamp(0, limit as i64);
        (lo as usize, (hi - lo) as usize)
    };
    let (top, h) = clip(cy - cut_h / 2, cut_h, height);
    let (left, w) = clip(cx - cut_w / 2, cut_w, width);
    if h == 0 || w == 0 {
        return CutBox::empty();
    }
    CutBox {
        top,
        left,
        height: h,
        width: w,
    }
}

/// Pastes `b`'s pixels inside `cut` into `a`; the label weight is the
/// counted fraction of pixels that still come from `a`.
pub fn cutmix_with_box(a: &LabeledImage, b: &LabeledImage, cut: CutBox) -> Result<LabeledImage> {
    check_pair(a, b)?;
    let (c, h, w) = (a.channels(), a.height(), a.width());
    if cut.top + cut.height > h || cut.left + cut.width > w {
        return Err(Error::contract(format!("cut box {cut:?} exceeds {h}×{w} image")));
    }
    let mut out = a.pixels.data().to_vec();
    let src = b.pixels.data();
    let mut pasted = 0usize;
    for ch in 0..c {
        for y in cut.top..cut.top + cut.height {
            let row = (ch * h + y) * w;
            out[row + cut.left..row + cut.left + cut.width]
                .copy_from_slice(&src[row + cut.left..row + cut.left + cut.width]);
            if ch == 0 {
                pasted += cut.width;
            }
        }
    }
    let lambda = 1.0 - pasted as f64 / (h * w) as f64;
    Ok(LabeledImage {
        pixels: Tensor::new(a.pixels.shape(), out, false)?,
        label: blend(&a.label, &b.label, lambda),
    })
}

pub fn cutmix(a: &LabeledImage, b: &LabeledImage, alpha: f64, rng: &mut RngStream) -> Result<LabeledImage> {
    check_pair(a, b)?;
    if a.height() < 2 || a.width() < 2 {
        return Err(Error::size("cutmix needs images of at least 2×2"));
    }
    let lambda = sample_beta(alpha, rng)?;
    let cut = cutmix_box(a.height(), a.width(), lambda, rng);
    cutmix_with_box(a, b, cut)
}
