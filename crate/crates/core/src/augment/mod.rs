//! Data augmentation: label-invariant primitives, RandAugment, Mixup, CutMix
//! and the two multi-DA baseline policies.

mod mix;
mod primitives;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub use mix::{cutmix, cutmix_box, cutmix_with_box, mixup, mixup_with_lambda, sample_beta, sample_gamma, CutBox};
pub use primitives::{apply_primitive, preprocess, randaugment, Primitive, Transform, MAX_MAGNITUDE};

/// Tolerance on the label simplex constraint.
pub const LABEL_TOLERANCE: f64 = 1e-6;

/// An image in `[0,1]` with a probability-vector label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `[C,H,W]`.
    pub pixels: Tensor<f32>,
    pub label: Vec<f32>,
}

impl LabeledImage {
    pub fn new(pixels: Tensor<f32>, label: Vec<f32>) -> Result<Self> {
        if pixels.shape().len() != 3 {
            return Err(Error::size(format!(
                "image must be [C,H,W], got {:?}",
                pixels.shape()
            )));
        }
        if pixels.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::contract("pixel values must lie in [0,1]"));
        }
        check_label(&label)?;
        Ok(LabeledImage { pixels, label })
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn num_classes(&self) -> usize {
        self.label.len()
    }
}

pub(crate) fn check_label(label: &[f32]) -> Result<()> {
    if label.is_empty() || label.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::contract("label entries must be non-negative"));
    }
    let total: f64 = label.iter().map(|&v| v as f64).sum();
    if (total - 1.0).abs() > LABEL_TOLERANCE {
        return Err(Error::contract(format!("label sums to {total}, expected 1")));
    }
    Ok(())
}

/// One of the augmentation methods a branch or baseline can be tied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DaKind {
    /// Identity; used for the no-DA baseline.
    None,
    RandAugment,
    Mixup,
    CutMix,
}

impl DaKind {
    pub fn name(self) -> &'static str {
        match self {
            DaKind::None => "none",
            DaKind::RandAugment => "randaugment",
            DaKind::Mixup => "mixup",
            DaKind::CutMix => "cutmix",
        }
    }

    pub fn mixes_labels(self) -> bool {
        matches!(self, DaKind::Mixup | DaKind::CutMix)
    }

    pub const DEFAULT_SET: [DaKind; 3] = [DaKind::RandAugment, DaKind::Mixup, DaKind::CutMix];
}

impl fmt::Display for DaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DaKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "noda" => Ok(DaKind::None),
            "randaugment" => Ok(DaKind::RandAugment),
            "mixup" => Ok(DaKind::Mixup),
            "cutmix" => Ok(DaKind::CutMix),
            _ => Err(Error::contract(format!("unknown augmentation method `{s}`"))),
        }
    }
}

/// Hyperparameters shared by every augmentation method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    pub ra_ops: usize,
    pub ra_magnitude: u32,
    /// Beta(α, α) parameter for Mixup and CutMix.
    pub alpha: f64,
    /// Random flip + pad-crop before any method.
    pub preprocess: bool,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            ra_ops: 1,
            ra_magnitude: 6,
            alpha: 1.0,
            preprocess: false,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        if self.ra_ops == 0 {
            return Err(Error::config("augment.ra_ops", "must be at least 1"));
        }
        if self.ra_magnitude > MAX_MAGNITUDE {
            return Err(Error::config(
                "augment.ra_magnitude",
                format!("must be in 0..={MAX_MAGNITUDE}"),
            ));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config("augment.alpha", "must be a positive number"));
        }
        Ok(())
    }
}

/// Applies `kind` to `img`; label-mixing methods consume `partner`.
pub fn apply_da(
    kind: DaKind,
    img: &LabeledImage,
    partner: &LabeledImage,
    params: &AugmentParams,
    rng: &mut RngStream,
) -> Result<LabeledImage> {
    match kind {
        DaKind::None => Ok(img.clone()),
        DaKind::RandAugment => randaugment(img, params.ra_ops, params.ra_magnitude, rng),
        DaKind::Mixup => mixup(img, partner, params.alpha, rng),
        DaKind::CutMix => cutmix(img, partner, params.alpha, rng),
    }
}

/// Baseline 1: one method from `set`, chosen uniformly.
///
/// The choice is drawn from `choice_rng` and the augmentation itself from
/// `rng`, so a single-element set reproduces plain training with that method.
/// Returns the augmented sample and the index of the chosen method.
pub fn baseline1_augment(
    img: &LabeledImage,
    partner: &LabeledImage,
    set: &[DaKind],
    params: &AugmentParams,
    choice_rng: &mut RngStream,
    rng: &mut RngStream,
) -> Result<(LabeledImage, usize)> {
    if set.is_empty() {
        return Err(Error::contract("baseline 1 needs a non-empty augmentation set"));
    }
    let choice = choice_rng.below(set.len());
    Ok((apply_da(set[choice], img, partner, params, rng)?, choice))
}

/// Baseline 2: RandAugment on both images, then Mixup or CutMix chosen
/// uniformly. Returns the sample and `0` for Mixup, `1` for CutMix.
pub fn baseline2_augment(
    img: &LabeledImage,
    partner: &LabeledImage,
    params: &AugmentParams,
    choice_rng: &mut RngStream,
    rng: &mut RngStream,
    partner_rng: &mut RngStream,
) -> Result<(LabeledImage, usize)> {
    let a = randaugment(img, params.ra_ops, params.ra_magnitude, rng)?;
    let b = randaugment(partner, params.ra_ops, params.ra_magnitude, partner_rng)?;
    let choice = choice_rng.below(2);
    let out = if choice == 0 {
        mixup(&a, &b, params.alpha, rng)?
    } else {
        cutmix(&a, &b, params.alpha, rng)?
    };
    Ok((out, choice))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64, class: usize) -> LabeledImage {
        let mut rng = RngStream::derive(seed, "img", 0, 0);
        let data = (0..64).map(|_| rng.uniform() as f32).collect();
        let mut label = vec![0.0; 3];
        label[class] = 1.0;
        LabeledImage::new(Tensor::new(&[1, 8, 8], data, false).unwrap(), label).unwrap()
    }

    #[test]
    fn labels_must_be_probability_vectors() {
        let px = Tensor::new(&[1, 2, 2], vec![0.5; 4], false).unwrap();
        assert!(LabeledImage::new(px.clone(), vec![0.5, 0.5]).is_ok());
        assert!(LabeledImage::new(px.clone(), vec![0.5, 0.6]).is_err());
        assert!(LabeledImage::new(px.clone(), vec![1.5, -0.5]).is_err());
        let bad = Tensor::new(&[1, 2, 2], vec![0.5, 0.5, 0.5, 1.5], false).unwrap();
        assert!(LabeledImage::new(bad, vec![1.0]).is_err());
    }

    #[test]
    fn baseline1_chooses_uniformly() {
        let (a, b) = (image(1, 0), image(2, 1));
        let params = AugmentParams::default();
        let mut counts = [0usize; 3];
        let mut choice_rng = RngStream::derive(11, "choice", 0, 0);
        for i in 0..30_000 {
            let mut rng = RngStream::derive(11, "aug", 0, i);
            let (_, k) = baseline1_augment(&a, &b, &DaKind::DEFAULT_SET, &params, &mut choice_rng, &mut rng).unwrap();
            counts[k] += 1;
        }
        for c in counts {
            assert!((c as f64 / 30_000.0 - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn baseline1_singleton_set_is_plain_augmentation() {
        let (a, b) = (image(1, 0), image(2, 1));
        let params = AugmentParams::default();
        for kind in DaKind::DEFAULT_SET {
            let mut choice_rng = RngStream::derive(3, "choice", 0, 0);
            let (out, k) = baseline1_augment(
                &a,
                &b,
                &[kind],
                &params,
                &mut choice_rng,
                &mut RngStream::derive(3, "aug", 0, 0),
            )
            .unwrap();
            assert_eq!(k, 0);
            let plain = apply_da(kind, &a, &b, &params, &mut RngStream::derive(3, "aug", 0, 0)).unwrap();
            assert_eq!(out, plain);
        }
        let mut r = RngStream::derive(0, "c", 0, 0);
        assert!(baseline1_augment(&a, &b, &[], &params, &mut r.clone(), &mut r).is_err());
    }

    #[test]
    fn baseline2_splits_evenly_and_mixes_labels() {
        let (a, b) = (image(1, 0), image(2, 2));
        let params = AugmentParams::default();
        let mut choice_rng = RngStream::derive(5, "choice", 0, 0);
        let mut mixups = 0;
        for i in 0..30_000 {
            let mut rng = RngStream::derive(5, "aug", 0, i);
            let mut prng = RngStream::derive(5, "partner", 0, i);
            let (out, k) = baseline2_augment(&a, &b, &params, &mut choice_rng, &mut rng, &mut prng).unwrap();
            mixups += (k == 0) as usize;
            if i < 200 {
                assert_eq!(out.label[1], 0.0);
                assert!((out.label[0] + out.label[2] - 1.0).abs() < 1e-6);
            }
        }
        assert!((mixups as f64 / 30_000.0 - 0.5).abs() < 0.02);
    }

    #[test]
    fn baseline2_identity_at_zero_magnitude_and_unit_lambda() {
        let (a, b) = (image(1, 0), image(2, 2));
        let params = AugmentParams {
            ra_magnitude: 0,
            ..AugmentParams::default()
        };
        let ra_a = randaugment(&a, 1, 0, &mut RngStream::derive(0, "x", 0, 0)).unwrap();
        let ra_b = randaugment(&b, 1, 0, &mut RngStream::derive(0, "y", 0, 0)).unwrap();
        assert_eq!(ra_a, a);
        assert_eq!(mixup_with_lambda(&ra_a, &ra_b, 1.0).unwrap(), a);
        assert_eq!(cutmix_with_box(&ra_a, &ra_b, CutBox::empty()).unwrap(), a);
        let mut c = RngStream::derive(0, "c", 0, 0);
        let (out, _) = baseline2_augment(
            &a,
            &b,
            &params,
            &mut c,
            &mut RngStream::derive(0, "r", 0, 0),
            &mut RngStream::derive(0, "p", 0, 0),
        )
        .unwrap();
        assert!((out.label.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn kinds_round_trip_through_names() {
        for k in [DaKind::None, DaKind::RandAugment, DaKind::Mixup, DaKind::CutMix] {
            assert_eq!(k.name().parse::<DaKind>().unwrap(), k);
        }
        assert!("autoaugment".parse::<DaKind>().is_err());
    }
}
