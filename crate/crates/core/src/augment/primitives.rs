//! Label-invariant image primitives and the RandAugment policy built on them.
//!
//! Magnitudes run 0..=10 and map linearly onto operation parameters:
//!
//! | op          | parameter at magnitude M            |
//! |-------------|-------------------------------------|
//! | rotate      | ±3·M degrees                        |
//! | translate   | ±M pixels                           |
//! | shear_x     | ±0.03·M horizontal shear            |
//! | cutout      | 4·M pixel square, clipped to image  |
//! | brightness  | ±0.05·M added                       |
//! | contrast    | 1 ± 0.07·M scale about channel mean |
//! | flip_h      | mirrored with probability 1/2       |
//!
//! Magnitude 0 is the identity for every op.

use std::fmt;
use std::str::FromStr;

use super::LabeledImage;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const MAX_MAGNITUDE: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    Rotate,
    TranslateX,
    TranslateY,
    ShearX,
    Cutout,
    Brightness,
    Contrast,
    FlipH,
}

impl Primitive {
    pub const CATALOG: [Primitive; 8] = [
        Primitive::Rotate,
        Primitive::TranslateX,
        Primitive::TranslateY,
        Primitive::ShearX,
        Primitive::Cutout,
        Primitive::Brightness,
        Primitive::Contrast,
        Primitive::FlipH,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Rotate => "rotate",
            Primitive::TranslateX => "translate_x",
            Primitive::TranslateY => "translate_y",
            Primitive::ShearX => "shear_x",
            Primitive::Cutout => "cutout",
            Primitive::Brightness => "brightness",
            Primitive::Contrast => "contrast",
            Primitive::FlipH => "flip_h",
        }
    }

    /// Draws the concrete transform this op applies at `magnitude`.
    pub fn sample(self, magnitude: u32, height: usize, width: usize, rng: &mut RngStream) -> Result<Transform> {
        if magnitude > MAX_MAGNITUDE {
            return Err(Error::contract(format!(
                "magnitude {magnitude} outside 0..={MAX_MAGNITUDE}"
            )));
        }
        if magnitude == 0 {
            return Ok(Transform::Identity);
        }
        let m = magnitude as f64;
        Ok(match self {
            Primitive::Rotate => Transform::Rotate {
                degrees: rng.sign() * 3.0 * m,
            },
            Primitive::TranslateX => Transform::Translate {
                dx: rng.sign() as i64 * magnitude as i64,
                dy: 0,
            },
            Primitive::TranslateY => Transform::Translate {
                dx: 0,
                dy: rng.sign() as i64 * magnitude as i64,
            },
            Primitive::ShearX => Transform::ShearX {
                factor: rng.sign() * 0.03 * m,
            },
            Primitive::Cutout => {
                let size = (4 * magnitude as usize).min(height.min(width));
                Transform::Cutout {
                    top: rng.below(height - size + 1),
                    left: rng.below(width - size + 1),
                    size,
                }
            }
            Primitive::Brightness => Transform::Brightness {
                delta: rng.sign() * 0.05 * m,
            },
            Primitive::Contrast => Transform::Contrast {
                factor: 1.0 + rng.sign() * 0.07 * m,
            },
            Primitive::FlipH => {
                if rng.coin() {
                    Transform::FlipH
                } else {
                    Transform::Identity
                }
            }
        })
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Primitive::CATALOG
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown augmentation op `{s}`")))
    }
}

/// A fully determined pixel transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    Identity,
    Rotate { degrees: f64 },
    Translate { dx: i64, dy: i64 },
    ShearX { factor: f64 },
    Cutout { top: usize, left: usize, size: usize },
    Brightness { delta: f64 },
    Contrast { factor: f64 },
    FlipH,
}

impl Transform {
    /// Applies the transform to a `[C,H,W]` tensor; output is clamped to `[0,1]`.
    pub fn apply(&self, pixels: &Tensor<f32>) -> Tensor<f32> {
        let shape = pixels.shape();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let src = pixels.data();
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let out = match *self {
            Transform::Identity => return pixels.clone(),
            Transform::Rotate { degrees } => {
                let (sin, cos) = degrees.to_radians().sin_cos();
                warp(src, c, h, w, |x, y| {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    (cos * dx + sin * dy + cx, -sin * dx + cos * dy + cy)
                })
            }
            Transform::Translate { dx, dy } => warp(src, c, h, w, |x, y| {
                ((x as i64 - dx) as f64, (y as i64 - dy) as f64)
            }),
            Transform::ShearX { factor } => {
                warp(src, c, h, w, |x, y| (x as f64 - factor * (y as f64 - cy), y as f64))
            }
            Transform::Cutout { top, left, size } => {
                let mut out = src.to_vec();
                for ch in 0..c {
                    for y in top..(top + size).min(h) {
                        let row = (ch * h + y) * w;
                        out[row + left..row + (left + size).min(w)].fill(0.0);
                    }
                }
                out
            }
            Transform::Brightness { delta } => src.iter().map(|&p| clamp01(p as f64 + delta)).collect(),
            Transform::Contrast { factor } => {
                let mut out = Vec::with_capacity(src.len());
                for plane in src.chunks(h * w) {
                    let mean = plane.iter().map(|&p| p as f64).sum::<f64>() / plane.len() as f64;
                    out.extend(plane.iter().map(|&p| clamp01(mean + (p as f64 - mean) * factor)));
                }
                out
            }
            Transform::FlipH => {
                let mut out = src.to_vec();
                for row in out.chunks_mut(w) {
                    row.reverse();
                }
                out
            }
        };
        Tensor::new(shape, out, false).expect("shape preserved")
    }
}

fn clamp01(v: f64) -> f32 {
    v.clamp(0.0, 1.0) as f32
}

/// Nearest-neighbour inverse warp with zero fill outside the frame.
fn warp(src: &[f32], c: usize, h: usize, w: usize, source_of: impl Fn(usize, usize) -> (f64, f64)) -> Vec<f32> {
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = source_of(x, y);
            let (sx, sy) = (sx.round(), sy.round());
            if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            let (sx, sy) = (sx as usize, sy as usize);
            for ch in 0..c {
                out[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx].clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Applies one primitive at `magnitude`; the label is passed through untouched.
pub fn apply_primitive(
    img: &LabeledImage,
    op: Primitive,
    magnitude: u32,
    rng: &mut RngStream,
) -> Result<LabeledImage> {
    let t = op.sample(magnitude, img.height(), img.width(), rng)?;
    Ok(LabeledImage {
        pixels: t.apply(&img.pixels),
        label: img.label.clone(),
    })
}

/// `n_ops` primitives drawn uniformly with replacement, applied in sequence.
pub fn randaugment(img: &LabeledImage, n_ops: usize, magnitude: u32, rng: &mut RngStream) -> Result<LabeledImage> {
    if n_ops == 0 {
        return Err(Error::contract("randaugment needs at least one op"));
    }
    let mut out = img.clone();
    for _ in 0..n_ops {
        let op = Primitive::CATALOG[rng.below(Primitive::CATALOG.len())];
        out = apply_primitive(&out, op, magnitude, rng)?;
    }
    Ok(out)
}

/// Optional flip + pad-and-crop applied identically ahead of every method.
pub fn preprocess(img: &LabeledImage, rng: &mut RngStream) -> LabeledImage {
    let pad = (img.width().min(img.height()) / 8).max(1) as i64;
    let span = 2 * pad as usize + 1;
    let dx = rng.below(span) as i64 - pad;
    let dy = rng.below(span) as i64 - pad;
    let mut pixels = Transform::Translate { dx, dy }.apply(&img.pixels);
    if rng.coin() {
        pixels = Transform::FlipH.apply(&pixels);
    }
    LabeledImage {
        pixels,
        label: img.label.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(c: usize, h: usize, w: usize) -> LabeledImage {
        let data = (0..c * h * w).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        LabeledImage::new(Tensor::new(&[c, h, w], data, false).unwrap(), vec![0.0, 1.0, 0.0]).unwrap()
    }

    #[test]
    fn magnitude_zero_is_identity_for_every_op() {
        let img = gradient_image(2, 9, 7);
        for op in Primitive::CATALOG {
            let mut rng = RngStream::derive(3, "t", 0, 0);
            let out = apply_primitive(&img, op, 0, &mut rng).unwrap();
            assert_eq!(out, img, "{op}");
        }
    }

    #[test]
    fn rotate_magnitude_one_is_three_degrees() {
        for i in 0..20 {
            let mut rng = RngStream::derive(5, "rot", 0, i);
            let t = Primitive::Rotate.sample(1, 16, 16, &mut rng).unwrap();
            match t {
                Transform::Rotate { degrees } => assert_eq!(degrees.abs(), 3.0),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn cutout_magnitude_one_zeroes_one_four_by_four_square() {
        let ones = LabeledImage::new(Tensor::new(&[1, 12, 12], vec![1.0; 144], false).unwrap(), vec![1.0]).unwrap();
        for i in 0..20 {
            let mut rng = RngStream::derive(5, "cut", 0, i);
            let out = apply_primitive(&ones, Primitive::Cutout, 1, &mut rng).unwrap();
            let zeros: Vec<usize> = (0..144).filter(|&k| out.pixels.data()[k] == 0.0).collect();
            assert_eq!(zeros.len(), 16);
            let (r0, c0) = (zeros[0] / 12, zeros[0] % 12);
            for k in zeros {
                assert!((r0..r0 + 4).contains(&(k / 12)) && (c0..c0 + 4).contains(&(k % 12)));
            }
        }
    }

    #[test]
    fn cutout_is_clipped_to_image() {
        let mut rng = RngStream::derive(1, "cut", 0, 0);
        let t = Primitive::Cutout.sample(10, 8, 8, &mut rng).unwrap();
        assert_eq!(t, Transform::Cutout { top: 0, left: 0, size: 8 });
    }

    #[test]
    fn translate_shifts_and_fills_zero() {
        let img = gradient_image(1, 4, 4);
        let out = Transform::Translate { dx: 1, dy: 0 }.apply(&img.pixels);
        for y in 0..4 {
            assert_eq!(out.data()[y * 4], 0.0);
            for x in 1..4 {
                assert_eq!(out.data()[y * 4 + x], img.pixels.data()[y * 4 + x - 1]);
            }
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = gradient_image(3, 5, 6);
        let once = Transform::FlipH.apply(&img.pixels);
        assert_ne!(once, img.pixels);
        assert_eq!(Transform::FlipH.apply(&once), img.pixels);
    }

    #[test]
    fn every_op_stays_in_range_and_keeps_label() {
        let img = gradient_image(2, 10, 10);
        for op in Primitive::CATALOG {
            for m in 0..=MAX_MAGNITUDE {
                let mut rng = RngStream::derive(9, op.name(), m as u64, 0);
                let out = apply_primitive(&img, op, m, &mut rng).unwrap();
                assert!(out.pixels.data().iter().all(|p| (0.0..=1.0).contains(p)));
                assert_eq!(out.label, img.label);
            }
        }
    }

    #[test]
    fn unknown_op_and_magnitude_are_contract_errors() {
        assert!(matches!("solarize".parse::<Primitive>(), Err(Error::Contract(_))));
        let mut rng = RngStream::derive(0, "x", 0, 0);
        let img = gradient_image(1, 4, 4);
        assert!(apply_primitive(&img, Primitive::Rotate, 11, &mut rng).is_err());
        assert!(randaugment(&img, 0, 3, &mut rng).is_err());
    }

    #[test]
    fn randaugment_magnitude_zero_is_identity_and_deterministic() {
        let img = gradient_image(1, 8, 8);
        let mut rng = RngStream::derive(4, "ra", 0, 0);
        assert_eq!(randaugment(&img, 2, 0, &mut rng).unwrap(), img);
        let a = randaugment(&img, 1, 6, &mut RngStream::derive(4, "ra", 1, 2)).unwrap();
        let b = randaugment(&img, 1, 6, &mut RngStream::derive(4, "ra", 1, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn randaugment_single_op_matches_one_catalog_op() {
        let img = gradient_image(1, 8, 8);
        let mut rng = RngStream::derive(8, "ra", 0, 0);
        let out = randaugment(&img, 1, 6, &mut rng).unwrap();
        let mut replay = RngStream::derive(8, "ra", 0, 0);
        let op = Primitive::CATALOG[replay.below(8)];
        assert_eq!(out, apply_primitive(&img, op, 6, &mut replay).unwrap());
    }
}
