//! Datasets: IDX files and a synthetic glyph task.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::LabeledImage;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Four-dimensional `[n, C, H, W]` byte images, used for multi-channel fixtures.
pub const IDX_IMAGES_RGB_MAGIC: u32 = 0x0000_0804;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub num_classes: usize,
    pub source: String,
}

/// Images in `[0,1]` with one-hot labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, C, H, W]`.
    pub images: Tensor<f32>,
    /// Row-major `[n, num_classes]`.
    pub labels: Vec<f32>,
    pub meta: DatasetMeta,
}

impl Dataset {
    /// Checks the invariants: matching counts, pixels in range, one-hot rows.
    pub fn new(images: Tensor<f32>, labels: Vec<f32>, meta: DatasetMeta) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::size(format!("dataset images must be [n,C,H,W], got {:?}", images.shape())));
        }
        let n = images.shape()[0];
        if meta.num_classes < 2 || labels.len() != n * meta.num_classes {
            return Err(Error::size(format!(
                "{n} images need {} label entries for {} classes, got {}",
                n * meta.num_classes,
                meta.num_classes,
                labels.len()
            )));
        }
        if images.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::contract("dataset pixels must lie in [0,1]"));
        }
        for row in labels.chunks(meta.num_classes) {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(Error::contract("dataset labels must be one-hot"));
            }
        }
        Ok(Dataset { images, labels, meta })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn pixels(&self, i: usize) -> &[f32] {
        let len = self.image_len();
        &self.images.data()[i * len..(i + 1) * len]
    }

    pub fn label(&self, i: usize) -> &[f32] {
        let c = self.num_classes();
        &self.labels[i * c..(i + 1) * c]
    }

    pub fn class_of(&self, i: usize) -> usize {
        self.label(i).iter().position(|&v| v == 1.0).expect("one-hot label")
    }

    pub fn sample(&self, i: usize) -> LabeledImage {
        LabeledImage {
            pixels: Tensor::new(&self.image_shape(), self.pixels(i).to_vec(), false).expect("dataset shape"),
            label: self.label(i).to_vec(),
        }
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], name: &str) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::contract("subset must not be empty"));
        }
        let len = self.image_len();
        let c = self.num_classes();
        let mut pixels = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::contract(format!("sample {i} of {}", self.len())));
            }
            pixels.extend_from_slice(self.pixels(i));
            labels.extend_from_slice(self.label(i));
        }
        let [ch, h, w] = self.image_shape();
        Ok(Dataset {
            images: Tensor::new(&[indices.len(), ch, h, w], pixels, false)?,
            labels,
            meta: DatasetMeta {
                name: name.to_string(),
                ..self.meta.clone()
            },
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("need {n} more bytes, file has {}", self.bytes.len() - self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an IDX image/label pair; the class count is `max label + 1` (at least 2).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    load_idx_with_classes(images_path, labels_path, None)
}

pub fn load_idx_with_classes(images_path: &Path, labels_path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let img_bytes = read_file(images_path)?;
    let mut r = Reader {
        bytes: &img_bytes,
        pos: 0,
    };
    let magic = r.u32_be()?;
    let (n, c, h, w) = match magic {
        IDX_IMAGES_MAGIC => {
            let n = r.u32_be()? as usize;
            (n, 1, r.u32_be()? as usize, r.u32_be()? as usize)
        }
        IDX_IMAGES_RGB_MAGIC => {
            let n = r.u32_be()? as usize;
            (n, r.u32_be()? as usize, r.u32_be()? as usize, r.u32_be()? as usize)
        }
        other => {
            return Err(Error::format(
                0,
                format!("image magic {other:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
            ))
        }
    };
    if n == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::format(4, format!("empty image dimensions {n}×{c}×{h}×{w}")));
    }
    let payload = r.take(n * c * h * w)?;
    if r.pos != img_bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after image payload"));
    }
    let pixels: Vec<f32> = payload.iter().map(|&b| b as f32 / 255.0).collect();

    let lbl_bytes = read_file(labels_path)?;
    let mut r = Reader {
        bytes: &lbl_bytes,
        pos: 0,
    };
    let magic = r.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            0,
            format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let count = r.u32_be()? as usize;
    if count != n {
        return Err(Error::format(4, format!("{count} labels for {n} images")));
    }
    let classes_raw = r.take(n)?;
    if r.pos != lbl_bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after label payload"));
    }
    let max = *classes_raw.iter().max().expect("n ≥ 1") as usize;
    let classes = num_classes.unwrap_or((max + 1).max(2));
    if max >= classes {
        return Err(Error::format(8, format!("label {max} outside {classes} classes")));
    }
    let mut labels = vec![0.0; n * classes];
    for (i, &k) in classes_raw.iter().enumerate() {
        labels[i * classes + k as usize] = 1.0;
    }
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(
        Tensor::new(&[n, c, h, w], pixels, false)?,
        labels,
        DatasetMeta {
            name,
            num_classes: classes,
            source: images_path.display().to_string(),
        },
    )
}

/// Writes `dataset` as IDX files, quantising pixels to bytes.
pub fn save_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let [c, h, w] = dataset.image_shape();
    let n = dataset.len();
    let mut out = Vec::with_capacity(20 + dataset.images.len());
    let dims: Vec<u32> = if c == 1 {
        out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        vec![n as u32, h as u32, w as u32]
    } else {
        out.extend_from_slice(&IDX_IMAGES_RGB_MAGIC.to_be_bytes());
        vec![n as u32, c as u32, h as u32, w as u32]
    };
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend(dataset.images.data().iter().map(|&p| (p * 255.0).round() as u8));
    fs::write(images_path, &out).map_err(|e| Error::io(images_path, e))?;

    let mut out = Vec::with_capacity(8 + n);
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    if dataset.num_classes() > 256 {
        return Err(Error::contract("IDX labels hold at most 256 classes"));
    }
    out.extend((0..n).map(|i| dataset.class_of(i) as u8));
    fs::write(labels_path, &out).map_err(|e| Error::io(labels_path, e))
}

pub const GLYPH_NAMES: [&str; 10] = [
    "bar", "cross", "circle", "corner", "diagonal", "tee", "ell", "dot_grid", "cup", "zed",
];

/// Whether template `class` covers the point `(u, v)` of the `[-1,1]²` canvas
/// (`u` to the right, `v` downwards).
fn glyph_covers(class: usize, u: f64, v: f64) -> bool {
    const T: f64 = 0.2;
    let hbar = |y: f64, x0: f64, x1: f64| (v - y).abs() < T && (x0..=x1).contains(&u);
    let vbar = |x: f64, y0: f64, y1: f64| (u - x).abs() < T && (y0..=y1).contains(&v);
    let inside = u.abs() <= 0.7 && v.abs() <= 0.7;
    match class {
        0 => vbar(0.0, -0.7, 0.7),
        1 => vbar(0.0, -0.7, 0.7) || hbar(0.0, -0.7, 0.7),
        2 => ((u * u + v * v).sqrt() - 0.55).abs() < T,
        3 => hbar(-0.55, -0.6, 0.6) || vbar(0.55, -0.6, 0.6),
        4 => inside && (u - v).abs() / std::f64::consts::SQRT_2 < T,
        5 => hbar(-0.55, -0.65, 0.65) || vbar(0.0, -0.55, 0.7),
        6 => vbar(-0.5, -0.7, 0.6) || hbar(0.55, -0.5, 0.6),
        7 => {
            let centre = |x: f64| ((x / 0.5).round() * 0.5).clamp(-0.5, 0.5);
            (u - centre(u)).powi(2) + (v - centre(v)).powi(2) < 0.14 * 0.14
        }
        8 => vbar(-0.5, -0.7, 0.6) || vbar(0.5, -0.7, 0.6) || hbar(0.55, -0.5, 0.5),
        9 => hbar(-0.55, -0.6, 0.6) || hbar(0.55, -0.6, 0.6) || (inside && (u + v).abs() / std::f64::consts::SQRT_2 < T),
        _ => false,
    }
}

/// Renders glyph `class` on a `size × size` canvas, shifted by `(dx, dy)`
/// pixels and rotated by `degrees` about the centre.
pub fn render_glyph(class: usize, size: usize, dx: i64, dy: i64, degrees: f64) -> Result<Vec<f32>> {
    if class >= GLYPH_NAMES.len() {
        return Err(Error::contract(format!(
            "glyph class {class}; only {} templates exist",
            GLYPH_NAMES.len()
        )));
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let half = size as f64 / 2.0;
    let mut out = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let px = x as f64 + 0.5 - half - dx as f64;
            let py = y as f64 + 0.5 - half - dy as f64;
            let (rx, ry) = (cos * px + sin * py, -sin * px + cos * py);
            if glyph_covers(class, rx / half, ry / half) {
                out[y * size + x] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Balanced synthetic task: sample `i` has class `i mod C`, a random shift of
/// up to `size/8` pixels, a rotation within ±15° and clipped Gaussian noise.
pub fn gen_glyphs(num_classes: usize, n: usize, size: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if num_classes < 2 || num_classes > GLYPH_NAMES.len() {
        return Err(Error::contract(format!(
            "glyph task supports 2..={} classes, got {num_classes}",
            GLYPH_NAMES.len()
        )));
    }
    if size < 8 {
        return Err(Error::contract(format!("glyph size {size} below 8")));
    }
    if n == 0 || !(noise >= 0.0) {
        return Err(Error::contract("glyph task needs n ≥ 1 and noise ≥ 0"));
    }
    let shift = (size / 8) as i64;
    let mut pixels = Vec::with_capacity(n * size * size);
    let mut labels = vec![0.0f32; n * num_classes];
    for i in 0..n {
        let class = i % num_classes;
        let mut rng = RngStream::derive(seed, "glyph", 0, i as u64);
        let dx = rng.below(2 * shift as usize + 1) as i64 - shift;
        let dy = rng.below(2 * shift as usize + 1) as i64 - shift;
        let degrees = (rng.uniform() * 2.0 - 1.0) * 15.0;
        let img = render_glyph(class, size, dx, dy, degrees)?;
        pixels.extend(img.into_iter().map(|p| {
            if noise == 0.0 {
                p
            } else {
                (p as f64 + noise * rng.normal()).clamp(0.0, 1.0) as f32
            }
        }));
        labels[i * num_classes + class] = 1.0;
    }
    Dataset::new(
        Tensor::new(&[n, 1, size, size], pixels, false)?,
        labels,
        DatasetMeta {
            name: "glyphs".into(),
            num_classes,
            source: format!("gen_glyphs(classes={num_classes}, n={n}, size={size}, noise={noise}, seed={seed})"),
        },
    )
}
