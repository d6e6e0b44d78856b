//! Synthetic shape datasets, the binary dataset file format, a shuffling
//! loader with flip/crop augmentation, and PPM export.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

pub const DATASET_MAGIC: &[u8; 4] = b"CMAE";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 5 + 1;

/// Shape classes of the labeled task.
pub const CLASS_NAMES: [&str; 4] = ["rectangle", "circle", "triangle", "gradient_bar"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("bad magic {found:?} at byte 0, expected \"CMAE\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported dataset version {found} at byte 4")]
    Version { found: u32 },
    #[error("file truncated at byte {offset}: {what} needs {needed} bytes, {available} remain")]
    Truncated { offset: usize, what: &'static str, needed: usize, available: usize },
    #[error("{extra} unexpected trailing bytes at byte {offset}")]
    Trailing { offset: usize, extra: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("dataset has no labels")]
    Unlabeled,
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// Images stored as `u8` in `[count, height, width, channels]` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
    pub labels: Option<Vec<u8>>,
}

impl Dataset {
    pub fn empty(height: usize, width: usize, channels: usize, labeled: bool) -> Self {
        Dataset { height, width, channels, pixels: Vec::new(), labels: labeled.then(Vec::new) }
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.image_len().max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> Option<u8> {
        self.labels.as_ref().map(|l| l[i])
    }

    /// Images `indices` as `[B, H, W, C]` in `[0, 1]`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&b| T::from_f64(b as f64 / 255.0)));
        }
        Tensor::new(vec![indices.len(), self.height, self.width, self.channels], data).expect("consistent batch shape")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.pixels.len() + self.len());
        out.extend_from_slice(DATASET_MAGIC);
        for v in [DATASET_VERSION, self.len() as u32, self.height as u32, self.width as u32, self.channels as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.labels.is_some() as u8);
        out.extend_from_slice(&self.pixels);
        if let Some(labels) = &self.labels {
            out.extend_from_slice(labels);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let take = |offset: usize, len: usize, what: &'static str| -> Result<&[u8]> {
            bytes.get(offset..offset + len).ok_or(DataError::Truncated {
                offset,
                what,
                needed: len,
                available: bytes.len().saturating_sub(offset),
            })
        };
        let magic = take(0, 4, "magic")?;
        if magic != DATASET_MAGIC {
            return Err(DataError::BadMagic { found: magic.to_vec() });
        }
        let word = |offset: usize, what| -> Result<usize> {
            Ok(u32::from_le_bytes(take(offset, 4, what)?.try_into().expect("4 bytes")) as usize)
        };
        let version = word(4, "version")? as u32;
        if version != DATASET_VERSION {
            return Err(DataError::Version { found: version });
        }
        let count = word(8, "count")?;
        let (height, width, channels) = (word(12, "height")?, word(16, "width")?, word(20, "channels")?);
        let labeled = take(24, 1, "label flag")?[0];
        if labeled > 1 {
            return Err(DataError::Invalid(format!("label flag {labeled} at byte 24")));
        }
        let payload = count * height * width * channels;
        let pixels = take(HEADER_LEN, payload, "pixels")?.to_vec();
        let mut end = HEADER_LEN + payload;
        let labels = if labeled == 1 {
            let l = take(end, count, "labels")?.to_vec();
            end += count;
            Some(l)
        } else {
            None
        };
        if end != bytes.len() {
            return Err(DataError::Trailing { offset: end, extra: bytes.len() - end });
        }
        Ok(Dataset { height, width, channels, pixels, labels })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }

    /// Hex SHA-256 of the serialized dataset.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }

    /// Copy restricted to `indices`.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Dataset { height: self.height, width: self.width, channels: self.channels, pixels, labels }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Imports every regular file in `dir` (sorted by name) as one raw
/// `height·width·channels`-byte image.
pub fn import_raw_dir(dir: &Path, height: usize, width: usize, channels: usize) -> Result<Dataset> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut ds = Dataset::empty(height, width, channels, false);
    for f in files {
        let bytes = fs::read(&f).map_err(io_err(&f))?;
        if bytes.len() != ds.image_len() {
            return Err(DataError::Invalid(format!(
                "{}: {} bytes, expected {}x{}x{} = {}",
                f.display(),
                bytes.len(),
                height,
                width,
                channels,
                ds.image_len()
            )));
        }
        ds.pixels.extend(bytes);
    }
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Synthetic generator

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { cx: f64, cy: f64, hw: f64, hh: f64, angle: f64 },
    Circle { cx: f64, cy: f64, r: f64 },
    Triangle { pts: [(f64, f64); 3] },
    Bar { cx: f64, cy: f64, half_len: f64, half_width: f64, angle: f64 },
}

fn rotate(x: f64, y: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (c * x + s * y, -s * x + c * y)
}

fn box_sdf(px: f64, py: f64, hw: f64, hh: f64) -> f64 {
    let (qx, qy) = (px.abs() - hw, py.abs() - hh);
    let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
    outside + qx.max(qy).min(0.0)
}

impl Shape {
    fn random(class: usize, rng: &mut ChaCha8Rng, size: f64, h: f64, w: f64) -> Shape {
        let scale = size * h.min(w);
        let cx = rng.gen_range(0.25..0.75) * w;
        let cy = rng.gen_range(0.25..0.75) * h;
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        match class {
            0 => Shape::Rect {
                cx,
                cy,
                hw: scale * rng.gen_range(0.6..1.0),
                hh: scale * rng.gen_range(0.6..1.0),
                angle,
            },
            1 => Shape::Circle { cx, cy, r: scale * rng.gen_range(0.8..1.1) },
            2 => {
                let r = scale * rng.gen_range(0.9..1.3);
                let pts = [0.0, 1.0, 2.0].map(|k| {
                    let a = angle + k * 2.0 * std::f64::consts::PI / 3.0 + rng.gen_range(-0.2..0.2);
                    (cx + r * a.cos(), cy + r * a.sin())
                });
                Shape::Triangle { pts }
            }
            _ => Shape::Bar {
                cx,
                cy,
                half_len: scale * rng.gen_range(1.3..1.8),
                half_width: scale * rng.gen_range(0.25..0.4),
                angle,
            },
        }
    }

    /// Signed distance in pixels (negative inside) and position along the
    /// shape's main axis in `[0, 1]`.
    fn sdf(&self, x: f64, y: f64) -> (f64, f64) {
        match *self {
            Shape::Rect { cx, cy, hw, hh, angle } => {
                let (px, py) = rotate(x - cx, y - cy, angle);
                (box_sdf(px, py, hw, hh), 0.5)
            }
            Shape::Circle { cx, cy, r } => (((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r, 0.5),
            Shape::Triangle { pts } => {
                // max of signed edge distances (exact inside, close enough outside)
                let area = (pts[1].0 - pts[0].0) * (pts[2].1 - pts[0].1) - (pts[1].1 - pts[0].1) * (pts[2].0 - pts[0].0);
                let orient = area.signum();
                let mut d = f64::NEG_INFINITY;
                for i in 0..3 {
                    let (a, b) = (pts[i], pts[(i + 1) % 3]);
                    let (ex, ey) = (b.0 - a.0, b.1 - a.1);
                    let len = (ex * ex + ey * ey).sqrt().max(1e-9);
                    let cross = ex * (y - a.1) - ey * (x - a.0);
                    d = d.max(-orient * cross / len);
                }
                (d, 0.5)
            }
            Shape::Bar { cx, cy, half_len, half_width, angle } => {
                let (px, py) = rotate(x - cx, y - cy, angle);
                (box_sdf(px, py, half_len, half_width), ((px / half_len) * 0.5 + 0.5).clamp(0.0, 1.0))
            }
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn synth_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> (Vec<u8>, u8) {
    let (hf, wf) = (h as f64, w as f64);
    let bg_a = random_color(rng);
    let bg_b = random_color(rng);
    let bg_angle: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    let label = rng.gen_range(0..4usize);
    let extras = rng.gen_range(1..=4usize);
    let mut layers: Vec<(Shape, [f64; 3], [f64; 3])> = (0..extras)
        .map(|_| {
            let class = rng.gen_range(0..4usize);
            let size = rng.gen_range(0.08..0.16);
            (Shape::random(class, rng, size, hf, wf), random_color(rng), random_color(rng))
        })
        .collect();
    // the dominant shape is the largest and drawn last
    let size = rng.gen_range(0.26..0.34);
    layers.push((Shape::random(label, rng, size, hf, wf), random_color(rng), random_color(rng)));

    let (gs, gc) = bg_angle.sin_cos();
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = (((fx / wf - 0.5) * gc + (fy / hf - 0.5) * gs) * 0.7 + 0.5).clamp(0.0, 1.0);
            let mut px: [f64; 3] = std::array::from_fn(|k| bg_a[k] * (1.0 - t) + bg_b[k] * t);
            for (shape, ca, cb) in &layers {
                let (d, along) = shape.sdf(fx, fy);
                let cover = (0.5 - d).clamp(0.0, 1.0);
                if cover > 0.0 {
                    for k in 0..3 {
                        let col = match shape {
                            Shape::Bar { .. } => ca[k] * (1.0 - along) + cb[k] * along,
                            _ => ca[k],
                        };
                        px[k] = px[k] * (1.0 - cover) + col * cover;
                    }
                }
            }
            for k in 0..c {
                let v = if c == 1 { (px[0] + px[1] + px[2]) / 3.0 } else { px[k % 3] };
                out.push(quantize(v));
            }
        }
    }
    (out, label as u8)
}

/// Seeded synthetic dataset: every image holds 2 to 5 anti-aliased shapes
/// over a gradient background; the label is the class of the largest shape.
pub fn gen_synthetic(count: usize, height: usize, width: usize, channels: usize, seed: u64, labeled: bool) -> Dataset {
    let mut ds = Dataset::empty(height, width, channels, labeled);
    ds.pixels.reserve(count * ds.image_len());
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let (img, label) = synth_image(&mut rng, height, width, channels);
        ds.pixels.extend(img);
        labels.push(label);
    }
    if labeled {
        ds.labels = Some(labels);
    }
    ds
}

// ---------------------------------------------------------------------------
// Loader

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augment {
    pub flip: bool,
    /// Pad by this many edge-replicated pixels, then crop back at a random offset.
    pub crop_pad: usize,
}

/// One delivered batch.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub indices: Vec<usize>,
    pub images: Tensor<T>,
    pub labels: Option<Vec<usize>>,
}

/// Seeded, per-epoch shuffling batch iterator. The order is a pure function
/// of `(dataset, epoch, seed)`.
#[derive(Debug, Clone)]
pub struct Loader<'a> {
    pub dataset: &'a Dataset,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: Augment,
    pub drop_last: bool,
}

impl<'a> Loader<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, seed: u64) -> Self {
        Loader { dataset, batch_size: batch_size.max(1), seed, augment: Augment::default(), drop_last: true }
    }

    pub fn with_augment(mut self, augment: Augment) -> Self {
        self.augment = augment;
        self
    }

    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        order
    }

    pub fn batches_per_epoch(&self) -> usize {
        let n = self.dataset.len();
        if self.drop_last {
            n / self.batch_size
        } else {
            n.div_ceil(self.batch_size)
        }
    }

    pub fn epoch<T: Scalar>(&self, epoch: usize) -> impl Iterator<Item = Batch<T>> + '_ {
        let order = self.epoch_order(epoch);
        let count = self.batches_per_epoch();
        (0..count).map(move |b| {
            let end = ((b + 1) * self.batch_size).min(order.len());
            let indices = order[b * self.batch_size..end].to_vec();
            self.make_batch(&indices, epoch)
        })
    }

    fn make_batch<T: Scalar>(&self, indices: &[usize], epoch: usize) -> Batch<T> {
        let ds = self.dataset;
        let (h, w, c) = (ds.height, ds.width, ds.channels);
        let mut data = Vec::with_capacity(indices.len() * ds.image_len());
        for &i in indices {
            let img = ds.image(i);
            let (mut flip, mut dy, mut dx) = (false, 0isize, 0isize);
            if self.augment.flip || self.augment.crop_pad > 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
                rng.set_stream(((epoch as u64) << 32) | i as u64);
                flip = self.augment.flip && rng.gen_bool(0.5);
                let pad = self.augment.crop_pad as isize;
                if pad > 0 {
                    dy = rng.gen_range(-pad..=pad);
                    dx = rng.gen_range(-pad..=pad);
                }
            }
            for y in 0..h {
                let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                for x in 0..w {
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = (xx as isize + dx).clamp(0, w as isize - 1) as usize;
                    let at = (sy * w + sx) * c;
                    data.extend(img[at..at + c].iter().map(|&b| T::from_f64(b as f64 / 255.0)));
                }
            }
        }
        let images = Tensor::new(vec![indices.len(), h, w, c], data).expect("consistent batch shape");
        let labels = ds.labels.as_ref().map(|l| indices.iter().map(|&i| l[i] as usize).collect());
        Batch { indices: indices.to_vec(), images, labels }
    }
}

// ---------------------------------------------------------------------------
// PPM export

/// Clamp to `[0, 1]`, then round half up to a byte.
pub fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

/// Binary PPM (P6, maxval 255) of an `[H, W, 3]` image with values in `[0, 1]`.
pub fn ppm_bytes(image: &Tensor<f64>) -> io::Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("PPM needs an [H, W, 3] image, got {s:?}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn write_ppm(image: &Tensor<f64>, path: &Path) -> io::Result<()> {
    let bytes = ppm_bytes(image)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()
}
