//! Datasets: IDX reading and writing, and the synthetic glyph generator.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ImageShape, Tensor};

pub const IDX_UBYTE: u8 = 0x08;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGE3_MAGIC: u32 = 0x0000_0803;
pub const IDX_IMAGE4_MAGIC: u32 = 0x0000_0804;
pub const METADATA_FILE: &str = "dataset.toml";
pub const NORMALIZATION: &str = "divide-by-255";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn file_prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

/// Images in `[0, 1]` with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: Split) -> Result<Self> {
        let s = images.shape4()?;
        if s.batch != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                s.batch,
                labels.len()
            )));
        }
        Ok(Self { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn image_shape(&self) -> ImageShape {
        let s = self.images.shape();
        ImageShape::new(s[1], s[2], s[3])
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let len = self.image_shape().len();
        &self.images.data()[index * len..(index + 1) * len]
    }

    /// Stacks the selected images into a `[B,C,H,W]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let shape = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * shape.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("sample {i} out of range")));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let s = shape.with_batch(indices.len());
        Ok((Tensor::new(s.dims().to_vec(), data)?, labels))
    }

    /// One past the largest label present.
    pub fn label_bound(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Applies `f` to every image; `f` must preserve the image length.
    pub fn map_images<F>(&self, mut f: F) -> Result<Dataset>
    where
        F: FnMut(usize, &[f32]) -> Vec<f32>,
    {
        let len = self.image_shape().len();
        let mut data = Vec::with_capacity(self.images.len());
        for i in 0..self.len() {
            let out = f(i, self.image(i));
            if out.len() != len {
                return Err(Error::InvalidShape("image transform changed the image size".into()));
            }
            data.extend(out);
        }
        Dataset::new(Tensor::new(self.images.shape().to_vec(), data)?, self.labels.clone(), self.split)
    }

    pub fn take(&self, count: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..count.min(self.len())).collect();
        let (images, labels) = self.batch(&idx)?;
        Dataset::new(images, labels, self.split)
    }

    /// SHA-256 over the image extents, pixel values and labels, hex encoded.
    pub fn dataset_id(&self) -> String {
        let mut h = Sha256::new();
        for d in self.images.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        for l in &self.labels {
            h.update((*l as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.images
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated(what.to_string()))
}

fn check_magic(found: u32, expected: &[u32], path: &Path) -> Result<()> {
    if !expected.contains(&found) {
        let want: Vec<String> = expected.iter().map(|m| format!("{m:#010x}")).collect();
        return Err(Error::BadMagic {
            expected: want.join(" or "),
            found: format!("{found:#010x} in {}", path.display()),
        });
    }
    Ok(())
}

/// Reads a big-endian IDX unsigned-byte array, returning its extents and payload.
pub fn read_idx(path: &Path, expected_magic: &[u32]) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let magic = read_u32(&bytes, 0, "IDX header")?;
    check_magic(magic, expected_magic, path)?;
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims)
        .map(|k| read_u32(&bytes, 4 + 4 * k, "IDX extents").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndims;
    let len: usize = dims.iter().product();
    let payload = bytes
        .get(start..start + len)
        .ok_or_else(|| Error::Truncated(format!("IDX payload in {}", path.display())))?;
    Ok((dims, payload.to_vec()))
}

pub fn write_idx(path: &Path, dims: &[usize], payload: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + payload.len());
    out.extend_from_slice(&[0, 0, IDX_UBYTE, dims.len() as u8]);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    fs::write(path, out)?;
    Ok(())
}

/// Loads an IDX image/label pair, scaling pixels by `1/255`.
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let (dims, pixels) = read_idx(images_path, &[IDX_IMAGE3_MAGIC, IDX_IMAGE4_MAGIC])?;
    let (ldims, labels) = read_idx(labels_path, &[IDX_LABEL_MAGIC])?;
    let shape = match dims[..] {
        [n, h, w] => vec![n, 1, h, w],
        [n, c, h, w] => vec![n, c, h, w],
        _ => unreachable!("magic fixes the rank"),
    };
    if shape[0] != ldims[0] {
        return Err(Error::Dataset(format!(
            "{} images but {} labels",
            shape[0], ldims[0]
        )));
    }
    let data = pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
    Dataset::new(
        Tensor::new(shape, data)?,
        labels.into_iter().map(usize::from).collect(),
        split,
    )
}

pub fn idx_paths(dir: &Path, split: Split, channels: usize) -> (PathBuf, PathBuf) {
    let p = split.file_prefix();
    let rank = if channels == 1 { 3 } else { 4 };
    (
        dir.join(format!("{p}-images-idx{rank}-ubyte")),
        dir.join(format!("{p}-labels-idx1-ubyte")),
    )
}

/// Writes one split in IDX form, quantizing pixels to `round(255 v)`.
pub fn save_idx_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let s = data.image_shape();
    let (img, lab) = idx_paths(dir, data.split(), s.channels);
    let dims = if s.channels == 1 {
        vec![data.len(), s.height, s.width]
    } else {
        vec![data.len(), s.channels, s.height, s.width]
    };
    write_idx(&img, &dims, &data.to_bytes())?;
    let labels = data
        .labels()
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::Dataset(format!("label {l} does not fit a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    write_idx(&lab, &[data.len()], &labels)
}

/// Loads one split from a directory, trying the 3-d then the 4-d image file.
pub fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    let (img3, lab) = idx_paths(dir, split, 1);
    let (img4, _) = idx_paths(dir, split, 3);
    let img = if img3.exists() { img3 } else { img4 };
    load_idx_dataset(&img, &lab, split)
}

/// Sidecar describing how a dataset directory was produced.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kind: String,
    pub family: String,
    pub classes: usize,
    pub seed: Option<u64>,
    pub size: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub normalization: String,
}

impl DatasetMeta {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Dataset(e.to_string()))?;
        fs::write(dir.join(METADATA_FILE), text)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(METADATA_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map(Some).map_err(|e| Error::Dataset(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlyphPlacement {
    /// Glyph centred, jittered by at most one pixel.
    Centered,
    /// Glyph anywhere it fits, uniformly.
    Uniform,
}

impl std::str::FromStr for GlyphPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "centered" => Ok(Self::Centered),
            "uniform" => Ok(Self::Uniform),
            other => Err(Error::InvalidArgument(format!("unknown synthetic kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for GlyphPlacement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Centered => "centered",
            Self::Uniform => "uniform",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticConfig {
    pub kind: GlyphPlacement,
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub size: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(kind: GlyphPlacement, seed: u64) -> Self {
        Self { kind, classes: 10, n_train: 2000, n_test: 500, size: 24, seed }
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            kind: self.kind.to_string(),
            family: "synthetic".into(),
            classes: self.classes,
            seed: Some(self.seed),
            size: self.size,
            n_train: self.n_train,
            n_test: self.n_test,
            normalization: NORMALIZATION.into(),
        }
    }
}

/// Pixel box `[top, top + height) x [left, left + width)` of a drawn glyph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GlyphBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl GlyphBox {
    pub fn centroid(&self) -> (f64, f64) {
        (
            self.top as f64 + self.height as f64 / 2.0,
            self.left as f64 + self.width as f64 / 2.0,
        )
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub train: Dataset,
    pub test: Dataset,
    pub train_boxes: Vec<GlyphBox>,
    pub test_boxes: Vec<GlyphBox>,
}

/// 5x7 bitmaps of the digits 0-9, one row per byte (low five bits).
const GLYPHS: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
];

pub const MAX_SYNTHETIC_CLASSES: usize = GLYPHS.len();

fn glyph_scale(size: usize) -> usize {
    (size / 12).max(1)
}

fn render(cfg: &SyntheticConfig, label: usize, rng: &mut ChaCha8Rng, out: &mut Vec<u8>) -> GlyphBox {
    let size = cfg.size;
    let scale = glyph_scale(size);
    let (gh, gw) = (7 * scale, 5 * scale);
    let (top, left) = match cfg.kind {
        GlyphPlacement::Centered => {
            let jy: i64 = rng.gen_range(-1..=1);
            let jx: i64 = rng.gen_range(-1..=1);
            let cy = (size - gh) as i64 / 2 + jy;
            let cx = (size - gw) as i64 / 2 + jx;
            (cy.clamp(0, (size - gh) as i64) as usize, cx.clamp(0, (size - gw) as i64) as usize)
        }
        GlyphPlacement::Uniform => (rng.gen_range(0..=size - gh), rng.gen_range(0..=size - gw)),
    };
    let intensity: u8 = rng.gen_range(140..=255);
    let base = out.len();
    out.resize(base + size * size, 0);
    for (r, bits) in GLYPHS[label].iter().enumerate() {
        for c in 0..5 {
            if bits & (1 << (4 - c)) == 0 {
                continue;
            }
            for dy in 0..scale {
                for dx in 0..scale {
                    let y = top + r * scale + dy;
                    let x = left + c * scale + dx;
                    out[base + y * size + x] = intensity;
                }
            }
        }
    }
    GlyphBox { top, left, height: gh, width: gw }
}

fn generate_split(cfg: &SyntheticConfig, count: usize, split: Split, stream: u64) -> Result<(Dataset, Vec<GlyphBox>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let mut labels: Vec<usize> = (0..count).map(|i| i % cfg.classes).collect();
    labels.shuffle(&mut rng);
    let mut pixels = Vec::with_capacity(count * cfg.size * cfg.size);
    let boxes = labels.iter().map(|&l| render(cfg, l, &mut rng, &mut pixels)).collect();
    let data = pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
    let images = Tensor::new(vec![count, 1, cfg.size, cfg.size], data)?;
    Ok((Dataset::new(images, labels, split)?, boxes))
}

/// Deterministic single-channel glyph datasets (digits drawn from a 5x7
/// font, scaled to the canvas).
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    if cfg.classes < 2 || cfg.classes > MAX_SYNTHETIC_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "synthetic data supports 2..={MAX_SYNTHETIC_CLASSES} classes"
        )));
    }
    let scale = glyph_scale(cfg.size);
    if cfg.size < 7 * scale + 2 {
        return Err(Error::InvalidArgument(format!("canvas {} too small for glyphs", cfg.size)));
    }
    let (train, train_boxes) = generate_split(cfg, cfg.n_train, Split::Train, 1)?;
    let (test, test_boxes) = generate_split(cfg, cfg.n_test, Split::Test, 2)?;
    Ok(SyntheticData { train, test, train_boxes, test_boxes })
}
