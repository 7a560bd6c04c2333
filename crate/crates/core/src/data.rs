//! IDX dataset loading, per-pixel mean subtraction and augmentation.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::Rng;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
/// Maximum translation applied by [`augment`], in pixels.
pub const MAX_SHIFT: i32 = 2;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{}: bad magic 0x{found:08x}, expected 0x{expected:08x}", path.display())]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{}: truncated, expected {expected} bytes but found {actual}", path.display())]
    Truncated { path: PathBuf, expected: usize, actual: usize },
    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{}: file not found", .0.display())]
    Missing(PathBuf),
    #[error("{}: {source}", path.display())]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Malformed { path: PathBuf, message: String },
}

/// One split: `n` images of `rows x cols` stored row-major, one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    /// `[N, 1, rows, cols]` batch of the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let p = self.pixels();
        let mut data = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Invalid(format!("sample {i} out of range for {} samples", self.len())));
            }
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![indices.len(), 1, self.rows, self.cols], data)
    }

    /// First `n` samples (or all of them).
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.labels.truncate(n);
            self.images.truncate(n * self.pixels());
        }
    }

    pub fn class_count(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    /// Train-split mean image when mean subtraction has been applied.
    pub mean: Option<Vec<f32>>,
    pub n_classes: usize,
}

fn read_maybe_gz(path: &Path) -> std::result::Result<Vec<u8>, IdxError> {
    let raw = std::fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            IdxError::Missing(path.to_path_buf())
        } else {
            IdxError::Read { path: path.to_path_buf(), source }
        }
    })?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|source| IdxError::Read { path: path.to_path_buf(), source })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Parses an IDX payload with `magic` and `ndim` dimensions; returns dims
/// and the data bytes.
fn parse_idx<'a>(path: &Path, bytes: &'a [u8], magic: u32, ndim: usize) -> std::result::Result<(Vec<usize>, &'a [u8]), IdxError> {
    let header = 4 + 4 * ndim;
    if bytes.len() < 4 {
        return Err(IdxError::Truncated { path: path.into(), expected: header, actual: bytes.len() });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(IdxError::BadMagic { path: path.into(), expected: magic, found });
    }
    if bytes.len() < header {
        return Err(IdxError::Truncated { path: path.into(), expected: header, actual: bytes.len() });
    }
    let dims: Vec<usize> = (0..ndim).map(|d| be_u32(bytes, 4 + 4 * d) as usize).collect();
    let payload: usize = dims.iter().product();
    let expected = header + payload;
    if bytes.len() < expected {
        return Err(IdxError::Truncated { path: path.into(), expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(IdxError::Malformed {
            path: path.into(),
            message: format!("{} trailing bytes after payload", bytes.len() - expected),
        });
    }
    Ok((dims, &bytes[header..]))
}

/// Reads an image file and a label file (optionally gzip-compressed).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> std::result::Result<Split, IdxError> {
    let img_bytes = read_maybe_gz(images_path)?;
    let lbl_bytes = read_maybe_gz(labels_path)?;
    let (dims, pixels) = parse_idx(images_path, &img_bytes, IMAGE_MAGIC, 3)?;
    let (ldims, labels) = parse_idx(labels_path, &lbl_bytes, LABEL_MAGIC, 1)?;
    if dims[0] != ldims[0] {
        return Err(IdxError::CountMismatch { images: dims[0], labels: ldims[0] });
    }
    if dims[0] == 0 || dims[1] == 0 || dims[2] == 0 {
        return Err(IdxError::Malformed { path: images_path.into(), message: format!("empty dims {dims:?}") });
    }
    Ok(Split {
        images: pixels.iter().map(|&b| b as f32 / 255.0).collect(),
        labels: labels.to_vec(),
        rows: dims[1],
        cols: dims[2],
    })
}

/// Finds `stem` or `stem.gz` inside `dir`.
fn locate(dir: &Path, stem: &str) -> std::result::Result<PathBuf, IdxError> {
    let plain = dir.join(stem);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    Err(IdxError::Missing(plain))
}

impl Dataset {
    /// Loads `train-*` and `t10k-*` IDX files from `dir`.
    pub fn load_dir(dir: &Path) -> std::result::Result<Self, IdxError> {
        if !dir.is_dir() {
            return Err(IdxError::Missing(dir.to_path_buf()));
        }
        let train = load_idx(
            &locate(dir, "train-images-idx3-ubyte")?,
            &locate(dir, "train-labels-idx1-ubyte")?,
        )?;
        let test = load_idx(
            &locate(dir, "t10k-images-idx3-ubyte")?,
            &locate(dir, "t10k-labels-idx1-ubyte")?,
        )?;
        if (train.rows, train.cols) != (test.rows, test.cols) {
            return Err(IdxError::Malformed {
                path: dir.into(),
                message: format!(
                    "train images are {}x{} but test images are {}x{}",
                    train.rows, train.cols, test.rows, test.cols
                ),
            });
        }
        let n_classes = train.class_count().max(test.class_count());
        Ok(Self { train, test, mean: None, n_classes })
    }

    pub fn from_splits(train: Split, test: Split) -> Result<Self> {
        if (train.rows, train.cols) != (test.rows, test.cols) || train.is_empty() {
            return Err(Error::Invalid("train and test splits must be nonempty and share an image shape".into()));
        }
        let n_classes = train.class_count().max(test.class_count());
        Ok(Self { train, test, mean: None, n_classes })
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &l in &self.train.labels {
            h[l as usize] += 1;
        }
        h
    }
}

/// Per-pixel mean over a split, accumulated in `f64`.
pub fn mean_image(split: &Split) -> Result<Vec<f32>> {
    if split.is_empty() {
        return Err(Error::Invalid("mean of an empty split".into()));
    }
    let p = split.pixels();
    let mut acc = vec![0.0f64; p];
    for img in split.images.chunks_exact(p) {
        for (a, v) in acc.iter_mut().zip(img) {
            *a += *v as f64;
        }
    }
    let n = split.len() as f64;
    Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Shifts both splits by the train-split mean. Disabled is the identity.
pub fn apply_mean_subtraction(mut ds: Dataset, enabled: bool) -> Result<Dataset> {
    if !enabled {
        return Ok(ds);
    }
    let mean = mean_image(&ds.train)?;
    subtract_mean(&mut ds.train, &mean);
    subtract_mean(&mut ds.test, &mean);
    ds.mean = Some(mean);
    Ok(ds)
}

pub fn subtract_mean(split: &mut Split, mean: &[f32]) {
    for img in split.images.chunks_exact_mut(mean.len()) {
        for (v, m) in img.iter_mut().zip(mean) {
            *v -= *m;
        }
    }
}

/// The transformation drawn for one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transform {
    pub dx: i32,
    pub dy: i32,
    pub flip: bool,
}

impl Transform {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            dx: rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
            dy: rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
            flip: rng.random_bool(0.5),
        }
    }

    /// Flip first, then translate with zero fill. A pixel moved to
    /// `(r + dy, c + dx)`.
    pub fn apply(&self, img: &[f32], rows: usize, cols: usize, out: &mut [f32]) {
        out.fill(0.0);
        for r in 0..rows {
            let tr = r as i32 + self.dy;
            if tr < 0 || tr >= rows as i32 {
                continue;
            }
            for c in 0..cols {
                let src_c = if self.flip { cols - 1 - c } else { c };
                let tc = c as i32 + self.dx;
                if tc < 0 || tc >= cols as i32 {
                    continue;
                }
                out[tr as usize * cols + tc as usize] = img[r * cols + src_c];
            }
        }
    }
}

/// Random ±2 px translation and horizontal flip per image of an
/// `N x C x H x W` batch, in place. All randomness comes from `rng`.
pub fn augment<R: Rng + ?Sized>(batch: &mut Tensor, rng: &mut R) -> Result<()> {
    let [n, c, h, w] = match *batch.shape() {
        [n, c, h, w] => [n, c, h, w],
        _ => return Err(Error::shape("augment batch", "rank 4 (N, C, H, W)", batch.shape())),
    };
    let plane = h * w;
    let mut scratch = vec![0.0f32; plane];
    let data = batch.data_mut();
    for s in 0..n {
        let t = Transform::sample(rng);
        for ch in 0..c {
            let img = &mut data[(s * c + ch) * plane..][..plane];
            t.apply(img, h, w, &mut scratch);
            img.copy_from_slice(&scratch);
        }
    }
    Ok(())
}
