//! Dataset ingestion (MNIST IDX, CIFAR-10 binary) and small synthetic generators.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{DataError, Error, Result};
use crate::models::LabeledBatch;

/// Environment variable consulted when no dataset root is given.
pub const DATA_ROOT_ENV: &str = "SCORPIO_DATA";

const IDX_U8: u8 = 0x08;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Decoded IDX file with unsigned-byte payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parse an IDX file; gzip-compressed input is detected from its header.
pub fn load_idx(path: &Path) -> Result<IdxArray> {
    let raw = read_maybe_gz(path)?;
    parse_idx(&raw, path)
}

pub fn parse_idx(raw: &[u8], path: &Path) -> Result<IdxArray> {
    let p = || path.to_path_buf();
    if raw.len() < 4 {
        return Err(DataError::Truncated { path: p(), expected: 4, found: raw.len() }.into());
    }
    let magic = u32::from_be_bytes(raw[..4].try_into().unwrap());
    if raw[0] != 0 || raw[1] != 0 || raw[2] != IDX_U8 {
        return Err(DataError::BadMagic { path: p(), found: magic }.into());
    }
    let ndim = raw[3] as usize;
    if ndim == 0 {
        return Err(DataError::EmptyDims { path: p() }.into());
    }
    let header = 4 + 4 * ndim;
    if raw.len() < header {
        return Err(DataError::Truncated { path: p(), expected: header, found: raw.len() }.into());
    }
    let dims: Vec<usize> = raw[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n.checked_add(header).is_some())
        .ok_or_else(|| DataError::DimOverflow { path: p() })?;
    let payload = &raw[header..];
    if payload.len() < n {
        return Err(DataError::Truncated { path: p(), expected: n, found: payload.len() }.into());
    }
    if payload.len() > n {
        return Err(DataError::TrailingBytes { path: p(), extra: payload.len() - n }.into());
    }
    Ok(IdxArray { dims, data: payload.to_vec() })
}

pub fn encode_idx(dims: &[usize], data: &[u8]) -> Result<Vec<u8>> {
    if dims.is_empty() || dims.len() > 255 {
        return Err(Error::InvalidArgument("IDX needs between 1 and 255 dimensions".into()));
    }
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::shape("write_idx", format!("dims {dims:?} vs {} bytes", data.len())));
    }
    let mut out = vec![0, 0, IDX_U8, dims.len() as u8];
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("IDX dim {d} too large")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(data);
    Ok(out)
}

/// Write an IDX file, gzip-compressed when the path ends in `.gz`.
pub fn write_idx(path: &Path, dims: &[usize], data: &[u8]) -> Result<()> {
    let bytes = encode_idx(dims, data)?;
    let ctx = || format!("writing {}", path.display());
    let file = std::fs::File::create(path).map_err(|e| Error::io(ctx(), e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(file, flate2::Compression::default());
        enc.write_all(&bytes).map_err(|e| Error::io(ctx(), e))?;
        enc.finish().map_err(|e| Error::io(ctx(), e))?;
    } else {
        let mut f = file;
        f.write_all(&bytes).map_err(|e| Error::io(ctx(), e))?;
    }
    Ok(())
}

/// IDX image file as `[n, rows * cols]` in `[0, 1]`.
pub fn load_idx_images(path: &Path) -> Result<(Tensor<f32>, Vec<usize>)> {
    let a = load_idx(path)?;
    if a.dims.len() < 2 {
        return Err(DataError::Mismatch(format!("{}: expected image tensor, got dims {:?}", path.display(), a.dims)).into());
    }
    let n = a.dims[0];
    let per: usize = a.dims[1..].iter().product();
    let data = a.data.iter().map(|&b| b as f32 / 255.0).collect();
    Ok((Tensor::new(vec![n, per], data)?, a.dims[1..].to_vec()))
}

pub fn load_idx_labels(path: &Path, classes: usize) -> Result<Vec<usize>> {
    let a = load_idx(path)?;
    if a.dims.len() != 1 {
        return Err(DataError::Mismatch(format!("{}: expected label vector, got dims {:?}", path.display(), a.dims)).into());
    }
    a.data
        .iter()
        .map(|&b| {
            let label = b as usize;
            if label >= classes {
                Err(DataError::LabelRange { path: path.to_path_buf(), label, classes }.into())
            } else {
                Ok(label)
            }
        })
        .collect()
}

/// CIFAR-10 binary batch: per record one label byte then 3x32x32 CHW pixels.
pub fn load_cifar_bin(path: &Path) -> Result<LabeledBatch<f32>> {
    let raw = std::fs::read(path).map_err(|e| missing_or_io(path, e))?;
    parse_cifar(&raw, path)
}

pub fn parse_cifar(raw: &[u8], path: &Path) -> Result<LabeledBatch<f32>> {
    if raw.is_empty() || raw.len() % CIFAR_RECORD != 0 {
        return Err(DataError::CifarSize { path: path.to_path_buf(), len: raw.len() }.into());
    }
    let n = raw.len() / CIFAR_RECORD;
    let mut x = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut y = Vec::with_capacity(n);
    for rec in raw.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(DataError::LabelRange { path: path.to_path_buf(), label, classes: 10 }.into());
        }
        y.push(label);
        x.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    LabeledBatch::new(Tensor::new(vec![n, CIFAR_RECORD - 1], x)?, y)
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| missing_or_io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| Error::io(format!("decompressing {}", path.display()), e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn missing_or_io(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        DataError::Missing(path.to_path_buf()).into()
    } else {
        Error::io(format!("reading {}", path.display()), e)
    }
}

/// Labeled splits with a common input shape.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub train: LabeledBatch<f32>,
    pub val: LabeledBatch<f32>,
    pub test: LabeledBatch<f32>,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    /// Valid input box (`[0, 1]` for images); `None` for unbounded synthetic inputs.
    pub input_range: Option<(f64, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &LabeledBatch<f32> {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// MNIST from `root`, accepting plain or `.gz` IDX files. The last `val_size` training
    /// examples form the validation split.
    pub fn mnist(root: &Path, val_size: usize) -> Result<Self> {
        let find = |stem: &str| -> Result<PathBuf> {
            let plain = root.join(stem);
            let gz = root.join(format!("{stem}.gz"));
            if plain.exists() {
                Ok(plain)
            } else if gz.exists() {
                Ok(gz)
            } else {
                Err(DataError::Missing(plain).into())
            }
        };
        let (train_x, shape) = load_idx_images(&find("train-images-idx3-ubyte")?)?;
        let train_y = load_idx_labels(&find("train-labels-idx1-ubyte")?, 10)?;
        let (test_x, test_shape) = load_idx_images(&find("t10k-images-idx3-ubyte")?)?;
        let test_y = load_idx_labels(&find("t10k-labels-idx1-ubyte")?, 10)?;
        if shape != test_shape {
            return Err(DataError::Mismatch(format!("train images {shape:?} vs test images {test_shape:?}")).into());
        }
        let train = labeled(train_x, train_y, "MNIST train")?;
        let test = labeled(test_x, test_y, "MNIST test")?;
        let input_shape = std::iter::once(1).chain(shape).collect();
        Self::with_validation("mnist", train, test, input_shape, 10, val_size)
    }

    /// CIFAR-10 binary batches `data_batch_{1..5}.bin` and `test_batch.bin`.
    pub fn cifar10(root: &Path, val_size: usize) -> Result<Self> {
        let mut parts = Vec::new();
        for i in 1..=5 {
            parts.push(load_cifar_bin(&root.join(format!("data_batch_{i}.bin")))?);
        }
        let xs: Vec<&Tensor<f32>> = parts.iter().map(|p| &p.x).collect();
        let train = LabeledBatch::new(Tensor::concat_rows(&xs)?, parts.iter().flat_map(|p| p.y.clone()).collect())?;
        let test = load_cifar_bin(&root.join("test_batch.bin"))?;
        Self::with_validation("cifar10", train, test, vec![3, 32, 32], 10, val_size)
    }

    pub fn with_validation(
        name: &str,
        train: LabeledBatch<f32>,
        test: LabeledBatch<f32>,
        input_shape: Vec<usize>,
        classes: usize,
        val_size: usize,
    ) -> Result<Self> {
        if val_size >= train.len() {
            return Err(DataError::Mismatch(format!(
                "validation size {val_size} leaves no training data out of {}",
                train.len()
            ))
            .into());
        }
        let cut = train.len() - val_size;
        Ok(Dataset {
            name: name.to_string(),
            val: train.slice(cut, train.len()),
            train: train.slice(0, cut),
            test,
            input_shape,
            classes,
            input_range: Some((0.0, 1.0)),
        })
    }

    /// Keep the first `train`, `val` and `test` examples of each split.
    pub fn truncate(mut self, train: usize, val: usize, test: usize) -> Self {
        let cut = |b: &LabeledBatch<f32>, n: usize| b.slice(0, n.min(b.len()));
        self.train = cut(&self.train, train);
        self.val = cut(&self.val, val);
        self.test = cut(&self.test, test);
        self
    }
}

fn labeled(x: Tensor<f32>, y: Vec<usize>, what: &str) -> Result<LabeledBatch<f32>> {
    if x.rows() != y.len() {
        return Err(DataError::Mismatch(format!("{what}: {} images but {} labels", x.rows(), y.len())).into());
    }
    LabeledBatch::new(x, y)
}

/// Dataset root: explicit flag, then `$SCORPIO_DATA`, then `./data`.
pub fn dataset_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Example order for one epoch; a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xA076_1D64_78BD_642F) ^ epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Two interleaving half circles: class 0 on the upper unit circle, class 1 on the lower
/// one shifted by `(1, 0.5)`. Class 0 gets `ceil(n / 2)` points.
pub fn synth_moons<T: Scalar>(n: usize, noise: f64, seed: u64) -> Result<LabeledBatch<T>> {
    if n < 2 {
        return Err(Error::InvalidArgument("moons needs at least two points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n0 = n.div_ceil(2);
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let (cls, k, m) = if i < n0 { (0, i, n0) } else { (1, i - n0, n - n0) };
        let t = std::f64::consts::PI * k as f64 / (m.max(2) - 1) as f64;
        let (px, py) = if cls == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
        let (ex, ey): (f64, f64) = if noise > 0.0 {
            (noise * rng.sample::<f64, _>(StandardNormal), noise * rng.sample::<f64, _>(StandardNormal))
        } else {
            (0.0, 0.0)
        };
        x.push(T::of(px + ex));
        x.push(T::of(py + ey));
        y.push(cls);
    }
    LabeledBatch::new(Tensor::new(vec![n, 2], x)?, y)
}

/// Isotropic Gaussian blobs around the given centers, `n` points per center.
pub fn synth_blobs<T: Scalar>(centers: &[Vec<f64>], n: usize, std: f64, seed: u64) -> Result<LabeledBatch<T>> {
    let d = centers.first().map_or(0, Vec::len);
    if d == 0 || centers.iter().any(|c| c.len() != d) {
        return Err(Error::InvalidArgument("blob centers must share a nonzero dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(centers.len() * n * d);
    let mut y = Vec::with_capacity(centers.len() * n);
    for _ in 0..n {
        for (k, c) in centers.iter().enumerate() {
            x.extend(c.iter().map(|&m| T::of(m + std * rng.sample::<f64, _>(StandardNormal))));
            y.push(k);
        }
    }
    LabeledBatch::new(Tensor::new(vec![centers.len() * n, d], x)?, y)
}
