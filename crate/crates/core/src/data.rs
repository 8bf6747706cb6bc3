//! Labelled image datasets: IDX and CSV readers/writers, plus access
//! accounting used to check that the attacker never touches held-out data.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_U8: u8 = 0x08;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Idx,
    Csv,
}

impl std::str::FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idx" => Ok(DataFormat::Idx),
            "csv" => Ok(DataFormat::Csv),
            _ => Err(Error::Config(format!("unknown data format {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Counts calls that read image or label content.
#[derive(Debug, Default)]
pub struct AccessLog {
    images: AtomicUsize,
    labels: AtomicUsize,
}

impl AccessLog {
    pub fn image_reads(&self) -> usize {
        self.images.load(Ordering::Relaxed)
    }

    pub fn label_reads(&self) -> usize {
        self.labels.load(Ordering::Relaxed)
    }
}

#[derive(Debug)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    log: AccessLog,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Self {
            images: self.images.clone(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            log: AccessLog::default(),
        }
    }
}

impl Dataset {
    /// `images` is `[n, ...sample]`; classes default to `max(label) + 1`.
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: Option<usize>) -> Result<Self> {
        if images.shape().len() < 2 || images.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} labels for images {:?}",
                labels.len(),
                images.shape()
            )));
        }
        let seen = labels.iter().max().map_or(0, |m| m + 1);
        let num_classes = num_classes.unwrap_or(seen);
        if seen > num_classes {
            return Err(Error::TargetOutOfRange {
                target: seen - 1,
                classes: num_classes,
            });
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            log: AccessLog::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn access(&self) -> &AccessLog {
        &self.log
    }

    pub fn images(&self) -> &Tensor {
        self.log.images.fetch_add(1, Ordering::Relaxed);
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        self.log.labels.fetch_add(1, Ordering::Relaxed);
        &self.labels
    }

    /// Same samples viewed with a different per-sample shape, e.g.
    /// `[28, 28]` to `[1, 28, 28]`.
    pub fn with_sample_shape(self, shape: &[usize]) -> Result<Self> {
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        Ok(Self {
            images: self.images.reshape(full)?,
            ..self
        })
    }

    /// Images only, for the attacker path.
    pub fn images_at(&self, indices: &[usize]) -> Result<Tensor> {
        self.log.images.fetch_add(1, Ordering::Relaxed);
        self.images.select_rows(indices)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        self.log.images.fetch_add(1, Ordering::Relaxed);
        self.log.labels.fetch_add(1, Ordering::Relaxed);
        let x = self.images.select_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (x, y) = self.batch(indices)?;
        Self::new(x, y, Some(self.num_classes))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(fs::read(path)?)
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Parses an unsigned-byte IDX file into `(dims, payload)`.
fn parse_idx(path: &Path, bytes: &[u8], magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let perr = |offset: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        offset,
        msg,
    };
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: 4,
            actual: bytes.len() as u64,
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(perr(0, "magic must start with two zero bytes".into()));
    }
    if bytes[2] != IDX_U8 {
        return Err(perr(
            2,
            format!("unsupported element type 0x{:02x}", bytes[2]),
        ));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(perr(
            0,
            format!("magic 0x{found:08x}, expected 0x{magic:08x}"),
        ));
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header as u64,
            actual: bytes.len() as u64,
        });
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|d| be_u32(bytes, 4 + 4 * d) as usize)
        .collect();
    if dims.contains(&0) {
        return Err(perr(4, format!("zero dimension in {dims:?}")));
    }
    let payload = dims.iter().product::<usize>();
    let expected = (header + payload) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Reads an IDX image file, scaling bytes to `[0, 1]`.
pub fn read_idx_images(path: &Path) -> Result<Tensor> {
    let bytes = read_file(path)?;
    let (dims, payload) = parse_idx(path, &bytes, IDX_IMAGES_MAGIC)?;
    Tensor::new(dims, payload.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_file(path)?;
    let (_, payload) = parse_idx(path, &bytes, IDX_LABELS_MAGIC)?;
    Ok(payload.into_iter().map(usize::from).collect())
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_idx(path: &Path, magic: u32, dims: &[usize], payload: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + payload.len());
    out.extend_from_slice(&(magic & 0xffff_ff00 | dims.len() as u32).to_be_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn write_idx_images(path: &Path, images: &Tensor) -> Result<()> {
    let payload: Vec<u8> = images.data().iter().map(|&v| to_byte(v)).collect();
    write_idx(path, IDX_IMAGES_MAGIC, images.shape(), &payload)
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let payload: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
    write_idx(path, IDX_LABELS_MAGIC, &[labels.len()], &payload)
}

/// Loads `label,p0,...,pN` rows with pixel bytes 0..=255. A non-numeric
/// first row is taken as a header. Square pixel counts become `[s, s]`
/// samples.
pub fn read_csv(path: &Path) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    let mut width = None;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            offset,
            msg,
        };
        let first = rec.get(0).unwrap_or("").trim();
        let label = match first.parse::<usize>() {
            Ok(l) => l,
            Err(_) if row == 0 => continue,
            Err(_) => return Err(perr(format!("bad label {first:?}"))),
        };
        let n = rec.len() - 1;
        match width {
            None if n == 0 => return Err(perr("row has no pixels".into())),
            None => width = Some(n),
            Some(w) if w != n => return Err(perr(format!("row has {n} pixels, expected {w}"))),
            _ => {}
        }
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| perr(format!("bad pixel {field:?}")))?;
            if !(0.0..=255.0).contains(&v) {
                return Err(perr(format!("pixel {v} outside 0..=255")));
            }
            pixels.push(v / 255.0);
        }
        labels.push(label);
    }
    let width = width.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        offset: 0,
        msg: "no data rows".into(),
    })?;
    let side = (width as f64).sqrt().round() as usize;
    let mut shape = vec![labels.len()];
    if side * side == width {
        shape.extend([side, side]);
    } else {
        shape.push(width);
    }
    Dataset::new(Tensor::new(shape, pixels)?, labels, None)
}

pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let images = data.images();
    for (i, &label) in data.labels().iter().enumerate() {
        let mut rec = vec![label.to_string()];
        rec.extend(images.row(i).iter().map(|&v| to_byte(v).to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// File names inside a data directory, following the MNIST convention.
pub fn split_paths(dir: &Path, split: Split, format: DataFormat) -> Vec<PathBuf> {
    let stem = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    match format {
        DataFormat::Idx => vec![
            dir.join(format!("{stem}-images-idx3-ubyte")),
            dir.join(format!("{stem}-labels-idx1-ubyte")),
        ],
        DataFormat::Csv => vec![dir.join(match split {
            Split::Train => "train.csv",
            Split::Test => "test.csv",
        })],
    }
}

/// Loads one split of a data directory.
pub fn load_dataset(dir: &Path, split: Split, format: DataFormat) -> Result<Dataset> {
    let paths = split_paths(dir, split, format);
    match format {
        DataFormat::Idx => {
            let images = read_idx_images(&paths[0])?;
            let labels = read_idx_labels(&paths[1])?;
            Dataset::new(images, labels, None)
        }
        DataFormat::Csv => read_csv(&paths[0]),
    }
}

/// Writes both IDX files for one split.
pub fn save_idx_split(dir: &Path, split: Split, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let paths = split_paths(dir, split, DataFormat::Idx);
    write_idx_images(&paths[0], data.images())?;
    write_idx_labels(&paths[1], data.labels())
}

/// Picks whichever format is present in `dir`, preferring IDX.
pub fn detect_format(dir: &Path, split: Split) -> Option<DataFormat> {
    [DataFormat::Idx, DataFormat::Csv]
        .into_iter()
        .find(|&f| split_paths(dir, split, f).iter().all(|p| p.exists()))
}
