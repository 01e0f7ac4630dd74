//! Datasets, the model container, and report persistence.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bitcore::{BitError, BitMatrix};
use crate::fault::{Domain, StreamId};
use crate::model::{
    Architecture, BnnModel, ConvLayer, Direction, FcLayer, Layer, LayerKind, ModelError, Shape3,
    ThresholdLayer,
};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

pub const CONTAINER_MAGIC: &[u8; 4] = b"BTOL";
pub const CONTAINER_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: magic {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated, expected {expected} bytes, found {got}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        got: usize,
    },
    #[error("{0}")]
    DimMismatch(String),
    #[error("label {label} at {index} is not below the class count {classes}")]
    LabelOutOfRange {
        index: usize,
        label: u8,
        classes: usize,
    },
    #[error("pixel {value} at {index} exceeds Z = {z}")]
    PixelAboveZ { index: usize, value: u8, z: u32 },
    #[error("{path}: size {len} is not a multiple of the {CIFAR_RECORD}-byte CIFAR-10 record")]
    CifarSize { path: PathBuf, len: usize },
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("model container: {0}")]
    Container(String),
    #[error("model container version {found}, supported {CONTAINER_VERSION}")]
    Version { found: u16 },
    #[error("model container checksum {found:#010x} does not match {computed:#010x}")]
    Checksum { found: u32, computed: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bits(#[from] BitError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Integer images in `0..=Z` with class labels. Immutable once built.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    shape: Shape3,
    classes: usize,
    z: u32,
    split: Split,
    images: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(
        shape: Shape3,
        classes: usize,
        z: u32,
        split: Split,
        images: Vec<u8>,
        labels: Vec<u8>,
    ) -> Result<Self, DataError> {
        if images.len() != labels.len() * shape.len() {
            return Err(DataError::DimMismatch(format!(
                "{} pixels for {} images of shape {shape}",
                images.len(),
                labels.len()
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
            return Err(DataError::LabelOutOfRange {
                index,
                label,
                classes,
            });
        }
        if let Some((index, &value)) = images.iter().enumerate().find(|(_, &v)| v as u32 > z) {
            return Err(DataError::PixelAboveZ { index, value, z });
        }
        Ok(Self {
            shape,
            classes,
            z,
            split,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn z(&self) -> u32 {
        self.z
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.shape.len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.images
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[u8], usize)> + '_ {
        (0..self.len()).map(|i| (self.image(i), self.label(i)))
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.shape.len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone_meta()
        }
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.shape.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            shape: self.shape,
            classes: self.classes,
            z: self.z,
            split: self.split,
            images: Vec::new(),
            labels: Vec::new(),
        }
    }
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

/// Reads a whole file, transparently inflating gzip.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(io_err(path))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(io_err(path))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(buf: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DataError::Truncated {
            path: path.to_path_buf(),
            expected: at + 4,
            got: buf.len(),
        })
}

fn parse_idx(path: &Path, magic: u32) -> Result<(Vec<usize>, Vec<u8>), DataError> {
    let buf = read_maybe_gz(path)?;
    let found = be_u32(&buf, 0, path)?;
    if found != magic {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            found,
            expected: magic,
        });
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims)
        .map(|k| be_u32(&buf, 4 + 4 * k, path).map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let header = 4 + 4 * ndims;
    let expected = header + dims.iter().product::<usize>();
    if buf.len() != expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected,
            got: buf.len(),
        });
    }
    Ok((dims, buf[header..].to_vec()))
}

/// Loads an IDX image/label pair; the class count is one past the largest label.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset, DataError> {
    let (idims, pixels) = parse_idx(images, IDX_IMAGES_MAGIC)?;
    let (ldims, labs) = parse_idx(labels, IDX_LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(DataError::DimMismatch(format!(
            "{} images but {} labels",
            idims[0], ldims[0]
        )));
    }
    let classes = labs.iter().max().map_or(2, |&m| (m as usize + 1).max(2));
    Dataset::new(Shape3::new(1, idims[1], idims[2]), classes, 255, split, pixels, labs)
}

fn first_existing(dir: &Path, stem: &str) -> PathBuf {
    let plain = dir.join(stem);
    let gz = dir.join(format!("{stem}.gz"));
    if !plain.exists() && gz.exists() {
        gz
    } else {
        plain
    }
}

/// Train and test splits from a directory with the standard IDX file names.
pub fn load_fashion_dir(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    let train = load_idx(
        &first_existing(dir, "train-images-idx3-ubyte"),
        &first_existing(dir, "train-labels-idx1-ubyte"),
        Split::Train,
    )?;
    let test = load_idx(
        &first_existing(dir, "t10k-images-idx3-ubyte"),
        &first_existing(dir, "t10k-labels-idx1-ubyte"),
        Split::Test,
    )?;
    let classes = train.classes.max(test.classes);
    Ok((
        Dataset { classes, ..train },
        Dataset { classes, ..test },
    ))
}

/// Writes the image and label halves of `data` as uncompressed IDX files.
pub fn write_idx(data: &Dataset, images: &Path, labels: &Path) -> Result<(), DataError> {
    if data.shape.c != 1 {
        return Err(DataError::Invalid("IDX images must have one channel".into()));
    }
    let mut img = Vec::with_capacity(16 + data.images.len());
    for v in [IDX_IMAGES_MAGIC, data.len() as u32, data.shape.h as u32, data.shape.w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(&data.images);
    std::fs::write(images, img).map_err(io_err(images))?;
    let mut lab = Vec::with_capacity(8 + data.len());
    for v in [IDX_LABELS_MAGIC, data.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(&data.labels);
    std::fs::write(labels, lab).map_err(io_err(labels))
}

// ---------------------------------------------------------------------------
// CIFAR-10
// ---------------------------------------------------------------------------

/// Concatenates CIFAR-10 binary batches (`label byte + 3072 CHW pixels` per record).
pub fn load_cifar10_bin<P: AsRef<Path>>(paths: &[P], split: Split) -> Result<Dataset, DataError> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let path = p.as_ref();
        let buf = read_maybe_gz(path)?;
        if buf.is_empty() || buf.len() % CIFAR_RECORD != 0 {
            return Err(DataError::CifarSize {
                path: path.to_path_buf(),
                len: buf.len(),
            });
        }
        for rec in buf.chunks_exact(CIFAR_RECORD) {
            labels.push(rec[0]);
            images.extend_from_slice(&rec[1..]);
        }
    }
    Dataset::new(Shape3::new(3, 32, 32), 10, 255, split, images, labels)
}

pub fn load_cifar10_dir(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    let train: Vec<PathBuf> = (1..=5).map(|k| dir.join(format!("data_batch_{k}.bin"))).collect();
    Ok((
        load_cifar10_bin(&train, Split::Train)?,
        load_cifar10_bin(&[dir.join("test_batch.bin")], Split::Test)?,
    ))
}

// ---------------------------------------------------------------------------
// Synthetic blobs
// ---------------------------------------------------------------------------

const BLOB_NOISE: f64 = 16.0;

/// Integer-quantised Gaussian blobs on a `(1, 1, dims)` grid.
///
/// Class centres sit at `128 + separation · σ/2 · u_k` for random unit
/// vectors `u_k` with σ = 16 pixel units; samples add isotropic noise of
/// standard deviation σ and are clamped to `0..=255`. Labels cycle through
/// the classes so every class is equally represented.
pub fn synth_blobs(
    classes: usize,
    samples: usize,
    dims: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if classes < 2 || dims == 0 || !(separation >= 0.0) {
        return Err(DataError::Invalid(format!(
            "blobs need classes >= 2, dims >= 1, separation >= 0 (got {classes}, {dims}, {separation})"
        )));
    }
    let mut rng = StreamId::derive(seed, Domain::Init, u64::MAX, 0, 0).rng();
    let unit = Normal::new(0.0, 1.0).unwrap();
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dims).map(|_| unit.sample(&mut rng)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            v.iter()
                .map(|a| 128.0 + separation * BLOB_NOISE / 2.0 * a / norm)
                .collect()
        })
        .collect();
    let mut images = Vec::with_capacity(samples * dims);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % classes;
        labels.push(c as u8);
        for centre in &centres[c] {
            let v = centre + BLOB_NOISE * unit.sample(&mut rng);
            images.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    // shuffle so that prefixes stay balanced but not ordered
    let mut order: Vec<usize> = (0..samples).collect();
    for i in (1..samples).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let data = Dataset::new(Shape3::new(1, 1, dims), classes, 255, Split::Train, images, labels)?;
    Ok(data.select(&order))
}

// ---------------------------------------------------------------------------
// Model container
// ---------------------------------------------------------------------------

fn kind_tag(kind: LayerKind) -> u8 {
    match kind {
        LayerKind::FirstConv3x3 => 0,
        LayerKind::BinConv3x3 => 1,
        LayerKind::MaxPool2 => 2,
        LayerKind::ThresholdAct => 3,
        LayerKind::BinFC => 4,
        LayerKind::FirstFC => 5,
        LayerKind::OutputFC => 6,
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn shape(&mut self, s: Shape3) {
        self.u32(s.c);
        self.u32(s.h);
        self.u32(s.w);
    }
    fn weights(&mut self, m: &BitMatrix) {
        self.u32(m.rows());
        self.u32(m.cols());
        for w in m.words() {
            self.0.extend_from_slice(&w.to_le_bytes());
        }
    }
}

/// Serialises a model to the versioned little-endian container.
pub fn encode_model(model: &BnnModel) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CONTAINER_MAGIC);
    w.u16(CONTAINER_VERSION);
    let arch = model.arch().to_string();
    w.u16(arch.len() as u16);
    w.0.extend_from_slice(arch.as_bytes());
    w.shape(model.input_shape());
    w.u32(model.z() as usize);
    w.u32(model.classes());
    w.u32(model.layers().len());
    for layer in model.layers() {
        w.u8(kind_tag(layer.kind()));
        match layer {
            Layer::Conv(c) => {
                w.shape(c.input);
                w.u32(c.out_channels);
                w.weights(&c.weights);
            }
            Layer::MaxPool2 { input } => w.shape(*input),
            Layer::Threshold(t) => {
                w.u8(t.first_layer as u8);
                w.shape(t.shape);
                for &s in &t.thresholds {
                    w.0.extend_from_slice(&s.to_le_bytes());
                }
                let mut bits = vec![0u8; t.directions.len().div_ceil(8)];
                for (i, d) in t.directions.iter().enumerate() {
                    if *d == Direction::Pos {
                        bits[i / 8] |= 1 << (i % 8);
                    }
                }
                w.0.extend_from_slice(&bits);
            }
            Layer::Fc(f) => {
                w.u32(f.inputs);
                w.u32(f.outputs);
                if f.output {
                    w.u8(f.first as u8);
                }
                w.weights(&f.weights);
            }
        }
    }
    let crc = crc32fast::hash(&w.0);
    w.0.extend_from_slice(&crc.to_le_bytes());
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            DataError::Container(format!("unexpected end of data at byte {}", self.at))
        })?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, DataError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<usize, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn i32(&mut self) -> Result<i32, DataError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn shape(&mut self) -> Result<Shape3, DataError> {
        Ok(Shape3::new(self.u32()?, self.u32()?, self.u32()?))
    }
    fn weights(&mut self) -> Result<BitMatrix, DataError> {
        let rows = self.u32()?;
        let cols = self.u32()?;
        let n = rows
            .checked_mul(cols.div_ceil(64))
            .filter(|&n| n <= self.buf.len() / 8)
            .ok_or_else(|| DataError::Container(format!("implausible weight shape {rows}x{cols}")))?;
        let words = (0..n)
            .map(|_| Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap())))
            .collect::<Result<Vec<_>, DataError>>()?;
        Ok(BitMatrix::from_words(rows, cols, words)?)
    }
}

/// Parses and validates a model container.
pub fn decode_model(bytes: &[u8]) -> Result<BnnModel, DataError> {
    if bytes.len() < 10 || &bytes[..4] != CONTAINER_MAGIC {
        return Err(DataError::Container("missing BTOL magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CONTAINER_VERSION {
        return Err(DataError::Version { found: version });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let found = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if found != computed {
        return Err(DataError::Checksum { found, computed });
    }
    let mut r = Reader { buf: body, at: 6 };
    let len = r.u16()? as usize;
    let arch_str = std::str::from_utf8(r.take(len)?)
        .map_err(|_| DataError::Container("architecture string is not UTF-8".into()))?;
    let arch = Architecture::parse(arch_str)?;
    let input = r.shape()?;
    let z = r.u32()? as u32;
    let classes = r.u32()?;
    if classes != arch.classes {
        return Err(DataError::Container(format!(
            "header declares {classes} classes, architecture {}",
            arch.classes
        )));
    }
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let tag = r.u8()?;
        layers.push(match tag {
            0 | 1 => {
                let input = r.shape()?;
                let out_channels = r.u32()?;
                Layer::Conv(ConvLayer {
                    input,
                    out_channels,
                    first: tag == 0,
                    weights: r.weights()?,
                })
            }
            2 => Layer::MaxPool2 { input: r.shape()? },
            3 => {
                let first_layer = r.u8()? != 0;
                let shape = r.shape()?;
                let thresholds = (0..shape.c).map(|_| r.i32()).collect::<Result<Vec<_>, _>>()?;
                let bits = r.take(shape.c.div_ceil(8))?;
                let directions = (0..shape.c)
                    .map(|i| {
                        if bits[i / 8] >> (i % 8) & 1 == 1 {
                            Direction::Pos
                        } else {
                            Direction::Neg
                        }
                    })
                    .collect();
                Layer::Threshold(ThresholdLayer {
                    shape,
                    first_layer,
                    thresholds,
                    directions,
                })
            }
            4..=6 => {
                let inputs = r.u32()?;
                let outputs = r.u32()?;
                let first = match tag {
                    4 => false,
                    5 => true,
                    _ => r.u8()? != 0,
                };
                Layer::Fc(FcLayer {
                    inputs,
                    outputs,
                    first,
                    output: tag == 6,
                    weights: r.weights()?,
                })
            }
            t => return Err(DataError::Container(format!("unknown layer tag {t}"))),
        });
    }
    if r.at != body.len() {
        return Err(DataError::Container(format!(
            "{} trailing bytes",
            body.len() - r.at
        )));
    }
    Ok(BnnModel::new(arch, input, z, layers)?)
}

pub fn save_model(model: &BnnModel, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, encode_model(model)).map_err(io_err(path))
}

pub fn load_model(path: &Path) -> Result<BnnModel, DataError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_model(&bytes)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Writes a header row followed by data rows.
pub fn write_csv<S: AsRef<str>>(path: &Path, header: &[&str], rows: &[Vec<S>]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|s| s.as_ref()))?;
    }
    w.flush().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> Dataset {
        let images: Vec<u8> = (0..2 * 6).map(|i| (i * 21) as u8).collect();
        Dataset::new(Shape3::new(1, 2, 3), 10, 255, Split::Test, images, vec![3, 7]).unwrap()
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = (dir.path().join("img"), dir.path().join("lab"));
        let data = fixture();
        write_idx(&data, &i, &l).unwrap();
        let back = load_idx(&i, &l, Split::Test).unwrap();
        assert_eq!(back.pixels(), data.pixels());
        assert_eq!(back.labels(), data.labels());
        assert_eq!(back.shape(), Shape3::new(1, 2, 3));
        assert_eq!(back.classes(), 8);
    }

    #[test]
    fn idx_gzip_is_transparent() {
        use flate2::write::GzEncoder;
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx(&fixture(), &i, &l).unwrap();
        let gz = dir.path().join("img.gz");
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&std::fs::read(&i).unwrap()).unwrap();
        std::fs::write(&gz, enc.finish().unwrap()).unwrap();
        assert_eq!(load_idx(&gz, &l, Split::Test).unwrap().pixels(), fixture().pixels());
    }

    #[test]
    fn idx_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx(&fixture(), &i, &l).unwrap();
        let mut bytes = std::fs::read(&i).unwrap();
        assert!(matches!(load_idx(&l, &l, Split::Test), Err(DataError::BadMagic { .. })));
        bytes.pop();
        std::fs::write(&i, &bytes).unwrap();
        assert!(matches!(load_idx(&i, &l, Split::Test), Err(DataError::Truncated { .. })));
        bytes[3] = 0x99;
        std::fs::write(&i, &bytes).unwrap();
        assert!(matches!(load_idx(&i, &l, Split::Test), Err(DataError::BadMagic { .. })));
        assert!(matches!(
            load_idx(&dir.path().join("missing"), &l, Split::Test),
            Err(DataError::Io { .. })
        ));
    }

    #[test]
    fn cifar_round_trip_and_size_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("batch.bin");
        let mut bytes = Vec::new();
        for (label, fill) in [(4u8, 10u8), (9, 200)] {
            bytes.push(label);
            bytes.extend((0..3072).map(|k| fill.wrapping_add((k % 7) as u8)));
        }
        std::fs::write(&p, &bytes).unwrap();
        let d = load_cifar10_bin(&[&p], Split::Train).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.shape(), Shape3::new(3, 32, 32));
        assert_eq!(d.label(1), 9);
        assert_eq!(d.image(0), &bytes[1..3073]);
        assert_eq!(d.image(1), &bytes[3074..]);
        bytes.truncate(5000);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_cifar10_bin(&[&p], Split::Train), Err(DataError::CifarSize { .. })));
    }

    #[test]
    fn blobs_are_deterministic() {
        let a = synth_blobs(3, 90, 5, 4.0, 11).unwrap();
        assert_eq!(a, synth_blobs(3, 90, 5, 4.0, 11).unwrap());
        assert_ne!(a, synth_blobs(3, 90, 5, 4.0, 12).unwrap());
        assert_eq!(a.labels().iter().filter(|&&l| l == 2).count(), 30);
        assert!(synth_blobs(1, 10, 5, 1.0, 0).is_err());
    }

    /// Least-squares linear classifier (one-vs-rest on ±1 targets) fit by
    /// normal equations; returns training accuracy.
    fn linear_fit_accuracy(d: &Dataset) -> f64 {
        let dims = d.shape().len() + 1;
        let feats = |i: usize| -> Vec<f64> {
            let mut v: Vec<f64> = d.image(i).iter().map(|&p| (p as f64 - 128.0) / 64.0).collect();
            v.push(1.0);
            v
        };
        let mut ata = vec![vec![0.0; dims]; dims];
        let mut atb = vec![vec![0.0; d.classes()]; dims];
        for i in 0..d.len() {
            let f = feats(i);
            for a in 0..dims {
                for b in 0..dims {
                    ata[a][b] += f[a] * f[b];
                }
                for c in 0..d.classes() {
                    atb[a][c] += f[a] * if d.label(i) == c { 1.0 } else { -1.0 };
                }
            }
        }
        for (a, row) in ata.iter_mut().enumerate() {
            row[a] += 1e-6;
        }
        // Gauss-Jordan
        let n = dims;
        for col in 0..n {
            let piv = (col..n).max_by(|&a, &b| ata[a][col].abs().total_cmp(&ata[b][col].abs())).unwrap();
            ata.swap(col, piv);
            atb.swap(col, piv);
            let p = ata[col][col];
            for j in 0..n {
                ata[col][j] /= p;
            }
            for c in 0..d.classes() {
                atb[col][c] /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = ata[r][col];
                    for j in 0..n {
                        ata[r][j] -= f * ata[col][j];
                    }
                    for c in 0..d.classes() {
                        atb[r][c] -= f * atb[col][c];
                    }
                }
            }
        }
        let correct = (0..d.len())
            .filter(|&i| {
                let f = feats(i);
                let scores: Vec<f64> = (0..d.classes())
                    .map(|c| (0..n).map(|a| f[a] * atb[a][c]).sum())
                    .collect();
                let best = (0..d.classes()).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
                best == d.label(i)
            })
            .count();
        correct as f64 / d.len() as f64
    }

    #[test]
    fn blobs_separable_at_high_separation() {
        let d = synth_blobs(2, 400, 16, 10.0, 3).unwrap();
        assert!(linear_fit_accuracy(&d) >= 0.99);
    }

    #[test]
    fn blobs_at_zero_separation_are_chance() {
        let d = synth_blobs(2, 2000, 4, 0.0, 3).unwrap();
        let acc = linear_fit_accuracy(&d);
        assert!(acc < 0.56, "{acc}");
    }

    fn random_model(seed: u64) -> BnnModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Architecture::parse("In-C3-MP2-C5-FC70-4").unwrap();
        BnnModel::random(&arch, Shape3::new(2, 4, 6), 200, &mut rng).unwrap()
    }

    #[test]
    fn container_round_trip_is_byte_identical() {
        for seed in 0..5 {
            let m = random_model(seed);
            let bytes = encode_model(&m);
            let back = decode_model(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(encode_model(&back), bytes);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = BnnModel::random(&Architecture::parse("In-10").unwrap(), Shape3::new(1, 1, 65), 255, &mut rng).unwrap();
        assert_eq!(decode_model(&encode_model(&m)).unwrap(), m);
    }

    #[test]
    fn container_rejects_tampering() {
        let mut bytes = encode_model(&random_model(9));
        let n = bytes.len();
        bytes[n - 1] ^= 0x40;
        assert!(matches!(decode_model(&bytes), Err(DataError::Checksum { .. })));
        let mut bytes = encode_model(&random_model(9));
        bytes[40] ^= 1;
        assert!(matches!(decode_model(&bytes), Err(DataError::Checksum { .. })));
        let mut bytes = encode_model(&random_model(9));
        bytes[4] = 2;
        assert!(matches!(decode_model(&bytes), Err(DataError::Version { found: 2 })));
        assert!(matches!(decode_model(b"NOPE0000000"), Err(DataError::Container(_))));
    }

    #[test]
    fn container_matches_hand_built_little_endian_fixture() {
        // In-FC2-3 over a (1,1,3) input, written field by field.
        let mut b: Vec<u8> = Vec::new();
        b.extend_from_slice(b"BTOL");
        b.extend_from_slice(&1u16.to_le_bytes());
        let arch = b"In-FC2-3";
        b.extend_from_slice(&(arch.len() as u16).to_le_bytes());
        b.extend_from_slice(arch);
        for v in [1u32, 1, 3, 255, 3, 3] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        // FirstFC 3 -> 2, weights rows [+,-,+] and [-,-,+]
        b.push(5);
        for v in [3u32, 2, 2, 3] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&0b101u64.to_le_bytes());
        b.extend_from_slice(&0b100u64.to_le_bytes());
        // ThresholdAct, first layer, 2 neurons: s = [-7, 300], d = [+, -]
        b.push(3);
        b.push(1);
        for v in [2u32, 1, 1] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&(-7i32).to_le_bytes());
        b.extend_from_slice(&300i32.to_le_bytes());
        b.push(0b01);
        // OutputFC 2 -> 3, binary input
        b.push(6);
        for v in [2u32, 3] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.push(0);
        for v in [3u32, 2] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for w in [0b11u64, 0b00, 0b10] {
            b.extend_from_slice(&w.to_le_bytes());
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());

        let m = decode_model(&b).unwrap();
        assert_eq!(m.arch().to_string(), "In-FC2-3");
        assert_eq!(m.input_shape(), Shape3::new(1, 1, 3));
        match &m.layers()[1] {
            Layer::Threshold(t) => {
                assert_eq!(t.thresholds, vec![-7, 300]);
                assert_eq!(t.directions, vec![Direction::Pos, Direction::Neg]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(m.layers()[0].weights().unwrap().unpack_signs(), vec![1, -1, 1, -1, -1, 1]);
        assert_eq!(encode_model(&m), b);
    }
}
