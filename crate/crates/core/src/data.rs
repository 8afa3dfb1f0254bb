//! Dataset ingestion (IDX, delimited text), normalization, stratified
//! subsampling and splitting.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::classifier::LabeledDataset;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Features (examples × features) with class indices in `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    features: Matrix,
    labels: Vec<usize>,
    classes: usize,
}

impl RawDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                context: "dataset rows vs labels",
                expected: features.rows(),
                actual: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidClass {
                index: bad,
                classes,
            });
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    /// Rows in the given order.
    pub fn select(&self, rows: &[usize]) -> RawDataset {
        let cols = self.width();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(self.features.row(r));
        }
        RawDataset {
            features: Matrix::new(rows.len(), cols, data).expect("rows of a valid matrix"),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes,
        }
    }

    pub fn to_labeled(&self) -> Result<LabeledDataset> {
        LabeledDataset::new(
            (0..self.len()).map(|r| self.features.row(r).to_vec()).collect(),
            self.labels.clone(),
            self.classes,
        )
    }

    /// Thresholds every feature: `1` if `> threshold`, else `0`.
    pub fn binarize(&self, threshold: f64) -> RawDataset {
        let mut out = self.clone();
        for v in out.features.as_mut_slice() {
            *v = if *v > threshold { 1.0 } else { 0.0 };
        }
        out
    }

    /// Ascending example indices per class.
    fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut per = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            per[l].push(i);
        }
        per
    }
}

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    let file = BufReader::new(File::open(path)?);
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file).read_to_end(&mut bytes)?;
    } else {
        let mut file = file;
        file.read_to_end(&mut bytes)?;
    }
    Ok(bytes)
}

fn read_header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let need = 4 * (1 + dims);
    if bytes.len() < need {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: need,
            found: bytes.len(),
        });
    }
    let mut cur = bytes;
    let found = cur.read_u32::<BigEndian>()?;
    if found != magic {
        return Err(Error::WrongMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    (0..dims)
        .map(|_| Ok(cur.read_u32::<BigEndian>()? as usize))
        .collect()
}

/// Reads an IDX image file (`0x803`, count × rows × cols bytes) and its IDX
/// label file (`0x801`). Pixels are scaled by `1/255`; a `.gz` suffix is
/// decompressed. The class count is `max label + 1`.
pub fn load_idx(image_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<RawDataset> {
    let (image_path, label_path) = (image_path.as_ref(), label_path.as_ref());
    let images = open_maybe_gz(image_path)?;
    let header = read_header(&images, image_path, IMAGE_MAGIC, 3)?;
    let (count, width) = (header[0], header[1] * header[2]);
    let payload = &images[16..];
    if payload.len() < count * width {
        return Err(Error::Truncated {
            path: image_path.to_path_buf(),
            expected: 16 + count * width,
            found: images.len(),
        });
    }

    let labels = open_maybe_gz(label_path)?;
    let n_labels = read_header(&labels, label_path, LABEL_MAGIC, 1)?[0];
    if n_labels != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: n_labels,
        });
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() < count {
        return Err(Error::Truncated {
            path: label_path.to_path_buf(),
            expected: 8 + count,
            found: labels.len(),
        });
    }

    let features: Vec<f64> = payload[..count * width].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = label_bytes[..count].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    RawDataset::new(Matrix::new(count, width, features)?, labels, classes)
}

/// Writes `d` as an IDX pair; features must be multiples of `1/255` in
/// `[0,1]` for an exact round trip. Gzips when the path ends in `.gz`.
pub fn write_idx(
    d: &RawDataset,
    rows: usize,
    cols: usize,
    image_path: impl AsRef<Path>,
    label_path: impl AsRef<Path>,
) -> Result<()> {
    if rows * cols != d.width() {
        return Err(Error::DimensionMismatch {
            context: "IDX image shape",
            expected: d.width(),
            actual: rows * cols,
        });
    }
    if d.classes > 256 {
        return Err(Error::InvalidArgument("IDX labels are single bytes".into()));
    }
    let mut img = Vec::with_capacity(16 + d.len() * d.width());
    img.write_u32::<BigEndian>(IMAGE_MAGIC)?;
    for v in [d.len(), rows, cols] {
        img.write_u32::<BigEndian>(v as u32)?;
    }
    img.extend(d.features.as_slice().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + d.len());
    lab.write_u32::<BigEndian>(LABEL_MAGIC)?;
    lab.write_u32::<BigEndian>(d.len() as u32)?;
    lab.extend(d.labels.iter().map(|&l| l as u8));
    write_maybe_gz(image_path.as_ref(), &img)?;
    write_maybe_gz(label_path.as_ref(), &lab)
}

fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?.flush()?;
    } else {
        let mut file = file;
        file.write_all(bytes)?;
        file.flush()?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    None,
    Minmax,
}

/// Layout of a delimited text file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelimitedSchema {
    /// Zero-based label column; negative counts from the end.
    pub label_column: i64,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default)]
    pub has_header: bool,
    /// Allowed label strings, mapped to their position. When absent, labels
    /// must be non-negative integers (a trailing `.0` is accepted).
    #[serde(default)]
    pub label_values: Option<Vec<String>>,
    /// Overrides the class count inferred from the labels.
    #[serde(default)]
    pub classes: Option<usize>,
}

fn default_delimiter() -> char {
    ','
}

impl Default for DelimitedSchema {
    fn default() -> Self {
        Self {
            label_column: -1,
            delimiter: ',',
            has_header: false,
            label_values: None,
            classes: None,
        }
    }
}

/// Parses a delimited file. Labels are mapped through the schema; features
/// are left unnormalized (see [`FeatureRange`]).
pub fn load_delimited(path: impl AsRef<Path>, schema: &DelimitedSchema) -> Result<RawDataset> {
    let path = path.as_ref();
    let name = path.to_path_buf();
    if !schema.delimiter.is_ascii() {
        return Err(Error::InvalidArgument("delimiter must be ASCII".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .has_headers(schema.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;

    let lookup: Option<BTreeMap<&str, usize>> = schema
        .label_values
        .as_ref()
        .map(|v| v.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect());

    let mut width = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let record = record?;
        let line = (n + 1 + schema.has_header as usize) as u64;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let cols = record.len();
        let expected = *width.get_or_insert(cols);
        if cols != expected {
            return Err(Error::RaggedRow {
                path: name,
                line,
                expected,
                found: cols,
            });
        }
        let label_col = if schema.label_column < 0 {
            cols as i64 + schema.label_column
        } else {
            schema.label_column
        };
        if label_col < 0 || label_col as usize >= cols {
            return Err(Error::InvalidArgument(format!(
                "label column {} outside {cols} columns",
                schema.label_column
            )));
        }
        let label_col = label_col as usize;
        for (c, cell) in record.iter().enumerate() {
            if c == label_col {
                let label = match &lookup {
                    Some(map) => map.get(cell).copied(),
                    None => parse_integer_label(cell),
                };
                let label = label.ok_or_else(|| Error::UnseenLabel {
                    path: name.clone(),
                    line,
                    label: cell.to_string(),
                })?;
                labels.push(label);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                    path: name.clone(),
                    line,
                    cell: cell.to_string(),
                })?;
                if !v.is_finite() {
                    return Err(Error::NonNumeric {
                        path: name.clone(),
                        line,
                        cell: cell.to_string(),
                    });
                }
                features.push(v);
            }
        }
    }

    let width = width.map_or(0, |w| w - 1);
    let inferred = match &schema.label_values {
        Some(v) => v.len(),
        None => labels.iter().max().map_or(0, |m| m + 1),
    };
    let classes = schema.classes.unwrap_or(inferred);
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::UnseenLabel {
            path: name,
            line: labels.iter().position(|&l| l == bad).unwrap_or(0) as u64 + 1,
            label: bad.to_string(),
        });
    }
    RawDataset::new(Matrix::new(labels.len(), width, features)?, labels, classes)
}

fn parse_integer_label(cell: &str) -> Option<usize> {
    if let Ok(v) = cell.parse::<usize>() {
        return Some(v);
    }
    let v: f64 = cell.parse().ok()?;
    (v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64).then_some(v as usize)
}

/// Per-feature minimum and maximum, fitted on one split and applied to all.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRange {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl FeatureRange {
    pub fn fit(d: &RawDataset) -> Result<Self> {
        if d.is_empty() {
            return Err(Error::Empty("dataset for min/max statistics"));
        }
        let mut min = d.features.row(0).to_vec();
        let mut max = min.clone();
        for r in 1..d.len() {
            for (c, &v) in d.features.row(r).iter().enumerate() {
                min[c] = min[c].min(v);
                max[c] = max[c].max(v);
            }
        }
        Ok(Self { min, max })
    }

    /// `(v - min) / (max - min)` clamped to `[0,1]`; constant columns map to 0.
    pub fn apply(&self, d: &RawDataset) -> Result<RawDataset> {
        crate::error::check_len("feature range width", self.min.len(), d.width())?;
        let mut out = d.clone();
        let cols = d.width();
        for (i, v) in out.features.as_mut_slice().iter_mut().enumerate() {
            let c = i % cols;
            let span = self.max[c] - self.min[c];
            *v = if span > 0.0 {
                ((*v - self.min[c]) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
        Ok(out)
    }
}

fn shuffled_classes(d: &RawDataset, rng: &RngStream) -> Result<Vec<Vec<usize>>> {
    let mut per = d.class_indices();
    for (c, idx) in per.iter_mut().enumerate() {
        if idx.is_empty() {
            return Err(Error::EmptyClass(c));
        }
        rng.derive(&[c as u64]).shuffle(idx);
    }
    Ok(per)
}

/// Samples `⌈fraction · n_c⌉` examples per class without replacement.
pub fn stratified_subsample(d: &RawDataset, fraction: f64, rng: &RngStream) -> Result<RawDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "subsample fraction {fraction} outside (0, 1]"
        )));
    }
    let per = shuffled_classes(d, rng)?;
    let mut rows = Vec::new();
    for idx in &per {
        // The small slack keeps products like 0.2 · 70 = 14.000000000000002 at 14.
        let take = ((fraction * idx.len() as f64) - 1e-9).ceil().max(1.0) as usize;
        rows.extend_from_slice(&idx[..take.min(idx.len())]);
    }
    let order = rng.derive(&[u64::MAX]).permutation(rows.len());
    Ok(d.select(&order.iter().map(|&i| rows[i]).collect::<Vec<_>>()))
}

/// Train, validation and test parts of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitParts {
    pub train: RawDataset,
    pub valid: RawDataset,
    pub test: RawDataset,
}

/// Largest-remainder apportionment of `total` by `weights`; ties go to the
/// lowest index.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let mut left = total.saturating_sub(out.iter().sum());
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - out[a] as f64, exact[b] - out[b] as f64);
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if weights[i] > 0.0 {
            out[i] += 1;
            left -= 1;
        }
    }
    out
}

/// Stratified split by ratios summing to 1. The overall part sizes are fixed
/// first by largest remainder, then each part is spread over classes in
/// proportion to the examples still unassigned.
pub fn split(d: &RawDataset, ratios: [f64; 3], rng: &RngStream) -> Result<SplitParts> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0))
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
        || ratios[0] == 0.0
    {
        return Err(Error::InvalidArgument(format!(
            "split ratios {ratios:?} must be non-negative, sum to 1, and give train a share"
        )));
    }
    let sizes = apportion(d.len(), &ratios);
    split_counts(d, [sizes[0], sizes[1], sizes[2]], rng)
}

/// Stratified split into parts of exactly the given sizes; examples beyond
/// their sum are left out.
pub fn split_counts(d: &RawDataset, sizes: [usize; 3], rng: &RngStream) -> Result<SplitParts> {
    let total: usize = sizes.iter().sum();
    if total > d.len() {
        return Err(Error::InvalidArgument(format!(
            "split sizes {sizes:?} exceed {} examples",
            d.len()
        )));
    }
    if sizes[0] == 0 {
        return Err(Error::InvalidArgument("training split must be non-empty".into()));
    }
    let per = shuffled_classes(d, rng)?;
    let mut used = vec![0usize; per.len()];
    let mut parts: Vec<RawDataset> = Vec::with_capacity(3);
    for (p, &size) in sizes.iter().enumerate() {
        let remaining: Vec<f64> = per
            .iter()
            .zip(&used)
            .map(|(idx, &u)| (idx.len() - u) as f64)
            .collect();
        let alloc = if size == 0 {
            vec![0; per.len()]
        } else {
            apportion(size, &remaining)
        };
        let mut rows = Vec::with_capacity(size);
        for (c, &n) in alloc.iter().enumerate() {
            rows.extend_from_slice(&per[c][used[c]..used[c] + n]);
            used[c] += n;
        }
        let order = rng.derive(&[u64::MAX, p as u64]).permutation(rows.len());
        parts.push(d.select(&order.iter().map(|&i| rows[i]).collect::<Vec<_>>()));
    }
    let test = parts.pop().unwrap();
    let valid = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok(SplitParts { train, valid, test })
}
