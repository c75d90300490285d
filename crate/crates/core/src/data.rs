//! Datasets and their on-disk formats.
//!
//! - CSV: one sample per line, comma separated, optional integer label in the
//!   last column. Floats are written in shortest round-trip form.
//! - DCNM binary matrices: `"DCNM"`, u32 version 1, u64 rows, u64 cols, then
//!   `rows * cols` f64 values row-major; all little-endian.
//! - IDX (MNIST): big-endian headers, magic `0x00000803` for images and
//!   `0x00000801` for labels.
//! - Label files: one non-negative integer per line.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub use crate::kmeans::write_assignments as write_labels;

pub const MATRIX_MAGIC: &[u8; 4] = b"DCNM";
pub const MATRIX_VERSION: u32 = 1;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N x M`, one sample per row.
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
    /// Ground-truth latent codes, for generated data.
    pub latent: Option<Matrix>,
    pub name: String,
    pub source: Option<PathBuf>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Option<Vec<usize>>, name: impl Into<String>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::invalid(format!(
                    "{} labels for {} samples",
                    l.len(),
                    features.rows()
                )));
            }
        }
        Ok(Self {
            features,
            labels,
            latent: None,
            name: name.into(),
            source: None,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// `1 + max label`, or `None` without labels.
    pub fn num_classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    /// Rows `indices`, with labels and latents carried along.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            latent: self.latent.as_ref().map(|h| h.select_rows(indices)),
            name: self.name.clone(),
            source: self.source.clone(),
        }
    }
}

impl Dataset {
    /// The first `per_class` samples of every class, in dataset order.
    pub fn balanced_subset(&self, per_class: usize) -> Result<Self> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::invalid("a balanced subset needs labels"))?;
        let classes = self.num_classes().unwrap_or(0);
        let mut taken = vec![0usize; classes];
        let mut idx = Vec::with_capacity(per_class * classes);
        for (i, &l) in labels.iter().enumerate() {
            if taken[l] < per_class {
                taken[l] += 1;
                idx.push(i);
            }
        }
        if let Some(c) = taken.iter().position(|&t| t < per_class) {
            return Err(Error::invalid(format!(
                "class {c} has only {} of the {per_class} requested samples",
                taken[c]
            )));
        }
        Ok(self.subset(&idx))
    }
}

/// Loads a dataset by file extension: `.dcnm` matrices, `.csv` tables (last
/// column labels when `csv_labels`), anything else as IDX images, which
/// require a labels file. An explicit `labels` file (one integer per line, or
/// IDX labels next to IDX images) overrides CSV labels.
pub fn load_dataset(path: impl AsRef<Path>, labels: Option<&Path>, csv_labels: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "dcnm" => load_matrix_dataset(path, labels),
        "csv" => {
            let mut ds = load_csv(path, csv_labels)?;
            if let Some(l) = labels {
                let l = read_labels(l)?;
                ds = Dataset {
                    source: ds.source.clone(),
                    ..Dataset::new(ds.features, Some(l), ds.name)?
                };
            }
            Ok(ds)
        }
        _ => {
            let l = labels.ok_or_else(|| {
                Error::invalid(format!("{} is read as IDX images and needs a labels file", path.display()))
            })?;
            load_idx(path, l)
        }
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string())
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a numeric CSV file without header. With `has_labels` the last column
/// is parsed as a non-negative integer label.
pub fn load_csv(path: impl AsRef<Path>, has_labels: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(rows + 1, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(parse_err(
                    path,
                    line,
                    format!("expected {w} columns, found {}", record.len()),
                ))
            }
            _ => {}
        }
        let n_feat = if has_labels {
            if record.len() < 2 {
                return Err(parse_err(path, line, "a labelled row needs at least one feature"));
            }
            record.len() - 1
        } else {
            record.len()
        };
        for (j, cell) in record.iter().take(n_feat).enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(path, line, format!("column {}: '{cell}' is not a number", j + 1)))?;
            data.push(v);
        }
        if has_labels {
            let cell = &record[n_feat];
            let l: usize = cell
                .parse()
                .map_err(|_| parse_err(path, line, format!("label '{cell}' is not a non-negative integer")))?;
            labels.push(l);
        }
        rows += 1;
    }
    let cols = width.map_or(0, |w| if has_labels { w - 1 } else { w });
    let features = Matrix::new(rows, cols, data)?;
    let mut ds = Dataset::new(features, has_labels.then_some(labels), stem(path))?;
    ds.source = Some(path.to_path_buf());
    Ok(ds)
}

/// Inverse of [`load_csv`]; labels, when present, go in the last column.
pub fn save_csv(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (i, row) in dataset.features.row_iter().enumerate() {
        let mut cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        if let Some(l) = &dataset.labels {
            cells.push(l[i].to_string());
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn matrix_to_bytes(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * m.as_slice().len());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn matrix_from_bytes(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 24 {
        return Err(bad("file shorter than the 24-byte header".into()));
    }
    if &bytes[..4] != MATRIX_MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != MATRIX_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| bad("dimensions overflow".into()))?;
    if bytes.len() - 24 != expected {
        return Err(bad(format!(
            "payload has {} bytes, expected {expected} for {rows}x{cols}",
            bytes.len() - 24
        )));
    }
    let data = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::new(rows, cols, data)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, matrix_to_bytes(m)).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    matrix_from_bytes(&bytes, path)
}

/// Features from a DCNM matrix plus optional labels file.
pub fn load_matrix_dataset(path: impl AsRef<Path>, labels: Option<&Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let features = read_matrix(path)?;
    let labels = labels.map(read_labels).transpose()?;
    let mut ds = Dataset::new(features, labels, stem(path))?;
    ds.source = Some(path.to_path_buf());
    Ok(ds)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(
            t.parse()
                .map_err(|_| parse_err(path, i + 1, format!("'{t}' is not a non-negative integer label")))?,
        );
    }
    Ok(out)
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
}

/// IDX image file: pixels scaled by 1/255 and flattened row-major.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let magic = be_u32(bytes, 0).ok_or_else(|| bad("truncated header".into()))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(bad(format!("magic {magic:#010x} is not an IDX image file")));
    }
    let header: Option<Vec<u32>> = (1..4).map(|i| be_u32(bytes, 4 * i)).collect();
    let header = header.ok_or_else(|| bad("truncated header".into()))?;
    let (n, r, c) = (header[0] as usize, header[1] as usize, header[2] as usize);
    let pixels = &bytes[16..];
    if pixels.len() != n * r * c {
        return Err(bad(format!("{} pixel bytes for {n} images of {r}x{c}", pixels.len())));
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Matrix::new(n, r * c, data)
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let magic = be_u32(bytes, 0).ok_or_else(|| bad("truncated header".into()))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(bad(format!("magic {magic:#010x} is not an IDX label file")));
    }
    let n = be_u32(bytes, 4).ok_or_else(|| bad("truncated header".into()))? as usize;
    let labels = &bytes[8..];
    if labels.len() != n {
        return Err(bad(format!("{} label bytes for {n} labels", labels.len())));
    }
    Ok(labels.iter().map(|&l| l as usize).collect())
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let features = parse_idx_images(&fs::read(ip).map_err(|e| Error::io(ip, e))?, ip)?;
    let labels = parse_idx_labels(&fs::read(lp).map_err(|e| Error::io(lp, e))?, lp)?;
    if labels.len() != features.rows() {
        return Err(Error::Format {
            path: lp.to_path_buf(),
            message: format!("{} labels for {} images", labels.len(), features.rows()),
        });
    }
    let mut ds = Dataset::new(features, Some(labels), stem(ip))?;
    ds.source = Some(ip.to_path_buf());
    Ok(ds)
}
