//! Datasets: IDX image files, two-column CSV and synthetic 2-D generators.

use std::f64::consts::PI;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{PieError, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const SPLIT_SALT: u64 = 0x5eed_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Equal mixture of `N((±2, 0), diag(0.5², 0.1²))`, elongated along the
    /// axis joining the modes.
    TwoGaussians,
    /// Two interleaved half circles with `N(0, 0.1²)` noise.
    TwoMoons,
    /// Radius `2 + 0.1·n` at a uniform angle, with `n` a standard normal
    /// truncated to `[-3, 3]`.
    Ring,
}

impl SyntheticKind {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::TwoGaussians => "two-gaussians",
            SyntheticKind::TwoMoons => "two-moons",
            SyntheticKind::Ring => "ring",
        }
    }
}

impl FromStr for SyntheticKind {
    type Err = PieError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-gaussians" => Ok(SyntheticKind::TwoGaussians),
            "two-moons" => Ok(SyntheticKind::TwoMoons),
            "ring" => Ok(SyntheticKind::Ring),
            other => Err(PieError::Data(format!("unknown synthetic kind '{other}'"))),
        }
    }
}

pub const TWO_GAUSSIANS_CENTER: f64 = 2.0;
pub const TWO_GAUSSIANS_STD: f64 = 0.5;
pub const TWO_GAUSSIANS_MINOR_STD: f64 = 0.1;
pub const MOONS_NOISE: f64 = 0.1;
pub const RING_RADIUS: f64 = 2.0;
pub const RING_NOISE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetKind {
    ImageIdx,
    Csv2d,
    Synthetic2d(SyntheticKind),
}

/// Equally shaped samples stored row-major, with a train/test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    kind: DatasetKind,
    item_shape: Vec<usize>,
    data: Vec<f64>,
    labels: Option<Vec<u8>>,
    train: Vec<usize>,
    test: Vec<usize>,
}

impl Dataset {
    /// All items start in the training split.
    pub fn new(kind: DatasetKind, item_shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let d: usize = item_shape.iter().product();
        if d == 0 || data.len() % d != 0 || data.is_empty() {
            return Err(PieError::Data(format!(
                "{} values do not form items of shape {item_shape:?}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PieError::Data("dataset contains non-finite values".into()));
        }
        let n = data.len() / d;
        Ok(Dataset {
            kind,
            item_shape,
            data,
            labels: None,
            train: (0..n).collect(),
            test: Vec::new(),
        })
    }

    pub fn kind(&self) -> &DatasetKind {
        &self.kind
    }

    pub fn item_shape(&self) -> &[usize] {
        &self.item_shape
    }

    pub fn item_dim(&self) -> usize {
        self.item_shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.item_dim()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.item_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn item(&self, i: usize) -> Tensor {
        Tensor::new(self.item_shape.clone(), self.row(i).to_vec()).expect("item shape")
    }

    pub fn items(&self) -> Vec<Tensor> {
        (0..self.len()).map(|i| self.item(i)).collect()
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.test
    }

    /// Rows `indices` as a `[len, D]` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let d = self.item_dim();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![indices.len(), d], out).expect("batch shape")
    }

    /// Every item as a `[N, D]` batch.
    pub fn all(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.item_dim()], self.data.clone()).expect("batch shape")
    }

    /// Shuffles indices with `seed` and assigns the first
    /// `round(fraction·N)` to training, keeping both sides non-empty when
    /// `N ≥ 2`.
    pub fn with_split(mut self, train_fraction: f64, seed: u64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction <= 1.0) {
            return Err(PieError::Data(format!("train fraction must be in (0, 1], got {train_fraction}")));
        }
        let n = self.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
        let mut cut = ((n as f64) * train_fraction).round() as usize;
        if n >= 2 {
            cut = cut.clamp(1, n - if train_fraction < 1.0 { 1 } else { 0 });
        } else {
            cut = n;
        }
        self.test = idx.split_off(cut);
        self.train = idx;
        self.train.sort_unstable();
        self.test.sort_unstable();
        Ok(self)
    }

    /// SHA-256 over item shape and values, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.item_shape.len() as u64).to_le_bytes());
        for &d in &self.item_shape {
            h.update((d as u64).to_le_bytes());
        }
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// First `n` items, keeping labels; all go to the training split.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let mut out = Dataset::new(self.kind.clone(), self.item_shape.clone(), self.data[..n * self.item_dim()].to_vec())?;
        out.labels = self.labels.as_ref().map(|l| l[..n].to_vec());
        Ok(out)
    }
}


fn read_idx<'a>(bytes: &'a [u8], magic: u32, what: &str) -> Result<(Vec<usize>, &'a [u8])> {
    let bad = |m: String| PieError::Data(format!("{what}: {m}"));
    if bytes.len() < 4 {
        return Err(bad("truncated header".into()));
    }
    let found = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    if found != magic {
        return Err(bad(format!("bad magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(bad("truncated header".into()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let total = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad(format!("dimensions {dims:?} overflow")))?;
    let body = &bytes[header..];
    if body.len() < total {
        return Err(bad(format!("truncated: expected {total} data bytes, found {}", body.len())));
    }
    Ok((dims, &body[..total]))
}

/// Parses an IDX image file into `1×H×W` items scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Dataset> {
    let (dims, body) = read_idx(bytes, IDX_IMAGES_MAGIC, "images")?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    if count == 0 || rows == 0 || cols == 0 {
        return Err(PieError::Data(format!("images: empty dimensions {dims:?}")));
    }
    let data = body.iter().map(|&b| f64::from(b) / 255.0).collect();
    Dataset::new(DatasetKind::ImageIdx, vec![1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let (_, body) = read_idx(bytes, IDX_LABELS_MAGIC, "labels")?;
    Ok(body.to_vec())
}

pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| PieError::Data(format!("{}: {e}", p.display())));
    let mut ds = parse_idx_images(&read(images)?)?;
    if let Some(lp) = labels {
        let l = parse_idx_labels(&read(lp)?)?;
        if l.len() != ds.len() {
            return Err(PieError::Data(format!("{} labels for {} images", l.len(), ds.len())));
        }
        ds.labels = Some(l);
    }
    Ok(ds)
}

/// Encodes `count` images of `rows×cols` bytes in IDX format.
pub fn encode_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), count * rows * cols, "pixel count");
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [count, rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Reads two float columns; a first row that does not parse as numbers is
/// treated as a header.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| PieError::Data(format!("{}: {e}", path.display())))?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut data = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| PieError::Data(format!("csv: {e}")))?;
        if rec.len() != 2 {
            return Err(PieError::Data(format!("csv line {}: expected 2 columns, found {}", i + 1, rec.len())));
        }
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(v) => data.extend(v),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(PieError::Data(format!("csv line {}: {e}", i + 1))),
        }
    }
    if data.is_empty() {
        return Err(PieError::Data("csv: no data rows".into()));
    }
    Dataset::new(DatasetKind::Csv2d, vec![2], data)
}

fn truncated_normal<R: Rng>(rng: &mut R, bound: f64) -> f64 {
    loop {
        let v: f64 = rng.sample(StandardNormal);
        if v.abs() <= bound {
            return v;
        }
    }
}

/// `n` points from the named generator, deterministic in `seed`.
pub fn make_synthetic_2d(kind: SyntheticKind, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(PieError::Data("synthetic dataset needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let (x, y) = match kind {
            SyntheticKind::TwoGaussians => {
                let c = if rng.gen::<bool>() { TWO_GAUSSIANS_CENTER } else { -TWO_GAUSSIANS_CENTER };
                let nx: f64 = rng.sample(StandardNormal);
                let ny: f64 = rng.sample(StandardNormal);
                (c + TWO_GAUSSIANS_STD * nx, TWO_GAUSSIANS_MINOR_STD * ny)
            }
            SyntheticKind::TwoMoons => {
                let t = rng.gen_range(0.0..PI);
                let (x, y) = if rng.gen::<bool>() { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
                let nx: f64 = rng.sample(StandardNormal);
                let ny: f64 = rng.sample(StandardNormal);
                (x + MOONS_NOISE * nx, y + MOONS_NOISE * ny)
            }
            SyntheticKind::Ring => {
                let a = rng.gen_range(0.0..2.0 * PI);
                let r = RING_RADIUS + RING_NOISE * truncated_normal(&mut rng, 3.0);
                (r * a.cos(), r * a.sin())
            }
        };
        data.push(x);
        data.push(y);
    }
    Dataset::new(DatasetKind::Synthetic2d(kind), vec![2], data)
}

/// Loads a dataset from a command-line source string:
///
/// - `synthetic:<kind>[:n[:seed]]` (default n = 2000, seed = 0)
/// - `<file>.csv`
/// - `<images.idx>[,<labels.idx>]`
pub fn load_spec(spec: &str) -> Result<Dataset> {
    if let Some(rest) = spec.strip_prefix("synthetic:") {
        let mut parts = rest.split(':');
        let kind: SyntheticKind = parts.next().unwrap_or_default().parse()?;
        let num = |s: Option<&str>, default: u64| -> Result<u64> {
            s.map_or(Ok(default), |v| v.parse().map_err(|_| PieError::Data(format!("bad number '{v}' in '{spec}'"))))
        };
        let n = num(parts.next(), 2000)? as usize;
        let seed = num(parts.next(), 0)?;
        if parts.next().is_some() {
            return Err(PieError::Data(format!("malformed synthetic source '{spec}'")));
        }
        return make_synthetic_2d(kind, n, seed);
    }
    if spec.to_ascii_lowercase().ends_with(".csv") {
        return load_csv(Path::new(spec));
    }
    match spec.split_once(',') {
        Some((img, lab)) => load_idx(Path::new(img), Some(Path::new(lab))),
        None => load_idx(Path::new(spec), None),
    }
}
