//! Datasets: IDX and CSV loaders plus two offline generators.
//!
//! [`synthetic_digits`] renders 28×28 grayscale digit glyphs from stroke
//! templates under random affine distortion, stroke jitter and pixel noise.
//! It stands in for MNIST when the real files are not available.
//! [`gaussian_blobs`] draws isotropic clusters around random class centres.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::tensor::Tensor;

/// Labelled samples, stored row-major as `[N, C·H·W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    dims: [usize; 3],
    classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, dims: [usize; 3], classes: usize) -> Result<Self> {
        let per = dims.iter().product::<usize>();
        if labels.is_empty() || per == 0 {
            return Err(Error::Data("empty dataset".into()));
        }
        if inputs.len() != labels.len() * per {
            return Err(Error::Data(format!(
                "{} values for {} samples of {:?}",
                inputs.len(),
                labels.len(),
                dims
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {l} outside 0..{classes}")));
        }
        Ok(Dataset {
            inputs,
            labels,
            dims,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn features(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let f = self.features();
        &self.inputs[i * f..(i + 1) * f]
    }

    /// Gather the given samples into a `[len, features]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let f = self.features();
        let mut data = Vec::with_capacity(indices.len() * f);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!("sample {i} outside 0..{}", self.len())));
            }
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new([indices.len(), f], data)?, labels))
    }

    /// The first `n` samples (or all of them if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let f = self.features();
        Dataset {
            inputs: self.inputs[..n * f].to_vec(),
            labels: self.labels[..n].to_vec(),
            dims: self.dims,
            classes: self.classes,
        }
    }

    /// Split into the first `n` samples and the rest.
    pub fn split(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Data(format!("cannot split {} samples at {n}", self.len())));
        }
        let f = self.features();
        let rest = Dataset {
            inputs: self.inputs[n * f..].to_vec(),
            labels: self.labels[n..].to_vec(),
            dims: self.dims,
            classes: self.classes,
        };
        Ok((self.take(n), rest))
    }
}

/// Mini-batch index lists for one epoch, shuffled with `rng`. The final
/// batch may be short.
pub fn epoch_batches(len: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
}

/// Parse an IDX file of unsigned bytes, returning `(dims, values)`.
fn parse_idx(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    let magic = be_u32(bytes, 0).ok_or_else(|| bad("truncated header"))?;
    if magic >> 8 != 0x08 {
        return Err(bad("not an unsigned-byte IDX file"));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("truncated dimensions"))?;
    let start = 4 + 4 * rank;
    let count: usize = dims.iter().product();
    if bytes.len() != start + count {
        return Err(bad(&format!("expected {count} values, found {}", bytes.len().saturating_sub(start))));
    }
    Ok((dims, bytes[start..].to_vec()))
}

/// Load an IDX image/label pair (MNIST layout). Pixels are scaled to [0, 1].
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (idims, pixels) = parse_idx(&fsio::read(images)?, images)?;
    let (ldims, raw_labels) = parse_idx(&fsio::read(labels)?, labels)?;
    if ldims.len() != 1 || idims.len() < 2 || idims[0] != ldims[0] {
        return Err(Error::Data(format!(
            "image dims {idims:?} do not match label dims {ldims:?}"
        )));
    }
    let dims = match idims[1..] {
        [h, w] => [1, h, w],
        [c, h, w] => [c, h, w],
        [f] => [1, 1, f],
        _ => return Err(Error::Data(format!("unsupported image dims {idims:?}"))),
    };
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(pixels.iter().map(|&p| p as f64 / 255.0).collect(), labels, dims, classes)
}

/// Load a CSV file whose rows are `label,f1,...,fk`. A header row is
/// skipped if its first field is not an integer.
pub fn load_csv(path: &Path, classes: usize) -> Result<Dataset> {
    let bytes = fsio::read(path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(bytes.as_slice());
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let bad = |msg: String| Error::Data(format!("{}:{}: {msg}", path.display(), line + 1));
        let label = record.get(0).unwrap_or("").trim();
        let label: usize = match label.parse() {
            Ok(l) => l,
            Err(_) if line == 0 => continue,
            Err(_) => return Err(bad(format!("bad label '{label}'"))),
        };
        let row = record
            .iter()
            .skip(1)
            .map(|f| f.trim().parse::<f64>().map_err(|_| bad(format!("bad value '{f}'"))))
            .collect::<Result<Vec<_>>>()?;
        if *width.get_or_insert(row.len()) != row.len() {
            return Err(bad(format!("expected {} features, found {}", width.unwrap_or(0), row.len())));
        }
        inputs.extend(row);
        labels.push(label);
    }
    let width = width.ok_or_else(|| Error::Data(format!("{}: no rows", path.display())))?;
    Dataset::new(inputs, labels, [1, 1, width], classes)
}

/// `n` samples in `features` dimensions; class centres are drawn from
/// `N(0, separation²)` and samples from `N(centre, 1)`. Labels cycle through
/// the classes so the set is balanced.
pub fn gaussian_blobs(n: usize, features: usize, classes: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 || features == 0 || !(separation >= 0.0) {
        return Err(Error::Config("blobs need classes, features and separation ≥ 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let centres: Vec<f64> = (0..classes * features)
        .map(|_| separation * unit.sample(&mut rng))
        .collect();
    let mut inputs = Vec::with_capacity(n * features);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for &c in &labels {
        inputs.extend((0..features).map(|j| centres[c * features + j] + unit.sample(&mut rng)));
    }
    Dataset::new(inputs, labels, [1, 1, features], classes)
}

#[derive(Clone, Copy)]
enum Stroke {
    Line(&'static [(f64, f64)]),
    /// Centre, radii, start and end angle in degrees (y axis points down).
    Arc(f64, f64, f64, f64, f64, f64),
}

const GLYPHS: [&[Stroke]; 10] = [
    &[Stroke::Arc(0.5, 0.5, 0.28, 0.42, 0.0, 360.0)],
    &[Stroke::Line(&[(0.35, 0.22), (0.52, 0.08), (0.52, 0.92)])],
    &[
        Stroke::Arc(0.5, 0.32, 0.26, 0.24, 190.0, 380.0),
        Stroke::Line(&[(0.74, 0.4), (0.22, 0.92), (0.8, 0.92)]),
    ],
    &[
        Stroke::Arc(0.48, 0.29, 0.24, 0.21, 210.0, 450.0),
        Stroke::Arc(0.48, 0.7, 0.26, 0.22, 270.0, 510.0),
    ],
    &[Stroke::Line(&[(0.64, 0.92), (0.64, 0.08), (0.18, 0.64), (0.84, 0.64)])],
    &[
        Stroke::Line(&[(0.76, 0.08), (0.32, 0.08), (0.28, 0.46)]),
        Stroke::Arc(0.49, 0.66, 0.26, 0.25, 225.0, 500.0),
    ],
    &[
        Stroke::Arc(0.55, 0.6, 0.3, 0.45, 300.0, 150.0),
        Stroke::Arc(0.5, 0.7, 0.23, 0.21, 0.0, 360.0),
    ],
    &[Stroke::Line(&[(0.2, 0.1), (0.8, 0.1), (0.42, 0.92)])],
    &[
        Stroke::Arc(0.5, 0.29, 0.2, 0.2, 0.0, 360.0),
        Stroke::Arc(0.5, 0.71, 0.24, 0.21, 0.0, 360.0),
    ],
    &[
        Stroke::Arc(0.5, 0.32, 0.23, 0.22, 0.0, 360.0),
        Stroke::Line(&[(0.73, 0.32), (0.62, 0.92)]),
    ],
];

fn glyph_polylines(digit: usize) -> Vec<Vec<(f64, f64)>> {
    GLYPHS[digit]
        .iter()
        .map(|s| match *s {
            Stroke::Line(pts) => pts.to_vec(),
            Stroke::Arc(cx, cy, rx, ry, a0, a1) => {
                let steps = 24;
                (0..=steps)
                    .map(|i| {
                        let a = (a0 + (a1 - a0) * i as f64 / steps as f64) * PI / 180.0;
                        (cx + rx * a.cos(), cy + ry * a.sin())
                    })
                    .collect()
            }
        })
        .collect()
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

fn render_digit(digit: usize, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    const SIDE: usize = 28;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let rot: f64 = 0.22 * normal.sample(rng);
    let shear: f64 = rng.gen_range(-0.35..0.35);
    let (sx, sy): (f64, f64) = (rng.gen_range(0.7..1.1), rng.gen_range(0.8..1.1));
    let (tx, ty): (f64, f64) = (rng.gen_range(-2.5..2.5), rng.gen_range(-2.5..2.5));
    let half_width: f64 = rng.gen_range(0.7..1.5);
    let jitter = 0.045;
    let (c, s) = (rot.cos(), rot.sin());
    // Unit box → 20×20 pixel box centred in the canvas.
    let map = |(x, y): (f64, f64)| {
        let (x, y) = ((x - 0.5) * 20.0 * sx, (y - 0.5) * 20.0 * sy);
        let x = x + shear * y;
        (c * x - s * y + 13.5 + tx, s * x + c * y + 13.5 + ty)
    };
    let mut strokes = glyph_polylines(digit);
    for line in &mut strokes {
        // Smooth per-stroke warp: shift the two ends independently and
        // interpolate, so strokes bend rather than fray.
        let (a, b) = (
            (jitter * normal.sample(rng), jitter * normal.sample(rng)),
            (jitter * normal.sample(rng), jitter * normal.sample(rng)),
        );
        let n = line.len().max(2) - 1;
        for (i, p) in line.iter_mut().enumerate() {
            let t = i as f64 / n as f64;
            p.0 += a.0 * (1.0 - t) + b.0 * t;
            p.1 += a.1 * (1.0 - t) + b.1 * t;
        }
    }
    out.iter_mut().for_each(|v| *v = 0.0);
    for line in &strokes {
        let pts: Vec<(f64, f64)> = line.iter().map(|&p| map(p)).collect();
        for seg in pts.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let reach = half_width + 1.0;
            let x0 = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
            let x1 = ((a.0.max(b.0) + reach).ceil().max(0.0) as usize).min(SIDE - 1);
            let y0 = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
            let y1 = ((a.1.max(b.1) + reach).ceil().max(0.0) as usize).min(SIDE - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d = segment_distance((x as f64, y as f64), a, b);
                    let v = (half_width + 0.5 - d).clamp(0.0, 1.0);
                    let px = &mut out[y * SIDE + x];
                    *px = px.max(v);
                }
            }
        }
    }
    for px in out.iter_mut() {
        *px = (*px + 0.08 * normal.sample(rng)).clamp(0.0, 1.0);
    }
}

/// `n` rendered 28×28 digits with balanced labels, pixels in [0, 1].
pub fn synthetic_digits(n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = vec![0.0; n * 784];
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    for (i, &d) in labels.iter().enumerate() {
        render_digit(d, &mut rng, &mut inputs[i * 784..(i + 1) * 784]);
    }
    Dataset::new(inputs, labels, [1, 28, 28], 10)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Digits,
    Blobs,
    Idx,
    Csv,
}

/// Where the train and test sets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Number of training samples (generators) or a cap (files, 0 = all).
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
    /// Blobs only.
    pub features: usize,
    pub classes: usize,
    pub separation: f64,
    /// IDX only.
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// CSV only.
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Digits,
            train_size: 8000,
            test_size: 2000,
            seed: 0,
            features: 16,
            classes: 10,
            separation: 3.0,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_csv: None,
            test_csv: None,
        }
    }
}

impl DataConfig {
    /// Load `(train, test)`.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let need = |p: &Option<PathBuf>, key: &str| {
            p.clone()
                .ok_or_else(|| Error::Config(format!("data.{key} is required for source {:?}", self.source)))
        };
        let cap = |d: Dataset, n: usize| if n == 0 { d } else { d.take(n) };
        match self.source {
            DataSource::Digits => {
                synthetic_digits(self.train_size + self.test_size, self.seed)?.split(self.train_size)
            }
            DataSource::Blobs => gaussian_blobs(
                self.train_size + self.test_size,
                self.features,
                self.classes,
                self.separation,
                self.seed,
            )?
            .split(self.train_size),
            DataSource::Idx => Ok((
                cap(
                    load_idx(&need(&self.train_images, "train_images")?, &need(&self.train_labels, "train_labels")?)?,
                    self.train_size,
                ),
                cap(
                    load_idx(&need(&self.test_images, "test_images")?, &need(&self.test_labels, "test_labels")?)?,
                    self.test_size,
                ),
            )),
            DataSource::Csv => Ok((
                cap(load_csv(&need(&self.train_csv, "train_csv")?, self.classes)?, self.train_size),
                cap(load_csv(&need(&self.test_csv, "test_csv")?, self.classes)?, self.test_size),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(magic: u32, dims: &[u32], values: &[u8]) -> Vec<u8> {
        let mut out = magic.to_be_bytes().to_vec();
        for d in dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(values);
        out
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        let pixels: Vec<u8> = (0..2 * 3 * 2).map(|v| (v * 20) as u8).collect();
        std::fs::write(&img, idx_bytes(0x0803, &[2, 3, 2], &pixels)).unwrap();
        std::fs::write(&lab, idx_bytes(0x0801, &[2], &[7, 1])).unwrap();
        let d = load_idx(&img, &lab).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.dims(), [1, 3, 2]);
        assert_eq!(d.labels(), &[7, 1]);
        assert_eq!(d.sample(1)[0], 120.0 / 255.0);

        std::fs::write(&lab, idx_bytes(0x0801, &[3], &[7, 1, 2])).unwrap();
        assert!(matches!(load_idx(&img, &lab), Err(Error::Data(_))));
        std::fs::write(&img, idx_bytes(0x0803, &[2, 3, 2], &pixels[..5])).unwrap();
        assert!(matches!(load_idx(&img, &lab), Err(Error::Data(_))));
        assert!(matches!(load_idx(&dir.path().join("missing"), &lab), Err(Error::Io { .. })));
    }

    #[test]
    fn csv_with_and_without_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "label,a,b\n1,0.5,2\n0,-1,3e-1\n").unwrap();
        let d = load_csv(&p, 2).unwrap();
        assert_eq!(d.labels(), &[1, 0]);
        assert_eq!(d.sample(1), &[-1.0, 0.3]);
        std::fs::write(&p, "1,0.5\n0,x\n").unwrap();
        assert!(matches!(load_csv(&p, 2), Err(Error::Data(_))));
        std::fs::write(&p, "1,0.5\n5,1\n").unwrap();
        assert!(matches!(load_csv(&p, 2), Err(Error::Data(_))));
    }

    #[test]
    fn generators_are_deterministic_and_balanced() {
        let a = synthetic_digits(40, 3).unwrap();
        assert_eq!(a, synthetic_digits(40, 3).unwrap());
        assert_ne!(a, synthetic_digits(40, 4).unwrap());
        assert_eq!(a.dims(), [1, 28, 28]);
        assert!((0..10).all(|c| a.labels().iter().filter(|&&l| l == c).count() == 4));
        for i in 0..a.len() {
            let s = a.sample(i);
            assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.iter().filter(|&&v| v > 0.5).count() > 20, "digit {i} nearly blank");
        }
        let b = gaussian_blobs(30, 4, 3, 2.0, 1).unwrap();
        assert_eq!(b, gaussian_blobs(30, 4, 3, 2.0, 1).unwrap());
        assert_eq!(b.dims(), [1, 1, 4]);
    }

    #[test]
    fn batches_cover_every_sample_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = epoch_batches(10, 4, &mut rng);
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = batches.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let d = gaussian_blobs(10, 2, 2, 1.0, 0).unwrap();
        let (x, y) = d.batch(&batches[0]).unwrap();
        assert_eq!(x.shape(), &[4, 2]);
        assert_eq!(y.len(), 4);
        assert!(d.batch(&[10]).is_err());
    }

    #[test]
    fn config_requires_paths_for_files() {
        let cfg = DataConfig {
            source: DataSource::Idx,
            ..Default::default()
        };
        assert!(matches!(cfg.load(), Err(Error::Config(_))));
        let (train, test) = DataConfig {
            train_size: 30,
            test_size: 10,
            ..Default::default()
        }
        .load()
        .unwrap();
        assert_eq!((train.len(), test.len()), (30, 10));
    }
}
