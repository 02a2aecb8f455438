//! Dataset records, window sampling, standardization, elastic augmentation,
//! fold splitting, and the synthetic phantom generator.
//!
//! # Dataset directory
//!
//! A dataset is a directory holding `manifest.json`, a JSON array of
//!
//! ```json
//! {"id": "s0001", "pid": "p17", "label": 2, "view": "axial", "fold": 3,
//!  "width": 512, "height": 512, "image": "s0001.f32", "mask": "s0001.u8"}
//! ```
//!
//! `image` holds `width·height` little-endian `f32` intensities and `mask`
//! `width·height` bytes in `{0, 1}`, both row-major. Relative paths resolve
//! against the manifest's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, RecordError, Result};
use crate::seed::{self, Stream};
use crate::segment::extract_window;

pub const NUM_FOLDS: u8 = 5;
pub const MANIFEST: &str = "manifest.json";

/// Windows per slice used by the published recipe.
pub const DEFAULT_POSITIVE_WINDOWS: usize = 150;
pub const DEFAULT_NEGATIVE_WINDOWS: usize = 325;

/// Row-major 2-D raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Raster<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::Shape(format!(
                "raster {width}x{height} with {} values",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    pub fn same_shape<U>(&self, other: &Raster<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Sagittal,
    Coronal,
    Axial,
}

/// One slice: raw image, binary tumor mask, tumor type and fold assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceRecord {
    pub id: String,
    pub pid: String,
    /// 1 meningioma, 2 glioma, 3 pituitary tumor.
    pub label: u8,
    pub view: View,
    pub image: Raster<f32>,
    pub mask: Raster<u8>,
    pub fold: u8,
}

impl SliceRecord {
    pub fn validate(&self) -> Result<()> {
        let fail = |kind| Error::Record {
            id: self.id.clone(),
            kind,
        };
        if !(1..=3).contains(&self.label) {
            return Err(fail(RecordError::BadLabel(self.label)));
        }
        if self.fold >= NUM_FOLDS {
            return Err(fail(RecordError::BadFold(self.fold)));
        }
        if !self.image.same_shape(&self.mask) {
            return Err(fail(RecordError::ShapeMismatch {
                expected: self.image.data.len(),
                found: self.mask.data.len(),
            }));
        }
        if let Some(&bad) = self.mask.data.iter().find(|&&m| m > 1) {
            return Err(fail(RecordError::NonBinaryMask(bad)));
        }
        if !self.mask.data.contains(&1) {
            return Err(fail(RecordError::EmptyMask));
        }
        Ok(())
    }

    pub fn tumor_pixels(&self) -> usize {
        self.mask.data.iter().filter(|&&m| m == 1).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub pid: String,
    pub label: u8,
    pub view: View,
    pub fold: u8,
    pub width: usize,
    pub height: usize,
    pub image: PathBuf,
    pub mask: PathBuf,
}

fn read_bytes(id: &str, path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Record {
            id: id.to_owned(),
            kind: RecordError::MissingFile(path.to_owned()),
        },
        _ => Error::Io {
            path: path.to_owned(),
            source: e,
        },
    })
}

fn load_entry(root: &Path, entry: &ManifestEntry) -> Result<SliceRecord> {
    let fail = |kind| Error::Record {
        id: entry.id.clone(),
        kind,
    };
    let (w, h) = (entry.width, entry.height);
    if w == 0 || h == 0 {
        return Err(fail(RecordError::BadExtent { width: w, height: h }));
    }
    let image_bytes = read_bytes(&entry.id, &root.join(&entry.image))?;
    if image_bytes.len() != 4 * w * h {
        return Err(fail(RecordError::ShapeMismatch {
            expected: w * h,
            found: image_bytes.len() / 4,
        }));
    }
    let pixels = image_bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mask = read_bytes(&entry.id, &root.join(&entry.mask))?;
    if mask.len() != w * h {
        return Err(fail(RecordError::ShapeMismatch {
            expected: w * h,
            found: mask.len(),
        }));
    }
    let record = SliceRecord {
        id: entry.id.clone(),
        pid: entry.pid.clone(),
        label: entry.label,
        view: entry.view,
        image: Raster::new(w, h, pixels)?,
        mask: Raster::new(w, h, mask)?,
        fold: entry.fold,
    };
    record.validate()?;
    Ok(record)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })
}

/// Loads every record listed in a manifest. `path` may name the manifest
/// itself or the directory containing it.
pub fn load_dataset(path: &Path) -> Result<Vec<SliceRecord>> {
    let manifest = if path.is_dir() { path.join(MANIFEST) } else { path.to_owned() };
    let root = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(&manifest)?
        .iter()
        .map(|entry| load_entry(root, entry))
        .collect()
}

/// Writes records as a dataset directory and returns the manifest path.
pub fn write_dataset(dir: &Path, records: &[SliceRecord]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        r.validate()?;
        let image = PathBuf::from(format!("{}.f32", r.id));
        let mask = PathBuf::from(format!("{}.u8", r.id));
        let bytes: Vec<u8> = r.image.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(&image), bytes).map_err(io_err(dir.join(&image)))?;
        fs::write(dir.join(&mask), &r.mask.data).map_err(io_err(dir.join(&mask)))?;
        entries.push(ManifestEntry {
            id: r.id.clone(),
            pid: r.pid.clone(),
            label: r.label,
            view: r.view,
            fold: r.fold,
            width: r.image.width,
            height: r.image.height,
            image,
            mask,
        });
    }
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&entries).map_err(|source| Error::Json {
        context: "manifest".into(),
        source,
    })?;
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(path)
}

/// Slice counts per tumor label.
pub fn class_histogram(records: &[SliceRecord]) -> BTreeMap<u8, usize> {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry(r.label).or_insert(0) += 1;
    }
    counts
}

/// Test set = records in fold `k`; train set = everything else.
pub fn fold_split(records: &[SliceRecord], k: u8) -> Result<(Vec<SliceRecord>, Vec<SliceRecord>)> {
    if k >= NUM_FOLDS {
        return Err(Error::Parameter(format!("fold {k} not in 0..{NUM_FOLDS}")));
    }
    Ok(records.iter().cloned().partition(|r| r.fold != k))
}

// ---------------------------------------------------------------------------
// Windows and standardization
// ---------------------------------------------------------------------------

/// A training window cut around one pixel.
///
/// Until [`standardize`] runs, positions outside the source image hold NaN;
/// standardization maps them to 0, the standardized value of the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub patch: Vec<f32>,
    /// 0 for healthy centers, otherwise the slice's tumor label.
    pub target: u8,
    pub source: String,
    /// `(row, col)`
    pub center: (usize, usize),
}

fn pick<R: Rng + ?Sized>(pool: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    if pool.is_empty() || n == 0 {
        return Vec::new();
    }
    if pool.len() >= n {
        index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    }
}

/// Samples `n_pos` windows centered on tumor pixels (distinct when the tumor
/// has enough pixels, with replacement otherwise) and `n_neg` centered on
/// non-tumor pixels, positives first.
pub fn sample_windows<R: Rng + ?Sized>(
    slice: &SliceRecord,
    n_pos: usize,
    n_neg: usize,
    side: usize,
    rng: &mut R,
) -> Result<Vec<WindowSample>> {
    if side % 2 == 0 {
        return Err(Error::Parameter(format!("window side {side} must be odd")));
    }
    let (tumor, healthy): (Vec<usize>, Vec<usize>) =
        (0..slice.mask.data.len()).partition(|&i| slice.mask.data[i] == 1);
    if n_pos > 0 && tumor.is_empty() {
        return Err(Error::Record {
            id: slice.id.clone(),
            kind: RecordError::EmptyMask,
        });
    }
    if n_neg > 0 && healthy.is_empty() {
        return Err(Error::Degenerate(format!(
            "slice {} has no healthy pixels to sample",
            slice.id
        )));
    }
    let width = slice.image.width;
    let positives = pick(&tumor, n_pos, rng).into_iter().map(|i| (i, slice.label));
    let negatives = pick(&healthy, n_neg, rng).into_iter().map(|i| (i, 0));
    Ok(positives
        .chain(negatives)
        .map(|(i, target)| {
            let center = (i / width, i % width);
            WindowSample {
                patch: extract_window(&slice.image, center, side, f32::NAN),
                target,
                source: slice.id.clone(),
                center,
            }
        })
        .collect())
}

/// Global pixel mean and standard deviation of the training windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

impl Standardization {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
            return Err(Error::Degenerate(format!("invalid statistics mean {mean}, std {std}")));
        }
        Ok(Self { mean, std })
    }

    /// `(x − mean) / std`; NaN (outside the image) maps to 0.
    #[inline]
    pub fn apply(&self, x: f32) -> f32 {
        if x.is_nan() {
            0.0
        } else {
            ((f64::from(x) - self.mean) / self.std) as f32
        }
    }
}

/// Population statistics over every in-image pixel of every window.
pub fn compute_standardization(windows: &[WindowSample]) -> Result<Standardization> {
    let pixels = || windows.iter().flat_map(|w| &w.patch).filter(|v| !v.is_nan());
    let n = pixels().count();
    if n == 0 {
        return Err(Error::Degenerate("no window pixels to standardize".into()));
    }
    let mean = pixels().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
    let var = pixels().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return Err(Error::Degenerate("training windows have zero variance".into()));
    }
    Standardization::new(mean, var.sqrt())
}

pub fn standardize(patch: &mut [f32], stats: &Standardization) {
    for v in patch {
        *v = stats.apply(*v);
    }
}

// ---------------------------------------------------------------------------
// Elastic augmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticParams {
    /// Displacement scale in pixels.
    pub alpha: f64,
    /// Gaussian smoothing width in pixels.
    pub sigma: f64,
}

impl ElasticParams {
    /// alpha 34, sigma 4 at a 128-pixel side, scaled linearly with the side.
    pub fn for_side(side: usize) -> Self {
        let scale = side as f64 / 128.0;
        Self {
            alpha: 34.0 * scale,
            sigma: 4.0 * scale,
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable convolution with a normalized kernel and replicated borders.
fn smooth(field: &[f64], width: usize, height: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; field.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(t, k)| k * field[y * width + clamp(x as isize + t as isize - r, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; field.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(t, k)| k * tmp[clamp(y as isize + t as isize - r, height) * width + x])
                .sum();
        }
    }
    out
}

/// Random displacement field `(dx, dy)`: uniform `[−1, 1]` noise, Gaussian
/// smoothed, scaled by `alpha`. Each component is bounded by `alpha`.
pub fn displacement_field<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    params: &ElasticParams,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(params.sigma > 0.0) {
        return Err(Error::Parameter(format!("sigma {} must be positive", params.sigma)));
    }
    if !(params.alpha >= 0.0) {
        return Err(Error::Parameter(format!("alpha {} must be >= 0", params.alpha)));
    }
    let kernel = gaussian_kernel(params.sigma);
    let mut component = || {
        let noise: Vec<f64> = (0..width * height).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        smooth(&noise, width, height, &kernel)
            .into_iter()
            .map(|v| v * params.alpha)
            .collect::<Vec<f64>>()
    };
    let dx = component();
    let dy = component();
    Ok((dx, dy))
}

fn bilinear(image: &Raster<f32>, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (image.height - 1) as f64);
    let x = x.clamp(0.0, (image.width - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    if fy == 0.0 && fx == 0.0 {
        return image.get(y0, x0);
    }
    let (y1, x1) = ((y0 + 1).min(image.height - 1), (x0 + 1).min(image.width - 1));
    let v = |r, c| f64::from(image.get(r, c));
    let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
    let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

fn nearest(mask: &Raster<u8>, y: f64, x: f64) -> u8 {
    let r = y.round().clamp(0.0, (mask.height - 1) as f64) as usize;
    let c = x.round().clamp(0.0, (mask.width - 1) as f64) as usize;
    mask.get(r, c)
}

/// Warps image (bilinear) and mask (nearest neighbour) with one shared
/// random displacement field. Samples outside the raster take the border value.
pub fn elastic_transform<R: Rng + ?Sized>(
    image: &Raster<f32>,
    mask: &Raster<u8>,
    params: &ElasticParams,
    rng: &mut R,
) -> Result<(Raster<f32>, Raster<u8>)> {
    if !image.same_shape(mask) {
        return Err(Error::Shape("image and mask extents differ".into()));
    }
    let (w, h) = (image.width, image.height);
    let (dx, dy) = displacement_field(w, h, params, rng)?;
    let mut warped = Vec::with_capacity(w * h);
    let mut warped_mask = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = (y as f64 + dy[y * w + x], x as f64 + dx[y * w + x]);
            warped.push(bilinear(image, sy, sx));
            warped_mask.push(nearest(mask, sy, sx));
        }
    }
    Ok((Raster::new(w, h, warped)?, Raster::new(w, h, warped_mask)?))
}

const WARP_ATTEMPTS: usize = 8;

/// Originals followed by one elastically deformed copy of each. A copy whose
/// warped mask loses every tumor pixel is redrawn; after repeated failures
/// the unwarped slice is duplicated instead.
pub fn augment_training_set<R: Rng + ?Sized>(
    records: &[SliceRecord],
    params: Option<ElasticParams>,
    rng: &mut R,
) -> Result<Vec<SliceRecord>> {
    let mut out = records.to_vec();
    for r in records {
        let p = params.unwrap_or_else(|| ElasticParams::for_side(r.image.width.max(r.image.height)));
        let mut copy = SliceRecord {
            id: format!("{}~elastic", r.id),
            ..r.clone()
        };
        for _ in 0..WARP_ATTEMPTS {
            let (image, mask) = elastic_transform(&r.image, &r.mask, &p, rng)?;
            if mask.data.contains(&1) {
                copy.image = image;
                copy.mask = mask;
                break;
            }
        }
        out.push(copy);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic phantoms
// ---------------------------------------------------------------------------

/// Minimum phantom side: room for a tumor plus window context.
pub const MIN_PHANTOM_SIZE: usize = 96;

/// Texture of each tumor class: `(period in pixels, orientation in radians)`.
pub const PHANTOM_TEXTURES: [(f64, f64); 3] = [
    (4.0, 0.0),
    (7.0, std::f64::consts::FRAC_PI_3),
    (12.0, 2.0 * std::f64::consts::FRAC_PI_3),
];
/// Relative jitter of the texture period and absolute jitter of its angle.
pub const PHANTOM_PERIOD_JITTER: f64 = 0.03;
pub const PHANTOM_ANGLE_JITTER: f64 = 0.05;

fn low_frequency_noise<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Vec<f64> {
    const GRID: usize = 6;
    let knots: Vec<f64> = (0..(GRID + 1) * (GRID + 1)).map(|_| rng.gen::<f64>()).collect();
    let step = (size - 1) as f64 / GRID as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (gy, gx) = (y as f64 / step, x as f64 / step);
            let (y0, x0) = ((gy.floor() as usize).min(GRID - 1), (gx.floor() as usize).min(GRID - 1));
            let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
            let k = |r: usize, c: usize| knots[r * (GRID + 1) + c];
            let top = k(y0, x0) * (1.0 - fx) + k(y0, x0 + 1) * fx;
            let bottom = k(y0 + 1, x0) * (1.0 - fx) + k(y0 + 1, x0 + 1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn phantom_slice(index: usize, size: usize, seed: u64) -> Result<SliceRecord> {
    use std::f64::consts::TAU;
    let mut rng = seed::rng(seed, Stream::Phantom(index as u64));
    let label = (index % 3) as u8 + 1;
    let background = low_frequency_noise(size, &mut rng);
    let s = size as f64;
    let (a, b) = (rng.gen_range(0.10..0.18) * s, rng.gen_range(0.10..0.18) * s);
    let margin = a.max(b) + 4.0;
    let (cy, cx) = (rng.gen_range(margin..s - margin), rng.gen_range(margin..s - margin));
    let rot: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (period, angle) = PHANTOM_TEXTURES[usize::from(label - 1)];
    let period = period * (1.0 + rng.gen_range(-PHANTOM_PERIOD_JITTER..=PHANTOM_PERIOD_JITTER));
    let angle = angle + rng.gen_range(-PHANTOM_ANGLE_JITTER..=PHANTOM_ANGLE_JITTER);
    let phase = rng.gen_range(0.0..TAU);
    let (cos_r, sin_r) = (rot.cos(), rot.sin());
    let (cos_t, sin_t) = (angle.cos(), angle.sin());

    let mut image = Vec::with_capacity(size * size);
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let u = dx * cos_r + dy * sin_r;
            let v = -dx * sin_r + dy * cos_r;
            let inside = (u / a).powi(2) + (v / b).powi(2) <= 1.0;
            let noise = rng.gen_range(-0.02..0.02);
            let value = if inside {
                let t = (x as f64 * cos_t + y as f64 * sin_t) / period;
                0.6 + 0.35 * (TAU * t + phase).sin()
            } else {
                0.1 + 0.4 * background[y * size + x]
            };
            image.push((value + noise) as f32);
            mask.push(u8::from(inside));
        }
    }
    let record = SliceRecord {
        id: format!("phantom-{index:04}"),
        pid: format!("phantom-patient-{index:04}"),
        label,
        view: [View::Sagittal, View::Coronal, View::Axial][(index / 3) % 3],
        image: Raster::new(size, size, image)?,
        mask: Raster::new(size, size, mask)?,
        fold: (index % NUM_FOLDS as usize) as u8,
    };
    record.validate()?;
    Ok(record)
}

/// Phantom slices: smooth low-frequency background plus one elliptical tumor
/// filled with its class's oriented sinusoidal texture. Classes and folds are
/// assigned round-robin.
pub fn synthesize(n_slices: usize, size: usize, seed: u64) -> Result<Vec<SliceRecord>> {
    if size < MIN_PHANTOM_SIZE {
        return Err(Error::Parameter(format!(
            "phantom size {size} is below the minimum {MIN_PHANTOM_SIZE}"
        )));
    }
    (0..n_slices).map(|i| phantom_slice(i, size, seed)).collect()
}

/// [`synthesize`] and write the result as a dataset directory.
pub fn gen_synthetic(dir: &Path, n_slices: usize, size: usize, seed: u64) -> Result<Vec<SliceRecord>> {
    let records = synthesize(n_slices, size, seed)?;
    write_dataset(dir, &records)?;
    Ok(records)
}
