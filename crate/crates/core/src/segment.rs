//! Sliding-window segmentation: every pixel is labeled by classifying the
//! window centered on it.
//!
//! A label map is stored as raw bytes (one `u8` label per pixel, row-major)
//! next to a JSON sidecar `{width, height, slice_id, checkpoint, stride}`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Raster, SliceRecord, Standardization};
use crate::error::{io_err, Error, Result};
use crate::net::Network;
use crate::tensor::Tensor;

/// The `side×side` neighborhood of `center = (row, col)`, row-major.
/// Positions outside the image take `fill`.
pub fn extract_window(image: &Raster<f32>, center: (usize, usize), side: usize, fill: f32) -> Vec<f32> {
    let half = (side / 2) as isize;
    let (ci, cj) = (center.0 as isize, center.1 as isize);
    let mut patch = vec![fill; side * side];
    for r in 0..side {
        let y = ci + r as isize - half;
        if y < 0 || y >= image.height as isize {
            continue;
        }
        let x0 = (cj - half).max(0);
        let x1 = (cj + half + 1).min(image.width as isize);
        if x0 >= x1 {
            continue;
        }
        let row = &image.data[y as usize * image.width..][..image.width];
        let dst = (x0 - (cj - half)) as usize;
        patch[r * side + dst..r * side + dst + (x1 - x0) as usize]
            .copy_from_slice(&row[x0 as usize..x1 as usize]);
    }
    patch
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMapMeta {
    pub width: usize,
    pub height: usize,
    pub slice_id: String,
    pub checkpoint: String,
    pub stride: usize,
}

/// Per-pixel labels: 0 healthy, 1 meningioma, 2 glioma, 3 pituitary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub meta: LabelMapMeta,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn width(&self) -> usize {
        self.meta.width
    }

    pub fn height(&self) -> usize {
        self.meta.height
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.meta.width * self.meta.height {
            return Err(Error::Shape(format!(
                "label map {}x{} holds {} labels",
                self.meta.width,
                self.meta.height,
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l > 3) {
            return Err(Error::Label(format!("label map value {bad} outside 0..=3")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SegmentOptions {
    /// Distance between evaluated centers; each label fills its `stride×stride` cell.
    pub stride: usize,
    /// Windows per forward pass.
    pub batch: usize,
    /// Identifier recorded in the label map's provenance.
    pub checkpoint: String,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            batch: 256,
            checkpoint: String::new(),
        }
    }
}

fn argmax_lowest(row: &[f32]) -> u8 {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    best as u8
}

/// Labels for the given centers, in order.
fn classify_centers(
    net: &Network<f32>,
    stats: &Standardization,
    image: &Raster<f32>,
    centers: &[(usize, usize)],
) -> Result<Vec<u8>> {
    let side = net.config().window;
    let mut data = Vec::with_capacity(centers.len() * side * side);
    for &c in centers {
        data.extend(
            extract_window(image, c, side, f32::NAN)
                .into_iter()
                .map(|v| stats.apply(v)),
        );
    }
    let batch = Tensor::from_vec(&[centers.len(), 1, side, side], data)?;
    let probs = net.infer(&batch)?.probs;
    Ok(probs.data().chunks_exact(probs.shape()[1]).map(argmax_lowest).collect())
}

/// Dense sliding-window labeling of one image. Batches are evaluated in
/// parallel against the shared network; results do not depend on the batch size.
pub fn segment_image(
    net: &Network<f32>,
    image: &Raster<f32>,
    slice_id: &str,
    opts: &SegmentOptions,
) -> Result<LabelMap> {
    let stats = net
        .stats
        .ok_or_else(|| Error::State("network carries no standardization statistics".into()))?;
    if opts.stride == 0 || opts.batch == 0 {
        return Err(Error::Parameter("stride and batch must be >= 1".into()));
    }
    let (w, h, s) = (image.width, image.height, opts.stride);
    let centers: Vec<(usize, usize)> = (0..h)
        .step_by(s)
        .flat_map(|i| (0..w).step_by(s).map(move |j| (i, j)))
        .collect();
    let chunks = centers
        .par_chunks(opts.batch)
        .map(|chunk| classify_centers(net, &stats, image, chunk))
        .collect::<Result<Vec<_>>>()?;
    let mut labels = vec![0u8; w * h];
    for (&(i, j), label) in centers.iter().zip(chunks.into_iter().flatten()) {
        for r in i..(i + s).min(h) {
            labels[r * w + j..r * w + (j + s).min(w)].fill(label);
        }
    }
    Ok(LabelMap {
        meta: LabelMapMeta {
            width: w,
            height: h,
            slice_id: slice_id.to_owned(),
            checkpoint: opts.checkpoint.clone(),
            stride: s,
        },
        labels,
    })
}

pub fn segment_slice(net: &Network<f32>, slice: &SliceRecord, opts: &SegmentOptions) -> Result<LabelMap> {
    segment_image(net, &slice.image, &slice.id, opts)
}

/// Sidecar path for a label-map file: the same path with a `.json` extension.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_label_map(path: &Path, map: &LabelMap) -> Result<()> {
    map.validate()?;
    fs::write(path, &map.labels).map_err(io_err(path))?;
    let sidecar = sidecar_path(path);
    let json = serde_json::to_string_pretty(&map.meta).map_err(|source| Error::Json {
        context: "label map sidecar".into(),
        source,
    })?;
    fs::write(&sidecar, json).map_err(io_err(&sidecar))
}

pub fn read_label_map(path: &Path) -> Result<LabelMap> {
    let sidecar = sidecar_path(path);
    let text = fs::read_to_string(&sidecar).map_err(io_err(&sidecar))?;
    let meta: LabelMapMeta = serde_json::from_str(&text).map_err(|source| Error::Json {
        context: sidecar.display().to_string(),
        source,
    })?;
    let labels = fs::read(path).map_err(io_err(path))?;
    let map = LabelMap { meta, labels };
    map.validate()?;
    Ok(map)
}

/// Grayscale image with predicted tumor pixels in red, ground truth in green
/// and their intersection in yellow.
pub fn overlay(image: &Raster<f32>, map: &LabelMap, mask: &Raster<u8>) -> Result<RgbImage> {
    if map.width() != image.width || map.height() != image.height || !image.same_shape(mask) {
        return Err(Error::Shape("overlay rasters differ in extent".into()));
    }
    let (lo, hi) = image
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = RgbImage::new(image.width as u32, image.height as u32);
    for (idx, px) in out.pixels_mut().enumerate() {
        let gray = ((image.data[idx] - lo) / span * 255.0).round() as u8;
        let tint = match (map.labels[idx] > 0, mask.data[idx] == 1) {
            (true, true) => Some([255, 255, 0]),
            (true, false) => Some([255, 0, 0]),
            (false, true) => Some([0, 255, 0]),
            (false, false) => None,
        };
        *px = match tint {
            None => Rgb([gray; 3]),
            Some(t) => Rgb(t.map(|c: u16| ((c + u16::from(gray)) / 2) as u8)),
        };
    }
    Ok(out)
}

pub fn write_overlay(path: &Path, image: &Raster<f32>, map: &LabelMap, mask: &Raster<u8>) -> Result<()> {
    overlay(image, map, mask)?.save(path)?;
    Ok(())
}
