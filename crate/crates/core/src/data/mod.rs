//! Datasets on disk: `root/manifest.csv` listing `rgb,depth[,split]` paths
//! relative to `root`, 8-bit RGB PNGs, and 16-bit depth PNGs in millimeters.

pub mod checkpoint;
pub mod png;
pub mod synth;

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gradfield::ColorImage;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint};
pub use synth::{generate_synthetic, SyntheticSceneParams};

pub const MANIFEST_FILE: &str = "manifest.csv";

/// Default depth unit of stored PNGs.
pub const METERS_PER_UNIT: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    /// Every row regardless of its tag.
    All,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

impl Split {
    fn tag(self) -> Option<&'static str> {
        match self {
            Split::Train => Some("train"),
            Split::Test => Some("test"),
            Split::All => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub rgb: PathBuf,
    pub depth: Option<PathBuf>,
    /// Line in `manifest.csv` (the header is line 1).
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fails on the first entry without a depth path.
    pub fn require_labels(&self) -> Result<()> {
        match self.entries.iter().find(|e| e.depth.is_none()) {
            Some(e) => Err(Error::Ingestion {
                path: self.root.join(MANIFEST_FILE),
                row: e.line,
                msg: "labeled split entry has no depth path".into(),
            }),
            None => Ok(()),
        }
    }
}

/// Reads `root/manifest.csv`, keeping rows tagged `split`. Without a
/// `split` column every row belongs to every split. Entries are sorted by
/// RGB path and every referenced file must exist.
pub fn load_manifest(root: &Path, split: Split) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let ingest = |row: usize, msg: String| Error::Ingestion { path: path.clone(), row, msg };
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(|e| ingest(1, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (rgb_col, depth_col, split_col) = (col("rgb"), col("depth"), col("split"));
    if headers.is_empty() {
        return Ok(DatasetManifest { root: root.to_path_buf(), entries: Vec::new() });
    }
    let rgb_col = rgb_col.ok_or_else(|| ingest(1, "missing `rgb` column".into()))?;
    if let Some(unknown) = headers.iter().find(|h| !["rgb", "depth", "split"].contains(h)) {
        return Err(ingest(1, format!("unknown column `{unknown}`")));
    }

    let mut entries = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| ingest(line, e.to_string()))?;
        if let (Some(c), Some(tag)) = (split_col, split.tag()) {
            match &record[c] {
                "train" | "test" => {
                    if &record[c] != tag {
                        continue;
                    }
                }
                other => return Err(ingest(line, format!("unknown split tag `{other}`"))),
            }
        }
        let rgb = &record[rgb_col];
        if rgb.is_empty() {
            return Err(ingest(line, "empty rgb path".into()));
        }
        let depth = depth_col.map(|c| &record[c]).filter(|d| !d.is_empty());
        for p in std::iter::once(rgb).chain(depth) {
            if !root.join(p).is_file() {
                return Err(ingest(line, format!("referenced file `{p}` does not exist")));
            }
        }
        entries.push(ManifestEntry { rgb: PathBuf::from(rgb), depth: depth.map(PathBuf::from), line });
    }
    entries.sort_by(|a, b| a.rgb.cmp(&b.rgb));
    Ok(DatasetManifest { root: root.to_path_buf(), entries })
}

/// RGB image with a half-resolution metric depth map.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthSample {
    pub rgb: ColorImage,
    /// Depth map height and width (half the RGB resolution).
    pub height: usize,
    pub width: usize,
    /// Meters, row-major; 0 where `mask` is false.
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
}

impl DepthSample {
    pub fn new(rgb: ColorImage, depth: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let (h, w) = (rgb.height() / 2, rgb.width() / 2);
        if !rgb.height().is_multiple_of(2)
            || !rgb.width().is_multiple_of(2)
            || depth.len() != h * w
            || mask.len() != h * w
        {
            return Err(Error::dim(format!(
                "{}x{} image needs a {h}x{w} depth map and mask",
                rgb.height(),
                rgb.width()
            )));
        }
        if depth.iter().zip(&mask).any(|(&d, &m)| m && !(d > 0.0 && d.is_finite())) {
            return Err(Error::Input("valid depth pixels must be positive and finite".into()));
        }
        Ok(DepthSample { rgb, height: h, width: w, depth, mask })
    }
}

/// Averages valid (non-zero) raw values over each 2x2 block.
fn area_pool(h: usize, w: usize, raw: &[u16]) -> (Vec<f64>, Vec<bool>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut depth = vec![0.0; oh * ow];
    let mut mask = vec![false; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let (mut sum, mut n) = (0.0, 0u32);
            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let v = raw[(2 * r + dr) * w + 2 * c + dc];
                if v > 0 {
                    sum += f64::from(v);
                    n += 1;
                }
            }
            if n > 0 {
                depth[r * ow + c] = sum / f64::from(n);
                mask[r * ow + c] = true;
            }
        }
    }
    (depth, mask)
}

pub fn load_sample(root: &Path, entry: &ManifestEntry) -> Result<DepthSample> {
    load_sample_scaled(root, entry, METERS_PER_UNIT)
}

/// Loads one labeled entry; depth PNG values are multiplied by
/// `meters_per_unit`. Depth stored at full RGB resolution is area-pooled to
/// half resolution; depth stored at half resolution is used as is.
pub fn load_sample_scaled(root: &Path, entry: &ManifestEntry, meters_per_unit: f64) -> Result<DepthSample> {
    let rgb_path = root.join(&entry.rgb);
    let rgb = png::read_rgb(&rgb_path)?;
    let depth_rel = entry.depth.as_ref().ok_or_else(|| Error::Ingestion {
        path: root.join(MANIFEST_FILE),
        row: entry.line,
        msg: "entry has no depth path".into(),
    })?;
    let depth_path = root.join(depth_rel);
    let (dh, dw, raw) = png::read_gray16(&depth_path)?;
    let (h, w) = (rgb.height(), rgb.width());
    let fmt = |msg: String| Error::Format { path: depth_path.clone(), msg };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Format { path: rgb_path, msg: format!("{h}x{w} image must have even dimensions") });
    }
    let (depth, mask) = if (dh, dw) == (h, w) {
        area_pool(h, w, &raw)
    } else if (dh, dw) == (h / 2, w / 2) {
        (raw.iter().map(|&v| f64::from(v)).collect(), raw.iter().map(|&v| v > 0).collect())
    } else {
        return Err(fmt(format!("{dh}x{dw} depth does not match {h}x{w} image at full or half resolution")));
    };
    let depth = depth.into_iter().map(|v| v * meters_per_unit).collect();
    DepthSample::new(rgb, depth, mask)
}

/// Loads every entry in manifest order.
pub fn load_samples(manifest: &DatasetManifest) -> Result<Vec<DepthSample>> {
    manifest.require_labels()?;
    manifest.entries.par_iter().map(|e| load_sample(&manifest.root, e)).collect()
}

/// Loads only the RGB images, in manifest order.
pub fn load_images(manifest: &DatasetManifest) -> Result<Vec<ColorImage>> {
    manifest.entries.par_iter().map(|e| png::read_rgb(&manifest.root.join(&e.rgb))).collect()
}

/// `ceil(fraction * n)` indices taken as a prefix of one seeded shuffle and
/// returned in ascending order, so smaller fractions give subsets of larger
/// ones for the same seed.
pub fn subset_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label fraction must lie in (0,1], got {fraction}")));
    }
    // Guard against products like 0.3 * 10 = 3.0000000000000004.
    let k = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    if k == 0 {
        return Err(Error::Input(format!("fraction {fraction} of {n} entries selects nothing")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut picked = order[..k.min(n)].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

pub fn sample_subset(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    let picked = subset_indices(manifest.len(), fraction, seed)?;
    Ok(DatasetManifest {
        root: manifest.root.clone(),
        entries: picked.into_iter().map(|i| manifest.entries[i].clone()).collect(),
    })
}
