//! Procedural indoor-like scenes: a far wall above a floor that approaches
//! the camera towards the bottom of the frame, with fronto-parallel boxes
//! standing on the floor. Apparent size shrinks with distance and shading
//! darkens with distance, so depth is recoverable from a single image.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{png, MANIFEST_FILE, METERS_PER_UNIT};
use crate::error::{Error, Result};
use crate::gradfield::ColorImage;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneParams {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of boxes per scene.
    pub boxes: (usize, usize),
    /// Meters, `min < max`.
    pub depth_range: (f64, f64),
    /// Amplitude of the uniform per-pixel texture noise.
    pub noise: f64,
    /// How much brightness falls from the nearest to the farthest depth, in
    /// `[0, 0.8]`.
    pub shading: f64,
    /// Lower bound of per-surface albedo; upper bound is 1.
    pub min_albedo: f64,
    /// Trailing share of scenes tagged `test`.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneParams {
    fn default() -> Self {
        SyntheticSceneParams {
            count: 512,
            height: 64,
            width: 64,
            boxes: (1, 4),
            depth_range: (1.0, 10.0),
            noise: 0.04,
            shading: 0.5,
            min_albedo: 0.35,
            test_fraction: 0.125,
            seed: 0,
        }
    }
}

impl SyntheticSceneParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.depth_range;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::Config(format!("depth range must satisfy 0 < min < max, got {lo}..{hi}")));
        }
        if hi / METERS_PER_UNIT > f64::from(u16::MAX) {
            return Err(Error::Config(format!("max depth {hi} m exceeds the 16-bit millimeter range")));
        }
        if self.height < 8 || self.width < 8 || !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "scene size {}x{} must be even and at least 8",
                self.height, self.width
            )));
        }
        if self.boxes.0 > self.boxes.1 {
            return Err(Error::Config("box count range is empty".into()));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::Config(format!("noise amplitude must lie in [0,0.5], got {}", self.noise)));
        }
        if !(0.0..=0.8).contains(&self.shading) || !(0.0..1.0).contains(&self.min_albedo) {
            return Err(Error::Config(format!(
                "shading must lie in [0,0.8] and min albedo in [0,1), got {} and {}",
                self.shading, self.min_albedo
            )));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!("test fraction must lie in [0,1), got {}", self.test_fraction)));
        }
        Ok(())
    }

    pub fn test_count(&self) -> usize {
        (self.count as f64 * self.test_fraction).ceil() as usize
    }
}

/// A rendered scene with its full-resolution depth in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub rgb: ColorImage,
    pub depth: Vec<f64>,
}

fn shade(depth: f64, (lo, hi): (f64, f64), strength: f64) -> f64 {
    0.95 - strength * (depth - lo) / (hi - lo)
}

/// Renders scene `index`; each index has its own random stream.
pub fn render_scene(params: &SyntheticSceneParams, index: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(index as u64);
    let (h, w) = (params.height, params.width);
    let (lo, hi) = params.depth_range;

    let horizon = rng.random_range(0.3..0.6) * h as f64;
    let floor_near = lo + rng.random_range(0.1..0.4) * (hi - lo);
    let floor_depth = |r: usize| -> f64 {
        let y = r as f64 + 0.5;
        if y <= horizon {
            hi
        } else {
            let t = (y - horizon) / (h as f64 - horizon);
            hi + t * (floor_near - hi)
        }
    };
    let albedo_range = params.min_albedo..=1.0;
    let wall_tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(albedo_range.clone()));
    let floor_tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(albedo_range.clone()));

    let mut depth = vec![0.0; h * w];
    let mut albedo = vec![[0.0; 3]; h * w];
    for r in 0..h {
        let d = floor_depth(r);
        let tint = if (r as f64 + 0.5) <= horizon { wall_tint } else { floor_tint };
        for c in 0..w {
            depth[r * w + c] = d;
            albedo[r * w + c] = tint;
        }
    }

    let n_boxes = rng.random_range(params.boxes.0..=params.boxes.1);
    let mut boxes: Vec<(f64, usize, usize, usize, usize, [f64; 3])> = (0..n_boxes)
        .map(|_| {
            let d = rng.random_range(floor_near.max(lo)..(lo + 0.8 * (hi - lo)));
            let scale = rng.random_range(0.6..1.2) * w as f64 / (2.0 * d);
            let bw = (scale * rng.random_range(0.7..1.4)).round().clamp(3.0, w as f64 / 2.0) as usize;
            let bh = (scale * rng.random_range(0.7..1.4)).round().clamp(3.0, h as f64 / 2.0) as usize;
            // Rest the box on the floor row whose depth matches its own.
            let t = ((d - hi) / (floor_near - hi)).clamp(0.0, 1.0);
            let foot = (horizon + t * (h as f64 - horizon)).round().clamp(bh as f64, h as f64) as usize;
            let left = rng.random_range(0..=w - bw);
            let tint = std::array::from_fn(|_| rng.random_range(albedo_range.clone()));
            (d, foot - bh, foot, left, left + bw, tint)
        })
        .collect();
    // Painter's order: farthest first so nearer boxes overwrite.
    boxes.sort_by(|a, b| b.0.total_cmp(&a.0));
    for &(d, r0, r1, c0, c1, tint) in &boxes {
        for r in r0..r1 {
            for c in c0..c1 {
                depth[r * w + c] = d;
                albedo[r * w + c] = tint;
            }
        }
    }

    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        let s = shade(depth[i], params.depth_range, params.shading);
        for ch in 0..3 {
            let noise = if params.noise > 0.0 { rng.random_range(-params.noise..=params.noise) } else { 0.0 };
            data[ch * plane + i] = (s * albedo[i][ch] + noise).clamp(0.0, 1.0);
        }
    }
    Scene { rgb: ColorImage::new(3, h, w, data).expect("valid scene"), depth }
}

/// Writes `rgb/NNNNN.png`, `depth/NNNNN.png` (full resolution, millimeters)
/// and `manifest.csv` with a split column under `out`.
pub fn generate_synthetic(params: &SyntheticSceneParams, out: &Path) -> Result<()> {
    params.validate()?;
    for sub in ["rgb", "depth"] {
        let dir = out.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let test_start = params.count - params.test_count().min(params.count);
    (0..params.count).into_par_iter().try_for_each(|i| -> Result<()> {
        let scene = render_scene(params, i);
        png::write_rgb(&out.join(format!("rgb/{i:05}.png")), &scene.rgb)?;
        let raw: Vec<u16> = scene.depth.iter().map(|d| (d / METERS_PER_UNIT).round() as u16).collect();
        png::write_gray16(&out.join(format!("depth/{i:05}.png")), params.height, params.width, &raw)
    })?;
    let mut manifest = String::from("rgb,depth,split\n");
    for i in 0..params.count {
        let split = if i >= test_start { "test" } else { "train" };
        manifest.push_str(&format!("rgb/{i:05}.png,depth/{i:05}.png,{split}\n"));
    }
    let path = out.join(MANIFEST_FILE);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_manifest, load_samples, Split};

    fn small() -> SyntheticSceneParams {
        SyntheticSceneParams { count: 6, height: 16, width: 16, seed: 11, ..Default::default() }
    }

    #[test]
    fn depth_within_range_and_deterministic() {
        let p = SyntheticSceneParams { count: 40, ..Default::default() };
        for i in 0..p.count {
            let s = render_scene(&p, i);
            assert!(s.depth.iter().all(|&d| (1.0..=10.0).contains(&d)));
            assert_eq!(s, render_scene(&p, i));
        }
        assert_ne!(render_scene(&p, 0), render_scene(&p, 1));
    }

    #[test]
    fn nearer_is_brighter_without_noise() {
        let p = SyntheticSceneParams { noise: 0.0, ..Default::default() };
        assert!(shade(1.0, p.depth_range, p.shading) > shade(9.0, p.depth_range, p.shading));
    }

    #[test]
    fn regenerating_gives_identical_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_synthetic(&small(), a.path()).unwrap();
        generate_synthetic(&small(), b.path()).unwrap();
        for rel in ["manifest.csv", "rgb/00003.png", "depth/00005.png"] {
            assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
        }
        let train = load_manifest(a.path(), Split::Train).unwrap();
        let test = load_manifest(a.path(), Split::Test).unwrap();
        assert_eq!((train.len(), test.len()), (5, 1));
        let samples = load_samples(&train).unwrap();
        assert!(samples.iter().all(|s| s.height == 8 && s.mask.iter().all(|&m| m)));
        assert!(samples.iter().flat_map(|s| &s.depth).all(|&d| (1.0..=10.0).contains(&d)));
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(SyntheticSceneParams { depth_range: (5.0, 1.0), ..small() }.validate().is_err());
        assert!(SyntheticSceneParams { height: 15, ..small() }.validate().is_err());
        assert!(SyntheticSceneParams { depth_range: (1.0, 100.0), ..small() }.validate().is_err());
    }
}
