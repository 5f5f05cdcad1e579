//! Depth accuracy (delta thresholds) and error (rel, rms, log10) metrics.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub rel: f64,
    pub rms: f64,
    pub log10: f64,
    /// Pixels that survived the protocol.
    pub pixels: u64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "delta1,delta2,delta3,rel,rms,log10";

    pub fn values(&self) -> [f64; 6] {
        [self.delta1, self.delta2, self.delta3, self.rel, self.rms, self.log10]
    }

    pub fn csv_row(&self) -> String {
        self.values().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }

    pub fn max_abs_diff(&self, other: &MetricReport) -> f64 {
        self.values().iter().zip(other.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "delta1={:.4} delta2={:.4} delta3={:.4} rel={:.4} rms={:.4} log10={:.4} pixels={}",
            self.delta1, self.delta2, self.delta3, self.rel, self.rms, self.log10, self.pixels
        )
    }
}

/// Half-open pixel rectangle `rows.0..rows.1`, `cols.0..cols.1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRect {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

impl CropRect {
    pub fn full(height: usize, width: usize) -> Self {
        CropRect { rows: (0, height), cols: (0, width) }
    }

    pub fn check(&self, height: usize, width: usize) -> Result<()> {
        let (r0, r1) = self.rows;
        let (c0, c1) = self.cols;
        if r0 >= r1 || c0 >= c1 || r1 > height || c1 > width {
            return Err(Error::Bounds(format!(
                "crop rows {r0}..{r1} cols {c0}..{c1} does not fit a {height}x{width} map"
            )));
        }
        Ok(())
    }
}

/// Reference crop on a 480x640 map; other resolutions scale it.
pub const EIGEN_CROP_480X640: CropRect = CropRect { rows: (45, 471), cols: (41, 601) };

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropSpec {
    /// Fixed pixel rectangle.
    Fixed(CropRect),
    /// A rectangle given for a reference resolution, scaled to each map.
    Scaled { rect: CropRect, height: usize, width: usize },
}

impl CropSpec {
    pub fn eigen() -> Self {
        CropSpec::Scaled { rect: EIGEN_CROP_480X640, height: 480, width: 640 }
    }

    /// Resolves the rectangle for a `height x width` map. Scaled starts round
    /// down and ends round up, so the crop never shrinks below its share.
    pub fn resolve(&self, height: usize, width: usize) -> Result<CropRect> {
        let rect = match *self {
            CropSpec::Fixed(r) => r,
            CropSpec::Scaled { rect, height: rh, width: rw } => {
                let lo = |v: usize, n: usize, d: usize| v * n / d;
                let hi = |v: usize, n: usize, d: usize| (v * n).div_ceil(d);
                CropRect {
                    rows: (lo(rect.rows.0, height, rh), hi(rect.rows.1, height, rh)),
                    cols: (lo(rect.cols.0, width, rw), hi(rect.cols.1, width, rw)),
                }
            }
        };
        rect.check(height, width)?;
        Ok(rect)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Every evaluated pixel of the set weighs the same.
    #[default]
    Pooled,
    /// Metrics per image, then the plain mean over images.
    PerImage,
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(Aggregation::Pooled),
            "per-image" | "per_image" => Ok(Aggregation::PerImage),
            _ => Err(Error::Config(format!("unknown aggregation `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalProtocol {
    pub crop: Option<CropSpec>,
    pub max_depth: Option<f64>,
    pub min_depth: f64,
    pub aggregation: Aggregation,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol { crop: None, max_depth: None, min_depth: 1e-3, aggregation: Aggregation::Pooled }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_depth > 0.0) || !self.min_depth.is_finite() {
            return Err(Error::Config(format!("minimum depth must be positive, got {}", self.min_depth)));
        }
        if let Some(cap) = self.max_depth {
            if !(cap > self.min_depth) {
                return Err(Error::Config(format!("depth cap {cap} must exceed the minimum {}", self.min_depth)));
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines: `crop` (`none`, `eigen` or
    /// `r0,r1,c0,c1`), `max_depth` (meters or `none`), `min_depth`,
    /// `aggregation` (`pooled` or `per-image`). `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut p = EvalProtocol::default();
        for (key, value) in crate::config::parse_pairs(text)? {
            let bad = |what: &str| Error::Config(format!("invalid {what} `{value}`"));
            match key.as_str() {
                "crop" => {
                    p.crop = match value.as_str() {
                        "none" => None,
                        "eigen" => Some(CropSpec::eigen()),
                        v => {
                            let n: Vec<usize> = v
                                .split(',')
                                .map(|s| s.trim().parse())
                                .collect::<std::result::Result<_, _>>()
                                .map_err(|_| bad("crop"))?;
                            let [r0, r1, c0, c1] = n[..] else { return Err(bad("crop")) };
                            Some(CropSpec::Fixed(CropRect { rows: (r0, r1), cols: (c0, c1) }))
                        }
                    }
                }
                "max_depth" => {
                    p.max_depth = match value.as_str() {
                        "none" => None,
                        v => Some(v.parse().map_err(|_| bad("max_depth"))?),
                    }
                }
                "min_depth" => p.min_depth = value.parse().map_err(|_| bad("min_depth"))?,
                "aggregation" => p.aggregation = value.parse()?,
                other => return Err(Error::Config(format!("unknown protocol key `{other}`"))),
            }
        }
        p.validate()?;
        Ok(p)
    }
}

/// Row-major `height x width` depth map view.
#[derive(Clone, Copy, Debug)]
pub struct DepthView<'a> {
    pub height: usize,
    pub width: usize,
    pub data: &'a [f64],
}

impl<'a> DepthView<'a> {
    pub fn new(height: usize, width: usize, data: &'a [f64]) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(format!(
                "{height}x{width} map needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(DepthView { height, width, data })
    }
}

/// Copies the rectangle out of a row-major map.
pub fn center_crop(map: &[f64], height: usize, width: usize, rect: &CropRect) -> Result<Vec<f64>> {
    DepthView::new(height, width, map)?;
    rect.check(height, width)?;
    let mut out = Vec::with_capacity((rect.rows.1 - rect.rows.0) * (rect.cols.1 - rect.cols.0));
    for r in rect.rows.0..rect.rows.1 {
        out.extend_from_slice(&map[r * width + rect.cols.0..r * width + rect.cols.1]);
    }
    Ok(out)
}

/// Running sums from which any report can be formed; merges are exact
/// additions so pooled results equal a single pass over all pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricAccumulator {
    pub count: u64,
    pub within: [u64; 3],
    pub abs_rel: f64,
    pub sq_err: f64,
    pub log10_err: f64,
}

impl MetricAccumulator {
    pub fn push(&mut self, pred: f64, truth: f64) {
        let ratio = (pred / truth).max(truth / pred);
        for (i, w) in self.within.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(i as i32 + 1) {
                *w += 1;
            }
        }
        self.count += 1;
        self.abs_rel += (truth - pred).abs() / truth;
        self.sq_err += (truth - pred) * (truth - pred);
        self.log10_err += (truth.log10() - pred.log10()).abs();
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.count += other.count;
        for (a, b) in self.within.iter_mut().zip(other.within) {
            *a += b;
        }
        self.abs_rel += other.abs_rel;
        self.sq_err += other.sq_err;
        self.log10_err += other.log10_err;
    }

    pub fn report(&self) -> Result<MetricReport> {
        if self.count == 0 {
            return Err(Error::DegenerateEvaluation);
        }
        let n = self.count as f64;
        Ok(MetricReport {
            delta1: self.within[0] as f64 / n,
            delta2: self.within[1] as f64 / n,
            delta3: self.within[2] as f64 / n,
            rel: self.abs_rel / n,
            rms: (self.sq_err / n).sqrt(),
            log10: self.log10_err / n,
            pixels: self.count,
        })
    }
}

/// Accumulates one prediction/ground-truth pair under `protocol`.
///
/// `valid`, when given, marks ground-truth pixels that carry a measurement.
pub fn accumulate_pair(
    pred: DepthView<'_>,
    truth: DepthView<'_>,
    valid: Option<&[bool]>,
    protocol: &EvalProtocol,
) -> Result<MetricAccumulator> {
    protocol.validate()?;
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(Error::dim(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.height, pred.width, truth.height, truth.width
        )));
    }
    if valid.is_some_and(|v| v.len() != truth.data.len()) {
        return Err(Error::dim("validity mask does not match the ground-truth map"));
    }
    let (h, w) = (truth.height, truth.width);
    let rect = match &protocol.crop {
        Some(spec) => spec.resolve(h, w)?,
        None => CropRect::full(h, w),
    };
    let cap = protocol.max_depth.unwrap_or(f64::INFINITY);
    let mut acc = MetricAccumulator::default();
    for r in rect.rows.0..rect.rows.1 {
        for c in rect.cols.0..rect.cols.1 {
            let i = r * w + c;
            let y = truth.data[i];
            if valid.is_some_and(|v| !v[i]) || !y.is_finite() || y < protocol.min_depth || y > cap {
                continue;
            }
            let p = pred.data[i];
            if !(p > 0.0) || !p.is_finite() {
                return Err(Error::Input(format!("prediction at ({r},{c}) is {p}; depths must be positive")));
            }
            acc.push(p, y);
        }
    }
    Ok(acc)
}

pub fn evaluate_pair(
    pred: DepthView<'_>,
    truth: DepthView<'_>,
    valid: Option<&[bool]>,
    protocol: &EvalProtocol,
) -> Result<MetricReport> {
    accumulate_pair(pred, truth, valid, protocol)?.report()
}

/// Combines per-image accumulators in the given order.
pub fn aggregate(parts: &[MetricAccumulator], how: Aggregation) -> Result<MetricReport> {
    if parts.is_empty() {
        return Err(Error::Input("cannot aggregate an empty evaluation set".into()));
    }
    match how {
        Aggregation::Pooled => {
            let mut total = MetricAccumulator::default();
            parts.iter().for_each(|p| total.merge(p));
            total.report()
        }
        Aggregation::PerImage => {
            let reports: Vec<MetricReport> = parts.iter().map(|p| p.report()).collect::<Result<_>>()?;
            let n = reports.len() as f64;
            let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
            Ok(MetricReport {
                delta1: mean(|r| r.delta1),
                delta2: mean(|r| r.delta2),
                delta3: mean(|r| r.delta3),
                rel: mean(|r| r.rel),
                rms: mean(|r| r.rms),
                log10: mean(|r| r.log10),
                pixels: reports.iter().map(|r| r.pixels).sum(),
            })
        }
    }
}
