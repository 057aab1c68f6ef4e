//! Coding-based comparison matchers.
//!
//! Competitive coding assigns each pixel the orientation whose zero-mean
//! Gabor filter gives the most negative response (dark lines on a bright
//! palm), and matches code maps by angular distance. The region-histogram
//! matcher pools the same codes into per-cell histograms compared by
//! chi-square distance.

use cpn_tensor::kernels::{conv3d_forward, ConvGeometry};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::gabor::{build_curved_template, build_template, Bend};
use crate::raster::Raster;

/// Tie tolerance of the winner-take-all rule; within it the lowest index wins.
pub const TIE_TOLERANCE: f64 = 1e-9;
/// Chi-square denominator guard.
pub const CHI_SQUARE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompCodeConfig {
    pub orientations: usize,
    pub lambda: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub size: usize,
}

impl Default for CompCodeConfig {
    fn default() -> Self {
        CompCodeConfig {
            orientations: 6,
            lambda: 8.0,
            sigma: 2.5,
            gamma: 0.5,
            size: 17,
        }
    }
}

/// Orientation-indexed zero-mean real Gabor filters.
#[derive(Clone, Debug, PartialEq)]
pub struct CodingBank {
    orientations: usize,
    size: usize,
    filters: Vec<f64>,
}

impl CodingBank {
    pub fn straight(cfg: &CompCodeConfig) -> Result<Self> {
        let t = build_template(cfg.lambda, cfg.sigma, cfg.orientations, cfg.size, cfg.gamma)?;
        Ok(Self::zero_mean(cfg, t.into_data()))
    }

    pub fn curved(cfg: &CompCodeConfig, bend: Bend) -> Result<Self> {
        let t = build_curved_template(cfg.lambda, cfg.sigma, cfg.orientations, cfg.size, cfg.gamma, bend)?;
        Ok(Self::zero_mean(cfg, t.into_data()))
    }

    fn zero_mean(cfg: &CompCodeConfig, mut filters: Vec<f64>) -> Self {
        let area = cfg.size * cfg.size;
        for f in filters.chunks_mut(area) {
            let mean = f.iter().sum::<f64>() / area as f64;
            f.iter_mut().for_each(|v| *v -= mean);
        }
        CodingBank {
            orientations: cfg.orientations,
            size: cfg.size,
            filters,
        }
    }

    pub fn orientations(&self) -> usize {
        self.orientations
    }

    /// Same-size responses `[K][H·W]`; the image is zero-padded.
    pub fn responses(&self, image: &Raster) -> Result<Vec<Vec<f64>>> {
        let (w, h) = (image.width(), image.height());
        let k = self.orientations;
        let pad = self.size / 2;
        let (out, shape) = conv3d_forward(
            image.data(),
            &[1, 1, 1, h, w],
            &self.filters,
            &[k, 1, 1, self.size, self.size],
            None,
            ConvGeometry::new([1, 1, 1], [0, pad, pad]),
        )?;
        debug_assert_eq!(shape, [1, k, 1, h, w]);
        Ok(out.chunks(h * w).map(<[f64]>::to_vec).collect())
    }
}

/// Per-pixel winning orientation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrientationCodeMap {
    width: usize,
    height: usize,
    orientations: u8,
    codes: Vec<u8>,
    valid: Vec<bool>,
}

impl OrientationCodeMap {
    pub fn new(width: usize, height: usize, orientations: u8, codes: Vec<u8>) -> Result<Self> {
        if codes.len() != width * height {
            return Err(CoreError::ShapeMismatch(format!(
                "{width}x{height} code map needs {} codes, got {}",
                width * height,
                codes.len()
            )));
        }
        if orientations == 0 || codes.iter().any(|&c| c >= orientations) {
            return Err(invalid(format!("codes must lie in [0, {orientations})")));
        }
        Ok(OrientationCodeMap {
            width,
            height,
            orientations,
            valid: vec![true; codes.len()],
            codes,
        })
    }

    /// Marks pixels excluded from matching.
    pub fn with_mask(mut self, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != self.codes.len() {
            return Err(CoreError::ShapeMismatch("mask size differs from code map".into()));
        }
        self.valid = valid;
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn orientations(&self) -> u8 {
        self.orientations
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.codes[y * self.width + x]
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if (self.width, self.height, self.orientations) != (other.width, other.height, other.orientations) {
            return Err(CoreError::ShapeMismatch(format!(
                "code maps {}x{}/{} and {}x{}/{} differ",
                self.width, self.height, self.orientations, other.width, other.height, other.orientations
            )));
        }
        Ok(())
    }
}

/// Winner-take-all on the most negative response; ties go to the lowest index.
pub fn compcode_encode(roi: &Raster, bank: &CodingBank) -> Result<OrientationCodeMap> {
    let resp = bank.responses(roi)?;
    let n = roi.width() * roi.height();
    let codes = (0..n)
        .map(|p| {
            let mut best = 0;
            for k in 1..resp.len() {
                if resp[k][p] < resp[best][p] - TIE_TOLERANCE {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    OrientationCodeMap::new(roi.width(), roi.height(), bank.orientations() as u8, codes)
}

/// Mean angular code distance over jointly valid pixels, scaled to `[0, 1]`.
pub fn compcode_distance(a: &OrientationCodeMap, b: &OrientationCodeMap) -> Result<f64> {
    a.check_compatible(b)?;
    let k = a.orientations as i32;
    let half = (k / 2).max(1) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..a.codes.len() {
        if a.valid[i] && b.valid[i] {
            let d = (a.codes[i] as i32 - b.codes[i] as i32).abs();
            total += d.min(k - d) as f64 / half;
            count += 1;
        }
    }
    if count == 0 {
        return Err(CoreError::Evaluation("code maps share no valid pixels".into()));
    }
    Ok(total / count as f64)
}

/// Grid of L1-normalized code histograms.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionHistogram {
    pub rows: usize,
    pub cols: usize,
    pub bins: usize,
    /// `rows·cols` consecutive histograms of `bins` entries.
    pub cells: Vec<f64>,
}

impl RegionHistogram {
    /// Cell `(r, c)` covers rows `[r·H/rows, (r+1)·H/rows)` and likewise for
    /// columns. Empty cells become uniform.
    pub fn from_codes(map: &OrientationCodeMap, grid: (usize, usize)) -> Result<Self> {
        let (rows, cols) = grid;
        if rows == 0 || cols == 0 || rows > map.height || cols > map.width {
            return Err(invalid(format!(
                "grid {rows}x{cols} does not fit a {}x{} map",
                map.width, map.height
            )));
        }
        let bins = map.orientations as usize;
        let mut cells = vec![0.0; rows * cols * bins];
        for r in 0..rows {
            for c in 0..cols {
                let h = &mut cells[(r * cols + c) * bins..(r * cols + c + 1) * bins];
                for y in r * map.height / rows..(r + 1) * map.height / rows {
                    for x in c * map.width / cols..(c + 1) * map.width / cols {
                        let i = y * map.width + x;
                        if map.valid[i] {
                            h[map.codes[i] as usize] += 1.0;
                        }
                    }
                }
                let total: f64 = h.iter().sum();
                if total > 0.0 {
                    h.iter_mut().for_each(|v| *v /= total);
                } else {
                    h.iter_mut().for_each(|v| *v = 1.0 / bins as f64);
                }
            }
        }
        Ok(RegionHistogram { rows, cols, bins, cells })
    }

    pub fn cell(&self, r: usize, c: usize) -> &[f64] {
        let i = (r * self.cols + c) * self.bins;
        &self.cells[i..i + self.bins]
    }

    /// Mean per-cell `½ Σ (p − q)² / (p + q + ε)`.
    pub fn chi_square(&self, other: &Self) -> Result<f64> {
        if (self.rows, self.cols, self.bins) != (other.rows, other.cols, other.bins) {
            return Err(CoreError::ShapeMismatch("region histograms differ in layout".into()));
        }
        let total: f64 = self
            .cells
            .iter()
            .zip(&other.cells)
            .map(|(p, q)| 0.5 * (p - q).powi(2) / (p + q + CHI_SQUARE_EPS))
            .sum();
        Ok(total / (self.rows * self.cols) as f64)
    }
}

pub fn region_hist_distance(
    a: &OrientationCodeMap,
    b: &OrientationCodeMap,
    grid: (usize, usize),
) -> Result<f64> {
    a.check_compatible(b)?;
    RegionHistogram::from_codes(a, grid)?.chi_square(&RegionHistogram::from_codes(b, grid)?)
}

/// A template-based matcher: `template` encodes one ROI, `distance`
/// compares two templates (smaller is more similar).
pub trait Matcher: Sync {
    type Template: Send + Sync;

    fn name(&self) -> String;
    fn template(&self, roi: &Raster) -> Result<Self::Template>;
    fn distance(&self, a: &Self::Template, b: &Self::Template) -> Result<f64>;

    fn compare(&self, a: &Raster, b: &Raster) -> Result<f64> {
        self.distance(&self.template(a)?, &self.template(b)?)
    }
}

#[derive(Clone, Debug)]
pub struct CompCodeMatcher {
    pub bank: CodingBank,
    pub label: String,
}

impl CompCodeMatcher {
    pub fn new(bank: CodingBank) -> Self {
        CompCodeMatcher {
            bank,
            label: "compcode".into(),
        }
    }
}

impl Matcher for CompCodeMatcher {
    type Template = OrientationCodeMap;

    fn name(&self) -> String {
        self.label.clone()
    }

    fn template(&self, roi: &Raster) -> Result<OrientationCodeMap> {
        compcode_encode(roi, &self.bank)
    }

    fn distance(&self, a: &OrientationCodeMap, b: &OrientationCodeMap) -> Result<f64> {
        compcode_distance(a, b)
    }
}

#[derive(Clone, Debug)]
pub struct RegionHistMatcher {
    pub bank: CodingBank,
    pub grid: (usize, usize),
    pub label: String,
}

impl RegionHistMatcher {
    pub fn new(bank: CodingBank) -> Self {
        RegionHistMatcher {
            bank,
            grid: (3, 3),
            label: "region-hist".into(),
        }
    }
}

impl Matcher for RegionHistMatcher {
    type Template = RegionHistogram;

    fn name(&self) -> String {
        self.label.clone()
    }

    fn template(&self, roi: &Raster) -> Result<RegionHistogram> {
        RegionHistogram::from_codes(&compcode_encode(roi, &self.bank)?, self.grid)
    }

    fn distance(&self, a: &RegionHistogram, b: &RegionHistogram) -> Result<f64> {
        a.chi_square(b)
    }
}

/// Averages the distances of the same matcher run with a straight and a
/// curved bank.
#[derive(Clone, Debug)]
pub struct CombinedMatcher<M> {
    pub straight: M,
    pub curved: M,
}

/// `½(d_straight + d_curved)`.
pub fn average_distance(d_straight: f64, d_curved: f64) -> f64 {
    0.5 * (d_straight + d_curved)
}

impl<M: Matcher> Matcher for CombinedMatcher<M> {
    type Template = (M::Template, M::Template);

    fn name(&self) -> String {
        format!("{}+{}", self.straight.name(), self.curved.name())
    }

    fn template(&self, roi: &Raster) -> Result<Self::Template> {
        Ok((self.straight.template(roi)?, self.curved.template(roi)?))
    }

    fn distance(&self, a: &Self::Template, b: &Self::Template) -> Result<f64> {
        Ok(average_distance(
            self.straight.distance(&a.0, &b.0)?,
            self.curved.distance(&a.1, &b.1)?,
        ))
    }
}

/// Distance between two ROIs under a straight/curved combination.
pub fn combined_gabor_distance<M: Matcher>(
    roi_a: &Raster,
    roi_b: &Raster,
    matcher: &CombinedMatcher<M>,
) -> Result<f64> {
    matcher.compare(roi_a, roi_b)
}
