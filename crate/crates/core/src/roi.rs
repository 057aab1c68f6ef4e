//! Keypoint-driven ROI geometry and the ROI-bias perturbation.
//!
//! Image coordinates have `x` to the right and `y` downward, with pixel
//! centres at integers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::raster::Raster;

/// ROI side as a multiple of the finger-gap baseline length.
pub const SIDE_RATIO: f64 = 1.25;
/// Offset of the ROI centre from the baseline midpoint, in baseline lengths.
pub const OFFSET_RATIO: f64 = 0.85;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Point { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn midpoint(self, o: Point) -> Point {
        Point::new((self.x + o.x) / 2.0, (self.y + o.y) / 2.0)
    }

    pub fn distance(self, o: Point) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }

    pub fn offset(self, dir: Point, t: f64) -> Point {
        Point::new(self.x + dir.x * t, self.y + dir.y * t)
    }
}

/// The four finger-gap joints, annotated left to right.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoints {
    pub a: Point,
    pub b: Point,
    pub c: Point,
    pub d: Point,
}

impl Keypoints {
    pub fn points(&self) -> [Point; 4] {
        [self.a, self.b, self.c, self.d]
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Keypoints {
        Keypoints {
            a: f(self.a),
            b: f(self.b),
            c: f(self.c),
            d: f(self.d),
        }
    }

    /// Checks that every point lies within a `width × height` image.
    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        for p in self.points() {
            let inside = p.x >= -0.5
                && p.y >= -0.5
                && p.x <= width as f64 - 0.5
                && p.y <= height as f64 - 0.5;
            if !inside || !p.x.is_finite() || !p.y.is_finite() {
                return Err(CoreError::Geometry(format!(
                    "keypoint ({}, {}) outside {width}x{height} image",
                    p.x, p.y
                )));
            }
        }
        Ok(())
    }
}

/// Oriented square ROI.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiBox {
    pub center: Point,
    pub side: f64,
    /// Unit vector from the baseline midpoint toward the first gap midpoint.
    pub x_axis: Point,
    /// Unit vector from the baseline toward the palm centre.
    pub y_axis: Point,
}

impl RoiBox {
    /// Axis-aligned box covering a whole `width × height` image with
    /// columns running left to right.
    pub fn full_image(width: usize, height: usize) -> RoiBox {
        assert_eq!(width, height, "full-image ROI needs a square image");
        RoiBox {
            center: Point::new((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0),
            side: width as f64,
            x_axis: Point::new(-1.0, 0.0),
            y_axis: Point::new(0.0, 1.0),
        }
    }

    /// Direction of increasing output column. Columns run from the second
    /// gap toward the first, so for a palm-up hand the output is not mirrored.
    pub fn column_axis(&self) -> Point {
        Point::new(-self.x_axis.x, -self.x_axis.y)
    }

    pub fn corners(&self) -> [Point; 4] {
        let h = self.side / 2.0;
        let u = self.column_axis();
        let v = self.y_axis;
        [(-h, -h), (h, -h), (h, h), (-h, h)]
            .map(|(a, b)| Point::new(self.center.x + a * u.x + b * v.x, self.center.y + a * u.y + b * v.y))
    }

    /// Image position of output pixel `(col, row)` on an `out × out` grid.
    pub fn sample_point(&self, col: usize, row: usize, out: usize) -> Point {
        let step = self.side / out as f64;
        let a = (col as f64 + 0.5) * step - self.side / 2.0;
        let b = (row as f64 + 0.5) * step - self.side / 2.0;
        let u = self.column_axis();
        let v = self.y_axis;
        Point::new(
            self.center.x + a * u.x + b * v.x,
            self.center.y + a * u.y + b * v.y,
        )
    }
}

/// Builds the local frame from the finger gaps.
///
/// `K1`, `K2` are the midpoints of `AB` and `CD`, `O1` their midpoint and
/// `l = |K1K2|`. The box centre is `O1 + 0.85·l·ŷ` with side `1.25·l`, where
/// `ŷ` is `x̂` rotated by +90° in image coordinates (negated if `mirrored`).
pub fn locate_roi(kp: &Keypoints, mirrored: bool) -> Result<RoiBox> {
    let k1 = kp.a.midpoint(kp.b);
    let k2 = kp.c.midpoint(kp.d);
    let o1 = k1.midpoint(k2);
    let l = k1.distance(k2);
    if !(l > 0.0 && l.is_finite()) {
        return Err(CoreError::Geometry(format!(
            "degenerate keypoints: gap midpoints coincide (l = {l})"
        )));
    }
    let x_axis = Point::new((k1.x - o1.x) / (l / 2.0), (k1.y - o1.y) / (l / 2.0));
    let sign = if mirrored { -1.0 } else { 1.0 };
    let y_axis = Point::new(sign * x_axis.y, -sign * x_axis.x);
    Ok(RoiBox {
        center: o1.offset(y_axis, OFFSET_RATIO * l),
        side: SIDE_RATIO * l,
        x_axis,
        y_axis,
    })
}

fn check_overlap(image: &Raster, roi: &RoiBox) -> Result<()> {
    let c = roi.corners();
    let (w, h) = (image.width() as f64 - 0.5, image.height() as f64 - 0.5);
    let disjoint = c.iter().all(|p| p.x < -0.5)
        || c.iter().all(|p| p.x > w)
        || c.iter().all(|p| p.y < -0.5)
        || c.iter().all(|p| p.y > h);
    if disjoint || !(roi.side > 0.0 && roi.side.is_finite()) {
        return Err(CoreError::Geometry("ROI box lies entirely outside the image".into()));
    }
    Ok(())
}

/// Samples the oriented square onto an `out × out` grid (bilinear, zero
/// outside the image) without normalizing intensities.
pub fn resample_roi(image: &Raster, roi: &RoiBox, out: usize) -> Result<Raster> {
    if out == 0 {
        return Err(invalid("ROI output size must be positive"));
    }
    check_overlap(image, roi)?;
    Ok(Raster::from_fn(out, out, |col, row| {
        let p = roi.sample_point(col, row, out);
        image.sample_zero(p.x, p.y)
    }))
}

/// [`resample_roi`] followed by per-image zero-mean, unit-variance scaling.
pub fn extract_roi(image: &Raster, roi: &RoiBox, out: usize) -> Result<Raster> {
    Ok(resample_roi(image, roi, out)?.standardized())
}

/// ROI-bias perturbation: translation degree `r` in pixels and an RNG seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub r: usize,
    pub seed: u64,
}

impl BiasSpec {
    /// Per-axis translation bounds, `[max(r-2, 0), r+2]`.
    pub fn range(&self) -> (usize, usize) {
        (self.r.saturating_sub(2), self.r + 2)
    }

    /// The `(tx, ty)` translation this spec draws.
    pub fn draw(&self) -> (usize, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (lo, hi) = self.range();
        let tx = rng.random_range(lo..=hi);
        let ty = rng.random_range(lo..=hi);
        (tx, ty)
    }
}

/// Result of [`bias_transform`].
#[derive(Clone, Debug, PartialEq)]
pub struct Biased {
    pub image: Raster,
    pub tx: usize,
    pub ty: usize,
}

/// Drops the first `tx` columns and `ty` rows of the ROI and stretches the
/// remainder back to the original size.
pub fn bias_transform(roi: &Raster, spec: &BiasSpec) -> Result<Biased> {
    let (tx, ty) = spec.draw();
    shift_crop(roi, tx, ty).map(|image| Biased { image, tx, ty })
}

/// Crop `[ty.., tx..]` resized back to the input size.
pub fn shift_crop(roi: &Raster, tx: usize, ty: usize) -> Result<Raster> {
    let (w, h) = (roi.width(), roi.height());
    if tx >= w || ty >= h {
        return Err(CoreError::Geometry(format!(
            "translation ({tx}, {ty}) leaves nothing of a {w}x{h} ROI"
        )));
    }
    Ok(roi.resample_region(tx as f64, ty as f64, (w - tx) as f64, (h - ty) as f64, w, h))
}
