//! Manifests, identity-disjoint splits and the synthetic palmprint generator.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::raster::Raster;
use crate::roi::Keypoints;

/// Acquisition stage: enrollment images come from the first session,
/// probes from the second.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Enrollment,
    Probe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub identity: u32,
    pub stage: Stage,
    pub side: Side,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<Keypoints>,
}

/// A grayscale palm image with its labels. `identity` names a palm, not a
/// person: the two hands of one person are distinct classes.
#[derive(Clone, Debug, PartialEq)]
pub struct PalmSample {
    pub image: Raster,
    pub identity: u32,
    pub stage: Stage,
    pub side: Side,
    pub keypoints: Option<Keypoints>,
    pub path: Option<PathBuf>,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CoreError::Dataset(format!("manifest line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn manifest_to_string(rows: &[ManifestRow]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .map_err(|e| CoreError::Dataset(format!("manifest line {}: {e}", i + 1)))?,
        );
    }
    Ok(rows)
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(manifest_to_string(rows)?.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Loads every image named in a manifest; relative paths resolve against
/// the manifest's directory.
pub fn load_samples(manifest: impl AsRef<Path>) -> Result<Vec<PalmSample>> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|row| {
            let path = base.join(&row.path);
            let image = Raster::load(&path).map_err(|e| {
                CoreError::Dataset(format!("cannot load {}: {e}", path.display()))
            })?;
            Ok(PalmSample {
                image,
                identity: row.identity,
                stage: row.stage,
                side: row.side,
                keypoints: row.keypoints,
                path: Some(path),
            })
        })
        .collect()
}

/// Writes samples as 8-bit PNGs plus `manifest.jsonl` into `dir`.
pub fn write_corpus(samples: &[PalmSample], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("id{:05}_{:03}.png", s.identity, i);
        s.image.save_png(dir.join(&name))?;
        rows.push(ManifestRow {
            path: name,
            identity: s.identity,
            stage: s.stage,
            side: s.side,
            keypoints: s.keypoints,
        });
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &rows)?;
    Ok(manifest)
}

// ---- splits ------------------------------------------------------------

/// What a split keeps together.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitUnit {
    /// Each palm independently.
    #[default]
    Palm,
    /// Both palms of a person (palm identities `2p` and `2p + 1`).
    Person,
}

impl SplitUnit {
    fn key(self, identity: u32) -> u32 {
        match self {
            SplitUnit::Palm => identity,
            SplitUnit::Person => identity / 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SplitPolicy {
    /// Seeded random fraction of units for training (rounded to nearest).
    Fraction { train: f64, seed: u64 },
    /// Seeded random choice of exactly `train` units.
    Count { train: usize, seed: u64 },
    /// The `n` lowest-numbered units train, the rest test.
    FirstN(usize),
    /// Explicit palm identity lists.
    Explicit { train: Vec<u32>, test: Vec<u32> },
}

/// Identity-disjoint train/test palm identities, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<u32>,
    pub test: Vec<u32>,
}

pub fn split_identities(identities: &[u32], policy: &SplitPolicy, unit: SplitUnit) -> Result<Split> {
    let ids: BTreeSet<u32> = identities.iter().copied().collect();
    let units: Vec<u32> = ids
        .iter()
        .map(|&i| unit.key(i))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let train_units: BTreeSet<u32> = match policy {
        SplitPolicy::Fraction { train, seed } => {
            if !(0.0..=1.0).contains(train) {
                return Err(invalid(format!("train fraction {train} outside [0, 1]")));
            }
            let n = (train * units.len() as f64).round() as usize;
            shuffled_prefix(&units, n, *seed)
        }
        SplitPolicy::Count { train, seed } => {
            if *train > units.len() {
                return Err(invalid(format!(
                    "asked for {train} training units but only {} exist",
                    units.len()
                )));
            }
            shuffled_prefix(&units, *train, *seed)
        }
        SplitPolicy::FirstN(n) => units.iter().take(*n).copied().collect(),
        SplitPolicy::Explicit { train, test } => {
            let tr: BTreeSet<u32> = train.iter().copied().collect();
            let te: BTreeSet<u32> = test.iter().copied().collect();
            if let Some(x) = tr.intersection(&te).next() {
                return Err(CoreError::Dataset(format!(
                    "identity {x} appears in both train and test lists"
                )));
            }
            let split = Split {
                train: tr.into_iter().filter(|i| ids.contains(i)).collect(),
                test: te.into_iter().filter(|i| ids.contains(i)).collect(),
            };
            return non_empty(split);
        }
    };
    let (train, test): (Vec<u32>, Vec<u32>) =
        ids.iter().partition(|&&i| train_units.contains(&unit.key(i)));
    non_empty(Split { train, test })
}

fn shuffled_prefix(units: &[u32], n: usize, seed: u64) -> BTreeSet<u32> {
    let mut v = units.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v.into_iter().take(n).collect()
}

fn non_empty(split: Split) -> Result<Split> {
    if split.train.is_empty() {
        return Err(CoreError::Dataset("split leaves the training set empty".into()));
    }
    if split.test.is_empty() {
        return Err(CoreError::Dataset("split leaves the test set empty".into()));
    }
    Ok(split)
}

/// Partitions samples by [`split_identities`].
pub fn split_dataset(
    samples: Vec<PalmSample>,
    policy: &SplitPolicy,
    unit: SplitUnit,
) -> Result<(Vec<PalmSample>, Vec<PalmSample>)> {
    let ids: Vec<u32> = samples.iter().map(|s| s.identity).collect();
    let split = split_identities(&ids, policy, unit)?;
    let train: BTreeSet<u32> = split.train.into_iter().collect();
    let test: BTreeSet<u32> = split.test.into_iter().collect();
    let (tr, rest): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| train.contains(&s.identity));
    Ok((tr, rest.into_iter().filter(|s| test.contains(&s.identity)).collect()))
}

// ---- synthetic generator -----------------------------------------------

/// Intra-class nuisance magnitudes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    /// Maximum per-axis translation, pixels.
    pub translation: f64,
    /// Maximum in-plane rotation, radians.
    pub rotation: f64,
    /// Maximum relative contrast change.
    pub contrast: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        translation: 0.0,
        rotation: 0.0,
        contrast: 0.0,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPalmSpec {
    pub n_identities: usize,
    pub images_per_identity: usize,
    /// Leading images of each identity labelled as enrollment.
    pub enrollment_per_identity: usize,
    pub image_size: usize,
    pub jitter: Jitter,
    /// Minimum max-norm distance between the curve parameters of any two
    /// identities, in units of the image side.
    pub min_separation: f64,
    /// Faint identity-specific creases.
    pub wrinkles: usize,
    /// Per-image white noise standard deviation.
    pub noise: f64,
    /// Amplitude of the per-image background texture.
    pub texture: f64,
    /// Identity label of the first generated palm.
    pub first_identity: u32,
    pub seed: u64,
}

impl Default for SyntheticPalmSpec {
    fn default() -> Self {
        SyntheticPalmSpec {
            n_identities: 20,
            images_per_identity: 6,
            enrollment_per_identity: 3,
            image_size: 64,
            jitter: Jitter {
                translation: 1.5,
                rotation: 0.03,
                contrast: 0.2,
            },
            min_separation: 0.08,
            wrinkles: 6,
            noise: 0.03,
            texture: 0.04,
            first_identity: 0,
            seed: 7,
        }
    }
}

impl SyntheticPalmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities == 0 || self.images_per_identity == 0 {
            return Err(invalid("need at least one identity and one image per identity"));
        }
        if self.image_size < 8 {
            return Err(invalid("synthetic images must be at least 8 pixels wide"));
        }
        if self.enrollment_per_identity > self.images_per_identity {
            return Err(invalid("more enrollment images than images per identity"));
        }
        // Worst-case displacement of a curve point, in image-side units.
        let displacement = self.jitter.translation / self.image_size as f64 + self.jitter.rotation * 0.75;
        if displacement >= self.min_separation {
            return Err(invalid(format!(
                "jitter displacement {displacement:.4} must stay below the identity separation {}",
                self.min_separation
            )));
        }
        Ok(())
    }
}

/// Circular arc through two endpoints with signed sagitta `bulge`, all in
/// image-side units. Zero bulge is a straight segment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Arc {
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub bulge: f64,
}

enum ArcShape {
    Segment,
    Circle {
        center: [f64; 2],
        radius: f64,
        apex_dir: [f64; 2],
        cos_half_span: f64,
    },
}

impl Arc {
    fn shape(&self) -> ArcShape {
        let [x0, y0] = self.start;
        let [x1, y1] = self.end;
        let chord = (x1 - x0).hypot(y1 - y0);
        if self.bulge.abs() < 1e-9 || chord < 1e-12 {
            return ArcShape::Segment;
        }
        let (ux, uy) = ((x1 - x0) / chord, (y1 - y0) / chord);
        let (nx, ny) = (-uy, ux);
        let s = self.bulge;
        let radius = (chord * chord / 4.0 + s * s) / (2.0 * s.abs());
        let off = s - s.signum() * radius;
        let (mx, my) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
        let center = [mx + nx * off, my + ny * off];
        let apex_dir = [nx * s.signum(), ny * s.signum()];
        // Endpoint direction relative to the apex direction.
        let (ex, ey) = ((x0 - center[0]) / radius, (y0 - center[1]) / radius);
        ArcShape::Circle {
            center,
            radius,
            apex_dir,
            cos_half_span: ex * apex_dir[0] + ey * apex_dir[1],
        }
    }

    /// Euclidean distance from `(x, y)` to the arc.
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        let [x0, y0] = self.start;
        let [x1, y1] = self.end;
        let to_ends = (x - x0).hypot(y - y0).min((x - x1).hypot(y - y1));
        match self.shape() {
            ArcShape::Segment => {
                let (dx, dy) = (x1 - x0, y1 - y0);
                let len2 = dx * dx + dy * dy;
                if len2 < 1e-24 {
                    return to_ends;
                }
                let t = (((x - x0) * dx + (y - y0) * dy) / len2).clamp(0.0, 1.0);
                (x - x0 - t * dx).hypot(y - y0 - t * dy)
            }
            ArcShape::Circle {
                center,
                radius,
                apex_dir,
                cos_half_span,
            } => {
                let (vx, vy) = (x - center[0], y - center[1]);
                let r = vx.hypot(vy);
                if r < 1e-12 {
                    return radius;
                }
                let cos = (vx * apex_dir[0] + vy * apex_dir[1]) / r;
                if cos >= cos_half_span {
                    (r - radius).abs()
                } else {
                    to_ends
                }
            }
        }
    }
}

/// A dark crease: an arc with a Gaussian cross-section.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crease {
    pub arc: Arc,
    /// Gaussian cross-section standard deviation, image-side units.
    pub width: f64,
    pub depth: f64,
}

/// Identity-specific palm appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct PalmPattern {
    pub principal: [Crease; 3],
    pub wrinkles: Vec<Crease>,
    /// Free parameters used for the separation check.
    pub signature: [f64; 9],
}

const BACKGROUND: f64 = 0.62;

impl PalmPattern {
    fn random(rng: &mut ChaCha8Rng, wrinkles: usize, size: usize) -> PalmPattern {
        let px = 1.0 / size as f64;
        let mut width = || rng.random_range(0.9..1.6) * px * (size as f64 / 64.0).sqrt();
        let w = [width(), width(), width()];
        let sig = [
            rng.random_range(0.12..0.40),
            rng.random_range(0.10..0.45),
            rng.random_range(-0.14..0.14),
            rng.random_range(0.45..0.72),
            rng.random_range(0.50..0.85),
            rng.random_range(-0.14..0.14),
            rng.random_range(0.30..0.70),
            rng.random_range(0.05..0.55),
            rng.random_range(-0.18..0.18),
        ];
        let principal = [
            Crease {
                arc: Arc {
                    start: [-0.1, sig[0]],
                    end: [1.1, sig[1]],
                    bulge: sig[2],
                },
                width: w[0],
                depth: rng.random_range(0.35..0.5),
            },
            Crease {
                arc: Arc {
                    start: [-0.1, sig[3]],
                    end: [1.1, sig[4]],
                    bulge: sig[5],
                },
                width: w[1],
                depth: rng.random_range(0.35..0.5),
            },
            Crease {
                arc: Arc {
                    start: [sig[6], -0.1],
                    end: [sig[7], 1.1],
                    bulge: sig[8],
                },
                width: w[2],
                depth: rng.random_range(0.35..0.5),
            },
        ];
        let wrinkles = (0..wrinkles)
            .map(|_| {
                let (cx, cy) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
                let a: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let half = rng.random_range(0.05..0.12);
                Crease {
                    arc: Arc {
                        start: [cx - half * a.cos(), cy - half * a.sin()],
                        end: [cx + half * a.cos(), cy + half * a.sin()],
                        bulge: rng.random_range(-0.02..0.02),
                    },
                    width: 0.7 * px,
                    depth: rng.random_range(0.06..0.1),
                }
            })
            .collect();
        PalmPattern {
            principal,
            wrinkles,
            signature: sig,
        }
    }

    fn separation(&self, other: &PalmPattern) -> f64 {
        self.signature
            .iter()
            .zip(&other.signature)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Crease darkening at pattern coordinates `(u, v)` (image-side units).
    fn relief(&self, u: f64, v: f64) -> f64 {
        self.principal
            .iter()
            .chain(&self.wrinkles)
            .map(|c| {
                let d = c.arc.distance(u, v) / c.width;
                if d > 5.0 {
                    0.0
                } else {
                    c.depth * (-0.5 * d * d).exp()
                }
            })
            .sum()
    }
}

/// Renders one view of a pattern. `pose = (rotation, tx, ty)` in radians
/// and pixels; `contrast` scales the crease relief.
fn render(
    pattern: &PalmPattern,
    size: usize,
    pose: (f64, f64, f64),
    contrast: f64,
    texture: &[(f64, f64, f64, f64)],
    noise: &[f64],
) -> Raster {
    let (phi, tx, ty) = pose;
    let (c, s) = (phi.cos(), phi.sin());
    let mid = (size as f64 - 1.0) / 2.0;
    let n = size as f64;
    Raster::from_fn(size, size, |x, y| {
        let (dx, dy) = (x as f64 - mid - tx, y as f64 - mid - ty);
        let u = (c * dx + s * dy + mid + 0.5) / n;
        let v = (-s * dx + c * dy + mid + 0.5) / n;
        let tex: f64 = texture
            .iter()
            .map(|&(a, fx, fy, ph)| a * (fx * x as f64 + fy * y as f64 + ph).sin())
            .sum();
        let value = BACKGROUND - contrast * pattern.relief(u, v) + tex + noise[y * size + x];
        value.clamp(0.0, 1.0)
    })
}

fn derived_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws identity patterns with rejection sampling until every pair is at
/// least `min_separation` apart.
pub fn synthetic_patterns(spec: &SyntheticPalmSpec) -> Result<Vec<PalmPattern>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(spec.seed, 0, u64::MAX));
    let mut patterns: Vec<PalmPattern> = Vec::with_capacity(spec.n_identities);
    let mut attempts = 0usize;
    while patterns.len() < spec.n_identities {
        attempts += 1;
        if attempts > 1000 * spec.n_identities + 1000 {
            return Err(invalid(format!(
                "cannot place {} identities at separation {}",
                spec.n_identities, spec.min_separation
            )));
        }
        let p = PalmPattern::random(&mut rng, spec.wrinkles, spec.image_size);
        if patterns.iter().all(|q| q.separation(&p) >= spec.min_separation) {
            patterns.push(p);
        }
    }
    Ok(patterns)
}

/// Deterministic synthetic corpus: identity `first_identity + i` owns
/// `images_per_identity` jittered renderings of pattern `i`.
pub fn generate_synthetic(spec: &SyntheticPalmSpec) -> Result<Vec<PalmSample>> {
    let patterns = synthetic_patterns(spec)?;
    let size = spec.image_size;
    let mut out = Vec::with_capacity(spec.n_identities * spec.images_per_identity);
    for (i, pattern) in patterns.iter().enumerate() {
        let identity = spec.first_identity + i as u32;
        for j in 0..spec.images_per_identity {
            let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(spec.seed, i as u64, j as u64));
            let j_ = spec.jitter;
            let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
            let pose = (sym(j_.rotation), sym(j_.translation), sym(j_.translation));
            let contrast = 1.0 + sym(j_.contrast);
            let texture: Vec<_> = (0..3)
                .map(|_| {
                    let a = spec.texture / 3.0;
                    let f: f64 = rng.random_range(0.15..0.6);
                    let dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    (a, f * dir.cos(), f * dir.sin(), rng.random_range(0.0..std::f64::consts::TAU))
                })
                .collect();
            let noise: Vec<f64> = if spec.noise > 0.0 {
                let normal = Normal::new(0.0, spec.noise)
                    .map_err(|e| invalid(format!("noise level: {e}")))?;
                (0..size * size).map(|_| normal.sample(&mut rng)).collect()
            } else {
                vec![0.0; size * size]
            };
            let image = render(pattern, size, pose, contrast, &texture, &noise);
            out.push(PalmSample {
                image,
                identity,
                stage: if j < spec.enrollment_per_identity {
                    Stage::Enrollment
                } else {
                    Stage::Probe
                },
                side: if identity % 2 == 0 { Side::Left } else { Side::Right },
                keypoints: None,
                path: None,
            });
        }
    }
    Ok(out)
}
