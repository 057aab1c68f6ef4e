//! Verification protocol and metrics.
//!
//! Scores are distances: a claim is accepted when its distance is below the
//! threshold. At threshold `t`, FAR is the fraction of impostor scores `< t`
//! and FRR the fraction of genuine scores `>= t`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::baselines::Matcher;
use crate::error::{CoreError, Result};
use crate::raster::Raster;
use crate::roi::{bias_transform, BiasSpec};

/// The FAR operating points reported by default.
pub const FAR_TARGETS: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
    pub label: String,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Self {
        ScoreSet {
            genuine,
            impostor,
            label: String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.genuine.is_empty() || self.impostor.is_empty() {
            return Err(CoreError::Evaluation(format!(
                "need genuine and impostor scores, got {} and {}",
                self.genuine.len(),
                self.impostor.len()
            )));
        }
        if self.genuine.iter().chain(&self.impostor).any(|v| !v.is_finite()) {
            return Err(CoreError::Evaluation("scores must be finite".into()));
        }
        Ok(())
    }

    pub fn far(&self, t: f64) -> f64 {
        self.impostor.iter().filter(|&&s| s < t).count() as f64 / self.impostor.len() as f64
    }

    pub fn frr(&self, t: f64) -> f64 {
        self.genuine.iter().filter(|&&s| s >= t).count() as f64 / self.genuine.len() as f64
    }

    /// `-∞`, every distinct score, midpoints of adjacent distinct scores, `+∞`,
    /// ascending.
    pub fn thresholds(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.genuine.iter().chain(&self.impostor).copied().collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        let mut out = Vec::with_capacity(2 * v.len() + 1);
        out.push(f64::NEG_INFINITY);
        for (i, &s) in v.iter().enumerate() {
            out.push(s);
            if let Some(&n) = v.get(i + 1) {
                out.push(0.5 * (s + n));
            }
        }
        out.push(f64::INFINITY);
        out
    }
}

/// One probe-versus-palm comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct Claim {
    pub probe: usize,
    pub probe_identity: u32,
    pub claimed: u32,
    pub distance: f64,
}

impl Claim {
    pub fn genuine(&self) -> bool {
        self.probe_identity == self.claimed
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolOutcome {
    pub scores: ScoreSet,
    pub claims: Vec<Claim>,
    /// Fraction of scored probes whose closest palm is their own.
    pub rank1: f64,
    /// Probes skipped because their palm has no enrollment.
    pub excluded: usize,
}

/// Scores every probe against every enrolled palm. The distance to a palm
/// is the minimum over that palm's templates.
pub fn score_templates<T>(
    gallery: &[(u32, T)],
    probes: &[(u32, T)],
    distance: impl Fn(&T, &T) -> Result<f64>,
) -> Result<ProtocolOutcome> {
    let mut palms: BTreeMap<u32, Vec<&T>> = BTreeMap::new();
    for (id, t) in gallery {
        palms.entry(*id).or_default().push(t);
    }
    let mut scores = ScoreSet::default();
    let mut claims = Vec::new();
    let mut excluded = 0;
    let mut hits = 0;
    let mut scored = 0;
    for (pi, (pid, pt)) in probes.iter().enumerate() {
        if !palms.contains_key(pid) {
            log::warn!("probe {pi}: palm {pid} has no enrollment, excluded");
            excluded += 1;
            continue;
        }
        let mut best: Option<(f64, u32)> = None;
        for (&palm, templates) in &palms {
            let mut d = f64::INFINITY;
            for t in templates {
                d = d.min(distance(pt, t)?);
            }
            if best.is_none_or(|(b, _)| d < b) {
                best = Some((d, palm));
            }
            if palm == *pid {
                scores.genuine.push(d);
            } else {
                scores.impostor.push(d);
            }
            claims.push(Claim {
                probe: pi,
                probe_identity: *pid,
                claimed: palm,
                distance: d,
            });
        }
        scored += 1;
        if best.is_some_and(|(_, p)| p == *pid) {
            hits += 1;
        }
    }
    let rank1 = if scored > 0 {
        hits as f64 / scored as f64
    } else {
        0.0
    };
    Ok(ProtocolOutcome {
        scores,
        claims,
        rank1,
        excluded,
    })
}

/// Encodes enrollment and probe images with `matcher` and scores them.
pub fn run_protocol<M: Matcher + ?Sized>(
    matcher: &M,
    enrollment: &[(u32, &Raster)],
    probes: &[(u32, &Raster)],
) -> Result<ProtocolOutcome> {
    let encode = |set: &[(u32, &Raster)]| -> Result<Vec<(u32, M::Template)>> {
        set.iter().map(|(id, r)| Ok((*id, matcher.template(r)?))).collect()
    };
    let gallery = encode(enrollment)?;
    let probes = encode(probes)?;
    let mut out = score_templates(&gallery, &probes, |a, b| matcher.distance(a, b))?;
    out.scores.label = matcher.name();
    Ok(out)
}

/// Object-safe view of a [`Matcher`].
pub trait Verifier: Sync {
    fn name(&self) -> String;
    fn verify(&self, enrollment: &[(u32, &Raster)], probes: &[(u32, &Raster)]) -> Result<ProtocolOutcome>;
}

impl<M: Matcher> Verifier for M {
    fn name(&self) -> String {
        Matcher::name(self)
    }

    fn verify(&self, enrollment: &[(u32, &Raster)], probes: &[(u32, &Raster)]) -> Result<ProtocolOutcome> {
        run_protocol(self, enrollment, probes)
    }
}

/// Fraction of probes whose nearest gallery template shares their identity.
/// Ties go to the earliest gallery entry.
pub fn compute_rank1<T>(
    probes: &[(u32, T)],
    gallery: &[(u32, T)],
    distance: impl Fn(&T, &T) -> Result<f64>,
) -> Result<f64> {
    if probes.is_empty() || gallery.is_empty() {
        return Err(CoreError::Evaluation("rank-1 needs probes and a gallery".into()));
    }
    let mut hits = 0;
    for (pid, p) in probes {
        let mut best = (f64::INFINITY, None);
        for (gid, g) in gallery {
            let d = distance(p, g)?;
            if d < best.0 || best.1.is_none() {
                best = (d, Some(*gid));
            }
        }
        if best.1 == Some(*pid) {
            hits += 1;
        }
    }
    Ok(hits as f64 / probes.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate over the candidate thresholds of
/// [`ScoreSet::thresholds`]. When FAR and FRR never tie, both curves are
/// interpolated linearly between the bracketing thresholds.
pub fn compute_eer(scores: &ScoreSet) -> Result<Eer> {
    scores.validate()?;
    let ts = scores.thresholds();
    let mut prev: Option<(f64, f64, f64)> = None;
    for &t in &ts {
        let (far, frr) = (scores.far(t), scores.frr(t));
        if far == frr {
            return Ok(Eer { eer: far, threshold: t });
        }
        if far > frr {
            let (t0, far0, frr0) = prev.expect("FAR < FRR at -inf");
            let d0 = far0 - frr0;
            let d1 = far - frr;
            let a = -d0 / (d1 - d0);
            let eer = far0 + a * (far - far0);
            let threshold = match (t0.is_finite(), t.is_finite()) {
                (true, true) => t0 + a * (t - t0),
                (false, _) => t,
                (true, false) => t0,
            };
            return Ok(Eer { eer, threshold });
        }
        prev = Some((t, far, frr));
    }
    unreachable!("FAR reaches 1 and FRR 0 at +inf")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub gar: f64,
}

/// `(FAR, GAR)` at every candidate threshold, ascending in both.
pub fn roc_points(scores: &ScoreSet) -> Result<Vec<RocPoint>> {
    scores.validate()?;
    Ok(scores
        .thresholds()
        .into_iter()
        .map(|t| RocPoint {
            threshold: t,
            far: scores.far(t),
            gar: 1.0 - scores.frr(t),
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GarAtFar {
    pub target: f64,
    pub gar: f64,
    pub threshold: f64,
    /// Set when `target < 1 / impostor count`: the operating point cannot
    /// be resolved and `gar` is only a lower bound.
    pub lower_bound: bool,
}

/// GAR at the largest candidate threshold whose FAR does not exceed each target.
pub fn gar_at_far(scores: &ScoreSet, targets: &[f64]) -> Result<Vec<GarAtFar>> {
    scores.validate()?;
    let ts = scores.thresholds();
    targets
        .iter()
        .map(|&target| {
            if !(target > 0.0 && target <= 1.0) {
                return Err(CoreError::Evaluation(format!("FAR target {target} outside (0, 1]")));
            }
            let t = ts
                .iter()
                .rev()
                .copied()
                .find(|&t| scores.far(t) <= target)
                .unwrap_or(f64::NEG_INFINITY);
            Ok(GarAtFar {
                target,
                gar: 1.0 - scores.frr(t),
                threshold: t,
                lower_bound: target * (scores.impostor.len() as f64) < 1.0,
            })
        })
        .collect()
}

/// Silverman's rule of thumb, `0.9·min(σ, IQR/1.34)·n^(-1/5)`, with fallbacks
/// for degenerate samples.
pub fn silverman_bandwidth(scores: &[f64]) -> f64 {
    let n = scores.len() as f64;
    if scores.len() < 2 {
        return 1e-3;
    }
    let mean = scores.iter().sum::<f64>() / n;
    let std = (scores.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let x = p * (n - 1.0);
        let (i, f) = (x.floor() as usize, x - x.floor());
        s[i] + f * (s[(i + 1).min(s.len() - 1)] - s[i])
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { std.min(iqr / 1.34) } else { std };
    let h = 0.9 * spread * n.powf(-0.2);
    if h > 0.0 {
        h
    } else {
        1e-3
    }
}

/// Gaussian kernel density on `grid`, scaled so the peak is 1.
pub fn score_density(scores: &[f64], bandwidth: Option<f64>, grid: &[f64]) -> Vec<f64> {
    if scores.is_empty() {
        return vec![0.0; grid.len()];
    }
    let h = bandwidth.unwrap_or_else(|| silverman_bandwidth(scores));
    let raw: Vec<f64> = grid
        .iter()
        .map(|&x| scores.iter().map(|&s| (-0.5 * ((x - s) / h).powi(2)).exp()).sum())
        .collect();
    let peak = raw.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        raw.into_iter().map(|v| v / peak).collect()
    } else {
        raw
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityCurve {
    pub grid: Vec<f64>,
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl DensityCurve {
    pub fn from_scores(scores: &ScoreSet, points: usize) -> Self {
        let all = scores.genuine.iter().chain(&scores.impostor);
        let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
        let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = 0.1 * (hi - lo).max(1e-6);
        let (lo, hi) = (lo - pad, hi + pad);
        let grid: Vec<f64> = (0..points)
            .map(|i| lo + (hi - lo) * i as f64 / (points.max(2) - 1) as f64)
            .collect();
        DensityCurve {
            genuine: score_density(&scores.genuine, None, &grid),
            impostor: score_density(&scores.impostor, None, &grid),
            grid,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub rank1: f64,
    pub eer: Eer,
    pub roc: Vec<RocPoint>,
    pub gar_at_far: Vec<GarAtFar>,
    pub density: DensityCurve,
    pub genuine_count: usize,
    pub impostor_count: usize,
}

impl EvalReport {
    pub fn from_outcome(outcome: &ProtocolOutcome) -> Result<Self> {
        let s = &outcome.scores;
        Ok(EvalReport {
            label: s.label.clone(),
            rank1: outcome.rank1,
            eer: compute_eer(s)?,
            roc: roc_points(s)?,
            gar_at_far: gar_at_far(s, &FAR_TARGETS)?,
            density: DensityCurve::from_scores(s, 200),
            genuine_count: s.genuine.len(),
            impostor_count: s.impostor.len(),
        })
    }

    /// Writes `summary.csv`, `roc.csv` and `density.csv` into `dir`.
    pub fn write_csv_bundle(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
        let mut header = vec![
            "matcher".to_string(),
            "rank1".into(),
            "eer".into(),
            "eer_threshold".into(),
            "genuine".into(),
            "impostor".into(),
        ];
        let mut row = vec![
            self.label.clone(),
            self.rank1.to_string(),
            self.eer.eer.to_string(),
            self.eer.threshold.to_string(),
            self.genuine_count.to_string(),
            self.impostor_count.to_string(),
        ];
        for g in &self.gar_at_far {
            header.push(format!("gar@{:e}", g.target));
            header.push(format!("gar@{:e}_lower_bound", g.target));
            row.push(g.gar.to_string());
            row.push(g.lower_bound.to_string());
        }
        w.write_record(&header)?;
        w.write_record(&row)?;
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("roc.csv"))?;
        w.write_record(["far", "gar", "threshold"])?;
        for p in &self.roc {
            w.write_record([p.far.to_string(), p.gar.to_string(), p.threshold.to_string()])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("density.csv"))?;
        w.write_record(["distance", "genuine", "impostor"])?;
        for i in 0..self.density.grid.len() {
            w.write_record([
                self.density.grid[i].to_string(),
                self.density.genuine[i].to_string(),
                self.density.impostor[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Writes `probe,claimed,distance,genuine` rows.
pub fn write_claims(path: impl AsRef<Path>, claims: &[Claim]) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    writeln!(f, "probe,probe_id,gallery_id,distance,genuine")?;
    for c in claims {
        writeln!(
            f,
            "{},{},{},{},{}",
            c.probe,
            c.probe_identity,
            c.claimed,
            c.distance,
            c.genuine()
        )?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub matcher: String,
    pub r: usize,
    pub eer: f64,
    pub rank1: f64,
}

/// Seed for image `index` at bias degree `r`.
pub fn bias_seed(seed: u64, r: usize, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((r as u64) << 32)
        .wrapping_add(index as u64)
}

/// Re-runs the protocol with every test image perturbed by `perturb(r, i, image)`,
/// where `i` indexes enrollment images first, then probes.
pub fn bias_sweep_with(
    enrollment: &[(u32, &Raster)],
    probes: &[(u32, &Raster)],
    matchers: &[&dyn Verifier],
    r_values: &[usize],
    perturb: impl Fn(usize, usize, &Raster) -> Result<Raster>,
) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::new();
    for &r in r_values {
        let shift = |offset: usize, set: &[(u32, &Raster)]| -> Result<Vec<(u32, Raster)>> {
            set.iter()
                .enumerate()
                .map(|(i, (id, img))| Ok((*id, perturb(r, offset + i, img)?)))
                .collect()
        };
        let e = shift(0, enrollment)?;
        let p = shift(enrollment.len(), probes)?;
        let e_ref: Vec<(u32, &Raster)> = e.iter().map(|(id, r)| (*id, r)).collect();
        let p_ref: Vec<(u32, &Raster)> = p.iter().map(|(id, r)| (*id, r)).collect();
        for m in matchers {
            let outcome = m.verify(&e_ref, &p_ref)?;
            out.push(SweepPoint {
                matcher: m.name(),
                r,
                eer: compute_eer(&outcome.scores)?.eer,
                rank1: outcome.rank1,
            });
        }
    }
    Ok(out)
}

/// [`bias_sweep_with`] using [`bias_transform`] with per-image seeds.
pub fn bias_sweep(
    enrollment: &[(u32, &Raster)],
    probes: &[(u32, &Raster)],
    matchers: &[&dyn Verifier],
    r_values: &[usize],
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    bias_sweep_with(enrollment, probes, matchers, r_values, |r, i, img| {
        let spec = BiasSpec {
            r,
            seed: bias_seed(seed, r, i),
        };
        Ok(bias_transform(img, &spec)?.image)
    })
}

pub fn write_sweep_csv(path: impl AsRef<Path>, points: &[SweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["matcher", "r", "eer", "rank1"])?;
    for p in points {
        w.write_record([p.matcher.clone(), p.r.to_string(), p.eer.to_string(), p.rank1.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
