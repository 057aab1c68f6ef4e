//! Independent oracles shared by the integration tests and the acceptance
//! harness. Nothing here calls the code under test.

#![allow(dead_code)]

use std::f64::consts::PI;

/// Real Gabor value written out from the defining formula.
pub fn gabor_direct(x: f64, y: f64, lambda: f64, sigma: f64, theta: f64, gamma: f64) -> f64 {
    let xr = x * theta.cos() + y * theta.sin();
    let yr = y * theta.cos() - x * theta.sin();
    let g = (-(xr.powi(2) + gamma.powi(2) * yr.powi(2)) / (2.0 * sigma.powi(2))).exp();
    g * (2.0 * PI * xr / lambda).cos()
}

/// FAR at `t` by explicit counting.
pub fn far_loop(impostor: &[f64], t: f64) -> f64 {
    let mut n = 0usize;
    for &s in impostor {
        if s < t {
            n += 1;
        }
    }
    n as f64 / impostor.len() as f64
}

/// FRR at `t` by explicit counting.
pub fn frr_loop(genuine: &[f64], t: f64) -> f64 {
    let mut n = 0usize;
    for &s in genuine {
        if s >= t {
            n += 1;
        }
    }
    n as f64 / genuine.len() as f64
}

/// Candidate thresholds built by brute force: every distinct score, every
/// midpoint between score values with nothing strictly between them, and
/// both infinities.
pub fn candidate_thresholds(genuine: &[f64], impostor: &[f64]) -> Vec<f64> {
    let all: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    let mut out = vec![f64::NEG_INFINITY, f64::INFINITY];
    for &a in &all {
        if !out.contains(&a) {
            out.push(a);
        }
        for &b in &all {
            if b > a && !all.iter().any(|&c| c > a && c < b) {
                let m = 0.5 * (a + b);
                if !out.contains(&m) {
                    out.push(m);
                }
            }
        }
    }
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out
}

/// EER by scanning every candidate threshold; linear interpolation of FAR and
/// FRR at the first sign change of FAR − FRR.
pub fn eer_brute(genuine: &[f64], impostor: &[f64]) -> f64 {
    let ts = candidate_thresholds(genuine, impostor);
    let diffs: Vec<(f64, f64)> = ts.iter().map(|&t| (far_loop(impostor, t), frr_loop(genuine, t))).collect();
    for i in 0..diffs.len() {
        let (far, frr) = diffs[i];
        if far == frr {
            return far;
        }
        if far > frr {
            let (far0, frr0) = diffs[i - 1];
            let d0 = far0 - frr0;
            let d1 = far - frr;
            let a = -d0 / (d1 - d0);
            return far0 + a * (far - far0);
        }
    }
    panic!("FAR never reached FRR");
}

/// GAR at the largest candidate threshold with FAR ≤ target.
pub fn gar_brute(genuine: &[f64], impostor: &[f64], target: f64) -> f64 {
    let ts = candidate_thresholds(genuine, impostor);
    let mut best = f64::NEG_INFINITY;
    for &t in &ts {
        if far_loop(impostor, t) <= target && t > best {
            best = t;
        }
    }
    1.0 - frr_loop(genuine, best)
}

/// Rank-1 over a full distance matrix `d[probe][gallery]`; ties resolve to
/// the earliest gallery entry.
pub fn rank1_brute(d: &[Vec<f64>], probe_ids: &[u32], gallery_ids: &[u32]) -> f64 {
    let mut hits = 0;
    for (p, row) in d.iter().enumerate() {
        let mut best = 0;
        for g in 1..row.len() {
            if row[g] < row[best] {
                best = g;
            }
        }
        if gallery_ids[best] == probe_ids[p] {
            hits += 1;
        }
    }
    hits as f64 / d.len() as f64
}

/// Plain 2D cross-correlation with zero padding, kernel centred.
pub fn correlate(image: &[f64], w: usize, h: usize, kernel: &[f64], k: usize) -> Vec<f64> {
    let c = (k / 2) as isize;
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for i in 0..k as isize {
                for j in 0..k as isize {
                    let (yy, xx) = (y + i - c, x + j - c);
                    if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                        acc += image[(yy as usize) * w + xx as usize] * kernel[(i * k as isize + j) as usize];
                    }
                }
            }
            out[(y as usize) * w + x as usize] = acc;
        }
    }
    out
}

/// Offset `(dx, dy)` within `±max` maximizing the cross-correlation of `b`
/// against `a`, i.e. `b(x, y) ≈ a(x − dx, y − dy)`.
pub fn best_shift(a: &[f64], b: &[f64], w: usize, h: usize, max: isize) -> (isize, isize) {
    let mut best = (f64::NEG_INFINITY, (0, 0));
    for dy in -max..=max {
        for dx in -max..=max {
            let mut acc = 0.0;
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let (sx, sy) = (x - dx, y - dy);
                    if sx >= 0 && sy >= 0 && sx < w as isize && sy < h as isize {
                        acc += b[(y as usize) * w + x as usize] * a[(sy as usize) * w + sx as usize];
                    }
                }
            }
            if acc > best.0 {
                best = (acc, (dx, dy));
            }
        }
    }
    best.1
}
