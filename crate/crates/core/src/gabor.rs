//! Sampled Gabor templates and curved Gabor templates.
//!
//! A template is a stack of real Gabor filters indexed by direction
//! `θ_k = kπ/K`. Grids are centred: `x, y ∈ {-(size-1)/2 ..= (size-1)/2}`,
//! with `x` running along columns and `y` along rows.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;

use cpn_tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const DEFAULT_GAMMA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaborParams {
    pub lambda: f64,
    pub sigma: f64,
    pub theta: f64,
    pub gamma: f64,
    pub size: usize,
}

impl GaborParams {
    pub fn validate(&self) -> Result<()> {
        validate_common(self.lambda, self.sigma, self.gamma, self.size)?;
        if !(0.0..PI).contains(&self.theta) {
            return Err(invalid(format!("theta {} outside [0, π)", self.theta)));
        }
        Ok(())
    }
}

fn validate_common(lambda: f64, sigma: f64, gamma: f64, size: usize) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(invalid(format!("lambda must be positive, got {lambda}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(invalid(format!("gamma must be positive, got {gamma}")));
    }
    if size < 3 || size % 2 == 0 {
        return Err(invalid(format!("kernel size must be odd and >= 3, got {size}")));
    }
    Ok(())
}

/// `θ_k = kπ/K`.
pub fn direction(k: usize, directions: usize) -> f64 {
    PI * (k as f64 / directions as f64)
}

/// Cosine and sine with the axis-aligned directions made exact.
fn cos_sin(theta: f64) -> (f64, f64) {
    if theta == 0.0 {
        (1.0, 0.0)
    } else if theta == FRAC_PI_2 {
        (0.0, 1.0)
    } else {
        (theta.cos(), theta.sin())
    }
}

/// Real Gabor filter value `exp(-(x'² + γ²y'²)/(2σ²))·cos(2πx'/λ)` with
/// `x' = x cosθ + y sinθ`, `y' = -x sinθ + y cosθ`.
pub fn eval_gabor(x: f64, y: f64, p: &GaborParams) -> f64 {
    let (c, s) = cos_sin(p.theta);
    let xr = x * c + y * s;
    let yr = -x * s + y * c;
    let envelope = (-(xr * xr + p.gamma * p.gamma * yr * yr) / (2.0 * p.sigma * p.sigma)).exp();
    envelope * (2.0 * PI * xr / p.lambda).cos()
}

fn half(size: usize) -> isize {
    (size as isize - 1) / 2
}

fn sample_straight(lambda: f64, sigma: f64, theta: f64, size: usize, gamma: f64) -> Vec<f64> {
    let p = GaborParams {
        lambda,
        sigma,
        theta,
        gamma,
        size,
    };
    let c = half(size);
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size as isize {
        for j in 0..size as isize {
            out.push(eval_gabor((j - c) as f64, (i - c) as f64, &p));
        }
    }
    out
}

/// Gabor template `[K, size, size]`; slice `k` is the filter at `θ_k`.
pub fn build_template(
    lambda: f64,
    sigma: f64,
    directions: usize,
    size: usize,
    gamma: f64,
) -> Result<Tensor<f64>> {
    validate_common(lambda, sigma, gamma, size)?;
    if directions == 0 {
        return Err(invalid("need at least one direction"));
    }
    let mut data = Vec::with_capacity(directions * size * size);
    for k in 0..directions {
        data.extend(sample_straight(lambda, sigma, direction(k, directions), size, gamma));
    }
    Ok(Tensor::new(vec![directions, size, size], data)?)
}

/// Which way the ridge of a curved filter bows at `θ = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bend {
    /// Ridge ends bow toward `+x`.
    #[default]
    Positive,
    Negative,
}

impl Bend {
    fn sign(self) -> isize {
        match self {
            Bend::Positive => 1,
            Bend::Negative => -1,
        }
    }
}

/// Horizontal pixel shift for a row at signed offset `dy` from the centre:
/// the sagitta `R - sqrt(R² - dy²)` of a circle of radius `R = size/3`,
/// rounded to the nearest pixel and held at `R` beyond the circle.
pub fn curve_shift(dy: isize, size: usize) -> isize {
    let r = size as f64 / 3.0;
    let d2 = ((dy * dy) as f64).min(r * r);
    (r - (r * r - d2).sqrt()).round() as isize
}

/// The `θ = 0` curved slice: each row of the straight filter moved along
/// `x` by [`curve_shift`], so the vertical ridge follows a circular arc.
/// Vacated pixels are zero.
fn curved_base(lambda: f64, sigma: f64, size: usize, gamma: f64, bend: Bend) -> Vec<f64> {
    let straight = sample_straight(lambda, sigma, 0.0, size, gamma);
    let c = half(size);
    let mut out = vec![0.0; size * size];
    for i in 0..size {
        let d = bend.sign() * curve_shift(i as isize - c, size);
        for j in 0..size as isize {
            let src = j - d;
            if (0..size as isize).contains(&src) {
                out[i * size + j as usize] = straight[i * size + src as usize];
            }
        }
    }
    out
}

/// Bilinear rotation of a centred square slice by `theta`, zero outside.
fn rotate_slice(base: &[f64], size: usize, theta: f64) -> Vec<f64> {
    let (c, s) = cos_sin(theta);
    let h = half(size) as f64;
    let at = |col: isize, row: isize| -> f64 {
        if (0..size as isize).contains(&col) && (0..size as isize).contains(&row) {
            base[row as usize * size + col as usize]
        } else {
            0.0
        }
    };
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (x, y) = (j as f64 - h, i as f64 - h);
            let u = x * c + y * s + h;
            let v = -x * s + y * c + h;
            let (u0, v0) = (u.floor(), v.floor());
            let (fu, fv) = (u - u0, v - v0);
            let (ui, vi) = (u0 as isize, v0 as isize);
            let top = at(ui, vi) * (1.0 - fu) + at(ui + 1, vi) * fu;
            let bottom = at(ui, vi + 1) * (1.0 - fu) + at(ui + 1, vi + 1) * fu;
            out.push(top * (1.0 - fv) + bottom * fv);
        }
    }
    out
}

/// Curved Gabor template `[K, size, size]`: the curved `θ = 0` slice rotated
/// to each `θ_k` (slice 0 is the unrotated base).
pub fn build_curved_template(
    lambda: f64,
    sigma: f64,
    directions: usize,
    size: usize,
    gamma: f64,
    bend: Bend,
) -> Result<Tensor<f64>> {
    validate_common(lambda, sigma, gamma, size)?;
    if directions == 0 {
        return Err(invalid("need at least one direction"));
    }
    let base = curved_base(lambda, sigma, size, gamma, bend);
    let mut data = Vec::with_capacity(directions * size * size);
    data.extend_from_slice(&base);
    for k in 1..directions {
        data.extend(rotate_slice(&base, size, direction(k, directions)));
    }
    Ok(Tensor::new(vec![directions, size, size], data)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    pub lambdas: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub directions: usize,
    pub size: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub include_curved: bool,
    #[serde(default)]
    pub bend: Bend,
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

impl BankConfig {
    /// Λ = {5, 10, 15}, Σ = {1, 3, 5}, 12 directions, 35-pixel kernels.
    pub fn paper() -> Self {
        BankConfig {
            lambdas: vec![5.0, 10.0, 15.0],
            sigmas: vec![1.0, 3.0, 5.0],
            directions: 12,
            size: 35,
            gamma: DEFAULT_GAMMA,
            include_curved: true,
            bend: Bend::Positive,
        }
    }

    /// One wavelength, one sigma, four directions, 11-pixel kernels.
    pub fn tiny() -> Self {
        BankConfig {
            lambdas: vec![6.0],
            sigmas: vec![2.0],
            directions: 4,
            size: 11,
            gamma: DEFAULT_GAMMA,
            include_curved: true,
            bend: Bend::Positive,
        }
    }

    fn kinds(&self) -> usize {
        if self.include_curved {
            2
        } else {
            1
        }
    }

    /// Number of direction groups, `(1 or 2)·|Λ|·|Σ|`.
    pub fn groups(&self) -> usize {
        self.kinds() * self.lambdas.len() * self.sigmas.len()
    }

    pub fn kernel_count(&self) -> usize {
        self.groups() * self.directions
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(invalid("wavelength set is empty"));
        }
        if self.sigmas.is_empty() {
            return Err(invalid("sigma set is empty"));
        }
        if self.directions == 0 {
            return Err(invalid("need at least one direction"));
        }
        for &l in &self.lambdas {
            for &s in &self.sigmas {
                validate_common(l, s, self.gamma, self.size)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Straight,
    Curved,
}

impl KernelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            KernelKind::Straight => "straight",
            KernelKind::Curved => "curved",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelInfo {
    pub kind: KernelKind,
    pub lambda: f64,
    pub sigma: f64,
    pub theta: f64,
    pub direction: usize,
}

/// The frozen first-layer filters.
///
/// Kernel `((kind·|Λ| + li)·|Σ| + si)·K + k` holds direction `k` of the
/// template for `(Λ[li], Σ[si])`, straight kinds before curved ones, so
/// consecutive runs of `K` kernels form one direction group.
#[derive(Clone, Debug, PartialEq)]
pub struct GaborBank {
    config: BankConfig,
    kernels: Tensor<f64>,
    info: Vec<KernelInfo>,
}

impl GaborBank {
    pub fn build(config: &BankConfig) -> Result<Self> {
        config.validate()?;
        let (k, size) = (config.directions, config.size);
        let mut data = Vec::with_capacity(config.kernel_count() * size * size);
        let mut info = Vec::with_capacity(config.kernel_count());
        let kinds: &[KernelKind] = if config.include_curved {
            &[KernelKind::Straight, KernelKind::Curved]
        } else {
            &[KernelKind::Straight]
        };
        for &kind in kinds {
            for &lambda in &config.lambdas {
                for &sigma in &config.sigmas {
                    let t = match kind {
                        KernelKind::Straight => build_template(lambda, sigma, k, size, config.gamma)?,
                        KernelKind::Curved => build_curved_template(
                            lambda,
                            sigma,
                            k,
                            size,
                            config.gamma,
                            config.bend,
                        )?,
                    };
                    data.extend_from_slice(t.data());
                    info.extend((0..k).map(|d| KernelInfo {
                        kind,
                        lambda,
                        sigma,
                        theta: direction(d, k),
                        direction: d,
                    }));
                }
            }
        }
        let kernels = Tensor::new(vec![info.len(), size, size], data)?;
        Ok(GaborBank {
            config: config.clone(),
            kernels,
            info,
        })
    }

    pub fn config(&self) -> &BankConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.info.len()
    }

    pub fn is_empty(&self) -> bool {
        self.info.is_empty()
    }

    pub fn groups(&self) -> usize {
        self.config.groups()
    }

    pub fn directions(&self) -> usize {
        self.config.directions
    }

    pub fn size(&self) -> usize {
        self.config.size
    }

    /// `[len, size, size]`.
    pub fn kernels(&self) -> &Tensor<f64> {
        &self.kernels
    }

    pub fn info(&self) -> &[KernelInfo] {
        &self.info
    }

    /// `[len, 1, size, size]`, the layout of a single-channel conv weight.
    pub fn conv_weight<T: Element>(&self) -> Tensor<T> {
        let s = self.size();
        Tensor::from_fn(vec![self.len(), 1, s, s], |i| T::from_f64(self.kernels.data()[i]))
    }

    /// `[groups, K, size, size]`.
    pub fn grouped(&self) -> Tensor<f64> {
        let s = self.size();
        self.kernels
            .clone()
            .reshape(vec![self.groups(), self.directions(), s, s])
            .expect("bank length is groups × directions")
    }

    /// One line per kernel: `index type lambda sigma theta`.
    pub fn listing(&self) -> String {
        let mut out = String::from("index\ttype\tlambda\tsigma\ttheta\n");
        for (i, k) in self.info.iter().enumerate() {
            let _ = writeln!(
                out,
                "{i}\t{}\t{}\t{}\t{:.6}",
                k.kind.as_str(),
                k.lambda,
                k.sigma,
                k.theta
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slice(t: &Tensor<f64>, k: usize) -> &[f64] {
        let s = t.shape()[1];
        &t.data()[k * s * s..(k + 1) * s * s]
    }

    #[test]
    fn origin_is_one() {
        for &(l, s, th) in &[(5.0, 1.0, 0.0), (10.0, 3.0, 1.0), (15.0, 5.0, 2.5)] {
            let p = GaborParams {
                lambda: l,
                sigma: s,
                theta: th,
                gamma: 0.5,
                size: 35,
            };
            assert_eq!(eval_gabor(0.0, 0.0, &p), 1.0);
        }
    }

    #[test]
    fn half_wavelength_value() {
        let p = GaborParams {
            lambda: 10.0,
            sigma: 3.0,
            theta: 0.0,
            gamma: 0.5,
            size: 35,
        };
        let v = eval_gabor(5.0, 0.0, &p);
        assert!((v - -(-25.0f64 / 18.0).exp()).abs() < 1e-15);
        assert!((v - -0.24935).abs() < 5e-6);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(build_template(10.0, 3.0, 4, 10, 0.5).is_err());
        assert!(build_template(0.0, 3.0, 4, 11, 0.5).is_err());
        assert!(build_template(10.0, -1.0, 4, 11, 0.5).is_err());
        let p = GaborParams {
            lambda: 1.0,
            sigma: 1.0,
            theta: PI,
            gamma: 0.5,
            size: 3,
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn single_direction_is_centrally_symmetric() {
        let s = 35;
        let t = build_template(10.0, 3.0, 1, s, 0.5).unwrap();
        let d = t.data();
        for i in 0..s {
            for j in 0..s {
                assert_eq!(d[i * s + j], d[(s - 1 - i) * s + (s - 1 - j)]);
            }
        }
    }

    #[test]
    fn quarter_turn_is_transpose_with_flip() {
        let s = 35;
        let c = s - 1;
        let t = build_template(10.0, 3.0, 12, s, 0.5).unwrap();
        let (z, q) = (slice(&t, 0), slice(&t, 6));
        for i in 0..s {
            for j in 0..s {
                assert_eq!(q[i * s + j], z[(c - j) * s + i]);
            }
        }
    }

    #[test]
    fn curved_base_keeps_centre_row_and_differs() {
        let s = 35;
        let st = build_template(10.0, 3.0, 1, s, 0.5).unwrap();
        let cv = build_curved_template(10.0, 3.0, 1, s, 0.5, Bend::Positive).unwrap();
        let mid = s / 2;
        assert_eq!(&st.data()[mid * s..(mid + 1) * s], &cv.data()[mid * s..(mid + 1) * s]);
        let sad: f64 = st.data().iter().zip(cv.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(sad > 0.0);
    }

    #[test]
    fn shift_profile_is_a_sagitta() {
        assert_eq!(curve_shift(0, 35), 0);
        assert_eq!(curve_shift(5, 35), curve_shift(-5, 35));
        let r = 35.0 / 3.0;
        assert_eq!(curve_shift(8, 35), (r - (r * r - 64.0f64).sqrt()).round() as isize);
        assert_eq!(curve_shift(17, 35), r.round() as isize);
        for d in 0..17 {
            assert!(curve_shift(d + 1, 35) >= curve_shift(d, 35));
        }
    }

    #[test]
    fn bend_sign_mirrors_the_base() {
        let s = 15;
        let p = build_curved_template(6.0, 2.0, 1, s, 0.5, Bend::Positive).unwrap();
        let n = build_curved_template(6.0, 2.0, 1, s, 0.5, Bend::Negative).unwrap();
        for i in 0..s {
            for j in 0..s {
                assert_eq!(p.data()[i * s + j], n.data()[i * s + (s - 1 - j)]);
            }
        }
    }

    #[test]
    fn bank_ordering_and_grouping() {
        let cfg = BankConfig {
            lambdas: vec![5.0, 10.0],
            sigmas: vec![1.0, 3.0, 5.0],
            directions: 3,
            size: 9,
            gamma: 0.5,
            include_curved: true,
            bend: Bend::Positive,
        };
        let bank = GaborBank::build(&cfg).unwrap();
        assert_eq!(bank.len(), 2 * 2 * 3 * 3);
        let idx = |kind: usize, li: usize, si: usize, k: usize| ((kind * 2 + li) * 3 + si) * 3 + k;
        let i = idx(1, 1, 2, 1);
        assert_eq!(bank.info()[i].kind, KernelKind::Curved);
        assert_eq!(bank.info()[i].lambda, 10.0);
        assert_eq!(bank.info()[i].sigma, 5.0);
        assert_eq!(bank.info()[i].direction, 1);
        let g = bank.grouped();
        assert_eq!(g.shape(), &[12, 3, 9, 9]);
        assert_eq!(g.data(), bank.kernels().data());
        assert_eq!(bank.listing().lines().count(), bank.len() + 1);
    }

    #[test]
    fn empty_sets_rejected() {
        let mut cfg = BankConfig::tiny();
        cfg.lambdas.clear();
        assert!(GaborBank::build(&cfg).is_err());
        let mut cfg = BankConfig::tiny();
        cfg.sigmas.clear();
        assert!(GaborBank::build(&cfg).is_err());
    }
}
