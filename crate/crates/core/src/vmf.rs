//! von Mises-Fisher distribution on the unit sphere `S^(d-1)`.
//!
//! Density `p(x) = Z[kappa] exp(kappa * mu . x)` with
//! `Z[kappa] = kappa^(d/2-1) / ((2 pi)^(d/2) I_(d/2-1)(kappa))`.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Upper clamp for concentrations; the moment estimator diverges as `R -> 1`.
pub const KAPPA_MAX: f64 = 1e4;

/// Tolerance on `||x|| = 1` for density arguments.
pub const UNIT_TOL: f64 = 1e-6;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Normalizes in place; returns the original norm. Zero vectors are left alone.
pub fn normalize(a: &mut [f64]) -> f64 {
    let n = norm(a);
    if n > 0.0 {
        a.iter_mut().for_each(|x| *x /= n);
    }
    n
}

pub fn normalized(a: &[f64]) -> Vec<f64> {
    let mut v = a.to_vec();
    normalize(&mut v);
    v
}

/// Argument above which `ln I_v(x)` switches from the power series to the
/// large-argument (Hankel) expansion. `x >= 2 v^2` keeps the asymptotic
/// terms shrinking from the first one on.
pub fn bessel_switch_point(v: f64) -> f64 {
    (2.0 * v * v).max(30.0)
}

/// `ln sum_k exp(t_k)` for the series `t_k = t_0 + sum_{j<k} step(j)`,
/// stopping once terms are past their peak and negligible.
fn log_series(t0: f64, step: impl Fn(usize) -> f64) -> f64 {
    if t0 == f64::NEG_INFINITY {
        return t0;
    }
    let mut terms = vec![t0];
    let mut t = t0;
    let mut peak = t0;
    for k in 0..100_000 {
        let s = step(k);
        if s == f64::NEG_INFINITY {
            break;
        }
        t += s;
        terms.push(t);
        peak = peak.max(t);
        if s < 0.0 && t < peak - 45.0 {
            break;
        }
    }
    let total: f64 = terms.iter().map(|&x| (x - peak).exp()).sum();
    peak + total.ln()
}

/// `ln (I_v(x) / x^v)` by the ascending series; exact at `x = 0`.
fn log_bessel_i_over_pow_series(v: f64, x: f64) -> f64 {
    let ln_half = -std::f64::consts::LN_2;
    let t0 = v * ln_half - ln_gamma(v + 1.0);
    if x == 0.0 {
        return t0;
    }
    let two_ln = 2.0 * (x.ln() + ln_half);
    log_series(t0, |k| {
        let k = k as f64;
        two_ln - (k + 1.0).ln() - (k + v + 1.0).ln()
    })
}

/// `ln I_v(x)` by the Hankel expansion `e^x / sqrt(2 pi x) * sum (-1)^k a_k(v) / x^k`.
fn log_bessel_i_asymptotic(v: f64, x: f64) -> f64 {
    let mu = 4.0 * v * v;
    let mut sum = 1.0;
    let mut term = 1.0;
    let mut prev = f64::INFINITY;
    for k in 1..200 {
        let kf = k as f64;
        let odd = 2.0 * kf - 1.0;
        term *= -(mu - odd * odd) / (kf * 8.0 * x);
        if term.abs() > prev {
            break;
        }
        sum += term;
        prev = term.abs();
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    x - 0.5 * (2.0 * std::f64::consts::PI * x).ln() + sum.ln()
}

/// Natural log of the modified Bessel function of the first kind, `I_v(x)`.
pub fn log_bessel_i(v: f64, x: f64) -> f64 {
    assert!(v >= 0.0 && x >= 0.0, "log_bessel_i needs v >= 0, x >= 0");
    if x == 0.0 {
        return if v == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if x <= bessel_switch_point(v) {
        log_bessel_i_over_pow_series(v, x) + v * x.ln()
    } else {
        log_bessel_i_asymptotic(v, x)
    }
}

/// `ln Z[kappa]` for dimension `dim`; the `kappa -> 0` limit is the uniform
/// density `1 / |S^(d-1)|`.
pub fn log_norm_const(kappa: f64, dim: usize) -> f64 {
    assert!(kappa >= 0.0 && dim >= 2, "log_norm_const needs kappa >= 0, dim >= 2");
    let d = dim as f64;
    let v = d / 2.0 - 1.0;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    if kappa <= bessel_switch_point(v) {
        -(d / 2.0) * ln_2pi - log_bessel_i_over_pow_series(v, kappa)
    } else {
        v * kappa.ln() - (d / 2.0) * ln_2pi - log_bessel_i_asymptotic(v, kappa)
    }
}

/// Mean direction, concentration and dimension of a vMF distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct VmfParams {
    mean: Vec<f64>,
    kappa: f64,
}

impl VmfParams {
    pub fn new(mean: Vec<f64>, kappa: f64) -> Result<Self> {
        if mean.len() < 2 {
            return Err(Error::InvalidInput("vMF dimension must be >= 2".into()));
        }
        if (norm(&mean) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "vMF mean must be unit length (got norm {})",
                norm(&mean)
            )));
        }
        if !(0.0..=KAPPA_MAX).contains(&kappa) {
            return Err(Error::InvalidInput(format!(
                "kappa must lie in [0, {KAPPA_MAX}], got {kappa}"
            )));
        }
        Ok(Self { mean, kappa })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `ln Z[kappa] + kappa * x . mu`; rejects non-unit `x`.
pub fn vmf_log_density(x: &[f64], p: &VmfParams) -> Result<f64> {
    if x.len() != p.dim() {
        return Err(Error::InvalidInput(format!(
            "dimension mismatch: x has {} entries, mean has {}",
            x.len(),
            p.dim()
        )));
    }
    let n = norm(x);
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::InvalidInput(format!("x must be unit length (norm {n})")));
    }
    Ok(log_norm_const(p.kappa, p.dim()) + p.kappa * dot(x, &p.mean))
}

/// Outcome of [`estimate_kappa`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KappaEstimate {
    pub kappa: f64,
    pub mean_resultant: f64,
    /// The samples were (numerically) identical and the estimate hit `KAPPA_MAX`.
    pub saturated: bool,
}

/// Moment approximation `kappa = R (d - R^2) / (1 - R^2)` with `R = ||mean||`,
/// clamped to `[0, KAPPA_MAX]`.
pub fn estimate_kappa<S: AsRef<[f64]>>(samples: &[S]) -> Result<KappaEstimate> {
    if samples.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "kappa estimation needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let dim = samples[0].as_ref().len();
    if dim < 2 {
        return Err(Error::InvalidInput("vMF dimension must be >= 2".into()));
    }
    let mut mean = vec![0.0; dim];
    for s in samples {
        let s = s.as_ref();
        if s.len() != dim {
            return Err(Error::InvalidInput("samples have inconsistent dimensions".into()));
        }
        mean.iter_mut().zip(s).for_each(|(m, x)| *m += x);
    }
    let n = samples.len() as f64;
    let r = (norm(&mean) / n).min(1.0);
    Ok(kappa_from_resultant(r, dim))
}

/// The moment approximation for a known mean resultant length.
pub fn kappa_from_resultant(r: f64, dim: usize) -> KappaEstimate {
    let d = dim as f64;
    let denom = 1.0 - r * r;
    if denom <= 1e-12 {
        return KappaEstimate {
            kappa: KAPPA_MAX,
            mean_resultant: r,
            saturated: true,
        };
    }
    let kappa = (r * (d - r * r) / denom).clamp(0.0, KAPPA_MAX);
    KappaEstimate {
        kappa,
        mean_resultant: r,
        saturated: kappa >= KAPPA_MAX,
    }
}

/// Uniform direction on `S^(d-1)`.
pub fn sample_uniform_sphere<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if normalize(&mut v) > 1e-12 {
            return v;
        }
    }
}

/// Wood's rejection sampler, with constants precomputed for repeated draws.
#[derive(Clone, Debug)]
pub struct VmfSampler {
    params: VmfParams,
    b: f64,
    x0: f64,
    c: f64,
    beta: Beta<f64>,
}

impl VmfSampler {
    pub fn new(params: VmfParams) -> Self {
        let m = (params.dim() - 1) as f64;
        let kappa = params.kappa;
        // b = (-2k + sqrt(4k^2 + m^2)) / m, written without cancellation.
        let b = m / (2.0 * kappa + (4.0 * kappa * kappa + m * m).sqrt());
        let x0 = (1.0 - b) / (1.0 + b);
        let c = kappa * x0 + m * (1.0 - x0 * x0).ln();
        let beta = Beta::new(m / 2.0, m / 2.0).expect("valid beta shape");
        Self {
            params,
            b,
            x0,
            c,
            beta,
        }
    }

    pub fn params(&self) -> &VmfParams {
        &self.params
    }

    /// Cosine `w = x . mu` drawn from its marginal.
    fn sample_w<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let m = (self.params.dim() - 1) as f64;
        let kappa = self.params.kappa;
        loop {
            let z: f64 = self.beta.sample(rng);
            let w = (1.0 - (1.0 + self.b) * z) / (1.0 - (1.0 - self.b) * z);
            let u: f64 = rng.random();
            let lhs = kappa * w + m * (1.0 - self.x0 * w).ln() - self.c;
            if lhs >= u.ln() {
                return w.clamp(-1.0, 1.0);
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.params.dim()];
        self.sample_into(rng, &mut out);
        out
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let mu = &self.params.mean;
        let w = self.sample_w(rng);
        // Uniform tangent direction orthogonal to mu.
        let tangent = loop {
            let mut v: Vec<f64> = (0..mu.len()).map(|_| StandardNormal.sample(rng)).collect();
            let proj = dot(&v, mu);
            v.iter_mut().zip(mu).for_each(|(x, m)| *x -= proj * m);
            if normalize(&mut v) > 1e-12 {
                break v;
            }
        };
        let s = (1.0 - w * w).max(0.0).sqrt();
        for ((o, m), t) in out.iter_mut().zip(mu).zip(&tangent) {
            *o = w * m + s * t;
        }
        normalize(out);
    }
}

/// One draw from `vMF(p)`.
pub fn sample_vmf<R: Rng + ?Sized>(p: &VmfParams, rng: &mut R) -> Vec<f64> {
    VmfSampler::new(p.clone()).sample(rng)
}
