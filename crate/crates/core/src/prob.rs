//! Probability primitives: Gaussian and truncated-Gaussian log-densities,
//! diagonal mixtures with analytic gradients, samplers and discrete KL.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, Error, Result};

/// Density added to every mixture or flow density before taking the log.
pub const DENSITY_FLOOR: f64 = 1e-27;
/// `ln(DENSITY_FLOOR)`.
pub const LN_DENSITY_FLOOR: f64 = -62.169_797_510_839_23;
/// `ln(sqrt(2 pi))`.
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(dim_err(format!("mean has {} entries, std has {}", mean.len(), std.len())));
        }
        if let Some(s) = std.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter(format!("std must be positive, got {s}")));
        }
        Ok(Self { mean, std })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncatedGaussianParams {
    pub mean: f64,
    pub std: f64,
    pub lower: f64,
    pub upper: f64,
}

impl TruncatedGaussianParams {
    pub fn new(mean: f64, std: f64, lower: f64, upper: f64) -> Result<Self> {
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::InvalidParameter(format!("std must be positive, got {std}")));
        }
        if !(lower < upper) {
            return Err(Error::InvalidParameter(format!(
                "degenerate truncation interval [{lower}, {upper}]"
            )));
        }
        Ok(Self { mean, std, lower, upper })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDist {
    probs: Vec<f64>,
}

impl DiscreteDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidParameter("empty probability vector".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidParameter(format!("negative or non-finite probability {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    /// Normalize nonnegative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidParameter("weights have no positive mass".into()));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Self { probs: vec![1.0 / n as f64; n] }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.probs, rng)
    }
}

/// One mixture-component marginal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Marginal {
    Normal { mean: f64, std: f64 },
    Truncated(TruncatedGaussianParams),
}

/// A product of independent marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct Component(pub Vec<Marginal>);

impl From<GaussianParams> for Component {
    fn from(p: GaussianParams) -> Self {
        Component(
            p.mean
                .iter()
                .zip(&p.std)
                .map(|(&mean, &std)| Marginal::Normal { mean, std })
                .collect(),
        )
    }
}

impl From<TruncatedGaussianParams> for Component {
    fn from(p: TruncatedGaussianParams) -> Self {
        Component(vec![Marginal::Truncated(p)])
    }
}

impl From<Vec<TruncatedGaussianParams>> for Component {
    fn from(ps: Vec<TruncatedGaussianParams>) -> Self {
        Component(ps.into_iter().map(Marginal::Truncated).collect())
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `ln(exp(l) + DENSITY_FLOOR)`.
pub fn floored_log(l: f64) -> f64 {
    log_add_exp(l, LN_DENSITY_FLOOR)
}

/// Derivative of [`floored_log`] with respect to `l`.
pub fn floored_log_slope(l: f64) -> f64 {
    if l == f64::NEG_INFINITY {
        return 0.0;
    }
    1.0 / (1.0 + (LN_DENSITY_FLOOR - l).exp())
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

fn std_normal_log_pdf(x: f64) -> f64 {
    -LN_SQRT_2PI - 0.5 * x * x
}

/// `ln P(Z > x)` for a standard normal `Z`.
pub fn std_normal_log_sf(x: f64) -> f64 {
    if x < 5.0 {
        return (0.5 * libm::erfc(x / SQRT_2)).ln();
    }
    // Continued fraction for the Mills ratio, evaluated bottom-up.
    let mut f = x;
    for k in (1..=60).rev() {
        f = x + k as f64 / f;
    }
    std_normal_log_pdf(x) - f.ln()
}

/// `ln(Phi(b) - Phi(a))` for standardized bounds `a < b`.
pub fn std_normal_log_mass(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        let la = std_normal_log_sf(a);
        let lb = std_normal_log_sf(b);
        la + (-(lb - la).exp()).ln_1p()
    } else if b <= 0.0 {
        std_normal_log_mass(-b, -a)
    } else {
        let upper = if b == f64::INFINITY { 0.0 } else { 0.5 * libm::erfc(b / SQRT_2) };
        let lower = if a == f64::NEG_INFINITY { 0.0 } else { 0.5 * libm::erfc(-a / SQRT_2) };
        (1.0 - upper - lower).ln()
    }
}

/// Inverse standard normal CDF, rational approximation refined by one Halley step.
pub fn std_normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    const P_LOW: f64 = 0.02425;
    let tail = |q: f64| {
        let r = (-2.0 * q.ln()).sqrt();
        (((((C[0] * r + C[1]) * r + C[2]) * r + C[3]) * r + C[4]) * r + C[5])
            / ((((D[0] * r + D[1]) * r + D[2]) * r + D[3]) * r + 1.0)
    };
    let mut x = if p < P_LOW {
        tail(p)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail(1.0 - p)
    };
    let e = std_normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    if u.is_finite() {
        x -= u / (1.0 + 0.5 * x * u);
    }
    x
}

pub fn gaussian_logpdf(x: &[f64], p: &GaussianParams) -> Result<f64> {
    if x.len() != p.mean.len() {
        return Err(dim_err(format!("x has {} entries, mean has {}", x.len(), p.mean.len())));
    }
    Ok(x.iter()
        .zip(&p.mean)
        .zip(&p.std)
        .map(|((&xi, &mi), &si)| normal_logpdf(xi, mi, si))
        .sum())
}

pub fn normal_logpdf(x: f64, mean: f64, std: f64) -> f64 {
    let u = (x - mean) / std;
    -LN_SQRT_2PI - std.ln() - 0.5 * u * u
}

/// Truncated normal log-density, `-inf` outside the support.
pub fn truncnorm_logpdf_raw(x: f64, p: &TruncatedGaussianParams) -> f64 {
    if x < p.lower || x > p.upper {
        return f64::NEG_INFINITY;
    }
    let a = (p.lower - p.mean) / p.std;
    let b = (p.upper - p.mean) / p.std;
    normal_logpdf(x, p.mean, p.std) - std_normal_log_mass(a, b)
}

/// Truncated normal log-density; points outside the support get the floor.
pub fn truncnorm_logpdf(x: f64, p: &TruncatedGaussianParams) -> Result<f64> {
    if !(p.lower < p.upper) {
        return Err(Error::InvalidParameter(format!(
            "degenerate truncation interval [{}, {}]",
            p.lower, p.upper
        )));
    }
    if !(p.std > 0.0) {
        return Err(Error::InvalidParameter(format!("std must be positive, got {}", p.std)));
    }
    let l = truncnorm_logpdf_raw(x, p);
    Ok(if l == f64::NEG_INFINITY { LN_DENSITY_FLOOR } else { l })
}

/// Log-density of one marginal together with its partials in mean and std.
fn marginal_terms(x: f64, mean: f64, std: f64, bounds: Option<(f64, f64)>) -> (f64, f64, f64) {
    let u = (x - mean) / std;
    let mut l = -LN_SQRT_2PI - std.ln() - 0.5 * u * u;
    let mut d_mean = u / std;
    let mut d_std = (u * u - 1.0) / std;
    if let Some((lo, hi)) = bounds {
        if x < lo || x > hi {
            return (f64::NEG_INFINITY, 0.0, 0.0);
        }
        let a = (lo - mean) / std;
        let b = (hi - mean) / std;
        let ln_z = std_normal_log_mass(a, b);
        let ratio = |t: f64| {
            if t.is_finite() {
                (std_normal_log_pdf(t) - ln_z).exp()
            } else {
                0.0
            }
        };
        let (ra, rb) = (ratio(a), ratio(b));
        let ara = if a.is_finite() { a * ra } else { 0.0 };
        let brb = if b.is_finite() { b * rb } else { 0.0 };
        l -= ln_z;
        d_mean -= (ra - rb) / std;
        d_std -= (ara - brb) / std;
    }
    (l, d_mean, d_std)
}

/// Mutable views receiving mixture gradients: weights `[K]`, means and stds `[K*D]`.
pub struct MixtureGrad<'a> {
    pub weights: &'a mut [f64],
    pub means: &'a mut [f64],
    pub stds: &'a mut [f64],
}

/// Floored log-density of a diagonal mixture stored as flat arrays.
///
/// `means` and `stds` are component-major (`[k * dim + j]`). `bounds[j]`
/// truncates dimension `j`. When `grad` is given, partial derivatives of the
/// returned value are accumulated into it.
pub fn diag_mixture_logpdf(
    x: &[f64],
    weights: &[f64],
    means: &[f64],
    stds: &[f64],
    bounds: &[Option<(f64, f64)>],
    grad: Option<MixtureGrad<'_>>,
) -> f64 {
    let k = weights.len();
    let dim = x.len();
    debug_assert_eq!(means.len(), k * dim);
    debug_assert_eq!(bounds.len(), dim);
    let mut comp_l = vec![0.0; k];
    let mut partials = if grad.is_some() { vec![(0.0, 0.0); k * dim] } else { Vec::new() };
    for c in 0..k {
        let mut l = 0.0;
        for j in 0..dim {
            let (lj, dm, ds) = marginal_terms(x[j], means[c * dim + j], stds[c * dim + j], bounds[j]);
            l += lj;
            if !partials.is_empty() {
                partials[c * dim + j] = (dm, ds);
            }
            if l == f64::NEG_INFINITY {
                break;
            }
        }
        comp_l[c] = l;
    }
    let mut terms: Vec<f64> = comp_l
        .iter()
        .zip(weights)
        .map(|(&l, &w)| if w > 0.0 { w.ln() + l } else { f64::NEG_INFINITY })
        .collect();
    terms.push(LN_DENSITY_FLOOR);
    let value = log_sum_exp(&terms);
    if let Some(g) = grad {
        for c in 0..k {
            if comp_l[c] == f64::NEG_INFINITY {
                continue;
            }
            g.weights[c] += (comp_l[c] - value).exp();
            let r = (terms[c] - value).exp();
            if r == 0.0 {
                continue;
            }
            for j in 0..dim {
                let (dm, ds) = partials[c * dim + j];
                g.means[c * dim + j] += r * dm;
                g.stds[c * dim + j] += r * ds;
            }
        }
    }
    value
}

fn component_logpdf_raw(x: &[f64], c: &Component) -> f64 {
    x.iter()
        .zip(&c.0)
        .map(|(&xi, m)| match m {
            Marginal::Normal { mean, std } => normal_logpdf(xi, *mean, *std),
            Marginal::Truncated(t) => truncnorm_logpdf_raw(xi, t),
        })
        .sum()
}

fn check_mixture(weights: &[f64], components: &[Component]) -> Result<usize> {
    if components.is_empty() {
        return Err(Error::InvalidParameter("empty mixture".into()));
    }
    if weights.len() != components.len() {
        return Err(dim_err(format!(
            "{} weights for {} components",
            weights.len(),
            components.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::InvalidParameter(format!("mixture weights sum to {total}")));
    }
    let dim = components[0].0.len();
    if components.iter().any(|c| c.0.len() != dim) {
        return Err(dim_err("mixture components differ in dimension"));
    }
    Ok(dim)
}

/// `ln(sum_i w_i p_i(x) + 1e-27)`.
pub fn gmm_logpdf(x: &[f64], weights: &[f64], components: &[Component]) -> Result<f64> {
    let dim = check_mixture(weights, components)?;
    if x.len() != dim {
        return Err(dim_err(format!("x has {} entries, mixture has dimension {dim}", x.len())));
    }
    let mut terms: Vec<f64> = weights
        .iter()
        .zip(components)
        .map(|(&w, c)| if w > 0.0 { w.ln() + component_logpdf_raw(x, c) } else { f64::NEG_INFINITY })
        .collect();
    terms.push(LN_DENSITY_FLOOR);
    Ok(log_sum_exp(&terms))
}

pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Draw from a truncated normal by inverting its CDF.
pub fn truncnorm_sample<R: Rng + ?Sized>(p: &TruncatedGaussianParams, rng: &mut R) -> f64 {
    let a = (p.lower - p.mean) / p.std;
    let b = (p.upper - p.mean) / p.std;
    let u: f64 = rng.random();
    let z = truncated_std_normal_inverse(a, b, u);
    (p.mean + p.std * z).clamp(p.lower, p.upper)
}

fn truncated_std_normal_inverse(a: f64, b: f64, u: f64) -> f64 {
    if a > 0.0 {
        return -truncated_std_normal_inverse(-b, -a, 1.0 - u);
    }
    // a <= 0 here, so the lower CDF value is not in the far upper tail.
    let ln_mass = std_normal_log_mass(a, b);
    if ln_mass < -700.0 {
        // Interval deep in the lower tail: exponential approximation near b.
        let rate = -b;
        let width = b - a;
        let e = -((1.0 - u * (1.0 - (-rate * width).exp())).ln()) / rate;
        return b - e.min(width);
    }
    let fa = std_normal_cdf(a);
    let fb = std_normal_cdf(b);
    let target = fa + u * (fb - fa);
    let z = std_normal_quantile(target);
    if z.is_finite() && z >= a && z <= b {
        return z;
    }
    // Bisection on the CDF when the closed-form inverse is unreliable.
    let (mut lo, mut hi) = (a.max(-40.0), b.min(40.0));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if std_normal_cdf(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn marginal_sample<R: Rng + ?Sized>(m: &Marginal, rng: &mut R) -> f64 {
    match m {
        Marginal::Normal { mean, std } => {
            let e: f64 = rng.sample(StandardNormal);
            mean + std * e
        }
        Marginal::Truncated(t) => truncnorm_sample(t, rng),
    }
}

pub fn gmm_sample<R: Rng + ?Sized>(
    weights: &[f64],
    components: &[Component],
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_mixture(weights, components)?;
    let c = sample_categorical(weights, rng);
    Ok(components[c].0.iter().map(|m| marginal_sample(m, rng)).collect())
}

/// `sum_i p_i ln(p_i / q_i)` with `0 ln 0 = 0`.
pub fn kl_discrete(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    if p.len() != q.len() {
        return Err(dim_err(format!("supports of size {} and {}", p.len(), q.len())));
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.probs.iter().zip(&q.probs).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::InvalidParameter(format!(
                "q has zero mass at atom {i} where p is positive"
            )));
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl)
}
