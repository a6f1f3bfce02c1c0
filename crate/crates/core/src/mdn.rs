//! Gaussian mixture density head.
//!
//! A raw vector `θ ∈ R^{3K}` decodes to weights `softmax(θ[0..K])`, means
//! `θ[K..2K]` and scales `softplus(θ[2K..3K]) + σ_floor`, all in standardised
//! delay units. [`AffineTransform`] converts to and from milliseconds.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::{normal_cdf, sigmoid, Array, CustomOp};
use crate::error::{Error, Result};

pub const SIGMA_FLOOR: f64 = 1e-3;
/// Standard deviation of the target noise injected while training.
pub const TRAIN_NOISE_STD: f64 = 0.1;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// One step's predicted delay distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl MixtureParams {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, scales: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || scales.len() != k {
            return Err(Error::shape(
                "mixture",
                format!("{} weights, {} means, {} scales", k, means.len(), scales.len()),
            ));
        }
        if scales.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Validation("mixture scales must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Validation(format!("weights sum to {total}")));
        }
        Ok(MixtureParams {
            weights,
            means,
            scales,
        })
    }

    pub fn standard_normal() -> Self {
        MixtureParams {
            weights: vec![1.0],
            means: vec![0.0],
            scales: vec![1.0],
        }
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn log_prob(&self, y: f64) -> f64 {
        log_sum_exp(self.weights.iter().zip(&self.means).zip(&self.scales).map(
            |((&w, &m), &s)| {
                let z = (y - m) / s;
                w.ln() - 0.5 * z * z - s.ln() - HALF_LN_2PI
            },
        ))
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    pub fn cdf(&self, y: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.scales)
            .map(|((&w, &m), &s)| w * normal_cdf((y - m) / s))
            .sum::<f64>()
            .clamp(0.0, 1.0)
    }

    fn max_scale(&self) -> f64 {
        self.scales.iter().copied().fold(0.0, f64::max)
    }

    /// Inverse CDF by bisection on a bracket grown geometrically from
    /// `mean ± 10·max σ`, run until the bracket is a few ulps wide.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Argument(format!("quantile level {p} outside (0, 1)")));
        }
        let centre = self.mean();
        let mut half = 10.0 * self.max_scale();
        let (mut lo, mut hi) = (centre - half, centre + half);
        while self.cdf(lo) > p || self.cdf(hi) < p {
            half *= 2.0;
            lo = centre - half;
            hi = centre + half;
            if !half.is_finite() {
                return Err(Error::NonFinite("quantile bracket".into()));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let c = self.cdf(mid);
            if hi - lo <= 1e-14 * (1.0 + mid.abs()) {
                return Ok(mid);
            }
            if c < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Edges `[q_{(1−level)/2}, q_{(1+level)/2}]` of the central interval.
    pub fn central_interval(&self, level: f64) -> Result<(f64, f64)> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::Argument(format!("coverage level {level} outside (0, 1)")));
        }
        Ok((
            self.quantile(0.5 * (1.0 - level))?,
            self.quantile(0.5 * (1.0 + level))?,
        ))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = self.components() - 1;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let z: f64 = StandardNormal.sample(rng);
        self.means[k] + self.scales[k] * z
    }
}

/// Decodes a raw `3K` vector into mixture parameters.
pub fn to_mixture(raw: &[f64]) -> Result<MixtureParams> {
    if raw.is_empty() || raw.len() % 3 != 0 {
        return Err(Error::shape(
            "to_mixture",
            format!("raw length {} is not a positive multiple of 3", raw.len()),
        ));
    }
    let k = raw.len() / 3;
    let logits = &raw[..k];
    let lse = log_sum_exp(logits.iter().copied());
    Ok(MixtureParams {
        weights: logits.iter().map(|&a| (a - lse).exp()).collect(),
        means: raw[k..2 * k].to_vec(),
        scales: raw[2 * k..].iter().map(|&s| softplus(s) + SIGMA_FLOOR).collect(),
    })
}

/// Decodes every row of `Θ`.
pub fn decode_rows(theta: &Array) -> Result<Vec<MixtureParams>> {
    (0..theta.rows()).map(|r| to_mixture(theta.row(r))).collect()
}

/// Adds `N(0, 0.1²)` noise to a standardised target in training mode.
pub fn inject_noise<R: Rng + ?Sized>(y_std: f64, rng: &mut R, training: bool) -> f64 {
    if !training {
        return y_std;
    }
    let z: f64 = StandardNormal.sample(rng);
    y_std + TRAIN_NOISE_STD * z
}

/// `ms = location + scale · standardised`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub location: f64,
    pub scale: f64,
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform {
        location: 0.0,
        scale: 1.0,
    };

    pub fn to_ms(&self, y_std: f64) -> f64 {
        self.location + self.scale * y_std
    }

    pub fn from_ms(&self, y_ms: f64) -> f64 {
        (y_ms - self.location) / self.scale
    }

    /// The same distribution expressed in milliseconds.
    pub fn mixture_to_ms(&self, mix: &MixtureParams) -> MixtureParams {
        MixtureParams {
            weights: mix.weights.clone(),
            means: mix.means.iter().map(|&m| self.to_ms(m)).collect(),
            scales: mix.scales.iter().map(|&s| s * self.scale).collect(),
        }
    }

    /// Log density of a millisecond value under a standardised mixture.
    pub fn log_prob_ms(&self, mix: &MixtureParams, y_ms: f64) -> f64 {
        mix.log_prob(self.from_ms(y_ms)) - self.scale.ln()
    }
}

/// Report form of one mixture component, in milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentMs {
    pub w: f64,
    pub mu_ms: f64,
    pub sigma_ms: f64,
}

pub fn components_ms(mix: &MixtureParams, t: &AffineTransform) -> Vec<ComponentMs> {
    let ms = t.mixture_to_ms(mix);
    ms.weights
        .iter()
        .zip(&ms.means)
        .zip(&ms.scales)
        .map(|((&w, &mu_ms), &sigma_ms)| ComponentMs { w, mu_ms, sigma_ms })
        .collect()
}

/// Summed negative log-likelihood of standardised targets under rows of `Θ`.
///
/// Target `t` is scored against row `rows[t]`, so a single-row `Θ` shared by
/// every target and a one-row-per-target `Θ` use the same operator.
pub struct MixtureNll {
    targets: Vec<f64>,
    rows: Vec<usize>,
}

impl MixtureNll {
    pub fn new(targets: Vec<f64>, rows: Vec<usize>) -> Result<Self> {
        if targets.len() != rows.len() {
            return Err(Error::shape("mixture_nll", "targets and row map differ in length"));
        }
        if let Some(t) = targets.iter().find(|t| !t.is_finite()) {
            return Err(Error::NonFinite(format!("target {t}")));
        }
        Ok(MixtureNll { targets, rows })
    }

    /// Every target against its own row.
    pub fn per_step(targets: Vec<f64>) -> Result<Self> {
        let rows = (0..targets.len()).collect();
        Self::new(targets, rows)
    }

    /// Every target against row 0.
    pub fn shared(targets: Vec<f64>) -> Result<Self> {
        let rows = vec![0; targets.len()];
        Self::new(targets, rows)
    }
}

/// Per-component pieces of `ln p(y)` for one raw row.
struct Terms {
    resp: Vec<f64>,
    weights: Vec<f64>,
    z: Vec<f64>,
    sigma: Vec<f64>,
    log_p: f64,
}

fn terms(raw: &[f64], y: f64) -> Terms {
    let k = raw.len() / 3;
    let lse = log_sum_exp(raw[..k].iter().copied());
    let weights: Vec<f64> = raw[..k].iter().map(|&a| (a - lse).exp()).collect();
    let sigma: Vec<f64> = raw[2 * k..].iter().map(|&s| softplus(s) + SIGMA_FLOOR).collect();
    let z: Vec<f64> = (0..k).map(|j| (y - raw[k + j]) / sigma[j]).collect();
    let joint: Vec<f64> = (0..k)
        .map(|j| raw[j] - lse - 0.5 * z[j] * z[j] - sigma[j].ln() - HALF_LN_2PI)
        .collect();
    let log_p = log_sum_exp(joint.iter().copied());
    Terms {
        resp: joint.iter().map(|&v| (v - log_p).exp()).collect(),
        weights,
        z,
        sigma,
        log_p,
    }
}

impl CustomOp for MixtureNll {
    fn name(&self) -> &'static str {
        "mixture_nll"
    }

    fn forward(&self, inputs: &[&Array]) -> Result<Array> {
        let theta = inputs[0];
        if theta.cols() == 0 || theta.cols() % 3 != 0 {
            return Err(Error::shape(
                "mixture_nll",
                format!("Θ has {} columns, need 3K", theta.cols()),
            ));
        }
        if let Some(&r) = self.rows.iter().find(|&&r| r >= theta.rows()) {
            return Err(Error::shape(
                "mixture_nll",
                format!("row {r} of Θ with {} rows", theta.rows()),
            ));
        }
        let nll: f64 = self
            .targets
            .iter()
            .zip(&self.rows)
            .map(|(&y, &r)| -terms(theta.row(r), y).log_p)
            .sum();
        Ok(Array::scalar(nll))
    }

    fn backward(&self, inputs: &[&Array], _output: &Array, grad: &Array) -> Vec<Array> {
        let theta = inputs[0];
        let k = theta.cols() / 3;
        let g = grad.item();
        let mut out = Array::zeros(theta.rows(), theta.cols());
        for (&y, &r) in self.targets.iter().zip(&self.rows) {
            let raw = theta.row(r);
            let t = terms(raw, y);
            let row = out.row_mut(r);
            for j in 0..k {
                row[j] -= g * (t.resp[j] - t.weights[j]);
                row[k + j] -= g * t.resp[j] * t.z[j] / t.sigma[j];
                row[2 * k + j] -=
                    g * t.resp[j] * (t.z[j] * t.z[j] - 1.0) / t.sigma[j] * sigmoid(raw[2 * k + j]);
            }
        }
        vec![out]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_raw_vector() {
        let m = to_mixture(&[0.0; 24]).unwrap();
        assert!(m.weights.iter().all(|&w| (w - 0.125).abs() < 1e-15));
        assert!(m.means.iter().all(|&v| v == 0.0));
        assert!(m.scales.iter().all(|&s| (s - (2f64.ln() + 1e-3)).abs() < 1e-15));
        assert!((m.scales[0] - 0.6941).abs() < 1e-4);
    }

    #[test]
    fn softplus_three() {
        let mut raw = vec![0.0; 24];
        raw[16 + 2] = 3.0;
        let m = to_mixture(&raw).unwrap();
        assert!((m.scales[2] - 3.0496).abs() < 1e-4);
        assert!((m.scales[2] - ((1.0 + 3f64.exp()).ln() + 1e-3)).abs() < 1e-12);
    }

    #[test]
    fn logit_shift_invariance() {
        let raw: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut shifted = raw.clone();
        shifted[..4].iter_mut().for_each(|v| *v += 5.0);
        let (a, b) = (to_mixture(&raw).unwrap(), to_mixture(&shifted).unwrap());
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn wrong_length_is_rejected() {
        assert!(to_mixture(&[0.0; 7]).is_err());
        assert!(to_mixture(&[]).is_err());
    }

    #[test]
    fn standard_normal_log_density() {
        let m = MixtureParams::standard_normal();
        assert!((m.log_prob(0.0) + 0.918_938_5).abs() < 1e-7);
        let twin = MixtureParams::new(vec![0.5, 0.5], vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!((twin.log_prob(0.7) - m.log_prob(0.7)).abs() < 1e-14);
    }

    #[test]
    fn quantile_argument_checks() {
        let m = MixtureParams::standard_normal();
        assert!(m.quantile(0.0).is_err());
        assert!(m.quantile(1.0).is_err());
        assert!(m.quantile(0.5).unwrap().abs() < 1e-9);
    }

    #[test]
    fn noise_is_identity_outside_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(inject_noise(1.25, &mut rng, false), 1.25);
    }

    #[test]
    fn affine_round_trip() {
        let t = AffineTransform {
            location: 12.5,
            scale: 3.25,
        };
        for y in [-3.0, 0.0, 0.1, 17.0] {
            assert!((t.to_ms(t.from_ms(y)) - y).abs() < 1e-12);
        }
        let m = MixtureParams::standard_normal();
        let id = AffineTransform::IDENTITY;
        assert_eq!(id.mixture_to_ms(&m), m);
        let two = AffineTransform {
            location: 0.0,
            scale: 2.0,
        };
        assert!((two.log_prob_ms(&m, 0.0) - (m.log_prob(0.0) - 2f64.ln())).abs() < 1e-15);
        let ms = two.mixture_to_ms(&m);
        assert!((ms.log_prob(0.0) - two.log_prob_ms(&m, 0.0)).abs() < 1e-14);
    }

    #[test]
    fn nll_rejects_non_finite_targets() {
        assert!(MixtureNll::per_step(vec![0.0, f64::NAN]).is_err());
    }
}
