//! Gaussian pixel-noise smoothing: Monte Carlo class tallies, one-sided
//! Clopper–Pearson bounds and the certified L2 radius.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;

use crate::classifier::BaseClassifier;
use crate::error::{PwsError, Result};
use crate::rasterizer::Image;

pub const DEFAULT_SAMPLES: u64 = 10_000;
pub const DEFAULT_CONFIDENCE_ALPHA: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub sigma: f64,
    pub n_samples: u64,
    pub confidence_alpha: f64,
    pub seed: u64,
}

impl SmoothingConfig {
    pub fn new(sigma: f64, n_samples: u64, confidence_alpha: f64, seed: u64) -> Result<Self> {
        let cfg = SmoothingConfig { sigma, n_samples, confidence_alpha, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(PwsError::InvalidInput(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.n_samples < 100 {
            return Err(PwsError::InvalidInput(format!("need at least 100 samples, got {}", self.n_samples)));
        }
        if !(self.confidence_alpha > 0.0 && self.confidence_alpha < 1.0) {
            return Err(PwsError::InvalidInput(format!(
                "confidence alpha must lie in (0, 1), got {}",
                self.confidence_alpha
            )));
        }
        Ok(())
    }

    /// Same settings with a seed derived from this one and a stream index.
    pub fn derive(&self, stream: u64) -> SmoothingConfig {
        SmoothingConfig { seed: derive_seed(self.seed, stream), ..*self }
    }
}

/// Mixes a stream index into a seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Monte Carlo draws are grouped in fixed-size blocks; block `c` covers draws
/// `c·DRAWS_PER_STREAM ..` and is generated by stream `c` of a generator keyed by
/// the seed. Any worker can produce any block, so tallies do not depend on the
/// number of threads.
pub const DRAWS_PER_STREAM: u64 = 256;

#[derive(Debug, Clone)]
pub struct NoiseStreams {
    base: ChaCha8Rng,
}

impl NoiseStreams {
    pub fn new(seed: u64) -> Self {
        NoiseStreams { base: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn stream(&self, index: u64) -> ChaCha8Rng {
        let mut rng = self.base.clone();
        rng.set_stream(index);
        rng.set_word_pos(0);
        rng
    }

    /// Block ranges `(stream, first_draw, draw_count)` covering `n` draws.
    pub fn blocks(n: u64) -> impl Iterator<Item = (u64, u64, u64)> {
        let count = n.div_ceil(DRAWS_PER_STREAM);
        (0..count).map(move |c| {
            let first = c * DRAWS_PER_STREAM;
            (c, first, DRAWS_PER_STREAM.min(n - first))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimateStatus {
    Confident,
    Abstain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedEstimate {
    pub top_label: usize,
    pub runner_up: Option<usize>,
    pub pa_lower: f64,
    pub pb_upper: f64,
    pub counts: Vec<u64>,
    /// Zero when abstaining.
    pub radius: f64,
    pub status: EstimateStatus,
}

impl SmoothedEstimate {
    pub fn from_counts(counts: Vec<u64>, sigma: f64, confidence_alpha: f64) -> Result<Self> {
        let n: u64 = counts.iter().sum();
        if n == 0 {
            return Err(PwsError::InvalidInput("no Monte Carlo draws to summarize".into()));
        }
        let top = argmax_u64(&counts);
        let runner_up = (0..counts.len()).filter(|&i| i != top).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)));
        let pa_lower = clopper_pearson_lower(counts[top], n, confidence_alpha);
        let pb_upper = 1.0 - pa_lower;
        let (radius, status) = if pa_lower > 0.5 {
            (certified_radius(sigma, pa_lower, pb_upper)?, EstimateStatus::Confident)
        } else {
            (0.0, EstimateStatus::Abstain)
        };
        Ok(SmoothedEstimate { top_label: top, runner_up, pa_lower, pb_upper, counts, radius, status })
    }

    pub fn abstained(&self) -> bool {
        self.status == EstimateStatus::Abstain
    }
}

/// First index of the maximum.
pub fn argmax_u64(counts: &[u64]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// `σ/2 · (Φ⁻¹(pA) − Φ⁻¹(pB))`.
pub fn certified_radius(sigma: f64, pa_lower: f64, pb_upper: f64) -> Result<f64> {
    Ok(0.5 * sigma * (gaussian_quantile(pa_lower)? - gaussian_quantile(pb_upper)?))
}

pub fn smoothed_estimate(c: &dyn BaseClassifier, x: &Image, cfg: &SmoothingConfig) -> Result<SmoothedEstimate> {
    cfg.validate()?;
    let counts = c.noisy_label_counts(x, cfg.sigma, cfg.n_samples, cfg.seed)?;
    SmoothedEstimate::from_counts(counts, cfg.sigma, cfg.confidence_alpha)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

// Rational approximation coefficients for the central and tail regions of Φ⁻¹.
const A: [f64; 6] = [
    -3.969_683_028_665_376e1,
    2.209_460_984_245_205e2,
    -2.759_285_104_469_687e2,
    1.383_577_518_672_69e2,
    -3.066_479_806_614_716e1,
    2.506_628_277_459_239,
];
const B: [f64; 5] = [
    -5.447_609_879_822_406e1,
    1.615_858_368_580_409e2,
    -1.556_989_798_598_866e2,
    6.680_131_188_771_972e1,
    -1.328_068_155_288_572e1,
];
const C: [f64; 6] = [
    -7.784_894_002_430_293e-3,
    -3.223_964_580_411_365e-1,
    -2.400_758_277_161_838,
    -2.549_732_539_343_734,
    4.374_664_141_464_968,
    2.938_163_982_698_783,
];
const D: [f64; 4] = [
    7.784_695_709_041_462e-3,
    3.224_671_290_700_398e-1,
    2.445_134_137_142_996,
    3.754_408_661_907_416,
];

/// Initial estimate for `p ≤ 0.5`, relative error about 1e-9.
fn quantile_seed(p: f64) -> f64 {
    const P_LOW: f64 = 0.024_25;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

pub fn gaussian_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(PwsError::DomainError(format!("gaussian quantile needs 0 < p < 1, got {p}")));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    if p > 0.5 {
        return Ok(-lower_quantile(1.0 - p));
    }
    Ok(lower_quantile(p))
}

fn lower_quantile(p: f64) -> f64 {
    let x = quantile_seed(p);
    // One Newton step on Φ(x) = p; erfc keeps the residual accurate in the tail.
    let residual = normal_cdf(x) - p;
    let density = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    x - residual / density
}

/// Exact one-sided lower confidence bound on a binomial proportion.
pub fn clopper_pearson_lower(successes: u64, trials: u64, alpha: f64) -> f64 {
    assert!(trials >= 1 && successes <= trials, "need 0 <= successes <= trials and trials >= 1");
    if successes == 0 {
        return 0.0;
    }
    if successes == trials {
        return alpha.powf(1.0 / trials as f64);
    }
    let (a, b) = (successes as f64, (trials - successes + 1) as f64);
    // The lower bound solves I_p(k, n - k + 1) = alpha; the left side increases in p.
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if beta_reg(a, b, mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::tests::{ConstantClassifier, CoinClassifier};
    use proptest::prelude::*;
    use rand::Rng;

    /// Quantile by bisection on an independent erfc.
    fn oracle_quantile(p: f64) -> f64 {
        let cdf = |x: f64| 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2);
        let target = p.min(1.0 - p);
        let (mut lo, mut hi) = (-40.0f64, 0.0f64);
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let x = 0.5 * (lo + hi);
        if p > 0.5 {
            -x
        } else {
            x
        }
    }

    /// Binomial upper tail P(X ≥ k) by direct summation in log space.
    fn oracle_upper_tail(k: u64, n: u64, p: f64) -> f64 {
        let ln_choose = |n: u64, i: u64| {
            libm::lgamma(n as f64 + 1.0) - libm::lgamma(i as f64 + 1.0) - libm::lgamma((n - i) as f64 + 1.0)
        };
        (k..=n)
            .map(|i| (ln_choose(n, i) + i as f64 * p.ln() + (n - i) as f64 * (1.0 - p).ln()).exp())
            .sum()
    }

    fn oracle_cp_lower(k: u64, n: u64, alpha: f64) -> f64 {
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if oracle_upper_tail(k, n, mid) < alpha {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(gaussian_quantile(0.5).unwrap(), 0.0);
        assert!((gaussian_quantile(0.975).unwrap() - 1.959_963_984_540_054).abs() < 1e-9);
        assert!(matches!(gaussian_quantile(0.0), Err(PwsError::DomainError(_))));
        assert!(matches!(gaussian_quantile(1.0), Err(PwsError::DomainError(_))));
        assert!(gaussian_quantile(f64::NAN).is_err());
    }

    #[test]
    fn quantile_matches_bisection_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..2000 {
            let p = if i % 4 == 0 { 10f64.powf(rng.random_range(-12.0..-1.0)) } else { rng.random_range(1e-6..1.0 - 1e-6) };
            let got = gaussian_quantile(p).unwrap();
            assert!((got - oracle_quantile(p)).abs() <= 1e-9, "p={p}");
        }
    }

    #[test]
    fn quantile_is_antisymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // Dyadic probabilities keep 1 - p exact.
        for _ in 0..1000 {
            let p = rng.random_range(1u64..(1 << 30)) as f64 / (1u64 << 30) as f64;
            let sum = gaussian_quantile(p).unwrap() + gaussian_quantile(1.0 - p).unwrap();
            assert!(sum.abs() < 1e-12, "p={p} sum={sum}");
        }
    }

    #[test]
    fn clopper_pearson_examples() {
        assert_eq!(clopper_pearson_lower(0, 50, 0.05), 0.0);
        assert!((clopper_pearson_lower(100, 100, 0.001) - 0.001f64.powf(0.01)).abs() < 1e-15);
        let v = clopper_pearson_lower(80, 100, 0.05);
        assert!((v - oracle_cp_lower(80, 100, 0.05)).abs() < 1e-9);
        assert!((v - 0.7228).abs() < 5e-5, "{v}");
    }

    #[test]
    fn clopper_pearson_matches_tail_sum_oracle() {
        for &(k, n, alpha) in &[(1u64, 10u64, 0.05), (7, 10, 0.001), (990, 1000, 0.001), (5123, 10_000, 0.001), (37, 400, 0.2)] {
            let got = clopper_pearson_lower(k, n, alpha);
            let want = oracle_cp_lower(k, n, alpha);
            assert!((got - want).abs() < 1e-9, "k={k} n={n}: {got} vs {want}");
        }
    }

    #[test]
    fn radius_example() {
        let r = certified_radius(0.5, 0.99, 0.01).unwrap();
        assert!((r - 1.163_173_935).abs() < 1e-6, "{r}");
    }

    #[test]
    fn constant_classifier_is_confident() {
        let img = Image::filled(1, 4, 4, &[0.5]).unwrap();
        let cfg = SmoothingConfig::new(0.5, 100, 0.001, 7).unwrap();
        let est = smoothed_estimate(&ConstantClassifier { labels: 5, answer: 3 }, &img, &cfg).unwrap();
        assert_eq!(est.top_label, 3);
        assert_eq!(est.counts[3], 100);
        assert!((est.pa_lower - 0.001f64.powf(0.01)).abs() < 1e-12);
        assert!((est.pa_lower - 0.933).abs() < 1e-3);
        assert_eq!(est.status, EstimateStatus::Confident);
    }

    #[test]
    fn coin_classifier_abstains() {
        let img = Image::filled(1, 4, 4, &[0.5]).unwrap();
        let cfg = SmoothingConfig::new(0.5, 2000, 0.001, 7).unwrap();
        let est = smoothed_estimate(&CoinClassifier, &img, &cfg).unwrap();
        assert_eq!(est.status, EstimateStatus::Abstain);
        assert_eq!(est.radius, 0.0);
        let again = smoothed_estimate(&CoinClassifier, &img, &cfg).unwrap();
        assert_eq!(est, again);
    }

    #[test]
    fn coverage_of_lower_bound() {
        // Violations are Binomial(2000, ≤ alpha); 125 is above its 99th percentile.
        let (p, n, alpha) = (0.9, 200u64, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let violations = (0..2000)
            .filter(|_| {
                let k = (0..n).filter(|_| rng.random::<f64>() < p).count() as u64;
                clopper_pearson_lower(k, n, alpha) > p
            })
            .count();
        assert!(violations <= 125, "{violations}");
    }

    #[test]
    fn noise_streams_are_independent_of_order() {
        use rand::RngCore;
        let streams = NoiseStreams::new(5);
        let forward: Vec<u64> = (0..10).map(|i| streams.stream(i).next_u64()).collect();
        let backward: Vec<u64> = (0..10).rev().map(|i| streams.stream(i).next_u64()).collect();
        assert_eq!(forward, backward.into_iter().rev().collect::<Vec<_>>());
        assert_ne!(forward[0], forward[1]);
        let blocks: Vec<_> = NoiseStreams::blocks(600).collect();
        assert_eq!(blocks, vec![(0, 0, 256), (1, 256, 256), (2, 512, 88)]);
    }

    proptest! {
        #[test]
        fn radius_increases_with_confidence(p in 0.5001..0.9999f64, dp in 1e-6..1e-3f64, sigma in 0.01..2.0f64) {
            let q = (p + dp).min(0.999_999);
            prop_assume!(q > p);
            let r1 = certified_radius(sigma, p, 1.0 - p).unwrap();
            let r2 = certified_radius(sigma, q, 1.0 - q).unwrap();
            prop_assert!(r2 > r1);
            let scaled = certified_radius(3.0 * sigma, p, 1.0 - p).unwrap();
            prop_assert!((scaled - 3.0 * r1).abs() <= 1e-12 * scaled.abs().max(1.0));
        }

        #[test]
        fn lower_bound_is_below_the_point_estimate(n in 1u64..5000, frac in 0.0..=1.0f64, alpha in 1e-4..0.5f64) {
            let k = ((n as f64) * frac).round() as u64;
            let lb = clopper_pearson_lower(k, n, alpha);
            prop_assert!((0.0..=1.0).contains(&lb));
            prop_assert!(lb <= k as f64 / n as f64 + 1e-12);
        }
    }
}
