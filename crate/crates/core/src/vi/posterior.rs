use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{MlpSpec, Result, ViError};
use crate::rng::seeded;

/// Mean of the supervised noise variance at initialization.
pub const NOISE_VAR_MEAN: f64 = 1e-5;
/// Variance of the supervised noise variance at initialization.
pub const NOISE_VAR_VARIANCE: f64 = 1e-6;

/// Gaussian factor over the log of the supervised noise variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseFactor {
    pub mu: f64,
    pub log_sigma: f64,
}

impl NoiseFactor {
    /// Log-normal moment match: `exp(s)` has the given mean and variance.
    pub fn moment_matched(mean: f64, variance: f64) -> Self {
        let v = (1.0 + variance / (mean * mean)).ln();
        Self {
            mu: mean.ln() - 0.5 * v,
            log_sigma: 0.5 * v.ln(),
        }
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }
}

impl Default for NoiseFactor {
    fn default() -> Self {
        Self::moment_matched(NOISE_VAR_MEAN, NOISE_VAR_VARIANCE)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldPosterior {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    pub noise: NoiseFactor,
}

/// Factorized Gaussian prior. Variances are stored as logs so a prior
/// chained from a posterior reproduces it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub mu0: Vec<f64>,
    pub log_var0: Vec<f64>,
    pub noise: NoiseFactor,
}

impl PriorSpec {
    pub fn isotropic(n: usize, var0: f64) -> Self {
        assert!(var0 > 0.0, "prior variance must be positive");
        Self {
            mu0: vec![0.0; n],
            log_var0: vec![var0.ln(); n],
            noise: NoiseFactor::default(),
        }
    }

    pub fn new(mu0: Vec<f64>, var0: &[f64]) -> Result<Self> {
        if mu0.len() != var0.len() {
            return Err(ViError::Dimension {
                what: "prior variance",
                expected: mu0.len(),
                got: var0.len(),
            });
        }
        if let Some(v) = var0.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(ViError::InvalidConfig(format!("prior variance {v} must be positive")));
        }
        Ok(Self {
            mu0,
            log_var0: var0.iter().map(|v| v.ln()).collect(),
            noise: NoiseFactor::default(),
        })
    }

    /// Prior for the next stage: the current posterior, noise included.
    pub fn from_posterior(q: &MeanFieldPosterior) -> Self {
        Self {
            mu0: q.mu.clone(),
            log_var0: q.log_sigma.iter().map(|ls| 2.0 * ls).collect(),
            noise: q.noise,
        }
    }

    pub fn len(&self) -> usize {
        self.mu0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu0.is_empty()
    }

    pub fn var0(&self) -> Vec<f64> {
        self.log_var0.iter().map(|l| l.exp()).collect()
    }
}

impl MeanFieldPosterior {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|l| l.exp()).collect()
    }

    /// `[mu, log_sigma, noise.mu, noise.log_sigma]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.len() + 2);
        v.extend(&self.mu);
        v.extend(&self.log_sigma);
        v.push(self.noise.mu);
        v.push(self.noise.log_sigma);
        v
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let n = self.len();
        assert_eq!(flat.len(), 2 * n + 2, "flat posterior length");
        self.mu.copy_from_slice(&flat[..n]);
        self.log_sigma.copy_from_slice(&flat[n..2 * n]);
        self.noise.mu = flat[2 * n];
        self.noise.log_sigma = flat[2 * n + 1];
    }

    /// `w = mu + sigma * eps`.
    pub fn reparameterize(&self, eps: &[f64]) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.log_sigma)
            .zip(eps)
            .map(|((m, ls), e)| m + ls.exp() * e)
            .collect()
    }
}

/// Initial posterior: weight means `N(0, 1 / fan_in)`, bias means 0, every
/// variance `sigma_fraction * var0`, noise factor equal to the prior's.
pub fn init_posterior(
    spec: &MlpSpec,
    prior: &PriorSpec,
    sigma_fraction: f64,
    seed: u64,
) -> Result<MeanFieldPosterior> {
    let n = spec.param_count();
    if prior.len() != n {
        return Err(ViError::Dimension {
            what: "prior",
            expected: n,
            got: prior.len(),
        });
    }
    if !(sigma_fraction > 0.0 && sigma_fraction.is_finite()) {
        return Err(ViError::InvalidConfig(format!(
            "sigma fraction {sigma_fraction} must be positive"
        )));
    }
    let mut rng = seeded(seed);
    let bias = spec.bias_mask();
    let mu = spec
        .fan_in()
        .iter()
        .zip(&bias)
        .map(|(&fan_in, &is_bias)| {
            let e: f64 = rng.sample(StandardNormal);
            if is_bias {
                0.0
            } else {
                e / (fan_in.max(1) as f64).sqrt()
            }
        })
        .collect();
    let ln_frac = sigma_fraction.ln();
    let log_sigma = prior.log_var0.iter().map(|lv| 0.5 * (lv + ln_frac)).collect();
    Ok(MeanFieldPosterior {
        mu,
        log_sigma,
        noise: prior.noise,
    })
}

/// KL of one Gaussian factor, `N(mu, exp(ls)^2)` against `N(mu0, exp(lv0))`.
fn kl_coordinate(mu: f64, ls: f64, mu0: f64, lv0: f64) -> f64 {
    // r - 1 - ln r with r = exp(t), written to avoid cancellation near r = 1.
    let t = 2.0 * ls - lv0;
    let d = mu - mu0;
    (0.5 * (t.exp_m1() - t + d * d * (-lv0).exp())).max(0.0)
}

/// Analytic KL between factorized Gaussians, noise factor included.
pub fn kl_mean_field(q: &MeanFieldPosterior, p: &PriorSpec) -> Result<f64> {
    if q.len() != p.len() || q.log_sigma.len() != q.len() {
        return Err(ViError::Dimension {
            what: "posterior",
            expected: p.len(),
            got: q.len(),
        });
    }
    let weights: f64 = (0..q.len())
        .map(|k| kl_coordinate(q.mu[k], q.log_sigma[k], p.mu0[k], p.log_var0[k]))
        .sum();
    let noise = kl_coordinate(
        q.noise.mu,
        q.noise.log_sigma,
        p.noise.mu,
        2.0 * p.noise.log_sigma,
    );
    Ok(weights + noise)
}

/// Gradient of [`kl_mean_field`] in the layout of [`MeanFieldPosterior::flatten`].
pub fn kl_gradient(q: &MeanFieldPosterior, p: &PriorSpec) -> Vec<f64> {
    let n = q.len();
    let mut g = vec![0.0; 2 * n + 2];
    let coord = |mu: f64, ls: f64, mu0: f64, lv0: f64| {
        let inv = (-lv0).exp();
        ((mu - mu0) * inv, (2.0 * ls - lv0).exp() - 1.0)
    };
    for k in 0..n {
        let (gm, gs) = coord(q.mu[k], q.log_sigma[k], p.mu0[k], p.log_var0[k]);
        g[k] = gm;
        g[n + k] = gs;
    }
    let (gm, gs) = coord(q.noise.mu, q.noise.log_sigma, p.noise.mu, 2.0 * p.noise.log_sigma);
    g[2 * n] = gm;
    g[2 * n + 1] = gs;
    g
}

/// `count` standard-normal vectors of length `n` from one seeded stream.
pub fn standard_normals(n: usize, seed: u64, count: usize) -> Vec<Vec<f64>> {
    let mut rng = seeded(seed);
    (0..count)
        .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// Reparameterized weight draws `mu + sigma * eps`.
pub fn sample_weights(q: &MeanFieldPosterior, seed: u64, count: usize) -> Vec<Vec<f64>> {
    standard_normals(q.len(), seed, count)
        .iter()
        .map(|eps| q.reparameterize(eps))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vi::SubNetwork;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn toy_spec() -> MlpSpec {
        MlpSpec {
            sub_networks: vec![SubNetwork {
                label: "y".into(),
                input_dim: 3,
                hidden: vec![4, 4],
                output_dim: 2,
            }],
            bound_repair: None,
        }
    }

    fn single(mu: f64, var: f64) -> MeanFieldPosterior {
        MeanFieldPosterior {
            mu: vec![mu],
            log_sigma: vec![0.5 * var.ln()],
            noise: NoiseFactor::default(),
        }
    }

    #[test]
    fn noise_factor_matches_requested_moments() {
        let n = NoiseFactor::default();
        let v = n.sigma().powi(2);
        let mean = (n.mu + 0.5 * v).exp();
        let var = (v.exp() - 1.0) * (2.0 * n.mu + v).exp();
        assert_abs_diff_eq!(mean, 1e-5, epsilon = 1e-18);
        assert_abs_diff_eq!(var, 1e-6, epsilon = 1e-15);
        assert_abs_diff_eq!(v, 10001.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn init_is_deterministic_with_fractional_variance() {
        let spec = toy_spec();
        let prior = PriorSpec::isotropic(spec.param_count(), 1e-2);
        let a = init_posterior(&spec, &prior, 0.1, 5).unwrap();
        assert_eq!(a, init_posterior(&spec, &prior, 0.1, 5).unwrap());
        assert_ne!(a.mu, init_posterior(&spec, &prior, 0.1, 6).unwrap().mu);
        for s in a.sigma() {
            assert_abs_diff_eq!(s * s, 1e-3, epsilon = 1e-15);
        }
        for (m, b) in a.mu.iter().zip(spec.bias_mask()) {
            if b {
                assert_eq!(*m, 0.0);
            }
        }
        assert_eq!(a.noise, prior.noise);
    }

    #[test]
    fn kl_examples() {
        let p = PriorSpec::isotropic(1, 1.0);
        assert_eq!(kl_mean_field(&single(0.0, 1.0), &p).unwrap(), 0.0);
        assert_abs_diff_eq!(kl_mean_field(&single(1.0, 1.0), &p).unwrap(), 0.5, epsilon = 1e-15);
        let expected = 2.0_f64.ln() + 0.125 - 0.5;
        assert_abs_diff_eq!(kl_mean_field(&single(0.0, 0.25), &p).unwrap(), expected, epsilon = 1e-14);
        assert_abs_diff_eq!(expected, 0.31815, epsilon = 1e-5);
    }

    #[test]
    fn kl_of_chained_prior_is_zero() {
        let spec = toy_spec();
        let prior = PriorSpec::isotropic(spec.param_count(), 1e-2);
        let q = init_posterior(&spec, &prior, 0.1, 1).unwrap();
        assert_eq!(kl_mean_field(&q, &PriorSpec::from_posterior(&q)).unwrap(), 0.0);
        assert!(kl_mean_field(&q, &PriorSpec::isotropic(3, 1.0)).is_err());
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let q = MeanFieldPosterior {
            mu: vec![0.3, -1.2],
            log_sigma: vec![-0.4, 0.2],
            noise: NoiseFactor { mu: -3.0, log_sigma: 0.1 },
        };
        let p = PriorSpec::new(vec![0.1, 0.0], &[0.5, 2.0]).unwrap();
        let g = kl_gradient(&q, &p);
        let flat = q.flatten();
        for k in 0..flat.len() {
            let eval = |d: f64| {
                let mut f = flat.clone();
                f[k] += d;
                let mut r = q.clone();
                r.assign_flat(&f);
                kl_mean_field(&r, &p).unwrap()
            };
            let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
            assert_abs_diff_eq!(g[k], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn degenerate_sigma_returns_mean() {
        let q = MeanFieldPosterior {
            mu: vec![0.5, -2.0, 3.0],
            log_sigma: vec![-40.0; 3],
            noise: NoiseFactor::default(),
        };
        for w in sample_weights(&q, 3, 20) {
            for (a, b) in w.iter().zip(&q.mu) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn sample_mean_within_clt_bound() {
        let q = MeanFieldPosterior {
            mu: vec![0.5, -2.0, 3.0],
            log_sigma: vec![0.0, -1.0, 0.5],
            noise: NoiseFactor::default(),
        };
        let count = 100_000;
        let draws = sample_weights(&q, 17, count);
        assert_eq!(draws, sample_weights(&q, 17, count));
        for (k, s) in q.sigma().iter().enumerate() {
            let mean = draws.iter().map(|w| w[k]).sum::<f64>() / count as f64;
            assert!((mean - q.mu[k]).abs() <= 3.0 * s / (count as f64).sqrt());
            let var = draws.iter().map(|w| (w[k] - mean).powi(2)).sum::<f64>() / count as f64;
            assert!((var / (s * s) - 1.0).abs() < 0.02);
        }
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative_and_zero_only_at_prior(
            mu in -3.0f64..3.0,
            ls in -3.0f64..2.0,
            mu0 in -3.0f64..3.0,
            v0 in 0.01f64..5.0,
        ) {
            let p = PriorSpec::new(vec![mu0], &[v0]).unwrap();
            let q = MeanFieldPosterior { mu: vec![mu], log_sigma: vec![ls], noise: p.noise };
            let kl = kl_mean_field(&q, &p).unwrap();
            prop_assert!(kl >= 0.0);
            let same = MeanFieldPosterior { mu: vec![mu0], log_sigma: vec![0.5 * v0.ln()], noise: p.noise };
            prop_assert!(kl_mean_field(&same, &p).unwrap() <= 1e-12);
            if (mu - mu0).abs() > 1e-3 {
                prop_assert!(kl > 0.0);
            }
        }
    }
}
