//! Monte-Carlo studies of cosine/dot-product gaps between random linear
//! combinations of shared random vectors: the coefficient simulation over
//! a sigma sweep, and the near-orthogonality gap check for convex weights.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SimulationSpec {
    pub dim: usize,
    pub sigma_set: Vec<f64>,
    pub trials: usize,
    pub coeff_mean: f64,
    /// Multiplies every drawn coefficient; cosine gaps are invariant to
    /// it, which the scale-invariance test exploits.
    pub coeff_scale: f64,
    pub seed: u64,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        SimulationSpec {
            dim: 128,
            sigma_set: vec![0.001, 0.01, 0.1, 1.0, 10.0, 100.0],
            trials: 10_000,
            coeff_mean: 1.0,
            coeff_scale: 1.0,
            seed: 0,
        }
    }
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidArgument("dim must be >= 2".to_string()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be >= 1".to_string()));
        }
        if self.sigma_set.is_empty() || self.sigma_set.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument(
                "sigma_set must be nonempty with all sigmas > 0".to_string(),
            ));
        }
        if !(self.coeff_scale > 0.0) {
            return Err(Error::InvalidArgument(
                "coeff_scale must be > 0".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GapSummary {
    pub mean: f64,
    pub std: f64,
    pub frac_positive: f64,
}

impl GapSummary {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let frac_positive = values.iter().filter(|&&v| v > 0.0).count() as f64 / n;
        GapSummary {
            mean,
            std: var.sqrt(),
            frac_positive,
        }
    }

    pub fn stderr(&self, trials: usize) -> f64 {
        self.std / (trials as f64).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct SigmaGaps {
    pub sigma: f64,
    /// sim(a,b) - sim(a,c) per trial.
    pub gap_ab_ac: Vec<f64>,
    /// sim(c,b) - sim(c,a) per trial.
    pub gap_cb_ca: Vec<f64>,
    pub summary_ab_ac: GapSummary,
    pub summary_cb_ca: GapSummary,
}

#[derive(Debug, Clone)]
pub struct GapHistograms {
    pub per_sigma: Vec<SigmaGaps>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Per trial: six shared standard-normal vectors v_1..v_6; combinations
/// a = sum of the first 4, b = first 5, c = all 6, each with its own
/// i.i.d. N(coeff_mean, sigma^2) coefficient set. Records both cosine
/// gaps for every sigma. Deterministic per seed.
pub fn run_coefficient_simulation(spec: &SimulationSpec) -> Result<GapHistograms> {
    spec.validate()?;
    let unit = Normal::new(0.0f64, 1.0).unwrap();
    let mut per_sigma = Vec::with_capacity(spec.sigma_set.len());
    for (si, &sigma) in spec.sigma_set.iter().enumerate() {
        let coeff = Normal::new(spec.coeff_mean, sigma)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(
            spec.seed ^ (si as u64).wrapping_mul(0x9e3779b97f4a7c15),
        );
        let mut gap_ab_ac = Vec::with_capacity(spec.trials);
        let mut gap_cb_ca = Vec::with_capacity(spec.trials);
        let mut v = vec![vec![0.0f64; spec.dim]; 6];
        for _ in 0..spec.trials {
            for vi in v.iter_mut() {
                for x in vi.iter_mut() {
                    *x = unit.sample(&mut rng);
                }
            }
            let combo = |count: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
                let mut out = vec![0.0f64; spec.dim];
                for vi in v.iter().take(count) {
                    let w = coeff.sample(rng) * spec.coeff_scale;
                    for (o, &x) in out.iter_mut().zip(vi) {
                        *o += w * x;
                    }
                }
                out
            };
            let a = combo(4, &mut rng);
            let b = combo(5, &mut rng);
            let c = combo(6, &mut rng);
            gap_ab_ac.push(cosine(&a, &b) - cosine(&a, &c));
            gap_cb_ca.push(cosine(&c, &b) - cosine(&c, &a));
        }
        let summary_ab_ac = GapSummary::from_values(&gap_ab_ac);
        let summary_cb_ca = GapSummary::from_values(&gap_cb_ca);
        per_sigma.push(SigmaGaps {
            sigma,
            gap_ab_ac,
            gap_cb_ca,
            summary_ab_ac,
            summary_cb_ca,
        });
    }
    Ok(GapHistograms { per_sigma })
}

fn normalized_gaussian(dim: usize, rng: &mut ChaCha8Rng, unit: &Normal<f64>) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| unit.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn convex_weights(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            return w.into_iter().map(|x| x / total).collect();
        }
    }
}

/// Monte-Carlo gap for fixed weight vectors over shared normalized
/// Gaussian basis vectors: a . b - a . b' with a = sum alpha_i e_i,
/// b = sum beta_i e_i, b' = sum beta'_i e_i.
pub fn dot_product_gap_with_weights(
    dim: usize,
    alpha: &[f64],
    beta: &[f64],
    beta_prime: &[f64],
    trials: usize,
    seed: u64,
) -> Result<GapSummary> {
    let n_vecs = alpha.len().max(beta.len()).max(beta_prime.len());
    if n_vecs == 0 || trials == 0 {
        return Err(Error::InvalidArgument(
            "need nonempty weights and trials >= 1".to_string(),
        ));
    }
    if dim < 8 * n_vecs {
        return Err(Error::InvalidArgument(format!(
            "dim {dim} too small for {n_vecs} near-orthogonal vectors (need >= {})",
            8 * n_vecs
        )));
    }
    let unit = Normal::new(0.0f64, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let at = |w: &[f64], i: usize| w.get(i).copied().unwrap_or(0.0);
    let gaps: Vec<f64> = (0..trials)
        .map(|_| {
            let mut a = vec![0.0f64; dim];
            let mut b = vec![0.0f64; dim];
            let mut bp = vec![0.0f64; dim];
            for i in 0..n_vecs {
                let e = normalized_gaussian(dim, &mut rng, &unit);
                for (j, &x) in e.iter().enumerate() {
                    a[j] += at(alpha, i) * x;
                    b[j] += at(beta, i) * x;
                    bp[j] += at(beta_prime, i) * x;
                }
            }
            let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
            dot(&a, &b) - dot(&a, &bp)
        })
        .collect();
    Ok(GapSummary::from_values(&gaps))
}

/// Convex-weight gap check: per trial, draws fresh uniform weights
/// normalized to sum 1 (alpha over k+1 vectors, beta over k+t+1,
/// beta' over k+t+2) and shared normalized Gaussian basis vectors, then
/// measures a.b - a.b'. Returns the Monte-Carlo mean and positivity rate.
pub fn dot_product_gap_check(
    dim: usize,
    k: usize,
    t: usize,
    trials: usize,
    seed: u64,
) -> Result<(GapSummary, usize)> {
    let n_vecs = k + t + 2;
    if dim < 8 * n_vecs {
        return Err(Error::InvalidArgument(format!(
            "dim {dim} too small: need >= {}",
            8 * n_vecs
        )));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".to_string()));
    }
    let unit = Normal::new(0.0f64, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaps: Vec<f64> = (0..trials)
        .map(|_| {
            let alpha = convex_weights(k + 1, &mut rng);
            let beta = convex_weights(k + t + 1, &mut rng);
            let beta_prime = convex_weights(k + t + 2, &mut rng);
            let mut a = vec![0.0f64; dim];
            let mut b = vec![0.0f64; dim];
            let mut bp = vec![0.0f64; dim];
            for i in 0..n_vecs {
                let e = normalized_gaussian(dim, &mut rng, &unit);
                for (j, &x) in e.iter().enumerate() {
                    if i < alpha.len() {
                        a[j] += alpha[i] * x;
                    }
                    if i < beta.len() {
                        b[j] += beta[i] * x;
                    }
                    bp[j] += beta_prime[i] * x;
                }
            }
            let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
            dot(&a, &b) - dot(&a, &bp)
        })
        .collect();
    Ok((GapSummary::from_values(&gaps), trials))
}
