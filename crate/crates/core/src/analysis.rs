//! Self-cosine-similarity matrices, the row-wise adjacency probability
//! score, per-position variance sequences, and score distributions over
//! sample sets.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Square matrix of pairwise cosine similarities. Stored row-major.
#[derive(Debug, Clone)]
pub struct SimMatrix {
    n: usize,
    values: Vec<f32>,
}

impl SimMatrix {
    pub fn from_values(n: usize, values: Vec<f32>) -> Result<Self> {
        if n == 0 || values.len() != n * n {
            return Err(Error::InvalidArgument(format!(
                "expected {n}x{n} values, got {}",
                values.len()
            )));
        }
        Ok(SimMatrix { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

/// Cosine similarities between all row pairs of `x` ([n, d]). A zero
/// vector has similarity 0 with everything, including itself.
pub fn cosine_sim_matrix(x: &Tensor) -> Result<SimMatrix> {
    if x.rank() != 2 {
        return Err(Error::InvalidArgument(format!(
            "expected a rank-2 tensor, got rank {}",
            x.rank()
        )));
    }
    let n = x.shape()[0];
    let d = x.shape()[1];
    let norms: Vec<f64> = (0..n)
        .map(|i| {
            x.row(i)
                .iter()
                .map(|&v| v as f64 * v as f64)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut values = vec![0.0f32; n * n];
    for i in 0..n {
        for j in i..n {
            let sim = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let mut dot = 0.0f64;
                let (ri, rj) = (x.row(i), x.row(j));
                for k in 0..d {
                    dot += ri[k] as f64 * rj[k] as f64;
                }
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0) as f32
            };
            values[i * n + j] = sim;
            values[j * n + i] = sim;
        }
    }
    SimMatrix::from_values(n, values)
}

/// Row-wise adjacency probability score. `row_scores[k]` is `None` when
/// the row has fewer than two comparable columns.
#[derive(Debug, Clone)]
pub struct AdjScore {
    pub matrix_score: f64,
    pub row_scores: Vec<Option<f64>>,
}

fn ordered_pair_fraction(vals: &[f32], higher_later: bool) -> Option<f64> {
    let m = vals.len();
    if m < 2 {
        return None;
    }
    let mut hits = 0usize;
    for i in 0..m {
        for j in i + 1..m {
            let ok = if higher_later {
                vals[i] < vals[j]
            } else {
                vals[i] > vals[j]
            };
            if ok {
                hits += 1;
            }
        }
    }
    Some(hits as f64 / (m * (m - 1) / 2) as f64)
}

fn mean_of_present(rows: &[Option<f64>]) -> Result<f64> {
    let present: Vec<f64> = rows.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::InvalidArgument(
            "no row has two comparable columns".to_string(),
        ));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// For each row k, looks at the columns left of (and optionally including)
/// the diagonal and measures how often similarity strictly increases
/// toward the diagonal: the fraction of column pairs i<j with
/// C[k][i] < C[k][j]. Ties count zero. 1.0 = perfectly banded,
/// ~0.5 = random, 0.0 = constant.
pub fn adjacency_score(c: &SimMatrix, include_diagonal: bool) -> Result<AdjScore> {
    if c.n() < 2 {
        return Err(Error::InvalidArgument(
            "adjacency score needs n >= 2".to_string(),
        ));
    }
    let row_scores: Vec<Option<f64>> = (0..c.n())
        .map(|k| {
            let end = if include_diagonal { k + 1 } else { k };
            ordered_pair_fraction(&c.row(k)[..end], true)
        })
        .collect();
    let matrix_score = mean_of_present(&row_scores)?;
    Ok(AdjScore {
        matrix_score,
        row_scores,
    })
}

/// Population variance across the coordinates of each row of `x`.
#[derive(Debug, Clone)]
pub struct VarianceSequence(pub Vec<f64>);

pub fn variance_sequence(x: &Tensor) -> Result<VarianceSequence> {
    if x.rank() != 2 || x.shape()[1] < 2 {
        return Err(Error::InvalidArgument(
            "variance_sequence needs a rank-2 tensor with d >= 2".to_string(),
        ));
    }
    let d = x.shape()[1] as f64;
    let vars = (0..x.shape()[0])
        .map(|i| {
            let row = x.row(i);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d;
            row.iter()
                .map(|&v| {
                    let c = v as f64 - mean;
                    c * c
                })
                .sum::<f64>()
                / d
        })
        .collect();
    Ok(VarianceSequence(vars))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Decreasing,
    Increasing,
}

/// Adjacency score of the matrix whose every row equals `v`: how close
/// the variance sequence is to monotone in the given direction. The
/// default orientation elsewhere is `Decreasing` (pairs i<j with
/// v_i > v_j count).
pub fn variance_adjacency_score(
    v: &VarianceSequence,
    include_diagonal: bool,
    direction: Direction,
) -> Result<AdjScore> {
    let n = v.0.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "variance adjacency score needs n >= 2".to_string(),
        ));
    }
    let vals: Vec<f32> = v.0.iter().map(|&x| x as f32).collect();
    let row_scores: Vec<Option<f64>> = (0..n)
        .map(|k| {
            let end = if include_diagonal { k + 1 } else { k };
            ordered_pair_fraction(&vals[..end], direction == Direction::Increasing)
        })
        .collect();
    let matrix_score = mean_of_present(&row_scores)?;
    Ok(AdjScore {
        matrix_score,
        row_scores,
    })
}

/// Per-layer residual-stream adjacency scores for each token sequence.
/// Returns `scores[layer][sample]`; layer 0 is the token embeddings.
pub fn layer_adjacency_scores(model: &Model, seqs: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    layer_adjacency_scores_with(model, seqs, true)
}

/// As [`layer_adjacency_scores`], with an explicit diagonal convention.
///
/// Including the diagonal adds m-1 always-true pairs per length-m row, which
/// lifts the random-matrix baseline from 0.5 to 0.5 + mean(1/k) over row
/// lengths k (about 0.63 for 22-token inputs). Band comparisons calibrated
/// against a 0.5 chance level should pass `false` here.
pub fn layer_adjacency_scores_with(
    model: &Model,
    seqs: &[Vec<usize>],
    include_diagonal: bool,
) -> Result<Vec<Vec<f64>>> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("no input sequences".to_string()));
    }
    let n_layers = model.config.n_layers;
    let mut scores = vec![Vec::with_capacity(seqs.len()); n_layers + 1];
    for seq in seqs {
        let (_, acts) = model.forward(seq)?;
        for (layer, act) in acts.per_layer.iter().enumerate() {
            let c = cosine_sim_matrix(act)?;
            scores[layer].push(adjacency_score(&c, include_diagonal)?.matrix_score);
        }
    }
    Ok(scores)
}

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone)]
pub struct ScoreDistribution {
    pub mean: f64,
    pub std: f64,
    /// Counts over 20 uniform bins on [0,1]; 1.0 lands in the last bin.
    pub histogram: [usize; HISTOGRAM_BINS],
    pub scores: Vec<f64>,
}

pub fn summarize_scores(scores: &[f64]) -> Result<ScoreDistribution> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no scores".to_string()));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    let mut histogram = [0usize; HISTOGRAM_BINS];
    for &s in scores {
        let bin = ((s * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        histogram[bin] += 1;
    }
    Ok(ScoreDistribution {
        mean,
        std: var.sqrt(),
        histogram,
        scores: scores.to_vec(),
    })
}

/// Distribution of adjacency scores of layer-`layer` activations over the
/// first `n_samples` input sequences (layer 0 = token embeddings).
pub fn score_distribution(
    model: &Model,
    seqs: &[Vec<usize>],
    layer: usize,
    n_samples: usize,
) -> Result<ScoreDistribution> {
    if layer > model.config.n_layers {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range 0..={}",
            model.config.n_layers
        )));
    }
    if n_samples == 0 || n_samples > seqs.len() {
        return Err(Error::InvalidArgument(format!(
            "n_samples must be in 1..={}, got {n_samples}",
            seqs.len()
        )));
    }
    let per_layer = layer_adjacency_scores(model, &seqs[..n_samples])?;
    summarize_scores(&per_layer[layer])
}

#[derive(Debug, Clone, Copy)]
pub enum BandProfile {
    /// C[i][j] = 1 - |i-j|/n; adjacency score exactly 1.
    Band,
    /// Symmetric i.i.d. uniform noise (diagonal included, so the
    /// adjacency score averages ~0.5).
    Noise,
    /// Convex blend, `0.0` = pure band, `1.0` = pure noise.
    Mix(f64),
}

pub fn synthetic_banded_matrix(n: usize, profile: BandProfile, seed: u64) -> Result<SimMatrix> {
    if n < 2 {
        return Err(Error::InvalidArgument("n must be >= 2".to_string()));
    }
    let noise_weight = match profile {
        BandProfile::Band => 0.0,
        BandProfile::Noise => 1.0,
        BandProfile::Mix(w) => {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::InvalidArgument(
                    "mix weight must be in [0,1]".to_string(),
                ));
            }
            w
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0f32; n * n];
    for i in 0..n {
        for j in i..n {
            let band = 1.0 - (j - i) as f64 / n as f64;
            let noise: f64 = rng.gen_range(0.0..1.0);
            let v = ((1.0 - noise_weight) * band + noise_weight * noise) as f32;
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    SimMatrix::from_values(n, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn randn(shape: Vec<usize>, mu: f32, sigma: f32, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, mu, sigma, &mut rng)
    }

    fn tensor(rows: &[&[f32]]) -> Tensor {
        let d = rows[0].len();
        let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![rows.len(), d], data).unwrap()
    }

    #[test]
    fn cosine_orthonormal_rows_give_identity() {
        let x = tensor(&[&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[0.0, 0.0, 0.5]]);
        let c = cosine_sim_matrix(&x).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((c.get(i, j) - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cosine_identical_rows_give_all_ones() {
        let x = tensor(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        let c = cosine_sim_matrix(&x).unwrap();
        assert!(c.values().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn cosine_zero_vector_similarity_is_zero() {
        let x = tensor(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let c = cosine_sim_matrix(&x).unwrap();
        assert_eq!(c.get(0, 0), 0.0);
        assert_eq!(c.get(0, 1), 0.0);
        assert_eq!(c.get(1, 1), 1.0);
    }

    #[test]
    fn cosine_matches_brute_force_oracle() {
        let x = randn(vec![5, 8], 0.0, 1.0, 11);
        let c = cosine_sim_matrix(&x).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let (a, b) = (x.row(i), x.row(j));
                let dot: f32 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                let na: f32 = a.iter().map(|v| v * v).sum::<f32>().sqrt();
                let nb: f32 = b.iter().map(|v| v * v).sum::<f32>().sqrt();
                assert!((c.get(i, j) - dot / (na * nb)).abs() < 1e-6);
                assert!((c.get(i, j) - c.get(j, i)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn banded_matrix_scores_one() {
        let c = synthetic_banded_matrix(8, BandProfile::Band, 0).unwrap();
        let s = adjacency_score(&c, true).unwrap();
        assert_eq!(s.matrix_score, 1.0);
        let s = adjacency_score(&c, false).unwrap();
        assert_eq!(s.matrix_score, 1.0);
    }

    #[test]
    fn constant_matrix_scores_zero() {
        let c = SimMatrix::from_values(6, vec![1.0; 36]).unwrap();
        assert_eq!(adjacency_score(&c, true).unwrap().matrix_score, 0.0);
    }

    #[test]
    fn random_symmetric_matrices_score_near_half() {
        let mut total = 0.0;
        for seed in 0..100 {
            let c = synthetic_banded_matrix(32, BandProfile::Noise, seed).unwrap();
            total += adjacency_score(&c, true).unwrap().matrix_score;
        }
        let mean = total / 100.0;
        assert!((mean - 0.5).abs() <= 0.03, "mean {mean}");
    }

    #[test]
    fn mix_profile_interpolates_scores() {
        let avg = |p: BandProfile| {
            (0..20)
                .map(|s| {
                    adjacency_score(&synthetic_banded_matrix(32, p, s).unwrap(), true)
                        .unwrap()
                        .matrix_score
                })
                .sum::<f64>()
                / 20.0
        };
        let noise = avg(BandProfile::Noise);
        let mix = avg(BandProfile::Mix(0.5));
        assert!(noise < mix && mix < 1.0, "noise {noise}, mix {mix}");
    }

    #[test]
    fn adjacency_rejects_tiny_matrices() {
        let c = SimMatrix::from_values(1, vec![1.0]).unwrap();
        assert!(adjacency_score(&c, true).is_err());
    }

    #[test]
    fn row_scores_skip_short_rows() {
        let c = synthetic_banded_matrix(4, BandProfile::Band, 0).unwrap();
        let s = adjacency_score(&c, true).unwrap();
        assert!(s.row_scores[0].is_none()); // one column only
        assert!(s.row_scores[1].is_some());
        let s = adjacency_score(&c, false).unwrap();
        assert!(s.row_scores[0].is_none());
        assert!(s.row_scores[1].is_none()); // one column left of diagonal
        assert!(s.row_scores[2].is_some());
    }

    #[test]
    fn variance_sequence_examples() {
        let x = tensor(&[&[3.0, 3.0, 3.0], &[1.0, -1.0, 0.0]]);
        let v = variance_sequence(&x).unwrap();
        assert_eq!(v.0[0], 0.0);
        assert!((v.0[1] - 2.0 / 3.0).abs() < 1e-12);
        let y = tensor(&[&[1.0, -1.0]]);
        assert!((variance_sequence(&y).unwrap().0[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn variance_matches_two_pass_oracle() {
        let x = randn(vec![3, 16], 0.5, 2.0, 4);
        let v = variance_sequence(&x).unwrap();
        for i in 0..3 {
            let row = x.row(i);
            let mean: f64 = row.iter().map(|&a| a as f64).sum::<f64>() / 16.0;
            let var: f64 =
                row.iter().map(|&a| (a as f64 - mean).powi(2)).sum::<f64>() / 16.0;
            assert!((v.0[i] - var).abs() < 1e-9);
        }
    }

    #[test]
    fn variance_adjacency_monotone_extremes() {
        let dec = VarianceSequence((0..8).map(|i| 8.0 - i as f64).collect());
        let s = variance_adjacency_score(&dec, true, Direction::Decreasing).unwrap();
        assert_eq!(s.matrix_score, 1.0);
        let inc = VarianceSequence((0..8).map(|i| i as f64).collect());
        let s = variance_adjacency_score(&inc, true, Direction::Decreasing).unwrap();
        assert_eq!(s.matrix_score, 0.0);
        let s = variance_adjacency_score(&inc, true, Direction::Increasing).unwrap();
        assert_eq!(s.matrix_score, 1.0);
    }

    #[test]
    fn histogram_bins_and_moments() {
        let d = summarize_scores(&[0.0, 0.5, 1.0, 1.0]).unwrap();
        assert!((d.mean - 0.625).abs() < 1e-12);
        assert_eq!(d.histogram[0], 1);
        assert_eq!(d.histogram[10], 1);
        assert_eq!(d.histogram[19], 2);
        assert_eq!(d.histogram.iter().sum::<usize>(), 4);
        let flat = summarize_scores(&[0.3; 10]).unwrap();
        assert!(flat.std < 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn cosine_is_scale_invariant(seed in 0u64..1000, c in 0.1f32..10.0) {
            let x = randn(vec![6, 5], 0.0, 1.0, seed);
            let scaled = Tensor::new(
                vec![6, 5],
                x.data().iter().map(|&v| v * c).collect(),
            ).unwrap();
            let a = cosine_sim_matrix(&x).unwrap();
            let b = cosine_sim_matrix(&scaled).unwrap();
            for (p, q) in a.values().iter().zip(b.values()) {
                prop_assert!((p - q).abs() < 1e-5);
            }
        }

        #[test]
        fn adjacency_invariant_under_monotone_row_transform(seed in 0u64..1000) {
            let c = synthetic_banded_matrix(10, BandProfile::Mix(0.4), seed).unwrap();
            let transformed = SimMatrix::from_values(
                10,
                c.values().iter().map(|&v| (3.0 * v + 1.0).exp()).collect(),
            ).unwrap();
            let a = adjacency_score(&c, true).unwrap();
            let b = adjacency_score(&transformed, true).unwrap();
            prop_assert_eq!(a.matrix_score, b.matrix_score);
        }

        #[test]
        fn diagonal_variants_differ_by_at_most_two_over_m(seed in 0u64..1000) {
            let c = synthetic_banded_matrix(12, BandProfile::Mix(0.7), seed).unwrap();
            let with = adjacency_score(&c, true).unwrap();
            let without = adjacency_score(&c, false).unwrap();
            for k in 0..12 {
                if let (Some(a), Some(b)) = (with.row_scores[k], without.row_scores[k]) {
                    let m = (k + 1) as f64;
                    prop_assert!((a - b).abs() <= 2.0 / m + 1e-12,
                        "row {}: {} vs {}", k, a, b);
                }
            }
            prop_assert!((0.0..=1.0).contains(&with.matrix_score));
            prop_assert!((0.0..=1.0).contains(&without.matrix_score));
        }
    }
}
