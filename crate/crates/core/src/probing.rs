//! MLP probes that regress token position from frozen per-layer features
//! (full activation vectors, coordinate variance, or cosine similarity to
//! the last position), with disjoint train/test digit alphabets.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{cosine_sim_matrix, variance_sequence};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::Model;
use crate::tasks::Vocab;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeFeature {
    Embedding,
    Variance,
    CosToLast,
}

impl ProbeFeature {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeFeature::Embedding => "embedding",
            ProbeFeature::Variance => "variance",
            ProbeFeature::CosToLast => "cos_to_last",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(ProbeFeature::Embedding),
            "variance" => Ok(ProbeFeature::Variance),
            "cos_to_last" => Ok(ProbeFeature::CosToLast),
            other => Err(Error::InvalidArgument(format!(
                "unknown probe feature {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    pub feature: ProbeFeature,
    pub layer: usize,
    pub seq_len: usize,
    /// Feature rows per split; one sequence yields seq_len rows.
    pub n_train: usize,
    pub n_test: usize,
    pub hidden_dim: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn new(feature: ProbeFeature, layer: usize) -> Self {
        ProbeConfig {
            feature,
            layer,
            seq_len: 32,
            n_train: 1600,
            n_test: 1600,
            hidden_dim: 64,
            max_epochs: 2000,
            lr: 1e-3,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 {
            return Err(Error::InvalidArgument("seq_len must be >= 2".to_string()));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::InvalidArgument(
                "n_train and n_test must be >= 1".to_string(),
            ));
        }
        if self.hidden_dim == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidArgument(
                "hidden_dim and max_epochs must be >= 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Uniform random digit strings as token ids: train over digits 5-9,
/// test over 0-4, so the alphabets (and therefore all sequences) are
/// disjoint between the splits.
pub fn probe_sequences(
    vocab: &Vocab,
    cfg: &ProbeConfig,
) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = |lo: u8, n_rows: usize| -> Result<Vec<Vec<usize>>> {
        let n_seqs = n_rows.div_ceil(cfg.seq_len);
        (0..n_seqs)
            .map(|_| {
                (0..cfg.seq_len)
                    .map(|_| {
                        let c = char::from(b'0' + lo + rng.gen_range(0..5u8));
                        vocab.id_of(c).ok_or(Error::UnknownChar(c))
                    })
                    .collect()
            })
            .collect()
    };
    let train = draw(5, cfg.n_train)?;
    let test = draw(0, cfg.n_test)?;
    Ok((train, test))
}

/// Per token position of each sequence: the layer's activation vector
/// (d columns), its coordinate variance (1 column), or its cosine
/// similarity to the activation at the final position (1 column).
/// Targets are 0-based positions.
pub fn extract_probe_features(
    model: &Model,
    seqs: &[Vec<usize>],
    layer: usize,
    feature: ProbeFeature,
) -> Result<(Tensor, Vec<f64>)> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("no sequences".to_string()));
    }
    if layer > model.config.n_layers {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range 0..={}",
            model.config.n_layers
        )));
    }
    let seq_len = seqs[0].len();
    if seqs.iter().any(|s| s.len() != seq_len) {
        return Err(Error::InvalidArgument(
            "all sequences must share one length".to_string(),
        ));
    }
    let mut rows: Vec<f32> = Vec::new();
    let mut y = Vec::with_capacity(seqs.len() * seq_len);
    let mut cols = 0;
    for seq in seqs {
        let (_, acts) = model.forward(seq)?;
        let act = &acts.per_layer[layer];
        match feature {
            ProbeFeature::Embedding => {
                cols = act.last_dim();
                rows.extend_from_slice(act.data());
            }
            ProbeFeature::Variance => {
                cols = 1;
                let v = variance_sequence(act)?;
                rows.extend(v.0.iter().map(|&x| x as f32));
            }
            ProbeFeature::CosToLast => {
                cols = 1;
                let c = cosine_sim_matrix(act)?;
                let last = seq_len - 1;
                rows.extend((0..seq_len).map(|p| c.get(p, last)));
            }
        }
        y.extend((0..seq_len).map(|p| p as f64));
    }
    let x = Tensor::new(vec![seqs.len() * seq_len, cols], rows)?;
    Ok((x, y))
}

#[derive(Debug, Clone)]
pub struct ProbeData {
    pub x_train: Tensor,
    pub y_train: Vec<f64>,
    pub x_test: Tensor,
    pub y_test: Vec<f64>,
}

/// Sequence generation plus feature extraction, truncated to exactly
/// n_train/n_test rows.
pub fn build_probe_datasets(model: &Model, vocab: &Vocab, cfg: &ProbeConfig) -> Result<ProbeData> {
    let (train_seqs, test_seqs) = probe_sequences(vocab, cfg)?;
    let truncate = |x: Tensor, y: Vec<f64>, n: usize| -> Result<(Tensor, Vec<f64>)> {
        let cols = x.last_dim();
        let data = x.data()[..n * cols].to_vec();
        Ok((Tensor::new(vec![n, cols], data)?, y[..n].to_vec()))
    };
    let (x, y) = extract_probe_features(model, &train_seqs, cfg.layer, cfg.feature)?;
    let (x_train, y_train) = truncate(x, y, cfg.n_train)?;
    let (x, y) = extract_probe_features(model, &test_seqs, cfg.layer, cfg.feature)?;
    let (x_test, y_test) = truncate(x, y, cfg.n_test)?;
    Ok(ProbeData {
        x_train,
        y_train,
        x_test,
        y_test,
    })
}

/// 4 affine layers with 3 ReLUs, scalar regression head. Inputs are
/// standardized with the training-set statistics stored at fit time.
#[derive(Debug, Clone)]
pub struct Probe {
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    feat_mean: Vec<f32>,
    feat_std: Vec<f32>,
}

impl Probe {
    fn standardize(&self, x: &Tensor) -> Tensor {
        let cols = x.last_dim();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.feat_mean[i % cols]) / self.feat_std[i % cols])
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    /// Builds the graph and returns (output node, weight nodes, bias
    /// nodes) so training can read parameter gradients back.
    fn forward(
        &self,
        g: &mut Graph,
        x: Tensor,
    ) -> Result<(NodeId, Vec<NodeId>, Vec<NodeId>)> {
        let mut h = g.leaf(x);
        let mut w_nodes = Vec::new();
        let mut b_nodes = Vec::new();
        let n_layers = self.weights.len();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let wn = g.leaf(w.clone());
            let bn = g.leaf(b.clone());
            w_nodes.push(wn);
            b_nodes.push(bn);
            h = g.matmul(h, wn)?;
            h = g.add_row(h, bn)?;
            if i + 1 < n_layers {
                h = g.relu(h);
            }
        }
        Ok((h, w_nodes, b_nodes))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let (out, _, _) = self.forward(&mut g, self.standardize(x))?;
        Ok(g.value(out).data().iter().map(|&v| v as f64).collect())
    }
}

/// MSE regression with adaptive-moment updates, full-batch epochs, early
/// stop once the loss stops improving. Deterministic per seed.
pub fn train_probe(x_train: &Tensor, y_train: &[f64], cfg: &ProbeConfig) -> Result<Probe> {
    cfg.validate()?;
    let n = x_train.shape()[0];
    if n == 0 || n != y_train.len() {
        return Err(Error::InvalidArgument(
            "training rows and targets must match and be nonempty".to_string(),
        ));
    }
    let in_dim = x_train.last_dim();
    let cols = in_dim;
    let mut feat_mean = vec![0.0f32; cols];
    let mut feat_std = vec![0.0f32; cols];
    for c in 0..cols {
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for r in 0..n {
            let v = x_train.data()[r * cols + c] as f64;
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        feat_mean[c] = mean as f32;
        feat_std[c] = if var.sqrt() > 1e-12 { var.sqrt() as f32 } else { 1.0 };
    }

    let dims = [in_dim, cfg.hidden_dim, cfg.hidden_dim, cfg.hidden_dim, 1];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for i in 0..4 {
        let scale = (2.0 / dims[i] as f32).sqrt();
        weights.push(Tensor::randn(vec![dims[i], dims[i + 1]], 0.0, scale, &mut rng));
        biases.push(Tensor::zeros(vec![dims[i + 1]]));
    }
    let mut probe = Probe {
        weights,
        biases,
        feat_mean,
        feat_std,
    };

    let x_std = probe.standardize(x_train);
    let targets = Tensor::new(vec![n, 1], y_train.iter().map(|&v| v as f32).collect())?;
    let params: Vec<&Tensor> = probe.weights.iter().chain(&probe.biases).collect();
    let mut opt = crate::training::AdamW::new(&params, 0.0);
    let decayable = vec![false; 8];

    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    const PATIENCE: usize = 100;
    const MIN_DELTA: f64 = 1e-4;
    for epoch in 0..cfg.max_epochs {
        let mut g = Graph::new();
        let (out, w_nodes, b_nodes) = probe.forward(&mut g, x_std.clone())?;
        let tgt = g.leaf(targets.clone());
        let diff = g.sub(out, tgt)?;
        let sq = g.mul(diff, diff)?;
        let total = g.sum(sq);
        let loss_node = g.scale(total, 1.0 / n as f32);
        let loss = g.value(loss_node).scalar() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: epoch });
        }
        g.backward(loss_node)?;
        let grads: Vec<Vec<f32>> = w_nodes
            .iter()
            .chain(&b_nodes)
            .map(|&node| g.grad(node).to_vec())
            .collect();
        let grad_refs: Vec<&[f32]> = grads.iter().map(|v| v.as_slice()).collect();
        let mut params: Vec<&mut Tensor> =
            probe.weights.iter_mut().chain(probe.biases.iter_mut()).collect();
        opt.step(&mut params, &grad_refs, &decayable, cfg.lr)?;

        if loss < best - MIN_DELTA {
            best = loss;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= PATIENCE {
                break;
            }
        }
    }
    Ok(probe)
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub pearson_r: f64,
    pub nrmse: f64,
    /// Set when the predictions had zero variance, in which case
    /// `pearson_r` is reported as 0.
    pub degenerate_predictions: bool,
    pub predictions: Vec<f64>,
    /// Residual (prediction - target) lists grouped by true position.
    pub per_position_residuals: Vec<Vec<f64>>,
}

pub fn evaluate_predictions(
    predictions: &[f64],
    y: &[f64],
    seq_len: usize,
) -> Result<ProbeReport> {
    if predictions.is_empty() || predictions.len() != y.len() {
        return Err(Error::InvalidArgument(
            "predictions and targets must match and be nonempty".to_string(),
        ));
    }
    let n = y.len() as f64;
    let mean_p = predictions.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_p = 0.0;
    let mut var_y = 0.0;
    let mut sse = 0.0;
    for (&p, &t) in predictions.iter().zip(y) {
        cov += (p - mean_p) * (t - mean_y);
        var_p += (p - mean_p) * (p - mean_p);
        var_y += (t - mean_y) * (t - mean_y);
        sse += (p - t) * (p - t);
    }
    let degenerate = var_p <= 1e-18 * n || var_y <= 1e-18 * n;
    let pearson_r = if degenerate {
        0.0
    } else {
        cov / (var_p.sqrt() * var_y.sqrt())
    };
    let nrmse = (sse / n).sqrt() / seq_len as f64;
    let mut per_position_residuals = vec![Vec::new(); seq_len];
    for (&p, &t) in predictions.iter().zip(y) {
        let pos = (t as usize).min(seq_len - 1);
        per_position_residuals[pos].push(p - t);
    }
    Ok(ProbeReport {
        pearson_r,
        nrmse,
        degenerate_predictions: degenerate,
        predictions: predictions.to_vec(),
        per_position_residuals,
    })
}

pub fn evaluate_probe(
    probe: &Probe,
    x_test: &Tensor,
    y_test: &[f64],
    seq_len: usize,
) -> Result<ProbeReport> {
    let predictions = probe.predict(x_test)?;
    evaluate_predictions(&predictions, y_test, seq_len)
}
