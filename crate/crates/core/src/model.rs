//! Decoder-only transformer in two variants: Causal-NoPE (causal attention,
//! no positional encodings) and a non-causal control with learned absolute
//! positional embeddings. Pre-LN blocks, GELU MLP of width 4*d_model, weight
//! tying between the token embedding and the LM head.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{AttnMask, Graph, NodeId};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CNPE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Causal attention, no positional encodings of any kind.
    CausalNope,
    /// Full (non-causal) attention with learned absolute positional
    /// embeddings added to the token embeddings.
    NoncausalApe,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::CausalNope => "causal_nope",
            Variant::NoncausalApe => "noncausal_ape",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "causal_nope" => Ok(Variant::CausalNope),
            "noncausal_ape" => Ok(Variant::NoncausalApe),
            other => Err(Error::InvalidArgument(format!("unknown variant {other:?}"))),
        }
    }
}

/// Initialization scheme: entries drawn i.i.d. from N(mu, sigma^2).
///
/// The scheme governs the input pathway of the network: the token-embedding
/// table (plus the positional-embedding table for the `noncausal_ape`
/// variant) and the attention query/key projections, i.e. every weight whose
/// scale shapes the attention pattern without rescaling the residual-stream
/// updates themselves. Value/output projections and the MLP matrices always
/// use N(0, WEIGHT_STD): their scale multiplies the magnitude of each block's
/// residual update, so folding them into the sweep would conflate "how are
/// embeddings and attention initialized" with "how strong is the mixing".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitScheme {
    pub mu: f32,
    pub sigma: f32,
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme {
            mu: 0.0,
            sigma: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub variant: Variant,
    pub init: InitScheme,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            return Err(Error::InvalidArgument("n_layers must be >= 1".to_string()));
        }
        if self.max_seq_len < 2 {
            return Err(Error::InvalidArgument(
                "max_seq_len must be >= 2".to_string(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.init.sigma <= 0.0 {
            return Err(Error::InvalidArgument("sigma_init must be > 0".to_string()));
        }
        Ok(())
    }

    /// Desk-scale default: 4 layers, 128 dims, head dim 64.
    pub fn desk(vocab_size: usize, max_seq_len: usize) -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: heads_for_dim(128),
            vocab_size,
            max_seq_len,
            variant: Variant::CausalNope,
            init: InitScheme::default(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Head count keeping head dim 64 (192 -> 3 heads, 384 -> 6, 768 -> 12).
pub fn heads_for_dim(d_model: usize) -> usize {
    (d_model / 64).max(1)
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

/// Learnable weights. The LM head is the token embedding transposed, so the
/// two share one tensor by construction.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub tok_emb: Tensor,
    /// Present only for the non-causal control variant.
    pub pos_emb: Option<Tensor>,
    pub blocks: Vec<BlockParams>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
}

impl ModelParams {
    /// Flat views in the declared checkpoint order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_emb];
        if let Some(p) = &self.pos_emb {
            out.push(p);
        }
        for b in &self.blocks {
            out.extend([
                &b.ln1_gain, &b.ln1_bias, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_gain, &b.ln2_bias,
                &b.w1, &b.w2,
            ]);
        }
        out.push(&self.lnf_gain);
        out.push(&self.lnf_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb];
        if let Some(p) = &mut self.pos_emb {
            out.push(p);
        }
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.w1,
                &mut b.w2,
            ]);
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out
    }

    /// True for 2-d weight matrices (weight decay applies), false for
    /// layer-norm gains/biases.
    pub fn is_decayable(&self) -> Vec<bool> {
        self.tensors().iter().map(|t| t.rank() == 2).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}

/// Per-layer residual-stream activations for one input sequence.
/// Index 0 is the embedding-stage output, index l >= 1 the stream after
/// block l.
#[derive(Debug, Clone)]
pub struct LayerActivations {
    pub per_layer: Vec<Tensor>,
}

impl LayerActivations {
    pub fn n_layers(&self) -> usize {
        self.per_layer.len() - 1
    }

    pub fn layer(&self, l: usize) -> &Tensor {
        &self.per_layer[l]
    }
}

/// Config plus weights; the unit every operation below works on.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Standard deviation for the weights outside the [`InitScheme`]: value and
/// output projections and the MLP matrices.
pub const WEIGHT_STD: f32 = 0.02;

/// Deterministic seeded init. Embeddings and query/key projections are i.i.d.
/// N(mu_init, sigma_init^2), the remaining matrices N(0, WEIGHT_STD^2);
/// layer-norm gains start at 1, biases at 0.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, mu, sigma) = (config.d_model, config.init.mu, config.init.sigma);
    let tok_emb = Tensor::randn(vec![config.vocab_size, d], mu, sigma, &mut rng);
    let pos_emb = match config.variant {
        Variant::NoncausalApe => Some(Tensor::randn(vec![config.max_seq_len, d], mu, sigma, &mut rng)),
        Variant::CausalNope => None,
    };
    let mut blocks = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        blocks.push(BlockParams {
            ln1_gain: Tensor::full(vec![d], 1.0),
            ln1_bias: Tensor::zeros(vec![d]),
            wq: Tensor::randn(vec![d, d], mu, sigma, &mut rng),
            wk: Tensor::randn(vec![d, d], mu, sigma, &mut rng),
            wv: Tensor::randn(vec![d, d], 0.0, WEIGHT_STD, &mut rng),
            wo: Tensor::randn(vec![d, d], 0.0, WEIGHT_STD, &mut rng),
            ln2_gain: Tensor::full(vec![d], 1.0),
            ln2_bias: Tensor::zeros(vec![d]),
            w1: Tensor::randn(vec![d, 4 * d], 0.0, WEIGHT_STD, &mut rng),
            w2: Tensor::randn(vec![4 * d, d], 0.0, WEIGHT_STD, &mut rng),
        });
    }
    Ok(ModelParams {
        tok_emb,
        pos_emb,
        blocks,
        lnf_gain: Tensor::full(vec![d], 1.0),
        lnf_bias: Tensor::zeros(vec![d]),
    })
}

/// A built forward graph over a (padded) batch, with handles for training.
pub struct BatchForward {
    pub graph: Graph,
    /// Logits over every position, shape [batch*seq, vocab].
    pub logits: NodeId,
    /// Leaf node per parameter tensor, in `ModelParams::tensors` order.
    pub param_nodes: Vec<NodeId>,
    /// Residual stream after embedding and after each block, [batch*seq, d].
    pub act_nodes: Vec<NodeId>,
}

/// Runs the transformer over `batch` sequences padded to equal length.
/// `valid_lens` masks attention onto padding for the non-causal variant;
/// for causal attention padding sits in the future of every real token and
/// needs no mask.
pub fn forward_batch(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &[Vec<usize>],
    pad_id: usize,
) -> Result<BatchForward> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".to_string()));
    }
    let seq = batch.iter().map(|s| s.len()).max().unwrap();
    if seq > config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: seq,
            max: config.max_seq_len,
        });
    }
    for s in batch {
        if let Some(&id) = s.iter().find(|&&id| id >= config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: config.vocab_size,
            });
        }
    }
    let bsz = batch.len();
    let d = config.d_model;
    let mut ids = Vec::with_capacity(bsz * seq);
    let mut valid_lens = Vec::with_capacity(bsz);
    for s in batch {
        valid_lens.push(s.len());
        ids.extend_from_slice(s);
        ids.extend(std::iter::repeat(pad_id).take(seq - s.len()));
    }

    let mut g = Graph::new();
    let mut param_nodes = Vec::new();
    let leaf = |g: &mut Graph, t: &Tensor, nodes: &mut Vec<NodeId>| {
        let id = g.leaf(t.clone());
        nodes.push(id);
        id
    };

    let emb_node = leaf(&mut g, &params.tok_emb, &mut param_nodes);
    let pos_node = params
        .pos_emb
        .as_ref()
        .map(|p| leaf(&mut g, p, &mut param_nodes));
    let block_nodes: Vec<[NodeId; 10]> = params
        .blocks
        .iter()
        .map(|b| {
            [
                leaf(&mut g, &b.ln1_gain, &mut param_nodes),
                leaf(&mut g, &b.ln1_bias, &mut param_nodes),
                leaf(&mut g, &b.wq, &mut param_nodes),
                leaf(&mut g, &b.wk, &mut param_nodes),
                leaf(&mut g, &b.wv, &mut param_nodes),
                leaf(&mut g, &b.wo, &mut param_nodes),
                leaf(&mut g, &b.ln2_gain, &mut param_nodes),
                leaf(&mut g, &b.ln2_bias, &mut param_nodes),
                leaf(&mut g, &b.w1, &mut param_nodes),
                leaf(&mut g, &b.w2, &mut param_nodes),
            ]
        })
        .collect();
    let lnf_gain = leaf(&mut g, &params.lnf_gain, &mut param_nodes);
    let lnf_bias = leaf(&mut g, &params.lnf_bias, &mut param_nodes);

    // Embedding stage.
    let mut x = g.embedding(emb_node, &ids)?; // [B*L, d]
    if let Some(pn) = pos_node {
        // Learned APE for positions 0..seq, tiled over the batch as a
        // row gather so gradients flow back into the table.
        let pos_ids: Vec<usize> = (0..bsz * seq).map(|i| i % seq).collect();
        let pos_rows = g.embedding(pn, &pos_ids)?;
        x = g.add(x, pos_rows)?;
    }

    let mask = match config.variant {
        Variant::CausalNope => AttnMask::causal(),
        Variant::NoncausalApe => AttnMask {
            causal: false,
            valid_lens: Some(valid_lens),
        },
    };

    let mut act_nodes = vec![x];
    let n_heads = config.n_heads;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    for bn in &block_nodes {
        let [ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, w2] = *bn;
        // x += MHA(LN(x))
        let ln1 = g.layer_norm(x, ln1_g, ln1_b)?;
        let q = g.matmul(ln1, wq)?;
        let k = g.matmul(ln1, wk)?;
        let v = g.matmul(ln1, wv)?;
        let q3 = g.reshape(q, vec![bsz, seq, d])?;
        let k3 = g.reshape(k, vec![bsz, seq, d])?;
        let v3 = g.reshape(v, vec![bsz, seq, d])?;
        let mut head_outs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = g.slice_last(q3, h * dh, dh)?;
            let kh = g.slice_last(k3, h * dh, dh)?;
            let vh = g.slice_last(v3, h * dh, dh)?;
            let kht = g.transpose_last(kh)?;
            let scores = g.bmm(qh, kht)?;
            let scaled = g.scale(scores, scale);
            let att = g.softmax_rows(scaled, Some(mask.clone()))?;
            head_outs.push(g.bmm(att, vh)?);
        }
        let cat = g.concat_last(&head_outs)?;
        let cat2 = g.reshape(cat, vec![bsz * seq, d])?;
        let proj = g.matmul(cat2, wo)?;
        x = g.add(x, proj)?;
        // x += MLP(LN(x))
        let ln2 = g.layer_norm(x, ln2_g, ln2_b)?;
        let h1 = g.matmul(ln2, w1)?;
        let act = g.gelu(h1);
        let h2 = g.matmul(act, w2)?;
        x = g.add(x, h2)?;
        act_nodes.push(x);
    }

    let xf = g.layer_norm(x, lnf_gain, lnf_bias)?;
    let emb_t = g.transpose_last(emb_node)?;
    let logits = g.matmul(xf, emb_t)?;

    Ok(BatchForward {
        graph: g,
        logits,
        param_nodes,
        act_nodes,
    })
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_model(&config, seed)?;
        Ok(Model { config, params })
    }

    /// Single-sequence forward returning logits [seq, vocab] and the
    /// residual-stream activations of every layer.
    pub fn forward(&self, tokens: &[usize]) -> Result<(Tensor, LayerActivations)> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".to_string()));
        }
        let fwd = forward_batch(&self.params, &self.config, &[tokens.to_vec()], 0)?;
        let logits = fwd.graph.value(fwd.logits).clone();
        let per_layer = fwd
            .act_nodes
            .iter()
            .map(|&n| fwd.graph.value(n).clone())
            .collect();
        Ok((logits, LayerActivations { per_layer }))
    }

    /// Greedy argmax decoding; stops at `eos` or after `max_new` tokens.
    pub fn generate(&self, prompt: &[usize], max_new: usize, eos: usize) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("empty prompt".to_string()));
        }
        let mut tokens = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if tokens.len() >= self.config.max_seq_len {
                break;
            }
            let (logits, _) = self.forward(&tokens)?;
            let last = logits.row(logits.shape()[0] - 1);
            let next = argmax(last);
            out.push(next);
            if next == eos {
                break;
            }
            tokens.push(next);
        }
        Ok(out)
    }

    /// Applies a prefix permutation (which must fix the last position) and
    /// reports whether the last-position logits were invariant within 1e-5.
    pub fn permutation_equivariance_check(
        &self,
        tokens: &[usize],
        permutation: &[usize],
    ) -> Result<bool> {
        let n = tokens.len();
        if permutation.len() != n {
            return Err(Error::InvalidArgument(
                "permutation length must match sequence".to_string(),
            ));
        }
        let mut seen = vec![false; n];
        for &p in permutation {
            if p >= n || seen[p] {
                return Err(Error::InvalidArgument("not a permutation".to_string()));
            }
            seen[p] = true;
        }
        if permutation[n - 1] != n - 1 {
            return Err(Error::InvalidArgument(
                "permutation must fix the last token".to_string(),
            ));
        }
        let permuted: Vec<usize> = permutation.iter().map(|&p| tokens[p]).collect();
        let (base, _) = self.forward(tokens)?;
        let (perm, _) = self.forward(&permuted)?;
        let last = base.shape()[0] - 1;
        let max_diff = base
            .row(last)
            .iter()
            .zip(perm.row(last))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        Ok(max_diff <= 1e-5)
    }

    /// Same model with the positional embedding zeroed (control-variant
    /// permutation-invariance experiments).
    pub fn with_zeroed_ape(&self) -> Model {
        let mut m = self.clone();
        if let Some(p) = &mut m.params.pos_emb {
            *p = Tensor::zeros(p.shape().to_vec());
        }
        m
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let cfg = format!(
            "n_layers={}\nd_model={}\nn_heads={}\nvocab_size={}\nmax_seq_len={}\nvariant={}\nmu_init={}\nsigma_init={}\n",
            self.config.n_layers,
            self.config.d_model,
            self.config.n_heads,
            self.config.vocab_size,
            self.config.max_seq_len,
            self.config.variant.as_str(),
            self.config.init.mu,
            self.config.init.sigma,
        );
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(cfg.as_bytes())?;
        for t in self.params.tensors() {
            t.write_to(&mut w)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".to_string()));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let version = u32::from_le_bytes(buf4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        r.read_exact(&mut buf4)?;
        let cfg_len = u32::from_le_bytes(buf4) as usize;
        let mut cfg_bytes = vec![0u8; cfg_len];
        r.read_exact(&mut cfg_bytes)?;
        let cfg_text = String::from_utf8(cfg_bytes)
            .map_err(|_| Error::Format("config record is not UTF-8".to_string()))?;
        let get = |key: &str| -> Result<String> {
            cfg_text
                .lines()
                .find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_string))
                .ok_or_else(|| Error::Format(format!("missing config key {key}")))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::Format(format!("bad value for {key}")))
        };
        let parse_f32 = |key: &str| -> Result<f32> {
            get(key)?
                .parse()
                .map_err(|_| Error::Format(format!("bad value for {key}")))
        };
        let config = ModelConfig {
            n_layers: parse_usize("n_layers")?,
            d_model: parse_usize("d_model")?,
            n_heads: parse_usize("n_heads")?,
            vocab_size: parse_usize("vocab_size")?,
            max_seq_len: parse_usize("max_seq_len")?,
            variant: Variant::parse(&get("variant")?)?,
            init: InitScheme {
                mu: parse_f32("mu_init")?,
                sigma: parse_f32("sigma_init")?,
            },
        };
        config.validate()?;
        let mut params = init_model(&config, 0)?;
        for t in params.tensors_mut() {
            let loaded = Tensor::read_from(&mut r)?;
            if loaded.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor shape {:?} does not match config shape {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded;
        }
        Ok(Model { config, params })
    }
}

pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
