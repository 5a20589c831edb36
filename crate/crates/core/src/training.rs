//! AdamW training loop for the task models, with next-token cross-entropy
//! masked to the answer+EOS positions, and exact-match evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{forward_batch, Model};
use crate::tasks::{Dataset, Vocab};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrDecay {
    Cosine,
    None,
}

impl LrDecay {
    pub fn as_str(&self) -> &'static str {
        match self {
            LrDecay::Cosine => "cosine",
            LrDecay::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(LrDecay::Cosine),
            "none" => Ok(LrDecay::None),
            other => Err(Error::InvalidArgument(format!(
                "unknown lr_decay {other:?} (expected cosine|none)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub lr_decay: LrDecay,
    pub weight_decay: f64,
    pub eval_every: usize,
    pub target_accuracy: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            max_steps: 8000,
            lr: 1e-3,
            warmup_steps: 200,
            lr_decay: LrDecay::Cosine,
            weight_decay: 0.1,
            eval_every: 250,
            target_accuracy: 0.90,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".to_string()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidArgument("max_steps must be >= 1".to_string()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidArgument("eval_every must be >= 1".to_string()));
        }
        if !(self.target_accuracy > 0.0 && self.target_accuracy <= 1.0) {
            return Err(Error::InvalidArgument(
                "target_accuracy must be in (0,1]".to_string(),
            ));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidArgument("lr must be finite and >= 0".to_string()));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(
                "weight_decay must be finite and >= 0".to_string(),
            ));
        }
        Ok(())
    }

    /// Applies `key=value` overrides on top of the current values.
    /// Blank lines and `#` comments are ignored; unknown keys are errors.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("line {}: expected key=value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: String| Error::Format(format!("line {}: {e}", lineno + 1));
            let num = |v: &str| v.parse::<f64>().map_err(|e| bad(e.to_string()));
            let int = |v: &str| v.parse::<usize>().map_err(|e| bad(e.to_string()));
            match key {
                "batch_size" => self.batch_size = int(value)?,
                "max_steps" => self.max_steps = int(value)?,
                "lr" => self.lr = num(value)?,
                "warmup_steps" => self.warmup_steps = int(value)?,
                "lr_decay" => self.lr_decay = LrDecay::parse(value)?,
                "weight_decay" => self.weight_decay = num(value)?,
                "eval_every" => self.eval_every = int(value)?,
                "target_accuracy" => self.target_accuracy = num(value)?,
                "seed" => self.seed = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        self.validate()
    }

    pub fn from_kv_file(path: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_kv(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Linear warmup from zero, then optional cosine decay to zero over the
    /// remaining steps.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.lr_decay {
            LrDecay::None => self.lr,
            LrDecay::Cosine => {
                let span = self.max_steps.saturating_sub(self.warmup_steps).max(1);
                let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Decoupled-weight-decay Adam. Decay is applied only to the tensors the
/// caller marks decayable (rank-2 matrices); moment state is kept per
/// parameter tensor in the order given at construction.
pub struct AdamW {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(params: &[&Tensor], weight_decay: f64) -> Self {
        AdamW {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[&[f32]],
        decayable: &[bool],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(
                "optimizer state does not match parameter count".to_string(),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i];
            if g.len() != p.numel() {
                return Err(Error::InvalidArgument(
                    "gradient length does not match parameter".to_string(),
                ));
            }
            let wd = if decayable[i] { self.weight_decay } else { 0.0 };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] as f64;
                m[j] = (self.beta1 * m[j] as f64 + (1.0 - self.beta1) * gj) as f32;
                v[j] = (self.beta2 * v[j] as f64 + (1.0 - self.beta2) * gj * gj) as f32;
                let mhat = m[j] as f64 / bc1;
                let vhat = v[j] as f64 / bc2;
                let mut wj = *w as f64;
                wj -= lr * wd * wj;
                wj -= lr * mhat / (vhat.sqrt() + self.eps);
                *w = wj as f32;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// (step, train loss at that step, test accuracy) at each evaluation.
    pub history: Vec<(usize, f64, f64)>,
    /// Per-step training losses, index = step.
    pub losses: Vec<f64>,
    pub final_accuracy: f64,
    pub steps_run: usize,
    pub wall_time_secs: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step,loss,accuracy\n");
        for &(step, loss, acc) in &self.history {
            out.push_str(&format!("{step},{loss},{acc}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }
}

struct Encoded {
    /// Inputs: all tokens of `full` except the last.
    input: Vec<usize>,
    /// Next-token targets aligned with `input`; prompt positions (other
    /// than the one predicting the first answer token) carry IGNORE.
    targets: Vec<i64>,
}

const IGNORE: i64 = -1;

fn encode_dataset(ds: &Dataset, vocab: &Vocab) -> Result<Vec<Encoded>> {
    ds.samples
        .iter()
        .map(|s| {
            let tokens = vocab.tokenize(&s.full())?;
            let prompt_len = s.prompt.chars().count();
            if tokens.len() < prompt_len + 2 {
                return Err(Error::Format(format!("sample too short: {:?}", s.prompt)));
            }
            let input = tokens[..tokens.len() - 1].to_vec();
            let targets = (0..input.len())
                .map(|i| {
                    if i + 1 >= prompt_len {
                        tokens[i + 1] as i64
                    } else {
                        IGNORE
                    }
                })
                .collect();
            Ok(Encoded { input, targets })
        })
        .collect()
}

/// Trains in place; stops when test accuracy reaches the target or at
/// `max_steps`. Deterministic for a fixed seed. Aborts with a diagnostic
/// if the loss goes non-finite.
pub fn train(
    model: &mut Model,
    train_ds: &Dataset,
    test_ds: &Dataset,
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_ds.is_empty() || test_ds.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".to_string()));
    }
    let start = Instant::now();
    let encoded = encode_dataset(train_ds, vocab)?;
    let pad_id = vocab.pad_id();
    let mut opt = AdamW::new(&model.params.tensors(), cfg.weight_decay);
    let decayable = model.params.is_decayable();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let eval_n = test_ds.len().min(512);
    let mut history = Vec::new();
    let mut losses = Vec::with_capacity(cfg.max_steps);
    let mut final_accuracy = 0.0;
    let mut steps_run = 0;

    for step in 0..cfg.max_steps {
        let batch: Vec<&Encoded> = (0..cfg.batch_size)
            .map(|_| &encoded[rng.gen_range(0..encoded.len())])
            .collect();
        let max_len = batch.iter().map(|e| e.input.len()).max().unwrap();
        let inputs: Vec<Vec<usize>> = batch.iter().map(|e| e.input.clone()).collect();
        let mut targets = Vec::with_capacity(batch.len() * max_len);
        for e in &batch {
            targets.extend_from_slice(&e.targets);
            targets.extend(std::iter::repeat(IGNORE).take(max_len - e.targets.len()));
        }

        let mut fwd = forward_batch(&model.params, &model.config, &inputs, pad_id)?;
        let loss_node = fwd.graph.cross_entropy(fwd.logits, &targets, IGNORE)?;
        let loss = fwd.graph.value(loss_node).scalar() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        losses.push(loss);
        fwd.graph.backward(loss_node)?;

        let grads: Vec<&[f32]> = fwd
            .param_nodes
            .iter()
            .map(|&n| fwd.graph.grad(n))
            .collect();
        let mut params = model.params.tensors_mut();
        opt.step(&mut params, &grads, &decayable, cfg.lr_at(step))?;
        steps_run = step + 1;

        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.max_steps {
            let acc = evaluate_accuracy(model, vocab, test_ds, eval_n)?;
            eprintln!(
                "step {:>5}: loss {loss:.4}, test accuracy {acc:.3} ({:.0}s)",
                step + 1,
                start.elapsed().as_secs_f64()
            );
            history.push((step + 1, loss, acc));
            final_accuracy = acc;
            if acc >= cfg.target_accuracy {
                break;
            }
        }
    }

    Ok(TrainReport {
        history,
        losses,
        final_accuracy,
        steps_run,
        wall_time_secs: start.elapsed().as_secs_f64(),
        checkpoint: None,
    })
}

/// Fraction of the first `n` samples whose greedy completion equals
/// answer+EOS exactly.
///
/// Computed teacher-forced in batches: greedy decoding reproduces the
/// reference continuation if and only if the argmax at every answer+EOS
/// position matches the reference token (the decode follows the reference
/// prefix up to the first mismatch, where it emits a different token).
pub fn evaluate_accuracy(model: &Model, vocab: &Vocab, ds: &Dataset, n: usize) -> Result<f64> {
    if n == 0 || n > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "n must be in 1..={}, got {n}",
            ds.len()
        )));
    }
    let subset = Dataset {
        spec: ds.spec,
        samples: ds.samples[..n].to_vec(),
    };
    let encoded = encode_dataset(&subset, vocab)?;
    let pad_id = vocab.pad_id();
    let mut correct = 0usize;
    for chunk in encoded.chunks(64) {
        let inputs: Vec<Vec<usize>> = chunk.iter().map(|e| e.input.clone()).collect();
        let max_len = inputs.iter().map(|v| v.len()).max().unwrap();
        let fwd = forward_batch(&model.params, &model.config, &inputs, pad_id)?;
        let logits = fwd.graph.value(fwd.logits);
        let vocab_size = logits.last_dim();
        for (b, e) in chunk.iter().enumerate() {
            let ok = e.targets.iter().enumerate().all(|(i, &t)| {
                if t == IGNORE {
                    return true;
                }
                let row = logits.row(b * max_len + i);
                argmax(&row[..vocab_size]) == t as usize
            });
            if ok {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / n as f64)
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
