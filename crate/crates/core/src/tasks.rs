//! Deterministic generators and character tokenizer for the four synthetic
//! position-sensitive tasks: Addition, Reversal, Indexing, Ordering.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const EOS_CHAR: char = '\n';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Addition,
    Reversal,
    Indexing,
    Ordering,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Addition => "addition",
            TaskKind::Reversal => "reversal",
            TaskKind::Indexing => "indexing",
            TaskKind::Ordering => "ordering",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "addition" => Ok(TaskKind::Addition),
            "reversal" => Ok(TaskKind::Reversal),
            "indexing" => Ok(TaskKind::Indexing),
            "ordering" => Ok(TaskKind::Ordering),
            other => Err(Error::InvalidArgument(format!("unknown task {other:?}"))),
        }
    }
}

/// One prompt/answer pair. `full` is what the model trains on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSample {
    pub prompt: String,
    pub answer: String,
}

impl TaskSample {
    pub fn full(&self) -> String {
        format!("{}{}{}", self.prompt, self.answer, EOS_CHAR)
    }
}

/// Task parameters. `max_operand` is the maximum operand size in digits
/// (per-operand digits for Addition, digit-string length otherwise);
/// `max_len_fraction` of samples are drawn at that maximum.
#[derive(Debug, Clone, Copy)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub max_operand: usize,
    pub max_len_fraction: f64,
}

impl TaskSpec {
    /// Full-scale task sizes: 3-digit addition, 16-digit reversal,
    /// 9-digit indexing, 5-digit ordering.
    pub fn paper(kind: TaskKind) -> Self {
        let max_operand = match kind {
            TaskKind::Addition => 3,
            TaskKind::Reversal => 16,
            TaskKind::Indexing => 9,
            TaskKind::Ordering => 5,
        };
        TaskSpec {
            kind,
            max_operand,
            max_len_fraction: 0.90,
        }
    }

    /// Desk-scale sizes that train on CPU in minutes: Reversal-8,
    /// Indexing-6, Ordering-4. Addition stays at 3 digits (the 2-digit
    /// space is too small for disjoint 5k/5k splits).
    pub fn desk(kind: TaskKind) -> Self {
        let max_operand = match kind {
            TaskKind::Addition => 3,
            TaskKind::Reversal => 8,
            TaskKind::Indexing => 6,
            TaskKind::Ordering => 4,
        };
        TaskSpec {
            kind,
            max_operand,
            max_len_fraction: 0.90,
        }
    }

    /// Longest possible prompt, derived from the prompt grammar.
    pub fn max_prompt_len(&self) -> usize {
        match self.kind {
            // "A+B="
            TaskKind::Addition => 2 * self.max_operand + 2,
            // "rev(D)="
            TaskKind::Reversal => self.max_operand + 6,
            // "wherex(D,c)="
            TaskKind::Indexing => self.max_operand + 11,
            // "order(S,P)="
            TaskKind::Ordering => 2 * self.max_operand + 9,
        }
    }

    /// Longest possible answer, before the EOS character.
    pub fn max_answer_len(&self) -> usize {
        match self.kind {
            // the sum of two max-digit operands has at most one extra digit
            TaskKind::Addition => self.max_operand + 1,
            TaskKind::Reversal | TaskKind::Ordering => self.max_operand,
            // decimal digits of the largest possible 0-based index
            TaskKind::Indexing => self.max_operand.saturating_sub(1).max(1).to_string().len(),
        }
    }

    /// Longest prompt+answer+EOS string a sample can produce.
    pub fn max_full_len(&self) -> usize {
        self.max_prompt_len() + self.max_answer_len() + 1
    }

    fn validate(&self) -> Result<()> {
        if self.max_operand == 0 {
            return Err(Error::InvalidArgument("max_operand must be > 0".to_string()));
        }
        if !(0.0..=1.0).contains(&self.max_len_fraction) {
            return Err(Error::InvalidArgument(
                "max_len_fraction must be in [0,1]".to_string(),
            ));
        }
        Ok(())
    }
}

/// Character vocabulary: digits, task punctuation, the task letters, EOS
/// and a PAD id. Ids are assigned in codepoint order so they are stable;
/// PAD takes the final id.
#[derive(Debug, Clone)]
pub struct Vocab {
    chars: Vec<char>,
    ids: [i32; 128],
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut chars: Vec<char> = vec!['\n', '(', ')', '+', ','];
        chars.extend('0'..='9');
        chars.push('=');
        chars.extend(['d', 'e', 'h', 'o', 'r', 'v', 'w', 'x']);
        chars.sort_unstable();
        let mut ids = [-1i32; 128];
        for (i, &c) in chars.iter().enumerate() {
            ids[c as usize] = i as i32;
        }
        Vocab { chars, ids }
    }

    /// Character count plus the PAD id.
    pub fn size(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn pad_id(&self) -> usize {
        self.chars.len()
    }

    pub fn eos_id(&self) -> usize {
        self.id_of(EOS_CHAR).expect("EOS is in the vocab")
    }

    pub fn id_of(&self, c: char) -> Option<usize> {
        let cp = c as usize;
        if cp < 128 && self.ids[cp] >= 0 {
            Some(self.ids[cp] as usize)
        } else {
            None
        }
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        self.chars.get(id).copied()
    }

    pub fn tokenize(&self, s: &str) -> Result<Vec<usize>> {
        s.chars()
            .map(|c| self.id_of(c).ok_or(Error::UnknownChar(c)))
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&id| {
                self.char_of(id)
                    .ok_or_else(|| Error::TokenOutOfRange { id, vocab: self.size() })
            })
            .collect()
    }

    /// One character per line in id order; EOS appears as `\n` escaped and
    /// the PAD id as `<pad>`.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for &c in &self.chars {
            if c == '\n' {
                out.push_str("\\n\n");
            } else {
                out.push(c);
                out.push('\n');
            }
        }
        out.push_str("<pad>\n");
        fs::write(path, out)?;
        Ok(())
    }
}

fn pick_len<R: Rng>(rng: &mut R, max: usize, max_fraction: f64) -> usize {
    if max == 1 || rng.gen_bool(max_fraction) {
        max
    } else {
        rng.gen_range(1..max)
    }
}

fn digit_string<R: Rng>(rng: &mut R, len: usize, pool: &[u8]) -> String {
    (0..len)
        .map(|_| char::from(b'0' + pool[rng.gen_range(0..pool.len())]))
        .collect()
}

/// "A+B=" with up to `max_operand`-digit operands; the answer is the
/// decimal sum written in reverse order, keeping any leading zeros the
/// reversal produces.
pub fn gen_addition<R: Rng>(rng: &mut R, spec: &TaskSpec) -> TaskSample {
    let max = spec.max_operand;
    let (la, lb) = if rng.gen_bool(spec.max_len_fraction) || max == 1 {
        (max, max)
    } else {
        // uniform over the remaining operand-length pairs
        loop {
            let la = rng.gen_range(1..=max);
            let lb = rng.gen_range(1..=max);
            if la != max || lb != max {
                break (la, lb);
            }
        }
    };
    let num = |rng: &mut R, len: usize| -> u64 {
        if len == 1 {
            rng.gen_range(0..10)
        } else {
            let lo = 10u64.pow(len as u32 - 1);
            rng.gen_range(lo..lo * 10)
        }
    };
    let a = num(rng, la);
    let b = num(rng, lb);
    let answer: String = (a + b).to_string().chars().rev().collect();
    TaskSample {
        prompt: format!("{a}+{b}="),
        answer,
    }
}

/// "rev(D)=" with the reversed digit string as the answer.
pub fn gen_reversal<R: Rng>(rng: &mut R, spec: &TaskSpec, pool: &[u8]) -> TaskSample {
    let len = pick_len(rng, spec.max_operand, spec.max_len_fraction);
    let d = digit_string(rng, len, pool);
    let answer: String = d.chars().rev().collect();
    TaskSample {
        prompt: format!("rev({d})="),
        answer,
    }
}

/// "wherex(D,c)=" where c occurs in D; the answer is the 0-based index of
/// the first occurrence.
pub fn gen_indexing<R: Rng>(rng: &mut R, spec: &TaskSpec, pool: &[u8]) -> TaskSample {
    let len = pick_len(rng, spec.max_operand, spec.max_len_fraction);
    let d = digit_string(rng, len, pool);
    let present: Vec<char> = {
        let mut seen = HashSet::new();
        d.chars().filter(|&c| seen.insert(c)).collect()
    };
    let c = present[rng.gen_range(0..present.len())];
    let index = d.chars().position(|x| x == c).expect("c drawn from D");
    TaskSample {
        prompt: format!("wherex({d},{c})="),
        answer: index.to_string(),
    }
}

/// "order(S,P)=" where P permutes the distinct-digit string S; answer[i]
/// is the index in S of digit P[i].
pub fn gen_ordering<R: Rng>(rng: &mut R, spec: &TaskSpec, pool: &[u8]) -> Result<TaskSample> {
    let distinct: Vec<u8> = {
        let mut v = pool.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    if distinct.len() < spec.max_operand {
        return Err(Error::InvalidArgument(format!(
            "ordering needs {} distinct digits, pool has {}",
            spec.max_operand,
            distinct.len()
        )));
    }
    let len = pick_len(rng, spec.max_operand, spec.max_len_fraction);
    let mut digits = distinct;
    digits.shuffle(rng);
    digits.truncate(len);
    let s: String = digits.iter().map(|&d| char::from(b'0' + d)).collect();
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(rng);
    let p: String = perm.iter().map(|&i| s.as_bytes()[i] as char).collect();
    let answer: String = p
        .chars()
        .map(|c| {
            let idx = s.chars().position(|x| x == c).expect("P permutes S");
            char::from(b'0' + idx as u8)
        })
        .collect();
    Ok(TaskSample {
        prompt: format!("order({s},{p})="),
        answer,
    })
}

pub fn gen_sample<R: Rng>(rng: &mut R, spec: &TaskSpec, pool: &[u8]) -> Result<TaskSample> {
    match spec.kind {
        TaskKind::Addition => Ok(gen_addition(rng, spec)),
        TaskKind::Reversal => Ok(gen_reversal(rng, spec, pool)),
        TaskKind::Indexing => Ok(gen_indexing(rng, spec, pool)),
        TaskKind::Ordering => gen_ordering(rng, spec, pool),
    }
}

pub const ALL_DIGITS: [u8; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub samples: Vec<TaskSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// One `full` sample per line (EOS doubles as the line terminator).
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&s.full());
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read_file(spec: TaskSpec, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut samples = Vec::new();
        for line in text.lines() {
            let eq = line
                .rfind('=')
                .ok_or_else(|| Error::Format(format!("no '=' in sample {line:?}")))?;
            samples.push(TaskSample {
                prompt: line[..=eq].to_string(),
                answer: line[eq + 1..].to_string(),
            });
        }
        Ok(Dataset { spec, samples })
    }
}

/// `n` prompt-unique samples, deterministic per seed, digits restricted to
/// `digit_pool` where the task permits.
pub fn build_dataset(spec: &TaskSpec, n: usize, seed: u64, digit_pool: &[u8]) -> Result<Dataset> {
    build_dataset_excluding(spec, n, seed, digit_pool, &HashSet::new())
}

fn build_dataset_excluding(
    spec: &TaskSpec,
    n: usize,
    seed: u64,
    digit_pool: &[u8],
    exclude: &HashSet<String>,
) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be >= 1".to_string()));
    }
    if digit_pool.is_empty() || digit_pool.iter().any(|&d| d > 9) {
        return Err(Error::InvalidArgument(
            "digit pool must be nonempty digits 0-9".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut samples = Vec::with_capacity(n);
    let mut attempts = 0usize;
    let max_attempts = n.saturating_mul(1000).max(100_000);
    while samples.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::InvalidArgument(format!(
                "could not draw {n} unique {} prompts (space too small?)",
                spec.kind.as_str()
            )));
        }
        let s = gen_sample(&mut rng, spec, digit_pool)?;
        if exclude.contains(&s.prompt) || !seen.insert(s.prompt.clone()) {
            continue;
        }
        debug_assert!(s.prompt.len() <= spec.max_prompt_len());
        samples.push(s);
    }
    Ok(Dataset {
        spec: *spec,
        samples,
    })
}

/// Train/test splits with zero prompt collisions: the test stream uses a
/// disjoint seed and filters out every train prompt.
pub fn build_splits(
    spec: &TaskSpec,
    n_train: usize,
    n_test: usize,
    seed: u64,
    digit_pool: &[u8],
) -> Result<(Dataset, Dataset)> {
    let train = build_dataset(spec, n_train, seed, digit_pool)?;
    let train_prompts: HashSet<String> =
        train.samples.iter().map(|s| s.prompt.clone()).collect();
    let test = build_dataset_excluding(
        spec,
        n_test,
        seed.wrapping_add(0x9e3779b97f4a7c15),
        digit_pool,
        &train_prompts,
    )?;
    Ok((train, test))
}

/// Independent recomputation of the expected answer, used as the oracle
/// against every generated sample.
pub fn reference_answer(kind: TaskKind, prompt: &str) -> Option<String> {
    let body = prompt.strip_suffix('=')?;
    match kind {
        TaskKind::Addition => {
            let (a, b) = body.split_once('+')?;
            let sum = a.parse::<u64>().ok()? + b.parse::<u64>().ok()?;
            Some(sum.to_string().chars().rev().collect())
        }
        TaskKind::Reversal => {
            let d = body.strip_prefix("rev(")?.strip_suffix(')')?;
            Some(d.chars().rev().collect())
        }
        TaskKind::Indexing => {
            let inner = body.strip_prefix("wherex(")?.strip_suffix(')')?;
            let (d, c) = inner.rsplit_once(',')?;
            let target = c.chars().next()?;
            d.chars().position(|x| x == target).map(|i| i.to_string())
        }
        TaskKind::Ordering => {
            let inner = body.strip_prefix("order(")?.strip_suffix(')')?;
            let (s, p) = inner.split_once(',')?;
            p.chars()
                .map(|c| {
                    s.chars()
                        .position(|x| x == c)
                        .map(|i| char::from(b'0' + i as u8))
                })
                .collect()
        }
    }
}
