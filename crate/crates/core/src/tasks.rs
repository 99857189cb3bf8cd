//! Synthetic retrieval tasks: dense key-value retrieval, multi-value
//! retrieval with distraction filler, and needle-in-a-haystack probes.
//!
//! Keys, values and filler come from disjoint token ranges so a value token
//! can only be produced by actually retrieving it. Every sample is
//! `ctx = [BOS, ..., QUERY]` followed by `ans = [probe_key, gold values...]`;
//! the probe key is teacher-forced and the gold values are what gets scored.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const QUERY: usize = 2;
pub const SPECIAL_TOKENS: usize = 3;

/// Disjoint token ranges carved out of a vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub keys: (usize, usize),
    pub values: (usize, usize),
    pub filler: (usize, usize),
}

impl TokenLayout {
    /// A quarter of the non-special ids for keys, a quarter for values, the
    /// rest for filler.
    pub fn for_vocab(vocab: usize) -> Result<Self> {
        let free = vocab.saturating_sub(SPECIAL_TOKENS);
        let q = free / 4;
        if q < 1 {
            return Err(invalid(format!("vocabulary of {vocab} is too small for task layout")));
        }
        let k0 = SPECIAL_TOKENS;
        let v0 = k0 + q;
        let f0 = v0 + q;
        Ok(Self {
            keys: (k0, v0),
            values: (v0, f0),
            filler: (f0, vocab),
        })
    }

    pub fn n_keys(&self) -> usize {
        self.keys.1 - self.keys.0
    }

    pub fn n_values(&self) -> usize {
        self.values.1 - self.values.0
    }

    pub fn is_key(&self, t: usize) -> bool {
        (self.keys.0..self.keys.1).contains(&t)
    }

    pub fn is_value(&self, t: usize) -> bool {
        (self.values.0..self.values.1).contains(&t)
    }

    pub fn is_filler(&self, t: usize) -> bool {
        (self.filler.0..self.filler.1).contains(&t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    DenseRetrieval,
    MultiValue,
    NiahEval,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::DenseRetrieval => "dense_retrieval",
            TaskKind::MultiValue => "multi_value",
            TaskKind::NiahEval => "niah_eval",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dense_retrieval" | "dense" => Ok(TaskKind::DenseRetrieval),
            "multi_value" | "multi" => Ok(TaskKind::MultiValue),
            "niah_eval" | "niah" => Ok(TaskKind::NiahEval),
            other => Err(invalid(format!("unknown task kind {other:?}"))),
        }
    }
}

/// Generator parameters. `n_pairs == 0` derives the pair (or needle) count
/// from `seq_len`. Output length is always exactly `seq_len`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n_pairs: usize,
    pub values_per_key: usize,
    pub filler_ratio: f64,
    pub seq_len: usize,
    /// Fixed needle depth in `[0, 1]` for niah; random when absent.
    #[serde(default)]
    pub depth: Option<f64>,
    pub seed: u64,
}

impl TaskSpec {
    pub fn dense(seq_len: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::DenseRetrieval,
            n_pairs: 0,
            values_per_key: 1,
            filler_ratio: 0.0,
            seq_len,
            depth: None,
            seed,
        }
    }

    pub fn multi_value(seq_len: usize, values_per_key: usize, filler_ratio: f64, seed: u64) -> Self {
        Self {
            kind: TaskKind::MultiValue,
            n_pairs: 0,
            values_per_key,
            filler_ratio,
            seq_len,
            depth: None,
            seed,
        }
    }

    pub fn niah(seq_len: usize, n_needles: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::NiahEval,
            n_pairs: n_needles,
            values_per_key: 1,
            filler_ratio: 1.0,
            seq_len,
            depth: None,
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    pub kind: TaskKind,
    pub ctx_tokens: Vec<usize>,
    pub ans_tokens: Vec<usize>,
    pub query_key: usize,
    pub gold_values: Vec<usize>,
}

impl TaskSample {
    pub fn tokens(&self) -> Vec<usize> {
        let mut t = self.ctx_tokens.clone();
        t.extend_from_slice(&self.ans_tokens);
        t
    }

    pub fn len(&self) -> usize {
        self.ctx_tokens.len() + self.ans_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(position, target)` pairs of the gold value predictions within
    /// `tokens()`: each answer position predicts the following answer token.
    pub fn answer_targets(&self) -> Vec<(usize, usize)> {
        let n_ctx = self.ctx_tokens.len();
        (0..self.ans_tokens.len().saturating_sub(1))
            .map(|i| (n_ctx + i, self.ans_tokens[i + 1]))
            .collect()
    }
}

pub fn generate(spec: &TaskSpec, layout: &TokenLayout) -> Result<TaskSample> {
    match spec.kind {
        TaskKind::DenseRetrieval => gen_dense_retrieval(spec, layout),
        TaskKind::MultiValue => gen_multi_value(spec, layout),
        TaskKind::NiahEval => gen_niah_eval(spec, layout),
    }
}

fn filler_token(rng: &mut ChaCha8Rng, layout: &TokenLayout) -> usize {
    rng.random_range(layout.filler.0..layout.filler.1)
}

/// Interleave `blocks` in order with `n_filler` random filler tokens placed
/// in the gaps between (and around) blocks.
fn interleave(rng: &mut ChaCha8Rng, layout: &TokenLayout, blocks: &[Vec<usize>], n_filler: usize) -> Vec<usize> {
    let gaps = blocks.len() + 1;
    let mut per_gap = vec![0usize; gaps];
    for _ in 0..n_filler {
        per_gap[rng.random_range(0..gaps)] += 1;
    }
    let mut out = Vec::new();
    for (i, gap) in per_gap.iter().enumerate() {
        for _ in 0..*gap {
            out.push(filler_token(rng, layout));
        }
        if let Some(b) = blocks.get(i) {
            out.extend_from_slice(b);
        }
    }
    out
}

fn distinct(rng: &mut ChaCha8Rng, range: (usize, usize), n: usize) -> Vec<usize> {
    sample_indices(rng, range.1 - range.0, n)
        .into_iter()
        .map(|i| range.0 + i)
        .collect()
}

fn assemble(kind: TaskKind, body: Vec<usize>, query_key: usize, gold: Vec<usize>) -> TaskSample {
    let mut ctx = Vec::with_capacity(body.len() + 2);
    ctx.push(BOS);
    ctx.extend(body);
    ctx.push(QUERY);
    let mut ans = vec![query_key];
    ans.extend_from_slice(&gold);
    TaskSample {
        kind,
        ctx_tokens: ctx,
        ans_tokens: ans,
        query_key,
        gold_values: gold,
    }
}

/// Key-value pairs `k v` back to back; extra room becomes filler between
/// pairs. Probes one uniformly chosen key.
pub fn gen_dense_retrieval(spec: &TaskSpec, layout: &TokenLayout) -> Result<TaskSample> {
    // BOS + QUERY + probe key + gold value
    let overhead = 4;
    if spec.seq_len < overhead + 2 {
        return Err(invalid(format!("seq_len {} too short for dense retrieval", spec.seq_len)));
    }
    let cap = layout.n_keys().min(layout.n_values());
    let n = if spec.n_pairs == 0 {
        ((spec.seq_len - overhead) / 2).min(cap)
    } else {
        spec.n_pairs
    };
    if n == 0 || n > cap || 2 * n + overhead > spec.seq_len {
        return Err(invalid(format!(
            "{} pairs do not fit seq_len {} (key capacity {cap})",
            n, spec.seq_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let keys = distinct(&mut rng, layout.keys, n);
    let values = distinct(&mut rng, layout.values, n);
    let blocks: Vec<Vec<usize>> = keys.iter().zip(&values).map(|(&k, &v)| vec![k, v]).collect();
    let body = interleave(&mut rng, layout, &blocks, spec.seq_len - overhead - 2 * n);
    let q = rng.random_range(0..n);
    Ok(assemble(TaskKind::DenseRetrieval, body, keys[q], vec![values[q]]))
}

/// Keys each followed by `values_per_key` values, separated by filler.
/// The answer lists every value of the probed key in order.
pub fn gen_multi_value(spec: &TaskSpec, layout: &TokenLayout) -> Result<TaskSample> {
    let m = spec.values_per_key;
    if m < 2 {
        return Err(invalid("multi-value retrieval needs values_per_key >= 2"));
    }
    if !(0.0..1.0).contains(&spec.filler_ratio) {
        return Err(invalid("filler_ratio must lie in [0, 1)"));
    }
    let overhead = 3 + m;
    if spec.seq_len <= overhead {
        return Err(invalid(format!("seq_len {} too short", spec.seq_len)));
    }
    let room = spec.seq_len - overhead;
    let cap = layout.n_keys().min(layout.n_values() / m);
    let n = if spec.n_pairs == 0 {
        ((room as f64 * (1.0 - spec.filler_ratio)) as usize / (m + 1)).min(cap)
    } else {
        spec.n_pairs
    };
    if n == 0 || n > cap || n * (m + 1) > room {
        return Err(invalid(format!(
            "{n} keys x {m} values do not fit seq_len {} (capacity {cap})",
            spec.seq_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let keys = distinct(&mut rng, layout.keys, n);
    let values = distinct(&mut rng, layout.values, n * m);
    let blocks: Vec<Vec<usize>> = keys
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let mut b = vec![k];
            b.extend_from_slice(&values[i * m..(i + 1) * m]);
            b
        })
        .collect();
    let body = interleave(&mut rng, layout, &blocks, room - n * (m + 1));
    let q = rng.random_range(0..n);
    Ok(assemble(TaskKind::MultiValue, body, keys[q], values[q * m..(q + 1) * m].to_vec()))
}

/// Filler haystack with `n_pairs` (default 1) needle pairs at random or
/// fixed depth; probes one needle.
pub fn gen_niah_eval(spec: &TaskSpec, layout: &TokenLayout) -> Result<TaskSample> {
    let n = spec.n_pairs.max(1);
    let overhead = 4;
    if spec.seq_len < overhead + 2 * n {
        return Err(invalid(format!("seq_len {} too short for {n} needles", spec.seq_len)));
    }
    if n > layout.n_keys().min(layout.n_values()) {
        return Err(invalid(format!("{n} needles exceed key capacity")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let keys = distinct(&mut rng, layout.keys, n);
    let values = distinct(&mut rng, layout.values, n);
    let hay = spec.seq_len - overhead - 2 * n;
    let mut body: Vec<usize> = (0..hay).map(|_| filler_token(&mut rng, layout)).collect();
    // insert from the back so earlier offsets stay valid
    let mut offsets: Vec<usize> = match spec.depth {
        Some(d) => {
            let at = ((d.clamp(0.0, 1.0) * hay as f64).round() as usize).min(hay);
            vec![at; n]
        }
        None => (0..n).map(|_| rng.random_range(0..=hay)).collect(),
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (offsets[i], i));
    offsets = order.iter().map(|&i| offsets[i]).collect();
    for (slot, &i) in order.iter().enumerate().rev() {
        let at = offsets[slot];
        body.splice(at..at, [keys[i], values[i]]);
    }
    let q = rng.random_range(0..n);
    Ok(assemble(TaskKind::NiahEval, body, keys[q], vec![values[q]]))
}

/// Fraction of gold tokens reproduced at the matching position.
pub fn score(predicted: &[usize], sample: &TaskSample) -> f64 {
    let gold = &sample.gold_values;
    if gold.is_empty() {
        return 1.0;
    }
    let hits = gold.iter().zip(predicted).filter(|(g, p)| g == p).count();
    hits as f64 / gold.len() as f64
}

/// SplitMix64 finalizer, used to derive per-item seeds from a base seed.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A deterministic, indexable stream of samples drawn from a weighted task
/// mixture with sequence lengths uniform over `seq_len_range`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMix {
    pub kinds: Vec<(TaskKind, f64)>,
    pub seq_len_range: (usize, usize),
    pub values_per_key: usize,
    pub filler_ratio: f64,
    pub seed: u64,
}

impl TaskMix {
    pub fn only(kind: TaskKind, seq_len_range: (usize, usize), seed: u64) -> Self {
        Self {
            kinds: vec![(kind, 1.0)],
            seq_len_range,
            values_per_key: 2,
            filler_ratio: 0.3,
            seed,
        }
    }

    pub fn spec(&self, index: u64) -> Result<TaskSpec> {
        if self.kinds.is_empty() {
            return Err(invalid("task mixture is empty"));
        }
        let (lo, hi) = self.seq_len_range;
        if lo > hi {
            return Err(invalid("seq_len_range is inverted"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, index));
        let total: f64 = self.kinds.iter().map(|(_, w)| w).sum();
        let mut pick = rng.random::<f64>() * total;
        let mut kind = self.kinds[0].0;
        for &(k, w) in &self.kinds {
            kind = k;
            if pick < w {
                break;
            }
            pick -= w;
        }
        let seq_len = rng.random_range(lo..=hi);
        let seed = rng.random::<u64>();
        Ok(match kind {
            TaskKind::DenseRetrieval => TaskSpec::dense(seq_len, seed),
            TaskKind::MultiValue => TaskSpec::multi_value(seq_len, self.values_per_key, self.filler_ratio, seed),
            TaskKind::NiahEval => TaskSpec::niah(seq_len, 1 + (seed % 2) as usize, seed),
        })
    }

    pub fn sample(&self, index: u64, layout: &TokenLayout) -> Result<TaskSample> {
        generate(&self.spec(index)?, layout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> TokenLayout {
        TokenLayout::for_vocab(512).unwrap()
    }

    #[test]
    fn dense_single_pair_answers_only_value() {
        let spec = TaskSpec {
            n_pairs: 1,
            ..TaskSpec::dense(6, 3)
        };
        let s = gen_dense_retrieval(&spec, &layout()).unwrap();
        assert_eq!(s.ctx_tokens.len(), 4);
        assert_eq!(s.ctx_tokens[1], s.query_key);
        assert_eq!(s.gold_values, vec![s.ctx_tokens[2]]);
    }

    #[test]
    fn dense_is_deterministic() {
        let spec = TaskSpec::dense(200, 42);
        let a = gen_dense_retrieval(&spec, &layout()).unwrap();
        assert_eq!(a, gen_dense_retrieval(&spec, &layout()).unwrap());
        assert_ne!(a, gen_dense_retrieval(&spec.with_seed(43), &layout()).unwrap());
    }

    #[test]
    fn dense_fifty_pairs_post_scan() {
        let l = layout();
        let spec = TaskSpec {
            n_pairs: 50,
            ..TaskSpec::dense(1024, 7)
        };
        let s = gen_dense_retrieval(&spec, &l).unwrap();
        assert_eq!(s.len(), 1024);
        let keys: Vec<usize> = s.ctx_tokens.iter().copied().filter(|&t| l.is_key(t)).collect();
        assert_eq!(keys.len(), 50);
        let mut dedup = keys.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 50);
        let v = s.gold_values[0];
        assert_eq!(s.ctx_tokens.iter().filter(|&&t| t == v).count(), 1);
        // the value immediately follows its key
        let kpos = s.ctx_tokens.iter().position(|&t| t == s.query_key).unwrap();
        assert_eq!(s.ctx_tokens[kpos + 1], v);
    }

    #[test]
    fn dense_overfull_rejected() {
        let spec = TaskSpec {
            n_pairs: 10,
            ..TaskSpec::dense(20, 0)
        };
        assert!(gen_dense_retrieval(&spec, &layout()).is_err());
    }

    #[test]
    fn multi_value_one_key() {
        let spec = TaskSpec {
            n_pairs: 1,
            ..TaskSpec::multi_value(8, 2, 0.0, 5)
        };
        let s = gen_multi_value(&spec, &layout()).unwrap();
        assert_eq!(s.gold_values.len(), 2);
        for v in &s.gold_values {
            assert!(s.ctx_tokens.contains(v));
        }
    }

    #[test]
    fn multi_value_no_filler_when_ratio_zero() {
        let l = layout();
        // room = 53 - 5 = 48 = 16 keys * 3
        let s = gen_multi_value(&TaskSpec::multi_value(53, 2, 0.0, 9), &l).unwrap();
        assert!(s.ctx_tokens.iter().all(|&t| !l.is_filler(t)));
    }

    #[test]
    fn multi_value_gold_matches_bound_list() {
        let l = layout();
        for seed in 0..20 {
            let s = gen_multi_value(&TaskSpec::multi_value(300, 3, 0.4, seed), &l).unwrap();
            let pos = s.ctx_tokens.iter().position(|&t| t == s.query_key).unwrap();
            assert_eq!(&s.ctx_tokens[pos + 1..pos + 4], s.gold_values.as_slice());
            assert_eq!(s.len(), 300);
        }
    }

    #[test]
    fn niah_depth_zero_at_start() {
        let spec = TaskSpec {
            depth: Some(0.0),
            ..TaskSpec::niah(64, 1, 1)
        };
        let s = gen_niah_eval(&spec, &layout()).unwrap();
        assert_eq!(s.ctx_tokens[1], s.query_key);
        assert_eq!(s.ctx_tokens[2], s.gold_values[0]);
    }

    #[test]
    fn niah_two_needles_distinct() {
        let l = layout();
        for seed in 0..10 {
            let s = gen_niah_eval(&TaskSpec::niah(128, 2, seed), &l).unwrap();
            let keys: Vec<usize> = s.ctx_tokens.iter().copied().filter(|&t| l.is_key(t)).collect();
            assert_eq!(keys.len(), 2);
            assert_ne!(keys[0], keys[1]);
            for &k in &keys {
                let p = s.ctx_tokens.iter().position(|&t| t == k).unwrap();
                assert!(l.is_value(s.ctx_tokens[p + 1]));
                if k == s.query_key {
                    assert_eq!(s.ctx_tokens[p + 1], s.gold_values[0]);
                }
            }
        }
    }

    #[test]
    fn scoring() {
        let s = assemble(TaskKind::MultiValue, vec![], 10, vec![20, 21, 22, 23]);
        assert_eq!(score(&[20, 21, 22, 23], &s), 1.0);
        assert_eq!(score(&[], &s), 0.0);
        assert_eq!(score(&[20, 21, 0, 0], &s), 0.5);
    }

    #[test]
    fn mix_stream_is_reproducible() {
        let l = layout();
        let mix = TaskMix {
            kinds: vec![(TaskKind::DenseRetrieval, 1.0), (TaskKind::MultiValue, 1.0), (TaskKind::NiahEval, 1.0)],
            seq_len_range: (64, 96),
            values_per_key: 2,
            filler_ratio: 0.3,
            seed: 11,
        };
        for i in 0..30 {
            let a = mix.sample(i, &l).unwrap();
            assert_eq!(a, mix.sample(i, &l).unwrap());
            assert!((64..=96).contains(&a.len()));
        }
    }
}
