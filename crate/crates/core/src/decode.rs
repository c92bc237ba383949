//! Beam search with length penalty, no-repeat n-grams and a minimum length.
//!
//! Scores are `cumulative log-prob / length^length_penalty`, where length
//! counts generated tokens (EOS included, BOS excluded).

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecodeState, Model, Scalar};
use crate::tokenizer::{Vocab, BOS, EOS, MIN_TARGET_LEN, PAD, SEP, SOURCE_BUDGET, TARGET_BUDGET};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub early_stopping: bool,
    pub num_beams: usize,
    /// 0 disables the constraint.
    pub no_repeat_ngram_size: usize,
    pub length_penalty: f64,
    pub max_target_len: usize,
    pub min_target_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            early_stopping: true,
            num_beams: 5,
            no_repeat_ngram_size: 0,
            length_penalty: 1.0,
            max_target_len: TARGET_BUDGET,
            min_target_len: MIN_TARGET_LEN,
        }
    }
}

impl BeamConfig {
    pub fn greedy(max_target_len: usize) -> Self {
        BeamConfig {
            early_stopping: true,
            num_beams: 1,
            no_repeat_ngram_size: 0,
            length_penalty: 0.0,
            max_target_len,
            min_target_len: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_beams < 1 {
            return Err(Error::InvalidConfig("num_beams must be >= 1".into()));
        }
        if self.max_target_len < 1 {
            return Err(Error::InvalidConfig("max_target_len must be >= 1".into()));
        }
        if self.min_target_len > self.max_target_len {
            return Err(Error::InvalidConfig("min_target_len exceeds max_target_len".into()));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::InvalidConfig("length_penalty must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated tokens, ending in EOS unless the length limit was hit.
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub score: f64,
    pub finished: bool,
}

/// `logprob_sum / length^penalty`.
pub fn normalized_score(logprob_sum: f64, length: usize, penalty: f64) -> f64 {
    logprob_sum / (length as f64).powf(penalty)
}

/// Ranking used for the output list: score descending, then shorter, then
/// lexicographically smaller.
pub fn compare_hypotheses(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Tokens whose addition to `prefix` would repeat an existing `n`-gram.
pub fn banned_tokens(prefix: &[u32], n: usize) -> BTreeSet<u32> {
    let mut out = BTreeSet::new();
    if n == 0 || prefix.len() < n {
        return out;
    }
    let tail = &prefix[prefix.len() + 1 - n..];
    for w in prefix.windows(n) {
        if &w[..n - 1] == tail {
            out.insert(w[n - 1]);
        }
    }
    out
}

/// Incrementally maintained map from `(n-1)`-gram to the tokens that followed it.
#[derive(Debug, Clone, Default)]
pub struct NgramIndex {
    n: usize,
    seen: HashMap<Vec<u32>, BTreeSet<u32>>,
}

impl NgramIndex {
    pub fn new(n: usize) -> Self {
        NgramIndex {
            n,
            seen: HashMap::new(),
        }
    }

    /// Registers the n-gram ending at the last token of `prefix`.
    pub fn push(&mut self, prefix: &[u32]) {
        if self.n == 0 || prefix.len() < self.n {
            return;
        }
        let w = &prefix[prefix.len() - self.n..];
        self.seen
            .entry(w[..self.n - 1].to_vec())
            .or_default()
            .insert(w[self.n - 1]);
    }

    pub fn banned(&self, prefix: &[u32]) -> Option<&BTreeSet<u32>> {
        if self.n == 0 || prefix.len() + 1 < self.n {
            return None;
        }
        self.seen.get(&prefix[prefix.len() + 1 - self.n..])
    }
}

/// Anything that yields next-token log-probabilities step by step.
pub trait NextTokenModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    fn eos_id(&self) -> u32 {
        EOS
    }

    /// Token ids never emitted.
    fn never_generate(&self) -> &[u32] {
        &[]
    }

    /// Prepares decoding of `src` and returns log-probs of the first token.
    fn start(&self, src: &[u32]) -> Result<(Self::State, Vec<f64>)>;

    /// Consumes `token` and returns log-probs of the next one.
    fn step(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>>;
}

impl<S: Scalar> NextTokenModel for Model<S> {
    type State = DecodeState<S>;

    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn never_generate(&self) -> &[u32] {
        &[PAD, BOS, SEP]
    }

    fn start(&self, src: &[u32]) -> Result<(Self::State, Vec<f64>)> {
        let mut state = self.start_decode(src)?;
        let lp = self.step_decode(&mut state, BOS)?;
        Ok((state, lp))
    }

    fn step(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>> {
        self.step_decode(state, token)
    }
}

/// Model defined by a function of the generated prefix; the source is ignored.
pub struct FnModel<F> {
    pub vocab_size: usize,
    pub eos: u32,
    pub logprobs: F,
}

impl<F: Fn(&[u32]) -> Vec<f64>> NextTokenModel for FnModel<F> {
    type State = Vec<u32>;

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn eos_id(&self) -> u32 {
        self.eos
    }

    fn start(&self, _src: &[u32]) -> Result<(Vec<u32>, Vec<f64>)> {
        Ok((Vec::new(), (self.logprobs)(&[])))
    }

    fn step(&self, state: &mut Vec<u32>, token: u32) -> Result<Vec<f64>> {
        state.push(token);
        Ok((self.logprobs)(state))
    }
}

/// Per-step record of candidate and surviving cumulative log-probs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepTrace {
    /// Cumulative log-probs of every allowed unfinished continuation.
    pub expanded: Vec<f64>,
    /// Cumulative log-probs of the beams kept for the next step.
    pub kept: Vec<f64>,
}

#[derive(Clone)]
struct Beam<St> {
    tokens: Vec<u32>,
    logprob: f64,
    state: St,
    next: Vec<f64>,
    ngrams: NgramIndex,
}

struct DonePool {
    cap: usize,
    hyps: Vec<Hypothesis>,
}

impl DonePool {
    fn is_full(&self) -> bool {
        self.hyps.len() >= self.cap
    }

    fn worst(&self) -> Option<&Hypothesis> {
        self.hyps.iter().max_by(|a, b| compare_hypotheses(a, b))
    }

    fn offer(&mut self, h: Hypothesis) {
        if !self.is_full() {
            self.hyps.push(h);
            return;
        }
        let (wi, worst) = self
            .hyps
            .iter()
            .enumerate()
            .max_by(|a, b| compare_hypotheses(a.1, b.1))
            .expect("full pool is non-empty");
        if compare_hypotheses(&h, worst) == Ordering::Less {
            self.hyps[wi] = h;
        }
    }
}

/// Highest normalized score any extension of a beam could still reach.
fn best_possible(logprob: f64, len: usize, max_len: usize, penalty: f64) -> f64 {
    let next = normalized_score(logprob, len + 1, penalty);
    let last = normalized_score(logprob, max_len, penalty);
    next.max(last)
}

pub fn beam_search<M: NextTokenModel>(model: &M, src: &[u32], cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    beam_search_traced(model, src, cfg, None)
}

/// Beam search that optionally records per-step candidate statistics.
pub fn beam_search_traced<M: NextTokenModel>(
    model: &M,
    src: &[u32],
    cfg: &BeamConfig,
    mut trace: Option<&mut Vec<StepTrace>>,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    if src.is_empty() {
        return Err(Error::InvalidArgument("empty source sequence".into()));
    }
    let eos = model.eos_id();
    let vocab = model.vocab_size();
    let mut always_banned = vec![false; vocab];
    for &t in model.never_generate() {
        always_banned[t as usize] = true;
    }
    let (state, next) = model.start(src)?;
    let mut beams = vec![Beam {
        tokens: Vec::new(),
        logprob: 0.0,
        state,
        next,
        ngrams: NgramIndex::new(cfg.no_repeat_ngram_size),
    }];
    let mut done = DonePool {
        cap: cfg.num_beams,
        hyps: Vec::new(),
    };

    while !beams.is_empty() {
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (bi, b) in beams.iter().enumerate() {
            if b.next.len() != vocab {
                return Err(Error::Decode(format!("model returned {} log-probs for vocab {vocab}", b.next.len())));
            }
            let banned = b.ngrams.banned(&b.tokens);
            let eos_allowed = b.tokens.len() + 1 >= cfg.min_target_len;
            for (t, &lp) in b.next.iter().enumerate() {
                let t = t as u32;
                if always_banned[t as usize]
                    || (t == eos && !eos_allowed)
                    || banned.is_some_and(|s| s.contains(&t))
                    || lp == f64::NEG_INFINITY
                {
                    continue;
                }
                cands.push((b.logprob + lp, bi, t));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut step_trace = trace.as_ref().map(|_| StepTrace::default());
        let mut chosen: Vec<(f64, usize, u32)> = Vec::new();
        for (rank, &(lp, bi, t)) in cands.iter().enumerate() {
            let len = beams[bi].tokens.len() + 1;
            if t == eos || len >= cfg.max_target_len {
                // finished candidates only count inside the top num_beams
                if rank >= cfg.num_beams {
                    continue;
                }
                let mut tokens = beams[bi].tokens.clone();
                tokens.push(t);
                done.offer(Hypothesis {
                    tokens,
                    logprob: lp,
                    score: normalized_score(lp, len, cfg.length_penalty),
                    finished: true,
                });
            } else {
                if let Some(st) = step_trace.as_mut() {
                    st.expanded.push(lp);
                }
                if chosen.len() < cfg.num_beams {
                    chosen.push((lp, bi, t));
                } else if step_trace.is_none() {
                    break;
                }
            }
        }
        if let (Some(tr), Some(mut st)) = (trace.as_deref_mut(), step_trace) {
            st.kept = chosen.iter().map(|c| c.0).collect();
            tr.push(st);
        }

        if cfg.early_stopping && done.is_full() {
            break;
        }
        if !cfg.early_stopping && done.is_full() {
            let worst = done.worst().expect("full pool").score;
            let hopeless = chosen.iter().all(|&(lp, bi, _)| {
                best_possible(lp, beams[bi].tokens.len() + 1, cfg.max_target_len, cfg.length_penalty) < worst
            });
            if hopeless {
                break;
            }
        }

        let mut next_beams = Vec::with_capacity(chosen.len());
        for (lp, bi, t) in chosen {
            let parent = &beams[bi];
            let mut tokens = parent.tokens.clone();
            tokens.push(t);
            let mut ngrams = parent.ngrams.clone();
            ngrams.push(&tokens);
            let mut state = parent.state.clone();
            let next = model.step(&mut state, t)?;
            next_beams.push(Beam {
                tokens,
                logprob: lp,
                state,
                next,
                ngrams,
            });
        }
        beams = next_beams;
    }

    let mut out = done.hyps;
    if out.is_empty() {
        return Err(Error::Decode("no hypothesis finished".into()));
    }
    out.sort_by(compare_hypotheses);
    Ok(out)
}

/// Argmax decoding, independent of the beam machinery.
pub fn greedy_decode<M: NextTokenModel>(model: &M, src: &[u32], max_len: usize, min_len: usize) -> Result<Hypothesis> {
    if src.is_empty() {
        return Err(Error::InvalidArgument("empty source sequence".into()));
    }
    let eos = model.eos_id();
    let (mut state, mut next) = model.start(src)?;
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    loop {
        let (mut best, mut best_lp) = (None, f64::NEG_INFINITY);
        for (t, &lp) in next.iter().enumerate() {
            let t = t as u32;
            if model.never_generate().contains(&t) || (t == eos && tokens.len() + 1 < min_len) {
                continue;
            }
            if lp > best_lp {
                best = Some(t);
                best_lp = lp;
            }
        }
        let t = best.ok_or_else(|| Error::Decode("every token is banned".into()))?;
        tokens.push(t);
        logprob += best_lp;
        if t == eos || tokens.len() >= max_len {
            break;
        }
        next = model.step(&mut state, t)?;
    }
    Ok(Hypothesis {
        score: logprob,
        logprob,
        finished: true,
        tokens,
    })
}

/// Best hypothesis rendered as text, EOS stripped.
pub fn summarize<S: Scalar>(model: &Model<S>, vocab: &Vocab, summarizer_input: &str, cfg: &BeamConfig) -> Result<String> {
    let src = vocab.encode(summarizer_input, SOURCE_BUDGET.min(model.config().max_positions), true);
    let cfg = BeamConfig {
        max_target_len: cfg.max_target_len.min(model.config().max_positions - 1),
        ..cfg.clone()
    };
    let hyps = beam_search(model, &src.ids, &cfg)?;
    vocab.decode(&hyps[0].tokens)
}
