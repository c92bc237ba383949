//! Tree-structured Parzen Estimator over mixed spaces, a sequential study
//! loop with a resumable JSONL trial log, and decoding-parameter tuning.

use std::f64::consts::{PI, SQRT_2};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::corpus::ProcessedExample;
use crate::decode::{summarize, BeamConfig};
use crate::error::{Error, Result};
use crate::metrics::{score_summary, TokenEmbedder};
use crate::model::{Model, Scalar};
use crate::seed::derive_seed;
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            ParamValue::Int(i) => Some(i as f64),
            ParamValue::Float(f) => Some(f),
            _ => None,
        }
    }
}

pub type Params = IndexMap<String, ParamValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Dimension {
    Categorical { choices: Vec<ParamValue> },
    /// Inclusive bounds.
    Int { low: i64, high: i64 },
    Float { low: f64, high: f64 },
}

impl Dimension {
    fn contains(&self, v: &ParamValue) -> bool {
        match (self, v) {
            (Dimension::Categorical { choices }, v) => choices.contains(v),
            (Dimension::Int { low, high }, ParamValue::Int(i)) => (*low..=*high).contains(i),
            (Dimension::Float { low, high }, ParamValue::Float(f)) => (*low..=*high).contains(f),
            _ => false,
        }
    }

    /// Continuous support used by the kernels.
    fn support(&self) -> Option<(f64, f64)> {
        match *self {
            Dimension::Int { low, high } => Some((low as f64 - 0.5, high as f64 + 0.5)),
            Dimension::Float { low, high } => Some((low, high)),
            Dimension::Categorical { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: IndexMap<String, Dimension>,
}

impl SearchSpace {
    /// Beam-search space: early stopping, 5..=15 beams, 5..=15 no-repeat
    /// n-gram size, length penalty in [-2, 2].
    pub fn beam_search() -> Self {
        let mut dims = IndexMap::new();
        dims.insert(
            "early_stopping".into(),
            Dimension::Categorical {
                choices: vec![ParamValue::Bool(true), ParamValue::Bool(false)],
            },
        );
        dims.insert("num_beams".into(), Dimension::Int { low: 5, high: 15 });
        dims.insert("no_repeat_ngram_size".into(), Dimension::Int { low: 5, high: 15 });
        dims.insert("length_penalty".into(), Dimension::Float { low: -2.0, high: 2.0 });
        SearchSpace { dims }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::InvalidConfig("search space has no dimensions".into()));
        }
        for (name, d) in &self.dims {
            let ok = match d {
                Dimension::Categorical { choices } => !choices.is_empty(),
                Dimension::Int { low, high } => low <= high,
                Dimension::Float { low, high } => low.is_finite() && high.is_finite() && low <= high,
            };
            if !ok {
                return Err(Error::InvalidConfig(format!("dimension {name} is empty")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, params: &Params) -> bool {
        params.len() == self.dims.len()
            && self
                .dims
                .iter()
                .all(|(k, d)| params.get(k).is_some_and(|v| d.contains(v)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub params: Params,
    pub objective: Option<f64>,
    pub status: TrialStatus,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    /// `1.06 · σ · m^(-1/5)`, floored at a fraction of the dimension range.
    Scott,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TpeConfig {
    pub n_startup_trials: usize,
    pub gamma_fraction: f64,
    pub n_candidates: usize,
    pub kde_bandwidth_rule: BandwidthRule,
    pub bandwidth_floor: f64,
    /// Laplace smoothing for categorical kernels.
    pub laplace: f64,
    /// Weight of the broad prior component in each mixture.
    pub prior_weight: f64,
    pub seed: u64,
}

impl Default for TpeConfig {
    fn default() -> Self {
        TpeConfig {
            n_startup_trials: 10,
            gamma_fraction: 0.25,
            n_candidates: 24,
            kde_bandwidth_rule: BandwidthRule::Scott,
            bandwidth_floor: 0.01,
            laplace: 1.0,
            prior_weight: 1.0,
            seed: 0,
        }
    }
}

impl TpeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_startup_trials < 1 || self.n_candidates < 1 {
            return Err(Error::InvalidConfig("n_startup_trials and n_candidates must be >= 1".into()));
        }
        if !(self.gamma_fraction > 0.0 && self.gamma_fraction < 1.0) {
            return Err(Error::InvalidConfig("gamma_fraction must be in (0, 1)".into()));
        }
        if self.laplace <= 0.0 || self.prior_weight < 0.0 || self.bandwidth_floor <= 0.0 {
            return Err(Error::InvalidConfig("laplace, prior_weight and bandwidth_floor must be positive".into()));
        }
        Ok(())
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / SQRT_2))
}

/// Log-density of a normal truncated to `[a, b]`.
fn trunc_normal_logpdf(x: f64, mu: f64, h: f64, a: f64, b: f64) -> f64 {
    let z = (x - mu) / h;
    let mass = (normal_cdf((b - mu) / h) - normal_cdf((a - mu) / h)).max(1e-300);
    -0.5 * z * z - (2.0 * PI).sqrt().ln() - h.ln() - mass.ln()
}

fn sample_trunc_normal(rng: &mut ChaCha8Rng, mu: f64, h: f64, a: f64, b: f64) -> f64 {
    for _ in 0..100 {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        let x = mu + h * z;
        if (a..=b).contains(&x) {
            return x;
        }
    }
    mu.clamp(a, b)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-dimension parameters of one set's Parzen mixture.
enum DimModel {
    Numeric { a: f64, b: f64, h: f64, points: Vec<f64> },
    Categorical { k: usize, points: Vec<usize> },
}

/// Joint mixture: one product kernel per observation plus a broad prior.
struct Parzen {
    dims: Vec<DimModel>,
    m: usize,
    prior_weight: f64,
    laplace: f64,
}

fn choice_index(choices: &[ParamValue], v: &ParamValue) -> usize {
    choices.iter().position(|c| c == v).unwrap_or(0)
}

impl Parzen {
    fn fit(space: &SearchSpace, obs: &[&Params], cfg: &TpeConfig) -> Parzen {
        let m = obs.len();
        let dims = space
            .dims
            .iter()
            .map(|(name, d)| match d {
                Dimension::Categorical { choices } => DimModel::Categorical {
                    k: choices.len(),
                    points: obs.iter().map(|p| choice_index(choices, &p[name])).collect(),
                },
                _ => {
                    let (a, b) = d.support().expect("numeric");
                    let points: Vec<f64> = obs.iter().map(|p| p[name].as_f64().unwrap_or(a)).collect();
                    let range = b - a;
                    let sigma = if points.len() > 1 {
                        let mean = points.iter().sum::<f64>() / points.len() as f64;
                        (points.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (points.len() - 1) as f64).sqrt()
                    } else {
                        range
                    };
                    let scott = 1.06 * sigma * (points.len().max(1) as f64).powf(-0.2);
                    // the floor shrinks with the number of observations so a tight
                    // cluster of good points cannot collapse the search
                    let floor = (range / (1.0 + m as f64).min(100.0)).max(cfg.bandwidth_floor * range);
                    let h = scott.max(floor).min(range);
                    DimModel::Numeric { a, b, h, points }
                }
            })
            .collect();
        Parzen {
            dims,
            m,
            prior_weight: cfg.prior_weight,
            laplace: cfg.laplace,
        }
    }

    fn cat_kernel(&self, k: usize, c: usize, o: usize) -> f64 {
        let hit = if c == o { 1.0 } else { 0.0 };
        (hit + self.laplace / k as f64) / (1.0 + self.laplace)
    }

    /// Log joint density at a candidate given per-dimension coordinates
    /// (numeric value or category index).
    fn log_density(&self, x: &[f64]) -> f64 {
        let mut terms = Vec::with_capacity(self.m + 1);
        for i in 0..self.m {
            let mut lp = 0.0;
            for (d, &xd) in self.dims.iter().zip(x) {
                lp += match d {
                    DimModel::Numeric { a, b, h, points } => trunc_normal_logpdf(xd, points[i], *h, *a, *b),
                    DimModel::Categorical { k, points } => self.cat_kernel(*k, xd as usize, points[i]).ln(),
                };
            }
            terms.push(lp);
        }
        if self.prior_weight > 0.0 {
            let mut lp = self.prior_weight.ln();
            for (d, &xd) in self.dims.iter().zip(x) {
                lp += match d {
                    DimModel::Numeric { a, b, .. } => trunc_normal_logpdf(xd, (a + b) / 2.0, b - a, *a, *b),
                    DimModel::Categorical { k, .. } => -(*k as f64).ln(),
                };
            }
            terms.push(lp);
        }
        log_sum_exp(&terms) - (self.m as f64 + self.prior_weight).ln()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let total = self.m as f64 + self.prior_weight;
        let pick = rng.random::<f64>() * total;
        let component = if pick < self.m as f64 {
            Some((pick as usize).min(self.m - 1))
        } else {
            None
        };
        self.dims
            .iter()
            .map(|d| match (d, component) {
                (DimModel::Numeric { a, b, h, points }, Some(i)) => sample_trunc_normal(rng, points[i], *h, *a, *b),
                (DimModel::Numeric { a, b, .. }, None) => sample_trunc_normal(rng, (a + b) / 2.0, b - a, *a, *b),
                (DimModel::Categorical { k, points }, Some(i)) => {
                    let weights: Vec<f64> = (0..*k).map(|c| self.cat_kernel(*k, c, points[i])).collect();
                    weighted_index(rng, &weights) as f64
                }
                (DimModel::Categorical { k, .. }, None) => rng.random_range(0..*k) as f64,
            })
            .collect()
    }
}

fn weighted_index(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Maps kernel coordinates to typed values, snapping ints to the grid.
fn to_params(space: &SearchSpace, x: &[f64]) -> (Params, Vec<f64>) {
    let mut params = Params::new();
    let mut snapped = Vec::with_capacity(x.len());
    for ((name, d), &xd) in space.dims.iter().zip(x) {
        let (v, s) = match d {
            Dimension::Categorical { choices } => {
                let i = (xd as usize).min(choices.len() - 1);
                (choices[i].clone(), i as f64)
            }
            Dimension::Int { low, high } => {
                let i = (xd.round() as i64).clamp(*low, *high);
                (ParamValue::Int(i), i as f64)
            }
            Dimension::Float { low, high } => {
                let f = xd.clamp(*low, *high);
                (ParamValue::Float(f), f)
            }
        };
        params.insert(name.clone(), v);
        snapped.push(s);
    }
    (params, snapped)
}

fn random_params(space: &SearchSpace, rng: &mut ChaCha8Rng) -> Params {
    space
        .dims
        .iter()
        .map(|(name, d)| {
            let v = match d {
                Dimension::Categorical { choices } => choices[rng.random_range(0..choices.len())].clone(),
                Dimension::Int { low, high } => ParamValue::Int(rng.random_range(*low..=*high)),
                Dimension::Float { low, high } => ParamValue::Float(if low == high {
                    *low
                } else {
                    rng.random_range(*low..*high)
                }),
            };
            (name.clone(), v)
        })
        .collect()
}

/// Splits complete trials into (good, bad) by objective, best first.
pub fn split_history<'a>(history: &'a [TrialRecord], gamma: f64) -> (Vec<&'a TrialRecord>, Vec<&'a TrialRecord>) {
    let mut complete: Vec<&TrialRecord> = history
        .iter()
        .filter(|t| t.status == TrialStatus::Complete && t.objective.is_some_and(f64::is_finite))
        .collect();
    complete.sort_by(|a, b| {
        b.objective
            .unwrap()
            .total_cmp(&a.objective.unwrap())
            .then(a.trial.cmp(&b.trial))
    });
    let n_good = ((gamma * complete.len() as f64).ceil() as usize).clamp(1, complete.len().max(1));
    let bad = complete.split_off(n_good.min(complete.len()));
    (complete, bad)
}

/// Proposes the next parameter set given the trials so far.
pub fn suggest(history: &[TrialRecord], space: &SearchSpace, cfg: &TpeConfig, rng: &mut ChaCha8Rng) -> Result<Params> {
    space.validate()?;
    cfg.validate()?;
    let (good, bad) = split_history(history, cfg.gamma_fraction);
    if good.len() + bad.len() < cfg.n_startup_trials {
        return Ok(random_params(space, rng));
    }
    let good_p: Vec<&Params> = good.iter().map(|t| &t.params).collect();
    let bad_p: Vec<&Params> = bad.iter().map(|t| &t.params).collect();
    let l = Parzen::fit(space, &good_p, cfg);
    let g = Parzen::fit(space, &bad_p, cfg);
    let mut best: Option<(f64, Params)> = None;
    for _ in 0..cfg.n_candidates {
        let (params, x) = to_params(space, &l.sample(rng));
        let ratio = l.log_density(&x) - g.log_density(&x);
        if best.as_ref().is_none_or(|(b, _)| ratio > *b) {
            best = Some((ratio, params));
        }
    }
    Ok(best.expect("n_candidates >= 1").1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub history: Vec<TrialRecord>,
    pub best: TrialRecord,
}

/// Best complete trial; ties go to the earliest.
pub fn best_trial(history: &[TrialRecord]) -> Option<&TrialRecord> {
    split_history(history, 0.5).0.into_iter().next()
}

/// Runs trials until the history holds `n_trials` records. `initial` is a
/// previously logged history to resume from; `on_trial` sees every new record.
pub fn run_study(
    mut objective: impl FnMut(&Params) -> Result<f64>,
    space: &SearchSpace,
    n_trials: usize,
    cfg: &TpeConfig,
    initial: Vec<TrialRecord>,
    deterministic: bool,
    mut on_trial: impl FnMut(&TrialRecord) -> Result<()>,
) -> Result<Study> {
    if n_trials < 1 {
        return Err(Error::InvalidArgument("n_trials must be >= 1".into()));
    }
    space.validate()?;
    cfg.validate()?;
    let mut history = initial;
    for (i, t) in history.iter().enumerate() {
        if t.trial != i {
            return Err(Error::Study(format!("resumed history has trial {} at position {i}", t.trial)));
        }
    }
    for trial in history.len()..n_trials {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("trial-{trial}")));
        let params = suggest(&history, space, cfg, &mut rng)?;
        let start = Instant::now();
        let result = objective(&params);
        let wall = if deterministic { 0 } else { start.elapsed().as_millis() as u64 };
        let record = match result {
            Ok(v) if v.is_finite() => TrialRecord {
                trial,
                params,
                objective: Some(v),
                status: TrialStatus::Complete,
                wall_time_ms: wall,
            },
            other => {
                if let Err(e) = &other {
                    log::warn!("trial {trial} failed: {e}");
                }
                TrialRecord {
                    trial,
                    params,
                    objective: None,
                    status: TrialStatus::Failed,
                    wall_time_ms: wall,
                }
            }
        };
        on_trial(&record)?;
        history.push(record);
    }
    let best = best_trial(&history)
        .cloned()
        .ok_or_else(|| Error::Study("every trial failed".into()))?;
    Ok(Study { history, best })
}

/// First line of a trial log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialLogHeader {
    pub space: SearchSpace,
    pub tpe: TpeConfig,
    pub notes: Vec<String>,
}

impl TrialLogHeader {
    pub fn new(space: &SearchSpace, tpe: &TpeConfig) -> Self {
        TrialLogHeader {
            space: space.clone(),
            tpe: tpe.clone(),
            notes: vec![
                "maximization; objective = mean of ROUGE-1, ROUGE-2 and similarity F1".into(),
                "startup trials, gamma and candidate count are assumed defaults".into(),
            ],
        }
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: TrialLogHeader,
}

pub fn write_trial_log_header(path: &Path, header: &TrialLogHeader) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(&HeaderLine { header: header.clone() })?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn append_trial(path: &Path, record: &TrialRecord) -> Result<()> {
    let mut f = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn read_trial_log(path: &Path) -> Result<(TrialLogHeader, Vec<TrialRecord>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Record {
            line: 1,
            message: "empty trial log".into(),
        })?
        .map_err(|e| Error::io(path, e))?;
    let header: HeaderLine = serde_json::from_str(&first).map_err(|e| Error::Record {
        line: 1,
        message: e.to_string(),
    })?;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::Record {
            line: i + 2,
            message: e.to_string(),
        })?);
    }
    Ok((header.header, rows))
}

/// Applies tuned values over `base`.
pub fn beam_config_from(params: &Params, base: &BeamConfig) -> Result<BeamConfig> {
    let mut cfg = base.clone();
    for (k, v) in params {
        let bad = || Error::InvalidArgument(format!("bad value {v:?} for {k}"));
        match (k.as_str(), v) {
            ("early_stopping", ParamValue::Bool(b)) => cfg.early_stopping = *b,
            ("num_beams", ParamValue::Int(i)) => cfg.num_beams = usize::try_from(*i).map_err(|_| bad())?,
            ("no_repeat_ngram_size", ParamValue::Int(i)) => {
                cfg.no_repeat_ngram_size = usize::try_from(*i).map_err(|_| bad())?
            }
            ("length_penalty", v) => cfg.length_penalty = v.as_f64().ok_or_else(bad)?,
            _ => return Err(bad()),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Validation data for one summarizer.
pub struct TuneSet<'a, S> {
    pub model: &'a Model<S>,
    pub examples: &'a [ProcessedExample],
}

/// Mean tuning objective of `cfg` over every (model, example) pair.
pub fn decoding_objective<S: Scalar, E: TokenEmbedder + Sync>(
    sets: &[TuneSet<'_, S>],
    vocab: &Vocab,
    embedder: &E,
    cfg: &BeamConfig,
) -> Result<f64> {
    let jobs: Vec<(&Model<S>, &ProcessedExample)> = sets
        .iter()
        .flat_map(|s| s.examples.iter().map(move |e| (s.model, e)))
        .collect();
    if jobs.is_empty() {
        return Err(Error::InvalidArgument("no validation examples".into()));
    }
    let scores = jobs
        .par_iter()
        .map(|(m, ex)| {
            let out = summarize(m, vocab, &ex.summarizer_input, cfg)?;
            Ok(score_summary(&ex.id, &out, &ex.target_summary, embedder).objective)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub best: BeamConfig,
    pub study: Study,
}

/// Searches decoding parameters maximizing the validation tuning objective.
#[allow(clippy::too_many_arguments)]
pub fn tune_decoding<S: Scalar, E: TokenEmbedder + Sync>(
    sets: &[TuneSet<'_, S>],
    vocab: &Vocab,
    embedder: &E,
    base: &BeamConfig,
    space: &SearchSpace,
    n_trials: usize,
    cfg: &TpeConfig,
    initial: Vec<TrialRecord>,
    deterministic: bool,
    on_trial: impl FnMut(&TrialRecord) -> Result<()>,
) -> Result<TuneOutcome> {
    if sets.iter().all(|s| s.examples.is_empty()) {
        return Err(Error::InvalidArgument("no validation examples".into()));
    }
    let objective = |p: &Params| decoding_objective(sets, vocab, embedder, &beam_config_from(p, base)?);
    let study = run_study(objective, space, n_trials, cfg, initial, deterministic, on_trial)?;
    let best = beam_config_from(&study.best.params, base)?;
    Ok(TuneOutcome { best, study })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn record(trial: usize, params: Params, objective: f64) -> TrialRecord {
        TrialRecord {
            trial,
            params,
            objective: Some(objective),
            status: TrialStatus::Complete,
            wall_time_ms: 0,
        }
    }

    #[test]
    fn default_space_matches_bounds() {
        let s = SearchSpace::beam_search();
        assert_eq!(s.dims["num_beams"], Dimension::Int { low: 5, high: 15 });
        assert_eq!(s.dims["no_repeat_ngram_size"], Dimension::Int { low: 5, high: 15 });
        assert_eq!(s.dims["length_penalty"], Dimension::Float { low: -2.0, high: 2.0 });
        let p = suggest(&[], &s, &TpeConfig::default(), &mut rng(1)).unwrap();
        assert!(s.contains(&p));
    }

    #[test]
    fn split_sizes() {
        let s = SearchSpace::beam_search();
        let hist: Vec<_> = (0..10)
            .map(|i| record(i, random_params(&s, &mut rng(i as u64)), i as f64))
            .collect();
        let (good, bad) = split_history(&hist, 0.25);
        assert_eq!(good.len(), 3);
        assert_eq!(good.len() + bad.len(), 10);
        assert_eq!(good[0].trial, 9);
    }

    #[test]
    fn startup_is_uniform() {
        let s = SearchSpace::beam_search();
        let cfg = TpeConfig::default();
        let mut r = rng(5);
        let n = 1000;
        let trues = (0..n)
            .filter(|_| suggest(&[], &s, &cfg, &mut r).unwrap()["early_stopping"] == ParamValue::Bool(true))
            .count();
        assert!((trues as f64 / n as f64 - 0.5).abs() < 0.05, "{trues}");
    }

    #[test]
    fn prefers_rewarded_category() {
        let s = SearchSpace::beam_search();
        let cfg = TpeConfig::default();
        let hist: Vec<_> = (0..20)
            .map(|i| {
                let mut p = random_params(&s, &mut rng(100 + i as u64));
                let es = i % 2 == 0;
                p["early_stopping"] = ParamValue::Bool(es);
                record(i, p, if es { 1.0 } else { 0.0 })
            })
            .collect();
        let mut r = rng(9);
        let hits = (0..200)
            .filter(|_| suggest(&hist, &s, &cfg, &mut r).unwrap()["early_stopping"] == ParamValue::Bool(true))
            .count();
        assert!(hits as f64 / 200.0 > 0.8, "{hits}");
    }

    #[test]
    fn concentrates_near_good_floats() {
        let mut dims = IndexMap::new();
        dims.insert("x".to_string(), Dimension::Float { low: -2.0, high: 2.0 });
        let s = SearchSpace { dims };
        let cfg = TpeConfig::default();
        let mut r = rng(2);
        let hist: Vec<_> = (0..40)
            .map(|i| {
                let good = i % 4 == 0;
                let x = if good {
                    1.5 + r.random_range(-0.1..0.1)
                } else {
                    r.random_range(-2.0..0.5)
                };
                let p: Params = [("x".to_string(), ParamValue::Float(x))].into_iter().collect();
                record(i, p, if good { 1.0 } else { 0.0 })
            })
            .collect();
        let inside = (0..200)
            .filter(|_| {
                let x = suggest(&hist, &s, &cfg, &mut r).unwrap()["x"].as_f64().unwrap();
                (1.0..=2.0).contains(&x)
            })
            .count();
        assert!(inside as f64 / 200.0 > 0.9, "{inside}");
    }

    #[test]
    fn study_is_reproducible_and_monotone() {
        let s = SearchSpace::beam_search();
        let cfg = TpeConfig { seed: 4, ..TpeConfig::default() };
        let obj = |p: &Params| Ok(-(p["length_penalty"].as_f64().unwrap() - 1.2).powi(2));
        let a = run_study(obj, &s, 25, &cfg, Vec::new(), true, |_| Ok(())).unwrap();
        let b = run_study(obj, &s, 25, &cfg, Vec::new(), true, |_| Ok(())).unwrap();
        assert_eq!(a, b);
        let mut best = f64::NEG_INFINITY;
        for t in &a.history {
            let v = t.objective.unwrap();
            assert!(v.max(best) >= best);
            best = best.max(v);
        }
        assert_eq!(a.best.objective, Some(best));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let s = SearchSpace::beam_search();
        let cfg = TpeConfig::default();
        let obj = |p: &Params| Ok(p["num_beams"].as_f64().unwrap());
        let full = run_study(obj, &s, 30, &cfg, Vec::new(), true, |_| Ok(())).unwrap();
        let part = run_study(obj, &s, 12, &cfg, Vec::new(), true, |_| Ok(())).unwrap();
        let resumed = run_study(obj, &s, 30, &cfg, part.history, true, |_| Ok(())).unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn failures_are_recorded_and_all_failed_errors() {
        let s = SearchSpace::beam_search();
        let cfg = TpeConfig::default();
        let mut calls = 0;
        let study = run_study(
            |_| {
                calls += 1;
                if calls % 2 == 0 {
                    Err(Error::Decode("boom".into()))
                } else {
                    Ok(f64::from(calls))
                }
            },
            &s,
            6,
            &cfg,
            Vec::new(),
            true,
            |_| Ok(()),
        )
        .unwrap();
        assert_eq!(study.history.iter().filter(|t| t.status == TrialStatus::Failed).count(), 3);
        assert_eq!(study.best.objective, Some(5.0));
        let err = run_study(|_| Ok(f64::NAN), &s, 3, &cfg, Vec::new(), true, |_| Ok(()));
        assert!(matches!(err, Err(Error::Study(_))));
    }

    #[test]
    fn trial_log_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.jsonl");
        let s = SearchSpace::beam_search();
        let cfg = TpeConfig::default();
        write_trial_log_header(&path, &TrialLogHeader::new(&s, &cfg)).unwrap();
        let k = std::cell::Cell::new(0u32);
        let objective = |_: &Params| {
            k.set(k.get() + 1);
            Ok((k.get() as f64).sqrt() / 3.0)
        };
        let study = run_study(objective, &s, 8, &cfg, Vec::new(), true, |r| append_trial(&path, r)).unwrap();
        let (header, rows) = read_trial_log(&path).unwrap();
        assert_eq!(header.space, s);
        assert_eq!(rows, study.history);
    }

    #[test]
    fn params_map_onto_beam_config() {
        let p: Params = [
            ("early_stopping".to_string(), ParamValue::Bool(false)),
            ("num_beams".to_string(), ParamValue::Int(15)),
            ("no_repeat_ngram_size".to_string(), ParamValue::Int(5)),
            ("length_penalty".to_string(), ParamValue::Float(-2.0)),
        ]
        .into_iter()
        .collect();
        let c = beam_config_from(&p, &BeamConfig::default()).unwrap();
        assert!(!c.early_stopping);
        assert_eq!((c.num_beams, c.no_repeat_ngram_size, c.length_penalty), (15, 5, -2.0));
        let bad: Params = [("beams".to_string(), ParamValue::Int(3))].into_iter().collect();
        assert!(beam_config_from(&bad, &BeamConfig::default()).is_err());
    }
}
