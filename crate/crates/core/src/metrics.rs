//! ROUGE-N, an embedding-based soft similarity F1, accuracy and the
//! aggregate scores used for reporting and decoding search.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, Scalar};
use crate::tokenizer::{surface_tokens, Vocab};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn lower_tokens(text: &str) -> Vec<String> {
    surface_tokens(text).into_iter().map(str::to_lowercase).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// ROUGE-N with clipped counts over lowercased surface tokens.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Result<RougeScore> {
    if n == 0 {
        return Err(Error::InvalidArgument("rouge n must be >= 1".into()));
    }
    let (c, r) = (lower_tokens(candidate), lower_tokens(reference));
    let (cc, rc) = (ngram_counts(&c, n), ngram_counts(&r, n));
    let c_total: usize = cc.values().sum();
    let r_total: usize = rc.values().sum();
    if c_total == 0 || r_total == 0 {
        return Ok(RougeScore::default());
    }
    let matches: usize = cc
        .iter()
        .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)))
        .sum();
    let precision = matches as f64 / c_total as f64;
    let recall = matches as f64 / r_total as f64;
    Ok(RougeScore {
        precision,
        recall,
        f1: harmonic(precision, recall),
    })
}

/// Source of one vector per surface token.
pub trait TokenEmbedder {
    fn embed(&self, token: &str) -> Vec<f64>;
}

/// Fixed Gaussian vector per lowercased token, seeded by the token's hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomProjectionEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for RandomProjectionEmbedder {
    fn default() -> Self {
        RandomProjectionEmbedder { dim: 64, seed: 0 }
    }
}

impl TokenEmbedder for RandomProjectionEmbedder {
    fn embed(&self, token: &str) -> Vec<f64> {
        let seed = crate::seed::derive_seed(self.seed, &token.to_lowercase());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

/// Token embeddings of a trained model; unknown tokens map to `<UNK>`.
pub struct ModelEmbedder<'a, S> {
    pub model: &'a Model<S>,
    pub vocab: &'a Vocab,
}

impl<S: Scalar> TokenEmbedder for ModelEmbedder<'_, S> {
    fn embed(&self, token: &str) -> Vec<f64> {
        let id = self.vocab.id_or_unk(token);
        self.model.token_embedding(id).iter().map(|v| v.f64()).collect()
    }
}

/// Lookup table embedder, mainly for tests and toy setups.
impl TokenEmbedder for HashMap<String, Vec<f64>> {
    fn embed(&self, token: &str) -> Vec<f64> {
        self.get(token).cloned().unwrap_or_default()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Greedy cosine matching in both directions, combined as an F1.
pub fn soft_similarity_f1(candidate: &str, reference: &str, embedder: &dyn TokenEmbedder) -> SimilarityScore {
    let c: Vec<Vec<f64>> = surface_tokens(candidate).into_iter().map(|t| embedder.embed(t)).collect();
    let r: Vec<Vec<f64>> = surface_tokens(reference).into_iter().map(|t| embedder.embed(t)).collect();
    if c.is_empty() || r.is_empty() {
        return SimilarityScore::default();
    }
    let sims: Vec<Vec<f64>> = r.iter().map(|rv| c.iter().map(|cv| cosine(rv, cv)).collect()).collect();
    let recall = sims
        .iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / r.len() as f64;
    let precision = (0..c.len())
        .map(|j| sims.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / c.len() as f64;
    SimilarityScore {
        precision,
        recall,
        f1: harmonic(precision, recall),
    }
}

pub fn accuracy(predictions: &[usize], gold: &[usize]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::InvalidArgument("no predictions to score".into()));
    }
    let correct = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / gold.len() as f64)
}

/// Mean of ROUGE-1 F1 and similarity F1 (the learned-metric slot is not computed).
pub fn task_aggregate(r1: &RougeScore, sim: &SimilarityScore) -> f64 {
    (r1.f1 + sim.f1) / 2.0
}

/// Mean of ROUGE-1, ROUGE-2 and similarity F1.
pub fn tuning_objective(r1: &RougeScore, r2: &RougeScore, sim: &SimilarityScore) -> f64 {
    (r1.f1 + r2.f1 + sim.f1) / 3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub id: String,
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub similarity: SimilarityScore,
    pub aggregate: f64,
    pub objective: f64,
}

pub fn score_summary(id: &str, candidate: &str, reference: &str, embedder: &dyn TokenEmbedder) -> ExampleScores {
    let rouge1 = rouge_n(candidate, reference, 1).expect("n = 1");
    let rouge2 = rouge_n(candidate, reference, 2).expect("n = 2");
    let similarity = soft_similarity_f1(candidate, reference, embedder);
    ExampleScores {
        id: id.to_string(),
        aggregate: task_aggregate(&rouge1, &similarity),
        objective: tuning_objective(&rouge1, &rouge2, &similarity),
        rouge1,
        rouge2,
        similarity,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusScores {
    pub n: usize,
    pub rouge1_f1: f64,
    pub rouge2_f1: f64,
    pub similarity_f1: f64,
    pub aggregate: f64,
    pub objective: f64,
}

/// Per-example rows plus their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<ExampleScores>,
    pub summary: CorpusScores,
    pub notes: Vec<String>,
}

pub fn summarize_scores(rows: &[ExampleScores]) -> CorpusScores {
    if rows.is_empty() {
        return CorpusScores::default();
    }
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&ExampleScores) -> f64| rows.iter().map(f).sum::<f64>() / n;
    CorpusScores {
        n: rows.len(),
        rouge1_f1: mean(&|r| r.rouge1.f1),
        rouge2_f1: mean(&|r| r.rouge2.f1),
        similarity_f1: mean(&|r| r.similarity.f1),
        aggregate: mean(&|r| r.aggregate),
        objective: mean(&|r| r.objective),
    }
}

pub fn metric_report(rows: Vec<ExampleScores>) -> MetricReport {
    MetricReport {
        summary: summarize_scores(&rows),
        rows,
        notes: vec![
            "similarity is an embedding-matching stand-in for a learned similarity metric".into(),
            "BLEURT: not computed; aggregate averages ROUGE-1 and similarity F1 only".into(),
        ],
    }
}
