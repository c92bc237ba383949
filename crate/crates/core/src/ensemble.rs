//! Fold ensembles: raw-logit averaging for classification and medoid
//! selection among generated summaries.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ProcessedExample, SectionHeader};
use crate::decode::{summarize, BeamConfig};
use crate::error::{Error, Result};
use crate::metrics::TokenEmbedder;
use crate::model::{Model, Scalar};
use crate::tokenizer::{surface_tokens, Vocab, CLASSIFIER_BUDGET};

/// Element-wise mean of raw logits.
pub fn average_logits(per_model: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_model
        .first()
        .ok_or_else(|| Error::InvalidArgument("no logits to average".into()))?;
    if per_model.iter().any(|l| l.len() != first.len()) {
        return Err(Error::Shape("logit vectors differ in length".into()));
    }
    let n = per_model.len() as f64;
    Ok((0..first.len())
        .map(|c| per_model.iter().map(|l| l[c]).sum::<f64>() / n)
        .collect())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeaderPrediction {
    pub header: SectionHeader,
    pub per_model_logits: Vec<Vec<f64>>,
    pub mean_logits: Vec<f64>,
}

/// Runs `text` through every classifier and averages their logits.
pub fn predict_header<S: Scalar>(models: &[&Model<S>], vocab: &Vocab, text: &str) -> Result<HeaderPrediction> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("no classifier models".into()));
    }
    if text.trim().is_empty() {
        return Err(Error::InvalidArgument("empty dialogue".into()));
    }
    let per_model_logits = models
        .iter()
        .map(|m| {
            let budget = CLASSIFIER_BUDGET.min(m.config().max_positions);
            let seq = vocab.encode(text, budget, true);
            Ok(m.forward_classify(&seq)?.into_iter().map(Scalar::f64).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let mean_logits = average_logits(&per_model_logits)?;
    let class = argmax(&mean_logits);
    let header = SectionHeader::from_class_id(class)
        .ok_or_else(|| Error::InvalidArgument(format!("class {class} is not a section header")))?;
    Ok(HeaderPrediction {
        header,
        per_model_logits,
        mean_logits,
    })
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

fn mean_pooled(text: &str, embedder: &dyn TokenEmbedder) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    let toks = surface_tokens(text);
    for t in &toks {
        let e = embedder.embed(t);
        if acc.is_empty() {
            acc = vec![0.0; e.len()];
        }
        for (a, v) in acc.iter_mut().zip(e) {
            *a += v;
        }
    }
    let n = toks.len().max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Cosine of mean-pooled token embeddings; 0 when either text is empty.
pub fn summary_similarity(a: &str, b: &str, embedder: &dyn TokenEmbedder) -> f64 {
    cosine(&mean_pooled(a, embedder), &mean_pooled(b, embedder))
}

/// How candidate summaries are compared.
#[derive(Clone, Copy)]
pub enum SimilarityBackend<'a> {
    Embedding(&'a dyn TokenEmbedder),
    /// TF-IDF cosine with document frequencies taken over the candidate set.
    Tfidf,
}

impl SimilarityBackend<'_> {
    pub fn id(&self) -> &'static str {
        match self {
            SimilarityBackend::Embedding(_) => "embedding",
            SimilarityBackend::Tfidf => "tfidf",
        }
    }

    fn vectors(&self, texts: &[String]) -> Vec<Vec<f64>> {
        match self {
            SimilarityBackend::Embedding(e) => texts.iter().map(|t| mean_pooled(t, *e)).collect(),
            SimilarityBackend::Tfidf => tfidf_vectors(texts),
        }
    }
}

fn tfidf_vectors(texts: &[String]) -> Vec<Vec<f64>> {
    let docs: Vec<Vec<String>> = texts
        .iter()
        .map(|t| surface_tokens(t).into_iter().map(str::to_lowercase).collect())
        .collect();
    let mut vocab: Vec<&String> = docs.iter().flatten().collect();
    vocab.sort();
    vocab.dedup();
    let index: HashMap<&String, usize> = vocab.iter().enumerate().map(|(i, t)| (*t, i)).collect();
    let n = docs.len() as f64;
    let mut df = vec![0.0; vocab.len()];
    for d in &docs {
        let mut seen: Vec<usize> = d.iter().map(|t| index[t]).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.into_iter().for_each(|i| df[i] += 1.0);
    }
    docs.iter()
        .map(|d| {
            let mut v = vec![0.0; vocab.len()];
            for t in d {
                v[index[t]] += 1.0;
            }
            for (i, x) in v.iter_mut().enumerate() {
                *x *= ((1.0 + n) / (1.0 + df[i])).ln() + 1.0;
            }
            v
        })
        .collect()
}

/// Audit record of a medoid selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSelection {
    pub candidates: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub totals: Vec<f64>,
    pub chosen: usize,
    pub backend: String,
}

impl EnsembleSelection {
    pub fn chosen_text(&self) -> &str {
        &self.candidates[self.chosen]
    }
}

/// Picks the candidate with the largest total similarity to the others.
pub fn post_ensemble_select(candidates: &[String], backend: SimilarityBackend<'_>) -> Result<EnsembleSelection> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate summaries".into()));
    }
    let vecs = backend.vectors(candidates);
    let n = candidates.len();
    let mut matrix = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let s = cosine(&vecs[i], &vecs[j]);
            matrix[i][j] = s;
            matrix[j][i] = s;
        }
    }
    // ascending summation so identical candidates get bit-identical totals
    let totals: Vec<f64> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| matrix[i][j]).collect();
            row.sort_by(f64::total_cmp);
            row.iter().sum()
        })
        .collect();
    Ok(EnsembleSelection {
        candidates: candidates.to_vec(),
        chosen: argmax(&totals),
        matrix,
        totals,
        backend: backend.id().to_string(),
    })
}

/// Decodes `example` with every summarizer and returns the medoid output.
pub fn ensemble_summarize<S: Scalar>(
    models: &[&Model<S>],
    vocab: &Vocab,
    example: &ProcessedExample,
    cfg: &BeamConfig,
    backend: SimilarityBackend<'_>,
) -> Result<EnsembleSelection> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("no summarizer models".into()));
    }
    let outputs: Vec<Result<String>> = models
        .par_iter()
        .map(|m| summarize(m, vocab, &example.summarizer_input, cfg))
        .collect();
    let mut candidates = Vec::with_capacity(outputs.len());
    let mut last_err = None;
    for (i, out) in outputs.into_iter().enumerate() {
        match out {
            Ok(s) => candidates.push(s),
            Err(e) => {
                log::warn!("model {i} failed on {}: {e}", example.id);
                last_err = Some(e);
            }
        }
    }
    if candidates.is_empty() {
        return Err(last_err.unwrap_or_else(|| Error::Decode("no candidates".into())));
    }
    post_ensemble_select(&candidates, backend)
}
