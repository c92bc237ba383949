//! Small transformer models with LoRA adapters, trained on the CPU with
//! hand-written backward passes.

mod checkpoint;
mod incremental;
mod layers;
mod lora;
mod optim;
mod params;
pub mod tensor;
mod train;
mod transformer;

use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use incremental::DecodeState;
pub use lora::{LoraSpec, Projection};
pub use optim::AdamW;
pub use params::{Grads, Param, ParamId, ParamKind, ParamStore};
pub use tensor::{Mat, Scalar};
pub use train::{evaluate_loss, train, EpochRecord, TrainConfig, TrainReport};
pub use transformer::{ModelConfig, TrainExample};

use crate::error::{Error, Result};
use crate::tokenizer::TokenSeq;
use transformer::Network;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
}

impl ParamCount {
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

/// A classifier (encoder only) or summarizer (encoder-decoder).
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S = f32> {
    cfg: ModelConfig,
    store: ParamStore<S>,
    net: Network,
    lora: Option<LoraSpec>,
}

/// Builds a freshly initialised model; every tensor starts trainable.
pub fn init_model(cfg: &ModelConfig) -> Result<Model<f32>> {
    Model::new(cfg.clone())
}

impl<S: Scalar> Model<S> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let net = transformer::build_network(&cfg, &mut store);
        Ok(Model {
            cfg,
            store,
            net,
            lora: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn lora_spec(&self) -> Option<&LoraSpec> {
        self.lora.as_ref()
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn attach_lora(&mut self, spec: &LoraSpec) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::AdapterAttached);
        }
        spec.validate()?;
        lora::attach(&mut self.net, &mut self.store, spec, self.cfg.seed);
        self.lora = Some(spec.clone());
        Ok(())
    }

    /// Folds the adapter into the base weights; the result has the same
    /// outputs and no adapter tensors.
    pub fn merge_lora(&mut self) -> Result<()> {
        if self.lora.take().is_none() {
            return Err(Error::NoAdapter);
        }
        lora::merge(&mut self.net, &mut self.store);
        Ok(())
    }

    pub fn count_parameters(&self) -> ParamCount {
        ParamCount {
            total: self.store.total_count(),
            trainable: self.store.trainable_count(),
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.store.iter_mut() {
            p.trainable = trainable;
        }
    }

    /// Classifier logits for one encoded input (eval mode).
    pub fn forward_classify(&self, seq: &TokenSeq) -> Result<Vec<S>> {
        transformer::classify_logits(&self.net, &self.cfg, &self.store, seq)
    }

    /// Teacher-forced next-token log-probabilities: row `t` is the
    /// distribution after reading `tgt_prefix[..=t]`.
    pub fn forward_seq2seq(&self, src: &TokenSeq, tgt_prefix: &TokenSeq) -> Result<Mat<S>> {
        transformer::seq2seq_logprobs(&self.net, &self.cfg, &self.store, src, tgt_prefix)
    }

    /// Summed NLL and supervised-position count of one example (eval mode).
    pub fn example_loss(&self, ex: &TrainExample) -> Result<(f64, usize)> {
        let l = transformer::example_pass(&self.net, &self.cfg, &self.store, ex, None, None, 0.0)?;
        Ok((l.nll_sum, l.count))
    }

    /// Like [`Model::example_loss`] but also accumulates `weight ×` the
    /// gradient into `grads`. Dropout is active when `rng` is given.
    pub fn example_loss_grad(
        &self,
        ex: &TrainExample,
        weight: f64,
        rng: Option<&mut ChaCha8Rng>,
        grads: &mut Grads<S>,
    ) -> Result<(f64, usize)> {
        let l = transformer::example_pass(&self.net, &self.cfg, &self.store, ex, rng, Some(grads), weight)?;
        Ok((l.nll_sum, l.count))
    }

    /// Row of the shared token embedding table.
    pub fn token_embedding(&self, id: u32) -> &[S] {
        let d = self.cfg.d_model;
        let i = id as usize;
        &self.store.get(self.net.tok_emb)[i * d..(i + 1) * d]
    }

    /// Encodes `src` and returns the state for step-wise decoding.
    pub fn start_decode(&self, src: &[u32]) -> Result<DecodeState<S>> {
        incremental::start(&self.net, &self.cfg, &self.store, src)
    }

    /// Feeds `token` and returns next-token log-probabilities.
    pub fn step_decode(&self, state: &mut DecodeState<S>, token: u32) -> Result<Vec<f64>> {
        incremental::step(&self.net, &self.cfg, &self.store, state, token)
    }
}

/// Mean negative log-likelihood of `targets` under row-wise log-probabilities,
/// skipping positions whose target equals `pad`.
pub fn nll_loss<S: Scalar>(logprobs: &Mat<S>, targets: &[u32], pad: Option<u32>) -> Result<f64> {
    if logprobs.rows != targets.len() {
        return Err(Error::Shape(format!(
            "{} rows of log-probabilities for {} targets",
            logprobs.rows,
            targets.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (t, &y) in targets.iter().enumerate() {
        if Some(y) == pad {
            continue;
        }
        let row = logprobs.row(t);
        let v = row.get(y as usize).ok_or(Error::TokenOutOfRange {
            id: y,
            size: logprobs.cols,
        })?;
        sum -= v.f64();
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("every target position is padding".into()));
    }
    Ok(sum / n as f64)
}
