use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{Attention, Linear, LoraAdapter};
use super::params::{ParamKind, ParamStore};
use super::tensor::Scalar;
use super::transformer::Network;
use crate::error::{Error, Result};
use crate::seed::rng_from;

const LORA_A_STD: f64 = 0.02;

/// Attention projection an adapter can be attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    fn select(self, attn: &mut Attention) -> &mut Linear {
        match self {
            Projection::Query => &mut attn.q,
            Projection::Key => &mut attn.k,
            Projection::Value => &mut attn.v,
            Projection::Output => &mut attn.o,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub r: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub target_projections: Vec<Projection>,
}

impl LoraSpec {
    /// r 8, alpha 32, dropout 0.01 on query and value.
    pub fn classification() -> Self {
        LoraSpec {
            r: 8,
            alpha: 32.0,
            dropout_p: 0.01,
            target_projections: vec![Projection::Query, Projection::Value],
        }
    }

    /// r 8, alpha 32, dropout 1e-3 on query and value.
    pub fn summarization() -> Self {
        LoraSpec {
            dropout_p: 1e-3,
            ..Self::classification()
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.r as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::InvalidConfig("lora r must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig("lora alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidConfig("lora dropout must be in [0, 1)".into()));
        }
        if self.target_projections.is_empty() {
            return Err(Error::InvalidConfig("lora needs at least one target projection".into()));
        }
        Ok(())
    }
}

/// Adds adapters to every attention block and freezes everything except
/// adapters and the task head.
pub(crate) fn attach<S: Scalar>(net: &mut Network, store: &mut ParamStore<S>, spec: &LoraSpec, seed: u64) {
    let mut rng = rng_from(seed, "lora");
    let normal = Normal::new(0.0, LORA_A_STD).expect("positive std");
    let mut targets = spec.target_projections.clone();
    targets.sort();
    targets.dedup();
    for attn in net.attention_blocks_mut() {
        for &proj in &targets {
            let lin = proj.select(attn);
            let a_data = (0..spec.r * lin.d_in)
                .map(|_| S::c(normal.sample(&mut rng)))
                .collect();
            let a = store.add(format!("{}.lora_a", lin.name), vec![spec.r, lin.d_in], ParamKind::LoraA, a_data);
            let b = store.add(
                format!("{}.lora_b", lin.name),
                vec![lin.d_out, spec.r],
                ParamKind::LoraB,
                vec![S::zero(); lin.d_out * spec.r],
            );
            lin.lora = Some(LoraAdapter {
                a,
                b,
                r: spec.r,
                scale: spec.scale(),
                dropout_p: spec.dropout_p,
            });
        }
    }
    for p in store.iter_mut() {
        p.trainable = p.kind.is_lora() || p.kind == ParamKind::Head;
    }
}

/// Folds `scale · B · A` into each adapted weight and drops the adapter tensors.
pub(crate) fn merge<S: Scalar>(net: &mut Network, store: &mut ParamStore<S>) {
    let mut removed = Vec::new();
    for attn in net.attention_blocks_mut() {
        for lin in [&mut attn.q, &mut attn.k, &mut attn.v, &mut attn.o] {
            let Some(lora) = lin.lora.take() else { continue };
            let a = store.get(lora.a).to_vec();
            let b = store.get(lora.b).to_vec();
            let (d_in, r) = (lin.d_in, lora.r);
            let scale = S::c(lora.scale);
            let w = store.get_mut(lin.w);
            for o in 0..lin.d_out {
                for k in 0..r {
                    let bk = b[o * r + k] * scale;
                    if bk == S::zero() {
                        continue;
                    }
                    for (wi, &ai) in w[o * d_in..(o + 1) * d_in].iter_mut().zip(&a[k * d_in..(k + 1) * d_in]) {
                        *wi += bk * ai;
                    }
                }
            }
            removed.push(lora.a);
            removed.push(lora.b);
        }
    }
    let map = store.remove(&removed);
    net.remap(&map);
}
