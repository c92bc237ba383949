//! Step-wise decoding with cached self-attention keys and values.

use std::sync::Arc;

use super::params::ParamStore;
use super::tensor::{log_softmax, Mat, Scalar};
use super::transformer::{pad_mask, validate_ids, ModelConfig, Network};
use crate::error::{Error, Result};

#[derive(Debug)]
struct CrossMemory<S> {
    /// per decoder layer: projected keys and values of the encoder output
    kv: Vec<(Mat<S>, Mat<S>)>,
    masked: Vec<bool>,
}

/// Decoder state for one hypothesis. Cloning shares the encoder side.
#[derive(Debug, Clone)]
pub struct DecodeState<S> {
    memory: Arc<CrossMemory<S>>,
    self_kv: Vec<(Mat<S>, Mat<S>)>,
    pos: usize,
}

impl<S> DecodeState<S> {
    /// Number of tokens fed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

fn append_row<S: Scalar>(m: &mut Mat<S>, row: &[S]) {
    m.data.extend_from_slice(row);
    m.rows += 1;
}

pub(crate) fn start<S: Scalar>(net: &Network, cfg: &ModelConfig, store: &ParamStore<S>, src: &[u32]) -> Result<DecodeState<S>> {
    let dec = net
        .dec
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("model is not a seq2seq model".into()))?;
    validate_ids(src, cfg)?;
    let mem = net.encode_apply(store, src);
    let kv = dec
        .layers
        .iter()
        .map(|l| (l.cross_attn.k.apply(store, &mem), l.cross_attn.v.apply(store, &mem)))
        .collect();
    let d = cfg.d_model;
    Ok(DecodeState {
        memory: Arc::new(CrossMemory {
            kv,
            masked: pad_mask(src),
        }),
        self_kv: dec
            .layers
            .iter()
            .map(|_| (Mat::zeros(0, d), Mat::zeros(0, d)))
            .collect(),
        pos: 0,
    })
}

pub(crate) fn step<S: Scalar>(
    net: &Network,
    cfg: &ModelConfig,
    store: &ParamStore<S>,
    state: &mut DecodeState<S>,
    token: u32,
) -> Result<Vec<f64>> {
    let dec = net
        .dec
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("model is not a seq2seq model".into()))?;
    if state.pos >= cfg.max_positions {
        return Err(Error::SequenceTooLong {
            len: state.pos + 1,
            limit: cfg.max_positions,
        });
    }
    validate_ids(&[token], cfg)?;
    let mut x = net.embed(store, &[token], dec.pos, state.pos);
    let self_masked = vec![false; state.pos + 1];
    for (l, layer) in dec.layers.iter().enumerate() {
        let s_in = layer.ln1.apply(store, &x);
        let sa = &layer.self_attn;
        let q = sa.q.apply(store, &s_in);
        let (ks, vs) = &mut state.self_kv[l];
        append_row(ks, &sa.k.apply(store, &s_in).data);
        append_row(vs, &sa.v.apply(store, &s_in).data);
        let (ctx, _) = sa.attend(&q, ks, vs, &self_masked, None);
        x.add_assign(&sa.o.apply(store, &ctx));

        let c_in = layer.ln2.apply(store, &x);
        let ca = &layer.cross_attn;
        let q = ca.q.apply(store, &c_in);
        let (mk, mv) = &state.memory.kv[l];
        let (ctx, _) = ca.attend(&q, mk, mv, &state.memory.masked, None);
        x.add_assign(&ca.o.apply(store, &ctx));

        let m_in = layer.ln3.apply(store, &x);
        x.add_assign(&layer.ffn.apply(store, &m_in));
    }
    state.pos += 1;
    let out = dec.ln.apply(store, &x);
    let logits = net.head.apply(store, &out);
    Ok(log_softmax(logits.row(0)).into_iter().map(Scalar::f64).collect())
}
