//! Pre-LayerNorm transformer encoder (classifier) and encoder-decoder
//! (summarizer) sharing one token embedding table.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{
    dropout, dropout_backward, Attention, AttentionCache, FeedForward, FeedForwardCache, Fwd,
    LayerNorm, LayerNormCache, Linear, LinearCache,
};
use super::params::{Grads, ParamId, ParamKind, ParamStore};
use super::tensor::{log_softmax, Mat, Scalar};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenSeq, BOS, EOS, PAD, SOURCE_BUDGET};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_enc: usize,
    /// 0 builds an encoder-only classifier.
    pub n_layers_dec: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    /// Classifier output size; ignored for encoder-decoder models.
    pub n_classes: usize,
    pub dropout_p: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale classifier: d_model 64, 2 encoder layers, 4 heads, d_ff 128.
    pub fn toy_classifier(vocab_size: usize, n_classes: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_layers_enc: 2,
            n_layers_dec: 0,
            d_ff: 128,
            max_positions: SOURCE_BUDGET,
            n_classes,
            dropout_p: 0.1,
            seed: 0,
        }
    }

    /// Desk-scale summarizer: d_model 64, 2+2 layers, 4 heads, d_ff 128.
    pub fn toy_seq2seq(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers_dec: 2,
            n_classes: 0,
            ..Self::toy_classifier(vocab_size, 0)
        }
    }

    pub fn is_classifier(&self) -> bool {
        self.n_layers_dec == 0
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers_enc", self.n_layers_enc),
            ("d_ff", self.d_ff),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.is_classifier() && self.n_classes == 0 {
            return Err(Error::InvalidConfig("classifier needs n_classes >= 1".into()));
        }
        if self.vocab_size <= EOS as usize {
            return Err(Error::InvalidConfig("vocab_size must cover the reserved ids".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidConfig("dropout_p must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct EncoderLayer {
    ln1: LayerNorm,
    pub(crate) attn: Attention,
    ln2: LayerNorm,
    pub(crate) ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DecoderLayer {
    pub(crate) ln1: LayerNorm,
    pub(crate) self_attn: Attention,
    pub(crate) ln2: LayerNorm,
    pub(crate) cross_attn: Attention,
    pub(crate) ln3: LayerNorm,
    pub(crate) ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Decoder {
    pub(crate) pos: ParamId,
    pub(crate) layers: Vec<DecoderLayer>,
    pub(crate) ln: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Network {
    pub(crate) tok_emb: ParamId,
    pub(crate) enc_pos: ParamId,
    pub(crate) enc_layers: Vec<EncoderLayer>,
    pub(crate) enc_ln: LayerNorm,
    pub(crate) dec: Option<Decoder>,
    pub(crate) head: Linear,
}

impl Network {
    pub(crate) fn attention_blocks_mut(&mut self) -> Vec<&mut Attention> {
        let mut out: Vec<&mut Attention> = self.enc_layers.iter_mut().map(|l| &mut l.attn).collect();
        if let Some(dec) = &mut self.dec {
            for layer in &mut dec.layers {
                out.push(&mut layer.self_attn);
                out.push(&mut layer.cross_attn);
            }
        }
        out
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out: Vec<&mut Linear> = Vec::new();
        for layer in &mut self.enc_layers {
            let a = &mut layer.attn;
            out.extend([&mut a.q, &mut a.k, &mut a.v, &mut a.o]);
            out.extend([&mut layer.ffn.up, &mut layer.ffn.down]);
        }
        if let Some(dec) = &mut self.dec {
            for layer in &mut dec.layers {
                let a = &mut layer.self_attn;
                out.extend([&mut a.q, &mut a.k, &mut a.v, &mut a.o]);
                let c = &mut layer.cross_attn;
                out.extend([&mut c.q, &mut c.k, &mut c.v, &mut c.o]);
                out.extend([&mut layer.ffn.up, &mut layer.ffn.down]);
            }
        }
        out.push(&mut self.head);
        out
    }

    /// Rewrites every parameter id through `map` after tensors were removed.
    pub(crate) fn remap(&mut self, map: &[Option<usize>]) {
        let fix = |id: &mut ParamId| {
            id.0 = map[id.0].expect("remapped tensor was removed");
        };
        let fix_ln = |ln: &mut LayerNorm| {
            fix(&mut ln.gain);
            fix(&mut ln.bias);
        };
        fix(&mut self.tok_emb);
        fix(&mut self.enc_pos);
        for layer in &mut self.enc_layers {
            fix_ln(&mut layer.ln1);
            fix_ln(&mut layer.ln2);
        }
        fix_ln(&mut self.enc_ln);
        if let Some(dec) = &mut self.dec {
            fix(&mut dec.pos);
            for layer in &mut dec.layers {
                fix_ln(&mut layer.ln1);
                fix_ln(&mut layer.ln2);
                fix_ln(&mut layer.ln3);
            }
            fix_ln(&mut dec.ln);
        }
        for lin in self.linears_mut() {
            fix(&mut lin.w);
            fix(&mut lin.bias);
            if let Some(lora) = &mut lin.lora {
                fix(&mut lora.a);
                fix(&mut lora.b);
            }
        }
    }
}

struct Init<'a, S> {
    store: &'a mut ParamStore<S>,
    rng: ChaCha8Rng,
}

impl<S: Scalar> Init<'_, S> {
    fn normal(&mut self, name: String, shape: Vec<usize>, kind: ParamKind, std: f64) -> ParamId {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..n).map(|_| S::c(dist.sample(&mut self.rng))).collect();
        self.store.add(name, shape, kind, data)
    }

    fn constant(&mut self, name: String, shape: Vec<usize>, kind: ParamKind, value: f64) -> ParamId {
        let n = shape.iter().product();
        self.store.add(name, shape, kind, vec![S::c(value); n])
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize, kind: ParamKind, std: f64) -> Linear {
        let w = self.normal(format!("{name}.weight"), vec![d_out, d_in], kind, std);
        let bias_kind = if kind == ParamKind::Head { ParamKind::Head } else { ParamKind::Bias };
        let bias = self.constant(format!("{name}.bias"), vec![d_out], bias_kind, 0.0);
        Linear {
            name: name.to_string(),
            w,
            bias,
            d_in,
            d_out,
            lora: None,
        }
    }

    fn layer_norm(&mut self, name: &str, d: usize) -> LayerNorm {
        LayerNorm {
            gain: self.constant(format!("{name}.gain"), vec![d], ParamKind::Norm, 1.0),
            bias: self.constant(format!("{name}.bias"), vec![d], ParamKind::Norm, 0.0),
            d,
        }
    }

    fn attention(&mut self, name: &str, cfg: &ModelConfig) -> Attention {
        let d = cfg.d_model;
        let std = 1.0 / (d as f64).sqrt();
        Attention {
            q: self.linear(&format!("{name}.q"), d, d, ParamKind::Projection, std),
            k: self.linear(&format!("{name}.k"), d, d, ParamKind::Projection, std),
            v: self.linear(&format!("{name}.v"), d, d, ParamKind::Projection, std),
            o: self.linear(&format!("{name}.o"), d, d, ParamKind::Projection, std),
            n_heads: cfg.n_heads,
            d_model: d,
        }
    }

    fn ffn(&mut self, name: &str, cfg: &ModelConfig) -> FeedForward {
        FeedForward {
            up: self.linear(
                &format!("{name}.up"),
                cfg.d_model,
                cfg.d_ff,
                ParamKind::Projection,
                1.0 / (cfg.d_model as f64).sqrt(),
            ),
            down: self.linear(
                &format!("{name}.down"),
                cfg.d_ff,
                cfg.d_model,
                ParamKind::Projection,
                1.0 / (cfg.d_ff as f64).sqrt(),
            ),
        }
    }
}

pub(crate) fn build_network<S: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<S>) -> Network {
    let mut init = Init {
        store,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let d = cfg.d_model;
    let tok_emb = init.normal("tok_emb".into(), vec![cfg.vocab_size, d], ParamKind::Embedding, 1.0);
    let enc_pos = init.normal("enc.pos_emb".into(), vec![cfg.max_positions, d], ParamKind::Embedding, 0.5);
    let enc_layers = (0..cfg.n_layers_enc)
        .map(|l| EncoderLayer {
            ln1: init.layer_norm(&format!("enc.{l}.ln1"), d),
            attn: init.attention(&format!("enc.{l}.attn"), cfg),
            ln2: init.layer_norm(&format!("enc.{l}.ln2"), d),
            ffn: init.ffn(&format!("enc.{l}.ffn"), cfg),
        })
        .collect();
    let enc_ln = init.layer_norm("enc.ln", d);
    let dec = (!cfg.is_classifier()).then(|| Decoder {
        pos: init.normal("dec.pos_emb".into(), vec![cfg.max_positions, d], ParamKind::Embedding, 0.5),
        layers: (0..cfg.n_layers_dec)
            .map(|l| DecoderLayer {
                ln1: init.layer_norm(&format!("dec.{l}.ln1"), d),
                self_attn: init.attention(&format!("dec.{l}.self_attn"), cfg),
                ln2: init.layer_norm(&format!("dec.{l}.ln2"), d),
                cross_attn: init.attention(&format!("dec.{l}.cross_attn"), cfg),
                ln3: init.layer_norm(&format!("dec.{l}.ln3"), d),
                ffn: init.ffn(&format!("dec.{l}.ffn"), cfg),
            })
            .collect(),
        ln: init.layer_norm("dec.ln", d),
    });
    let head_out = if cfg.is_classifier() {
        cfg.n_classes
    } else {
        cfg.vocab_size
    };
    let head = init.linear("head", d, head_out, ParamKind::Head, 0.02);
    Network {
        tok_emb,
        enc_pos,
        enc_layers,
        enc_ln,
        dec,
        head,
    }
}

/// One supervised example in token-id form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainExample {
    Classify { input: Vec<u32>, label: usize },
    /// `tgt` holds the summary tokens without BOS/EOS; the decoder is fed
    /// `BOS + tgt` and predicts `tgt + EOS`.
    Seq2Seq { src: Vec<u32>, tgt: Vec<u32> },
}

impl TrainExample {
    /// Number of supervised positions.
    pub fn target_count(&self) -> usize {
        match self {
            TrainExample::Classify { .. } => 1,
            TrainExample::Seq2Seq { tgt, .. } => tgt.iter().filter(|&&t| t != PAD).count() + 1,
        }
    }
}

struct EncLayerCache<S> {
    ln1: LayerNormCache<S>,
    attn: AttentionCache<S>,
    drop1: Option<Vec<S>>,
    ln2: LayerNormCache<S>,
    ffn: FeedForwardCache<S>,
    drop2: Option<Vec<S>>,
}

struct DecLayerCache<S> {
    ln1: LayerNormCache<S>,
    self_attn: AttentionCache<S>,
    drop1: Option<Vec<S>>,
    ln2: LayerNormCache<S>,
    cross_attn: AttentionCache<S>,
    drop2: Option<Vec<S>>,
    ln3: LayerNormCache<S>,
    ffn: FeedForwardCache<S>,
    drop3: Option<Vec<S>>,
}

struct EncoderCache<S> {
    ids: Vec<u32>,
    emb_drop: Option<Vec<S>>,
    layers: Vec<EncLayerCache<S>>,
    ln: LayerNormCache<S>,
}

struct DecoderCache<S> {
    ids: Vec<u32>,
    emb_drop: Option<Vec<S>>,
    layers: Vec<DecLayerCache<S>>,
    ln: LayerNormCache<S>,
}

fn add<S: Scalar>(mut a: Mat<S>, b: &Mat<S>) -> Mat<S> {
    a.add_assign(b);
    a
}

impl EncoderLayer {
    fn forward<S: Scalar>(&self, f: &mut Fwd<'_, S>, x: Mat<S>, masked: &[bool], p: f64) -> (Mat<S>, EncLayerCache<S>) {
        let (a_in, ln1) = self.ln1.forward(f.store, &x);
        let (a, attn) = self.attn.forward(f, &a_in, &a_in, masked, false);
        let (a, drop1) = dropout(f, a, p);
        let h = add(x, &a);
        let (m_in, ln2) = self.ln2.forward(f.store, &h);
        let (m, ffn) = self.ffn.forward(f, &m_in);
        let (m, drop2) = dropout(f, m, p);
        (
            add(h, &m),
            EncLayerCache {
                ln1,
                attn,
                drop1,
                ln2,
                ffn,
                drop2,
            },
        )
    }

    fn apply<S: Scalar>(&self, store: &ParamStore<S>, x: Mat<S>, masked: &[bool]) -> Mat<S> {
        let mut f = Fwd { store, rng: None };
        self.forward(&mut f, x, masked, 0.0).0
    }

    fn backward<S: Scalar>(&self, store: &ParamStore<S>, grads: &mut Grads<S>, c: &EncLayerCache<S>, dy: Mat<S>) -> Mat<S> {
        let dm = dropout_backward(dy.clone(), &c.drop2);
        let dm_in = self.ffn.backward(store, grads, &c.ffn, &dm);
        let dh = add(dy, &self.ln2.backward(store, grads, &c.ln2, &dm_in));
        let da = dropout_backward(dh.clone(), &c.drop1);
        let (dq, dkv) = self.attn.backward(store, grads, &c.attn, &da);
        let da_in = add(dq, &dkv);
        add(dh, &self.ln1.backward(store, grads, &c.ln1, &da_in))
    }
}

impl DecoderLayer {
    fn forward<S: Scalar>(
        &self,
        f: &mut Fwd<'_, S>,
        x: Mat<S>,
        self_masked: &[bool],
        memory: &Mat<S>,
        mem_masked: &[bool],
        p: f64,
    ) -> (Mat<S>, DecLayerCache<S>) {
        let (s_in, ln1) = self.ln1.forward(f.store, &x);
        let (s, self_attn) = self.self_attn.forward(f, &s_in, &s_in, self_masked, true);
        let (s, drop1) = dropout(f, s, p);
        let h1 = add(x, &s);
        let (c_in, ln2) = self.ln2.forward(f.store, &h1);
        let (c, cross_attn) = self.cross_attn.forward(f, &c_in, memory, mem_masked, false);
        let (c, drop2) = dropout(f, c, p);
        let h2 = add(h1, &c);
        let (m_in, ln3) = self.ln3.forward(f.store, &h2);
        let (m, ffn) = self.ffn.forward(f, &m_in);
        let (m, drop3) = dropout(f, m, p);
        (
            add(h2, &m),
            DecLayerCache {
                ln1,
                self_attn,
                drop1,
                ln2,
                cross_attn,
                drop2,
                ln3,
                ffn,
                drop3,
            },
        )
    }

    /// Returns `(dx, dmemory)`.
    fn backward<S: Scalar>(&self, store: &ParamStore<S>, grads: &mut Grads<S>, c: &DecLayerCache<S>, dy: Mat<S>) -> (Mat<S>, Mat<S>) {
        let dm = dropout_backward(dy.clone(), &c.drop3);
        let dm_in = self.ffn.backward(store, grads, &c.ffn, &dm);
        let dh2 = add(dy, &self.ln3.backward(store, grads, &c.ln3, &dm_in));
        let dc = dropout_backward(dh2.clone(), &c.drop2);
        let (dc_in, dmem) = self.cross_attn.backward(store, grads, &c.cross_attn, &dc);
        let dh1 = add(dh2, &self.ln2.backward(store, grads, &c.ln2, &dc_in));
        let ds = dropout_backward(dh1.clone(), &c.drop1);
        let (dq, dkv) = self.self_attn.backward(store, grads, &c.self_attn, &ds);
        let ds_in = add(dq, &dkv);
        (add(dh1, &self.ln1.backward(store, grads, &c.ln1, &ds_in)), dmem)
    }
}

pub(crate) fn pad_mask(ids: &[u32]) -> Vec<bool> {
    ids.iter().map(|&t| t == PAD).collect()
}

impl Network {
    pub(crate) fn embed<S: Scalar>(&self, store: &ParamStore<S>, ids: &[u32], pos: ParamId, offset: usize) -> Mat<S> {
        let tok = store.get(self.tok_emb);
        let pos_t = store.get(pos);
        let d = self.enc_ln.d;
        let mut x = Mat::zeros(ids.len(), d);
        for (t, &id) in ids.iter().enumerate() {
            let row = x.row_mut(t);
            let te = &tok[id as usize * d..(id as usize + 1) * d];
            let pe = &pos_t[(t + offset) * d..(t + offset + 1) * d];
            for ((o, &a), &b) in row.iter_mut().zip(te).zip(pe) {
                *o = a + b;
            }
        }
        x
    }

    fn embed_backward<S: Scalar>(&self, store: &ParamStore<S>, grads: &mut Grads<S>, ids: &[u32], pos: ParamId, dx: &Mat<S>) {
        let d = self.enc_ln.d;
        if store.trainable(self.tok_emb) {
            let g = grads.get_mut(self.tok_emb);
            for (t, &id) in ids.iter().enumerate() {
                for (a, &v) in g[id as usize * d..(id as usize + 1) * d].iter_mut().zip(dx.row(t)) {
                    *a += v;
                }
            }
        }
        if store.trainable(pos) {
            let g = grads.get_mut(pos);
            for t in 0..ids.len() {
                for (a, &v) in g[t * d..(t + 1) * d].iter_mut().zip(dx.row(t)) {
                    *a += v;
                }
            }
        }
    }

    fn encode_fwd<S: Scalar>(&self, f: &mut Fwd<'_, S>, ids: &[u32], p: f64) -> (Mat<S>, EncoderCache<S>) {
        let masked = pad_mask(ids);
        let x = self.embed(f.store, ids, self.enc_pos, 0);
        let (mut x, emb_drop) = dropout(f, x, p);
        let mut layers = Vec::with_capacity(self.enc_layers.len());
        for layer in &self.enc_layers {
            let (y, c) = layer.forward(f, x, &masked, p);
            layers.push(c);
            x = y;
        }
        let (mem, ln) = self.enc_ln.forward(f.store, &x);
        (
            mem,
            EncoderCache {
                ids: ids.to_vec(),
                emb_drop,
                layers,
                ln,
            },
        )
    }

    pub(crate) fn encode_apply<S: Scalar>(&self, store: &ParamStore<S>, ids: &[u32]) -> Mat<S> {
        let masked = pad_mask(ids);
        let mut x = self.embed(store, ids, self.enc_pos, 0);
        for layer in &self.enc_layers {
            x = layer.apply(store, x, &masked);
        }
        self.enc_ln.apply(store, &x)
    }

    fn encode_backward<S: Scalar>(&self, store: &ParamStore<S>, grads: &mut Grads<S>, c: &EncoderCache<S>, dmem: &Mat<S>) {
        let mut dx = self.enc_ln.backward(store, grads, &c.ln, dmem);
        for (layer, lc) in self.enc_layers.iter().zip(&c.layers).rev() {
            dx = layer.backward(store, grads, lc, dx);
        }
        let dx = dropout_backward(dx, &c.emb_drop);
        self.embed_backward(store, grads, &c.ids, self.enc_pos, &dx);
    }

    fn decode_fwd<S: Scalar>(
        &self,
        f: &mut Fwd<'_, S>,
        ids: &[u32],
        memory: &Mat<S>,
        mem_masked: &[bool],
        p: f64,
    ) -> (Mat<S>, DecoderCache<S>) {
        let dec = self.dec.as_ref().expect("decoder present");
        let self_masked = pad_mask(ids);
        let x = self.embed(f.store, ids, dec.pos, 0);
        let (mut x, emb_drop) = dropout(f, x, p);
        let mut layers = Vec::with_capacity(dec.layers.len());
        for layer in &dec.layers {
            let (y, c) = layer.forward(f, x, &self_masked, memory, mem_masked, p);
            layers.push(c);
            x = y;
        }
        let (out, ln) = dec.ln.forward(f.store, &x);
        (
            out,
            DecoderCache {
                ids: ids.to_vec(),
                emb_drop,
                layers,
                ln,
            },
        )
    }

    /// Returns the gradient with respect to the encoder memory.
    fn decode_backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        grads: &mut Grads<S>,
        c: &DecoderCache<S>,
        dout: &Mat<S>,
        mem_rows: usize,
    ) -> Mat<S> {
        let dec = self.dec.as_ref().expect("decoder present");
        let mut dmem = Mat::zeros(mem_rows, dec.ln.d);
        let mut dx = dec.ln.backward(store, grads, &c.ln, dout);
        for (layer, lc) in dec.layers.iter().zip(&c.layers).rev() {
            let (d, dm) = layer.backward(store, grads, lc, dx);
            dmem.add_assign(&dm);
            dx = d;
        }
        let dx = dropout_backward(dx, &c.emb_drop);
        self.embed_backward(store, grads, &c.ids, dec.pos, &dx);
        dmem
    }

    fn head_fwd<S: Scalar>(&self, f: &mut Fwd<'_, S>, x: &Mat<S>) -> (Mat<S>, LinearCache<S>) {
        self.head.forward(f, x)
    }
}

/// Result of one forward/backward pass over a single example.
pub(crate) struct ExampleLoss {
    pub nll_sum: f64,
    pub count: usize,
}

fn check_len(len: usize, limit: usize) -> Result<()> {
    if len > limit {
        return Err(Error::SequenceTooLong { len, limit });
    }
    Ok(())
}

/// Computes the loss of one example and, when `grads` is given, accumulates
/// `weight ×` its gradient.
pub(crate) fn example_pass<S: Scalar>(
    net: &Network,
    cfg: &ModelConfig,
    store: &ParamStore<S>,
    ex: &TrainExample,
    rng: Option<&mut ChaCha8Rng>,
    grads: Option<&mut Grads<S>>,
    weight: f64,
) -> Result<ExampleLoss> {
    let p = if rng.is_some() { cfg.dropout_p } else { 0.0 };
    let mut f = Fwd { store, rng };
    match ex {
        TrainExample::Classify { input, label } => {
            if !cfg.is_classifier() {
                return Err(Error::InvalidArgument("classification example for a seq2seq model".into()));
            }
            validate_ids(input, cfg)?;
            if *label >= cfg.n_classes {
                return Err(Error::InvalidArgument(format!("label {label} out of range")));
            }
            let (mem, enc_cache) = net.encode_fwd(&mut f, input, p);
            let pooled = Mat::from_vec(1, mem.cols, mem.row(0).to_vec());
            let (logits, head_cache) = net.head_fwd(&mut f, &pooled);
            let lp = log_softmax(logits.row(0));
            let nll = -lp[*label].f64();
            if let Some(grads) = grads {
                let mut dlogits = Mat::zeros(1, cfg.n_classes);
                for (c, (g, &l)) in dlogits.row_mut(0).iter_mut().zip(&lp).enumerate() {
                    let onehot = if c == *label { 1.0 } else { 0.0 };
                    *g = S::c(weight * (l.f64().exp() - onehot));
                }
                let dpooled = net.head.backward(store, grads, &head_cache, &dlogits);
                let mut dmem = Mat::zeros(mem.rows, mem.cols);
                dmem.row_mut(0).copy_from_slice(dpooled.row(0));
                net.encode_backward(store, grads, &enc_cache, &dmem);
            }
            Ok(ExampleLoss { nll_sum: nll, count: 1 })
        }
        TrainExample::Seq2Seq { src, tgt } => {
            if cfg.is_classifier() {
                return Err(Error::InvalidArgument("seq2seq example for a classifier".into()));
            }
            validate_ids(src, cfg)?;
            let mut dec_in = Vec::with_capacity(tgt.len() + 1);
            dec_in.push(BOS);
            dec_in.extend_from_slice(tgt);
            let mut dec_tgt = tgt.clone();
            dec_tgt.push(EOS);
            validate_ids(&dec_in, cfg)?;
            let (mem, enc_cache) = net.encode_fwd(&mut f, src, p);
            let mem_masked = pad_mask(src);
            let (states, dec_cache) = net.decode_fwd(&mut f, &dec_in, &mem, &mem_masked, p);
            let (logits, head_cache) = net.head_fwd(&mut f, &states);
            let mut nll_sum = 0.0;
            let mut count = 0;
            let mut dlogits = grads.as_ref().map(|_| Mat::zeros(logits.rows, logits.cols));
            for (t, &target) in dec_tgt.iter().enumerate() {
                if target == PAD {
                    continue;
                }
                let lp = log_softmax(logits.row(t));
                nll_sum -= lp[target as usize].f64();
                count += 1;
                if let Some(dl) = dlogits.as_mut() {
                    for (v, (g, &l)) in dl.row_mut(t).iter_mut().zip(&lp).enumerate() {
                        let onehot = if v == target as usize { 1.0 } else { 0.0 };
                        *g = S::c(weight * (l.f64().exp() - onehot));
                    }
                }
            }
            if let (Some(grads), Some(dl)) = (grads, dlogits) {
                let dstates = net.head.backward(store, grads, &head_cache, &dl);
                let dmem = net.decode_backward(store, grads, &dec_cache, &dstates, mem.rows);
                net.encode_backward(store, grads, &enc_cache, &dmem);
            }
            Ok(ExampleLoss { nll_sum, count })
        }
    }
}

pub(crate) fn validate_ids(ids: &[u32], cfg: &ModelConfig) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    check_len(ids.len(), cfg.max_positions)?;
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id: bad,
            size: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Eval-mode classifier logits.
pub(crate) fn classify_logits<S: Scalar>(net: &Network, cfg: &ModelConfig, store: &ParamStore<S>, seq: &TokenSeq) -> Result<Vec<S>> {
    if !cfg.is_classifier() {
        return Err(Error::InvalidArgument("model is not a classifier".into()));
    }
    validate_ids(&seq.ids, cfg)?;
    let mem = net.encode_apply(store, &seq.ids);
    let pooled = Mat::from_vec(1, mem.cols, mem.row(0).to_vec());
    Ok(net.head.apply(store, &pooled).data)
}

/// Eval-mode teacher-forced next-token log-probabilities, one row per prefix position.
pub(crate) fn seq2seq_logprobs<S: Scalar>(
    net: &Network,
    cfg: &ModelConfig,
    store: &ParamStore<S>,
    src: &TokenSeq,
    tgt_prefix: &TokenSeq,
) -> Result<Mat<S>> {
    if cfg.is_classifier() {
        return Err(Error::InvalidArgument("model is not a seq2seq model".into()));
    }
    validate_ids(&src.ids, cfg)?;
    validate_ids(&tgt_prefix.ids, cfg)?;
    let mut f = Fwd { store, rng: None };
    let mem = net.encode_apply(store, &src.ids);
    let (states, _) = net.decode_fwd(&mut f, &tgt_prefix.ids, &mem, &pad_mask(&src.ids), 0.0);
    let logits = net.head.apply(store, &states);
    let mut out = Mat::zeros(logits.rows, logits.cols);
    for t in 0..logits.rows {
        out.row_mut(t).copy_from_slice(&log_softmax(logits.row(t)));
    }
    Ok(out)
}
