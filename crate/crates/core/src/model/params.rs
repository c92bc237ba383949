use serde::{Deserialize, Serialize};

use super::tensor::Scalar;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Coarse parameter class, used for freezing rules and gradient reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Embedding,
    Projection,
    Bias,
    Norm,
    Head,
    LoraA,
    LoraB,
}

impl ParamKind {
    pub fn is_lora(self) -> bool {
        matches!(self, ParamKind::LoraA | ParamKind::LoraB)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub data: Vec<S>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub(crate) fn add(&mut self, name: String, shape: Vec<usize>, kind: ParamKind, data: Vec<S>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate {name}");
        self.params.push(Param {
            name,
            shape,
            kind,
            data,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[S] {
        &self.params[id.0].data
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.params[id.0].data
    }

    #[inline]
    pub fn trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn param(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Removes the given tensors and returns the old-index → new-index map.
    pub(crate) fn remove(&mut self, ids: &[ParamId]) -> Vec<Option<usize>> {
        let mut map = Vec::with_capacity(self.params.len());
        let mut kept = Vec::with_capacity(self.params.len());
        for (i, p) in std::mem::take(&mut self.params).into_iter().enumerate() {
            if ids.iter().any(|id| id.0 == i) {
                map.push(None);
            } else {
                map.push(Some(kept.len()));
                kept.push(p);
            }
        }
        self.params = kept;
        map
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.data.len())
            .sum()
    }

    /// FNV-1a fingerprint over the bytes of every tensor matching `filter`.
    pub fn fingerprint(&self, filter: impl Fn(&Param<S>) -> bool) -> u64 {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        let mut buf = Vec::new();
        for p in self.params.iter().filter(|p| filter(p)) {
            for b in p.name.bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
            buf.clear();
            for &v in &p.data {
                v.write_le(&mut buf);
            }
            for &b in &buf {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
        h
    }
}

/// Gradient buffers parallel to a [`ParamStore`]; frozen tensors get none.
#[derive(Debug, Clone)]
pub struct Grads<S> {
    pub(crate) g: Vec<Vec<S>>,
}

impl<S: Scalar> Grads<S> {
    pub fn for_store(store: &ParamStore<S>) -> Self {
        Grads {
            g: store
                .params
                .iter()
                .map(|p| {
                    if p.trainable {
                        vec![S::zero(); p.data.len()]
                    } else {
                        Vec::new()
                    }
                })
                .collect(),
        }
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.g[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[S] {
        &self.g[id.0]
    }

    pub fn zero(&mut self) {
        for g in &mut self.g {
            g.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    pub fn scale(&mut self, s: S) {
        for g in &mut self.g {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.g.iter().flatten().all(|v| v.is_finite())
    }
}
