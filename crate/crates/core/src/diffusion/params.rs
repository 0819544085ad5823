//! Denoiser parameters with an explicit partition registry.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

/// Role of a parameter tensor with respect to fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Query,
    Key,
    Value,
    Other,
}

impl Partition {
    pub const ALL: [Partition; 4] = [Partition::Query, Partition::Key, Partition::Value, Partition::Other];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Architecture hyperparameters of the toy denoiser and its text encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    /// Channels at full latent resolution.
    pub width: usize,
    /// Channels at half resolution.
    pub inner_width: usize,
    /// Query/key/value width of every cross-attention layer.
    pub attn_dim: usize,
    pub heads: usize,
    pub text_dim: usize,
    /// Fixed prompt length after padding.
    pub seq_len: usize,
    /// Adds one self-attention block to the text encoder.
    pub text_mixing: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            width: 24,
            inner_width: 48,
            attn_dim: 24,
            heads: 2,
            text_dim: 24,
            seq_len: 10,
            text_mixing: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.latent_channels, self.width, self.inner_width, self.attn_dim, self.heads, self.text_dim, self.seq_len];
        if positive.contains(&0) {
            return Err(Error::Config("denoiser sizes must be positive".into()));
        }
        if self.attn_dim % self.heads != 0 {
            return Err(Error::Config("attn_dim must be divisible by heads".into()));
        }
        if self.width % 2 != 0 || self.text_dim % 2 != 0 {
            return Err(Error::Config("width and text_dim must be even".into()));
        }
        Ok(())
    }

    /// Names, shapes and tags of every tensor, in storage order.
    pub fn layout(&self, vocab_size: usize) -> Vec<(String, [usize; 2], Partition)> {
        let (c, w, w2, da, dt) = (self.latent_channels, self.width, self.inner_width, self.attn_dim, self.text_dim);
        let mut out = Vec::new();
        let mut add = |name: &str, shape: [usize; 2], tag: Partition| out.push((name.to_string(), shape, tag));
        add("text.token", [vocab_size, dt], Partition::Other);
        if self.text_mixing {
            for p in ["q", "k", "v", "o"] {
                add(&format!("text.mix.{p}"), [dt, dt], Partition::Other);
            }
        }
        add("time.w", [w, w], Partition::Other);
        add("time.b", [1, w], Partition::Other);
        add("conv_in.w", [9 * c, w], Partition::Other);
        add("conv_in.b", [1, w], Partition::Other);
        let res = |add: &mut dyn FnMut(&str, [usize; 2], Partition), name: &str, ch: usize| {
            add(&format!("{name}.conv1.w"), [9 * ch, ch], Partition::Other);
            add(&format!("{name}.conv1.b"), [1, ch], Partition::Other);
            add(&format!("{name}.temb.w"), [w, ch], Partition::Other);
            add(&format!("{name}.temb.b"), [1, ch], Partition::Other);
            add(&format!("{name}.conv2.w"), [9 * ch, ch], Partition::Other);
            add(&format!("{name}.conv2.b"), [1, ch], Partition::Other);
        };
        let xattn = |add: &mut dyn FnMut(&str, [usize; 2], Partition), name: &str, ch: usize| {
            add(&format!("{name}.q"), [ch, da], Partition::Query);
            add(&format!("{name}.k"), [dt, da], Partition::Key);
            add(&format!("{name}.v"), [dt, da], Partition::Value);
            add(&format!("{name}.o.w"), [da, ch], Partition::Other);
            add(&format!("{name}.o.b"), [1, ch], Partition::Other);
        };
        res(&mut add, "res1", w);
        xattn(&mut add, "xattn1", w);
        add("down.w", [w, w2], Partition::Other);
        add("down.b", [1, w2], Partition::Other);
        res(&mut add, "res2", w2);
        xattn(&mut add, "xattn2", w2);
        res(&mut add, "res3", w2);
        add("up.w", [w2, w], Partition::Other);
        add("up.b", [1, w], Partition::Other);
        res(&mut add, "res4", w);
        xattn(&mut add, "xattn3", w);
        add("conv_out.w", [9 * w, c], Partition::Other);
        add("conv_out.b", [1, c], Partition::Other);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub tag: Partition,
    pub value: Array2<f64>,
}

/// All denoiser and text-encoder weights, each carrying one partition tag.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub tensors: Vec<ParamTensor>,
    index: HashMap<String, usize>,
}

impl DenoiserParams {
    /// Seeded initialization; biases start at zero.
    pub fn init(config: DenoiserConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed);
        let tensors = config
            .layout(vocab_size)
            .into_iter()
            .map(|(name, shape, tag)| {
                let std = if name.ends_with(".b") {
                    0.0
                } else if name == "text.token" {
                    1.0
                } else if name.starts_with("conv_out") || name.ends_with(".o.w") || name.starts_with("text.mix.o") {
                    0.3 / (shape[0] as f64).sqrt()
                } else {
                    1.0 / (shape[0] as f64).sqrt()
                };
                let value = Array2::from_shape_vec(shape, rng::normals(&mut r, shape[0] * shape[1]))
                    .expect("layout shape")
                    .mapv(|v| v * std);
                ParamTensor { name, tag, value }
            })
            .collect();
        Self::from_tensors(config, vocab_size, tensors)
    }

    /// Assembles parameters, checking names, shapes and tags against the layout.
    pub fn from_tensors(config: DenoiserConfig, vocab_size: usize, tensors: Vec<ParamTensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout(vocab_size);
        if layout.len() != tensors.len() {
            return Err(Error::Partition(format!("expected {} tensors, got {}", layout.len(), tensors.len())));
        }
        for ((name, shape, tag), t) in layout.iter().zip(&tensors) {
            if *name != t.name || *tag != t.tag || t.value.shape() != shape {
                return Err(Error::Partition(format!(
                    "tensor {:?} ({:?}, {:?}) does not match layout entry {name:?} ({shape:?}, {tag:?})",
                    t.name,
                    t.value.shape(),
                    t.tag
                )));
            }
        }
        let index = tensors.iter().enumerate().map(|(i, t)| (t.name.clone(), i)).collect();
        Ok(Self { config, tensors, index })
    }

    pub fn vocab_size(&self) -> usize {
        self.get("text.token").nrows()
    }

    pub fn id(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        &self.tensors[self.id(name)].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        let i = self.id(name);
        &mut self.tensors[i].value
    }

    /// Indices of tensors carrying `tag`.
    pub fn ids_with(&self, tag: Partition) -> Vec<usize> {
        self.tensors.iter().enumerate().filter(|(_, t)| t.tag == tag).map(|(i, _)| i).collect()
    }

    pub fn registry(&self) -> BTreeMap<String, Partition> {
        self.tensors.iter().map(|t| (t.name.clone(), t.tag)).collect()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    /// SHA-256 over names, tags, shapes and little-endian values.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            h.update(t.name.as_bytes());
            h.update([t.tag as u8]);
            for d in t.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Largest absolute entry difference per tensor name.
    pub fn max_abs_diff(&self, other: &Self) -> BTreeMap<String, f64> {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| {
                let d = a.value.iter().zip(b.value.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
                (a.name.clone(), d)
            })
            .collect()
    }

    /// True when every entry of every tensor has identical bits.
    pub fn bit_identical(&self, other: &Self, name: &str) -> bool {
        let (a, b) = (self.get(name), other.get(name));
        a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
    }
}

/// Which gradients a backward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GradRequest {
    /// Indexed by [`Partition::index`].
    pub partitions: [bool; 4],
    /// Gradients with respect to dynamic slot vectors.
    pub slots: bool,
}

impl GradRequest {
    pub fn all() -> Self {
        Self { partitions: [true; 4], slots: true }
    }

    pub fn slots_only() -> Self {
        Self { partitions: [false; 4], slots: true }
    }

    pub fn with(mut self, tag: Partition) -> Self {
        self.partitions[tag.index()] = true;
        self
    }

    pub fn wants(&self, tag: Partition) -> bool {
        self.partitions[tag.index()]
    }
}

/// Parameter and slot gradients; `params[i]` is `None` when not requested.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    pub params: Vec<Option<Array2<f64>>>,
    pub slots: BTreeMap<String, ndarray::Array1<f64>>,
}

impl Grads {
    pub fn empty(n: usize) -> Self {
        Self { params: vec![None; n], slots: BTreeMap::new() }
    }

    pub fn add_param(&mut self, i: usize, g: Array2<f64>) {
        match &mut self.params[i] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub fn add_slot(&mut self, name: &str, g: ndarray::ArrayView1<f64>) {
        match self.slots.get_mut(name) {
            Some(acc) => *acc += &g,
            None => {
                self.slots.insert(name.to_string(), g.to_owned());
            }
        }
    }

    /// Accumulates `other` into `self`.
    pub fn merge(&mut self, other: Grads) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (i, g) in other.params.into_iter().enumerate() {
            if let Some(g) = g {
                self.add_param(i, g);
            }
        }
        for (k, g) in other.slots {
            self.add_slot(&k, g.view());
        }
    }

    pub fn scale(&mut self, a: f64) {
        for g in self.params.iter_mut().flatten() {
            *g *= a;
        }
        for g in self.slots.values_mut() {
            *g *= a;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DenoiserConfig {
        DenoiserConfig { width: 8, inner_width: 8, attn_dim: 4, heads: 2, text_dim: 6, seq_len: 5, ..Default::default() }
    }

    #[test]
    fn every_tensor_has_one_tag_and_unique_name() {
        let p = DenoiserParams::init(small(), 12, 1).unwrap();
        assert_eq!(p.registry().len(), p.tensors.len());
        let tagged: usize = Partition::ALL.iter().map(|t| p.ids_with(*t).len()).sum();
        assert_eq!(tagged, p.tensors.len());
        for i in p.ids_with(Partition::Key).into_iter().chain(p.ids_with(Partition::Value)) {
            assert_eq!(p.tensors[i].value.nrows(), small().text_dim);
        }
        assert_eq!(p.ids_with(Partition::Query).len(), 3);
    }

    #[test]
    fn from_tensors_rejects_retagging() {
        let p = DenoiserParams::init(small(), 12, 1).unwrap();
        let mut t = p.tensors.clone();
        let k = p.id("xattn1.k");
        t[k].tag = Partition::Other;
        assert!(matches!(DenoiserParams::from_tensors(small(), 12, t), Err(Error::Partition(_))));
    }

    #[test]
    fn init_is_seeded() {
        let a = DenoiserParams::init(small(), 12, 4).unwrap();
        assert_eq!(a.hash(), DenoiserParams::init(small(), 12, 4).unwrap().hash());
        assert_ne!(a.hash(), DenoiserParams::init(small(), 12, 5).unwrap().hash());
    }
}
