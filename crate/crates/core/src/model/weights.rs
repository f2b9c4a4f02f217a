use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError, Result};
use crate::tensor::{Real, Tensor};
use crate::tokenizer::{normal_features, MATERIAL_FEATURES, RAY_FEATURES};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// `N(0, 1 / fan_in)`.
    FanIn(usize),
    Normal,
    Ones,
    Zeros,
}

/// Expected tensors of a config in canonical order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let hd = cfg.head_dim;
    let h = cfg.ffn_hidden();
    let c = cfg.dpt_channels;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));

    for (name, input) in [
        ("embed.normal", normal_features(cfg.frequencies.len())),
        ("embed.material", MATERIAL_FEATURES),
        ("embed.ray", RAY_FEATURES),
    ] {
        push(format!("{name}.w"), vec![input, d], Init::FanIn(input));
        push(format!("{name}.b"), vec![d], Init::Zeros);
        push(format!("{name}.g"), vec![d], Init::Ones);
    }
    push("registers".into(), vec![cfg.registers, d], Init::Normal);

    let attention = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            push(format!("{p}.{w}"), vec![d, d], Init::FanIn(d));
        }
        push(format!("{p}.q_gain"), vec![hd], Init::Ones);
        push(format!("{p}.k_gain"), vec![hd], Init::Ones);
    };
    let ffn = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        push(format!("{p}.norm"), vec![d], Init::Ones);
        push(format!("{p}.gate"), vec![d, h], Init::FanIn(d));
        push(format!("{p}.up"), vec![d, h], Init::FanIn(d));
        push(format!("{p}.down"), vec![h, d], Init::FanIn(h));
    };

    for l in 0..cfg.vi_layers {
        let p = format!("vi.{l}");
        push(format!("{p}.attn.norm"), vec![d], Init::Ones);
        attention(&mut push, &format!("{p}.attn"));
        ffn(&mut push, &format!("{p}.ffn"));
    }
    push("vi.final_norm".into(), vec![d], Init::Ones);

    for l in 0..cfg.vd_layers {
        let p = format!("vd.{l}");
        push(format!("{p}.cross.q_norm"), vec![d], Init::Ones);
        push(format!("{p}.cross.kv_norm"), vec![d], Init::Ones);
        attention(&mut push, &format!("{p}.cross"));
        push(format!("{p}.self.norm"), vec![d], Init::Ones);
        attention(&mut push, &format!("{p}.self"));
        ffn(&mut push, &format!("{p}.ffn"));
    }

    for j in 0..cfg.dpt_taps {
        let s2 = 1usize << (2 * cfg.tap_level(j));
        let p = format!("dpt.{j}");
        push(format!("{p}.norm"), vec![d], Init::Ones);
        push(format!("{p}.reassemble.w"), vec![d, s2 * c], Init::FanIn(d));
        push(format!("{p}.reassemble.b"), vec![s2 * c], Init::Zeros);
        push(format!("{p}.fuse.w"), vec![c, c, 3, 3], Init::FanIn(9 * c));
        push(format!("{p}.fuse.b"), vec![c], Init::Zeros);
    }
    push("dpt.head.w".into(), vec![3, c, 3, 3], Init::FanIn(9 * c));
    push("dpt.head.b".into(), vec![3], Init::Zeros);
    out
}

/// Named parameter tensors in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<R = f32> {
    tensors: IndexMap<String, Tensor<R>>,
}

impl<R: Real> ModelWeights<R> {
    /// Fresh weights: `N(0, 1/fan_in)` matrices, unit gains, zero biases,
    /// standard-normal registers.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = IndexMap::new();
        for (name, shape, init) in layout(cfg) {
            let n: usize = shape.iter().product();
            let data: Vec<R> = match init {
                Init::Ones => vec![R::one(); n],
                Init::Zeros => vec![R::zero(); n],
                Init::Normal | Init::FanIn(_) => {
                    let std = match init {
                        Init::FanIn(f) => 1.0 / (f as f64).sqrt(),
                        _ => 1.0,
                    };
                    let dist = Normal::new(0.0, std).expect("finite std");
                    (0..n).map(|_| R::of(dist.sample(&mut rng))).collect()
                }
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(ModelWeights { tensors })
    }

    /// Wraps named tensors after checking names, order and shapes against `cfg`.
    pub fn from_tensors(cfg: &ModelConfig, tensors: IndexMap<String, Tensor<R>>) -> Result<Self> {
        cfg.validate()?;
        let expected = layout(cfg);
        if expected.len() != tensors.len() {
            return Err(ModelError::Weights(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape, _), (got_name, t)) in expected.iter().zip(&tensors) {
            if name != got_name {
                return Err(ModelError::Weights(format!(
                    "expected tensor {name}, found {got_name}"
                )));
            }
            if shape.as_slice() != t.shape() {
                return Err(ModelError::Weights(format!(
                    "tensor {name} has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(ModelError::Weights(format!(
                    "tensor {name} has non-finite values"
                )));
            }
        }
        Ok(ModelWeights { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<R>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<R>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|t| t.is_finite())
    }

    pub fn cast<S: Real>(&self) -> ModelWeights<S> {
        ModelWeights {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn into_tensors(self) -> IndexMap<String, Tensor<R>> {
        self.tensors
    }
}
