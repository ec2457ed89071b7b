use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    ImageEncoder,
    PromptEncoder,
    MaskDecoder,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("image_encoder.") {
            ParamGroup::ImageEncoder
        } else if name.starts_with("prompt_encoder.") {
            ParamGroup::PromptEncoder
        } else if name.starts_with("mask_decoder.") {
            ParamGroup::MaskDecoder
        } else {
            panic!("parameter '{name}' belongs to no submodule")
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// `U(-b, b)` with `b = 1 / sqrt(fan_in)`.
    FanIn(usize),
}

#[derive(Debug, Clone)]
pub(crate) struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Builder for the ordered list of named tensors a config needs.
#[derive(Default)]
pub(crate) struct Layout(pub Vec<LayoutEntry>);

impl Layout {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        self.0.push(LayoutEntry {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
    }

    pub fn linear(&mut self, prefix: &str, input: usize, output: usize, bias: bool) {
        self.push(format!("{prefix}.weight"), &[output, input], Init::FanIn(input));
        if bias {
            self.push(format!("{prefix}.bias"), &[output], Init::FanIn(input));
        }
    }

    pub fn norm(&mut self, prefix: &str, dim: usize) {
        self.push(format!("{prefix}.weight"), &[dim], Init::Ones);
        self.push(format!("{prefix}.bias"), &[dim], Init::Zeros);
    }

    pub fn conv(&mut self, prefix: &str, input: usize, output: usize, k: usize, bias: bool) {
        let fan_in = input * k * k;
        self.push(format!("{prefix}.weight"), &[output, input, k, k], Init::FanIn(fan_in));
        if bias {
            self.push(format!("{prefix}.bias"), &[output], Init::FanIn(fan_in));
        }
    }

    /// PyTorch layout `(in, out, k, k)`; fan-in follows PyTorch's convention
    /// of using dimension 1.
    pub fn conv_transpose(&mut self, prefix: &str, input: usize, output: usize, k: usize) {
        let fan_in = output * k * k;
        self.push(format!("{prefix}.weight"), &[input, output, k, k], Init::FanIn(fan_in));
        self.push(format!("{prefix}.bias"), &[output], Init::FanIn(fan_in));
    }

    pub fn mlp(&mut self, prefix: &str, input: usize, hidden: usize, output: usize, layers: usize) {
        for i in 0..layers {
            let a = if i == 0 { input } else { hidden };
            let b = if i + 1 == layers { output } else { hidden };
            self.linear(&format!("{prefix}.layers.{i}"), a, b, true);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    tensor: Tensor,
    trainable: bool,
}

impl Param {
    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn group(&self, name: &str) -> ParamGroup {
        ParamGroup::of(name)
    }
}

/// Named model tensors with a per-tensor trainable flag.
///
/// Trainable tensors are graph leaves; frozen ones are constants, so a
/// backward pass never produces gradients for them.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    params: BTreeMap<String, Param>,
}

impl ParameterSet {
    pub(crate) fn initialise(layout: &Layout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParameterSet::default();
        for entry in &layout.0 {
            let n: usize = entry.shape.iter().product();
            let data: Vec<f64> = match entry.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("valid std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
                Init::FanIn(fan_in) => {
                    let b = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-b..b)).collect()
                }
            };
            set.insert(&entry.name, data, &entry.shape);
        }
        set
    }

    pub(crate) fn insert(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) {
        let prev = self.params.insert(
            name.to_string(),
            Param {
                tensor: Tensor::leaf(data, shape),
                trainable: true,
            },
        );
        assert!(prev.is_none(), "duplicate parameter '{name}'");
    }

    /// Panics on unknown names: the forward pass only asks for names its own
    /// layout created.
    pub fn get(&self, name: &str) -> &Tensor {
        match self.params.get(name) {
            Some(p) => &p.tensor,
            None => panic!("unknown parameter '{name}'"),
        }
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        let p = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        if p.trainable != trainable {
            let t = &p.tensor;
            p.tensor = if trainable {
                Tensor::leaf(t.data().to_vec(), t.shape())
            } else {
                t.detach()
            };
            p.trainable = trainable;
        }
    }

    pub fn set_group_trainable(&mut self, group: ParamGroup, trainable: bool) {
        let names: Vec<String> = self
            .params
            .keys()
            .filter(|n| ParamGroup::of(n) == group)
            .cloned()
            .collect();
        for n in names {
            self.set_trainable(&n, trainable);
        }
    }

    /// Replaces a tensor's values, keeping its shape and trainable flag.
    pub fn update(&mut self, name: &str, data: Vec<f64>) {
        let p = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        let shape = p.tensor.shape().to_vec();
        assert_eq!(data.len(), p.tensor.numel(), "update for '{name}' has wrong length");
        p.tensor = if p.trainable {
            Tensor::leaf(data, &shape)
        } else {
            Tensor::new(data, &shape)
        };
    }

    pub fn total_count(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Copies of every tensor's values.
    pub fn snapshot(&self) -> BTreeMap<String, Vec<f64>> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.tensor.data().to_vec()))
            .collect()
    }

    /// Independent copy with no storage shared with `self`.
    pub fn deep_clone(&self) -> Self {
        let params = self
            .params
            .iter()
            .map(|(k, p)| {
                let t = &p.tensor;
                let tensor = if p.trainable {
                    Tensor::leaf(t.data().to_vec(), t.shape())
                } else {
                    Tensor::new(t.data().to_vec(), t.shape())
                };
                (
                    k.clone(),
                    Param {
                        tensor,
                        trainable: p.trainable,
                    },
                )
            })
            .collect();
        ParameterSet { params }
    }
}

/// Ordered tensor list for `config`.
pub(crate) fn model_layout(config: &ModelConfig) -> Layout {
    let mut l = Layout::default();
    super::encoder::layout(config, &mut l);
    super::prompt::layout(config, &mut l);
    super::decoder::layout(config, &mut l);
    l
}
