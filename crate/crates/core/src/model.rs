//! Model parameters, hyperparameters, benchmark presets and ablation variants.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adam::AdamConfig;
use crate::alignment::{AlignmentPlan, AlignmentWeights, MatchingHead};
use crate::error::{Error, Result};
use crate::generation::{Critic, Generator, MarginConfig, RedundancyFreeMap, RegWeights};
use crate::rng::{self, SrwganRng};
use crate::semantic::SemanticHead;
use crate::tensor::Tensor;

/// Model variants of the ablation study. `A` is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Three heads, full hierarchical alignment, prototype classification.
    A,
    /// As `A` but classification through a frozen pretrained classifier.
    B,
    /// Two heads; bias-eliminated plus auxiliary alignment.
    C,
    /// One head; bias-eliminated alignment only.
    D,
    /// One head; seen and unseen bridging terms only.
    E,
    /// One head; seen bridging term only.
    F,
    /// Noise plus raw attributes, no semantic alignment.
    G,
}

impl Variant {
    pub const ALL: [Variant; 7] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E, Variant::F, Variant::G];

    pub fn heads(self) -> usize {
        match self {
            Variant::A | Variant::B => 3,
            Variant::C => 2,
            Variant::D | Variant::E | Variant::F => 1,
            Variant::G => 0,
        }
    }

    /// Heads that own a matching matrix (`a‡`, then `a†`).
    pub fn matching_heads(self) -> usize {
        self.heads().min(2)
    }

    pub fn plan(self) -> AlignmentPlan {
        let full = AlignmentPlan::FULL;
        match self {
            Variant::A | Variant::B => full,
            Variant::C => AlignmentPlan { random: false, ..full },
            Variant::D => AlignmentPlan { auxiliary: false, random: false, ..full },
            Variant::E => AlignmentPlan { cbc: false, auxiliary: false, random: false, ..full },
            Variant::F => AlignmentPlan { sbc: true, ..AlignmentPlan::NONE },
            Variant::G => AlignmentPlan::NONE,
        }
    }

    pub fn uses_pretrained_classifier(self) -> bool {
        self == Variant::B
    }

    /// Generator input starts with a Gaussian noise block instead of head samples.
    pub fn uses_noise(self) -> bool {
        self == Variant::G
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|v| v.as_str().eq_ignore_ascii_case(s))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
            Variant::D => "D",
            Variant::E => "E",
            Variant::F => "F",
            Variant::G => "G",
        }
    }
}

/// Search domain for head width.
pub const HEAD_DIM_GRID: [usize; 8] = [10, 25, 50, 100, 150, 200, 400, 500];
/// Search domain for `α`, `β` and `δ`.
pub const ALIGNMENT_GRID: [f64; 8] = [1e2, 1e1, 1e0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5];
/// Search domain for `λ_a`, `λ_c` and `λ_m`.
pub const LAMBDA_GRID: [f64; 8] = [5e0, 1e0, 5e-1, 1e-1, 5e-2, 1e-2, 5e-3, 1e-3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    /// Width of every semantic head.
    pub head_dim: usize,
    pub generator_hidden: usize,
    /// Width of the mapped space `z`.
    pub map_dim: usize,
    pub alignment: AlignmentWeights,
    pub reg: RegWeights,
    #[serde(default)]
    pub margin: MarginConfig,
    #[serde(default = "one")]
    pub gp_weight: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn one() -> f64 {
    1.0
}

fn default_init_std() -> f64 {
    0.02
}

impl Default for HyperParams {
    fn default() -> Self {
        BenchmarkPreset::get(Benchmark::Cub, Setting::Generalized).hyper
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.generator_hidden == 0 || self.map_dim == 0 {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        self.alignment.validate()?;
        self.reg.validate()?;
        let pos = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        pos("margin", self.margin.margin)?;
        pos("kl_bound", self.margin.kl_bound)?;
        pos("kl_multiplier", self.margin.kl_multiplier)?;
        pos("gp_weight", self.gp_weight)?;
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::InvalidConfig("init_std must be positive".into()));
        }
        let a = self.adam;
        if !(a.learning_rate > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return Err(Error::InvalidConfig("invalid Adam constants".into()));
        }
        Ok(())
    }

    /// Checks every searched value against its search domain.
    pub fn validate_grid_domain(&self) -> Result<()> {
        let in_grid = |v: f64, grid: &[f64]| grid.iter().any(|g| (g - v).abs() <= 1e-12 * g.abs());
        if !HEAD_DIM_GRID.contains(&self.head_dim) {
            return Err(Error::InvalidConfig(format!("head_dim {} outside search domain", self.head_dim)));
        }
        let w = self.alignment;
        for (name, v) in [("alpha", w.alpha), ("beta", w.beta), ("delta", w.delta)] {
            if !in_grid(v, &ALIGNMENT_GRID) {
                return Err(Error::InvalidConfig(format!("{name} = {v} outside search domain")));
            }
        }
        let r = self.reg;
        for (name, v) in [("lambda_a", r.lambda_a), ("lambda_c", r.lambda_c), ("lambda_m", r.lambda_m)] {
            if !in_grid(v, &LAMBDA_GRID) {
                return Err(Error::InvalidConfig(format!("{name} = {v} outside search domain")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    Cub,
    Apy,
    Awa,
    Awa2,
    Sun,
    Flo,
}

impl Benchmark {
    pub const ALL: [Benchmark; 6] = [Benchmark::Cub, Benchmark::Apy, Benchmark::Awa, Benchmark::Awa2, Benchmark::Sun, Benchmark::Flo];

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().as_str() {
            "cub" => Benchmark::Cub,
            "apy" => Benchmark::Apy,
            "awa" | "awa1" => Benchmark::Awa,
            "awa2" => Benchmark::Awa2,
            "sun" => Benchmark::Sun,
            "flo" => Benchmark::Flo,
            _ => return None,
        })
    }
}

/// Tuned for the generalized or the conventional zero-shot protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Generalized,
    Conventional,
}

/// Tuned configuration of one benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkPreset {
    pub hyper: HyperParams,
    pub batch_size: usize,
    pub warmup: usize,
    pub n_synth: usize,
}

impl BenchmarkPreset {
    /// Returns `None` for conventional-setting requests on aPY and AWA,
    /// which were not tuned for that protocol.
    pub fn try_get(b: Benchmark, s: Setting) -> Option<Self> {
        // (d_h, α, β, δ, λ_a, λ_c, λ_m, n_synth)
        let row: (usize, f64, f64, f64, f64, f64, f64, usize) = match (s, b) {
            (Setting::Generalized, Benchmark::Cub) => (150, 1e-3, 1e-3, 1e-3, 1e-3, 5e-2, 1e-2, 800),
            (Setting::Generalized, Benchmark::Apy) => (150, 1e-1, 1e-3, 1e-1, 1e-3, 1e-2, 1e-1, 400),
            (Setting::Generalized, Benchmark::Awa) => (200, 1e-1, 1e-3, 1e-2, 1e-3, 1e-1, 1e-2, 400),
            (Setting::Generalized, Benchmark::Awa2) => (150, 1e-1, 1e0, 1e-1, 1e-3, 1e-1, 1e-2, 4000),
            (Setting::Generalized, Benchmark::Sun) => (200, 1e-2, 1e0, 1e-2, 1e-3, 1e-2, 1e-1, 600),
            (Setting::Generalized, Benchmark::Flo) => (200, 1e-2, 1e-3, 1e-3, 1e-1, 5e-3, 1e-3, 800),
            (Setting::Conventional, Benchmark::Cub) => (100, 1e-3, 1e-3, 1e-2, 1e-3, 5e-2, 1e-2, 1000),
            (Setting::Conventional, Benchmark::Flo) => (100, 1e-4, 1e-3, 1e-3, 1e-1, 5e-3, 1e-2, 600),
            (Setting::Conventional, Benchmark::Sun) => (150, 1e-2, 1e1, 1e-2, 1e-2, 5e-3, 1e-1, 800),
            (Setting::Conventional, Benchmark::Awa2) => (100, 1e-3, 1e-1, 1e-5, 1e-3, 1e-2, 1e-2, 2000),
            (Setting::Conventional, Benchmark::Apy | Benchmark::Awa) => return None,
        };
        let (batch_size, warmup) = match b {
            Benchmark::Cub => (2048, 10),
            Benchmark::Apy => (1024, 5),
            Benchmark::Awa => (2048, 5),
            Benchmark::Awa2 => (2048, 5),
            Benchmark::Sun => (800, 10),
            Benchmark::Flo => (2048, 5),
        };
        let (head_dim, alpha, beta, delta, lambda_a, lambda_c, lambda_m, n_synth) = row;
        Some(Self {
            hyper: HyperParams {
                head_dim,
                generator_hidden: 4096,
                map_dim: 1024,
                alignment: AlignmentWeights { alpha, beta, delta },
                reg: RegWeights { lambda_a, lambda_c, lambda_m },
                margin: MarginConfig::default(),
                gp_weight: 1.0,
                init_std: 0.02,
                adam: AdamConfig::default(),
            },
            batch_size,
            warmup,
            n_synth,
        })
    }

    pub fn get(b: Benchmark, s: Setting) -> Self {
        Self::try_get(b, s).unwrap_or_else(|| Self::try_get(b, Setting::Generalized).expect("generalized presets exist"))
    }

    /// Settings for the small synthetic world (`p=7, q=3, n=32, d=8`).
    /// Widths and the margin are shrunk to the toy scale; the batch is kept
    /// small so an epoch has enough rounds.
    pub fn synthetic() -> Self {
        Self {
            hyper: HyperParams {
                head_dim: 8,
                generator_hidden: 64,
                map_dim: 16,
                alignment: AlignmentWeights { alpha: 1.0, beta: 1.0, delta: 1.0 },
                reg: RegWeights { lambda_a: 1e-1, lambda_c: 1.0, lambda_m: 1e-2 },
                margin: MarginConfig { margin: 3.0, ..MarginConfig::default() },
                gp_weight: 1.0,
                init_std: 0.02,
                adam: AdamConfig { learning_rate: 1e-3, ..AdamConfig::default() },
            },
            batch_size: 21,
            warmup: 10,
            n_synth: 800,
        }
    }
}

/// Layer sizes of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub feature_dim: usize,
    pub attribute_dim: usize,
    pub head_dim: usize,
    pub generator_hidden: usize,
    pub map_dim: usize,
    /// Classes with real labeled features (seen, plus unseen in few-shot runs).
    pub labeled_classes: usize,
    pub variant: Variant,
}

impl Architecture {
    /// Width of the generator input.
    pub fn generator_input(&self) -> usize {
        let blocks = if self.variant.uses_noise() { 1 } else { self.variant.heads() };
        blocks * self.head_dim + self.attribute_dim
    }
}

/// Frozen softmax classifier over raw features (used by variant `B`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenClassifier {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub arch: Architecture,
    pub heads: Vec<SemanticHead>,
    pub generator: Generator,
    pub critic: Critic,
    pub mapping: RedundancyFreeMap,
    /// Matching matrices for `a‡` and `a†`, as far as the variant has them.
    pub matching: Vec<MatchingHead>,
    #[serde(default)]
    pub pretrained: Option<FrozenClassifier>,
}

/// Parameter groups owned by the four optimizers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    /// Generator and semantic heads.
    Generator,
    Critic,
    Mapping,
    Matching,
}

impl ModelState {
    /// Draws every weight from `N(0, std²)`.
    pub fn init(arch: Architecture, std: f64, rng: &mut SrwganRng) -> Self {
        let heads = (0..arch.variant.heads()).map(|_| SemanticHead::init(arch.attribute_dim, arch.head_dim, std, rng)).collect();
        let generator = Generator::init(arch.generator_input(), arch.generator_hidden, arch.feature_dim, std, rng);
        let critic = Critic::init(arch.map_dim, std, rng);
        let mapping = RedundancyFreeMap::init(arch.feature_dim, arch.map_dim, arch.labeled_classes, std, rng);
        let matching = (0..arch.variant.matching_heads())
            .map(|_| MatchingHead { w: rng::gaussian(arch.feature_dim, arch.head_dim, std, rng) })
            .collect();
        Self { arch, heads, generator, critic, mapping, matching, pretrained: None }
    }

    pub fn group(&self, g: Group) -> Vec<&Tensor> {
        match g {
            Group::Generator => self.heads.iter().flat_map(|h| h.params()).chain(self.generator.params()).collect(),
            Group::Critic => self.critic.params().into_iter().collect(),
            Group::Mapping => self.mapping.params().into_iter().collect(),
            Group::Matching => self.matching.iter().map(|m| &m.w).collect(),
        }
    }

    pub fn group_mut(&mut self, g: Group) -> Vec<&mut Tensor> {
        match g {
            Group::Generator => {
                let mut v: Vec<&mut Tensor> = self.heads.iter_mut().flat_map(|h| h.params_mut()).collect();
                v.extend(self.generator.params_mut());
                v
            }
            Group::Critic => self.critic.params_mut().into_iter().collect(),
            Group::Mapping => self.mapping.params_mut().into_iter().collect(),
            Group::Matching => self.matching.iter_mut().map(|m| &mut m.w).collect(),
        }
    }

    pub fn group_shapes(&self, g: Group) -> Vec<[usize; 2]> {
        self.group(g).iter().map(|t| t.shape()).collect()
    }

    /// FNV-1a over the bit patterns of a group, for cheap change detection.
    pub fn group_fingerprint(&self, g: Group) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.group(g) {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Named tensors in a fixed order, for serialization.
    pub fn named_tensors(&self) -> Vec<(alloc::string::String, &Tensor)> {
        let mut out = Vec::new();
        for (i, h) in self.heads.iter().enumerate() {
            for (n, t) in ["w_mean", "b_mean", "w_logvar", "b_logvar"].iter().zip(h.params()) {
                out.push((format!("head{i}.{n}"), t));
            }
        }
        for (n, t) in ["w1", "b1", "w2", "b2"].iter().zip(self.generator.params()) {
            out.push((format!("generator.{n}"), t));
        }
        for (n, t) in ["w", "b"].iter().zip(self.critic.params()) {
            out.push((format!("critic.{n}"), t));
        }
        for (n, t) in ["w_mean", "b_mean", "w_logvar", "b_logvar", "centers"].iter().zip(self.mapping.params()) {
            out.push((format!("mapping.{n}"), t));
        }
        for (i, m) in self.matching.iter().enumerate() {
            out.push((format!("matching{i}.w"), &m.w));
        }
        if let Some(p) = &self.pretrained {
            out.push(("pretrained.weights".into(), &p.weights));
            out.push(("pretrained.bias".into(), &p.bias));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(alloc::string::String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, h) in self.heads.iter_mut().enumerate() {
            for (n, t) in ["w_mean", "b_mean", "w_logvar", "b_logvar"].iter().zip(h.params_mut()) {
                out.push((format!("head{i}.{n}"), t));
            }
        }
        for (n, t) in ["w1", "b1", "w2", "b2"].iter().zip(self.generator.params_mut()) {
            out.push((format!("generator.{n}"), t));
        }
        for (n, t) in ["w", "b"].iter().zip(self.critic.params_mut()) {
            out.push((format!("critic.{n}"), t));
        }
        for (n, t) in ["w_mean", "b_mean", "w_logvar", "b_logvar", "centers"].iter().zip(self.mapping.params_mut()) {
            out.push((format!("mapping.{n}"), t));
        }
        for (i, m) in self.matching.iter_mut().enumerate() {
            out.push((format!("matching{i}.w"), &mut m.w));
        }
        if let Some(p) = &mut self.pretrained {
            out.push(("pretrained.weights".into(), &mut p.weights));
            out.push(("pretrained.bias".into(), &mut p.bias));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }
}
