//! Model configuration and the named-parameter registry shared by the
//! feature, aggregation, and pipeline modules.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    None,
    Temporal,
    TemporalSpatial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    Bilinear,
    Convex2d,
    TemporalConvex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    Local,
    AllPairs,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttentionMode::None),
            "temporal" => Ok(AttentionMode::Temporal),
            "temporal_spatial" | "temporal+spatial" => Ok(AttentionMode::TemporalSpatial),
            other => Err(Error::Config(format!("unknown attention mode '{other}'"))),
        }
    }
}

impl std::str::FromStr for UpsampleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(UpsampleMode::Bilinear),
            "convex" | "convex2d" => Ok(UpsampleMode::Convex2d),
            "temporal_convex" => Ok(UpsampleMode::TemporalConvex),
            other => Err(Error::Config(format!("unknown upsample mode '{other}'"))),
        }
    }
}

impl std::str::FromStr for CorrelationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(CorrelationMode::Local),
            "all_pairs" => Ok(CorrelationMode::AllPairs),
            other => Err(Error::Config(format!("unknown correlation mode '{other}'"))),
        }
    }
}

/// Architecture configuration. Defaults are the toy scale; the paper scale
/// (96 CNN + 32 prior channels, stages 16-8-4) is reachable by config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Convolutional feature channels per tap.
    pub c_cnn: usize,
    /// Prior feature channels appended after the adapter (0 disables).
    pub c_prior: usize,
    /// Compact cost-encoding width L.
    pub l_channels: usize,
    /// GRU hidden channels.
    pub c_hidden: usize,
    /// Cascade scales, coarse to fine; each must halve into the next.
    pub stages: Vec<usize>,
    /// Total GRU iterations, split across stages (finest stage gets a
    /// double share).
    pub iters: usize,
    pub attention: AttentionMode,
    pub upsample: UpsampleMode,
    pub correlation: CorrelationMode,
    /// Extra large-kernel (1x7x7) separable conv on the GRU input.
    pub super_kernel: bool,
    /// Directory of precomputed prior features (required when c_prior > 0).
    pub prior_dir: Option<std::path::PathBuf>,
    /// Per-channel normalization applied to frames in [0,1].
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            c_cnn: 16,
            c_prior: 0,
            l_channels: 32,
            c_hidden: 64,
            stages: vec![16, 8, 4],
            iters: 10,
            attention: AttentionMode::TemporalSpatial,
            upsample: UpsampleMode::TemporalConvex,
            correlation: CorrelationMode::AllPairs,
            super_kernel: false,
            prior_dir: None,
            norm_mean: [0.485, 0.456, 0.406],
            norm_std: [0.229, 0.224, 0.225],
        }
    }
}

impl ModelConfig {
    pub fn c_features(&self) -> usize {
        self.c_cnn + self.c_prior
    }

    /// Channels of the GRU input x = [conv(E), conv(d), d, F_ctx].
    pub fn c_gru_input(&self) -> usize {
        self.c_cost_enc() + self.c_disp_enc() + 1 + self.c_features()
    }

    /// Channels produced by the 2D conv on the encoded cost volume.
    pub fn c_cost_enc(&self) -> usize {
        self.l_channels
    }

    /// Channels produced by the 2D conv on the disparity.
    pub fn c_disp_enc(&self) -> usize {
        8
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("cascade needs at least one stage".into()));
        }
        for w in self.stages.windows(2) {
            if w[1] >= w[0] || w[0] % w[1] != 0 {
                return Err(Error::Config(format!(
                    "stage scales must strictly decrease and divide: {:?}",
                    self.stages
                )));
            }
        }
        for &s in &self.stages {
            if ![4usize, 8, 16, 32].contains(&s) {
                return Err(Error::Config(format!("unsupported stage scale {s}")));
            }
        }
        if self.iters < self.stages.len() {
            return Err(Error::Config(format!(
                "{} iterations cannot cover {} stages",
                self.iters,
                self.stages.len()
            )));
        }
        if self.c_cnn == 0 || self.l_channels == 0 || self.c_hidden == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Iterations per stage: proportional shares with the finest stage
    /// weighted double, remainder to the finest.
    pub fn iters_per_stage(&self) -> Vec<usize> {
        let n_stages = self.stages.len();
        let weights: Vec<usize> = (0..n_stages)
            .map(|i| if i + 1 == n_stages { 2 } else { 1 })
            .collect();
        let total_w: usize = weights.iter().sum();
        let mut out: Vec<usize> = weights
            .iter()
            .map(|&w| (self.iters * w / total_w).max(1))
            .collect();
        let assigned: usize = out.iter().sum();
        let last = n_stages - 1;
        if assigned <= self.iters {
            out[last] += self.iters - assigned;
        } else {
            out[last] = out[last].saturating_sub(assigned - self.iters).max(1);
        }
        out
    }
}

/// Named trainable tensors, ordered by name for deterministic traversal.
#[derive(Debug, Clone, Default)]
pub struct ParamMap<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamMap<T> {
    pub fn new() -> Self {
        ParamMap {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        debug_assert!(!self.map.contains_key(&name), "duplicate param {name}");
        self.map.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        match self.map.get_mut(name) {
            Some(slot) => {
                *slot = t;
                Ok(())
            }
            None => Err(Error::Config(format!("missing parameter '{name}'"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Constant (non-trainable) copy for inference; builds no graph.
    pub fn detached(&self) -> ParamMap<T> {
        ParamMap {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.detach()))
                .collect(),
        }
    }
}

/// He-style normal init for a conv weight plus a zero bias.
pub fn init_conv<T: Scalar>(
    params: &mut ParamMap<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    shape: &[usize],
) {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let vals: Vec<T> = (0..n)
        .map(|_| T::from_f64(normal_sample(rng) * std))
        .collect();
    params.insert(format!("{name}.w"), Tensor::var(vals, shape).unwrap());
    params.insert(
        format!("{name}.b"),
        Tensor::var(vec![T::ZERO; shape[0]], &[shape[0]]).unwrap(),
    );
}

/// Zero-initialized conv weight and bias (delta heads, upsample logits,
/// attention output projections).
pub fn init_conv_zero<T: Scalar>(params: &mut ParamMap<T>, name: &str, shape: &[usize]) {
    let n: usize = shape.iter().product();
    params.insert(
        format!("{name}.w"),
        Tensor::var(vec![T::ZERO; n], shape).unwrap(),
    );
    params.insert(
        format!("{name}.b"),
        Tensor::var(vec![T::ZERO; shape[0]], &[shape[0]]).unwrap(),
    );
}

/// Box-Muller standard normal draw; two uniform draws per sample keeps the
/// stream deterministic and precision-independent.
fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Shorthand for conv + bias lookup and application.
pub fn apply_conv<T: Scalar>(
    params: &ParamMap<T>,
    name: &str,
    x: &Tensor<T>,
    stride: &[usize],
    pad: &[usize],
) -> Result<Tensor<T>> {
    let w = params.get(&format!("{name}.w"))?;
    let b = params.get(&format!("{name}.b"))?;
    x.conv(w, Some(b), stride, pad)
}
