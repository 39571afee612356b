use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dns::{DnsSamplingConfig, NegativeScheme};
use crate::encoding::{PeMode, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::geometry::BevGrid;
use crate::metrics::DuplicateParams;
use crate::scene_sim::SimConfig;

/// The DNS switch of the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DnsMode {
    #[default]
    On,
    Off,
    RandomNegatives,
}

/// Where DNS reads BEV features from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DnsSource {
    /// Nearest-cell lookup in the encoder's BEV map.
    #[default]
    Dense,
    /// Pseudo queries sharing one learnable embedding, run through the layer.
    PseudoQuery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: usize,
    pub heads: usize,
    pub layers: usize,
    pub resolution: usize,
    pub pillar_heights: Vec<f64>,
    pub depth_hidden: usize,
    pub pe_temperature: f64,
    /// Attention starts with `w_q = w_k = sqrt(gain) I`, `w_v = I`.
    pub attention_init_gain: f64,
    /// Entries of that start get `N(0, noise^2 / channels)` added.
    pub attention_init_noise: f64,
    /// Overrides the default `extent * sqrt(2)` depth normalizer.
    pub d_max: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            heads: 1,
            layers: 1,
            resolution: 20,
            pillar_heights: vec![-1.5, -0.5, 0.5, 1.5],
            depth_hidden: 32,
            pe_temperature: DEFAULT_TEMPERATURE,
            attention_init_gain: 4.0,
            attention_init_noise: 0.1,
            d_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_dns: f64,
    pub w_depth: f64,
    pub w_offset: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Initial foreground probability of the detection classifier.
    pub prior: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_dns: 0.2, w_depth: 1.0, w_offset: 1.0, focal_alpha: 0.25, focal_gamma: 2.0, prior: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { optimizer: OptimizerKind::Adam, learning_rate: 2e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, steps: 2000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub train_seed_offset: u64,
    pub eval_scenes: usize,
    pub eval_seed_offset: u64,
    /// Colinear-pair fraction of the evaluation scenes.
    pub eval_colinear_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 400,
            train_seed_offset: 0,
            eval_scenes: 100,
            eval_seed_offset: 1_000_000,
            eval_colinear_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// A cell is a detection when its best class probability exceeds this.
    pub score_threshold: f64,
    pub duplicates: DuplicateParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { score_threshold: 0.05, duplicates: DuplicateParams::default() }
    }
}

/// Settings one ablation row changes relative to the base run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub da_sca_pe: Option<PeMode>,
    #[serde(default)]
    pub dns: Option<DnsMode>,
    #[serde(default)]
    pub dns_layers: Option<usize>,
}

impl Variant {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        if let Some(pe) = self.da_sca_pe {
            cfg.da_sca_pe = pe;
        }
        if let Some(dns) = self.dns {
            cfg.dns = dns;
        }
        if let Some(l) = self.dns_layers {
            cfg.dns_layers = l;
        }
        cfg.variants = None;
        cfg
    }

    /// {baseline, +DA-SCA, +DA-SCA+DNS} and the random-negative row.
    pub fn standard() -> Vec<Variant> {
        let v = |name: &str, pe, dns| Variant { name: name.into(), da_sca_pe: Some(pe), dns: Some(dns), dns_layers: None };
        vec![
            v("baseline", PeMode::UvOnly, DnsMode::Off),
            v("da_sca", PeMode::Uvd, DnsMode::Off),
            v("da_sca_dns", PeMode::Uvd, DnsMode::On),
            v("da_sca_random_negatives", PeMode::Uvd, DnsMode::RandomNegatives),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub dns_sampling: DnsSamplingConfig,
    pub da_sca_pe: PeMode,
    pub dns: DnsMode,
    /// DNS supervises the outputs of the first `dns_layers` encoder layers.
    pub dns_layers: usize,
    pub dns_source: DnsSource,
    /// Score DNS samples with the detection classifier instead of a separate head.
    pub dns_shared_head: bool,
    /// Let attention gradients reach the depth head through the key depths.
    pub depth_grad_from_attention: bool,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Ablation rows; `None` runs the standard set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variants: Option<Vec<Variant>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            dns_sampling: DnsSamplingConfig::default(),
            da_sca_pe: PeMode::Uvd,
            dns: DnsMode::On,
            dns_layers: 1,
            dns_source: DnsSource::Dense,
            dns_shared_head: false,
            depth_grad_from_attention: true,
            checkpoint_every: 0,
            variants: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.sim.validate()?;
        let m = &self.model;
        if m.channels != self.sim.feature_dim {
            return bad(format!("model.channels {} differs from sim.feature_dim {}", m.channels, self.sim.feature_dim));
        }
        if m.layers == 0 {
            return bad("model.layers must be at least 1".into());
        }
        if m.heads == 0 || !m.channels.is_multiple_of(m.heads) {
            return bad(format!("{} heads do not divide {} channels", m.heads, m.channels));
        }
        if m.pillar_heights.is_empty() || m.pillar_heights.windows(2).any(|w| w[0] >= w[1]) {
            return bad("pillar_heights must be non-empty and strictly increasing".into());
        }
        if !(m.attention_init_gain.is_finite() && m.attention_init_gain >= 0.0)
            || !(m.attention_init_noise.is_finite() && m.attention_init_noise >= 0.0)
        {
            return bad("attention init gain and noise must be finite and non-negative".into());
        }
        if m.depth_hidden == 0 {
            return bad("model.depth_hidden must be positive".into());
        }
        if self.dns_layers == 0 || self.dns_layers > m.layers {
            return bad(format!("dns_layers must be in 1..={}", m.layers));
        }
        let l = &self.loss;
        let weights = [l.lambda_dns, l.w_depth, l.w_offset, l.focal_gamma];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("loss weights must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&l.focal_alpha) || !(l.prior > 0.0 && l.prior < 1.0) {
            return bad("focal_alpha must be in [0, 1] and prior in (0, 1)".into());
        }
        let o = &self.optim;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return bad("learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 {
            return bad("Adam betas must be in [0, 1) and eps positive".into());
        }
        if self.data.train_scenes == 0 {
            return bad("data.train_scenes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.data.eval_colinear_fraction) {
            return bad("data.eval_colinear_fraction must be in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.eval.score_threshold) {
            return bad("eval.score_threshold must be in [0, 1)".into());
        }
        let d = &self.eval.duplicates;
        if !(d.angular_tolerance > 0.0 && d.radial_exclusion > 0.0) {
            return bad("duplicate tolerances must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.dns_sampling.jitter) {
            return bad("dns_sampling.jitter must be in [0, 1]".into());
        }
        self.grid()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<BevGrid> {
        let grid = BevGrid::new(self.sim.extent, self.model.resolution)?;
        match self.model.d_max {
            Some(d) => grid.with_d_max(d),
            None => Ok(grid),
        }
    }

    /// DNS sampling settings with the negative scheme implied by the switch.
    pub fn dns_sampling_effective(&self) -> DnsSamplingConfig {
        let mut s = self.dns_sampling;
        if self.dns == DnsMode::RandomNegatives {
            s.scheme = NegativeScheme::Random;
        }
        s
    }

    /// Settings under which the 2000-step twins learn to localize along rays:
    /// a sharper encoding, a fresh scene every step, a higher step size and
    /// depth supervised by its own loss only.
    pub fn desk_protocol() -> Self {
        let mut cfg = Self::default();
        cfg.model.pe_temperature = 0.05;
        cfg.optim.learning_rate = 5e-3;
        cfg.data.train_scenes = 100_000;
        cfg.depth_grad_from_attention = false;
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Seeds of the training scenes, in the order steps visit them.
    pub fn train_seeds(&self) -> Vec<u64> {
        (0..self.data.train_scenes as u64).map(|i| self.data.train_seed_offset + i).collect()
    }

    pub fn eval_seeds(&self) -> Vec<u64> {
        (0..self.data.eval_scenes as u64).map(|i| self.data.eval_seed_offset + i).collect()
    }

    /// Simulator settings of the held-out scenes.
    pub fn eval_sim(&self) -> SimConfig {
        SimConfig { colinear_fraction: self.data.eval_colinear_fraction, ..self.sim.clone() }
    }
}
