use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::model::{loss_and_grad, LossBreakdown, ModelContext, ModelParams, SceneInput};
use super::optim::OptimizerState;
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::scene_sim::generate_scene;

/// Parameters, optimizer moments and the step counter. All randomness of a
/// step is derived from `(config.optim.seed, step)`, so the step counter is
/// the whole RNG state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: RunConfig,
    pub step: usize,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
}

impl ModelState {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        let params = ModelParams::init(cfg)?;
        let optimizer = OptimizerState::new(cfg.optim.optimizer, params.num_parameters());
        Ok(Self { config: cfg.clone(), step: 0, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let state: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        state.config.validate()?;
        if !state.params.all_finite() {
            return Err(Error::InvalidConfig("checkpoint holds non-finite parameters".into()));
        }
        Ok(state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub scene_seed: u64,
    pub loss: LossBreakdown,
}

pub struct TrainOutcome {
    pub state: ModelState,
    pub log: Vec<StepLog>,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("step,scene_seed,total,detection,dns,depth\n");
        for r in &self.log {
            let l = r.loss;
            writeln!(s, "{},{},{:e},{:e},{:e},{:e}", r.step, r.scene_seed, l.total, l.detection, l.dns, l.depth).unwrap();
        }
        s
    }

    /// Mean total loss over `window` steps starting at `start`.
    pub fn mean_loss(&self, start: usize, window: usize) -> f64 {
        let slice = &self.log[start.min(self.log.len())..(start + window).min(self.log.len())];
        slice.iter().map(|r| r.loss.total).sum::<f64>() / slice.len().max(1) as f64
    }
}

/// Seed of the DNS sampler at `step`.
pub fn step_seed(seed: u64, step: usize) -> u64 {
    let mut z = seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `cfg.optim.steps` updates from a fresh initialization, one training
/// scene per step in seed order. With `out`, writes periodic checkpoints.
pub fn train(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    train_from(ModelState::init(cfg)?, out)
}

/// Continues training `state` until `state.config.optim.steps`.
pub fn train_from(mut state: ModelState, out: Option<&Path>) -> Result<TrainOutcome> {
    let cfg = state.config.clone();
    let ctx = ModelContext::new(&cfg)?;
    let seeds = cfg.train_seeds();
    let mut log = Vec::with_capacity(cfg.optim.steps.saturating_sub(state.step));
    while state.step < cfg.optim.steps {
        let step = state.step;
        let scene_seed = seeds[step % seeds.len()];
        let scene = generate_scene(&cfg.sim, scene_seed)?;
        let input = SceneInput::render(&scene, &cfg.sim, &ctx)?;
        let (loss, grads) = match loss_and_grad(&ctx, &state.params, &input, step_seed(cfg.optim.seed, step)) {
            Err(Error::DivergedLoss { value, .. }) => return Err(Error::DivergedLoss { step, value }),
            other => other?,
        };
        if !grads.all_finite() {
            return Err(Error::DivergedLoss { step, value: f64::NAN });
        }
        state.optimizer.step(&mut state.params, &grads, &cfg.optim);
        state.step += 1;
        log.push(StepLog { step, scene_seed, loss });
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every) {
                state.save(&dir.join(format!("checkpoint_{:06}.json", state.step)))?;
            }
        }
    }
    Ok(TrainOutcome { state, log })
}
