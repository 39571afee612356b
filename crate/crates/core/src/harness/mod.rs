//! Model assembly, training, evaluation and ablations.

pub mod config;
pub mod detection;
pub mod evaluate;
pub mod model;
pub mod optim;
pub mod train;

pub use config::{DnsMode, DnsSource, RunConfig, Variant};
pub use detection::{detection_head, rescale_query_selection, DetHeadParams};
pub use evaluate::{ablate, eval_scenes, evaluate, AblationTable};
pub use model::{ModelContext, ModelParams, SceneInput};
pub use train::{train, ModelState, TrainOutcome};
