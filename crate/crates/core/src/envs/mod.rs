//! Procedurally styled toy environments and image augmentations.

pub mod aug;
pub mod gridworld;
pub mod palette;
pub mod pointmass;

use serde::Serialize;
use thiserror::Error;

pub use aug::{aug_color_cutout, aug_random_translate, color_cutout, translate, Augmentation};
pub use gridworld::{render_grid, GridState, Layout, StyledGridworld};
pub use palette::{Pattern, StylePool, StyleSpec, TEST_IDS, TRAIN_IDS};
pub use pointmass::{render_point, PointState, StyledPointMass};

pub const ENV_IDS: [&str; 2] = ["gridworld-v0", "pointmass-v0"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("unknown environment id {0:?}; known: gridworld-v0, pointmass-v0")]
    UnknownEnv(String),
    #[error("style id {0} is in neither the train nor the test pool")]
    UnknownStyle(u64),
    #[error("step called before reset")]
    NotReset,
    #[error("step called on a terminal state")]
    Terminal,
    #[error("invalid action {0}")]
    InvalidAction(String),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ActionSpace {
    Discrete(usize),
    Continuous { dim: usize, low: f64, high: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ObsSpec {
    pub shape: [usize; 3],
    pub low: f64,
    pub high: f64,
    pub action: ActionSpace,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepInfo {
    /// A continuous action fell outside its bounds and was clamped.
    pub clamped: bool,
    /// The episode ended on its time limit rather than a terminal state.
    pub truncated: bool,
}

#[derive(Clone, Debug)]
pub struct Step {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

pub trait Env: Send {
    fn spec(&self) -> &ObsSpec;
    /// Flat `C×H×W` observation of the initial state.
    fn reset(&mut self, layout_seed: u64, style_id: u64) -> Result<Vec<f64>, EnvError>;
    fn step(&mut self, action: &Action) -> Result<Step, EnvError>;
    /// Best achievable return from the current episode's start, when known.
    fn optimal_return(&self) -> Option<f64>;
}

pub fn make(id: &str) -> Result<Box<dyn Env>, EnvError> {
    match id {
        "gridworld-v0" => Ok(Box::new(StyledGridworld::new())),
        "pointmass-v0" => Ok(Box::new(StyledPointMass::new())),
        _ => Err(EnvError::UnknownEnv(id.to_string())),
    }
}

pub fn obs_spec(id: &str) -> Result<ObsSpec, EnvError> {
    make(id).map(|e| e.spec().clone())
}
