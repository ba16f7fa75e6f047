//! Zero-shot evaluation and the embedding style-sensitivity index.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::model::Model;
use super::seed::seed_everything;
use super::HarnessError;
use crate::envs::{self, StylePool};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub pool: StylePool,
    pub mean: f64,
    /// Population standard deviation over episodes.
    pub std: f64,
    pub episodes: usize,
    pub seed: u64,
    pub returns: Vec<f64>,
    pub style_ids: Vec<u64>,
    pub layouts: Vec<u64>,
    /// Mean best achievable return over the same episodes, when the
    /// environment can compute it.
    pub optimal_mean: Option<f64>,
}

/// Style ids an evaluation on `pool` may draw from.
pub fn pool_ids(cfg: &RunConfig, pool: StylePool) -> Vec<u64> {
    match pool {
        StylePool::Train => pool.ids().take(cfg.n_train_styles).collect(),
        StylePool::Test => pool.ids().collect(),
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs `episodes` episodes with deterministic actions and no mixing,
/// perturbation, or augmentation. Each episode draws a style from `pool`
/// and a layout from the config's layout pool; the draws depend only on
/// `seed`, so both pools see the same layout sequence.
pub fn evaluate(
    model: &Model,
    cfg: &RunConfig,
    pool: StylePool,
    episodes: usize,
    seed: u64,
) -> Result<EvalSummary, HarnessError> {
    let ids = pool_ids(cfg, pool);
    let mut rng = seed_everything(seed).stream("eval");
    let mut env = envs::make(&cfg.env)?;
    let mut returns = Vec::with_capacity(episodes);
    let mut style_ids = Vec::with_capacity(episodes);
    let mut layouts = Vec::with_capacity(episodes);
    let mut optimal = Vec::new();
    let mut unused = seed_everything(seed).stream("action");
    for _ in 0..episodes {
        let style = ids[rng.random_range(0..ids.len())];
        let layout = rng.random_range(0..cfg.n_layouts);
        let mut obs = env.reset(layout, style)?;
        if let Some(o) = env.optimal_return() {
            optimal.push(o);
        }
        let mut total = 0.0;
        loop {
            let batch = model.batch(obs)?;
            let action = model.act(&batch, true, &mut unused)?.remove(0);
            let step = env.step(&action)?;
            total += step.reward;
            obs = step.obs;
            if step.done {
                break;
            }
        }
        returns.push(total);
        style_ids.push(style);
        layouts.push(layout);
    }
    let (mean, std) = mean_std(&returns);
    let optimal_mean = (!optimal.is_empty()).then(|| mean_std(&optimal).0);
    Ok(EvalSummary {
        pool,
        mean,
        std,
        episodes,
        seed,
        returns,
        style_ids,
        layouts,
        optimal_mean,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleGap {
    pub cross_style_dist: f64,
    pub cross_state_dist: f64,
    /// `cross_style / cross_state`, or 0 when `cross_state` is 0.
    pub index: f64,
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn mean_pairwise(rows: &[&[f64]]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            sum += l2(rows[i], rows[j]);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Style sensitivity of embeddings laid out as `features[state][style]`:
/// mean pairwise distance across styles for a fixed state, against mean
/// pairwise distance across states for a fixed style.
pub fn style_gap(features: &[Vec<Vec<f64>>]) -> Result<StyleGap, HarnessError> {
    if features.len() < 2 {
        return Err(HarnessError::Invalid("style gap needs at least 2 states".into()));
    }
    let n_styles = features[0].len();
    if n_styles == 0 || features.iter().any(|f| f.len() != n_styles) {
        return Err(HarnessError::Invalid("every state needs the same styles".into()));
    }
    let cross_style = features
        .iter()
        .map(|per_style| mean_pairwise(&per_style.iter().map(Vec::as_slice).collect::<Vec<_>>()))
        .sum::<f64>()
        / features.len() as f64;
    let cross_state = (0..n_styles)
        .map(|s| mean_pairwise(&features.iter().map(|f| f[s].as_slice()).collect::<Vec<_>>()))
        .sum::<f64>()
        / n_styles as f64;
    let index = if cross_state == 0.0 {
        0.0
    } else {
        cross_style / cross_state
    };
    Ok(StyleGap {
        cross_style_dist: cross_style,
        cross_state_dist: cross_state,
        index,
    })
}

/// Renders the initial state of each layout under each style and returns
/// `obs[state][style]`.
pub fn render_states(env_id: &str, layouts: &[u64], styles: &[u64]) -> Result<Vec<Vec<Vec<f64>>>, HarnessError> {
    let mut env = envs::make(env_id)?;
    layouts
        .iter()
        .map(|&l| styles.iter().map(|&s| Ok(env.reset(l, s)?)).collect())
        .collect()
}

/// The index on branch-point embeddings of `model`.
pub fn embedding_style_gap(
    model: &Model,
    env_id: &str,
    layouts: &[u64],
    styles: &[u64],
) -> Result<StyleGap, HarnessError> {
    if layouts.len() < 2 {
        return Err(HarnessError::Invalid("n_states must be at least 2".into()));
    }
    let obs = render_states(env_id, layouts, styles)?;
    let mut features = Vec::with_capacity(obs.len());
    for per_style in obs {
        let batch = model.batch(per_style.concat())?;
        features.push(model.branch_features(&batch)?);
    }
    style_gap(&features)
}
