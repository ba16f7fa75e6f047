use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::palette::{Canvas, StyleSpec, AGENT, COLLECTIBLE, HAZARD};
use super::{Action, ActionSpace, Env, EnvError, ObsSpec, Step, StepInfo};

pub const GRID: usize = 8;
pub const CELL: usize = 4;
pub const N_COLLECTIBLES: usize = 3;
pub const N_HAZARDS: usize = 2;
pub const BUDGET: usize = 64;

const MOVES: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// Entity placement, a pure function of the layout seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub agent: (usize, usize),
    pub collectibles: [(usize, usize); N_COLLECTIBLES],
    pub hazards: [(usize, usize); N_HAZARDS],
}

impl Layout {
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = sample(&mut rng, GRID * GRID, 1 + N_COLLECTIBLES + N_HAZARDS).into_vec();
        let at = |i: usize| (cells[i] / GRID, cells[i] % GRID);
        Self {
            agent: at(0),
            collectibles: [at(1), at(2), at(3)],
            hazards: [at(4), at(5)],
        }
    }

    /// Most collectibles obtainable within the step budget without
    /// touching a hazard, by breadth-first search over
    /// `(position, collected set)`.
    pub fn optimal_return(&self) -> f64 {
        let n = GRID * GRID;
        let idx = |(r, c): (usize, usize)| r * GRID + c;
        let full = (1u8 << N_COLLECTIBLES) - 1;
        let mut seen = vec![false; n << N_COLLECTIBLES];
        let mut queue = VecDeque::new();
        let start = (idx(self.agent), 0u8, 0usize);
        seen[start.0 << N_COLLECTIBLES] = true;
        queue.push_back(start);
        let mut best = 0u32;
        while let Some((pos, mask, depth)) = queue.pop_front() {
            best = best.max(mask.count_ones());
            if mask == full || depth == BUDGET {
                continue;
            }
            let (r, c) = ((pos / GRID) as isize, (pos % GRID) as isize);
            for (dr, dc) in MOVES {
                let (nr, nc) = (r + dr, c + dc);
                let np = if (0..GRID as isize).contains(&nr) && (0..GRID as isize).contains(&nc) {
                    (nr as usize, nc as usize)
                } else {
                    (r as usize, c as usize)
                };
                if self.hazards.contains(&np) {
                    continue;
                }
                let mut nm = mask;
                if let Some(k) = self.collectibles.iter().position(|&p| p == np) {
                    nm |= 1 << k;
                }
                let key = (idx(np) << N_COLLECTIBLES) | nm as usize;
                if !seen[key] {
                    seen[key] = true;
                    queue.push_back((idx(np), nm, depth + 1));
                }
            }
        }
        best as f64
    }
}

/// Grid state. Dynamics never read the style.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridState {
    pub layout: Layout,
    pub agent: (usize, usize),
    pub remaining: [bool; N_COLLECTIBLES],
    pub t: usize,
    pub done: bool,
}

pub fn render_grid(state: &GridState, style: &StyleSpec) -> Vec<f64> {
    let mut canvas = Canvas::new(style);
    let px = |(r, c): (usize, usize)| ((r * CELL) as isize, (c * CELL) as isize);
    for (k, &p) in state.layout.collectibles.iter().enumerate() {
        if state.remaining[k] {
            let (y, x) = px(p);
            canvas.sprite(y, x, COLLECTIBLE);
        }
    }
    for &h in &state.layout.hazards {
        let (y, x) = px(h);
        canvas.sprite(y, x, HAZARD);
    }
    let (y, x) = px(state.agent);
    canvas.sprite(y, x, AGENT);
    canvas.finish(style, state.t as u64)
}

pub struct StyledGridworld {
    spec: ObsSpec,
    state: Option<GridState>,
    style: Option<StyleSpec>,
}

impl Default for StyledGridworld {
    fn default() -> Self {
        Self::new()
    }
}

impl StyledGridworld {
    pub fn new() -> Self {
        Self {
            spec: ObsSpec {
                shape: [3, 32, 32],
                low: 0.0,
                high: 1.0,
                action: ActionSpace::Discrete(4),
            },
            state: None,
            style: None,
        }
    }

    pub fn state(&self) -> Option<&GridState> {
        self.state.as_ref()
    }
}

impl Env for StyledGridworld {
    fn spec(&self) -> &ObsSpec {
        &self.spec
    }

    fn reset(&mut self, layout_seed: u64, style_id: u64) -> Result<Vec<f64>, EnvError> {
        let style = StyleSpec::new(style_id)?;
        let layout = Layout::generate(layout_seed);
        let state = GridState {
            agent: layout.agent,
            layout,
            remaining: [true; N_COLLECTIBLES],
            t: 0,
            done: false,
        };
        let obs = render_grid(&state, &style);
        self.state = Some(state);
        self.style = Some(style);
        Ok(obs)
    }

    fn step(&mut self, action: &Action) -> Result<Step, EnvError> {
        let (Some(state), Some(style)) = (self.state.as_mut(), self.style.as_ref()) else {
            return Err(EnvError::NotReset);
        };
        if state.done {
            return Err(EnvError::Terminal);
        }
        let a = match *action {
            Action::Discrete(a) if a < 4 => a,
            _ => return Err(EnvError::InvalidAction(format!("{action:?}"))),
        };
        let (dr, dc) = MOVES[a];
        let (r, c) = (state.agent.0 as isize + dr, state.agent.1 as isize + dc);
        if (0..GRID as isize).contains(&r) && (0..GRID as isize).contains(&c) {
            state.agent = (r as usize, c as usize);
        }
        state.t += 1;
        let mut reward = 0.0;
        if state.layout.hazards.contains(&state.agent) {
            reward = -1.0;
            state.done = true;
        } else if let Some(k) = state
            .layout
            .collectibles
            .iter()
            .position(|&p| p == state.agent)
        {
            if state.remaining[k] {
                state.remaining[k] = false;
                reward = 1.0;
            }
        }
        let cleared = state.remaining.iter().all(|r| !r);
        let truncated = !state.done && !cleared && state.t >= BUDGET;
        state.done |= cleared || state.t >= BUDGET;
        Ok(Step {
            obs: render_grid(state, style),
            reward,
            done: state.done,
            info: StepInfo {
                clamped: false,
                truncated,
            },
        })
    }

    fn optimal_return(&self) -> Option<f64> {
        self.state.as_ref().map(|s| s.layout.optimal_return())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_cells_distinct() {
        for seed in 0..50 {
            let l = Layout::generate(seed);
            let mut cells = vec![l.agent];
            cells.extend(l.collectibles);
            cells.extend(l.hazards);
            cells.sort();
            cells.dedup();
            assert_eq!(cells.len(), 6);
        }
    }

    #[test]
    fn walled_corner_limits_optimum() {
        let l = Layout {
            agent: (4, 4),
            collectibles: [(0, 0), (5, 5), (6, 6)],
            hazards: [(0, 1), (1, 0)],
        };
        assert_eq!(l.optimal_return(), 2.0);
    }
}
