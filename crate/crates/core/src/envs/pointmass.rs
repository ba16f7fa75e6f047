use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::palette::{Canvas, StyleSpec, AGENT, GOAL, IMG};
use super::{Action, ActionSpace, Env, EnvError, ObsSpec, Step, StepInfo};

pub const HORIZON: usize = 200;
pub const FRAMES: usize = 3;
pub const DT: f64 = 0.05;
pub const MAX_SPEED: f64 = 1.0;

/// Double integrator on `[-1, 1]²`. Walls zero the normal velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct PointState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub goal: [f64; 2],
    pub t: usize,
}

impl PointState {
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = || rng.random_range(-0.8..0.8);
        Self {
            pos: [u(), u()],
            vel: [0.0, 0.0],
            goal: [u(), u()],
            t: 0,
        }
    }

    pub fn reward(&self) -> f64 {
        let d2 = (self.pos[0] - self.goal[0]).powi(2) + (self.pos[1] - self.goal[1]).powi(2);
        (-d2).exp()
    }

    fn advance(&mut self, a: [f64; 2]) {
        for k in 0..2 {
            self.vel[k] = (self.vel[k] + DT * a[k]).clamp(-MAX_SPEED, MAX_SPEED);
            self.pos[k] += DT * self.vel[k];
            if self.pos[k].abs() > 1.0 {
                self.pos[k] = self.pos[k].clamp(-1.0, 1.0);
                self.vel[k] = 0.0;
            }
        }
        self.t += 1;
    }
}

fn to_pixel(v: f64) -> isize {
    (((v + 1.0) / 2.0) * (IMG - 4) as f64).round() as isize
}

pub fn render_point(state: &PointState, style: &StyleSpec) -> Vec<f64> {
    let mut canvas = Canvas::new(style);
    canvas.sprite(to_pixel(state.goal[1]), to_pixel(state.goal[0]), GOAL);
    canvas.sprite(to_pixel(state.pos[1]), to_pixel(state.pos[0]), AGENT);
    canvas.finish(style, state.t as u64)
}

pub struct StyledPointMass {
    spec: ObsSpec,
    state: Option<PointState>,
    style: Option<StyleSpec>,
    frames: Vec<Vec<f64>>,
}

impl Default for StyledPointMass {
    fn default() -> Self {
        Self::new()
    }
}

impl StyledPointMass {
    pub fn new() -> Self {
        Self {
            spec: ObsSpec {
                shape: [3 * FRAMES, 32, 32],
                low: 0.0,
                high: 1.0,
                action: ActionSpace::Continuous {
                    dim: 2,
                    low: -1.0,
                    high: 1.0,
                },
            },
            state: None,
            style: None,
            frames: Vec::new(),
        }
    }

    pub fn state(&self) -> Option<&PointState> {
        self.state.as_ref()
    }

    fn stacked(&self) -> Vec<f64> {
        self.frames.concat()
    }
}

impl Env for StyledPointMass {
    fn spec(&self) -> &ObsSpec {
        &self.spec
    }

    fn reset(&mut self, layout_seed: u64, style_id: u64) -> Result<Vec<f64>, EnvError> {
        let style = StyleSpec::new(style_id)?;
        let state = PointState::generate(layout_seed);
        let frame = render_point(&state, &style);
        self.frames = vec![frame; FRAMES];
        self.state = Some(state);
        self.style = Some(style);
        Ok(self.stacked())
    }

    fn step(&mut self, action: &Action) -> Result<Step, EnvError> {
        let (Some(state), Some(style)) = (self.state.as_mut(), self.style.as_ref()) else {
            return Err(EnvError::NotReset);
        };
        if state.t >= HORIZON {
            return Err(EnvError::Terminal);
        }
        let raw = match action {
            Action::Continuous(v) if v.len() == 2 && v.iter().all(|x| !x.is_nan()) => [v[0], v[1]],
            _ => return Err(EnvError::InvalidAction(format!("{action:?}"))),
        };
        let a = raw.map(|x| x.clamp(-1.0, 1.0));
        let clamped = a != raw;
        state.advance(a);
        let reward = state.reward();
        let done = state.t >= HORIZON;
        let frame = render_point(state, style);
        self.frames.remove(0);
        self.frames.push(frame);
        Ok(Step {
            obs: self.stacked(),
            reward,
            done,
            info: StepInfo {
                clamped,
                truncated: done,
            },
        })
    }

    fn optimal_return(&self) -> Option<f64> {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn at_goal_at_rest_reward_one() {
        let s = PointState {
            pos: [0.3, -0.2],
            vel: [0.0, 0.0],
            goal: [0.3, -0.2],
            t: 0,
        };
        assert_eq!(s.reward(), 1.0);
    }

    #[test]
    fn state_stays_bounded() {
        let mut s = PointState::generate(4);
        for t in 0..1000 {
            let a = if (t / 50) % 2 == 0 { [1.0, -1.0] } else { [-1.0, 1.0] };
            s.advance(a);
            assert!(s.pos.iter().all(|p| p.abs() <= 1.0));
            assert!(s.vel.iter().all(|v| v.abs() <= MAX_SPEED));
        }
    }

    #[test]
    fn out_of_range_action_is_flagged() {
        let mut env = StyledPointMass::new();
        env.reset(1, 0).unwrap();
        let step = env.step(&Action::Continuous(vec![3.0, 0.0])).unwrap();
        assert!(step.info.clamped);
        let step = env.step(&Action::Continuous(vec![0.5, 0.0])).unwrap();
        assert!(!step.info.clamped);
    }
}
