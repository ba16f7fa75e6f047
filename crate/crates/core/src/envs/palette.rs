//! Visual styles and the shared pixel renderer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EnvError;

pub const IMG: usize = 32;

pub const TRAIN_IDS: std::ops::Range<u64> = 0..200;
pub const TEST_IDS: std::ops::Range<u64> = 10_000..10_100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StylePool {
    Train,
    Test,
}

impl StylePool {
    pub fn ids(self) -> std::ops::Range<u64> {
        match self {
            Self::Train => TRAIN_IDS,
            Self::Test => TEST_IDS,
        }
    }

    pub fn of(style_id: u64) -> Option<Self> {
        if TRAIN_IDS.contains(&style_id) {
            Some(Self::Train)
        } else if TEST_IDS.contains(&style_id) {
            Some(Self::Test)
        } else {
            None
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Solid,
    Checker,
    Stripes,
    Noise,
}

/// Generative parameters of one style. Everything is a pure function of
/// `style_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleSpec {
    pub style_id: u64,
    pub palette: [[f64; 3]; 3],
    pub pattern: Pattern,
    pub phase: usize,
    pub jitter: f64,
    noise_mix: Vec<f64>,
}

impl StyleSpec {
    pub fn new(style_id: u64) -> Result<Self, EnvError> {
        if StylePool::of(style_id).is_none() {
            return Err(EnvError::UnknownStyle(style_id));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(style_id ^ 0x5354_594c_45);
        let mut palette = [[0.0; 3]; 3];
        for c in palette.iter_mut().flatten() {
            *c = rng.random_range(0.0..1.0);
        }
        let pattern = match rng.random_range(0..4) {
            0 => Pattern::Solid,
            1 => Pattern::Checker,
            2 => Pattern::Stripes,
            _ => Pattern::Noise,
        };
        let phase = rng.random_range(0..8);
        let jitter = rng.random_range(0.0..=0.1);
        let noise_mix = match pattern {
            Pattern::Noise => (0..IMG * IMG).map(|_| rng.random_range(0.0..1.0)).collect(),
            _ => Vec::new(),
        };
        Ok(Self {
            style_id,
            palette,
            pattern,
            phase,
            jitter,
            noise_mix,
        })
    }

    /// The same style with jitter disabled.
    pub fn without_jitter(mut self) -> Self {
        self.jitter = 0.0;
        self
    }

    /// Background color at pixel `(y, x)`, before jitter.
    pub fn background(&self, y: usize, x: usize) -> [f64; 3] {
        let [a, b, c] = self.palette;
        match self.pattern {
            Pattern::Solid => a,
            Pattern::Checker => {
                let cell = 2 + self.phase % 3;
                if ((y / cell) + (x / cell)) % 2 == 0 {
                    a
                } else {
                    b
                }
            }
            Pattern::Stripes => match ((x + y + self.phase) / 3) % 3 {
                0 => a,
                1 => b,
                _ => c,
            },
            Pattern::Noise => {
                let t = self.noise_mix[y * IMG + x];
                [0, 1, 2].map(|k| a[k] * (1.0 - t) + b[k] * t)
            }
        }
    }
}

/// Foreground sprite: outer ring color and inner 2×2 color of a 4×4 cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sprite {
    pub ring: [f64; 3],
    pub core: [f64; 3],
}

pub const AGENT: Sprite = Sprite {
    ring: [1.0, 1.0, 1.0],
    core: [0.0, 0.0, 1.0],
};
pub const COLLECTIBLE: Sprite = Sprite {
    ring: [1.0, 0.85, 0.0],
    core: [0.0, 1.0, 0.0],
};
pub const HAZARD: Sprite = Sprite {
    ring: [0.0, 0.0, 0.0],
    core: [1.0, 0.0, 0.0],
};
pub const GOAL: Sprite = COLLECTIBLE;

/// A `3×32×32` image under construction, channel-major, with a mask of
/// foreground pixels.
pub struct Canvas {
    pub data: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Canvas {
    pub fn new(style: &StyleSpec) -> Self {
        let mut data = vec![0.0; 3 * IMG * IMG];
        for y in 0..IMG {
            for x in 0..IMG {
                let c = style.background(y, x);
                for k in 0..3 {
                    data[k * IMG * IMG + y * IMG + x] = c[k];
                }
            }
        }
        Self {
            data,
            mask: vec![false; IMG * IMG],
        }
    }

    /// Draws a 4×4 sprite with top-left corner at pixel `(y, x)`; parts
    /// falling outside the image are dropped.
    pub fn sprite(&mut self, y: isize, x: isize, s: Sprite) {
        for dy in 0..4isize {
            for dx in 0..4isize {
                let (py, px) = (y + dy, x + dx);
                if py < 0 || px < 0 || py >= IMG as isize || px >= IMG as isize {
                    continue;
                }
                let inner = (1..3).contains(&dy) && (1..3).contains(&dx);
                let c = if inner { s.core } else { s.ring };
                let p = py as usize * IMG + px as usize;
                for k in 0..3 {
                    self.data[k * IMG * IMG + p] = c[k];
                }
                self.mask[p] = true;
            }
        }
    }

    /// Adds jitter noise, seeded by `(style_id, timestep)`, to background
    /// pixels and clamps into `[0, 1]`.
    pub fn finish(mut self, style: &StyleSpec, timestep: u64) -> Vec<f64> {
        if style.jitter > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(style.style_id);
            rng.set_stream(timestep);
            for p in 0..IMG * IMG {
                if self.mask[p] {
                    continue;
                }
                for k in 0..3 {
                    let v = &mut self.data[k * IMG * IMG + p];
                    *v = (*v + style.jitter * rng.random_range(-1.0..1.0)).clamp(0.0, 1.0);
                }
            }
        }
        self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_are_disjoint() {
        assert!(TRAIN_IDS.clone().all(|i| StylePool::of(i) == Some(StylePool::Train)));
        assert!(TEST_IDS.clone().all(|i| StylePool::of(i) == Some(StylePool::Test)));
        assert!(StylePool::of(500).is_none());
        assert!(matches!(StyleSpec::new(500), Err(EnvError::UnknownStyle(500))));
    }

    #[test]
    fn style_is_pure_function_of_id() {
        assert_eq!(StyleSpec::new(7).unwrap(), StyleSpec::new(7).unwrap());
        assert_ne!(StyleSpec::new(7).unwrap(), StyleSpec::new(8).unwrap());
        let s = StyleSpec::new(10_003).unwrap();
        assert!((0.0..=0.1).contains(&s.jitter));
    }
}
