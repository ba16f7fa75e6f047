//! Image augmentations on `C×H×W` buffers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augmentation {
    #[default]
    None,
    Trans,
    Color,
}

/// Shifts content by `(dx, dy)` pixels (positive `dx` moves right,
/// positive `dy` moves down), filling uncovered pixels with 0.
pub fn translate(img: &[f64], shape: [usize; 3], dx: isize, dy: isize) -> Vec<f64> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; img.len()];
    for k in 0..c {
        for y in 0..h as isize {
            let sy = y - dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w as isize {
                let sx = x - dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[k * h * w + y as usize * w + x as usize] =
                    img[k * h * w + sy as usize * w + sx as usize];
            }
        }
    }
    out
}

pub fn aug_random_translate<R: Rng + ?Sized>(
    img: &[f64],
    shape: [usize; 3],
    max_shift: usize,
    rng: &mut R,
) -> Vec<f64> {
    let m = max_shift as isize;
    let dx = rng.random_range(-m as i64..=m as i64) as isize;
    let dy = rng.random_range(-m as i64..=m as i64) as isize;
    translate(img, shape, dx, dy)
}

/// Fills the rectangle `[x0, x0+w) × [y0, y0+h)` with `color` in every
/// RGB frame of the stack.
pub fn color_cutout(
    img: &mut [f64],
    shape: [usize; 3],
    rect: (usize, usize, usize, usize),
    color: [f64; 3],
) {
    let [c, h, w] = shape;
    let (x0, y0, rw, rh) = rect;
    for k in 0..c {
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                img[k * h * w + y * w + x] = color[k % 3];
            }
        }
    }
}

/// One rectangle with sides uniform in `[4, 12]` pixels, placed fully
/// inside the image, filled with one uniform random color.
pub fn aug_color_cutout<R: Rng + ?Sized>(
    img: &[f64],
    shape: [usize; 3],
    rng: &mut R,
) -> (Vec<f64>, (usize, usize, usize, usize)) {
    let [_, h, w] = shape;
    let rw = rng.random_range(4..=12usize.min(w));
    let rh = rng.random_range(4..=12usize.min(h));
    let x0 = rng.random_range(0..=w - rw);
    let y0 = rng.random_range(0..=h - rh);
    let color = [0; 3].map(|_| rng.random_range(0.0..=1.0));
    let mut out = img.to_vec();
    color_cutout(&mut out, shape, (x0, y0, rw, rh), color);
    (out, (x0, y0, rw, rh))
}

impl Augmentation {
    /// Applies the augmentation independently to each row of a
    /// `B×C×H×W` batch.
    pub fn apply_batch<R: Rng + ?Sized>(self, batch: &Tensor, rng: &mut R) -> Tensor {
        if self == Self::None {
            return batch.clone();
        }
        let s = batch.shape();
        let shape = [s[1], s[2], s[3]];
        let n = shape.iter().product::<usize>();
        let mut data = Vec::with_capacity(batch.numel());
        for row in batch.data().chunks(n) {
            let out = match self {
                Self::Trans => aug_random_translate(row, shape, 4, rng),
                Self::Color => aug_color_cutout(row, shape, rng).0,
                Self::None => unreachable!(),
            };
            data.extend(out);
        }
        Tensor::new(s, data).expect("same shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp() -> Vec<f64> {
        (0..3 * 32 * 32).map(|i| 0.1 + (i % 97) as f64 / 120.0).collect()
    }

    #[test]
    fn zero_shift_is_identity() {
        let img = ramp();
        assert_eq!(translate(&img, [3, 32, 32], 0, 0), img);
    }

    #[test]
    fn right_shift_pads_left_columns() {
        let img = ramp();
        let out = translate(&img, [3, 32, 32], 4, 0);
        for k in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let v = out[k * 1024 + y * 32 + x];
                    if x < 4 {
                        assert_eq!(v, 0.0);
                    } else {
                        assert_eq!(v, img[k * 1024 + y * 32 + x - 4]);
                    }
                }
            }
        }
    }

    #[test]
    fn cutout_region_is_one_color() {
        let img = ramp();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (out, (x0, y0, w, h)) = aug_color_cutout(&img, [3, 32, 32], &mut rng);
            assert!((4..=12).contains(&w) && (4..=12).contains(&h));
            for y in 0..32 {
                for x in 0..32 {
                    let inside = (x0..x0 + w).contains(&x) && (y0..y0 + h).contains(&y);
                    for k in 0..3 {
                        let p = k * 1024 + y * 32 + x;
                        if inside {
                            assert_eq!(out[p], out[k * 1024 + y0 * 32 + x0]);
                        } else {
                            assert_eq!(out[p], img[p]);
                        }
                    }
                }
            }
        }
    }
}
