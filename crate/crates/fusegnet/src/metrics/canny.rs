//! Canny edge extraction tuned for binary masks.
//!
//! Gaussian pre-smoothing uses a deliberately tiny standard deviation (0.1) so
//! the step edges of a binary mask stay sharp, followed by Sobel gradients,
//! non-maximum suppression, and hysteresis at 0.1/0.2 of the gradient range.
//! Tie-breaking in the suppression step is purely spatial (strict toward the
//! greater index), which makes the edge set invariant under mask complement.

use ndarray::Array2;

pub const GAUSSIAN_SIGMA: f64 = 0.1;
const LOW_FRACTION: f64 = 0.1;
const HIGH_FRACTION: f64 = 0.2;

fn gaussian_blur(input: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for v in kernel.iter_mut() {
        *v /= sum;
    }

    let (h, w) = input.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let ix = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += kv * input[[y, ix]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let iy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[[iy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

fn sobel(input: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = input.dim();
    let mut gx = Array2::<f64>::zeros((h, w));
    let mut gy = Array2::<f64>::zeros((h, w));
    let at = |y: isize, x: isize| -> f64 {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        input[[y, x]]
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            gx[[y as usize, x as usize]] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            gy[[y as usize, x as usize]] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        }
    }
    (gx, gy)
}

/// Extracts edge pixel coordinates `(row, col)` from a binary mask.
pub fn canny_boundary(mask: &Array2<u8>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let float = mask.mapv(|v| v as f64);
    let smooth = gaussian_blur(&float, GAUSSIAN_SIGMA);
    let (gx, gy) = sobel(&smooth);
    let mut mag = Array2::<f64>::zeros((h, w));
    let mut max_mag = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let m = gx[[y, x]].hypot(gy[[y, x]]);
            mag[[y, x]] = m;
            max_mag = max_mag.max(m);
        }
    }
    if max_mag == 0.0 {
        return Vec::new();
    }

    // Non-maximum suppression along the quantized gradient axis. The two
    // neighbors are ordered spatially; the comparison is strict toward the
    // greater index so step-edge ties keep exactly one side.
    let mut thin = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let m = mag[[y, x]];
            if m == 0.0 {
                continue;
            }
            let angle = gy[[y, x]].atan2(gx[[y, x]]).to_degrees().rem_euclid(180.0);
            let (dy, dx) = if !(22.5..157.5).contains(&angle) {
                (0isize, 1isize) // horizontal gradient, vertical edge
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let get = |yy: isize, xx: isize| -> f64 {
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    0.0
                } else {
                    mag[[yy as usize, xx as usize]]
                }
            };
            let forward = get(y as isize + dy, x as isize + dx);
            let backward = get(y as isize - dy, x as isize - dx);
            if m > forward && m >= backward {
                thin[[y, x]] = m;
            }
        }
    }

    // Hysteresis: strong seeds grow through 8-connected weak pixels.
    let low = LOW_FRACTION * max_mag;
    let high = HIGH_FRACTION * max_mag;
    let mut state = Array2::<u8>::zeros((h, w)); // 0 none, 1 weak, 2 strong
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if thin[[y, x]] >= high {
                state[[y, x]] = 2;
                stack.push((y, x));
            } else if thin[[y, x]] >= low {
                state[[y, x]] = 1;
            }
        }
    }
    while let Some((y, x)) = stack.pop() {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize {
                    let (ny, nx) = (ny as usize, nx as usize);
                    if state[[ny, nx]] == 1 {
                        state[[ny, nx]] = 2;
                        stack.push((ny, nx));
                    }
                }
            }
        }
    }

    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if state[[y, x]] == 2 {
                out.push((y, x));
            }
        }
    }
    out
}
