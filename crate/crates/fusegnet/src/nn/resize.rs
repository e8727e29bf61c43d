//! Factor-2 spatial upsampling for the decoder path.

use super::tensor::Tensor;
use ndarray::{Array4, Axis, Ix4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    #[default]
    Bilinear,
    Nearest,
}

/// Source index/weight table for one axis of a half-pixel-centered 2x resize.
fn bilinear_table(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let floor = src.floor();
            let frac = src - floor;
            let i0 = (floor as isize).clamp(0, in_len as isize - 1) as usize;
            let i1 = (floor as isize + 1).clamp(0, in_len as isize - 1) as usize;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

/// Upsamples `(N,C,H,W)` to `(N,C,2H,2W)`.
pub fn upsample_2x(x: &Tensor, mode: UpsampleMode) -> Tensor {
    let xd = x.to_data().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = xd.dim();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Array4::<f64>::zeros((n, c, oh, ow));

    match mode {
        UpsampleMode::Nearest => {
            for ni in 0..n {
                for ci in 0..c {
                    let src = xd.index_axis(Axis(0), ni);
                    let src = src.index_axis(Axis(0), ci);
                    let mut dst = out.index_axis_mut(Axis(0), ni);
                    let mut dst = dst.index_axis_mut(Axis(0), ci);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dst[[oy, ox]] = src[[oy / 2, ox / 2]];
                        }
                    }
                }
            }
            Tensor::from_op(
                out.into_dyn(),
                vec![x.clone()],
                Box::new(move |g| {
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let mut gx = Array4::<f64>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            let gsrc = g4.index_axis(Axis(0), ni);
                            let gsrc = gsrc.index_axis(Axis(0), ci);
                            let mut gdst = gx.index_axis_mut(Axis(0), ni);
                            let mut gdst = gdst.index_axis_mut(Axis(0), ci);
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    gdst[[oy / 2, ox / 2]] += gsrc[[oy, ox]];
                                }
                            }
                        }
                    }
                    vec![Some(gx.into_dyn())]
                }),
            )
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_table(oh, h);
            let tx = bilinear_table(ow, w);
            {
                let mut flat = out.view_mut().into_shape((n * c, oh, ow)).unwrap();
                let planes: Vec<_> = flat.axis_iter_mut(Axis(0)).collect();
                planes.into_par_iter().enumerate().for_each(|(i, mut plane)| {
                    let (ni, ci) = (i / c, i % c);
                    let src = xd.index_axis(Axis(0), ni);
                    let src = src.index_axis(Axis(0), ci);
                    for oy in 0..oh {
                        let (y0, y1, wy0, wy1) = ty[oy];
                        for ox in 0..ow {
                            let (x0, x1, wx0, wx1) = tx[ox];
                            plane[[oy, ox]] = wy0 * (wx0 * src[[y0, x0]] + wx1 * src[[y0, x1]])
                                + wy1 * (wx0 * src[[y1, x0]] + wx1 * src[[y1, x1]]);
                        }
                    }
                });
            }
            let (ty_b, tx_b) = (ty, tx);
            Tensor::from_op(
                out.into_dyn(),
                vec![x.clone()],
                Box::new(move |g| {
                    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                    let mut gx = Array4::<f64>::zeros((n, c, h, w));
                    {
                        let mut flat = gx.view_mut().into_shape((n * c, h, w)).unwrap();
                        let planes: Vec<_> = flat.axis_iter_mut(Axis(0)).collect();
                        planes.into_par_iter().enumerate().for_each(|(i, mut plane)| {
                            let (ni, ci) = (i / c, i % c);
                            let gsrc = g4.index_axis(Axis(0), ni);
                            let gsrc = gsrc.index_axis(Axis(0), ci);
                            for oy in 0..2 * h {
                                let (y0, y1, wy0, wy1) = ty_b[oy];
                                for ox in 0..2 * w {
                                    let (x0, x1, wx0, wx1) = tx_b[ox];
                                    let gv = gsrc[[oy, ox]];
                                    plane[[y0, x0]] += wy0 * wx0 * gv;
                                    plane[[y0, x1]] += wy0 * wx1 * gv;
                                    plane[[y1, x0]] += wy1 * wx0 * gv;
                                    plane[[y1, x1]] += wy1 * wx1 * gv;
                                }
                            }
                        });
                    }
                    vec![Some(gx.into_dyn())]
                }),
            )
        }
    }
}
