//! 2-D convolution ops (dense and depthwise) with reverse-mode gradients.
//!
//! Dense convolution lowers to GEMM through im2col built in bounded row slabs,
//! so peak memory stays flat for large feature maps. Parallel work is split so
//! every output element is produced by exactly one task, which keeps results
//! bitwise deterministic regardless of thread count.

use super::tensor::{Data, Tensor};
use ndarray::{linalg::general_mat_mul, Array1, Array2, Array3, Array4, ArrayView3, Axis, Ix1, Ix4};
use rayon::prelude::*;

pub fn conv_output_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

fn slab_rows(k: usize, total_rows: usize) -> usize {
    // ~32 MB of f64 per im2col slab buffer.
    (4_000_000 / k.max(1)).clamp(64, 65_536).min(total_rows.max(1))
}

/// Fills `cols` (rows x Cin*kh*kw) with input patches for output pixels
/// `r0..r0+rows` of one image.
#[allow(clippy::too_many_arguments)]
fn im2col_slab(
    x: &ArrayView3<f64>,
    cols: &mut Array2<f64>,
    r0: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let (cin, h, w) = x.dim();
    let rows = cols.nrows();
    for t in 0..rows {
        let pix = r0 + t;
        let oy = pix / ow;
        let ox = pix % ow;
        let row = cols.row_mut(t);
        let row = row.into_slice().expect("im2col row must be contiguous");
        let mut k = 0;
        for ci in 0..cin {
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    row[k..k + kw].fill(0.0);
                    k += kw;
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    row[k] = if ix < 0 || ix >= w as isize {
                        0.0
                    } else {
                        x[[ci, iy as usize, ix as usize]]
                    };
                    k += 1;
                }
            }
        }
    }
}

/// Scatter-adds im2col-layout gradients back onto the input image.
#[allow(clippy::too_many_arguments)]
fn col2im_add_slab(
    gx: &mut Array3<f64>,
    dcols: &Array2<f64>,
    r0: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let (cin, h, w) = gx.dim();
    for t in 0..dcols.nrows() {
        let pix = r0 + t;
        let oy = pix / ow;
        let ox = pix % ow;
        let row = dcols.row(t);
        let row = row.to_slice().expect("col2im row must be contiguous");
        let mut k = 0;
        for ci in 0..cin {
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    k += kw;
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix >= 0 && ix < w as isize {
                        gx[[ci, iy as usize, ix as usize]] += row[k];
                    }
                    k += 1;
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward_raw(
    x: &Array4<f64>,
    w: &Array4<f64>,
    b: Option<&Array1<f64>>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, cin, h, win) = x.dim();
    let (cout, wcin, kh, kw) = w.dim();
    assert_eq!(cin, wcin, "conv2d: channel mismatch");
    let oh = conv_output_len(h, kh, stride, pad);
    let ow = conv_output_len(win, kw, stride, pad);
    let k = cin * kh * kw;
    let total = oh * ow;
    let slab = slab_rows(k, total);

    // (K x Cout) operand so each slab GEMM is cols . w_t.
    let w_mat = w.view().into_shape((cout, k)).unwrap();
    let mut w_t = Array2::<f64>::zeros((k, cout));
    w_t.assign(&w_mat.t());

    let mut out = Array4::<f64>::zeros((n, cout, oh, ow));
    for ni in 0..n {
        let xn = x.index_axis(Axis(0), ni);
        let mut out_n = out.index_axis_mut(Axis(0), ni);
        let mut out2 = out_n.view_mut().into_shape((cout, total)).unwrap();
        let chunks: Vec<_> = out2.axis_chunks_iter_mut(Axis(1), slab).collect();
        chunks.into_par_iter().enumerate().for_each(|(si, mut chunk)| {
            let r0 = si * slab;
            let rows = chunk.ncols();
            let mut cols = Array2::<f64>::zeros((rows, k));
            im2col_slab(&xn, &mut cols, r0, ow, kh, kw, stride, pad);
            let mut tmp = Array2::<f64>::zeros((rows, cout));
            general_mat_mul(1.0, &cols, &w_t, 0.0, &mut tmp);
            for c in 0..cout {
                let base = b.map_or(0.0, |b| b[c]);
                for j in 0..rows {
                    chunk[[c, j]] = tmp[[j, c]] + base;
                }
            }
        });
    }
    out
}

#[allow(clippy::type_complexity)]
pub(crate) fn conv2d_backward_raw(
    x: &Array4<f64>,
    w: &Array4<f64>,
    has_bias: bool,
    stride: usize,
    pad: usize,
    gout: &Array4<f64>,
) -> (Array4<f64>, Array4<f64>, Option<Array1<f64>>) {
    let (n, cin, h, win) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let (_, _, oh, ow) = gout.dim();
    let k = cin * kh * kw;
    let total = oh * ow;
    let slab = slab_rows(k, total);
    let w_mat = w.view().into_shape((cout, k)).unwrap().to_owned();

    // Weight gradient: serial accumulation for determinism.
    let mut gw_mat = Array2::<f64>::zeros((cout, k));
    for ni in 0..n {
        let xn = x.index_axis(Axis(0), ni);
        let gout_n = gout.index_axis(Axis(0), ni);
        let gout2 = gout_n.into_shape((cout, total)).unwrap();
        let mut r0 = 0;
        while r0 < total {
            let rows = slab.min(total - r0);
            let mut cols = Array2::<f64>::zeros((rows, k));
            im2col_slab(&xn, &mut cols, r0, ow, kh, kw, stride, pad);
            let gslab = gout2.slice_axis(Axis(1), ndarray::Slice::from(r0..r0 + rows));
            general_mat_mul(1.0, &gslab, &cols, 1.0, &mut gw_mat);
            r0 += rows;
        }
    }
    let gw = gw_mat.into_shape((cout, cin, kh, kw)).unwrap();

    // Input gradient: images are independent, so parallelize over the batch.
    let gx_planes: Vec<Array3<f64>> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let mut gxn = Array3::<f64>::zeros((cin, h, win));
            let gout_n = gout.index_axis(Axis(0), ni);
            let gout2 = gout_n.into_shape((cout, total)).unwrap();
            let mut r0 = 0;
            while r0 < total {
                let rows = slab.min(total - r0);
                let gslab = gout2.slice_axis(Axis(1), ndarray::Slice::from(r0..r0 + rows));
                let mut dcols = Array2::<f64>::zeros((rows, k));
                general_mat_mul(1.0, &gslab.t(), &w_mat, 0.0, &mut dcols);
                col2im_add_slab(&mut gxn, &dcols, r0, ow, kh, kw, stride, pad);
                r0 += rows;
            }
            gxn
        })
        .collect();
    let mut gx = Array4::<f64>::zeros((n, cin, h, win));
    for (ni, plane) in gx_planes.into_iter().enumerate() {
        gx.index_axis_mut(Axis(0), ni).assign(&plane);
    }

    let gb = has_bias.then(|| {
        let mut gb = Array1::<f64>::zeros(cout);
        for ni in 0..n {
            for c in 0..cout {
                gb[c] += gout.index_axis(Axis(0), ni).index_axis(Axis(0), c).sum();
            }
        }
        gb
    });
    (gx, gw, gb)
}

/// Dense convolution over `(N,Cin,H,W)` with weights `(Cout,Cin,kh,kw)`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let xd = x.to_data().into_dimensionality::<Ix4>().unwrap();
    let wd = w.to_data().into_dimensionality::<Ix4>().unwrap();
    let bd = b.map(|b| b.to_data().into_dimensionality::<Ix1>().unwrap());
    let out = conv2d_forward_raw(&xd, &wd, bd.as_ref(), stride, pad);
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let has_bias = b.is_some();
    Tensor::from_op(
        out.into_dyn(),
        parents,
        Box::new(move |g: &Data| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap().to_owned();
            let (gx, gw, gb) = conv2d_backward_raw(&xd, &wd, has_bias, stride, pad, &g4);
            let mut grads = vec![Some(gx.into_dyn()), Some(gw.into_dyn())];
            if has_bias {
                grads.push(Some(gb.unwrap().into_dyn()));
            }
            grads
        }),
    )
}

pub(crate) fn depthwise_forward_raw(
    x: &Array4<f64>,
    w: &Array4<f64>,
    b: Option<&Array1<f64>>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, c, h, win) = x.dim();
    let (wc, one, kh, kw) = w.dim();
    assert_eq!(c, wc, "depthwise: channel mismatch");
    assert_eq!(one, 1, "depthwise weights must be (C,1,kh,kw)");
    let oh = conv_output_len(h, kh, stride, pad);
    let ow = conv_output_len(win, kw, stride, pad);
    let mut out = Array4::<f64>::zeros((n, c, oh, ow));
    {
        let mut flat = out.view_mut().into_shape((n * c, oh, ow)).unwrap();
        let planes: Vec<_> = flat.axis_iter_mut(Axis(0)).collect();
        planes.into_par_iter().enumerate().for_each(|(i, mut plane)| {
            let (ni, ci) = (i / c, i % c);
            let xp = x.index_axis(Axis(0), ni);
            let xp = xp.index_axis(Axis(0), ci);
            let wp = w.index_axis(Axis(0), ci);
            let wp = wp.index_axis(Axis(0), 0);
            let base = b.map_or(0.0, |b| b[ci]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = base;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < win as isize {
                                acc += xp[[iy as usize, ix as usize]] * wp[[ky, kx]];
                            }
                        }
                    }
                    plane[[oy, ox]] = acc;
                }
            }
        });
    }
    out
}

/// Depthwise convolution: one `kh x kw` filter per channel.
pub fn depthwise_conv2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let xd = x.to_data().into_dimensionality::<Ix4>().unwrap();
    let wd = w.to_data().into_dimensionality::<Ix4>().unwrap();
    let bd = b.map(|b| b.to_data().into_dimensionality::<Ix1>().unwrap());
    let out = depthwise_forward_raw(&xd, &wd, bd.as_ref(), stride, pad);
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let has_bias = b.is_some();
    Tensor::from_op(
        out.into_dyn(),
        parents,
        Box::new(move |g: &Data| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let (n, c, h, win) = xd.dim();
            let (_, _, kh, kw) = wd.dim();
            let (_, _, oh, ow) = g4.dim();

            let mut gx = Array4::<f64>::zeros((n, c, h, win));
            {
                let mut flat = gx.view_mut().into_shape((n * c, h, win)).unwrap();
                let planes: Vec<_> = flat.axis_iter_mut(Axis(0)).collect();
                planes.into_par_iter().enumerate().for_each(|(i, mut plane)| {
                    let (ni, ci) = (i / c, i % c);
                    let gp = g4.index_axis(Axis(0), ni);
                    let gp = gp.index_axis(Axis(0), ci);
                    let wp = wd.index_axis(Axis(0), ci);
                    let wp = wp.index_axis(Axis(0), 0);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gp[[oy, ox]];
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix >= 0 && ix < win as isize {
                                        plane[[iy as usize, ix as usize]] += gv * wp[[ky, kx]];
                                    }
                                }
                            }
                        }
                    }
                });
            }

            let gw_rows: Vec<Array2<f64>> = (0..c)
                .into_par_iter()
                .map(|ci| {
                    let mut acc = Array2::<f64>::zeros((kh, kw));
                    for ni in 0..n {
                        let gp = g4.index_axis(Axis(0), ni);
                        let gp = gp.index_axis(Axis(0), ci);
                        let xp = xd.index_axis(Axis(0), ni);
                        let xp = xp.index_axis(Axis(0), ci);
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = gp[[oy, ox]];
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix >= 0 && ix < win as isize {
                                            acc[[ky, kx]] += gv * xp[[iy as usize, ix as usize]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    acc
                })
                .collect();
            let mut gw = Array4::<f64>::zeros((c, 1, kh, kw));
            for (ci, acc) in gw_rows.into_iter().enumerate() {
                gw.index_axis_mut(Axis(0), ci)
                    .index_axis_mut(Axis(0), 0)
                    .assign(&acc);
            }

            let mut grads = vec![Some(gx.into_dyn()), Some(gw.into_dyn())];
            if has_bias {
                let mut gb = Array1::<f64>::zeros(c);
                for ni in 0..n {
                    for ci in 0..c {
                        gb[ci] += g4.index_axis(Axis(0), ni).index_axis(Axis(0), ci).sum();
                    }
                }
                grads.push(Some(gb.into_dyn()));
            }
            grads
        }),
    )
}
