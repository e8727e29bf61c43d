//! Differentiable primitive ops used by the layers.
//!
//! Elementwise ops require equal shapes; broadcasting is intentionally limited
//! to the dedicated channel/spatial scaling ops the SE blocks need, which keeps
//! every backward closure mechanical.

use super::tensor::Tensor;
use ndarray::{ArrayD, Axis, Ix2, Ix4, IxDyn};

fn assert_same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "add");
    let out = &*a.data() + &*b.data();
    Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![Some(g.clone()), Some(g.clone())]),
    )
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "sub");
    let out = &*a.data() - &*b.data();
    Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![Some(g.clone()), Some(-g.clone())]),
    )
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "mul");
    let (da, db) = (a.to_data(), b.to_data());
    let out = &da * &db;
    Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| vec![Some(g * &db), Some(g * &da)]),
    )
}

pub fn div(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "div");
    let (da, db) = (a.to_data(), b.to_data());
    let out = &da / &db;
    Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let ga = g / &db;
            let gb = -(g * &da) / (&db * &db);
            vec![Some(ga), Some(gb)]
        }),
    )
}

pub fn add_scalar(a: &Tensor, c: f64) -> Tensor {
    let out = a.to_data() + c;
    Tensor::from_op(out, vec![a.clone()], Box::new(|g| vec![Some(g.clone())]))
}

pub fn mul_scalar(a: &Tensor, c: f64) -> Tensor {
    let out = a.to_data() * c;
    Tensor::from_op(out, vec![a.clone()], Box::new(move |g| vec![Some(g * c)]))
}

pub fn neg(a: &Tensor) -> Tensor {
    mul_scalar(a, -1.0)
}

/// Elementwise maximum. On ties the gradient goes to the first argument.
pub fn maximum(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "maximum");
    let (da, db) = (a.to_data(), b.to_data());
    let mut out = da.clone();
    out.zip_mut_with(&db, |x, &y| *x = x.max(y));
    Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let mut ga = g.clone();
            let mut gb = g.clone();
            ndarray::Zip::from(&mut ga)
                .and(&mut gb)
                .and(&da)
                .and(&db)
                .for_each(|ga, gb, &x, &y| {
                    if x >= y {
                        *gb = 0.0;
                    } else {
                        *ga = 0.0;
                    }
                });
            vec![Some(ga), Some(gb)]
        }),
    )
}

pub fn relu(a: &Tensor) -> Tensor {
    let da = a.to_data();
    let out = da.mapv(|v| v.max(0.0));
    Tensor::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let mut gx = g.clone();
            gx.zip_mut_with(&da, |gv, &x| {
                if x <= 0.0 {
                    *gv = 0.0;
                }
            });
            vec![Some(gx)]
        }),
    )
}

fn sigmoid_val(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    let out = a.data().mapv(sigmoid_val);
    let saved = out.clone();
    Tensor::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let gx = g * &(saved.mapv(|s| s * (1.0 - s)));
            vec![Some(gx)]
        }),
    )
}

/// Swish / SiLU: `x * sigmoid(x)`.
pub fn swish(a: &Tensor) -> Tensor {
    let da = a.to_data();
    let sig = da.mapv(sigmoid_val);
    let out = &da * &sig;
    Tensor::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let deriv = ndarray::Zip::from(&da)
                .and(&sig)
                .map_collect(|&x, &s| s + x * s * (1.0 - s));
            vec![Some(g * &deriv)]
        }),
    )
}

pub fn ln(a: &Tensor) -> Tensor {
    let da = a.to_data();
    let out = da.mapv(f64::ln);
    Tensor::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g| vec![Some(g / &da)]),
    )
}

/// Elementwise power with a constant exponent. Inputs must be nonnegative
/// when the exponent is fractional.
pub fn powf(a: &Tensor, exp: f64) -> Tensor {
    let da = a.to_data();
    let out = da.mapv(|v| v.powf(exp));
    Tensor::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g| {
            if exp == 0.0 {
                return vec![Some(ArrayD::zeros(g.raw_dim()))];
            }
            let deriv = da.mapv(|v| exp * v.powf(exp - 1.0));
            vec![Some(g * &deriv)]
        }),
    )
}

/// Clamp with straight-through gradient strictly inside `[lo, hi]`.
pub fn clamp(a: &Tensor, lo: f64, hi: f64) -> Tensor {
    let da = a.to_data();
    let out = da.mapv(|v| v.clamp(lo, hi));
    Tensor::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let mut gx = g.clone();
            gx.zip_mut_with(&da, |gv, &x| {
                if x < lo || x > hi {
                    *gv = 0.0;
                }
            });
            vec![Some(gx)]
        }),
    )
}

/// Sum of all elements, returned as a `[1]` tensor.
pub fn sum_all(a: &Tensor) -> Tensor {
    let shape = a.shape();
    let s = a.data().sum();
    Tensor::from_op(
        ArrayD::from_elem(IxDyn(&[1]), s),
        vec![a.clone()],
        Box::new(move |g| {
            let gv = g[[0]];
            vec![Some(ArrayD::from_elem(IxDyn(&shape), gv))]
        }),
    )
}

/// Mean of all elements, returned as a `[1]` tensor.
pub fn mean_all(a: &Tensor) -> Tensor {
    let n = a.len() as f64;
    mul_scalar(&sum_all(a), 1.0 / n)
}

/// Fully connected layer: `x (N,Cin) @ w^T (Cin,Cout) + b`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let xd = x.to_data().into_dimensionality::<Ix2>().unwrap();
    let wd = w.to_data().into_dimensionality::<Ix2>().unwrap();
    assert_eq!(xd.ncols(), wd.ncols(), "linear: in-feature mismatch");
    let mut out = xd.dot(&wd.t());
    if let Some(b) = b {
        let bd = b.to_data();
        let bv = bd.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        out += &bv;
    }
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let has_bias = b.is_some();
    Tensor::from_op(
        out.into_dyn(),
        parents,
        Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let gx = g2.dot(&wd).into_dyn();
            let gw = g2.t().dot(&xd).into_dyn();
            let mut grads = vec![Some(gx), Some(gw)];
            if has_bias {
                grads.push(Some(g2.sum_axis(Axis(0)).into_dyn()));
            }
            grads
        }),
    )
}

/// Global average pooling: `(N,C,H,W) -> (N,C)`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let xd = x.to_data().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = xd.dim();
    let area = (h * w) as f64;
    let mut out = ndarray::Array2::<f64>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            out[[ni, ci]] = xd
                .index_axis(Axis(0), ni)
                .index_axis(Axis(0), ci)
                .sum()
                / area;
        }
    }
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut gx = ndarray::Array4::<f64>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    gx.index_axis_mut(Axis(0), ni)
                        .index_axis_mut(Axis(0), ci)
                        .fill(g2[[ni, ci]] / area);
                }
            }
            vec![Some(gx.into_dyn())]
        }),
    )
}

/// Per-channel recalibration: `out[n,c,h,w] = x[n,c,h,w] * gate[n,c]`.
pub fn scale_channels(x: &Tensor, gate: &Tensor) -> Tensor {
    let xd = x.to_data().into_dimensionality::<Ix4>().unwrap();
    let gd = gate.to_data().into_dimensionality::<Ix2>().unwrap();
    let (n, c, h, w) = xd.dim();
    assert_eq!(gd.dim(), (n, c), "scale_channels: gate shape mismatch");
    let mut out = xd.clone();
    for ni in 0..n {
        for ci in 0..c {
            out.index_axis_mut(Axis(0), ni)
                .index_axis_mut(Axis(0), ci)
                .mapv_inplace(|v| v * gd[[ni, ci]]);
        }
    }
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone(), gate.clone()],
        Box::new(move |g| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let mut gx = g4.to_owned();
            let mut gg = ndarray::Array2::<f64>::zeros((n, c));
            for ni in 0..n {
                for ci in 0..c {
                    gx.index_axis_mut(Axis(0), ni)
                        .index_axis_mut(Axis(0), ci)
                        .mapv_inplace(|v| v * gd[[ni, ci]]);
                    let prod = &g4.index_axis(Axis(0), ni).index_axis(Axis(0), ci)
                        * &xd.index_axis(Axis(0), ni).index_axis(Axis(0), ci);
                    gg[[ni, ci]] = prod.sum();
                }
            }
            let _ = h;
            let _ = w;
            vec![Some(gx.into_dyn()), Some(gg.into_dyn())]
        }),
    )
}

/// Per-location recalibration: `out[n,c,h,w] = x[n,c,h,w] * gate[n,h,w]`.
pub fn scale_spatial(x: &Tensor, gate: &Tensor) -> Tensor {
    let xd = x.to_data().into_dimensionality::<Ix4>().unwrap();
    let gd = gate
        .to_data()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap();
    let (n, c, h, w) = xd.dim();
    assert_eq!(gd.dim(), (n, h, w), "scale_spatial: gate shape mismatch");
    let mut out = xd.clone();
    for ni in 0..n {
        let gplane = gd.index_axis(Axis(0), ni);
        for ci in 0..c {
            let mut plane = out.index_axis_mut(Axis(0), ni);
            let mut plane = plane.index_axis_mut(Axis(0), ci);
            plane.zip_mut_with(&gplane, |v, &gv| *v *= gv);
        }
    }
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone(), gate.clone()],
        Box::new(move |g| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let mut gx = g4.to_owned();
            let mut gg = ndarray::Array3::<f64>::zeros((n, h, w));
            for ni in 0..n {
                let gplane = gd.index_axis(Axis(0), ni);
                let mut acc = gg.index_axis_mut(Axis(0), ni);
                for ci in 0..c {
                    let mut gxp = gx.index_axis_mut(Axis(0), ni);
                    let mut gxp = gxp.index_axis_mut(Axis(0), ci);
                    gxp.zip_mut_with(&gplane, |v, &gv| *v *= gv);
                    let prod = &g4.index_axis(Axis(0), ni).index_axis(Axis(0), ci)
                        * &xd.index_axis(Axis(0), ni).index_axis(Axis(0), ci);
                    acc += &prod;
                }
            }
            vec![Some(gx.into_dyn()), Some(gg.into_dyn())]
        }),
    )
}

/// Concatenation along the channel axis of `(N,C,H,W)` tensors.
pub fn concat_channels(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let arrays: Vec<_> = parts
        .iter()
        .map(|t| t.to_data().into_dimensionality::<Ix4>().unwrap())
        .collect();
    let views: Vec<_> = arrays.iter().map(|a| a.view()).collect();
    let out = ndarray::concatenate(Axis(1), &views).expect("concat_channels: shape mismatch");
    let channels: Vec<usize> = arrays.iter().map(|a| a.dim().1).collect();
    Tensor::from_op(
        out.into_dyn(),
        parts.to_vec(),
        Box::new(move |g| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let mut grads = Vec::with_capacity(channels.len());
            let mut start = 0;
            for &ch in &channels {
                let slice = g4
                    .slice_axis(Axis(1), ndarray::Slice::from(start..start + ch))
                    .to_owned();
                grads.push(Some(slice.into_dyn()));
                start += ch;
            }
            grads
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use ndarray::{arr1, Array4};
    use rand::Rng;
    use rand::SeedableRng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0));
        Tensor::parameter(data)
    }

    #[test]
    fn elementwise_values() {
        let a = Tensor::constant(arr1(&[1.0, -2.0]).into_dyn());
        let b = Tensor::constant(arr1(&[3.0, 5.0]).into_dyn());
        assert_eq!(add(&a, &b).to_data(), arr1(&[4.0, 3.0]).into_dyn());
        assert_eq!(maximum(&a, &b).to_data(), arr1(&[3.0, 5.0]).into_dyn());
        assert_eq!(relu(&a).to_data(), arr1(&[1.0, 0.0]).into_dyn());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let a = Tensor::constant(arr1(&[-800.0, 800.0]).into_dyn());
        let s = sigmoid(&a).to_data();
        assert!(s[[0]] >= 0.0 && s[[0]] < 1e-300);
        assert!((s[[1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grads_match_finite_differences() {
        let x = rand_tensor(&[2, 3], 1);
        let y = rand_tensor(&[2, 3], 2);
        check_gradients(&[x.clone(), y.clone()], || {
            let t = mul(&sigmoid(&x), &maximum(&y, &mul_scalar(&x, 0.5)));
            mean_all(&swish(&t))
        });
    }

    #[test]
    fn linear_grads_match_finite_differences() {
        let x = rand_tensor(&[3, 4], 3);
        let w = rand_tensor(&[2, 4], 4);
        let b = rand_tensor(&[2], 5);
        check_gradients(&[x.clone(), w.clone(), b.clone()], || {
            mean_all(&sigmoid(&linear(&x, &w, Some(&b))))
        });
    }

    #[test]
    fn pool_scale_concat_grads() {
        let x = rand_tensor(&[2, 3, 2, 2], 6);
        let g = rand_tensor(&[2, 3], 7);
        check_gradients(&[x.clone(), g.clone()], || {
            let gate = sigmoid(&g);
            let scaled = scale_channels(&x, &gate);
            let pooled = global_avg_pool(&scaled);
            mean_all(&pooled)
        });

        let s = rand_tensor(&[2, 2, 2], 8);
        check_gradients(&[x.clone(), s.clone()], || {
            mean_all(&scale_spatial(&x, &sigmoid(&s)))
        });

        let y = rand_tensor(&[2, 2, 2, 2], 9);
        let z = rand_tensor(&[2, 1, 2, 2], 10);
        check_gradients(&[y.clone(), z.clone()], || {
            mean_all(&powf(&sigmoid(&concat_channels(&[y.clone(), z.clone()])), 2.0))
        });
    }

    #[test]
    fn ln_and_clamp_grads() {
        let x = Tensor::parameter(
            Array4::from_shape_fn((1, 1, 2, 2), |(_, _, i, j)| 0.3 + 0.1 * (i + 2 * j) as f64)
                .into_dyn(),
        );
        check_gradients(&[x.clone()], || neg(&mean_all(&ln(&clamp(&x, 1e-7, 1.0)))));
    }
}
