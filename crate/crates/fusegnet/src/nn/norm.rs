//! Batch normalization over `(N,C,H,W)` feature maps.

use super::tensor::Tensor;
use ndarray::{Array1, Array4, Axis, Ix4};

/// Training vs. inference behavior switch threaded through every forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct BatchNorm2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            weight: Tensor::parameter(Array1::ones(channels).into_dyn()),
            bias: Tensor::parameter(Array1::zeros(channels).into_dyn()),
            running_mean: Tensor::constant(Array1::zeros(channels).into_dyn()),
            running_var: Tensor::constant(Array1::ones(channels).into_dyn()),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Tensor {
        let xd = x.to_data().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xd.dim();
        let m = (n * h * w) as f64;
        let gamma = self.weight.to_data();
        let beta = self.bias.to_data();

        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = Array1::<f64>::zeros(c);
                let mut var = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    let mut sum = 0.0;
                    let mut sq = 0.0;
                    for ni in 0..n {
                        for v in xd.index_axis(Axis(0), ni).index_axis(Axis(0), ci).iter() {
                            sum += v;
                            sq += v * v;
                        }
                    }
                    let mu = sum / m;
                    mean[ci] = mu;
                    var[ci] = (sq / m - mu * mu).max(0.0);
                }
                // Update running statistics (unbiased variance, torch-style).
                let mom = self.momentum;
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                self.running_mean.update_data(|rm| {
                    for ci in 0..c {
                        rm[ci] = (1.0 - mom) * rm[ci] + mom * mean[ci];
                    }
                });
                self.running_var.update_data(|rv| {
                    for ci in 0..c {
                        rv[ci] = (1.0 - mom) * rv[ci] + mom * var[ci] * unbias;
                    }
                });
                (mean, var)
            }
            Mode::Eval => {
                let rm = self.running_mean.to_data();
                let rv = self.running_var.to_data();
                (
                    Array1::from_iter(rm.iter().cloned()),
                    Array1::from_iter(rv.iter().cloned()),
                )
            }
        };

        let eps = self.eps;
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let mut xhat = xd.clone();
        let mut out = Array4::<f64>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let mu = mean[ci];
                let is = inv_std[ci];
                let (g, b) = (gamma[ci], beta[ci]);
                let mut xh = xhat.index_axis_mut(Axis(0), ni);
                let mut xh = xh.index_axis_mut(Axis(0), ci);
                xh.mapv_inplace(|v| (v - mu) * is);
                let mut o = out.index_axis_mut(Axis(0), ni);
                let mut o = o.index_axis_mut(Axis(0), ci);
                o.assign(&xh);
                o.mapv_inplace(|v| g * v + b);
            }
        }

        let batch_mode = mode == Mode::Train;
        let saved_xhat = xhat;
        let saved_inv_std = inv_std;
        Tensor::from_op(
            out.into_dyn(),
            vec![x.clone(), self.weight.clone(), self.bias.clone()],
            Box::new(move |gout| {
                let g4 = gout.view().into_dimensionality::<Ix4>().unwrap();
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    let mut dg = 0.0;
                    let mut db = 0.0;
                    for ni in 0..n {
                        let gv = g4.index_axis(Axis(0), ni);
                        let gv = gv.index_axis(Axis(0), ci);
                        let xh = saved_xhat.index_axis(Axis(0), ni);
                        let xh = xh.index_axis(Axis(0), ci);
                        for (g, x) in gv.iter().zip(xh.iter()) {
                            dg += g * x;
                            db += g;
                        }
                    }
                    dgamma[ci] = dg;
                    dbeta[ci] = db;
                }
                let mut gx = Array4::<f64>::zeros((n, c, h, w));
                for ci in 0..c {
                    let gmul = gamma[ci] * saved_inv_std[ci];
                    let (mg, mgx) = (dbeta[ci] / m, dgamma[ci] / m);
                    for ni in 0..n {
                        let gv = g4.index_axis(Axis(0), ni);
                        let gv = gv.index_axis(Axis(0), ci);
                        let xh = saved_xhat.index_axis(Axis(0), ni);
                        let xh = xh.index_axis(Axis(0), ci);
                        let mut gxp = gx.index_axis_mut(Axis(0), ni);
                        let mut gxp = gxp.index_axis_mut(Axis(0), ci);
                        if batch_mode {
                            ndarray::Zip::from(&mut gxp)
                                .and(&gv)
                                .and(&xh)
                                .for_each(|o, &g, &x| *o = gmul * (g - mg - x * mgx));
                        } else {
                            ndarray::Zip::from(&mut gxp)
                                .and(&gv)
                                .for_each(|o, &g| *o = gmul * g);
                        }
                    }
                }
                vec![
                    Some(gx.into_dyn()),
                    Some(dgamma.into_dyn()),
                    Some(dbeta.into_dyn()),
                ]
            }),
        )
    }
}
