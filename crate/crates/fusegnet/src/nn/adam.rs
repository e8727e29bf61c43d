//! Adaptive-moment optimizer with decoupled-from-schedule learning rate.

use super::tensor::{Data, Tensor};

pub struct Adam {
    params: Vec<Tensor>,
    m: Vec<Data>,
    v: Vec<Data>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step_count: u64,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, lr: f64, weight_decay: f64) -> Self {
        let m = params.iter().map(|p| Data::zeros(p.data().raw_dim())).collect();
        let v = params.iter().map(|p| Data::zeros(p.data().raw_dim())).collect();
        Adam {
            params,
            m,
            v,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one update from the accumulated gradients and clears them.
    /// Parameters without a gradient this step are left untouched.
    pub fn step(&mut self) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (i, p) in self.params.iter().enumerate() {
            let Some(mut g) = p.take_grad() else { continue };
            if self.weight_decay != 0.0 {
                g.scaled_add(self.weight_decay, &p.data());
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(&g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(&g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let lr = self.lr;
            let eps = self.eps;
            p.update_data(|data| {
                ndarray::Zip::from(data).and(&*m).and(&*v).for_each(|p, &m, &v| {
                    let mh = m / bc1;
                    let vh = v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
            });
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}
