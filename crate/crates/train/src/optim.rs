use abd_nn::UNet;

use crate::config::OptimConfig;

/// Momentum SGD with coupled weight decay and polynomial learning-rate decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: OptimConfig,
    pub t_total: u64,
}

impl Sgd {
    pub fn new(config: OptimConfig, t_total: u64) -> Self {
        Self { config, t_total }
    }

    /// `lr0 * (1 - t / t_total)^poly_power`, zero once `t >= t_total`.
    pub fn lr(&self, t: u64) -> f64 {
        let frac = (t.min(self.t_total) as f64) / self.t_total as f64;
        self.config.lr0 * (1.0 - frac).powf(self.config.poly_power)
    }

    /// `v = momentum * v + (g + wd * w)`, then `w -= lr * v`.
    pub fn step(&self, net: &mut UNet<f32>, t: u64) {
        let lr = self.lr(t) as f32;
        let momentum = self.config.momentum as f32;
        let wd = self.config.weight_decay as f32;
        for p in net.params_mut() {
            let abd_nn::Param { value, grad, velocity } = p;
            ndarray::Zip::from(value).and(&*grad).and(velocity).for_each(|w, &g, v| {
                *v = momentum * *v + (g + wd * *w);
                *w -= lr * *v;
            });
        }
    }
}
