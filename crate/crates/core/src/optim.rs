//! Adam with bias-corrected moments.

use smag_tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Real> {
    pub lr: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &[Tensor<T>], lr: f64, weight_decay: f64) -> Self {
        let zeros = |t: &Tensor<T>| Tensor::zeros(t.shape().to_vec());
        Self {
            lr,
            weight_decay,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i].as_f64() + self.weight_decay * pd[i].as_f64();
                let mi = BETA1 * md[i].as_f64() + (1.0 - BETA1) * gi;
                let vi = BETA2 * vd[i].as_f64() + (1.0 - BETA2) * gi * gi;
                md[i] = T::lit(mi);
                vd[i] = T::lit(vi);
                let delta = self.lr * (mi / bc1) / ((vi / bc2).sqrt() + EPS);
                pd[i] = T::lit(pd[i].as_f64() - delta);
            }
        }
    }
}
