use crate::numerics::{ParamGrads, ParamId, ParamStore};

/// Adaptive-moment optimizer with optional per-parameter learning-rate
/// multipliers and decoupled weight decay. Parameters without a gradient in a
/// step are left untouched, moments included.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    scale: Vec<f64>,
    decay: Vec<f64>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let n = zeros.len();
        Self { lr, beta1, beta2, eps, step: 0, m: zeros.clone(), v: zeros, scale: vec![1.0; n], decay: vec![0.0; n] }
    }

    pub fn set_lr_scale(&mut self, id: ParamId, s: f64) {
        self.scale[id.index()] = s;
    }

    pub fn set_weight_decay(&mut self, id: ParamId, wd: f64) {
        self.decay[id.index()] = wd;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            let lr = self.lr * self.scale[id.index()];
            let wd = self.decay[id.index()];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + wd * p[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn matches_scalar_reference() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::row(vec![3.0]));
        let mut opt = Adam::new(&store, 1e-2, 0.9, 0.999, 1e-8);
        // Reference written out longhand for f(x) = (x - 1)^2.
        let (mut x, mut m, mut v) = (3.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * (x - 1.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 1e-2 * mh / (vh.sqrt() + 1e-8);

            let cur = store.get(id).data()[0];
            let grads = ParamGrads { grads: vec![Some(vec![2.0 * (cur - 1.0)])] };
            opt.step(&mut store, &grads);
            assert!((store.get(id).data()[0] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::row(vec![1.0, -2.0]));
        let before = store.clone();
        let mut opt = Adam::new(&store, 0.0, 0.9, 0.999, 1e-8);
        opt.step(&mut store, &ParamGrads { grads: vec![Some(vec![5.0, 1.0])] });
        assert_eq!(store, before);
    }
}
