//! Adam optimizer over a [`ParamStore`].

use crate::tape::{Grads, ParamStore};
use crate::tensor::Mat;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m = (0..store.len())
            .map(|s| Mat::zeros(store.get(s).rows, store.get(s).cols))
            .collect();
        let v = (0..store.len())
            .map(|s| Mat::zeros(store.get(s).rows, store.get(s).cols))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for slot in 0..store.len() {
            let Some(g) = grads.get(slot) else { continue };
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let p = store.get_mut(slot);
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m.data[k] / bc1;
                let vhat = v.data[k] / bc2;
                p.data[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        store.add("w", Mat::from_vec(1, 2, vec![0.5, -0.5]));
        let before = store.by_name("w").data.clone();
        let mut opt = Adam::new(&store, 0.1);
        let grads = Grads::new(&store); // nothing accumulated
        opt.step(&mut store, &grads);
        assert_eq!(store.by_name("w").data, before);
    }

    #[test]
    fn one_step_descends_convex_objective() {
        // f(w) = sum((w - 3)^2)
        let mut store = ParamStore::new();
        store.add("w", Mat::from_vec(1, 2, vec![0.0, 1.0]));
        let mut opt = Adam::new(&store, 0.05);
        let eval = |store: &ParamStore| -> (Tape, crate::tape::Var) {
            let mut tape = Tape::new();
            let w = tape.param(store, store.slot("w"));
            let target = tape.constant(Mat::from_vec(1, 2, vec![3.0, 3.0]));
            let diff = tape.sub(w, target);
            let sq = tape.mul(diff, diff);
            let loss = tape.sum_all(sq);
            (tape, loss)
        };
        let (tape, loss) = eval(&store);
        let before = tape.scalar(loss);
        let grads = tape.backward(loss, &store);
        opt.step(&mut store, &grads);
        let (tape, loss) = eval(&store);
        assert!(tape.scalar(loss) < before);
    }
}
