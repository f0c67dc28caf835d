use std::collections::BTreeMap;

use super::params::ParamSet;
use super::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.first.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.second.get(name)
    }

    /// One update over every parameter in `params`. Parameters missing from
    /// `grads` are treated as having a zero gradient.
    ///
    /// Panics when a gradient's shape differs from its parameter's.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let (r, c) = p.shape();
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(r, c));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(r, c));
            let Some(g) = grads.get(name) else {
                // zero gradient: moments only decay
                m.data_mut().iter_mut().for_each(|x| *x *= self.beta1);
                v.data_mut().iter_mut().for_each(|x| *x *= self.beta2);
                for (pp, (mm, vv)) in p.data_mut().iter_mut().zip(m.data().iter().zip(v.data())) {
                    *pp -= self.lr * (mm / bc1) / ((vv / bc2).sqrt() + self.eps);
                }
                continue;
            };
            assert_eq!(
                g.shape(),
                (r, c),
                "gradient shape {:?} does not match parameter `{name}` {:?}",
                g.shape(),
                (r, c)
            );
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::filled(2, 2, value));
        p
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = one_param(0.7);
        let before = p.clone();
        let mut adam = AdamState::new(1e-3);
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::zeros(2, 2));
        for _ in 0..5 {
            adam.step(&mut p, &g);
        }
        assert_eq!(p, before);
        assert_eq!(adam.first_moment("w").unwrap(), &Tensor::zeros(2, 2));
        assert_eq!(adam.second_moment("w").unwrap(), &Tensor::zeros(2, 2));
        assert_eq!(adam.steps(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // t=1: m = 0.1, v = 0.001, mhat = vhat = 1, update = lr / (1 + eps)
        let mut p = one_param(0.0);
        let mut adam = AdamState::new(1e-3);
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::filled(2, 2, 1.0));
        adam.step(&mut p, &g);
        let expected = -1e-3 / (1.0 + 1e-8);
        for v in p.get("w").unwrap().data() {
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn two_steps_match_recurrence() {
        let (lr, b1, b2, eps) = (1e-3, 0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.25f64);
        for t in 1..=2 {
            let g = 1.0;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        let mut p = one_param(0.25);
        let mut adam = AdamState::new(lr);
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::filled(2, 2, 1.0));
        adam.step(&mut p, &g);
        adam.step(&mut p, &g);
        for val in p.get("w").unwrap().data() {
            assert!((val - x).abs() < 1e-12);
        }
    }

    #[test]
    #[should_panic(expected = "does not match parameter `w`")]
    fn shape_mismatch_is_fatal() {
        let mut p = one_param(0.0);
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::zeros(3, 1));
        AdamState::new(1e-3).step(&mut p, &g);
    }
}
